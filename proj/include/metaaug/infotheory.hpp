#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaaug {

class InfoError : public std::runtime_error {
 public:
  explicit InfoError(const std::string& what) : std::runtime_error(what) {}
};

/// Exactly-enumerated joint distribution over finite (X, Y).
struct FiniteJoint {
  std::vector<std::string> x_symbols;
  std::vector<std::string> y_symbols;
  std::vector<std::vector<double>> p;  // p[x][y]

  void validate() const {
    if (p.size() != x_symbols.size()) {
      throw InfoError("joint: probability rows do not match x symbols");
    }
    double total = 0.0;
    for (const auto& row : p) {
      if (row.size() != y_symbols.size()) {
        throw InfoError("joint: probability row does not match y symbols");
      }
      for (double v : row) {
        if (v < 0.0) throw InfoError("joint: negative probability");
        total += v;
      }
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw InfoError("joint: probabilities sum to " + std::to_string(total));
    }
  }
};

/// Finite noise distribution, independent of (X, Y) by construction.
struct NoiseSpec {
  std::vector<std::string> eps_symbols;
  std::vector<double> p_eps;

  void validate() const {
    if (p_eps.size() != eps_symbols.size()) {
      throw InfoError("noise: probabilities do not match symbols");
    }
    double total = 0.0;
    for (double v : p_eps) {
      if (v < 0.0) throw InfoError("noise: negative probability");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw InfoError("noise: probabilities sum to " + std::to_string(total));
    }
  }

  /// H(eps) in bits.
  double entropy_bits() const {
    double h = 0.0;
    for (double v : p_eps) {
      if (v > 0.0) h -= v * std::log2(v);
    }
    return h;
  }
};

/// The augmentation map g: (eps, y) -> y', given as a function over symbols.
using AugmentMap =
    std::function<std::string(const std::string& eps, const std::string& y)>;

/// H(Y|X) in bits: sum_x p(x) sum_y -p(y|x) log2 p(y|x), with 0 log 0 = 0.
inline double conditional_entropy(const FiniteJoint& joint) {
  joint.validate();
  double h = 0.0;
  for (size_t xi = 0; xi < joint.x_symbols.size(); ++xi) {
    double px = 0.0;
    for (double v : joint.p[xi]) px += v;
    if (px <= 0.0) continue;
    for (double v : joint.p[xi]) {
      if (v > 0.0) h -= v * std::log2(v / px);
    }
  }
  return h;
}

struct AugmentedJoint {
  FiniteJoint joint;  // over (X, Y')
  /// True iff (eps, x, y) -> (x, y') is one-to-one on the support.
  bool injective = false;
};

/// Enumerates all (eps, x, y) triples, accumulating p(x, y') = sum over
/// preimages of p(eps) p(x, y).
inline AugmentedJoint augment_joint(const FiniteJoint& joint,
                                    const NoiseSpec& noise,
                                    const AugmentMap& g) {
  joint.validate();
  noise.validate();

  // Deterministic y' ordering: first appearance over the (eps, y) grid.
  std::vector<std::string> out_symbols;
  std::map<std::string, size_t> out_index;
  std::vector<std::vector<std::string>> mapped(
      noise.eps_symbols.size(),
      std::vector<std::string>(joint.y_symbols.size()));
  for (size_t ei = 0; ei < noise.eps_symbols.size(); ++ei) {
    for (size_t yi = 0; yi < joint.y_symbols.size(); ++yi) {
      std::string y_prime = g(noise.eps_symbols[ei], joint.y_symbols[yi]);
      if (out_index.emplace(y_prime, out_symbols.size()).second) {
        out_symbols.push_back(y_prime);
      }
      mapped[ei][yi] = std::move(y_prime);
    }
  }

  AugmentedJoint result;
  result.joint.x_symbols = joint.x_symbols;
  result.joint.y_symbols = out_symbols;
  result.joint.p.assign(joint.x_symbols.size(),
                        std::vector<double>(out_symbols.size(), 0.0));

  result.injective = true;
  std::set<std::pair<size_t, size_t>> seen;  // (x, y') with positive mass
  for (size_t ei = 0; ei < noise.eps_symbols.size(); ++ei) {
    if (noise.p_eps[ei] <= 0.0) continue;
    for (size_t xi = 0; xi < joint.x_symbols.size(); ++xi) {
      for (size_t yi = 0; yi < joint.y_symbols.size(); ++yi) {
        if (joint.p[xi][yi] <= 0.0) continue;
        const size_t oi = out_index.at(mapped[ei][yi]);
        if (!seen.emplace(xi, oi).second) result.injective = false;
        result.joint.p[xi][oi] += noise.p_eps[ei] * joint.p[xi][yi];
      }
    }
  }
  return result;
}

struct Theorem1Report {
  bool applicable = false;  // injectivity condition held
  bool pass = false;        // applicable and gap below tolerance
  double h_y_given_x = 0.0;
  double h_aug_given_x = 0.0;
  double h_eps = 0.0;
  double gap = 0.0;       // |H(Y'|X) - H(Y|X) - H(eps)|
  double increase = 0.0;  // H(Y'|X) - H(Y|X)

  std::string status() const {
    return applicable ? (pass ? "PASS" : "FAIL") : "NOT-APPLICABLE";
  }
};

inline constexpr double kTheorem1Tolerance = 1e-9;

/// Checks H(Y'|X) = H(Y|X) + H(eps) by exact enumeration. When the
/// one-to-one condition fails the identity need not hold, so the report is
/// NOT-APPLICABLE and carries the measured increase instead.
inline Theorem1Report verify_theorem1(const FiniteJoint& joint,
                                      const NoiseSpec& noise,
                                      const AugmentMap& g) {
  const AugmentedJoint aug = augment_joint(joint, noise, g);
  Theorem1Report report;
  report.applicable = aug.injective;
  report.h_y_given_x = conditional_entropy(joint);
  report.h_aug_given_x = conditional_entropy(aug.joint);
  report.h_eps = noise.entropy_bits();
  report.increase = report.h_aug_given_x - report.h_y_given_x;
  report.gap = std::abs(report.increase - report.h_eps);
  report.pass = aug.injective && report.gap < kTheorem1Tolerance;
  return report;
}

enum class CeVerdict { preserving, increasing, decreasing };

inline const char* ce_verdict_name(CeVerdict v) {
  switch (v) {
    case CeVerdict::preserving: return "preserving";
    case CeVerdict::increasing: return "increasing";
    case CeVerdict::decreasing: return "decreasing";
  }
  return "?";
}

/// Compares H(Y'|X') against H(Y|X) by enumeration (X' = X for maps of
/// the form g(eps, y)).
inline CeVerdict classify_augmentation(const FiniteJoint& joint,
                                       const NoiseSpec& noise,
                                       const AugmentMap& g) {
  const AugmentedJoint aug = augment_joint(joint, noise, g);
  const double before = conditional_entropy(joint);
  const double after = conditional_entropy(aug.joint);
  if (std::abs(after - before) <= kTheorem1Tolerance) {
    return CeVerdict::preserving;
  }
  return after > before ? CeVerdict::increasing : CeVerdict::decreasing;
}

// ---------------------------------------------------------------------------
// Text description of a (joint, noise, map) verification instance.
//
//   x = a b                  # X symbols
//   y = 0 1                  # Y symbols
//   p = 0.25 0.25            # one probability row per x symbol
//   p = 0.25 0.25
//   eps = e0 e1              # noise symbols
//   p_eps = 0.5 0.5          # noise probabilities
//   g e0 0 = 0               # g(eps, y) = y', one line per pair
//   ...
// ---------------------------------------------------------------------------

struct EntropySpec {
  FiniteJoint joint;
  NoiseSpec noise;
  std::map<std::pair<std::string, std::string>, std::string> g_table;

  AugmentMap map() const {
    return [table = g_table](const std::string& eps,
                             const std::string& y) -> std::string {
      const auto it = table.find({eps, y});
      if (it == table.end()) {
        throw InfoError("g table: no entry for (" + eps + ", " + y + ")");
      }
      return it->second;
    };
  }

  void validate() const {
    joint.validate();
    noise.validate();
    for (const auto& e : noise.eps_symbols) {
      for (const auto& y : joint.y_symbols) {
        if (!g_table.count({e, y})) {
          throw InfoError("g table: missing entry for (" + e + ", " + y + ")");
        }
      }
    }
  }
};

inline EntropySpec parse_entropy_spec(const std::string& text) {
  EntropySpec spec;
  std::vector<std::vector<double>> rows;
  std::istringstream stream(text);
  std::string line;
  int lineno = 0;
  auto tokens = [](const std::string& s) {
    std::istringstream ss(s);
    std::vector<std::string> out;
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
  };
  while (std::getline(stream, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto toks = tokens(line);
    if (toks.empty()) continue;
    const auto where = " at line " + std::to_string(lineno);
    if (toks[0] == "g") {
      // g <eps> <y> = <y'>
      if (toks.size() != 5 || toks[3] != "=") {
        throw InfoError("entropy spec: malformed g line" + where);
      }
      spec.g_table[{toks[1], toks[2]}] = toks[4];
      continue;
    }
    if (toks.size() < 3 || toks[1] != "=") {
      throw InfoError("entropy spec: expected 'key = values'" + where);
    }
    const std::vector<std::string> values(toks.begin() + 2, toks.end());
    auto as_doubles = [&] {
      std::vector<double> out;
      for (const auto& v : values) out.push_back(std::stod(v));
      return out;
    };
    if (toks[0] == "x") spec.joint.x_symbols = values;
    else if (toks[0] == "y") spec.joint.y_symbols = values;
    else if (toks[0] == "p") rows.push_back(as_doubles());
    else if (toks[0] == "eps") spec.noise.eps_symbols = values;
    else if (toks[0] == "p_eps") spec.noise.p_eps = as_doubles();
    else throw InfoError("entropy spec: unknown key '" + toks[0] + "'" + where);
  }
  spec.joint.p = std::move(rows);
  spec.validate();
  return spec;
}

}  // namespace metaaug
