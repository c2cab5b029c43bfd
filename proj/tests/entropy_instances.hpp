// Test-only generators of randomized (joint, noise, g) instances for the
// entropy identity checks. Kept independent of the verifier implementation.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "metaaug/infotheory.hpp"
#include "metaaug/rng.hpp"

namespace metaaug::testgen {

inline std::vector<std::string> symbols(const std::string& prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

/// Full-support joint with Exp(1)-proportional random mass.
inline FiniteJoint random_joint(Rng& rng, int nx, int ny) {
  FiniteJoint joint;
  joint.x_symbols = symbols("x", nx);
  joint.y_symbols = symbols("y", ny);
  joint.p.assign(nx, std::vector<double>(ny, 0.0));
  double total = 0.0;
  for (auto& row : joint.p) {
    for (double& v : row) {
      v = -std::log(1.0 - rng.uniform());
      total += v;
    }
  }
  for (auto& row : joint.p) {
    for (double& v : row) v /= total;
  }
  return joint;
}

inline NoiseSpec random_noise(Rng& rng, int ne) {
  NoiseSpec noise;
  noise.eps_symbols = symbols("e", ne);
  noise.p_eps.assign(ne, 0.0);
  double total = 0.0;
  for (double& v : noise.p_eps) {
    v = -std::log(1.0 - rng.uniform());
    total += v;
  }
  for (double& v : noise.p_eps) v /= total;
  return noise;
}

struct TableMap {
  std::map<std::pair<std::string, std::string>, std::string> table;

  AugmentMap fn() const {
    return [table = table](const std::string& e, const std::string& y) {
      return table.at({e, y});
    };
  }
};

/// Injective (eps, y) -> y': every pair maps to a distinct output symbol,
/// with the codomain shuffled for variety.
inline TableMap random_injective_map(Rng& rng, const NoiseSpec& noise,
                                     const FiniteJoint& joint) {
  const int pairs = static_cast<int>(noise.eps_symbols.size() *
                                     joint.y_symbols.size());
  const std::vector<int> perm = rng.permutation(pairs);
  TableMap map;
  int next = 0;
  for (const auto& e : noise.eps_symbols) {
    for (const auto& y : joint.y_symbols) {
      map.table[{e, y}] = "o" + std::to_string(perm[next++]);
    }
  }
  return map;
}

/// Non-injective map: outputs drawn from a codomain no larger than |Y|,
/// with one collision forced explicitly.
inline TableMap random_noninjective_map(Rng& rng, const NoiseSpec& noise,
                                        const FiniteJoint& joint) {
  const int ny = static_cast<int>(joint.y_symbols.size());
  TableMap map;
  for (const auto& e : noise.eps_symbols) {
    for (const auto& y : joint.y_symbols) {
      map.table[{e, y}] = "o" + std::to_string(rng.uniform_int(ny));
    }
  }
  map.table[{noise.eps_symbols[0], joint.y_symbols[0]}] = "o0";
  map.table[{noise.eps_symbols[1], joint.y_symbols[0]}] = "o0";
  return map;
}

/// Per-eps random permutation of Y: always invertible in y given eps,
/// not necessarily injective jointly.
inline TableMap random_per_eps_permutation(Rng& rng, const NoiseSpec& noise,
                                           const FiniteJoint& joint) {
  const int ny = static_cast<int>(joint.y_symbols.size());
  TableMap map;
  for (const auto& e : noise.eps_symbols) {
    const std::vector<int> perm = rng.permutation(ny);
    for (int y = 0; y < ny; ++y) {
      map.table[{e, joint.y_symbols[y]}] = "o" + std::to_string(perm[y]);
    }
  }
  return map;
}

/// Serializes an instance into the verify-entropy text format.
inline std::string to_spec_text(const FiniteJoint& joint, const NoiseSpec& noise,
                                const TableMap& map) {
  std::string out = "x =";
  for (const auto& s : joint.x_symbols) out += " " + s;
  out += "\ny =";
  for (const auto& s : joint.y_symbols) out += " " + s;
  out += "\n";
  char buf[40];
  for (const auto& row : joint.p) {
    out += "p =";
    for (double v : row) {
      std::snprintf(buf, sizeof(buf), " %.17g", v);
      out += buf;
    }
    out += "\n";
  }
  out += "eps =";
  for (const auto& s : noise.eps_symbols) out += " " + s;
  out += "\np_eps =";
  for (double v : noise.p_eps) {
    std::snprintf(buf, sizeof(buf), " %.17g", v);
    out += buf;
  }
  out += "\n";
  for (const auto& [key, y_prime] : map.table) {
    out += "g " + key.first + " " + key.second + " = " + y_prime + "\n";
  }
  return out;
}

}  // namespace metaaug::testgen
