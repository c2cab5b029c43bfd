#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "metaaug/rng.hpp"
#include "metaaug/tasks.hpp"

namespace metaaug {

enum class AugKind {
  identity,
  label_permutation,
  additive_uniform,
  additive_discrete,
  input_jitter,
};

enum class CeClass { preserving, increasing };

class AugmentError : public std::runtime_error {
 public:
  explicit AugmentError(const std::string& what) : std::runtime_error(what) {}
};

/// A per-episode transform (eps, x, y) -> (x', y'). Kinds that touch the
/// targets carry a shared random key and raise conditional entropy; kinds
/// that only perturb inputs preserve it.
struct Augmentation {
  AugKind kind = AugKind::identity;
  double alpha = 0.0;                      // additive_uniform noise scale
  std::optional<double> wrap_range;        // wrap targets into [0, range)
  std::vector<double> value_set;           // additive_discrete choices
  double sigma = 0.0;                      // input_jitter stddev

  static Augmentation identity() { return {}; }

  static Augmentation label_permutation() {
    Augmentation a;
    a.kind = AugKind::label_permutation;
    return a;
  }

  static Augmentation additive_uniform(double alpha,
                                       std::optional<double> wrap = {}) {
    Augmentation a;
    a.kind = AugKind::additive_uniform;
    a.alpha = alpha;
    a.wrap_range = wrap;
    return a;
  }

  static Augmentation additive_discrete(std::vector<double> values,
                                        std::optional<double> wrap = {}) {
    if (values.empty()) {
      throw AugmentError("additive_discrete: empty value set");
    }
    for (size_t i = 0; i < values.size(); ++i) {
      for (size_t j = i + 1; j < values.size(); ++j) {
        if (values[i] == values[j]) {
          throw AugmentError("additive_discrete: duplicate value in set");
        }
      }
    }
    Augmentation a;
    a.kind = AugKind::additive_discrete;
    a.value_set = std::move(values);
    a.wrap_range = wrap;
    return a;
  }

  static Augmentation input_jitter(double sigma) {
    Augmentation a;
    a.kind = AugKind::input_jitter;
    a.sigma = sigma;
    return a;
  }

  CeClass ce_class() const {
    switch (kind) {
      case AugKind::label_permutation:
      case AugKind::additive_uniform:
      case AugKind::additive_discrete:
        return CeClass::increasing;
      case AugKind::identity:
      case AugKind::input_jitter:
        return CeClass::preserving;
    }
    return CeClass::preserving;
  }

  bool invertible() const { return kind != AugKind::input_jitter; }
};

namespace detail {

// Mathematical modulo: result in [0, range).
inline double wrap_into(double v, double range) {
  double r = std::fmod(v, range);
  if (r < 0.0) r += range;
  return r;
}

}  // namespace detail

/// Draws the episode key for an augmentation. One key per episode; the
/// same key transforms support and query targets.
inline AugKey draw_key(const Augmentation& aug, int n_way, Rng& rng) {
  AugKey key;
  switch (aug.kind) {
    case AugKind::identity:
    case AugKind::input_jitter:
      break;
    case AugKind::label_permutation:
      key.perm = rng.permutation(n_way);
      break;
    case AugKind::additive_uniform:
      if (aug.wrap_range) {
        key.eps = rng.uniform(-*aug.wrap_range * aug.alpha,
                              *aug.wrap_range * aug.alpha);
      } else {
        key.eps = rng.uniform(-aug.alpha, aug.alpha);
      }
      break;
    case AugKind::additive_discrete:
      key.eps = aug.value_set[rng.uniform_int(static_cast<int>(aug.value_set.size()))];
      break;
  }
  return key;
}

/// Applies an augmentation to one episode. A single key (drawn here) is
/// shared across the support and query targets.
inline Episode apply(const Augmentation& aug, const Episode& ep, Rng& rng) {
  if (aug.kind == AugKind::label_permutation && !ep.classification) {
    throw AugmentError("label_permutation requires a classification episode");
  }
  if ((aug.kind == AugKind::additive_uniform ||
       aug.kind == AugKind::additive_discrete) &&
      ep.classification) {
    throw AugmentError("additive augmentation requires a regression episode");
  }

  Episode out = ep;
  if (aug.kind == AugKind::identity) return out;

  AugKey key = draw_key(aug, ep.n_way, rng);
  auto transform_targets = [&](const Tensor& y) {
    Tensor t = y.detach();
    auto d = t.mutable_data();
    if (aug.kind == AugKind::label_permutation) {
      for (double& v : d) v = key.perm[static_cast<int>(v)];
    } else {
      for (double& v : d) {
        v += key.eps;
        if (aug.wrap_range) v = detail::wrap_into(v, *aug.wrap_range);
      }
    }
    return t;
  };

  if (aug.kind == AugKind::input_jitter) {
    auto jitter = [&](const Tensor& x) {
      Tensor t = x.detach();
      for (double& v : t.mutable_data()) v += aug.sigma * rng.normal();
      return t;
    };
    out.x_s = jitter(ep.x_s);
    out.x_q = jitter(ep.x_q);
    return out;
  }

  out.y_s = transform_targets(ep.y_s);
  out.y_q = transform_targets(ep.y_q);
  if (aug.kind == AugKind::label_permutation) {
    out.meta.label_classes.assign(ep.n_way, -1);
    for (int slot = 0; slot < ep.n_way; ++slot) {
      out.meta.label_classes[key.perm[slot]] = ep.meta.label_classes.empty()
                                                   ? slot
                                                   : ep.meta.label_classes[slot];
    }
  }
  out.meta.augmented = true;
  out.meta.key = key;
  return out;
}

/// Exact inverse of apply for invertible kinds, given the episode key.
/// Wrapped targets are recovered modulo the wrap range.
inline Episode invert(const Augmentation& aug, const Episode& ep,
                      const AugKey& key) {
  if (!aug.invertible()) {
    throw AugmentError("invert: input_jitter is not invertible");
  }
  Episode out = ep;
  if (aug.kind == AugKind::identity) return out;

  auto restore_targets = [&](const Tensor& y) {
    Tensor t = y.detach();
    auto d = t.mutable_data();
    if (aug.kind == AugKind::label_permutation) {
      std::vector<int> inverse(key.perm.size());
      for (size_t i = 0; i < key.perm.size(); ++i) inverse[key.perm[i]] = static_cast<int>(i);
      for (double& v : d) v = inverse[static_cast<int>(v)];
    } else {
      for (double& v : d) {
        v -= key.eps;
        if (aug.wrap_range) v = detail::wrap_into(v, *aug.wrap_range);
      }
    }
    return t;
  };

  out.y_s = restore_targets(ep.y_s);
  out.y_q = restore_targets(ep.y_q);
  out.meta.augmented = false;
  out.meta.key = AugKey{};
  if (aug.kind == AugKind::label_permutation && !ep.meta.label_classes.empty()) {
    out.meta.label_classes.assign(ep.n_way, -1);
    for (int slot = 0; slot < ep.n_way; ++slot) {
      out.meta.label_classes[slot] = ep.meta.label_classes[key.perm[slot]];
    }
  }
  return out;
}

/// Sinusoid episode with optional CE-increasing target noise, the "(x, y+eps)"
/// task construction. The noise key is drawn once and shifts every support
/// and query target of the episode.
inline Episode sample_sinusoid_episode(const SinusoidFamily& fam, int k, int q,
                                       const std::optional<Augmentation>& noise,
                                       Rng& rng, bool fresh_task = false) {
  Episode ep = sample_sinusoid_episode(fam, k, q, rng, fresh_task);
  if (!noise) return ep;
  return apply(*noise, ep, rng);
}

}  // namespace metaaug
