#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metaaug/rng.hpp"
#include "metaaug/tensor.hpp"

namespace metaaug {

enum class SamplerMode { non_mutually_exclusive, intrashuffle, intershuffle };

inline const char* sampler_mode_name(SamplerMode m) {
  switch (m) {
    case SamplerMode::non_mutually_exclusive: return "nme";
    case SamplerMode::intrashuffle: return "intrashuffle";
    case SamplerMode::intershuffle: return "intershuffle";
  }
  return "?";
}

enum class Split { train, val, test };

/// Augmentation key attached to an episode; which member is live depends
/// on the augmentation kind.
struct AugKey {
  double eps = 0.0;
  std::vector<int> perm;
};

struct TaskMeta {
  // classification: class id occupying each label slot, and per-row ids
  std::vector<int> label_classes;
  std::vector<int> support_classes, query_classes;
  // regression
  double amplitude = 0.0, phase = 0.0;
  int interval = -1;
  // augmentation
  bool augmented = false;
  AugKey key;
};

/// One task instance: support set to adapt on, query set to score on.
struct Episode {
  Tensor x_s, y_s, x_q, y_q;
  bool classification = false;
  int n_way = 0, k_shot = 0, n_query = 0;
  TaskMeta meta;

  std::vector<int> support_labels() const { return labels_of(y_s); }
  std::vector<int> query_labels() const { return labels_of(y_q); }

 private:
  static std::vector<int> labels_of(const Tensor& y) {
    std::vector<int> out(y.numel());
    auto p = y.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(p[i]);
    return out;
  }
};

/// Pool of labeled example vectors, with a fixed partition into N-class
/// groups (used by the non-mutually-exclusive and intrashuffle regimes)
/// and per-class train/val/test example splits.
struct ClassPool {
  struct ClassEntry {
    int id = 0;
    std::vector<std::vector<double>> examples;
    int train_end = 0, val_end = 0;  // splits: [0,te), [te,ve), [ve,end)

    std::pair<int, int> range(Split s) const {
      switch (s) {
        case Split::train: return {0, train_end};
        case Split::val: return {train_end, val_end};
        case Split::test: return {val_end, static_cast<int>(examples.size())};
      }
      return {0, 0};
    }
  };

  int dim = 0;
  std::vector<ClassEntry> classes;
  int group_size = 0;
  std::vector<std::vector<int>> partition;  // groups of class indices

  int n_classes() const { return static_cast<int>(classes.size()); }

  /// Sequential disjoint groups of N classes; a remainder smaller than N
  /// is left out of the partition (it stays reachable for intershuffle).
  void build_partition(int n_way) {
    group_size = n_way;
    partition.clear();
    for (int start = 0; start + n_way <= n_classes(); start += n_way) {
      std::vector<int> group(n_way);
      for (int i = 0; i < n_way; ++i) group[i] = start + i;
      partition.push_back(std::move(group));
    }
  }

  /// Pool restricted to the given class indices (splits preserved).
  ClassPool subset(const std::vector<int>& class_indices) const {
    ClassPool out;
    out.dim = dim;
    for (int idx : class_indices) out.classes.push_back(classes[idx]);
    if (group_size > 0) out.build_partition(group_size);
    return out;
  }

  void split_examples(double train_frac, double val_frac) {
    for (auto& c : classes) {
      const int n = static_cast<int>(c.examples.size());
      c.train_end = std::max(1, static_cast<int>(n * train_frac));
      c.val_end = std::min(
          n, c.train_end + std::max(1, static_cast<int>(n * val_frac)));
    }
  }
};

/// k-shot N-way episode under one of the three sampling regimes.
///
/// The rng is split per draw purpose so that regimes consuming the same
/// seed produce episodes differing only in label assignment: under
/// non-mutually-exclusive and intrashuffle the same classes and examples
/// are drawn, and only intrashuffle's label permutation differs.
inline Episode sample_classification_episode(const ClassPool& pool,
                                             SamplerMode mode, int k, int n_way,
                                             int q, Rng& rng,
                                             Split split = Split::train) {
  if (pool.n_classes() < n_way) {
    throw TensorError("episode: pool has " + std::to_string(pool.n_classes()) +
                      " classes, need " + std::to_string(n_way));
  }
  Rng draw_rng = rng.child();  // class choice + example draws
  Rng perm_rng = rng.child();  // label shuffling only

  std::vector<int> class_indices(n_way);  // class index per label slot
  if (mode == SamplerMode::intershuffle) {
    class_indices = draw_rng.sample_without_replacement(pool.n_classes(), n_way);
  } else {
    if (pool.partition.empty() || pool.group_size != n_way) {
      throw TensorError("episode: pool partition not built for N=" +
                        std::to_string(n_way));
    }
    const auto& group =
        pool.partition[draw_rng.uniform_int(static_cast<int>(pool.partition.size()))];
    class_indices = group;
    if (mode == SamplerMode::intrashuffle) {
      const std::vector<int> perm = perm_rng.permutation(n_way);
      std::vector<int> shuffled(n_way);
      for (int i = 0; i < n_way; ++i) shuffled[perm[i]] = class_indices[i];
      class_indices = shuffled;
    }
  }

  const int d = pool.dim;
  Episode ep;
  ep.classification = true;
  ep.n_way = n_way;
  ep.k_shot = k;
  ep.n_query = q;
  ep.x_s = Tensor::zeros(Shape{k * n_way, d});
  ep.y_s = Tensor::zeros(Shape{k * n_way});
  ep.x_q = Tensor::zeros(Shape{q * n_way, d});
  ep.y_q = Tensor::zeros(Shape{q * n_way});
  auto xs = ep.x_s.mutable_data();
  auto ys = ep.y_s.mutable_data();
  auto xq = ep.x_q.mutable_data();
  auto yq = ep.y_q.mutable_data();

  // Draw per label slot in canonical class order (sorted by class index) so
  // that example draws are identical across label permutations, then place
  // rows at the slot the class landed in.
  std::vector<int> order(n_way);
  for (int i = 0; i < n_way; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return class_indices[a] < class_indices[b];
  });

  for (int rank = 0; rank < n_way; ++rank) {
    const int slot = order[rank];
    const auto& cls = pool.classes[class_indices[slot]];
    const auto [lo, hi] = cls.range(split);
    const int avail = hi - lo;
    if (avail < k + q) {
      throw TensorError("episode: class " + std::to_string(cls.id) + " has " +
                        std::to_string(avail) + " examples in split, need " +
                        std::to_string(k + q));
    }
    const std::vector<int> picks = draw_rng.sample_without_replacement(avail, k + q);
    for (int i = 0; i < k; ++i) {
      const auto& ex = cls.examples[lo + picks[i]];
      std::copy(ex.begin(), ex.end(), xs.begin() + (slot * k + i) * static_cast<size_t>(d));
      ys[slot * k + i] = slot;
    }
    for (int i = 0; i < q; ++i) {
      const auto& ex = cls.examples[lo + picks[k + i]];
      std::copy(ex.begin(), ex.end(), xq.begin() + (slot * q + i) * static_cast<size_t>(d));
      yq[slot * q + i] = slot;
    }
  }

  ep.meta.label_classes.resize(n_way);
  for (int i = 0; i < n_way; ++i) {
    ep.meta.label_classes[i] = pool.classes[class_indices[i]].id;
  }
  ep.meta.support_classes.resize(k * n_way);
  ep.meta.query_classes.resize(q * n_way);
  for (int slot = 0; slot < n_way; ++slot) {
    for (int i = 0; i < k; ++i) {
      ep.meta.support_classes[slot * k + i] = ep.meta.label_classes[slot];
    }
    for (int i = 0; i < q; ++i) {
      ep.meta.query_classes[slot * q + i] = ep.meta.label_classes[slot];
    }
  }
  return ep;
}

/// The 10-interval sinusoid task family: disjoint half-unit intervals with
/// a fixed (amplitude, phase) assignment drawn once per family seed.
struct SinusoidFamily {
  static constexpr int kIntervals = 10;
  static constexpr double kAmplitudeLo = 0.1, kAmplitudeHi = 5.0;
  static constexpr double kPhaseLo = 0.0;
  static inline const double kPhaseHi = std::acos(-1.0);  // pi

  std::vector<std::pair<double, double>> intervals;
  std::vector<double> amplitudes, phases;

  explicit SinusoidFamily(std::uint64_t seed) {
    Rng rng(mix64(seed, 0x73696eULL));
    for (int i = 0; i < kIntervals; ++i) {
      const double lo = -5.0 + i;
      intervals.emplace_back(lo, lo + 0.5);
      amplitudes.push_back(rng.uniform(kAmplitudeLo, kAmplitudeHi));
      phases.push_back(rng.uniform(kPhaseLo, kPhaseHi));
    }
  }

  /// Index of the interval containing x, or -1 if x falls in a gap.
  int interval_of(double x) const {
    for (int i = 0; i < kIntervals; ++i) {
      if (x >= intervals[i].first && x <= intervals[i].second) return i;
    }
    return -1;
  }

  double eval(int interval, double x) const {
    return amplitudes[interval] * std::sin(x - phases[interval]);
  }
};

/// Support/query pairs from one interval's sine task. With fresh_task a
/// new (amplitude, phase) is drawn for the episode instead of the family's
/// fixed assignment, which is how held-out evaluation tasks are formed.
inline Episode sample_sinusoid_episode(const SinusoidFamily& fam, int k, int q,
                                       Rng& rng, bool fresh_task = false) {
  if (k < 1 || q < 1) throw TensorError("episode: k and q must be >= 1");
  Episode ep;
  ep.classification = false;
  ep.k_shot = k;
  ep.n_query = q;
  const int interval = rng.uniform_int(SinusoidFamily::kIntervals);
  double amplitude = fam.amplitudes[interval];
  double phase = fam.phases[interval];
  if (fresh_task) {
    amplitude = rng.uniform(SinusoidFamily::kAmplitudeLo, SinusoidFamily::kAmplitudeHi);
    phase = rng.uniform(SinusoidFamily::kPhaseLo, SinusoidFamily::kPhaseHi);
  }
  const auto [lo, hi] = fam.intervals[interval];
  ep.x_s = Tensor::zeros(Shape{k, 1});
  ep.y_s = Tensor::zeros(Shape{k, 1});
  ep.x_q = Tensor::zeros(Shape{q, 1});
  ep.y_q = Tensor::zeros(Shape{q, 1});
  auto fill = [&](Tensor& x, Tensor& y, int n) {
    auto xd = x.mutable_data();
    auto yd = y.mutable_data();
    for (int i = 0; i < n; ++i) {
      xd[i] = rng.uniform(lo, hi);
      yd[i] = amplitude * std::sin(xd[i] - phase);
    }
  };
  fill(ep.x_s, ep.y_s, k);
  fill(ep.x_q, ep.y_q, q);
  ep.meta.amplitude = amplitude;
  ep.meta.phase = phase;
  ep.meta.interval = interval;
  return ep;
}

/// Isotropic Gaussian clusters with means in the unit ball, kept at least
/// 2*spread apart. `spread` is the cluster's RMS radius (E||x - mean||^2 =
/// spread^2), so the separation rule keeps clusters two radii apart.
/// Stand-in for image pools at desk scale.
inline ClassPool generate_synthetic_pool(int n_classes, int dim, double spread,
                                         std::uint64_t seed,
                                         int examples_per_class = 60) {
  if (n_classes < 2) throw TensorError("synthetic pool: need >= 2 classes");
  Rng rng(mix64(seed, 0x706f6f6cULL));
  std::vector<std::vector<double>> means;
  const double min_dist = 2.0 * spread;
  int attempts = 0;
  while (static_cast<int>(means.size()) < n_classes) {
    if (++attempts > 10000) {
      throw TensorError(
          "synthetic pool: could not place separated class means; "
          "increase dim or decrease spread");
    }
    // Uniform in the unit ball: normalized Gaussian direction, radius u^(1/d).
    std::vector<double> m(dim);
    double norm2 = 0.0;
    for (double& v : m) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double radius = std::pow(rng.uniform(), 1.0 / dim) / std::sqrt(norm2);
    for (double& v : m) v *= radius;
    bool ok = true;
    for (const auto& other : means) {
      double d2 = 0.0;
      for (int i = 0; i < dim; ++i) d2 += (m[i] - other[i]) * (m[i] - other[i]);
      if (d2 < min_dist * min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) means.push_back(std::move(m));
  }

  ClassPool pool;
  pool.dim = dim;
  const double sigma = spread / std::sqrt(static_cast<double>(dim));
  for (int c = 0; c < n_classes; ++c) {
    ClassPool::ClassEntry entry;
    entry.id = c;
    for (int e = 0; e < examples_per_class; ++e) {
      std::vector<double> x(dim);
      for (int i = 0; i < dim; ++i) x[i] = means[c][i] + sigma * rng.normal();
      entry.examples.push_back(std::move(x));
    }
    entry.train_end = examples_per_class;
    entry.val_end = examples_per_class;
    pool.classes.push_back(std::move(entry));
  }
  pool.split_examples(0.6, 0.2);
  return pool;
}

namespace detail {

inline std::vector<double> read_pgm(const std::filesystem::path& path,
                                    int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError("pgm: cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") {
    throw TensorError("pgm: " + path.string() + " is not binary P5");
  }
  auto next_token = [&]() -> long {
    // Skips whitespace and '#' comment lines.
    for (;;) {
      int c = in.peek();
      if (c == '#') {
        std::string dummy;
        std::getline(in, dummy);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v;
    in >> v;
    return v;
  };
  width = static_cast<int>(next_token());
  height = static_cast<int>(next_token());
  const long maxval = next_token();
  if (maxval <= 0 || maxval > 255) {
    throw TensorError("pgm: " + path.string() + " is not 8-bit");
  }
  in.get();  // single whitespace before payload
  std::vector<unsigned char> raw(static_cast<size_t>(width) * height);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!in) throw TensorError("pgm: " + path.string() + " truncated");
  std::vector<double> out(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / 255.0;
  return out;
}

}  // namespace detail

/// One subdirectory per class, each holding same-sized 8-bit P5 images.
/// Classes are ordered by directory name; pixel values scale to [0, 1].
inline ClassPool load_image_pool(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) {
    throw TensorError("image pool: " + root.string() + " is not a directory");
  }
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) {
    throw TensorError("image pool: no class directories in " + root.string());
  }

  ClassPool pool;
  int width = -1, height = -1;
  int next_id = 0;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      throw TensorError("image pool: empty class directory " + dir.string());
    }
    ClassPool::ClassEntry cls;
    cls.id = next_id++;
    for (const auto& f : files) {
      int w = 0, h = 0;
      std::vector<double> pixels = detail::read_pgm(f, w, h);
      if (width < 0) {
        width = w;
        height = h;
        pool.dim = w * h;
      } else if (w != width || h != height) {
        throw TensorError("image pool: mixed image sizes (" + f.string() + ")");
      }
      cls.examples.push_back(std::move(pixels));
    }
    cls.train_end = static_cast<int>(cls.examples.size());
    cls.val_end = cls.train_end;
    pool.classes.push_back(std::move(cls));
  }
  pool.split_examples(0.6, 0.2);
  return pool;
}

}  // namespace metaaug
