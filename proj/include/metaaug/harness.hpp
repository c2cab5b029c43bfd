#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaaug/augment.hpp"
#include "metaaug/learners.hpp"
#include "metaaug/models.hpp"
#include "metaaug/rng.hpp"
#include "metaaug/tasks.hpp"

namespace metaaug {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class LearnerKind { maml, fomaml, cnp, protonet, joint };
enum class TaskKind { sinusoid, synthetic_cls, image_dir };

struct ExperimentConfig {
  LearnerKind learner = LearnerKind::maml;
  TaskKind task = TaskKind::sinusoid;
  SamplerMode mode = SamplerMode::intershuffle;
  Augmentation aug;  // identity unless configured
  std::vector<int> seeds{0, 1, 2, 3, 4};
  long total_steps = 20000;
  int eval_every = 500;
  int eval_episodes = 100;
  std::string out_dir;
  int parallel = 0;  // 0: hardware concurrency

  // episode geometry
  int k_shot = 10, n_query = 10, n_way = 5;

  MamlConfig maml;

  // cnp / protonet / joint knobs
  int cnp_hidden = 64, cnp_latent = 32;
  double cnp_outer_lr = 1e-3;
  int proto_hidden = 64, proto_embed = 32;
  double proto_outer_lr = 1e-3;
  int joint_batch = 100;
  double joint_lr = 1e-3;

  // sinusoid task
  std::uint64_t family_seed = 1234;

  // synthetic classification pool
  int synth_classes = 22, synth_dim = 16, synth_examples = 60;
  double synth_spread = 0.35;
  std::uint64_t synth_seed = 99;
  int split_train = 12, split_val = 5, split_test = 5;

  // image pool
  std::string image_root;

  // memorization report thresholds
  double report_delta = 0.05, report_gap = 0.15;

  void validate() const {
    if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
    if (total_steps < 0) throw ConfigError("config: total_steps must be >= 0");
    if (eval_every < 1) throw ConfigError("config: eval_every must be >= 1");
    if (total_steps % eval_every != 0) {
      throw ConfigError("config: eval_every must divide total_steps");
    }
    if (eval_episodes < 1) throw ConfigError("config: eval_episodes must be >= 1");
    if (k_shot < 1 || n_query < 1) throw ConfigError("config: k and q must be >= 1");
    if (task != TaskKind::sinusoid && n_way < 2) {
      throw ConfigError("config: n_way must be >= 2");
    }
    if (task == TaskKind::image_dir && image_root.empty()) {
      throw ConfigError("config: image.root required for task=image_dir");
    }
    if (task != TaskKind::sinusoid &&
        split_train + split_val + split_test > synth_classes &&
        task == TaskKind::synthetic_cls) {
      throw ConfigError("config: class splits exceed pool size");
    }
  }

  bool classification() const { return task != TaskKind::sinusoid; }
};

// ---------------------------------------------------------------------------
// Config file parsing: flat `key = value` lines, '#' comments.
// ---------------------------------------------------------------------------

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

inline LearnerKind parse_learner(const std::string& v) {
  if (v == "maml") return LearnerKind::maml;
  if (v == "fomaml") return LearnerKind::fomaml;
  if (v == "cnp") return LearnerKind::cnp;
  if (v == "protonet") return LearnerKind::protonet;
  if (v == "joint") return LearnerKind::joint;
  throw ConfigError("config: unknown learner '" + v + "'");
}

inline TaskKind parse_task(const std::string& v) {
  if (v == "sinusoid") return TaskKind::sinusoid;
  if (v == "synthetic_cls") return TaskKind::synthetic_cls;
  if (v == "image_dir") return TaskKind::image_dir;
  throw ConfigError("config: unknown task '" + v + "'");
}

inline SamplerMode parse_mode(const std::string& v) {
  if (v == "nme" || v == "non_mutually_exclusive") {
    return SamplerMode::non_mutually_exclusive;
  }
  if (v == "intrashuffle") return SamplerMode::intrashuffle;
  if (v == "intershuffle") return SamplerMode::intershuffle;
  throw ConfigError("config: unknown mode '" + v + "'");
}

}  // namespace config_detail

inline ExperimentConfig parse_config_text(const std::string& text) {
  using namespace config_detail;
  ExperimentConfig cfg;
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) +
                        " is not key = value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }

  std::string aug_kind = "identity";
  double aug_alpha = 1.0, aug_sigma = 0.1;
  std::optional<double> aug_wrap;
  std::vector<double> aug_values;

  for (const auto& [key, value] : kv) {
    try {
      if (key == "learner") cfg.learner = parse_learner(value);
      else if (key == "task") cfg.task = parse_task(value);
      else if (key == "mode") cfg.mode = parse_mode(value);
      else if (key == "seeds") {
        cfg.seeds.clear();
        for (const auto& s : split(value, ',')) cfg.seeds.push_back(std::stoi(s));
      } else if (key == "total_steps") cfg.total_steps = std::stol(value);
      else if (key == "eval_every") cfg.eval_every = std::stoi(value);
      else if (key == "eval_episodes") cfg.eval_episodes = std::stoi(value);
      else if (key == "out_dir") cfg.out_dir = value;
      else if (key == "parallel") cfg.parallel = std::stoi(value);
      else if (key == "k") cfg.k_shot = std::stoi(value);
      else if (key == "q") cfg.n_query = std::stoi(value);
      else if (key == "n_way") cfg.n_way = std::stoi(value);
      else if (key == "aug.kind") aug_kind = value;
      else if (key == "aug.alpha") aug_alpha = std::stod(value);
      else if (key == "aug.sigma") aug_sigma = std::stod(value);
      else if (key == "aug.wrap_range") aug_wrap = std::stod(value);
      else if (key == "aug.values") {
        aug_values.clear();
        for (const auto& s : split(value, ',')) aug_values.push_back(std::stod(s));
      } else if (key == "maml.inner_lr") cfg.maml.inner_lr = std::stod(value);
      else if (key == "maml.inner_steps") cfg.maml.inner_steps = std::stoi(value);
      else if (key == "maml.inner_steps_eval") cfg.maml.inner_steps_eval = std::stoi(value);
      else if (key == "maml.outer_lr") cfg.maml.outer_lr = std::stod(value);
      else if (key == "maml.meta_batch") cfg.maml.meta_batch = std::stoi(value);
      else if (key == "maml.weight_decay") cfg.maml.weight_decay = std::stod(value);
      else if (key == "cnp.hidden") cfg.cnp_hidden = std::stoi(value);
      else if (key == "cnp.latent_dim") cfg.cnp_latent = std::stoi(value);
      else if (key == "cnp.outer_lr") cfg.cnp_outer_lr = std::stod(value);
      else if (key == "proto.hidden") cfg.proto_hidden = std::stoi(value);
      else if (key == "proto.embed_dim") cfg.proto_embed = std::stoi(value);
      else if (key == "proto.outer_lr") cfg.proto_outer_lr = std::stod(value);
      else if (key == "joint.batch") cfg.joint_batch = std::stoi(value);
      else if (key == "joint.lr") cfg.joint_lr = std::stod(value);
      else if (key == "sinusoid.family_seed") cfg.family_seed = std::stoull(value);
      else if (key == "synth.classes") cfg.synth_classes = std::stoi(value);
      else if (key == "synth.dim") cfg.synth_dim = std::stoi(value);
      else if (key == "synth.spread") cfg.synth_spread = std::stod(value);
      else if (key == "synth.examples") cfg.synth_examples = std::stoi(value);
      else if (key == "synth.seed") cfg.synth_seed = std::stoull(value);
      else if (key == "split.train") cfg.split_train = std::stoi(value);
      else if (key == "split.val") cfg.split_val = std::stoi(value);
      else if (key == "split.test") cfg.split_test = std::stoi(value);
      else if (key == "image.root") cfg.image_root = value;
      else if (key == "report.delta") cfg.report_delta = std::stod(value);
      else if (key == "report.gap") cfg.report_gap = std::stod(value);
      else throw ConfigError("config: unknown key '" + key + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config: bad value for '" + key + "': " + value);
    }
  }

  if (aug_kind == "identity") cfg.aug = Augmentation::identity();
  else if (aug_kind == "label_permutation") cfg.aug = Augmentation::label_permutation();
  else if (aug_kind == "additive_uniform") cfg.aug = Augmentation::additive_uniform(aug_alpha, aug_wrap);
  else if (aug_kind == "additive_discrete") {
    if (aug_values.empty()) throw ConfigError("config: aug.values required");
    cfg.aug = Augmentation::additive_discrete(aug_values, aug_wrap);
  } else if (aug_kind == "input_jitter") cfg.aug = Augmentation::input_jitter(aug_sigma);
  else throw ConfigError("config: unknown aug.kind '" + aug_kind + "'");

  if (cfg.learner == LearnerKind::fomaml) cfg.maml.first_order = true;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRow {
  long step = 0;
  std::string split;  // train | val | test
  double pre_update_loss = 0.0, post_update_loss = 0.0;
  std::optional<double> pre_update_acc, post_update_acc;
  int seed = 0;
  long long wall_ms = 0;
};

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline const char* kMetricsHeader =
    "step,split,pre_update_loss,post_update_loss,pre_update_acc,"
    "post_update_acc,seed,wall_ms";

inline std::string metrics_row_csv(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + "," + r.split + "," +
                  format_g17(r.pre_update_loss) + "," +
                  format_g17(r.post_update_loss) + ",";
  if (r.pre_update_acc) s += format_g17(*r.pre_update_acc);
  s += ",";
  if (r.post_update_acc) s += format_g17(*r.post_update_acc);
  s += "," + std::to_string(r.seed) + "," + std::to_string(r.wall_ms);
  return s;
}

inline std::vector<MetricsRow> parse_metrics_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("metrics: cannot open " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    const auto f = config_detail::split(line, ',');
    if (f.size() != 8) throw ConfigError("metrics: malformed row: " + line);
    MetricsRow r;
    r.step = std::stol(f[0]);
    r.split = f[1];
    r.pre_update_loss = std::stod(f[2]);
    r.post_update_loss = std::stod(f[3]);
    if (!f[4].empty()) r.pre_update_acc = std::stod(f[4]);
    if (!f[5].empty()) r.post_update_acc = std::stod(f[5]);
    r.seed = std::stoi(f[6]);
    r.wall_ms = std::stoll(f[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Memorization / learner-overfitting diagnosis
// ---------------------------------------------------------------------------

enum class Diagnosis { memorization, learner_overfit, healthy };

inline const char* diagnosis_name(Diagnosis d) {
  switch (d) {
    case Diagnosis::memorization: return "MEMORIZATION";
    case Diagnosis::learner_overfit: return "LEARNER-OVERFIT";
    case Diagnosis::healthy: return "HEALTHY";
  }
  return "?";
}

struct DiagnosisReport {
  Diagnosis verdict = Diagnosis::healthy;
  double train_pre = 0.0, train_post = 0.0, val_post = 0.0;
  int window = 0;
};

/// Final-window averages of train pre/post-update and validation
/// post-update performance (accuracy when present, otherwise negated
/// loss). MEMORIZATION: train pre-update within `delta` of post-update
/// while validation trails train post-update by more than `gap`.
/// LEARNER-OVERFIT: train pre/post gap above `gap` with the same
/// validation shortfall. Requires at least 10 evaluation points.
inline DiagnosisReport memorization_report(const std::vector<MetricsRow>& rows,
                                           double delta = 0.05,
                                           double gap = 0.15) {
  std::vector<const MetricsRow*> train, val;
  for (const auto& r : rows) {
    if (r.split == "train") train.push_back(&r);
    else if (r.split == "val") val.push_back(&r);
  }
  if (train.size() < 10 || val.size() < 10) {
    throw ConfigError("memorization report: fewer than 10 evaluation points");
  }
  auto perf_pre = [](const MetricsRow* r) {
    return r->pre_update_acc ? *r->pre_update_acc : -r->pre_update_loss;
  };
  auto perf_post = [](const MetricsRow* r) {
    return r->post_update_acc ? *r->post_update_acc : -r->post_update_loss;
  };
  const int window = 10;
  DiagnosisReport rep;
  rep.window = window;
  for (int i = 0; i < window; ++i) {
    const auto* tr = train[train.size() - window + i];
    const auto* va = val[val.size() - window + i];
    rep.train_pre += perf_pre(tr);
    rep.train_post += perf_post(tr);
    rep.val_post += perf_post(va);
  }
  rep.train_pre /= window;
  rep.train_post /= window;
  rep.val_post /= window;

  const bool val_trails = rep.train_post - rep.val_post > gap;
  if (rep.train_post - rep.train_pre <= delta && val_trails) {
    rep.verdict = Diagnosis::memorization;
  } else if (rep.train_post - rep.train_pre > gap && val_trails) {
    rep.verdict = Diagnosis::learner_overfit;
  } else {
    rep.verdict = Diagnosis::healthy;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Task sources and learner drivers (internal to run_experiment)
// ---------------------------------------------------------------------------

namespace driver_detail {

struct EvalOutcome {
  double pre_loss = 0.0, post_loss = 0.0;
  std::optional<double> pre_acc, post_acc;
  std::vector<double> curve_loss;                 // per adaptation step
  std::vector<std::optional<double>> curve_acc;
};

/// Episode source for one experiment. Training episodes follow the
/// configured regime and augmentation; evaluation episodes always use
/// held-out tasks under the intershuffle regime (classification) or
/// freshly drawn task parameters (sinusoid), unaugmented.
class TaskSource {
 public:
  explicit TaskSource(const ExperimentConfig& cfg) : cfg_(cfg) {
    if (cfg.task == TaskKind::sinusoid) {
      family_ = std::make_unique<SinusoidFamily>(cfg.family_seed);
      return;
    }
    ClassPool pool = cfg.task == TaskKind::synthetic_cls
                         ? generate_synthetic_pool(cfg.synth_classes,
                                                   cfg.synth_dim,
                                                   cfg.synth_spread,
                                                   cfg.synth_seed,
                                                   cfg.synth_examples)
                         : load_image_pool(cfg.image_root);
    const int total = cfg.split_train + cfg.split_val + cfg.split_test;
    if (pool.n_classes() < total) {
      throw ConfigError("config: pool has " + std::to_string(pool.n_classes()) +
                        " classes, splits need " + std::to_string(total));
    }
    // Deterministic class split: shuffled once by the pool seed.
    Rng split_rng(mix64(cfg.synth_seed, 0x73706c69ULL));
    const std::vector<int> perm = split_rng.permutation(pool.n_classes());
    std::vector<int> train_ids(perm.begin(), perm.begin() + cfg.split_train);
    std::vector<int> val_ids(perm.begin() + cfg.split_train,
                             perm.begin() + cfg.split_train + cfg.split_val);
    std::vector<int> test_ids(perm.begin() + cfg.split_train + cfg.split_val,
                              perm.begin() + total);
    std::sort(train_ids.begin(), train_ids.end());
    std::sort(val_ids.begin(), val_ids.end());
    std::sort(test_ids.begin(), test_ids.end());
    train_pool_ = pool.subset(train_ids);
    val_pool_ = pool.subset(val_ids);
    test_pool_ = pool.subset(test_ids);
    train_pool_.build_partition(cfg.n_way);
  }

  int input_dim() const {
    return cfg_.task == TaskKind::sinusoid ? 1 : train_pool_.dim;
  }

  Episode train_episode(Rng& rng) const {
    if (cfg_.task == TaskKind::sinusoid) {
      std::optional<Augmentation> aug;
      if (cfg_.aug.kind != AugKind::identity) aug = cfg_.aug;
      return sample_sinusoid_episode(*family_, cfg_.k_shot, cfg_.n_query, aug,
                                     rng, /*fresh_task=*/false);
    }
    Episode ep = sample_classification_episode(train_pool_, cfg_.mode,
                                               cfg_.k_shot, cfg_.n_way,
                                               cfg_.n_query, rng, Split::train);
    if (cfg_.aug.kind != AugKind::identity) ep = apply(cfg_.aug, ep, rng);
    return ep;
  }

  Episode eval_episode(Rng& rng, Split split) const {
    if (cfg_.task == TaskKind::sinusoid) {
      return sample_sinusoid_episode(*family_, cfg_.k_shot, cfg_.n_query, rng,
                                     /*fresh_task=*/true);
    }
    const ClassPool& pool = split == Split::val ? val_pool_ : test_pool_;
    return sample_classification_episode(pool, SamplerMode::intershuffle,
                                          cfg_.k_shot, cfg_.n_way, cfg_.n_query,
                                          rng, split);
  }

 private:
  const ExperimentConfig& cfg_;
  std::unique_ptr<SinusoidFamily> family_;
  ClassPool train_pool_, val_pool_, test_pool_;
};

class Driver {
 public:
  virtual ~Driver() = default;
  virtual BatchMetrics train_step(Rng& rng) = 0;
  virtual EvalOutcome evaluate(Rng& rng, Split split) = 0;
  virtual ParamSet snapshot() const = 0;
  virtual void restore(const ParamSet& params) = 0;
};

inline EvalOutcome summarize_curves(
    const std::vector<std::vector<EvalPoint>>& curves) {
  EvalOutcome out;
  const size_t steps = curves.front().size();
  out.curve_loss.assign(steps, 0.0);
  std::vector<double> acc(steps, 0.0);
  bool has_acc = curves.front().front().acc.has_value();
  for (const auto& curve : curves) {
    for (size_t s = 0; s < steps; ++s) {
      out.curve_loss[s] += curve[s].loss;
      if (has_acc) acc[s] += *curve[s].acc;
    }
  }
  for (size_t s = 0; s < steps; ++s) {
    out.curve_loss[s] /= curves.size();
    out.curve_acc.push_back(
        has_acc ? std::optional<double>(acc[s] / curves.size()) : std::nullopt);
  }
  out.pre_loss = out.curve_loss.front();
  out.post_loss = out.curve_loss.back();
  out.pre_acc = out.curve_acc.front();
  out.post_acc = out.curve_acc.back();
  return out;
}

class MamlDriver : public Driver {
 public:
  MamlDriver(const ExperimentConfig& cfg, const TaskSource& tasks, int seed)
      : cfg_(cfg), tasks_(tasks) {
    spec_.layer_sizes = cfg.classification()
                            ? std::vector<int>{tasks.input_dim(), 64, 64, cfg.n_way}
                            : std::vector<int>{1, 40, 40, 1};
    spec_.activation = Activation::relu;
    spec_.init_seed = mix64(static_cast<std::uint64_t>(seed), 0x6d616d6cULL);
    params_ = init(spec_);
  }

  BatchMetrics train_step(Rng& rng) override {
    std::vector<Episode> batch;
    batch.reserve(cfg_.maml.meta_batch);
    for (int i = 0; i < cfg_.maml.meta_batch; ++i) {
      batch.push_back(tasks_.train_episode(rng));
    }
    return maml_outer_step(params_, opt_, spec_, batch, cfg_.maml);
  }

  EvalOutcome evaluate(Rng& rng, Split split) override {
    std::vector<std::vector<EvalPoint>> curves;
    curves.reserve(cfg_.eval_episodes);
    for (int e = 0; e < cfg_.eval_episodes; ++e) {
      Episode ep = tasks_.eval_episode(rng, split);
      curves.push_back(maml_eval_curve(params_, spec_, ep, cfg_.maml,
                                       cfg_.maml.inner_steps_eval));
    }
    return summarize_curves(curves);
  }

  ParamSet snapshot() const override { return params_.clone(); }
  void restore(const ParamSet& p) override { params_ = p.clone(); }

 private:
  const ExperimentConfig& cfg_;
  const TaskSource& tasks_;
  MlpSpec spec_;
  ParamSet params_;
  AdamState opt_;
};

class CnpDriver : public Driver {
 public:
  CnpDriver(const ExperimentConfig& cfg, const TaskSource& tasks, int seed)
      : cfg_(cfg), tasks_(tasks) {
    const int x_dim = tasks.input_dim();
    const int y_dim = cfg.classification() ? cfg.n_way : 1;
    cnp_.latent_dim = cfg.cnp_latent;
    cnp_.outer_lr = cfg.cnp_outer_lr;
    cnp_.encoder_spec.layer_sizes = {x_dim + y_dim, cfg.cnp_hidden,
                                     cfg.cnp_hidden, cfg.cnp_latent};
    cnp_.encoder_spec.activation = Activation::relu;
    cnp_.encoder_spec.init_seed = mix64(static_cast<std::uint64_t>(seed), 0x656e63ULL);
    cnp_.decoder_spec.layer_sizes = {cfg.cnp_latent + x_dim, cfg.cnp_hidden,
                                     cfg.cnp_hidden,
                                     cfg.classification() ? cfg.n_way : 1};
    cnp_.decoder_spec.activation = Activation::relu;
    cnp_.decoder_spec.init_seed = mix64(static_cast<std::uint64_t>(seed), 0x646563ULL);
    params_.encoder = init(cnp_.encoder_spec);
    params_.decoder = init(cnp_.decoder_spec);
  }

  BatchMetrics train_step(Rng& rng) override {
    BatchMetrics metrics;
    TapeScope scope;
    Tensor total;
    double acc = 0.0;
    bool has_acc = false;
    for (int i = 0; i < cfg_.maml.meta_batch; ++i) {
      Episode ep = tasks_.train_episode(rng);
      Tensor pred = cnp_forward(cnp_, params_, ep);
      Tensor loss = episode_loss(pred, ep, /*query_set=*/true);
      total = total.defined() ? ops::add(total, loss) : loss;
      if (ep.classification) {
        acc += accuracy(pred, ep.query_labels());
        has_acc = true;
      }
    }
    total = ops::scale(total, 1.0 / cfg_.maml.meta_batch);
    if (!std::isfinite(total.item())) {
      throw TensorError("cnp: non-finite training loss");
    }
    std::vector<Tensor> all = params_.all();
    Gradients g = grad(total, all);
    AdamConfig adam;
    adam.lr = cnp_.outer_lr;
    ParamSet merged = merged_params();
    opt_.step(merged, g.grads, adam);
    unmerge(merged);
    metrics.pre_loss = metrics.post_loss = total.item();
    if (has_acc) {
      metrics.pre_acc = metrics.post_acc = acc / cfg_.maml.meta_batch;
    }
    return metrics;
  }

  EvalOutcome evaluate(Rng& rng, Split split) override {
    std::vector<std::vector<EvalPoint>> curves;
    for (int e = 0; e < cfg_.eval_episodes; ++e) {
      Episode ep = tasks_.eval_episode(rng, split);
      NoGradScope no_grad;
      EvalPoint point = score(cnp_forward(cnp_, params_, ep), ep);
      curves.push_back(std::vector<EvalPoint>(
          cfg_.maml.inner_steps_eval + 1, point));
    }
    return summarize_curves(curves);
  }

  ParamSet snapshot() const override { return merged_params().clone(); }
  void restore(const ParamSet& p) override {
    ParamSet copy = p.clone();
    unmerge(copy);
  }

 private:
  ParamSet merged_params() const {
    ParamSet merged;
    for (size_t i = 0; i < params_.encoder.tensors.size(); ++i) {
      merged.tensors.push_back(params_.encoder.tensors[i]);
      merged.names.push_back("enc." + params_.encoder.names[i]);
    }
    for (size_t i = 0; i < params_.decoder.tensors.size(); ++i) {
      merged.tensors.push_back(params_.decoder.tensors[i]);
      merged.names.push_back("dec." + params_.decoder.names[i]);
    }
    return merged;
  }

  void unmerge(const ParamSet& merged) {
    const size_t n_enc = params_.encoder.tensors.size();
    for (size_t i = 0; i < n_enc; ++i) {
      params_.encoder.tensors[i] = merged.tensors[i];
    }
    for (size_t i = 0; i < params_.decoder.tensors.size(); ++i) {
      params_.decoder.tensors[i] = merged.tensors[n_enc + i];
    }
  }

  const ExperimentConfig& cfg_;
  const TaskSource& tasks_;
  CnpConfig cnp_;
  CnpParams params_;
  AdamState opt_;
};

class ProtoDriver : public Driver {
 public:
  ProtoDriver(const ExperimentConfig& cfg, const TaskSource& tasks, int seed)
      : cfg_(cfg), tasks_(tasks) {
    spec_.layer_sizes = {tasks.input_dim(), cfg.proto_hidden, cfg.proto_hidden,
                         cfg.proto_embed};
    spec_.activation = Activation::relu;
    spec_.init_seed = mix64(static_cast<std::uint64_t>(seed), 0x70726f74ULL);
    params_ = init(spec_);
  }

  BatchMetrics train_step(Rng& rng) override {
    BatchMetrics metrics;
    TapeScope scope;
    Tensor total;
    double acc = 0.0;
    for (int i = 0; i < cfg_.maml.meta_batch; ++i) {
      // Canonical row order makes training numerically independent of the
      // episode's label ordering (the network itself never sees labels).
      Episode ep = canonicalize_episode(tasks_.train_episode(rng));
      Tensor logits = protonet_forward(spec_, params_, ep);
      Tensor loss = episode_loss(logits, ep, /*query_set=*/true);
      total = total.defined() ? ops::add(total, loss) : loss;
      acc += accuracy(logits, ep.query_labels());
    }
    total = ops::scale(total, 1.0 / cfg_.maml.meta_batch);
    if (!std::isfinite(total.item())) {
      throw TensorError("protonet: non-finite training loss");
    }
    Gradients g = grad(total, params_.tensors);
    AdamConfig adam;
    adam.lr = cfg_.proto_outer_lr;
    opt_.step(params_, g.grads, adam);
    metrics.pre_loss = metrics.post_loss = total.item();
    metrics.pre_acc = metrics.post_acc = acc / cfg_.maml.meta_batch;
    return metrics;
  }

  EvalOutcome evaluate(Rng& rng, Split split) override {
    std::vector<std::vector<EvalPoint>> curves;
    for (int e = 0; e < cfg_.eval_episodes; ++e) {
      Episode ep = canonicalize_episode(tasks_.eval_episode(rng, split));
      NoGradScope no_grad;
      EvalPoint point = score(protonet_forward(spec_, params_, ep), ep);
      curves.push_back(std::vector<EvalPoint>(
          cfg_.maml.inner_steps_eval + 1, point));
    }
    return summarize_curves(curves);
  }

  ParamSet snapshot() const override { return params_.clone(); }
  void restore(const ParamSet& p) override { params_ = p.clone(); }

 private:
  const ExperimentConfig& cfg_;
  const TaskSource& tasks_;
  MlpSpec spec_;
  ParamSet params_;
  AdamState opt_;
};

class JointDriver : public Driver {
 public:
  JointDriver(const ExperimentConfig& cfg, const TaskSource& tasks, int seed)
      : cfg_(cfg), tasks_(tasks), family_(cfg.family_seed) {
    if (cfg.classification()) {
      throw ConfigError("config: learner=joint supports task=sinusoid only");
    }
    spec_.layer_sizes = {1, 40, 40, 1};
    spec_.activation = Activation::relu;
    spec_.init_seed = mix64(static_cast<std::uint64_t>(seed), 0x6a6f696eULL);
    params_ = init(spec_);
    adam_.lr = cfg.joint_lr;
  }

  BatchMetrics train_step(Rng& rng) override {
    Tensor x = Tensor::zeros(Shape{cfg_.joint_batch, 1});
    Tensor y = Tensor::zeros(Shape{cfg_.joint_batch, 1});
    auto xd = x.mutable_data();
    auto yd = y.mutable_data();
    for (int i = 0; i < cfg_.joint_batch; ++i) {
      const int interval = rng.uniform_int(SinusoidFamily::kIntervals);
      xd[i] = rng.uniform(family_.intervals[interval].first,
                          family_.intervals[interval].second);
      yd[i] = family_.eval(interval, xd[i]);
    }
    TapeScope scope;
    Tensor loss = ops::mse(forward(params_, spec_, x), y);
    if (!std::isfinite(loss.item())) {
      throw TensorError("joint: non-finite training loss");
    }
    Gradients g = grad(loss, params_.tensors);
    opt_.step(params_, g.grads, adam_);
    BatchMetrics metrics;
    metrics.pre_loss = metrics.post_loss = loss.item();
    return metrics;
  }

  EvalOutcome evaluate(Rng& rng, Split split) override {
    std::vector<std::vector<EvalPoint>> curves;
    for (int e = 0; e < cfg_.eval_episodes; ++e) {
      Episode ep = tasks_.eval_episode(rng, split);
      NoGradScope no_grad;
      EvalPoint point = score(forward(params_, spec_, ep.x_q), ep);
      curves.push_back(std::vector<EvalPoint>(
          cfg_.maml.inner_steps_eval + 1, point));
    }
    return summarize_curves(curves);
  }

  ParamSet snapshot() const override { return params_.clone(); }
  void restore(const ParamSet& p) override { params_ = p.clone(); }

 private:
  const ExperimentConfig& cfg_;
  const TaskSource& tasks_;
  SinusoidFamily family_;
  MlpSpec spec_;
  ParamSet params_;
  AdamState opt_;
  AdamConfig adam_;
};

inline std::unique_ptr<Driver> make_driver(const ExperimentConfig& cfg,
                                           const TaskSource& tasks, int seed) {
  switch (cfg.learner) {
    case LearnerKind::maml:
    case LearnerKind::fomaml:
      return std::make_unique<MamlDriver>(cfg, tasks, seed);
    case LearnerKind::cnp:
      return std::make_unique<CnpDriver>(cfg, tasks, seed);
    case LearnerKind::protonet:
      return std::make_unique<ProtoDriver>(cfg, tasks, seed);
    case LearnerKind::joint:
      return std::make_unique<JointDriver>(cfg, tasks, seed);
  }
  throw ConfigError("config: unknown learner");
}

}  // namespace driver_detail

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct SeedResult {
  int seed = 0;
  bool failed = false;
  std::string failure;
  std::vector<MetricsRow> rows;
  long best_step = 0;
  double test_pre_loss = 0.0, test_post_loss = 0.0;
  std::optional<double> test_pre_acc, test_post_acc;
  std::vector<double> adaptation_loss;  // mean test loss per adaptation step
  std::vector<std::optional<double>> adaptation_acc;
};

struct RunResult {
  std::filesystem::path dir;
  ExperimentConfig config;
  std::vector<SeedResult> seeds;

  const SeedResult& seed_result(int seed) const {
    for (const auto& s : seeds) {
      if (s.seed == seed) return s;
    }
    throw ConfigError("run: no result for seed " + std::to_string(seed));
  }
};

namespace run_detail {

inline SeedResult run_seed(const ExperimentConfig& cfg,
                           const driver_detail::TaskSource& tasks, int seed) {
  using clock = std::chrono::steady_clock;
  SeedResult result;
  result.seed = seed;
  const auto start = clock::now();
  auto wall_ms = [&] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() -
                                                                 start)
        .count();
  };

  Rng train_rng(mix64(static_cast<std::uint64_t>(seed), 0x747261696eULL));
  Rng val_rng(mix64(static_cast<std::uint64_t>(seed), 0x76616cULL));
  Rng test_rng(mix64(static_cast<std::uint64_t>(seed), 0x74657374ULL));

  auto driver = driver_detail::make_driver(cfg, tasks, seed);

  ParamSet best = driver->snapshot();
  long best_step = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  // Higher is better: accuracy, or negated loss for regression.
  auto val_score = [&](const driver_detail::EvalOutcome& out) {
    return out.post_acc ? *out.post_acc : -out.post_loss;
  };

  BatchMetrics window_sum;
  double window_pre_acc = 0.0, window_post_acc = 0.0;
  int window_count = 0;
  bool window_has_acc = false;

  auto eval_and_log = [&](long step) {
    driver_detail::EvalOutcome val = driver->evaluate(val_rng, Split::val);
    MetricsRow train_row;
    train_row.step = step;
    train_row.split = "train";
    train_row.seed = seed;
    if (window_count > 0) {
      train_row.pre_update_loss = window_sum.pre_loss / window_count;
      train_row.post_update_loss = window_sum.post_loss / window_count;
      if (window_has_acc) {
        train_row.pre_update_acc = window_pre_acc / window_count;
        train_row.post_update_acc = window_post_acc / window_count;
      }
    } else {
      // No training batches yet: report the validation point for both.
      train_row.pre_update_loss = val.pre_loss;
      train_row.post_update_loss = val.post_loss;
      train_row.pre_update_acc = val.pre_acc;
      train_row.post_update_acc = val.post_acc;
    }
    train_row.wall_ms = wall_ms();
    result.rows.push_back(train_row);
    window_sum = BatchMetrics{};
    window_pre_acc = window_post_acc = 0.0;
    window_count = 0;
    window_has_acc = false;

    MetricsRow val_row;
    val_row.step = step;
    val_row.split = "val";
    val_row.seed = seed;
    val_row.pre_update_loss = val.pre_loss;
    val_row.post_update_loss = val.post_loss;
    val_row.pre_update_acc = val.pre_acc;
    val_row.post_update_acc = val.post_acc;
    val_row.wall_ms = wall_ms();
    result.rows.push_back(val_row);

    const double score = val_score(val);
    if (score > best_metric) {
      best_metric = score;
      best = driver->snapshot();
      best_step = step;
    }
  };

  try {
    eval_and_log(0);
    for (long step = 1; step <= cfg.total_steps; ++step) {
      BatchMetrics m = driver->train_step(train_rng);
      window_sum.pre_loss += m.pre_loss;
      window_sum.post_loss += m.post_loss;
      if (m.pre_acc) {
        window_pre_acc += *m.pre_acc;
        window_post_acc += m.post_acc.value_or(0.0);
        window_has_acc = true;
      }
      ++window_count;
      if (step % cfg.eval_every == 0) eval_and_log(step);
    }

    driver->restore(best);
    driver_detail::EvalOutcome test = driver->evaluate(test_rng, Split::test);
    MetricsRow test_row;
    test_row.step = best_step;
    test_row.split = "test";
    test_row.seed = seed;
    test_row.pre_update_loss = test.pre_loss;
    test_row.post_update_loss = test.post_loss;
    test_row.pre_update_acc = test.pre_acc;
    test_row.post_update_acc = test.post_acc;
    test_row.wall_ms = wall_ms();
    result.rows.push_back(test_row);

    result.best_step = best_step;
    result.test_pre_loss = test.pre_loss;
    result.test_post_loss = test.post_loss;
    result.test_pre_acc = test.pre_acc;
    result.test_post_acc = test.post_acc;
    result.adaptation_loss = test.curve_loss;
    result.adaptation_acc = test.curve_acc;

    // Persist best-validation params beside the run.
    if (!cfg.out_dir.empty()) {
      save_checkpoint(std::filesystem::path(cfg.out_dir) /
                          ("ckpt_seed" + std::to_string(seed) + ".bin"),
                      best);
    }
  } catch (const std::exception& e) {
    result.failed = true;
    result.failure = e.what();
    MetricsRow fail_row;
    fail_row.step = result.rows.empty() ? 0 : result.rows.back().step;
    fail_row.split = "train";
    fail_row.seed = seed;
    fail_row.pre_update_loss = std::numeric_limits<double>::quiet_NaN();
    fail_row.post_update_loss = std::numeric_limits<double>::quiet_NaN();
    fail_row.wall_ms = wall_ms();
    result.rows.push_back(fail_row);
  }
  return result;
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  auto learner_name = [&] {
    switch (cfg.learner) {
      case LearnerKind::maml: return "maml";
      case LearnerKind::fomaml: return "fomaml";
      case LearnerKind::cnp: return "cnp";
      case LearnerKind::protonet: return "protonet";
      case LearnerKind::joint: return "joint";
    }
    return "?";
  };
  auto task_name = [&] {
    switch (cfg.task) {
      case TaskKind::sinusoid: return "sinusoid";
      case TaskKind::synthetic_cls: return "synthetic_cls";
      case TaskKind::image_dir: return "image_dir";
    }
    return "?";
  };
  out << "learner = " << learner_name() << "\n";
  out << "task = " << task_name() << "\n";
  out << "mode = " << sampler_mode_name(cfg.mode) << "\n";
  out << "seeds = ";
  for (size_t i = 0; i < cfg.seeds.size(); ++i) {
    out << (i ? "," : "") << cfg.seeds[i];
  }
  out << "\n";
  out << "total_steps = " << cfg.total_steps << "\n";
  out << "eval_every = " << cfg.eval_every << "\n";
  out << "eval_episodes = " << cfg.eval_episodes << "\n";
  out << "k = " << cfg.k_shot << "\n";
  out << "q = " << cfg.n_query << "\n";
  out << "n_way = " << cfg.n_way << "\n";
  switch (cfg.aug.kind) {
    case AugKind::identity: out << "aug.kind = identity\n"; break;
    case AugKind::label_permutation: out << "aug.kind = label_permutation\n"; break;
    case AugKind::additive_uniform:
      out << "aug.kind = additive_uniform\naug.alpha = " << cfg.aug.alpha << "\n";
      break;
    case AugKind::additive_discrete: {
      out << "aug.kind = additive_discrete\naug.values = ";
      for (size_t i = 0; i < cfg.aug.value_set.size(); ++i) {
        out << (i ? "," : "") << cfg.aug.value_set[i];
      }
      out << "\n";
      break;
    }
    case AugKind::input_jitter:
      out << "aug.kind = input_jitter\naug.sigma = " << cfg.aug.sigma << "\n";
      break;
  }
  if (cfg.aug.wrap_range) out << "aug.wrap_range = " << *cfg.aug.wrap_range << "\n";
  out << "maml.inner_lr = " << cfg.maml.inner_lr << "\n";
  out << "maml.inner_steps = " << cfg.maml.inner_steps << "\n";
  out << "maml.inner_steps_eval = " << cfg.maml.inner_steps_eval << "\n";
  out << "maml.outer_lr = " << cfg.maml.outer_lr << "\n";
  out << "maml.meta_batch = " << cfg.maml.meta_batch << "\n";
  out << "maml.weight_decay = " << cfg.maml.weight_decay << "\n";
  out << "sinusoid.family_seed = " << cfg.family_seed << "\n";
  out << "synth.classes = " << cfg.synth_classes << "\n";
  out << "synth.dim = " << cfg.synth_dim << "\n";
  out << "synth.spread = " << cfg.synth_spread << "\n";
  out << "synth.examples = " << cfg.synth_examples << "\n";
  out << "synth.seed = " << cfg.synth_seed << "\n";
  out << "split.train = " << cfg.split_train << "\n";
  out << "split.val = " << cfg.split_val << "\n";
  out << "split.test = " << cfg.split_test << "\n";
  if (!cfg.image_root.empty()) out << "image.root = " << cfg.image_root << "\n";
  return out.str();
}

}  // namespace run_detail

/// Trains every seed (in parallel, each seed isolated and internally
/// deterministic), tracks the best-validation checkpoint, evaluates it on
/// held-out test episodes and writes metrics.csv / adaptation.csv /
/// config.cfg / checkpoints / summary.json into the run directory.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  RunResult result;
  result.config = cfg;
  ExperimentConfig local = cfg;
  if (local.out_dir.empty()) {
    local.out_dir = "runs/default";
  }
  result.dir = fs::path(local.out_dir);
  fs::create_directories(result.dir);

  driver_detail::TaskSource tasks(local);

  result.seeds.resize(local.seeds.size());
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  const int workers = std::min<int>(
      static_cast<int>(local.seeds.size()),
      local.parallel > 0 ? local.parallel : std::max(1, hw));
  std::mutex queue_mutex;
  size_t next = 0;
  auto worker = [&] {
    for (;;) {
      size_t idx;
      {
        std::lock_guard<std::mutex> lock(queue_mutex);
        if (next >= local.seeds.size()) return;
        idx = next++;
      }
      result.seeds[idx] = run_detail::run_seed(local, tasks, local.seeds[idx]);
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int i = 0; i < workers; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  // metrics.csv, grouped by seed in config order.
  {
    std::ofstream out(result.dir / "metrics.csv");
    out << kMetricsHeader << "\n";
    for (const auto& seed : result.seeds) {
      for (const auto& row : seed.rows) out << metrics_row_csv(row) << "\n";
    }
  }
  // adaptation.csv: per-seed test metrics after each adaptation step.
  {
    std::ofstream out(result.dir / "adaptation.csv");
    out << "seed,adapt_step,test_loss,test_acc\n";
    for (const auto& seed : result.seeds) {
      for (size_t s = 0; s < seed.adaptation_loss.size(); ++s) {
        out << seed.seed << "," << s << ","
            << format_g17(seed.adaptation_loss[s]) << ",";
        if (seed.adaptation_acc[s]) out << format_g17(*seed.adaptation_acc[s]);
        out << "\n";
      }
    }
  }
  // config snapshot
  {
    std::ofstream out(result.dir / "config.cfg");
    out << run_detail::serialize_config(local);
  }
  // summary.json: per-seed test metrics plus mean and std across seeds.
  {
    nlohmann::json summary;
    summary["seeds"] = nlohmann::json::array();
    std::vector<double> losses, accs;
    for (const auto& seed : result.seeds) {
      nlohmann::json s;
      s["seed"] = seed.seed;
      s["failed"] = seed.failed;
      if (seed.failed) {
        s["failure"] = seed.failure;
      } else {
        s["best_step"] = seed.best_step;
        s["test_post_loss"] = seed.test_post_loss;
        if (seed.test_post_acc) s["test_post_acc"] = *seed.test_post_acc;
        losses.push_back(seed.test_post_loss);
        if (seed.test_post_acc) accs.push_back(*seed.test_post_acc);
      }
      summary["seeds"].push_back(s);
    }
    auto mean_std = [](const std::vector<double>& v) {
      nlohmann::json j;
      if (v.empty()) return j;
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= v.size();
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      var = v.size() > 1 ? var / (v.size() - 1) : 0.0;
      j["mean"] = mean;
      j["std"] = std::sqrt(var);
      return j;
    };
    summary["test_post_loss"] = mean_std(losses);
    if (!accs.empty()) summary["test_post_acc"] = mean_std(accs);
    std::ofstream out(result.dir / "summary.json");
    out << summary.dump(2) << "\n";
  }
  return result;
}

/// Figure-style CSV series derived from a completed run directory:
/// learning_curve.csv (step vs train pre/post and val post, per seed) and
/// adaptation_curve.csv (adaptation step vs test loss, per seed).
inline std::vector<std::filesystem::path> emit_plot_data(
    const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  const fs::path metrics_path = run_dir / "metrics.csv";
  if (!fs::exists(metrics_path)) {
    throw ConfigError("emit_plot_data: missing " + metrics_path.string());
  }
  const std::vector<MetricsRow> rows = parse_metrics_csv(metrics_path);

  std::vector<fs::path> written;
  {
    // step -> (train row, val row) per seed
    std::map<std::pair<int, long>, const MetricsRow*> train, val;
    for (const auto& r : rows) {
      if (r.split == "train") train[{r.seed, r.step}] = &r;
      else if (r.split == "val") val[{r.seed, r.step}] = &r;
    }
    const fs::path p = run_dir / "learning_curve.csv";
    std::ofstream out(p);
    out << "seed,step,train_pre,train_post,val_post\n";
    for (const auto& [key, tr] : train) {
      auto it = val.find(key);
      if (it == val.end()) continue;
      out << key.first << "," << key.second << ","
          << format_g17(tr->pre_update_acc ? *tr->pre_update_acc
                                           : tr->pre_update_loss)
          << ","
          << format_g17(tr->post_update_acc ? *tr->post_update_acc
                                            : tr->post_update_loss)
          << ","
          << format_g17(it->second->post_update_acc
                            ? *it->second->post_update_acc
                            : it->second->post_update_loss)
          << "\n";
    }
    written.push_back(p);
  }
  {
    const fs::path adaptation_path = run_dir / "adaptation.csv";
    if (!fs::exists(adaptation_path)) {
      throw ConfigError("emit_plot_data: missing " + adaptation_path.string());
    }
    std::ifstream in(adaptation_path);
    const fs::path p = run_dir / "adaptation_curve.csv";
    std::ofstream out(p);
    std::string line;
    std::getline(in, line);
    out << "seed,adapt_step,test_loss\n";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = config_detail::split(line, ',');
      out << f[0] << "," << f[1] << "," << f[2] << "\n";
    }
    written.push_back(p);
  }
  return written;
}

}  // namespace metaaug
