#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "metaaug/augment.hpp"
#include "metaaug/models.hpp"
#include "metaaug/rng.hpp"
#include "metaaug/tasks.hpp"
#include "metaaug/tensor.hpp"

namespace metaaug {

// ---------------------------------------------------------------------------
// Losses and accuracy
// ---------------------------------------------------------------------------

inline Tensor episode_loss(const Tensor& pred, const Episode& ep,
                           bool query_set) {
  if (ep.classification) {
    return ops::softmax_cross_entropy(
        pred, query_set ? ep.query_labels() : ep.support_labels());
  }
  return ops::mse(pred, query_set ? ep.y_q : ep.y_s);
}

inline double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const int m = logits.shape()[0], n = logits.shape()[1];
  auto p = logits.data();
  int hits = 0;
  for (int i = 0; i < m; ++i) {
    const double* row = &p[i * static_cast<size_t>(n)];
    const int pick = static_cast<int>(std::max_element(row, row + n) - row);
    if (pick == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / m;
}

struct EvalPoint {
  double loss = 0.0;
  std::optional<double> acc;
};

struct BatchMetrics {
  double pre_loss = 0.0, post_loss = 0.0;
  std::optional<double> pre_acc, post_acc;
};

inline EvalPoint score(const Tensor& pred, const Episode& ep) {
  NoGradScope no_grad;
  EvalPoint point;
  point.loss = episode_loss(pred, ep, /*query_set=*/true).item();
  if (ep.classification) point.acc = accuracy(pred, ep.query_labels());
  return point;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;  // decay * theta added to the gradient
};

struct AdamState {
  int t = 0;
  std::vector<Tensor> m, v;

  void step(ParamSet& params, const std::vector<Tensor>& grads,
            const AdamConfig& cfg) {
    if (m.empty()) {
      for (const Tensor& p : params.tensors) {
        m.push_back(Tensor::zeros(p.shape()));
        v.push_back(Tensor::zeros(p.shape()));
      }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (size_t i = 0; i < params.tensors.size(); ++i) {
      Tensor next = params.tensors[i].detach();
      auto theta = next.mutable_data();
      auto g = grads[i].data();
      auto mi = m[i].mutable_data();
      auto vi = v[i].mutable_data();
      for (size_t j = 0; j < theta.size(); ++j) {
        const double gj = g[j] + cfg.weight_decay * theta[j];
        mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * gj;
        vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * gj * gj;
        const double mhat = mi[j] / bc1;
        const double vhat = vi[j] / bc2;
        theta[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
      next.set_requires_grad(true);
      params.tensors[i] = std::move(next);
    }
  }
};

// ---------------------------------------------------------------------------
// MAML
// ---------------------------------------------------------------------------

struct MamlConfig {
  double inner_lr = 0.01;
  int inner_steps = 1;
  int inner_steps_eval = 10;
  double outer_lr = 1e-3;
  int meta_batch = 25;
  bool first_order = false;
  double weight_decay = 0.0;

  void validate() const {
    if (inner_lr <= 0.0) throw TensorError("maml: inner_lr must be > 0");
    if (inner_steps < 1 || inner_steps_eval < 0) {
      throw TensorError("maml: step counts invalid");
    }
    if (meta_batch < 1) throw TensorError("maml: meta_batch must be >= 1");
    if (weight_decay < 0.0) throw TensorError("maml: weight_decay must be >= 0");
  }
};

/// Gradient-descent adaptation on the support set:
/// theta' = theta - inner_lr * dL_support, repeated inner_steps times.
/// With create_graph the adapted parameters stay differentiable w.r.t.
/// the originals. Requires an active tape.
inline ParamSet maml_inner_adapt(const ParamSet& params, const MlpSpec& spec,
                                 const Episode& ep, const MamlConfig& cfg,
                                 bool create_graph) {
  ParamSet current = params;
  for (int step = 0; step < cfg.inner_steps; ++step) {
    Tensor pred = forward(current, spec, ep.x_s);
    Tensor loss = episode_loss(pred, ep, /*query_set=*/false);
    if (!std::isfinite(loss.item())) {
      throw TensorError("maml inner adapt: non-finite support loss at step " +
                        std::to_string(step));
    }
    Gradients g = grad(loss, current.tensors, create_graph);
    ParamSet next;
    next.names = current.names;
    next.tensors.reserve(current.tensors.size());
    for (size_t i = 0; i < current.tensors.size(); ++i) {
      next.tensors.push_back(ops::add(current.tensors[i],
                                      ops::scale(g.grads[i], -cfg.inner_lr)));
    }
    current = std::move(next);
  }
  return current;
}

/// One meta-step: mean query loss over the batch, each episode scored at
/// its adapted parameters, followed by one Adam step on the originals.
/// In first_order mode gradients do not flow through the inner adaptation.
inline BatchMetrics maml_outer_step(ParamSet& params, AdamState& opt,
                                    const MlpSpec& spec,
                                    const std::vector<Episode>& episodes,
                                    const MamlConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(episodes.size()) != cfg.meta_batch) {
    throw TensorError("maml outer step: batch size " +
                      std::to_string(episodes.size()) + " != meta_batch " +
                      std::to_string(cfg.meta_batch));
  }

  BatchMetrics metrics;
  double pre_acc = 0.0, post_acc = 0.0;
  bool any_acc = false;

  TapeScope scope;
  Tensor total;
  for (const Episode& ep : episodes) {
    {
      NoGradScope no_grad;
      EvalPoint pre = score(forward(params, spec, ep.x_q), ep);
      metrics.pre_loss += pre.loss;
      if (pre.acc) {
        pre_acc += *pre.acc;
        any_acc = true;
      }
    }
    ParamSet adapted =
        maml_inner_adapt(params, spec, ep, cfg, !cfg.first_order);
    Tensor pred = forward(adapted, spec, ep.x_q);
    Tensor loss = episode_loss(pred, ep, /*query_set=*/true);
    metrics.post_loss += loss.item();
    if (ep.classification) post_acc += accuracy(pred, ep.query_labels());
    total = total.defined() ? ops::add(total, loss) : loss;
  }
  const double inv = 1.0 / episodes.size();
  total = ops::scale(total, inv);
  if (!std::isfinite(total.item())) {
    throw TensorError("maml outer step: non-finite mean query loss");
  }

  Gradients g = grad(total, params.tensors);
  AdamConfig adam;
  adam.lr = cfg.outer_lr;
  adam.weight_decay = cfg.weight_decay;
  opt.step(params, g.grads, adam);

  metrics.pre_loss *= inv;
  metrics.post_loss *= inv;
  if (any_acc) {
    metrics.pre_acc = pre_acc * inv;
    metrics.post_acc = post_acc * inv;
  }
  return metrics;
}

/// Query metrics after 0..steps adaptation steps on the episode's support.
inline std::vector<EvalPoint> maml_eval_curve(const ParamSet& params,
                                              const MlpSpec& spec,
                                              const Episode& ep,
                                              const MamlConfig& cfg,
                                              int steps) {
  std::vector<EvalPoint> curve;
  ParamSet current = params;
  {
    NoGradScope no_grad;
    curve.push_back(score(forward(current, spec, ep.x_q), ep));
  }
  MamlConfig one_step = cfg;
  one_step.inner_steps = 1;
  for (int s = 0; s < steps; ++s) {
    {
      TapeScope scope;
      current = maml_inner_adapt(current, spec, ep, one_step,
                                 /*create_graph=*/false);
    }
    for (Tensor& t : current.tensors) t = t.detach().set_requires_grad(true);
    NoGradScope no_grad;
    curve.push_back(score(forward(current, spec, ep.x_q), ep));
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Conditional Neural Process
// ---------------------------------------------------------------------------

struct CnpConfig {
  MlpSpec encoder_spec;  // over concat(x, y) rows
  int latent_dim = 0;
  MlpSpec decoder_spec;  // over concat(z, x) rows
  double outer_lr = 1e-3;

  void validate(int x_dim, int y_dim) const {
    encoder_spec.validate();
    decoder_spec.validate();
    if (encoder_spec.output_width() != latent_dim) {
      throw TensorError("cnp: encoder output width != latent_dim");
    }
    if (encoder_spec.input_width() != x_dim + y_dim) {
      throw TensorError("cnp: encoder input width != x dim + y dim");
    }
    if (decoder_spec.input_width() != latent_dim + x_dim) {
      throw TensorError("cnp: decoder input width != latent_dim + x dim");
    }
  }
};

struct CnpParams {
  ParamSet encoder, decoder;

  std::vector<Tensor> all() const {
    std::vector<Tensor> out = encoder.tensors;
    out.insert(out.end(), decoder.tensors.begin(), decoder.tensors.end());
    return out;
  }
};

namespace detail {

inline Tensor one_hot(const std::vector<int>& labels, int n) {
  Tensor t = Tensor::zeros(Shape{static_cast<int>(labels.size()), n});
  auto d = t.mutable_data();
  for (size_t i = 0; i < labels.size(); ++i) {
    d[i * static_cast<size_t>(n) + labels[i]] = 1.0;
  }
  return t;
}

inline Tensor cnp_targets_for_encoder(const Episode& ep) {
  if (ep.classification) return one_hot(ep.support_labels(), ep.n_way);
  return ep.y_s;
}

}  // namespace detail

/// z = mean over support pairs of encoder(concat(x, y)); predictions are
/// decoder(concat(z, x_q)) per query row. The mean aggregation makes the
/// output exactly invariant to support ordering.
inline Tensor cnp_forward(const CnpConfig& cfg, const CnpParams& params,
                          const Episode& ep) {
  if (ep.x_s.shape()[0] < 1) {
    throw TensorError("cnp: support set must not be empty");
  }
  const int x_dim = ep.x_s.shape()[1];
  const int y_dim = ep.classification ? ep.n_way : ep.y_s.shape()[1];
  cfg.validate(x_dim, y_dim);

  Tensor pairs = ops::concat(ep.x_s, detail::cnp_targets_for_encoder(ep), 1);
  Tensor encoded = forward(params.encoder, cfg.encoder_spec, pairs);
  Tensor z = ops::mean(encoded, 0);
  Tensor z_rows = ops::broadcast(z, Shape{ep.x_q.shape()[0], cfg.latent_dim}, 0);
  Tensor dec_in = ops::concat(z_rows, ep.x_q, 1);
  return forward(params.decoder, cfg.decoder_spec, dec_in);
}

// ---------------------------------------------------------------------------
// Prototypical network
// ---------------------------------------------------------------------------

/// Class prototypes are the mean embedding of each label's support rows;
/// query logits are negative squared Euclidean distances to prototypes.
inline Tensor protonet_forward(const MlpSpec& embed_spec,
                               const ParamSet& params, const Episode& ep) {
  if (!ep.classification) {
    throw TensorError("protonet: classification episode required");
  }
  const std::vector<int> support_labels = ep.support_labels();
  std::vector<std::vector<int>> rows_by_label(ep.n_way);
  for (size_t i = 0; i < support_labels.size(); ++i) {
    rows_by_label[support_labels[i]].push_back(static_cast<int>(i));
  }
  for (int c = 0; c < ep.n_way; ++c) {
    if (rows_by_label[c].empty()) {
      throw TensorError("protonet: label " + std::to_string(c) +
                        " missing from support");
    }
  }

  Tensor emb_s = forward(params, embed_spec, ep.x_s);
  Tensor emb_q = forward(params, embed_spec, ep.x_q);
  const int d = emb_s.shape()[1];

  Tensor prototypes;  // [n_way, d]
  for (int c = 0; c < ep.n_way; ++c) {
    Tensor proto =
        ops::mean(ops::gather(emb_s, rows_by_label[c]), 0).reshaped(Shape{1, d});
    prototypes = prototypes.defined() ? ops::concat(prototypes, proto, 0) : proto;
  }

  // -||q - p||^2 = 2 q.p - ||q||^2 - ||p||^2, row-wise against every prototype.
  Tensor cross = ops::matmul(emb_q, prototypes, false, true);  // [q, n_way]
  Tensor q_sq = ops::sum(ops::square(emb_q), 1);               // [q]
  Tensor p_sq = ops::sum(ops::square(prototypes), 1);          // [n_way]
  Tensor logits = ops::add(
      ops::scale(cross, 2.0),
      ops::neg(ops::add(ops::broadcast(q_sq, cross.shape(), 1),
                        ops::broadcast(p_sq, cross.shape(), 0))));
  return logits;
}

/// Episode with rows sorted by content and labels renumbered by first
/// occurrence in the sorted support. Removes every trace of the original
/// label ordering, so training is numerically identical across episodes
/// that differ only by a label permutation.
inline Episode canonicalize_episode(const Episode& ep) {
  auto sorted_order = [](const Tensor& x, const std::vector<int>& labels,
                         const std::vector<int>* tiebreak) {
    const int m = x.shape()[0], n = x.shape()[1];
    auto p = x.data();
    std::vector<int> order(m);
    for (int i = 0; i < m; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double* ra = &p[a * static_cast<size_t>(n)];
      const double* rb = &p[b * static_cast<size_t>(n)];
      for (int j = 0; j < n; ++j) {
        if (ra[j] != rb[j]) return ra[j] < rb[j];
      }
      if (tiebreak) return (*tiebreak)[a] < (*tiebreak)[b];
      return labels[a] < labels[b];
    });
    return order;
  };

  const std::vector<int> s_labels = ep.support_labels();
  const std::vector<int> q_labels = ep.query_labels();
  const std::vector<int> s_order = sorted_order(ep.x_s, s_labels, nullptr);
  const std::vector<int> q_order = sorted_order(ep.x_q, q_labels, nullptr);

  // Label renumbering: order of first appearance in the sorted support.
  std::vector<int> remap(ep.n_way, -1);
  int next = 0;
  for (int idx : s_order) {
    if (remap[s_labels[idx]] < 0) remap[s_labels[idx]] = next++;
  }

  const int d = ep.x_s.shape()[1];
  Episode out = ep;
  auto rebuild = [&](const Tensor& x, const std::vector<int>& labels,
                     const std::vector<int>& order, Tensor& x_out,
                     Tensor& y_out) {
    const int m = x.shape()[0];
    x_out = Tensor::zeros(Shape{m, d});
    y_out = Tensor::zeros(Shape{m});
    auto src = x.data();
    auto dx = x_out.mutable_data();
    auto dy = y_out.mutable_data();
    for (int i = 0; i < m; ++i) {
      std::copy(src.begin() + order[i] * static_cast<size_t>(d),
                src.begin() + (order[i] + 1) * static_cast<size_t>(d),
                dx.begin() + i * static_cast<size_t>(d));
      dy[i] = remap[labels[order[i]]];
    }
  };
  rebuild(ep.x_s, s_labels, s_order, out.x_s, out.y_s);
  rebuild(ep.x_q, q_labels, q_order, out.x_q, out.y_q);

  out.meta.label_classes.assign(ep.n_way, -1);
  for (int c = 0; c < ep.n_way; ++c) {
    if (!ep.meta.label_classes.empty() && remap[c] >= 0) {
      out.meta.label_classes[remap[c]] = ep.meta.label_classes[c];
    }
  }
  out.meta.support_classes.clear();
  out.meta.query_classes.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Joint-training baseline (no adaptation)
// ---------------------------------------------------------------------------

/// Plain supervised regression on pooled samples from all of the family's
/// tasks. The evaluation protocol applies zero adaptation steps to the
/// result, so its adaptation curve is flat.
inline ParamSet joint_baseline_fit(const SinusoidFamily& fam,
                                   const MlpSpec& spec, int steps,
                                   int batch_size, double lr, Rng& rng) {
  ParamSet params = init(spec);
  AdamState opt;
  AdamConfig adam;
  adam.lr = lr;
  for (int s = 0; s < steps; ++s) {
    Tensor x = Tensor::zeros(Shape{batch_size, 1});
    Tensor y = Tensor::zeros(Shape{batch_size, 1});
    auto xd = x.mutable_data();
    auto yd = y.mutable_data();
    for (int i = 0; i < batch_size; ++i) {
      const int interval = rng.uniform_int(SinusoidFamily::kIntervals);
      xd[i] = rng.uniform(fam.intervals[interval].first,
                          fam.intervals[interval].second);
      yd[i] = fam.eval(interval, xd[i]);
    }
    TapeScope scope;
    Tensor loss = ops::mse(forward(params, spec, x), y);
    if (!std::isfinite(loss.item())) {
      throw TensorError("joint baseline: non-finite loss at step " +
                        std::to_string(s));
    }
    Gradients g = grad(loss, params.tensors);
    opt.step(params, g.grads, adam);
  }
  return params;
}

}  // namespace metaaug
