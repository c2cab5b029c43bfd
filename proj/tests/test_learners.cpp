#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "metaaug/learners.hpp"

using namespace metaaug;

namespace {

// Single linear unit: pred = w x + b.
MlpSpec linear_spec() {
  MlpSpec spec;
  spec.layer_sizes = {1, 1};
  spec.activation = Activation::relu;
  spec.init_seed = 0;
  return spec;
}

ParamSet linear_params(double w, double b) {
  ParamSet p;
  p.tensors = {Tensor::from(Shape{1, 1}, {w}).set_requires_grad(true),
               Tensor::from(Shape{1}, {b}).set_requires_grad(true)};
  p.names = {"w0", "b0"};
  return p;
}

Episode linear_episode(double w, double b, std::vector<double> xs,
                       std::vector<double> xq, double y_offset = 0.0) {
  Episode ep;
  ep.classification = false;
  ep.k_shot = static_cast<int>(xs.size());
  ep.n_query = static_cast<int>(xq.size());
  ep.x_s = Tensor::from(Shape{ep.k_shot, 1}, xs);
  ep.x_q = Tensor::from(Shape{ep.n_query, 1}, xq);
  std::vector<double> ys, yq;
  for (double x : xs) ys.push_back(w * x + b + y_offset);
  for (double x : xq) yq.push_back(w * x + b + y_offset);
  ep.y_s = Tensor::from(Shape{ep.k_shot, 1}, ys);
  ep.y_q = Tensor::from(Shape{ep.n_query, 1}, yq);
  return ep;
}

Episode classification_episode(std::uint64_t seed = 12, int k = 2, int q = 3) {
  ClassPool pool = generate_synthetic_pool(10, 6, 0.3, 42);
  pool.build_partition(5);
  Rng rng(seed);
  return sample_classification_episode(pool, SamplerMode::intershuffle, k, 5, q,
                                       rng);
}

MamlConfig one_step_config(double alpha = 0.1) {
  MamlConfig cfg;
  cfg.inner_lr = alpha;
  cfg.inner_steps = 1;
  cfg.meta_batch = 1;
  return cfg;
}

}  // namespace

TEST_CASE("zero support gradient leaves parameters at the fixed point") {
  MlpSpec spec = linear_spec();
  ParamSet params = linear_params(2.0, -1.0);
  Episode ep = linear_episode(2.0, -1.0, {0.5, 1.0, 2.0}, {3.0});
  TapeScope scope;
  ParamSet adapted = maml_inner_adapt(params, spec, ep, one_step_config(), false);
  REQUIRE(adapted.tensors[0].item() == 2.0);
  REQUIRE(adapted.tensors[1].data()[0] == -1.0);
}

TEST_CASE("one gradient step on a quadratic follows the analytic update") {
  // Support (x=1, y=0) with pred = w x: loss = w^2, so w' = w - a * 2w.
  MlpSpec spec = linear_spec();
  ParamSet params = linear_params(1.0, 0.0);
  Episode ep;
  ep.classification = false;
  ep.k_shot = 1;
  ep.n_query = 1;
  ep.x_s = Tensor::from(Shape{1, 1}, {1.0});
  ep.y_s = Tensor::from(Shape{1, 1}, {0.0});
  ep.x_q = ep.x_s;
  ep.y_q = ep.y_s;
  TapeScope scope;
  ParamSet adapted =
      maml_inner_adapt(params, spec, ep, one_step_config(0.1), false);
  // loss = (w + b)^2; dw = db = 2(w + b) = 2.
  REQUIRE_THAT(adapted.tensors[0].item(),
               Catch::Matchers::WithinAbs(0.8, 1e-15));
  REQUIRE_THAT(adapted.tensors[1].data()[0],
               Catch::Matchers::WithinAbs(-0.2, 1e-15));
}

TEST_CASE("inner adaptation reports the failing step for non-finite loss") {
  MlpSpec spec = linear_spec();
  ParamSet params = linear_params(std::numeric_limits<double>::infinity(), 0.0);
  Episode ep = linear_episode(1.0, 0.0, {1.0}, {1.0});
  TapeScope scope;
  try {
    maml_inner_adapt(params, spec, ep, one_step_config(), false);
    FAIL("expected error");
  } catch (const TensorError& e) {
    REQUIRE(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("meta-gradient through one inner step matches finite differences") {
  MlpSpec spec = linear_spec();
  Episode ep = linear_episode(1.5, 0.5, {0.2, 0.9, -0.4}, {1.2, -0.8});
  const MamlConfig cfg = one_step_config(0.05);

  auto meta_loss = [&](const ParamSet& p) {
    TapeScope scope;
    ParamSet adapted = maml_inner_adapt(p, spec, ep, cfg, true);
    return episode_loss(forward(adapted, spec, ep.x_q), ep, true).item();
  };

  ParamSet params = linear_params(0.3, -0.2);
  std::vector<Tensor> meta_grads;
  {
    TapeScope scope;
    ParamSet adapted = maml_inner_adapt(params, spec, ep, cfg, true);
    Tensor loss = episode_loss(forward(adapted, spec, ep.x_q), ep, true);
    meta_grads = grad(loss, params.tensors).grads;
  }
  const double h = 1e-6;
  for (size_t t = 0; t < params.tensors.size(); ++t) {
    auto vals = params.tensors[t].mutable_data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      const double up = meta_loss(params);
      vals[i] = saved - h;
      const double down = meta_loss(params);
      vals[i] = saved;
      const double fd = (up - down) / (2 * h);
      REQUIRE_THAT(meta_grads[t].data()[i],
                   Catch::Matchers::WithinRel(fd, 1e-3));
    }
  }
}

TEST_CASE("outer step with zero query gradient leaves parameters untouched") {
  MlpSpec spec = linear_spec();
  ParamSet params = linear_params(2.0, -1.0);
  const std::vector<double> before{params.tensors[0].item(),
                                   params.tensors[1].data()[0]};
  Episode ep = linear_episode(2.0, -1.0, {0.5, 1.0, 2.0}, {3.0, -1.0});
  MamlConfig cfg = one_step_config();
  AdamState opt;
  BatchMetrics metrics = maml_outer_step(params, opt, spec, {ep}, cfg);
  REQUIRE(metrics.post_loss == 0.0);
  REQUIRE(params.tensors[0].item() == before[0]);
  REQUIRE(params.tensors[1].data()[0] == before[1]);
}

TEST_CASE("first and second order agree when the inner objective is linear") {
  // Curvature-free inner objective: mean prediction. Its gradient does not
  // depend on the parameters, so the adaptation Jacobian is the identity
  // and stopping gradients through it changes nothing.
  MlpSpec spec = linear_spec();
  Episode ep = linear_episode(1.0, 0.0, {0.3, -0.7, 1.1}, {0.9, 0.1});
  const double alpha = 0.05;

  auto meta_grads = [&](bool create_graph) {
    ParamSet params = linear_params(0.4, 0.2);
    TapeScope scope;
    Tensor inner = ops::mean(forward(params, spec, ep.x_s));
    Gradients g = grad(inner, params.tensors, create_graph);
    ParamSet adapted;
    adapted.names = params.names;
    for (size_t i = 0; i < params.tensors.size(); ++i) {
      adapted.tensors.push_back(
          ops::add(params.tensors[i], ops::scale(g.grads[i], -alpha)));
    }
    Tensor loss = episode_loss(forward(adapted, spec, ep.x_q), ep, true);
    Gradients meta = grad(loss, params.tensors);
    return std::vector<double>{meta.grads[0].item(), meta.grads[1].data()[0]};
  };

  const auto second = meta_grads(true);
  const auto first = meta_grads(false);
  REQUIRE_THAT(first[0], Catch::Matchers::WithinRel(second[0], 1e-12));
  REQUIRE_THAT(first[1], Catch::Matchers::WithinRel(second[1], 1e-12));
}

TEST_CASE("adam step matches a hand-computed update on a quadratic") {
  // f(theta) = (theta - 3)^2, gradient 2 (theta - 3).
  ParamSet params;
  params.tensors = {Tensor::from(Shape{1}, {0.0}).set_requires_grad(true)};
  params.names = {"theta"};
  AdamState opt;
  AdamConfig cfg;
  cfg.lr = 0.1;

  double theta = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * (params.tensors[0].item() - 3.0);
    opt.step(params, {Tensor::from(Shape{1}, {g})}, cfg);

    const double g_ref = 2.0 * (theta - 3.0);
    m = 0.9 * m + 0.1 * g_ref;
    v = 0.999 * v + 0.001 * g_ref * g_ref;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    theta -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    REQUIRE_THAT(params.tensors[0].item(),
                 Catch::Matchers::WithinAbs(theta, 1e-15));
  }
}

TEST_CASE("adam applies weight decay through the gradient") {
  ParamSet params;
  params.tensors = {Tensor::from(Shape{1}, {2.0}).set_requires_grad(true)};
  params.names = {"theta"};
  AdamState opt;
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  // Zero loss gradient: the only signal is decay * theta = 1.0.
  opt.step(params, {Tensor::from(Shape{1}, {0.0})}, cfg);
  const double g = 1.0;
  const double mhat = 0.1 * g / (1.0 - 0.9);
  const double vhat = 0.001 * g * g / (1.0 - 0.999);
  const double expected = 2.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  REQUIRE_THAT(params.tensors[0].item(),
               Catch::Matchers::WithinAbs(expected, 1e-15));
}

namespace {

CnpConfig small_cnp(int x_dim, int y_dim, int out_dim, std::uint64_t seed) {
  CnpConfig cfg;
  cfg.latent_dim = 8;
  cfg.encoder_spec.layer_sizes = {x_dim + y_dim, 16, 8};
  cfg.encoder_spec.activation = Activation::tanh;
  cfg.encoder_spec.init_seed = seed;
  cfg.decoder_spec.layer_sizes = {8 + x_dim, 16, out_dim};
  cfg.decoder_spec.activation = Activation::tanh;
  cfg.decoder_spec.init_seed = seed + 1;
  return cfg;
}

Episode permuted_support(const Episode& ep, const std::vector<int>& perm) {
  Episode out = ep;
  const int d = ep.x_s.shape()[1];
  out.x_s = Tensor::zeros(ep.x_s.shape());
  out.y_s = Tensor::zeros(ep.y_s.shape());
  const int y_width = ep.y_s.shape().rank() == 2 ? ep.y_s.shape()[1] : 1;
  for (size_t i = 0; i < perm.size(); ++i) {
    for (int j = 0; j < d; ++j) {
      out.x_s.mutable_data()[i * d + j] = ep.x_s.data()[perm[i] * d + j];
    }
    for (int j = 0; j < y_width; ++j) {
      out.y_s.mutable_data()[i * y_width + j] =
          ep.y_s.data()[perm[i] * y_width + j];
    }
  }
  return out;
}

}  // namespace

TEST_CASE("cnp predictions are bitwise invariant to support order") {
  SinusoidFamily fam(4);
  Rng rng(5);
  Episode ep = sample_sinusoid_episode(fam, 6, 4, rng);
  CnpConfig cfg = small_cnp(1, 1, 1, 21);
  CnpParams params{init(cfg.encoder_spec), init(cfg.decoder_spec)};

  const Tensor base = cnp_forward(cfg, params, ep);
  Episode shuffled = permuted_support(ep, Rng(99).permutation(6));
  const Tensor perm = cnp_forward(cfg, params, shuffled);
  REQUIRE(std::equal(base.data().begin(), base.data().end(),
                     perm.data().begin()));
}

TEST_CASE("cnp collapses duplicated support pairs to the single-pair code") {
  CnpConfig cfg = small_cnp(1, 1, 1, 22);
  CnpParams params{init(cfg.encoder_spec), init(cfg.decoder_spec)};
  Episode one;
  one.classification = false;
  one.k_shot = 1;
  one.n_query = 2;
  one.x_s = Tensor::from(Shape{1, 1}, {0.7});
  one.y_s = Tensor::from(Shape{1, 1}, {-0.3});
  one.x_q = Tensor::from(Shape{2, 1}, {0.1, 0.9});
  one.y_q = Tensor::from(Shape{2, 1}, {0.0, 0.0});

  Episode two = one;
  two.k_shot = 2;
  two.x_s = Tensor::from(Shape{2, 1}, {0.7, 0.7});
  two.y_s = Tensor::from(Shape{2, 1}, {-0.3, -0.3});

  const Tensor a = cnp_forward(cfg, params, one);
  const Tensor b = cnp_forward(cfg, params, two);
  REQUIRE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("cnp validates widths and rejects empty support") {
  CnpConfig cfg = small_cnp(1, 1, 1, 23);
  CnpParams params{init(cfg.encoder_spec), init(cfg.decoder_spec)};
  Episode ep;
  ep.classification = false;
  ep.k_shot = 0;
  ep.x_s = Tensor::zeros(Shape{0, 1});
  ep.y_s = Tensor::zeros(Shape{0, 1});
  ep.x_q = Tensor::zeros(Shape{1, 1});
  ep.y_q = Tensor::zeros(Shape{1, 1});
  REQUIRE_THROWS_AS(cnp_forward(cfg, params, ep), TensorError);

  CnpConfig bad = cfg;
  bad.latent_dim = 9;
  SinusoidFamily fam(4);
  Rng rng(5);
  Episode good_ep = sample_sinusoid_episode(fam, 3, 2, rng);
  REQUIRE_THROWS_AS(cnp_forward(bad, params, good_ep), TensorError);
}

TEST_CASE("protonet scores a support point's own class highest") {
  MlpSpec embed;
  embed.layer_sizes = {6, 16, 8};
  embed.activation = Activation::tanh;
  embed.init_seed = 31;
  ParamSet params = init(embed);

  Episode ep = classification_episode(7, 1, 2);
  // Make query row 0 equal to the support row with label 2.
  const int d = 6;
  const auto support_labels = ep.support_labels();
  int source = -1;
  for (size_t i = 0; i < support_labels.size(); ++i) {
    if (support_labels[i] == 2) source = static_cast<int>(i);
  }
  REQUIRE(source >= 0);
  for (int j = 0; j < d; ++j) {
    ep.x_q.mutable_data()[j] = ep.x_s.data()[source * d + j];
  }
  ep.y_q.mutable_data()[0] = 2;

  const Tensor logits = protonet_forward(embed, params, ep);
  // k = 1: the prototype is that embedding, so the self-distance is zero.
  REQUIRE_THAT(logits.at(0, 2), Catch::Matchers::WithinAbs(0.0, 1e-12));
  const auto q_labels = ep.query_labels();
  REQUIRE(accuracy(ops::gather(logits, {0}), {q_labels[0]}) == 1.0);
}

TEST_CASE("protonet is bitwise invariant to support order") {
  MlpSpec embed;
  embed.layer_sizes = {6, 16, 8};
  embed.activation = Activation::relu;
  embed.init_seed = 32;
  ParamSet params = init(embed);
  Episode ep = classification_episode(8, 3, 2);
  const Tensor base = protonet_forward(embed, params, ep);
  Episode shuffled = permuted_support(ep, Rng(123).permutation(15));
  const Tensor perm = protonet_forward(embed, params, shuffled);
  REQUIRE(std::equal(base.data().begin(), base.data().end(),
                     perm.data().begin()));
}

TEST_CASE("protonet requires every label in the support set") {
  MlpSpec embed;
  embed.layer_sizes = {6, 8, 4};
  embed.init_seed = 33;
  ParamSet params = init(embed);
  Episode ep = classification_episode(9, 1, 1);
  ep.y_s.mutable_data()[3] = 2.0;  // overwrite one label, losing its class
  REQUIRE_THROWS_AS(protonet_forward(embed, params, ep), TensorError);
}

TEST_CASE("canonicalized episodes erase label permutations entirely") {
  ClassPool pool = generate_synthetic_pool(10, 6, 0.3, 42, 40);
  pool.build_partition(5);
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng_a(seed), rng_b(seed);
    Episode a = sample_classification_episode(
        pool, SamplerMode::non_mutually_exclusive, 2, 5, 3, rng_a);
    Episode b = sample_classification_episode(pool, SamplerMode::intrashuffle,
                                              2, 5, 3, rng_b);
    const Episode ca = canonicalize_episode(a);
    const Episode cb = canonicalize_episode(b);
    REQUIRE(std::equal(ca.x_s.data().begin(), ca.x_s.data().end(),
                       cb.x_s.data().begin()));
    REQUIRE(std::equal(ca.x_q.data().begin(), ca.x_q.data().end(),
                       cb.x_q.data().begin()));
    REQUIRE(ca.support_labels() == cb.support_labels());
    REQUIRE(ca.query_labels() == cb.query_labels());
  }
}

TEST_CASE("maml adaptation is support-order invariant up to rounding") {
  MlpSpec spec;
  spec.layer_sizes = {6, 16, 5};
  spec.activation = Activation::relu;
  spec.init_seed = 41;
  ParamSet params = init(spec);
  MamlConfig cfg;
  cfg.inner_lr = 0.05;
  cfg.inner_steps = 3;

  Episode ep = classification_episode(10, 2, 4);
  Episode shuffled = permuted_support(ep, Rng(7).permutation(10));

  auto adapted_preds = [&](const Episode& e) {
    TapeScope scope;
    ParamSet adapted = maml_inner_adapt(params, spec, e, cfg, false);
    NoGradScope no_grad;
    return forward(adapted, spec, e.x_q);
  };
  const Tensor a = adapted_preds(ep);
  const Tensor b = adapted_preds(shuffled);
  for (size_t i = 0; i < a.data().size(); ++i) {
    REQUIRE_THAT(a.data()[i], Catch::Matchers::WithinRel(b.data()[i], 1e-9));
  }
}

TEST_CASE("joint baseline trains on all intervals and needs no adaptation") {
  SinusoidFamily fam(17);
  MlpSpec spec;
  spec.layer_sizes = {1, 40, 40, 1};
  spec.activation = Activation::relu;
  spec.init_seed = 3;
  Rng rng(19);
  ParamSet params = joint_baseline_fit(fam, spec, 400, 64, 1e-3, rng);

  // On the training tasks the pooled fit should beat predicting zero.
  Rng eval_rng(23);
  double fit_mse = 0.0, zero_mse = 0.0;
  for (int e = 0; e < 50; ++e) {
    Episode ep = sample_sinusoid_episode(fam, 1, 10, eval_rng);
    NoGradScope no_grad;
    Tensor pred = forward(params, spec, ep.x_q);
    fit_mse += ops::mse(pred, ep.y_q).item();
    zero_mse += ops::mse(Tensor::zeros(pred.shape()), ep.y_q).item();
  }
  REQUIRE(fit_mse < 0.5 * zero_mse);
}
