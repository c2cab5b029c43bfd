#pragma once

#include <functional>
#include <string>
#include <vector>

#include "metaaug/models.hpp"
#include "metaaug/rng.hpp"
#include "metaaug/tensor.hpp"

namespace metaaug {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

namespace gradcheck_detail {

inline double rel_err(double ad, double fd) {
  return std::abs(ad - fd) / std::max(1.0, std::abs(fd));
}

/// Central finite differences of a scalar function against the reverse-mode
/// gradient, over every element of every input.
inline GradCheckResult check_function(
    const std::string& name, std::vector<Tensor> inputs,
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    double tolerance = 1e-4, double h = 1e-5) {
  for (Tensor& t : inputs) t.set_requires_grad(true);

  Gradients ad;
  {
    TapeScope scope;
    Tensor loss = fn(inputs);
    ad = grad(loss, inputs);
  }

  GradCheckResult result;
  result.name = name;
  result.tolerance = tolerance;
  for (size_t which = 0; which < inputs.size(); ++which) {
    auto vals = inputs[which].mutable_data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      const double up = fn(inputs).item();
      vals[i] = saved - h;
      const double down = fn(inputs).item();
      vals[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double err = rel_err(ad.grads[which].data()[i], fd);
      result.max_rel_err = std::max(result.max_rel_err, err);
    }
  }
  result.pass = result.max_rel_err < tolerance;
  return result;
}

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(s);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

/// Keeps values away from the relu kink so finite differences are valid.
inline Tensor random_tensor_off_kink(Shape s, Rng& rng) {
  Tensor t = random_tensor(s, rng);
  for (double& v : t.mutable_data()) {
    if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
  }
  return t;
}

}  // namespace gradcheck_detail

/// First-order finite-difference checks, one per primitive.
inline std::vector<GradCheckResult> check_primitives(std::uint64_t seed = 17) {
  using namespace gradcheck_detail;
  using namespace ops;
  Rng rng(mix64(seed, 0x67636bULL));
  std::vector<GradCheckResult> results;

  auto scalarize = [](const Tensor& t) { return mean(square(t)); };

  results.push_back(check_function(
      "add", {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{3, 4}, rng)},
      [&](const std::vector<Tensor>& in) {
        return scalarize(add(in[0], in[1]));
      }));
  results.push_back(check_function(
      "mul", {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{3, 4}, rng)},
      [&](const std::vector<Tensor>& in) {
        return scalarize(mul(in[0], in[1]));
      }));
  results.push_back(check_function(
      "matmul", {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{4, 5}, rng)},
      [&](const std::vector<Tensor>& in) {
        return scalarize(matmul(in[0], in[1]));
      }));
  results.push_back(check_function(
      "matmul-transposed",
      {random_tensor(Shape{4, 3}, rng), random_tensor(Shape{5, 4}, rng)},
      [&](const std::vector<Tensor>& in) {
        return scalarize(matmul(in[0], in[1], true, true));
      }));
  results.push_back(check_function(
      "relu", {random_tensor_off_kink(Shape{4, 4}, rng)},
      [&](const std::vector<Tensor>& in) { return scalarize(relu(in[0])); }));
  results.push_back(check_function(
      "tanh", {random_tensor(Shape{4, 4}, rng)},
      [&](const std::vector<Tensor>& in) { return scalarize(tanh(in[0])); }));
  results.push_back(check_function(
      "square", {random_tensor(Shape{4, 4}, rng)},
      [&](const std::vector<Tensor>& in) { return scalarize(square(in[0])); }));
  results.push_back(check_function(
      "exp", {random_tensor(Shape{4, 4}, rng)},
      [&](const std::vector<Tensor>& in) { return scalarize(exp(in[0])); }));
  results.push_back(check_function(
      "log", {random_tensor(Shape{4, 4}, rng, 0.5, 2.0)},
      [&](const std::vector<Tensor>& in) { return scalarize(log(in[0])); }));
  results.push_back(check_function(
      "sum", {random_tensor(Shape{4, 3}, rng)},
      [&](const std::vector<Tensor>& in) { return scalarize(sum(in[0], 0)); }));
  results.push_back(check_function(
      "sum-all", {random_tensor(Shape{4, 3}, rng)},
      [&](const std::vector<Tensor>& in) { return square(sum(in[0])); }));
  results.push_back(check_function(
      "mean", {random_tensor(Shape{4, 3}, rng)},
      [&](const std::vector<Tensor>& in) { return scalarize(mean(in[0], 1)); }));
  results.push_back(check_function(
      "broadcast", {random_tensor(Shape{3}, rng)},
      [&](const std::vector<Tensor>& in) {
        return scalarize(broadcast(in[0], Shape{4, 3}, 0));
      }));
  results.push_back(check_function(
      "concat",
      {random_tensor(Shape{3, 2}, rng), random_tensor(Shape{3, 4}, rng)},
      [&](const std::vector<Tensor>& in) {
        return scalarize(concat(in[0], in[1], 1));
      }));
  results.push_back(check_function(
      "gather", {random_tensor(Shape{5, 3}, rng)},
      [&](const std::vector<Tensor>& in) {
        return scalarize(gather(in[0], {4, 0, 2, 0}));
      }));
  results.push_back(check_function(
      "softmax-cross-entropy", {random_tensor(Shape{6, 5}, rng, -2.0, 2.0)},
      [&](const std::vector<Tensor>& in) {
        return softmax_cross_entropy(in[0], {0, 3, 2, 4, 1, 2});
      }));
  return results;
}

/// Second-order check: the meta-gradient of L_query(theta - a dL_support)
/// on a small MLP against finite differences of the composed objective.
inline GradCheckResult check_second_order(std::uint64_t seed = 23) {
  using namespace gradcheck_detail;
  Rng rng(mix64(seed, 0x326e64ULL));

  MlpSpec spec;
  spec.layer_sizes = {2, 8, 1};
  spec.activation = Activation::tanh;
  spec.init_seed = seed;
  ParamSet params = init(spec);

  const Tensor x_s = random_tensor(Shape{6, 2}, rng, -1.5, 1.5);
  const Tensor y_s = random_tensor(Shape{6, 1}, rng);
  const Tensor x_q = random_tensor(Shape{6, 2}, rng, -1.5, 1.5);
  const Tensor y_q = random_tensor(Shape{6, 1}, rng);
  const double alpha = 0.05;

  // Autodiff meta-gradient.
  std::vector<Tensor> meta_grads;
  {
    TapeScope scope;
    Tensor support_loss = ops::mse(forward(params, spec, x_s), y_s);
    Gradients g = grad(support_loss, params.tensors, /*create_graph=*/true);
    ParamSet adapted;
    adapted.names = params.names;
    for (size_t i = 0; i < params.tensors.size(); ++i) {
      adapted.tensors.push_back(
          ops::add(params.tensors[i], ops::scale(g.grads[i], -alpha)));
    }
    Tensor query_loss = ops::mse(forward(adapted, spec, x_q), y_q);
    meta_grads = grad(query_loss, params.tensors).grads;
  }

  // Finite differences of the full composed function.
  auto composed = [&]() {
    TapeScope scope;
    Tensor support_loss = ops::mse(forward(params, spec, x_s), y_s);
    Gradients g = grad(support_loss, params.tensors, /*create_graph=*/true);
    ParamSet adapted;
    adapted.names = params.names;
    for (size_t i = 0; i < params.tensors.size(); ++i) {
      adapted.tensors.push_back(
          ops::add(params.tensors[i], ops::scale(g.grads[i], -alpha)));
    }
    return ops::mse(forward(adapted, spec, x_q), y_q).item();
  };

  GradCheckResult result;
  result.name = "second-order-maml";
  result.tolerance = 1e-3;
  const double h = 1e-5;
  for (size_t which = 0; which < params.tensors.size(); ++which) {
    auto vals = params.tensors[which].mutable_data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      const double up = composed();
      vals[i] = saved - h;
      const double down = composed();
      vals[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      result.max_rel_err = std::max(
          result.max_rel_err, rel_err(meta_grads[which].data()[i], fd));
    }
  }
  result.pass = result.max_rel_err < result.tolerance;
  return result;
}

}  // namespace metaaug
