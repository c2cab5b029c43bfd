#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaaug/rng.hpp"
#include "metaaug/tensor.hpp"

namespace metaaug {

enum class Activation { relu, tanh };

struct MlpSpec {
  std::vector<int> layer_sizes;  // input, hidden..., output
  Activation activation = Activation::relu;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (layer_sizes.size() < 2) {
      throw TensorError("mlp spec: need at least input and output sizes");
    }
    for (int s : layer_sizes) {
      if (s < 1) throw TensorError("mlp spec: layer sizes must be >= 1");
    }
  }

  int input_width() const { return layer_sizes.front(); }
  int output_width() const { return layer_sizes.back(); }
  int layers() const { return static_cast<int>(layer_sizes.size()) - 1; }
};

/// Ordered, named parameter tensors. Order is stable for a given spec.
struct ParamSet {
  std::vector<Tensor> tensors;
  std::vector<std::string> names;

  long long count() const {
    long long n = 0;
    for (const Tensor& t : tensors) n += t.numel();
    return n;
  }

  /// Deep copy detached from any tape, grad participation re-enabled.
  ParamSet clone() const {
    ParamSet p;
    p.names = names;
    p.tensors.reserve(tensors.size());
    for (const Tensor& t : tensors) {
      p.tensors.push_back(t.detach().set_requires_grad(true));
    }
    return p;
  }
};

// Truncated-normal scale correction: dividing by the standard deviation of
// a unit normal truncated to [-2, 2] restores the requested variance.
inline constexpr double kTruncNormStd = 0.87962566103423978;

inline ParamSet init(const MlpSpec& spec) {
  spec.validate();
  ParamSet p;
  Rng root(mix64(spec.init_seed, 0x6d6c7021ULL));
  for (int l = 0; l < spec.layers(); ++l) {
    Rng layer_rng = root.child();
    const int fan_in = spec.layer_sizes[l];
    const int fan_out = spec.layer_sizes[l + 1];
    const double stddev = std::sqrt(2.0 / fan_in) / kTruncNormStd;
    Tensor w = Tensor::zeros(Shape{fan_in, fan_out});
    for (double& v : w.mutable_data()) {
      v = stddev * layer_rng.truncated_normal();
    }
    w.set_requires_grad(true);
    Tensor b = Tensor::zeros(Shape{fan_out});
    b.set_requires_grad(true);
    p.tensors.push_back(std::move(w));
    p.names.push_back("w" + std::to_string(l));
    p.tensors.push_back(std::move(b));
    p.names.push_back("b" + std::to_string(l));
  }
  return p;
}

inline Tensor forward(const ParamSet& params, const MlpSpec& spec,
                      const Tensor& x) {
  if (x.shape().rank() != 2 || x.shape()[1] != spec.input_width()) {
    throw TensorError("forward: input " + x.shape().str() +
                      " does not match width " +
                      std::to_string(spec.input_width()));
  }
  Tensor h = x;
  for (int l = 0; l < spec.layers(); ++l) {
    h = ops::add_bias(ops::matmul(h, params.tensors[2 * l]),
                      params.tensors[2 * l + 1]);
    if (l + 1 < spec.layers()) {
      h = spec.activation == Activation::relu ? ops::relu(h) : ops::tanh(h);
    }
  }
  return h;
}

// Checkpoint format: one JSON header line naming params and shapes,
// followed by the flat little-endian 64-bit float payload in order.
inline void save_checkpoint(const std::filesystem::path& path,
                            const ParamSet& params) {
  nlohmann::json header;
  header["params"] = nlohmann::json::array();
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    nlohmann::json entry;
    entry["name"] = params.names[i];
    auto shape = nlohmann::json::array();
    for (int d = 0; d < params.tensors[i].shape().rank(); ++d) {
      shape.push_back(params.tensors[i].shape()[d]);
    }
    entry["shape"] = shape;
    header["params"].push_back(entry);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TensorError("checkpoint: cannot open " + path.string());
  out << header.dump() << "\n";
  for (const Tensor& t : params.tensors) {
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
}

inline ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError("checkpoint: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw TensorError("checkpoint: missing header in " + path.string());
  }
  nlohmann::json header = nlohmann::json::parse(line);
  ParamSet p;
  for (const auto& entry : header.at("params")) {
    Shape shape;
    const auto& dims = entry.at("shape");
    if (dims.size() == 1) {
      shape = Shape{dims[0].get<int>()};
    } else if (dims.size() == 2) {
      shape = Shape{dims[0].get<int>(), dims[1].get<int>()};
    } else {
      throw TensorError("checkpoint: unsupported rank in header");
    }
    Tensor t = Tensor::zeros(shape);
    auto buf = t.mutable_data();
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!in) throw TensorError("checkpoint: truncated payload");
    t.set_requires_grad(true);
    p.tensors.push_back(std::move(t));
    p.names.push_back(entry.at("name").get<std::string>());
  }
  return p;
}

}  // namespace metaaug
