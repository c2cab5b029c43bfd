#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "metaaug/models.hpp"
#include "metaaug/rng.hpp"

using namespace metaaug;

namespace {

MlpSpec sinusoid_spec(std::uint64_t seed = 7) {
  MlpSpec spec;
  spec.layer_sizes = {1, 40, 40, 1};
  spec.activation = Activation::relu;
  spec.init_seed = seed;
  return spec;
}

}  // namespace

TEST_CASE("init is deterministic per seed") {
  const ParamSet a = init(sinusoid_spec());
  const ParamSet b = init(sinusoid_spec());
  REQUIRE(a.names == b.names);
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    REQUIRE(std::equal(a.tensors[i].data().begin(), a.tensors[i].data().end(),
                       b.tensors[i].data().begin()));
  }
  const ParamSet c = init(sinusoid_spec(8));
  REQUIRE_FALSE(std::equal(a.tensors[0].data().begin(),
                           a.tensors[0].data().end(),
                           c.tensors[0].data().begin()));
}

TEST_CASE("biases initialize to zero") {
  const ParamSet p = init(sinusoid_spec());
  for (size_t i = 0; i < p.names.size(); ++i) {
    if (p.names[i][0] != 'b') continue;
    for (double v : p.tensors[i].data()) REQUIRE(v == 0.0);
  }
}

TEST_CASE("weight variance tracks 2/fan_in on the 40x40 layer") {
  const ParamSet p = init(sinusoid_spec());
  const Tensor& w1 = p.tensors[2];  // 40x40
  REQUIRE(w1.shape() == Shape{40, 40});
  double mean = 0.0;
  for (double v : w1.data()) mean += v;
  mean /= w1.numel();
  double var = 0.0;
  for (double v : w1.data()) var += (v - mean) * (v - mean);
  var /= (w1.numel() - 1);
  const double target = 2.0 / 40.0;
  REQUIRE(var > 0.8 * target);
  REQUIRE(var < 1.2 * target);
}

TEST_CASE("parameter count for the sinusoid architecture") {
  REQUIRE(init(sinusoid_spec()).count() == 1761);
}

TEST_CASE("all-zero parameters map everything to zero") {
  MlpSpec spec = sinusoid_spec();
  ParamSet p = init(spec);
  for (Tensor& t : p.tensors) {
    for (double& v : t.mutable_data()) v = 0.0;
  }
  Tensor x = Tensor::from(Shape{3, 1}, {-1.0, 0.5, 2.0});
  const Tensor y = forward(p, spec, x);
  for (double v : y.data()) REQUIRE(v == 0.0);
}

TEST_CASE("identity-weight single layer reproduces its input") {
  MlpSpec spec;
  spec.layer_sizes = {3, 3};
  spec.init_seed = 0;
  ParamSet p = init(spec);
  for (double& v : p.tensors[0].mutable_data()) v = 0.0;
  for (int i = 0; i < 3; ++i) p.tensors[0].mutable_data()[i * 3 + i] = 1.0;
  Tensor x = Tensor::from(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = forward(p, spec, x);
  REQUIRE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST_CASE("forward matches a straight-line reimplementation") {
  MlpSpec spec;
  spec.layer_sizes = {2, 7, 3};
  spec.activation = Activation::tanh;
  spec.init_seed = 42;
  const ParamSet p = init(spec);
  Rng rng(5);
  Tensor x = Tensor::zeros(Shape{4, 2});
  for (double& v : x.mutable_data()) v = rng.uniform(-2.0, 2.0);

  const Tensor got = forward(p, spec, x);

  // Plain nested loops over the same parameters.
  auto w0 = p.tensors[0].data();
  auto b0 = p.tensors[1].data();
  auto w1 = p.tensors[2].data();
  auto b1 = p.tensors[3].data();
  auto xv = x.data();
  for (int r = 0; r < 4; ++r) {
    double hidden[7];
    for (int j = 0; j < 7; ++j) {
      double acc = b0[j];
      for (int i = 0; i < 2; ++i) acc += xv[r * 2 + i] * w0[i * 7 + j];
      hidden[j] = std::tanh(acc);
    }
    for (int o = 0; o < 3; ++o) {
      double acc = b1[o];
      for (int j = 0; j < 7; ++j) acc += hidden[j] * w1[j * 3 + o];
      REQUIRE_THAT(got.at(r, o), Catch::Matchers::WithinRel(acc, 1e-12));
    }
  }
}

TEST_CASE("forward rejects width mismatch") {
  MlpSpec spec = sinusoid_spec();
  ParamSet p = init(spec);
  REQUIRE_THROWS_AS(forward(p, spec, Tensor::zeros(Shape{3, 2})), TensorError);
}

TEST_CASE("spec validation") {
  MlpSpec bad;
  bad.layer_sizes = {4};
  REQUIRE_THROWS_AS(bad.validate(), TensorError);
  bad.layer_sizes = {4, 0};
  REQUIRE_THROWS_AS(bad.validate(), TensorError);
}

TEST_CASE("checkpoint round-trips bit-exactly with a JSON header line") {
  const auto path = std::filesystem::temp_directory_path() / "metaaug_ckpt.bin";
  const ParamSet p = init(sinusoid_spec(99));
  save_checkpoint(path, p);

  {
    std::ifstream in(path, std::ios::binary);
    std::string header;
    std::getline(in, header);
    REQUIRE(header.find("\"params\"") != std::string::npos);
    REQUIRE(header.find("w0") != std::string::npos);
    REQUIRE(header.find("[1,40]") != std::string::npos);
  }

  const ParamSet q = load_checkpoint(path);
  REQUIRE(q.names == p.names);
  for (size_t i = 0; i < p.tensors.size(); ++i) {
    REQUIRE(p.tensors[i].shape() == q.tensors[i].shape());
    REQUIRE(std::equal(p.tensors[i].data().begin(), p.tensors[i].data().end(),
                       q.tensors[i].data().begin()));
  }
  std::filesystem::remove(path);
}
