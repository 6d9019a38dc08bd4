#include <cmath>
#include <random>

#include "doctest.h"
#include "gpw/cnn.hpp"
#include "gradcheck.hpp"

using namespace gpw;
using namespace gpw::cnn;
using nd::Tensor;

namespace {

void fill(Tensor& t, double v) {
  for (double& x : t.mutable_values()) x = v;
}

CnnConfig small_config() {
  CnnConfig cfg;
  cfg.stage_channels = {4, 8};
  cfg.aspp_rates = {1, 2};
  cfg.num_classes = 3;
  return cfg;
}

}  // namespace

TEST_CASE("cnn shapes") {
  std::mt19937_64 rng(51);
  nd::ParameterSet store;
  CnnConfig cfg;
  cfg.stage_channels = {16, 32};
  const CnnParams p = make_params(cfg, rng, store);
  const auto f = cnn_forward(Tensor::randn({1, 3, 64, 64}, rng), cfg, p);
  REQUIRE(f.per_stage.size() == 2);
  CHECK(f.per_stage[0].ll.shape() == nd::Shape{1, 16, 32, 32});
  CHECK(f.per_stage[1].ll.shape() == nd::Shape{1, 32, 16, 16});
  CHECK(f.logits.shape() == nd::Shape{1, 3, 64, 64});
  CHECK(guidance_feature(f, 0).shape() == nd::Shape{1, 16, 32, 32});
  CHECK_THROWS_AS(guidance_feature(f, 2), ContractError);
  CHECK_THROWS_AS(cnn_forward(Tensor::zeros({1, 3, 6, 8}), cfg, p), DimensionError);
  CHECK_THROWS_AS(cnn_forward(Tensor::zeros({1, 2, 8, 8}), cfg, p), DimensionError);
}

TEST_CASE("config validation") {
  CnnConfig cfg = small_config();
  cfg.stage_channels = {8};
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = small_config();
  cfg.stage_channels = {6, 8};
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = small_config();
  cfg.aspp_rates = {};
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("zero weights give bias logits") {
  std::mt19937_64 rng(52);
  nd::ParameterSet store;
  const CnnConfig cfg = small_config();
  const CnnParams p = make_params(cfg, rng, store);
  for (const auto& item : store.items()) {
    Tensor t = item.tensor;
    if (item.name.find("gamma") == std::string::npos) fill(t, 0.0);
  }
  Tensor bias = p.classifier_bias;
  bias.mutable_values()[0] = 0.1;
  bias.mutable_values()[1] = -0.2;
  bias.mutable_values()[2] = 0.3;
  const auto f = cnn_forward(Tensor::randn({2, 3, 8, 8}, rng), cfg, p);
  for (std::size_t i = 0; i < f.logits.size(); ++i) {
    CHECK(f.logits.values()[i] == bias.values()[i / 64 % 3]);
  }
  const Tensor probs = nd::softmax_rows(nd::reshape(nd::permute(f.logits, std::array<std::size_t, 4>{0, 2, 3, 1}), {128, 3}));
  const double e = std::exp(0.1) + std::exp(-0.2) + std::exp(0.3);
  for (std::size_t r = 0; r < 128; ++r) CHECK(probs.values()[r * 3 + 2] == doctest::Approx(std::exp(0.3) / e));
}

TEST_CASE("cnn gradients") {
  std::mt19937_64 rng(53);
  nd::ParameterSet store;
  const CnnConfig cfg = small_config();
  const CnnParams p = make_params(cfg, rng, store);
  Tensor x = Tensor::randn({1, 3, 8, 8}, rng);
  auto r = testing::gradcheck(
      [&] {
        const auto f = cnn_forward(x, cfg, p);
        return nd::add(testing::probe(f.logits, 1), testing::probe(f.per_stage[1].ll, 2));
      },
      {x, p.stages[0][0].kernel, p.stages[1][1].gamma, p.aspp_kernels[1], p.aspp_pool_kernel,
       p.aspp_fuse_kernel, p.lift_kernels[0], p.classifier_kernel},
      8, rng);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("guidance is detached") {
  std::mt19937_64 rng(54);
  nd::ParameterSet store;
  const CnnConfig cfg = small_config();
  const CnnParams p = make_params(cfg, rng, store);
  const Tensor x = Tensor::randn({1, 3, 8, 8}, rng);
  auto grads = [&] {
    store.zero_grad();
    const auto f = cnn_forward(x, cfg, p);
    Tensor g = guidance_feature(f, 0);
    CHECK_FALSE(g.requires_grad());
    // Scribble on the copy and fold it into the loss; nothing reaches the CNN.
    for (double& v : g.mutable_values()) v = 1e6;
    nd::backward(nd::add(testing::probe(f.logits), nd::sum(g)));
    return std::vector<double>(p.stages[0][0].kernel.grad());
  };
  const auto first = grads();
  store.zero_grad();
  nd::backward(testing::probe(cnn_forward(x, cfg, p).logits));
  const std::vector<double> clean(p.stages[0][0].kernel.grad());
  CHECK(first == clean);
  // The features themselves are untouched by edits to the copy.
  const auto f = cnn_forward(x, cfg, p);
  const std::vector<double> before(f.per_stage[1].ll.values().begin(), f.per_stage[1].ll.values().end());
  Tensor g = guidance_feature(f, 1);
  for (double& v : g.mutable_values()) v = -1.0;
  CHECK(std::vector<double>(f.per_stage[1].ll.values().begin(), f.per_stage[1].ll.values().end()) == before);
}
