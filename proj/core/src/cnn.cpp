#include "gpw/cnn.hpp"

#include <cmath>

namespace gpw::cnn {

namespace {

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

ConvBlock make_block(std::size_t in, std::size_t out, std::mt19937_64& rng,
                     nd::ParameterSet& store, const std::string& name) {
  ConvBlock b;
  b.kernel = store.normal(name + ".kernel", {out, in, 3, 3}, rng, he_std(9 * in));
  b.bias = store.constant(name + ".bias", {out}, 0.0);
  b.gamma = store.constant(name + ".norm.gamma", {out}, 1.0);
  b.beta = store.constant(name + ".norm.beta", {out}, 0.0);
  return b;
}

Tensor apply_block(const Tensor& x, const ConvBlock& b) {
  Tensor y = nd::conv2d(x, b.kernel, b.bias, nd::Conv2dOptions{1, 1, 1});
  return nd::relu(nd::channel_layernorm(y, b.gamma, b.beta));
}

}  // namespace

void CnnConfig::validate() const {
  if (stage_channels.size() < 2) throw ContractError("CnnConfig: at least two stages required");
  for (auto c : stage_channels) {
    if (c == 0 || c % 4 != 0) {
      throw ContractError("CnnConfig: stage channels must be positive multiples of 4");
    }
  }
  if (aspp_rates.empty()) throw ContractError("CnnConfig: ASPP needs at least one rate");
  for (auto r : aspp_rates) {
    if (r == 0) throw ContractError("CnnConfig: ASPP rates must be positive");
  }
  if (num_classes < 1) throw ContractError("CnnConfig: num_classes must be positive");
  if (in_channels < 1) throw ContractError("CnnConfig: in_channels must be positive");
}

CnnParams make_params(const CnnConfig& cfg, std::mt19937_64& rng, nd::ParameterSet& store,
                      const std::string& prefix) {
  cfg.validate();
  CnnParams p;
  std::size_t in = cfg.in_channels;
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    const std::size_t c = cfg.stage_channels[s];
    const std::string sp = prefix + ".stage" + std::to_string(s);
    p.stages.push_back({make_block(in, c, rng, store, sp + ".conv0"),
                        make_block(c, c, rng, store, sp + ".conv1")});
    in = c;
  }
  const std::size_t top = cfg.stage_channels.back();
  for (std::size_t r = 0; r < cfg.aspp_rates.size(); ++r) {
    const std::string ap = prefix + ".aspp.rate" + std::to_string(r);
    p.aspp_kernels.push_back(store.normal(ap + ".kernel", {top, top, 3, 3}, rng, he_std(9 * top)));
    p.aspp_biases.push_back(store.constant(ap + ".bias", {top}, 0.0));
  }
  p.aspp_pool_kernel = store.normal(prefix + ".aspp.pool.kernel", {top, top, 1, 1}, rng, he_std(top));
  p.aspp_pool_bias = store.constant(prefix + ".aspp.pool.bias", {top}, 0.0);
  const std::size_t fused_in = top * (cfg.aspp_rates.size() + 1);
  p.aspp_fuse_kernel = store.normal(prefix + ".aspp.fuse.kernel", {top, fused_in, 1, 1}, rng,
                                    he_std(fused_in));
  p.aspp_fuse_bias = store.constant(prefix + ".aspp.fuse.bias", {top}, 0.0);
  for (std::size_t s = 0; s + 1 < cfg.stages(); ++s) {
    const std::size_t from = cfg.stage_channels[s + 1], to = cfg.stage_channels[s];
    p.lift_kernels.push_back(store.normal(prefix + ".lift" + std::to_string(s) + ".kernel",
                                          {to, from, 1, 1}, rng,
                                          1.0 / std::sqrt(static_cast<double>(from))));
  }
  const std::size_t c0 = cfg.stage_channels.front();
  p.classifier_kernel = store.normal(prefix + ".classifier.kernel", {cfg.num_classes, c0, 1, 1},
                                     rng, 1.0 / std::sqrt(static_cast<double>(c0)));
  p.classifier_bias = store.constant(prefix + ".classifier.bias", {cfg.num_classes}, 0.0);
  return p;
}

Tensor aspp(const Tensor& x, const CnnConfig& cfg, const CnnParams& params) {
  std::vector<Tensor> branches;
  branches.reserve(cfg.aspp_rates.size() + 1);
  for (std::size_t r = 0; r < cfg.aspp_rates.size(); ++r) {
    const std::size_t rate = cfg.aspp_rates[r];
    branches.push_back(nd::relu(nd::conv2d(x, params.aspp_kernels[r], params.aspp_biases[r],
                                           nd::Conv2dOptions{1, rate, rate})));
  }
  Tensor pooled = nd::relu(
      nd::conv2d(nd::global_avg_pool(x), params.aspp_pool_kernel, params.aspp_pool_bias));
  branches.push_back(nd::broadcast_spatial(pooled, x.extent(2), x.extent(3)));
  return nd::relu(
      nd::conv2d(nd::concat(branches, 1), params.aspp_fuse_kernel, params.aspp_fuse_bias));
}

StageFeatures cnn_forward(const Tensor& image, const CnnConfig& cfg, const CnnParams& params) {
  cfg.validate();
  if (image.rank() != 4 || image.extent(1) != cfg.in_channels) {
    throw DimensionError("cnn_forward: expected [N," + std::to_string(cfg.in_channels) +
                         ",H,W], got " + nd::to_string(image.shape()));
  }
  const std::size_t div = std::size_t{1} << cfg.stages();
  if (image.extent(2) % div != 0 || image.extent(3) % div != 0) {
    throw DimensionError("cnn_forward: input " + nd::to_string(image.shape()) +
                         " not divisible by 2^" + std::to_string(cfg.stages()));
  }
  StageFeatures out;
  Tensor x = image;
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    x = apply_block(apply_block(x, params.stages[s][0]), params.stages[s][1]);
    wavelet::SubbandSet bands = wavelet::dwt2(x);
    x = bands.ll;
    out.per_stage.push_back(std::move(bands));
  }
  x = aspp(x, cfg, params);
  for (std::size_t s = cfg.stages(); s-- > 0;) {
    const auto& bands = out.per_stage[s];
    x = wavelet::iwt2({x, bands.lh, bands.hl, bands.hh, bands.padding});
    if (s > 0) x = nd::conv2d(x, params.lift_kernels[s - 1]);
  }
  out.logits = nd::conv2d(x, params.classifier_kernel, params.classifier_bias);
  return out;
}

Tensor guidance_feature(const StageFeatures& features, std::size_t stage) {
  if (stage >= features.per_stage.size()) {
    throw ContractError("guidance_feature: stage " + std::to_string(stage) + " of " +
                        std::to_string(features.per_stage.size()));
  }
  return features.per_stage[stage].ll.detach();
}

}  // namespace gpw::cnn
