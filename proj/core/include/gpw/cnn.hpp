#pragma once

// Context branch: a small plain CNN whose stages are separated by Haar
// decompositions, an ASPP block at the bottom and an inverse-wavelet chain
// that re-uses every stage's high-frequency subbands on the way back up.

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "gpw/ndgrad.hpp"
#include "gpw/parameters.hpp"
#include "gpw/wavelet.hpp"

namespace gpw::cnn {

using nd::Tensor;

struct CnnConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_channels{16, 32};
  std::vector<std::size_t> aspp_rates{1, 2, 3};
  std::size_t num_classes = 3;

  std::size_t stages() const { return stage_channels.size(); }
  void validate() const;
};

struct ConvBlock {
  Tensor kernel, bias, gamma, beta;
};

struct CnnParams {
  std::vector<std::array<ConvBlock, 2>> stages;
  std::vector<Tensor> aspp_kernels;  // one 3×3 per rate
  std::vector<Tensor> aspp_biases;
  Tensor aspp_pool_kernel, aspp_pool_bias;
  Tensor aspp_fuse_kernel, aspp_fuse_bias;
  // lift[s] maps stage s+1 channels to stage s channels before iwt2.
  std::vector<Tensor> lift_kernels;
  Tensor classifier_kernel, classifier_bias;
};

CnnParams make_params(const CnnConfig& cfg, std::mt19937_64& rng, nd::ParameterSet& store,
                      const std::string& prefix = "cnn");

struct StageFeatures {
  std::vector<wavelet::SubbandSet> per_stage;
  Tensor logits;  // [N, K, Hc, Wc]
};

// Parallel dilated 3×3 branches plus a global-pool branch, fused by 1×1.
Tensor aspp(const Tensor& x, const CnnConfig& cfg, const CnnParams& params);

StageFeatures cnn_forward(const Tensor& image, const CnnConfig& cfg, const CnnParams& params);

// Detached low-frequency subband of the given stage.
Tensor guidance_feature(const StageFeatures& features, std::size_t stage);

}  // namespace gpw::cnn
