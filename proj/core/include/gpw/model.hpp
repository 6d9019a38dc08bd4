#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "gpw/config.hpp"
#include "gpw/congruence.hpp"
#include "gpw/grouping.hpp"
#include "gpw/ndgrad.hpp"
#include "gpw/parameters.hpp"

namespace gpw {

using nd::Tensor;

// Per-stage trace of one forward pass. Vectors are indexed by image.
struct StageRecord {
  std::size_t stage = 0;
  grouping::PatchGrid grid;
  std::vector<grouping::GroupingMask> masks;
  std::vector<Tensor> t_centers;  // [m*n, d]
  std::vector<Tensor> c_centers;  // [m*n, C_s]
  std::vector<congruence::RelationScalar> t_relation;
  std::vector<congruence::RelationScalar> c_relation;
};

struct ForwardResult {
  Tensor logits_t;  // [N,K,H,W]
  Tensor logits_c;  // [N,K,cnn_input,cnn_input]
  Tensor fused;     // [N,K,H,W]
  std::vector<StageRecord> stages;
  Tensor congruence;  // batch mean of the per-image congruence loss
};

struct ForwardOptions {
  // Replace the guidance features with zeros (masks then carry no signal).
  bool zero_guidance = false;
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nd::ParameterSet& parameters() { return params_; }
  const nd::ParameterSet& parameters() const { return params_; }

  ForwardResult forward(const Tensor& images, const ForwardOptions& opts = {}) const;

  // Input extents after padding to a size every stage grid can split into
  // patches that survive two Haar levels.
  std::pair<std::size_t, std::size_t> padded_extent(std::size_t h, std::size_t w) const;

 private:
  struct Stage {
    std::vector<wformer::HeadParams> heads;  // one per group, or a single shared head
  };

  ModelConfig cfg_;
  nd::ParameterSet params_;
  Tensor stem_kernel_, stem_bias_;
  std::vector<Stage> stages_;
  Tensor classifier_kernel_, classifier_bias_;
  Tensor fusion_kernel_, fusion_bias_;
  cnn::CnnParams cnn_;
};

}  // namespace gpw
