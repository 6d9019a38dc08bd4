#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "gpw/cnn.hpp"
#include "gpw/congruence.hpp"
#include "gpw/grouping.hpp"
#include "gpw/objectives.hpp"
#include "gpw/wformer.hpp"

namespace gpw {

struct StageConfig {
  std::size_t grid_m = 4;
  std::size_t grid_n = 4;
  std::size_t groups = 4;
  wformer::WFormerConfig wformer;
};

enum class Fusion { sum, learned };

std::string_view to_string(Fusion f);
Fusion parse_fusion(std::string_view text);

struct ModelConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t classes = 3;
  std::vector<StageConfig> stages;
  std::size_t overlap = 0;
  grouping::Strategy grouping = grouping::Strategy::guided;
  bool share_heads = false;
  std::size_t cnn_input = 32;
  cnn::CnnConfig cnn;
  congruence::CongruenceConfig congruence;
  Fusion fusion = Fusion::sum;
  bool aux_cnn_loss = false;

  // Desk-scale defaults: 64×64, grids 4×4 → 2×2, groups (4, 2).
  static ModelConfig desk();
  void validate() const;
};

struct TrainConfig {
  double base_lr = 5e-5;
  std::uint64_t total_iters = 500;
  std::size_t batch_size = 8;
  std::uint64_t seed = 7;
  double alpha = 0.8;
  double gamma = 2.0;
  std::uint64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  objectives::AdamConfig adam;

  void validate() const;
};

struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;

  void validate() const;
};

// Flat `key = value` text, one entry per line, `#` starts a comment. Keys
// not listed in to_text() are rejected.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

// Every key in a fixed order; parse_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& cfg);
std::string model_text(const ModelConfig& cfg);

}  // namespace gpw
