#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gpw/config.hpp"
#include "gpw/model.hpp"
#include "gpw/objectives.hpp"

namespace gpw {

struct Blob {
  std::string name;
  nd::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_text;  // to_text() of the run configuration
  std::uint64_t iteration = 0;
  std::vector<Blob> params;
  std::uint64_t adam_steps = 0;
  objectives::AdamConfig adam;
  std::vector<std::vector<double>> adam_m, adam_v;
};

Checkpoint capture(const RunConfig& cfg, const Model& model, const objectives::Adam& adam,
                   std::uint64_t iteration);

// Little-endian binary: magic, version, config text, iteration, named
// parameter blobs, Adam state.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies parameters (and optimizer state when given) into a model built
// from a compatible config. Mismatches raise FormatError listing every
// differing name and shape.
void restore(const Checkpoint& ckpt, Model& model, objectives::Adam* adam = nullptr);

}  // namespace gpw
