#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "gpw/ndgrad.hpp"
#include "gpw/objectives.hpp"

namespace gpw::data {

using nd::Tensor;
using objectives::LabelMap;

struct Sample {
  Tensor image;  // [3,H,W], values in [0,1]
  LabelMap gt;   // [1,H,W]
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t classes = 0;

  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
  // Stacks the selected samples into [N,3,H,W] and [N,H,W].
  std::pair<Tensor, LabelMap> batch(std::span<const std::size_t> indices) const;
  std::pair<Tensor, LabelMap> all() const;
};

struct SynthSpec {
  std::size_t count = 8;
  std::size_t size = 64;
  std::size_t classes = 3;
  std::uint64_t seed = 7;
  double noise = 0.05;
};

// Fill color of class c; class 0 is the background.
std::array<double, 3> class_color(std::size_t c);

// Rectangles, disks and stripes over a class-0 background; each region is
// filled with its class color plus Gaussian noise.
Dataset make_synthetic(const SynthSpec& spec);

SynthSpec parse_synth_spec(std::string_view text);

// 8-bit binary PPM (P6) and PGM (P5).
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels, std::size_t index = 0);
LabelMap read_pgm(const std::filesystem::path& path);

// image_NNNN.ppm / label_NNNN.pgm pairs plus dataset.txt holding the class
// count.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace gpw::data
