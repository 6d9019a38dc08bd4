#include "gpw/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace gpw::data {

namespace fs = std::filesystem;

std::pair<Tensor, LabelMap> Dataset::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ContractError("Dataset::batch: no samples selected");
  const Sample& first = samples.at(indices.front());
  const std::size_t c = first.image.extent(0), h = first.image.extent(1),
                    w = first.image.extent(2);
  std::vector<double> pixels;
  pixels.reserve(indices.size() * c * h * w);
  LabelMap gt{indices.size(), h, w, {}};
  gt.labels.reserve(indices.size() * h * w);
  for (std::size_t i : indices) {
    const Sample& s = samples.at(i);
    if (s.image.shape() != first.image.shape()) {
      throw DataError("Dataset::batch: sample " + std::to_string(i) + " has shape " +
                      nd::to_string(s.image.shape()) + ", expected " +
                      nd::to_string(first.image.shape()));
    }
    const auto v = s.image.values();
    pixels.insert(pixels.end(), v.begin(), v.end());
    gt.labels.insert(gt.labels.end(), s.gt.labels.begin(), s.gt.labels.end());
  }
  return {Tensor::from_vector({indices.size(), c, h, w}, std::move(pixels)), std::move(gt)};
}

std::pair<Tensor, LabelMap> Dataset::all() const {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return batch(idx);
}

std::array<double, 3> class_color(std::size_t c) {
  static constexpr std::array<std::array<double, 3>, 8> palette{{
      {0.15, 0.15, 0.15},
      {0.85, 0.20, 0.20},
      {0.20, 0.75, 0.25},
      {0.20, 0.30, 0.90},
      {0.90, 0.85, 0.20},
      {0.80, 0.25, 0.85},
      {0.20, 0.85, 0.85},
      {0.95, 0.95, 0.95},
  }};
  if (c < palette.size()) return palette[c];
  // Golden-angle hue walk for larger class counts.
  const double hue = std::fmod(static_cast<double>(c) * 0.618033988749895, 1.0) * 6.0;
  const double level = 0.35 + 0.5 * static_cast<double>((c / 8) % 2);
  const double x = 1.0 - std::abs(std::fmod(hue, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hue)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (auto& v : rgb) v = 0.1 + level * v;
  return rgb;
}

Dataset make_synthetic(const SynthSpec& spec) {
  if (spec.classes < 2 || spec.classes >= static_cast<std::size_t>(objectives::kIgnoreLabel)) {
    throw ContractError("make_synthetic: classes must lie in [2,254]");
  }
  if (spec.size == 0) throw ContractError("make_synthetic: size must be positive");
  if (!(spec.noise >= 0.0)) throw ContractError("make_synthetic: noise must be non-negative");
  Dataset ds;
  ds.classes = spec.classes;
  std::mt19937_64 rng(spec.seed);
  const std::size_t sz = spec.size;
  const auto sd = static_cast<double>(sz);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t k = 0; k < spec.count; ++k) {
    LabelMap gt = LabelMap::filled(1, sz, sz, 0);
    if (spec.classes > 1) {
      const std::size_t shapes = 3 + static_cast<std::size_t>(unit(rng) * 3.0);
      for (std::size_t s = 0; s < shapes; ++s) {
        // Cycle through the foreground classes so each image shows several.
        const int cls = 1 + static_cast<int>((k + s) % (spec.classes - 1));
        const int kind = static_cast<int>(unit(rng) * 3.0);
        if (kind == 0) {
          const double y0 = unit(rng) * sd * 0.7, x0 = unit(rng) * sd * 0.7;
          const double hh = sd * (0.15 + 0.25 * unit(rng)), ww = sd * (0.15 + 0.25 * unit(rng));
          for (std::size_t y = 0; y < sz; ++y) {
            for (std::size_t x = 0; x < sz; ++x) {
              const double fy = static_cast<double>(y) + 0.5, fx = static_cast<double>(x) + 0.5;
              if (fy >= y0 && fy < y0 + hh && fx >= x0 && fx < x0 + ww) gt.labels[y * sz + x] = cls;
            }
          }
        } else if (kind == 1) {
          const double cy = unit(rng) * sd, cx = unit(rng) * sd;
          const double r = sd * (0.1 + 0.15 * unit(rng));
          for (std::size_t y = 0; y < sz; ++y) {
            for (std::size_t x = 0; x < sz; ++x) {
              const double dy = static_cast<double>(y) + 0.5 - cy;
              const double dx = static_cast<double>(x) + 0.5 - cx;
              if (dy * dy + dx * dx <= r * r) gt.labels[y * sz + x] = cls;
            }
          }
        } else {
          const bool horizontal = unit(rng) < 0.5;
          const double start = unit(rng) * sd * 0.85;
          const double width = sd * (0.06 + 0.1 * unit(rng));
          for (std::size_t y = 0; y < sz; ++y) {
            for (std::size_t x = 0; x < sz; ++x) {
              const double t = static_cast<double>(horizontal ? y : x) + 0.5;
              if (t >= start && t < start + width) gt.labels[y * sz + x] = cls;
            }
          }
        }
      }
    }
    std::vector<double> pixels(3 * sz * sz);
    for (std::size_t p = 0; p < sz * sz; ++p) {
      const auto color = class_color(static_cast<std::size_t>(gt.labels[p]));
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = color[c] + (spec.noise > 0.0 ? spec.noise * noise(rng) : 0.0);
        pixels[c * sz * sz + p] = std::clamp(v, 0.0, 1.0);
      }
    }
    ds.samples.push_back({Tensor::from_vector({3, sz, sz}, std::move(pixels)), std::move(gt)});
  }
  return ds;
}

SynthSpec parse_synth_spec(std::string_view text) {
  SynthSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string{};
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw ConfigError("synth spec: expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      if (key == "count") {
        spec.count = std::stoul(value);
      } else if (key == "size") {
        spec.size = std::stoul(value);
      } else if (key == "classes") {
        spec.classes = std::stoul(value);
      } else if (key == "seed") {
        spec.seed = std::stoull(value);
      } else if (key == "noise") {
        spec.noise = std::stod(value);
      } else {
        throw ConfigError("synth spec: unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw ConfigError("synth spec: bad value '" + value + "' for " + key);
    }
  }
  if (spec.count == 0) throw ConfigError("synth spec: count must be positive");
  if (spec.size == 0) throw ConfigError("synth spec: size must be positive");
  if (spec.classes < 2 || spec.classes >= static_cast<std::size_t>(objectives::kIgnoreLabel)) {
    throw ConfigError("synth spec: classes must lie in [2,254]");
  }
  if (!(spec.noise >= 0.0)) throw ConfigError("synth spec: noise must be non-negative");
  return spec;
}

namespace {

struct Raster {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> bytes;
};

Raster read_raster(const fs::path& path, const char* magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> header;
  std::string token;
  while (header.size() < 4) {
    int ch = in.get();
    if (ch == EOF) throw DataError(path.string() + ": truncated header");
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) header.push_back(std::move(token)), token.clear();
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  if (header[0] != magic) {
    throw DataError(path.string() + ": expected " + magic + " raster, found '" + header[0] + "'");
  }
  Raster r;
  try {
    r.width = std::stoul(header[1]);
    r.height = std::stoul(header[2]);
    if (std::stoul(header[3]) != 255) throw DataError(path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed header");
  }
  r.channels = std::string_view(magic) == "P6" ? 3 : 1;
  r.bytes.resize(r.width * r.height * r.channels);
  in.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(r.bytes.size())) {
    throw DataError(path.string() + ": truncated pixel data");
  }
  return r;
}

void write_raster(const fs::path& path, const char* magic, std::size_t w, std::size_t h,
                  const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::string numbered(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.%s", stem, i, ext);
  return buf;
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw DimensionError("write_ppm: expected [3,H,W], got " + nd::to_string(image.shape()));
  }
  const std::size_t h = image.extent(1), w = image.extent(2);
  const auto v = image.values();
  std::vector<unsigned char> bytes(3 * h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      bytes[3 * p + c] =
          static_cast<unsigned char>(std::lround(std::clamp(v[c * h * w + p], 0.0, 1.0) * 255.0));
    }
  }
  write_raster(path, "P6", w, h, bytes);
}

Tensor read_ppm(const fs::path& path) {
  const Raster r = read_raster(path, "P6");
  std::vector<double> v(3 * r.width * r.height);
  const std::size_t hw = r.width * r.height;
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) v[c * hw + p] = r.bytes[3 * p + c] / 255.0;
  }
  return Tensor::from_vector({3, r.height, r.width}, std::move(v));
}

void write_pgm(const fs::path& path, const LabelMap& labels, std::size_t index) {
  if (index >= labels.n) throw ContractError("write_pgm: index out of range");
  const std::size_t hw = labels.h * labels.w;
  std::vector<unsigned char> bytes(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    const int v = labels.labels[index * hw + p];
    if (v < 0 || v > 255) throw ContractError("write_pgm: label " + std::to_string(v));
    bytes[p] = static_cast<unsigned char>(v);
  }
  write_raster(path, "P5", labels.w, labels.h, bytes);
}

LabelMap read_pgm(const fs::path& path) {
  const Raster r = read_raster(path, "P5");
  LabelMap out{1, r.height, r.width, std::vector<int>(r.bytes.begin(), r.bytes.end())};
  return out;
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  {
    std::ofstream meta(dir / "dataset.txt");
    if (!meta) throw DataError("cannot write " + (dir / "dataset.txt").string());
    meta << "classes = " << ds.classes << '\n' << "count = " << ds.size() << '\n';
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_ppm(dir / numbered("image", i, "ppm"), ds.samples[i].image);
    write_pgm(dir / numbered("label", i, "pgm"), ds.samples[i].gt);
  }
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("data directory " + dir.string() + " not found");
  Dataset ds;
  std::size_t declared_classes = 0;
  if (std::ifstream meta(dir / "dataset.txt"); meta) {
    std::string line;
    while (std::getline(meta, line)) {
      if (line.rfind("classes", 0) == 0) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) declared_classes = std::stoul(line.substr(eq + 1));
      }
    }
  }
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() == ".ppm" && name.rfind("image_", 0) == 0) {
      images.push_back(entry.path());
    }
  }
  std::sort(images.begin(), images.end());
  int max_label = -1;
  for (const auto& img : images) {
    std::string stem = img.stem().string();
    const fs::path label = dir / ("label_" + stem.substr(6) + ".pgm");
    if (!fs::exists(label)) throw DataError("missing label file " + label.string());
    Sample s{read_ppm(img), read_pgm(label)};
    if (s.gt.h != s.image.extent(1) || s.gt.w != s.image.extent(2)) {
      throw DataError(label.string() + ": label size differs from " + img.string());
    }
    for (int v : s.gt.labels) {
      if (v != objectives::kIgnoreLabel) max_label = std::max(max_label, v);
    }
    ds.samples.push_back(std::move(s));
  }
  ds.classes = declared_classes > 0 ? declared_classes : static_cast<std::size_t>(max_label + 1);
  if (max_label >= 0 && static_cast<std::size_t>(max_label) >= ds.classes) {
    throw DataError("label " + std::to_string(max_label) + " exceeds declared class count " +
                    std::to_string(ds.classes));
  }
  return ds;
}

}  // namespace gpw::data
