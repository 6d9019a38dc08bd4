#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "gpw/ndgrad.hpp"
#include "gpw/parameters.hpp"

namespace gpw::objectives {

using nd::Tensor;

inline constexpr int kIgnoreLabel = 255;

// Integer label grid [N,H,W]; kIgnoreLabel marks pixels excluded from every
// loss and metric.
struct LabelMap {
  std::size_t n = 0, h = 0, w = 0;
  std::vector<int> labels;

  static LabelMap filled(std::size_t n, std::size_t h, std::size_t w, int value);
  std::size_t size() const { return labels.size(); }
  int at(std::size_t b, std::size_t y, std::size_t x) const { return labels[(b * h + y) * w + x]; }
  bool same_shape(const LabelMap& o) const { return n == o.n && h == o.h && w == o.w; }
};

// Per-pixel argmax over the class axis of [N,K,H,W] logits.
LabelMap argmax_labels(const Tensor& logits);

// Mean over non-ignored pixels of -(1-p)^γ log p, p the softmax probability
// of the true class.
Tensor focal_loss(const Tensor& logits, const LabelMap& gt, double gamma);

// focal + alpha * congruence.
Tensor total_loss(const Tensor& focal, const Tensor& congruence, double alpha);

struct MetricsReport {
  double miou = 0.0;
  // NaN for classes with no prediction and no ground truth.
  std::vector<double> per_class_iou;
  double f1 = 0.0;
  double accuracy = 0.0;
  std::uint64_t mul_adds = 0;
  std::uint64_t peak_live_elements = 0;

  std::string to_key_value() const;
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

// Confusion-matrix metrics; classes with TP+FP+FN = 0 are left out of the
// means.
MetricsReport compute_metrics(const LabelMap& pred, const LabelMap& gt, std::size_t classes);

// base_lr · (1 - iter/total_iter)^0.9
double poly_lr(std::uint64_t iter, std::uint64_t total_iter, double base_lr);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const nd::ParameterSet& params, AdamConfig cfg = {});

  // Applies one update using the gradients currently stored on the
  // parameters; missing gradients count as zero.
  void step(double lr);

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t steps_ = 0;
};

}  // namespace gpw::objectives
