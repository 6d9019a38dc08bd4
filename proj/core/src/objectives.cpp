#include "gpw/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace gpw::objectives {

LabelMap LabelMap::filled(std::size_t n, std::size_t h, std::size_t w, int value) {
  return LabelMap{n, h, w, std::vector<int>(n * h * w, value)};
}

LabelMap argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4) {
    throw DimensionError("argmax_labels: expected [N,K,H,W], got " + nd::to_string(logits.shape()));
  }
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  const std::size_t hw = logits.extent(2) * logits.extent(3);
  LabelMap out = LabelMap::filled(n, logits.extent(2), logits.extent(3), 0);
  const auto v = logits.values();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (v[(b * k + c) * hw + p] > v[(b * k + best) * hw + p]) best = c;
      }
      out.labels[b * hw + p] = static_cast<int>(best);
    }
  }
  return out;
}

Tensor focal_loss(const Tensor& logits, const LabelMap& gt, double gamma) {
  if (!(gamma >= 0.0)) throw ContractError("focal_loss: gamma must be non-negative");
  if (logits.rank() != 4 || logits.extent(0) != gt.n || logits.extent(2) != gt.h ||
      logits.extent(3) != gt.w) {
    throw DimensionError("focal_loss: logits " + nd::to_string(logits.shape()) +
                         " do not match labels [" + std::to_string(gt.n) + "," +
                         std::to_string(gt.h) + "," + std::to_string(gt.w) + "]");
  }
  const std::size_t n = gt.n, k = logits.extent(1), hw = gt.h * gt.w;
  for (int y : gt.labels) {
    if (y != kIgnoreLabel && (y < 0 || static_cast<std::size_t>(y) >= k)) {
      throw ContractError("focal_loss: label " + std::to_string(y) + " outside [0," +
                          std::to_string(k) + ")");
    }
  }
  const auto z = logits.values();
  // Per-pixel softmax and dL/dpt·pt, kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(z.size());
  auto coef = std::make_shared<std::vector<double>>(n * hw, 0.0);
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, z[(b * k + c) * hw + p]);
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[(b * k + c) * hw + p] - mx);
      const double log_z = mx + std::log(sum);
      for (std::size_t c = 0; c < k; ++c) {
        (*probs)[(b * k + c) * hw + p] = std::exp(z[(b * k + c) * hw + p] - log_z);
      }
      const int y = gt.labels[b * hw + p];
      if (y == kIgnoreLabel) continue;
      ++valid;
      const auto yc = static_cast<std::size_t>(y);
      const double log_pt = z[(b * k + yc) * hw + p] - log_z;
      const double pt = std::exp(log_pt);
      const double q = std::max(0.0, 1.0 - pt);
      const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
      total += -mod * log_pt;
      // dL/dpt · pt = γ(1-pt)^{γ-1} pt log pt - (1-pt)^γ
      double slope = -mod;
      if (gamma != 0.0 && q > 0.0) slope += gamma * std::pow(q, gamma - 1.0) * pt * log_pt;
      (*coef)[b * hw + p] = slope;
    }
  }
  const double inv = valid > 0 ? 1.0 / static_cast<double>(valid) : 0.0;
  nd::counting::add_mul_adds(z.size());
  const std::vector<int> labels = gt.labels;
  return nd::detail::make_result(
      {1}, {total * inv}, {logits}, "focal_loss",
      [logits, probs, coef, labels, n, k, hw, inv](nd::Node& o) {
        double* g = nd::detail::grad_target(logits);
        const double scale = o.grad[0] * inv;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t p = 0; p < hw; ++p) {
            const int y = labels[b * hw + p];
            if (y == kIgnoreLabel) continue;
            const double s = (*coef)[b * hw + p] * scale;
            for (std::size_t c = 0; c < k; ++c) {
              const double delta = static_cast<int>(c) == y ? 1.0 : 0.0;
              g[(b * k + c) * hw + p] += s * (delta - (*probs)[(b * k + c) * hw + p]);
            }
          }
        }
      });
}

Tensor total_loss(const Tensor& focal, const Tensor& congruence, double alpha) {
  if (!(alpha >= 0.0)) throw ContractError("total_loss: alpha must be non-negative");
  if (alpha == 0.0) return focal;
  return nd::add(focal, nd::scale(congruence, alpha));
}

MetricsReport compute_metrics(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  if (!pred.same_shape(gt)) {
    throw DimensionError("compute_metrics: prediction [" + std::to_string(pred.n) + "," +
                         std::to_string(pred.h) + "," + std::to_string(pred.w) +
                         "] vs ground truth [" + std::to_string(gt.n) + "," +
                         std::to_string(gt.h) + "," + std::to_string(gt.w) + "]");
  }
  std::vector<std::uint64_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  std::uint64_t correct = 0, valid = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int y = gt.labels[i];
    if (y == kIgnoreLabel) continue;
    const int p = pred.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("compute_metrics: ground-truth label " + std::to_string(y) +
                          " outside [0," + std::to_string(classes) + ")");
    }
    ++valid;
    if (p == y) {
      ++correct;
      ++tp[static_cast<std::size_t>(y)];
    } else {
      ++fn[static_cast<std::size_t>(y)];
      if (p >= 0 && static_cast<std::size_t>(p) < classes) ++fp[static_cast<std::size_t>(p)];
    }
  }
  MetricsReport r;
  r.per_class_iou.assign(classes, std::numeric_limits<double>::quiet_NaN());
  std::size_t present = 0;
  double iou_sum = 0.0, f1_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::uint64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    ++present;
    const double iou = static_cast<double>(tp[c]) / static_cast<double>(denom);
    r.per_class_iou[c] = iou;
    iou_sum += iou;
    f1_sum += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  r.miou = present > 0 ? iou_sum / static_cast<double>(present) : 0.0;
  r.f1 = present > 0 ? f1_sum / static_cast<double>(present) : 0.0;
  r.accuracy = valid > 0 ? static_cast<double>(correct) / static_cast<double>(valid) : 0.0;
  return r;
}

std::string MetricsReport::to_key_value() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "miou=" << miou << '\n';
  os << "per_class_iou=";
  for (std::size_t c = 0; c < per_class_iou.size(); ++c) {
    if (c) os << ',';
    if (std::isnan(per_class_iou[c])) {
      os << "nan";
    } else {
      os << per_class_iou[c];
    }
  }
  os << '\n';
  os << "f1=" << f1 << '\n';
  os << "accuracy=" << accuracy << '\n';
  os << "mul_adds=" << mul_adds << '\n';
  os << "peak_live_elements=" << peak_live_elements << '\n';
  return os.str();
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["miou"] = miou;
  nlohmann::json per = nlohmann::json::array();
  for (double v : per_class_iou) {
    if (std::isnan(v)) {
      per.push_back(nullptr);
    } else {
      per.push_back(v);
    }
  }
  j["per_class_iou"] = per;
  j["f1"] = f1;
  j["accuracy"] = accuracy;
  j["mul_adds"] = mul_adds;
  j["peak_live_elements"] = peak_live_elements;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.miou = j.at("miou").get<double>();
    for (const auto& v : j.at("per_class_iou")) {
      r.per_class_iou.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : v.get<double>());
    }
    r.f1 = j.at("f1").get<double>();
    r.accuracy = j.at("accuracy").get<double>();
    r.mul_adds = j.at("mul_adds").get<std::uint64_t>();
    r.peak_live_elements = j.at("peak_live_elements").get<std::uint64_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics JSON: ") + e.what());
  }
}

double poly_lr(std::uint64_t iter, std::uint64_t total_iter, double base_lr) {
  if (total_iter == 0 || iter > total_iter) {
    throw ContractError("poly_lr: iteration " + std::to_string(iter) + " outside [0," +
                        std::to_string(total_iter) + "]");
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total_iter);
  return base_lr * std::pow(frac, 0.9);
}

Adam::Adam(const nd::ParameterSet& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& p : params.items()) {
    params_.push_back(p.tensor);
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::step(double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const std::vector<double>& g = p.node()->grad;
    auto w = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
    }
  }
}

}  // namespace gpw::objectives
