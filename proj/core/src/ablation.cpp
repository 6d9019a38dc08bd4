#include "gpw/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "gpw/congruence.hpp"
#include "gpw/model.hpp"

namespace gpw {

std::string_view to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::grouping: return "grouping";
    case AblationMode::downsampling: return "downsampling";
    case AblationMode::rbf_order: return "rbf-order";
  }
  return "grouping";
}

AblationMode parse_ablation_mode(std::string_view text) {
  if (text == "grouping") return AblationMode::grouping;
  if (text == "downsampling") return AblationMode::downsampling;
  if (text == "rbf-order" || text == "rbf_order") return AblationMode::rbf_order;
  throw ConfigError("unknown ablation mode '" + std::string(text) + "'");
}

std::vector<std::string> default_settings(AblationMode mode) {
  switch (mode) {
    case AblationMode::grouping: return {"guided", "linear_row", "linear_column", "rectangle"};
    case AblationMode::downsampling: return {"wavelet", "avg_pool", "learned_conv"};
    case AblationMode::rbf_order: return {"mean", "inner_dot", "1", "2", "3"};
  }
  return {};
}

RunConfig apply_setting(AblationMode mode, std::string_view setting, const RunConfig& base) {
  RunConfig cfg = base;
  switch (mode) {
    case AblationMode::grouping:
      cfg.model.grouping = grouping::parse_strategy(setting);
      break;
    case AblationMode::downsampling: {
      const auto kv = wformer::parse_kv_downsample(setting);
      for (auto& st : cfg.model.stages) st.wformer.kv = kv;
      break;
    }
    case AblationMode::rbf_order: {
      if (setting == "mean" || setting == "inner_dot" || setting == "inner-dot") {
        cfg.model.congruence.relation = congruence::parse_relation(setting);
        break;
      }
      std::string s(setting);
      if (s.rfind("rbf", 0) == 0) s = s.substr(3);
      if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("unknown rbf-order setting '" + std::string(setting) + "'");
      }
      cfg.model.congruence.relation = congruence::RelationKind::rbf;
      cfg.model.congruence.taylor_order = std::stoul(s);
      break;
    }
  }
  cfg.validate();
  return cfg;
}

double rbf_taylor_error(std::size_t order, double theta, std::size_t pairs, std::uint64_t seed,
                        std::size_t dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto coeffs = congruence::taylor_coefficients(theta, order);
  auto unit = [&] {
    std::vector<double> v(dim);
    double ss = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      ss += x * x;
    }
    for (auto& x : v) x /= std::sqrt(ss);
    return v;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const auto a = unit();
    auto b = unit();
    double dot = 0.0;
    for (std::size_t k = 0; k < dim; ++k) dot += a[k] * b[k];
    if (dot < 0.0) {
      for (auto& x : b) x = -x;
      dot = -dot;
    }
    double approx = 0.0, power = 1.0;
    for (double c : coeffs) {
      approx += c * power;
      power *= dot;
    }
    total += std::abs(approx - congruence::rbf_exact(a, b, theta));
  }
  return total / static_cast<double>(pairs);
}

AblationTable ablation_run(
    AblationMode mode, const std::vector<std::string>& settings, const RunConfig& base,
    const data::Dataset& dataset,
    const std::function<void(const std::string&, const LogRecord&)>& progress) {
  AblationTable table;
  table.mode = mode;
  switch (mode) {
    case AblationMode::grouping: table.extra_header = "attention_mul_adds"; break;
    case AblationMode::downsampling: table.extra_header = "perfect_reconstruction"; break;
    case AblationMode::rbf_order: table.extra_header = "approx_error"; break;
  }
  // Validate every setting before spending any training time.
  std::vector<RunConfig> configs;
  for (const auto& s : settings) configs.push_back(apply_setting(mode, s, base));

  for (std::size_t i = 0; i < settings.size(); ++i) {
    const RunConfig& cfg = configs[i];
    Model model(cfg.model, cfg.train.seed);
    Trainer trainer(model, dataset, cfg.train);
    trainer.run(cfg.train.total_iters, [&](const LogRecord& r) {
      if (progress) progress(settings[i], r);
    });
    const auto report = evaluate(model, dataset);
    AblationRow row{settings[i], report.miou, report.mul_adds, {}};
    switch (mode) {
      case AblationMode::grouping: {
        const std::size_t first[] = {0};
        const auto image = dataset.batch(first).first;
        const auto counts = nd::counter_scope([&] { (void)model.forward(image); });
        row.extra = std::to_string(counts.attention_mul_adds);
        break;
      }
      case AblationMode::downsampling:
        row.extra = wformer::perfectly_reconstructs(cfg.model.stages.front().wformer.kv) ? "true"
                                                                                         : "false";
        break;
      case AblationMode::rbf_order:
        if (cfg.model.congruence.relation == congruence::RelationKind::rbf) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.6g",
                        rbf_taylor_error(cfg.model.congruence.taylor_order,
                                         cfg.model.congruence.theta, 1000, cfg.train.seed));
          row.extra = buf;
        } else {
          row.extra = "-";
        }
        break;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << "setting\tmiou\tmul_adds\t" << extra_header << '\n';
  for (const auto& r : rows) {
    char miou[32];
    std::snprintf(miou, sizeof miou, "%.4f", r.miou);
    os << r.setting << '\t' << miou << '\t' << r.mul_adds << '\t' << r.extra << '\n';
  }
  return os.str();
}

}  // namespace gpw
