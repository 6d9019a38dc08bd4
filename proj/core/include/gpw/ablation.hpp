#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "gpw/config.hpp"
#include "gpw/data.hpp"
#include "gpw/train.hpp"

namespace gpw {

enum class AblationMode { grouping, downsampling, rbf_order };

std::string_view to_string(AblationMode mode);
AblationMode parse_ablation_mode(std::string_view text);

struct AblationRow {
  std::string setting;
  double miou = 0.0;
  std::uint64_t mul_adds = 0;
  std::string extra;  // mode-specific column
};

struct AblationTable {
  AblationMode mode = AblationMode::grouping;
  std::string extra_header;
  std::vector<AblationRow> rows;

  std::string to_text() const;
};

// grouping: guided, linear_row, linear_column, rectangle
// downsampling: wavelet, avg_pool, learned_conv
// rbf_order: mean, inner_dot, 1, 2, 3
std::vector<std::string> default_settings(AblationMode mode);

// Applies one setting to a copy of the base config; unknown settings raise
// ConfigError.
RunConfig apply_setting(AblationMode mode, std::string_view setting, const RunConfig& base);

// Mean |order-T Taylor kernel - exact RBF| over random unit-vector pairs
// with non-negative dot product.
double rbf_taylor_error(std::size_t order, double theta, std::size_t pairs, std::uint64_t seed,
                        std::size_t dim = 16);

// Trains every setting from the same seed for the base budget and evaluates
// on the training set.
AblationTable ablation_run(
    AblationMode mode, const std::vector<std::string>& settings, const RunConfig& base,
    const data::Dataset& dataset,
    const std::function<void(const std::string&, const LogRecord&)>& progress = {});

}  // namespace gpw
