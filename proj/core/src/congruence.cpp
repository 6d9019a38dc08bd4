#include "gpw/congruence.hpp"

#include <array>
#include <cmath>
#include <string>

#include "gpw/grouping.hpp"

namespace gpw::congruence {

std::string_view to_string(RelationKind kind) {
  switch (kind) {
    case RelationKind::rbf: return "rbf";
    case RelationKind::mean: return "mean";
    case RelationKind::inner_dot: return "inner_dot";
  }
  return "rbf";
}

RelationKind parse_relation(std::string_view text) {
  if (text == "rbf") return RelationKind::rbf;
  if (text == "mean") return RelationKind::mean;
  if (text == "inner_dot" || text == "inner-dot") return RelationKind::inner_dot;
  throw ConfigError("unknown relation '" + std::string(text) + "'");
}

void CongruenceConfig::validate() const {
  if (!(theta > 0.0)) throw ContractError("CongruenceConfig: theta must be positive");
  if (!(alpha >= 0.0)) throw ContractError("CongruenceConfig: alpha must be non-negative");
}

Tensor raw_patch_centers(const std::vector<Tensor>& patches) {
  if (patches.empty()) throw ContractError("patch_centers: empty patch list");
  const nd::Shape& ref = patches.front().shape();
  std::vector<Tensor> rows;
  rows.reserve(patches.size());
  for (const auto& p : patches) {
    if (p.shape() != ref) {
      throw DimensionError("patch_centers: patch shapes differ: " + nd::to_string(ref) +
                           " vs " + nd::to_string(p.shape()));
    }
    rows.push_back(nd::channel_mean(p));
  }
  return rows.size() == 1 ? rows.front() : nd::concat(rows, 0);
}

Tensor patch_centers(const std::vector<Tensor>& patches) {
  return nd::l2_normalize_rows(raw_patch_centers(patches));
}

Tensor grid_centers(const Tensor& feature, std::size_t m, std::size_t n) {
  if (feature.rank() != 4) {
    throw DimensionError("grid_centers: expected [N,C,H,W], got " + nd::to_string(feature.shape()));
  }
  const std::size_t batch = feature.extent(0), c = feature.extent(1);
  Tensor pooled = grouping::patch_pool(feature, m, n);  // [N,C,m,n]
  if (batch > 1) {
    // Average over the batch: [N,C,m,n] -> [C,m,n,N] -> [C,m,n,1] -> [1,C,m,n].
    pooled = nd::avg_pool2d(nd::permute(pooled, std::array<std::size_t, 4>{1, 2, 3, 0}), 1, batch);
    pooled = nd::permute(pooled, std::array<std::size_t, 4>{3, 0, 1, 2});
  }
  // [1,C,m,n] -> [m*n, C]
  Tensor cells = nd::reshape(nd::permute(pooled, std::array<std::size_t, 4>{0, 2, 3, 1}),
                             {m * n, c});
  return nd::l2_normalize_rows(cells);
}

std::vector<double> taylor_coefficients(double theta, std::size_t order) {
  std::vector<double> c(order + 1);
  const double scale = std::exp(-2.0 * theta);
  double term = 1.0;
  for (std::size_t t = 0; t <= order; ++t) {
    if (t > 0) term *= 2.0 * theta / static_cast<double>(t);
    c[t] = scale * term;
  }
  return c;
}

Tensor rbf_taylor(const Tensor& a, const Tensor& b, double theta, std::size_t order) {
  if (a.size() != b.size()) {
    throw DimensionError("rbf_taylor: vectors of size " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  for (const Tensor* v : {&a, &b}) {
    double ss = 0.0;
    for (double x : v->values()) ss += x * x;
    if (std::abs(std::sqrt(ss) - 1.0) >= 1e-6) {
      throw ContractError("rbf_taylor: inputs must be unit vectors (norm " +
                          std::to_string(std::sqrt(ss)) + ")");
    }
  }
  const Tensor dot = nd::sum(nd::mul(nd::reshape(a, {a.size()}), nd::reshape(b, {b.size()})));
  const std::vector<double> coeffs = taylor_coefficients(theta, order);
  return nd::polynomial(dot, coeffs);
}

double rbf_exact(std::span<const double> a, std::span<const double> b, double theta) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-theta * d2);
}

RelationScalar stage_relation(const Tensor& centers, const CongruenceConfig& cfg) {
  if (centers.rank() != 2 || centers.extent(0) == 0) {
    throw DimensionError("stage_relation: expected [P,C] centers, got " +
                         nd::to_string(centers.shape()));
  }
  const Tensor gram = nd::matmul(centers, nd::transpose(centers));
  std::vector<double> coeffs;
  switch (cfg.relation) {
    case RelationKind::rbf:
      coeffs = taylor_coefficients(cfg.theta, cfg.taylor_order);
      break;
    case RelationKind::mean:
      coeffs = {2.0, -2.0};  // ‖a-b‖² for unit a, b
      break;
    case RelationKind::inner_dot:
      coeffs = {0.0, 1.0};
      break;
  }
  return RelationScalar{nd::sum(nd::polynomial(gram, coeffs))};
}

Tensor congruence_loss(const std::vector<RelationScalar>& transformer,
                       const std::vector<RelationScalar>& context,
                       const std::vector<std::size_t>& grid_sizes) {
  if (transformer.size() != context.size() || transformer.size() != grid_sizes.size()) {
    throw ContractError("congruence_loss: " + std::to_string(transformer.size()) +
                        " transformer stages, " + std::to_string(context.size()) +
                        " context stages, " + std::to_string(grid_sizes.size()) + " grid sizes");
  }
  if (transformer.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (std::size_t s = 0; s < transformer.size(); ++s) {
    if (grid_sizes[s] == 0) throw ContractError("congruence_loss: grid size must be positive");
    const Tensor teacher = context[s].value.detach();
    const Tensor term = nd::scale(nd::square(nd::sub(teacher, transformer[s].value)),
                                  1.0 / static_cast<double>(grid_sizes[s]));
    total = total.defined() ? nd::add(total, term) : term;
  }
  return total;
}

}  // namespace gpw::congruence
