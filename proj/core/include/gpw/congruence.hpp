#pragma once

// Inter-patch relation matching between the transformer and context
// branches. For unit vectors a, b the Gaussian kernel factorises as
//   exp(-θ‖a-b‖²) = e^{-2θ} Σ_t (2θ)^t (a·b)^t / t!
// and is evaluated here as the partial sum up to order T.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "gpw/ndgrad.hpp"

namespace gpw::congruence {

using nd::Tensor;

// Pairwise relation used inside a stage sum.
enum class RelationKind {
  rbf,        // truncated Taylor RBF
  mean,       // squared distance between centers
  inner_dot,  // plain dot product
};

std::string_view to_string(RelationKind kind);
RelationKind parse_relation(std::string_view text);

struct CongruenceConfig {
  double theta = 0.5;
  std::size_t taylor_order = 3;
  double alpha = 0.8;
  RelationKind relation = RelationKind::rbf;

  void validate() const;
};

struct RelationScalar {
  Tensor value;  // [1]
  double get() const { return value.item(); }
};

// Per-patch mean over N, h, w without normalisation: [P, C].
Tensor raw_patch_centers(const std::vector<Tensor>& patches);

// Unit-normalised patch centers [P, C].
Tensor patch_centers(const std::vector<Tensor>& patches);

// Unit-normalised centers of an m×n block partition of feature [N,C,H,W].
Tensor grid_centers(const Tensor& feature, std::size_t m, std::size_t n);

// e^{-2θ}(2θ)^t/t! for t = 0..T.
std::vector<double> taylor_coefficients(double theta, std::size_t order);

// Order-T kernel between two unit vectors (any shape with equal sizes).
Tensor rbf_taylor(const Tensor& a, const Tensor& b, double theta, std::size_t order);

// exp(-θ‖a-b‖²) evaluated directly.
double rbf_exact(std::span<const double> a, std::span<const double> b, double theta);

// Σ_{k1} Σ_{k2} R(c_k1, c_k2) over all ordered pairs, self-pairs included.
RelationScalar stage_relation(const Tensor& centers, const CongruenceConfig& cfg);

// Σ_s (C_s - T_s)² / grid_s with the context side treated as constant.
Tensor congruence_loss(const std::vector<RelationScalar>& transformer,
                       const std::vector<RelationScalar>& context,
                       const std::vector<std::size_t>& grid_sizes);

}  // namespace gpw::congruence
