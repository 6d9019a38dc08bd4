#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "gpw/ndgrad.hpp"

namespace gpw::grouping {

using nd::Tensor;

// m×n grid of patch_h×patch_w windows with `overlap` shared pixels between
// neighbours. Coverage is m*patch_h - (m-1)*overlap = H + pad_bottom (same
// for width); padding replicates the bottom/right edge.
struct PatchGrid {
  std::size_t m = 1;
  std::size_t n = 1;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  std::size_t overlap = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;

  // Smallest patch size covering an H×W image with the given grid.
  static PatchGrid fit(std::size_t height, std::size_t width, std::size_t m,
                       std::size_t n, std::size_t overlap = 0);

  std::size_t count() const { return m * n; }
  std::size_t stride_h() const { return patch_h - overlap; }
  std::size_t stride_w() const { return patch_w - overlap; }
  std::size_t covered_h() const { return m * patch_h - (m - 1) * overlap; }
  std::size_t covered_w() const { return n * patch_w - (n - 1) * overlap; }
};

// Row-major list of m*n patches [N,C,patch_h,patch_w].
std::vector<Tensor> partition(const Tensor& x, const PatchGrid& grid);

// Inverse of partition: overlapping pixels are averaged and edge padding is
// cropped, giving [N,C,height,width].
Tensor stitch(const std::vector<Tensor>& patches, const PatchGrid& grid,
              std::size_t height, std::size_t width);

struct PcaFit {
  std::vector<double> mean;        // C1
  std::vector<double> components;  // G×C1, row-major, unit rows
  std::vector<double> eigenvalues;  // all C1, descending
  double explained_variance_ratio = 0.0;  // top-G share of total variance
};

// Principal directions of the pixel population of f [N,C1,H1,W1].
PcaFit pca_fit(const Tensor& f, std::size_t groups);

// Projects every pixel onto the top-G principal directions. The result is a
// constant outside the gradient graph.
Tensor pca_reduce(const Tensor& f, std::size_t groups);

// Patch-wise average pooling over an m×n block partition (0-based blocks).
// Extents not divisible by m/n are edge-padded first.
Tensor patch_pool(const Tensor& f, std::size_t m, std::size_t n);

enum class Strategy { guided, linear_row, linear_column, rectangle };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view text);

struct GroupingMask {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t groups = 0;
  std::vector<int> assign;  // m*n, row-major
  Tensor scores;            // [G,m,n], sums to 1 over G

  int at(std::size_t i, std::size_t j) const { return assign[i * n + j]; }
  double score(std::size_t g, std::size_t patch) const;
  std::vector<std::size_t> sizes() const;
  // Row-major patch indices assigned to group g.
  std::vector<std::size_t> members(std::size_t g) const;
  std::size_t capacity() const { return (m * n + groups - 1) / groups; }

  // One row per line, integers separated by single spaces.
  std::string to_text() const;
  static GroupingMask from_text(std::string_view text, std::size_t groups);
};

// Softmax over G then argmax per patch, ties to the smallest g. A batch
// (N>1) is reduced by averaging the pooled logits over N first.
GroupingMask build_mask(const Tensor& pooled);

// Caps every group at ceil(m*n/G): overfull groups release their
// lowest-scored members, which then join the under-capacity group where
// their score is highest (released patches handled in descending score).
GroupingMask rebalance(const GroupingMask& mask);

// Score-free grouping used by the ablation baselines.
GroupingMask baseline_mask(Strategy kind, std::size_t m, std::size_t n,
                           std::size_t groups);

}  // namespace gpw::grouping
