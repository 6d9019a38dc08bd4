#include "gpw/grouping.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gpw::grouping {

namespace {

// Differentiable spatial window copy.
Tensor crop(const Tensor& x, std::size_t top, std::size_t left, std::size_t h,
            std::size_t w) {
  const std::size_t nc = x.extent(0) * x.extent(1);
  const std::size_t H = x.extent(2), W = x.extent(3);
  const auto xv = x.values();
  std::vector<double> out(nc * h * w);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(xv.data() + (p * H + top + y) * W + left, w, out.data() + (p * h + y) * w);
  return nd::detail::make_result(
      {x.extent(0), x.extent(1), h, w}, std::move(out), {x}, "crop",
      [x, nc, H, W, top, left, h, w](nd::Node& o) {
        double* g = nd::detail::grad_target(x);
        for (std::size_t p = 0; p < nc; ++p)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t c = 0; c < w; ++c)
              g[(p * H + top + y) * W + left + c] += o.grad[(p * h + y) * w + c];
      });
}

std::vector<double> softmax_over_groups(const std::vector<double>& logits,
                                        std::size_t groups, std::size_t cells) {
  std::vector<double> s(logits.size());
  for (std::size_t k = 0; k < cells; ++k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < groups; ++g) mx = std::max(mx, logits[g * cells + k]);
    double z = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
      s[g * cells + k] = std::exp(logits[g * cells + k] - mx);
      z += s[g * cells + k];
    }
    for (std::size_t g = 0; g < groups; ++g) s[g * cells + k] /= z;
  }
  return s;
}

Tensor one_hot_scores(const std::vector<int>& assign, std::size_t groups,
                      std::size_t m, std::size_t n) {
  std::vector<double> s(groups * m * n, 0.0);
  for (std::size_t k = 0; k < assign.size(); ++k) {
    s[static_cast<std::size_t>(assign[k]) * m * n + k] = 1.0;
  }
  return Tensor::from_vector({groups, m, n}, std::move(s));
}

}  // namespace

// ---- grid ------------------------------------------------------------------

PatchGrid PatchGrid::fit(std::size_t height, std::size_t width, std::size_t m,
                         std::size_t n, std::size_t overlap) {
  if (m == 0 || n == 0) throw ContractError("PatchGrid: grid extents must be positive");
  if (m > height || n > width) {
    throw DimensionError("PatchGrid: " + std::to_string(m) + "x" + std::to_string(n) +
                         " grid exceeds image " + std::to_string(height) + "x" + std::to_string(width));
  }
  PatchGrid g;
  g.m = m;
  g.n = n;
  g.overlap = overlap;
  g.patch_h = (height + (m - 1) * overlap + m - 1) / m;
  g.patch_w = (width + (n - 1) * overlap + n - 1) / n;
  if (g.patch_h <= overlap || g.patch_w <= overlap) {
    throw DimensionError("PatchGrid: overlap " + std::to_string(overlap) +
                         " leaves no stride for a " + std::to_string(m) + "x" +
                         std::to_string(n) + " grid over " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
  g.pad_bottom = g.covered_h() - height;
  g.pad_right = g.covered_w() - width;
  return g;
}

std::vector<Tensor> partition(const Tensor& x, const PatchGrid& grid) {
  if (x.rank() != 4) throw DimensionError("partition: expected [N,C,H,W], got " + nd::to_string(x.shape()));
  const std::size_t H = x.extent(2), W = x.extent(3);
  if (grid.patch_h > H + grid.pad_bottom || grid.patch_w > W + grid.pad_right) {
    throw DimensionError("partition: patch " + std::to_string(grid.patch_h) + "x" +
                         std::to_string(grid.patch_w) + " larger than image " +
                         nd::to_string(x.shape()));
  }
  if (grid.covered_h() != H + grid.pad_bottom || grid.covered_w() != W + grid.pad_right) {
    throw DimensionError("partition: grid covers " + std::to_string(grid.covered_h()) +
                         "x" + std::to_string(grid.covered_w()) + " but image is " +
                         nd::to_string(x.shape()) + " plus padding");
  }
  Tensor src = x;
  if (grid.pad_bottom != 0 || grid.pad_right != 0) {
    src = nd::pad2d(x, 0, grid.pad_bottom, 0, grid.pad_right, nd::PadMode::replicate);
  }
  std::vector<Tensor> patches;
  patches.reserve(grid.count());
  for (std::size_t i = 0; i < grid.m; ++i) {
    for (std::size_t j = 0; j < grid.n; ++j) {
      patches.push_back(crop(src, i * grid.stride_h(), j * grid.stride_w(), grid.patch_h,
                             grid.patch_w));
    }
  }
  return patches;
}

Tensor stitch(const std::vector<Tensor>& patches, const PatchGrid& grid,
              std::size_t height, std::size_t width) {
  if (patches.size() != grid.count()) {
    throw DimensionError("stitch: expected " + std::to_string(grid.count()) +
                         " patches, got " + std::to_string(patches.size()));
  }
  const nd::Shape& ref = patches.front().shape();
  if (ref.size() != 4 || ref[2] != grid.patch_h || ref[3] != grid.patch_w) {
    throw DimensionError("stitch: patch shape " + nd::to_string(ref) + " does not match grid");
  }
  for (const auto& p : patches) {
    if (p.shape() != ref) throw DimensionError("stitch: patches differ in shape");
  }
  if (height > grid.covered_h() || width > grid.covered_w()) {
    throw DimensionError("stitch: target extent exceeds grid coverage");
  }
  const std::size_t nc = ref[0] * ref[1];
  const std::size_t ph = grid.patch_h, pw = grid.patch_w;
  const std::size_t sh = grid.stride_h(), sw = grid.stride_w();
  const std::size_t gn = grid.n;
  auto inv_count = std::make_shared<std::vector<double>>(height * width, 0.0);
  for (std::size_t i = 0; i < grid.m; ++i)
    for (std::size_t j = 0; j < grid.n; ++j)
      for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t c = 0; c < pw; ++c) {
          const std::size_t oy = i * sh + y, ox = j * sw + c;
          if (oy < height && ox < width) (*inv_count)[oy * width + ox] += 1.0;
        }
  for (auto& v : *inv_count) v = 1.0 / v;

  std::vector<double> out(nc * height * width, 0.0);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const std::size_t i = k / gn, j = k % gn;
    const auto pv = patches[k].values();
    for (std::size_t p = 0; p < nc; ++p)
      for (std::size_t y = 0; y < ph; ++y) {
        const std::size_t oy = i * sh + y;
        if (oy >= height) break;
        for (std::size_t c = 0; c < pw; ++c) {
          const std::size_t ox = j * sw + c;
          if (ox >= width) break;
          out[(p * height + oy) * width + ox] +=
              pv[(p * ph + y) * pw + c] * (*inv_count)[oy * width + ox];
        }
      }
  }
  nd::counting::add_mul_adds(patches.size() * nc * ph * pw);
  return nd::detail::make_result(
      {ref[0], ref[1], height, width}, std::move(out), patches, "stitch",
      [patches, inv_count, nc, ph, pw, sh, sw, gn, height, width](nd::Node& o) {
        for (std::size_t k = 0; k < patches.size(); ++k) {
          double* g = nd::detail::grad_target(patches[k]);
          if (g == nullptr) continue;
          const std::size_t i = k / gn, j = k % gn;
          for (std::size_t p = 0; p < nc; ++p)
            for (std::size_t y = 0; y < ph; ++y) {
              const std::size_t oy = i * sh + y;
              if (oy >= height) break;
              for (std::size_t c = 0; c < pw; ++c) {
                const std::size_t ox = j * sw + c;
                if (ox >= width) break;
                g[(p * ph + y) * pw + c] +=
                    o.grad[(p * height + oy) * width + ox] * (*inv_count)[oy * width + ox];
              }
            }
        }
      });
}

// ---- PCA -------------------------------------------------------------------

PcaFit pca_fit(const Tensor& f, std::size_t groups) {
  if (f.rank() != 4) throw DimensionError("pca_fit: expected [N,C,H,W], got " + nd::to_string(f.shape()));
  const std::size_t n = f.extent(0), c = f.extent(1), hw = f.extent(2) * f.extent(3);
  if (c < groups) {
    throw ContractError("pca_reduce: cannot keep " + std::to_string(groups) +
                        " components from " + std::to_string(c) + " channels");
  }
  if (groups == 0) throw ContractError("pca_reduce: need at least one component");
  const std::size_t pixels = n * hw;
  Eigen::MatrixXd data(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(c));
  const auto fv = f.values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        data(static_cast<Eigen::Index>(b * hw + p), static_cast<Eigen::Index>(ch)) =
            fv[(b * c + ch) * hw + p];
  const Eigen::RowVectorXd mu = data.colwise().mean();
  data.rowwise() -= mu;
  const Eigen::MatrixXd cov = (data.transpose() * data) / static_cast<double>(pixels);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::VectorXd evals = solver.eigenvalues();   // ascending
  const Eigen::MatrixXd evecs = solver.eigenvectors();  // columns

  PcaFit fit;
  fit.mean.assign(mu.data(), mu.data() + c);
  fit.eigenvalues.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    fit.eigenvalues[i] = std::max(0.0, evals(static_cast<Eigen::Index>(c - 1 - i)));
  }
  fit.components.resize(groups * c);
  for (std::size_t g = 0; g < groups; ++g) {
    const auto col = static_cast<Eigen::Index>(c - 1 - g);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (std::abs(evecs(static_cast<Eigen::Index>(k), col)) >
          std::abs(evecs(static_cast<Eigen::Index>(arg), col))) {
        arg = k;
      }
    }
    const double sign = evecs(static_cast<Eigen::Index>(arg), col) < 0.0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < c; ++k) {
      fit.components[g * c + k] = sign * evecs(static_cast<Eigen::Index>(k), col);
    }
  }
  const double total = std::accumulate(fit.eigenvalues.begin(), fit.eigenvalues.end(), 0.0);
  const double kept = std::accumulate(fit.eigenvalues.begin(),
                                      fit.eigenvalues.begin() + static_cast<std::ptrdiff_t>(groups), 0.0);
  fit.explained_variance_ratio = total > 0.0 ? kept / total : 1.0;
  return fit;
}

Tensor pca_reduce(const Tensor& f, std::size_t groups) {
  const PcaFit fit = pca_fit(f, groups);
  const std::size_t n = f.extent(0), c = f.extent(1), hw = f.extent(2) * f.extent(3);
  const auto fv = f.values();
  std::vector<double> out(n * groups * hw, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      double* dst = out.data() + (b * groups + g) * hw;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double w = fit.components[g * c + ch];
        const double* src = fv.data() + (b * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += w * (src[p] - fit.mean[ch]);
      }
    }
  nd::counting::add_mul_adds(n * groups * hw * c + n * hw * c * c);
  return Tensor::from_vector({n, groups, f.extent(2), f.extent(3)}, std::move(out));
}

Tensor patch_pool(const Tensor& f, std::size_t m, std::size_t n) {
  if (f.rank() != 4) throw DimensionError("patch_pool: expected [N,G,H,W], got " + nd::to_string(f.shape()));
  const std::size_t h = f.extent(2), w = f.extent(3);
  if (m == 0 || n == 0 || m > h || n > w) {
    throw DimensionError("patch_pool: " + std::to_string(m) + "x" + std::to_string(n) +
                         " grid does not fit feature " + nd::to_string(f.shape()));
  }
  const std::size_t pb = (m - h % m) % m, pr = (n - w % n) % n;
  Tensor src = f;
  if (pb != 0 || pr != 0) src = nd::pad2d(f, 0, pb, 0, pr, nd::PadMode::replicate);
  return nd::avg_pool2d(src, (h + pb) / m, (w + pr) / n);
}

// ---- masks -----------------------------------------------------------------

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::guided: return "guided";
    case Strategy::linear_row: return "linear_row";
    case Strategy::linear_column: return "linear_column";
    case Strategy::rectangle: return "rectangle";
  }
  return "guided";
}

Strategy parse_strategy(std::string_view text) {
  std::string t(text);
  std::replace(t.begin(), t.end(), '-', '_');
  if (t == "guided") return Strategy::guided;
  if (t == "linear_row" || t == "row") return Strategy::linear_row;
  if (t == "linear_column" || t == "column") return Strategy::linear_column;
  if (t == "rectangle") return Strategy::rectangle;
  throw ConfigError("unknown grouping strategy '" + std::string(text) + "'");
}

double GroupingMask::score(std::size_t g, std::size_t patch) const {
  return scores.values()[g * m * n + patch];
}

std::vector<std::size_t> GroupingMask::sizes() const {
  std::vector<std::size_t> s(groups, 0);
  for (int a : assign) ++s[static_cast<std::size_t>(a)];
  return s;
}

std::vector<std::size_t> GroupingMask::members(std::size_t g) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < assign.size(); ++k) {
    if (assign[k] == static_cast<int>(g)) out.push_back(k);
  }
  return out;
}

std::string GroupingMask::to_text() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) os << ' ';
      os << assign[i * n + j];
    }
    os << '\n';
  }
  return os.str();
}

GroupingMask GroupingMask::from_text(std::string_view text, std::size_t groups) {
  GroupingMask mask;
  mask.groups = groups;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::size_t cols = 0;
    int v = 0;
    while (ls >> v) {
      if (v < 0 || static_cast<std::size_t>(v) >= groups) {
        throw FormatError("mask entry " + std::to_string(v) + " outside [0," +
                          std::to_string(groups) + ")");
      }
      mask.assign.push_back(v);
      ++cols;
    }
    if (!ls.eof()) throw FormatError("mask line is not a list of integers: " + line);
    if (mask.m == 0) {
      mask.n = cols;
    } else if (cols != mask.n) {
      throw FormatError("mask rows have unequal lengths");
    }
    ++mask.m;
  }
  if (mask.m == 0) throw FormatError("empty mask text");
  mask.scores = one_hot_scores(mask.assign, groups, mask.m, mask.n);
  return mask;
}

GroupingMask build_mask(const Tensor& pooled) {
  if (pooled.rank() != 4) {
    throw DimensionError("build_mask: expected [N,G,m,n], got " + nd::to_string(pooled.shape()));
  }
  const std::size_t batch = pooled.extent(0), groups = pooled.extent(1);
  const std::size_t m = pooled.extent(2), n = pooled.extent(3), cells = m * n;
  const auto pv = pooled.values();
  std::vector<double> logits(groups * cells, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < groups * cells; ++k) logits[k] += pv[b * groups * cells + k];
  for (auto& v : logits) v /= static_cast<double>(batch);

  GroupingMask mask;
  mask.m = m;
  mask.n = n;
  mask.groups = groups;
  const std::vector<double> s = softmax_over_groups(logits, groups, cells);
  mask.assign.resize(cells);
  for (std::size_t k = 0; k < cells; ++k) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < groups; ++g) {
      if (s[g * cells + k] > s[best * cells + k]) best = g;
    }
    mask.assign[k] = static_cast<int>(best);
  }
  mask.scores = Tensor::from_vector({groups, m, n}, s);
  return mask;
}

GroupingMask rebalance(const GroupingMask& mask) {
  GroupingMask out = mask;
  const std::size_t cap = mask.capacity();
  std::vector<std::size_t> size = mask.sizes();
  struct Released {
    std::size_t patch;
    double own_score;
  };
  std::vector<Released> released;
  for (std::size_t g = 0; g < mask.groups; ++g) {
    if (size[g] <= cap) continue;
    std::vector<std::size_t> mem = mask.members(g);
    std::stable_sort(mem.begin(), mem.end(), [&](std::size_t a, std::size_t b) {
      return mask.score(g, a) > mask.score(g, b);
    });
    for (std::size_t r = cap; r < mem.size(); ++r) {
      released.push_back({mem[r], mask.score(g, mem[r])});
      out.assign[mem[r]] = -1;
    }
    size[g] = cap;
  }
  std::stable_sort(released.begin(), released.end(), [](const Released& a, const Released& b) {
    if (a.own_score != b.own_score) return a.own_score > b.own_score;
    return a.patch < b.patch;
  });
  for (const Released& r : released) {
    std::size_t best = mask.groups;
    for (std::size_t g = 0; g < mask.groups; ++g) {
      if (size[g] >= cap) continue;
      if (best == mask.groups || mask.score(g, r.patch) > mask.score(best, r.patch)) best = g;
    }
    out.assign[r.patch] = static_cast<int>(best);
    ++size[best];
  }
  return out;
}

GroupingMask baseline_mask(Strategy kind, std::size_t m, std::size_t n,
                           std::size_t groups) {
  if (kind == Strategy::guided) {
    throw ContractError("baseline_mask: guided grouping needs guidance features");
  }
  if (groups == 0 || groups > m * n) {
    throw ContractError("baseline_mask: " + std::to_string(groups) + " groups for " +
                        std::to_string(m * n) + " patches");
  }
  GroupingMask mask;
  mask.m = m;
  mask.n = n;
  mask.groups = groups;
  mask.assign.resize(m * n);
  const std::size_t run = mask.capacity();
  switch (kind) {
    case Strategy::linear_row:
      for (std::size_t k = 0; k < m * n; ++k) mask.assign[k] = static_cast<int>(k / run);
      break;
    case Strategy::linear_column:
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) mask.assign[i * n + j] = static_cast<int>((j * m + i) / run);
      break;
    case Strategy::rectangle: {
      const auto rows = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(groups))));
      const std::size_t cols = (groups + rows - 1) / rows;
      const std::size_t used_rows = (groups + cols - 1) / cols;
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t br = i * used_rows / m;
        const std::size_t in_row = br + 1 < used_rows ? cols : groups - (used_rows - 1) * cols;
        for (std::size_t j = 0; j < n; ++j) {
          mask.assign[i * n + j] = static_cast<int>(br * cols + j * in_row / n);
        }
      }
      break;
    }
    case Strategy::guided:
      break;
  }
  mask.scores = one_hot_scores(mask.assign, groups, m, n);
  return mask;
}

}  // namespace gpw::grouping
