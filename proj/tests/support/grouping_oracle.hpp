#pragma once

// Reference guided-grouping path: Jacobi eigendecomposition for PCA, block
// means, softmax, argmax and the rebalancing rule, written without the
// library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace gpw::testing {

// Portable generator so golden inputs do not depend on the standard library.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double splitmix_uniform(std::uint64_t& state) {
  return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
}

// Smooth structured feature [1,C,H,W] with a few random blobs per channel.
inline std::vector<double> golden_feature(std::uint64_t seed, std::size_t c, std::size_t h,
                                          std::size_t w) {
  std::uint64_t s = seed;
  std::vector<double> f(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double cy = splitmix_uniform(s) * static_cast<double>(h);
    const double cx = splitmix_uniform(s) * static_cast<double>(w);
    const double amp = 0.5 + splitmix_uniform(s);
    const double fy = splitmix_uniform(s), fx = splitmix_uniform(s);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        f[(ch * h + y) * w + x] = amp * std::exp(-(dy * dy + dx * dx) / (0.1 * static_cast<double>(h * w))) +
                                  0.3 * std::sin(fy * static_cast<double>(y) + fx * static_cast<double>(x));
      }
    }
  }
  return f;
}

// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
// eigenvalues (descending) and matching unit eigenvectors as rows.
inline void jacobi_eigen(std::vector<double> a, std::size_t n, std::vector<double>& values,
                         std::vector<double>& vectors) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });
  values.assign(n, 0.0);
  vectors.assign(n * n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    values[r] = a[idx[r] * n + idx[r]];
    for (std::size_t k = 0; k < n; ++k) vectors[r * n + k] = v[k * n + idx[r]];
  }
}

// Top-g principal projections of a [1,C,H,W] feature, same sign rule as
// documented: each direction's largest-magnitude entry is positive.
inline std::vector<double> oracle_pca(const std::vector<double>& f, std::size_t c, std::size_t hw,
                                      std::size_t g) {
  std::vector<double> mean(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) mean[ch] += f[ch * hw + p];
    mean[ch] /= static_cast<double>(hw);
  }
  std::vector<double> cov(c * c, 0.0);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        cov[i * c + j] += (f[i * hw + p] - mean[i]) * (f[j * hw + p] - mean[j]);
      }
    }
  }
  for (auto& x : cov) x /= static_cast<double>(hw);
  std::vector<double> vals, vecs;
  jacobi_eigen(cov, c, vals, vecs);
  for (std::size_t r = 0; r < g; ++r) {
    std::size_t big = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (std::abs(vecs[r * c + k]) > std::abs(vecs[r * c + big])) big = k;
    }
    if (vecs[r * c + big] < 0) {
      for (std::size_t k = 0; k < c; ++k) vecs[r * c + k] = -vecs[r * c + k];
    }
  }
  std::vector<double> out(g * hw, 0.0);
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += (f[k * hw + p] - mean[k]) * vecs[r * c + k];
      out[r * hw + p] = s;
    }
  }
  return out;
}

struct OracleMask {
  std::size_t m = 0, n = 0, groups = 0;
  std::vector<int> assign;
  std::vector<double> scores;  // [G, m*n]
};

// Softmax over groups per patch then argmax, ties to the smallest index.
inline OracleMask oracle_build_mask(const std::vector<double>& pooled, std::size_t groups,
                                    std::size_t m, std::size_t n) {
  OracleMask r{m, n, groups, std::vector<int>(m * n, 0), std::vector<double>(groups * m * n)};
  for (std::size_t p = 0; p < m * n; ++p) {
    double mx = pooled[p];
    for (std::size_t g = 1; g < groups; ++g) mx = std::max(mx, pooled[g * m * n + p]);
    double z = 0.0;
    for (std::size_t g = 0; g < groups; ++g) z += std::exp(pooled[g * m * n + p] - mx);
    int best = 0;
    for (std::size_t g = 0; g < groups; ++g) {
      r.scores[g * m * n + p] = std::exp(pooled[g * m * n + p] - mx) / z;
      if (r.scores[g * m * n + p] > r.scores[static_cast<std::size_t>(best) * m * n + p]) best = static_cast<int>(g);
    }
    r.assign[p] = best;
  }
  return r;
}

// Overfull groups drop their lowest-scored members (ties: later patch index
// leaves first); released patches, highest own score first, join the
// under-capacity group with the highest score (ties: smaller group).
inline OracleMask oracle_rebalance(OracleMask mask) {
  const std::size_t total = mask.m * mask.n, cap = (total + mask.groups - 1) / mask.groups;
  struct Released {
    std::size_t patch;
    double score;
  };
  std::vector<Released> released;
  std::vector<std::size_t> size(mask.groups, 0);
  for (std::size_t g = 0; g < mask.groups; ++g) {
    std::vector<std::size_t> members;
    for (std::size_t p = 0; p < total; ++p) {
      if (mask.assign[p] == static_cast<int>(g)) members.push_back(p);
    }
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return mask.scores[g * total + a] > mask.scores[g * total + b];
    });
    for (std::size_t k = cap; k < members.size(); ++k) {
      released.push_back({members[k], mask.scores[g * total + members[k]]});
      mask.assign[members[k]] = -1;
    }
    size[g] = std::min(members.size(), cap);
  }
  std::stable_sort(released.begin(), released.end(), [](const Released& a, const Released& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.patch < b.patch;
  });
  for (const auto& r : released) {
    int dest = -1;
    for (std::size_t g = 0; g < mask.groups; ++g) {
      if (size[g] >= cap) continue;
      if (dest < 0 || mask.scores[g * total + r.patch] > mask.scores[static_cast<std::size_t>(dest) * total + r.patch]) {
        dest = static_cast<int>(g);
      }
    }
    mask.assign[r.patch] = dest;
    ++size[static_cast<std::size_t>(dest)];
  }
  return mask;
}

inline std::string mask_text(const std::vector<int>& assign, std::size_t m, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) out += ' ';
      out += std::to_string(assign[i * n + j]);
    }
    out += '\n';
  }
  return out;
}

}  // namespace gpw::testing
