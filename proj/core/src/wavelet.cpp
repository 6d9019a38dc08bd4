#include "gpw/wavelet.hpp"

#include <string>

namespace gpw::wavelet {

namespace {

// Applies the symmetric Haar butterfly to one block of four values.
inline void haar4(double a, double b, double c, double d, double& o0,
                  double& o1, double& o2, double& o3) {
  o0 = 0.5 * (a + b + c + d);
  o1 = 0.5 * (a + b - c - d);
  o2 = 0.5 * (a - b + c - d);
  o3 = 0.5 * (a - b - c + d);
}

// spatial [N,C,H,W] <-> banded [N,4C,H/2,W/2]. Both directions use the same
// butterfly, so each is the other's adjoint and inverse.
void analysis(const double* x, double* y, std::size_t n, std::size_t c,
              std::size_t h, std::size_t w) {
  const std::size_t h2 = h / 2, w2 = w / 2, band = h2 * w2;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = x + (b * c + ch) * h * w;
      double* out[4];
      for (std::size_t k = 0; k < 4; ++k) out[k] = y + ((b * 4 + k) * c + ch) * band;
      for (std::size_t i = 0; i < h2; ++i) {
        for (std::size_t j = 0; j < w2; ++j) {
          const double* p = src + (2 * i) * w + 2 * j;
          const std::size_t o = i * w2 + j;
          haar4(p[0], p[1], p[w], p[w + 1], out[0][o], out[1][o], out[2][o], out[3][o]);
        }
      }
    }
  }
}

void synthesis(const double* y, double* x, std::size_t n, std::size_t c,
               std::size_t h, std::size_t w) {
  const std::size_t h2 = h / 2, w2 = w / 2, band = h2 * w2;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* dst = x + (b * c + ch) * h * w;
      const double* in[4];
      for (std::size_t k = 0; k < 4; ++k) in[k] = y + ((b * 4 + k) * c + ch) * band;
      for (std::size_t i = 0; i < h2; ++i) {
        for (std::size_t j = 0; j < w2; ++j) {
          double* p = dst + (2 * i) * w + 2 * j;
          const std::size_t o = i * w2 + j;
          double a, bb, cc, d;
          haar4(in[0][o], in[1][o], in[2][o], in[3][o], a, bb, cc, d);
          p[0] += a;
          p[1] += bb;
          p[w] += cc;
          p[w + 1] += d;
        }
      }
    }
  }
}

void require_spatial(const Tensor& x, const char* op) {
  if (x.rank() != 4) {
    throw DimensionError(std::string(op) + ": expected [N,C,H,W], got " +
                         nd::to_string(x.shape()));
  }
  if (x.extent(2) == 0 || x.extent(3) == 0) {
    throw DimensionError(std::string(op) + ": zero-sized spatial extent in " +
                         nd::to_string(x.shape()));
  }
}

}  // namespace

Tensor dwt_concat(const Tensor& x) {
  require_spatial(x, "dwt_concat");
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("dwt_concat: spatial extents must be even, got " +
                         nd::to_string(x.shape()));
  }
  std::vector<double> out(x.size(), 0.0);
  analysis(x.values().data(), out.data(), n, c, h, w);
  nd::counting::add_mul_adds(x.size());
  return nd::detail::make_result(
      {n, 4 * c, h / 2, w / 2}, std::move(out), {x}, "dwt_concat",
      [x, n, c, h, w](nd::Node& o) {
        synthesis(o.grad.data(), nd::detail::grad_target(x), n, c, h, w);
      });
}

Tensor iwt_concat(const Tensor& x) {
  require_spatial(x, "iwt_concat");
  const std::size_t n = x.extent(0), c4 = x.extent(1);
  if (c4 % 4 != 0) {
    throw DimensionError("iwt_concat: channel count must be a multiple of 4, got " +
                         nd::to_string(x.shape()));
  }
  const std::size_t c = c4 / 4, h = 2 * x.extent(2), w = 2 * x.extent(3);
  std::vector<double> out(x.size(), 0.0);
  synthesis(x.values().data(), out.data(), n, c, h, w);
  nd::counting::add_mul_adds(x.size());
  return nd::detail::make_result(
      {n, c, h, w}, std::move(out), {x}, "iwt_concat", [x, n, c, h, w](nd::Node& o) {
        // Adjoint of an orthonormal map is its inverse.
        std::vector<double> banded(o.grad.size(), 0.0);
        analysis(o.grad.data(), banded.data(), n, c, h, w);
        double* g = nd::detail::grad_target(x);
        for (std::size_t i = 0; i < banded.size(); ++i) g[i] += banded[i];
      });
}

SubbandSet split_subbands(const Tensor& concatenated) {
  require_spatial(concatenated, "split_subbands");
  const std::size_t c4 = concatenated.extent(1);
  if (c4 % 4 != 0) {
    throw DimensionError("split_subbands: channel count must be a multiple of 4, got " +
                         nd::to_string(concatenated.shape()));
  }
  const std::size_t c = c4 / 4;
  return SubbandSet{nd::slice(concatenated, 1, 0, c), nd::slice(concatenated, 1, c, c),
                    nd::slice(concatenated, 1, 2 * c, c),
                    nd::slice(concatenated, 1, 3 * c, c), {}};
}

SubbandSet dwt2(const Tensor& x) {
  require_spatial(x, "dwt2");
  EdgePadding pad{x.extent(2) % 2, x.extent(3) % 2};
  Tensor even = x;
  if (pad.bottom != 0 || pad.right != 0) {
    even = nd::pad2d(x, 0, pad.bottom, 0, pad.right, nd::PadMode::reflect);
  }
  SubbandSet s = split_subbands(dwt_concat(even));
  s.padding = pad;
  return s;
}

Tensor iwt2(const SubbandSet& s) {
  if (!s.ll.defined() || !s.lh.defined() || !s.hl.defined() || !s.hh.defined()) {
    throw DimensionError("iwt2: missing subband");
  }
  const auto& ref = s.ll.shape();
  for (const Tensor* t : {&s.lh, &s.hl, &s.hh}) {
    if (t->shape() != ref) {
      throw DimensionError("iwt2: inconsistent subband shapes " + nd::to_string(ref) +
                           " vs " + nd::to_string(t->shape()));
    }
  }
  Tensor full = iwt_concat(nd::concat({s.ll, s.lh, s.hl, s.hh}, 1));
  if (s.padding.bottom == 0 && s.padding.right == 0) return full;
  Tensor cropped = nd::slice(full, 2, 0, full.extent(2) - s.padding.bottom);
  return nd::slice(cropped, 3, 0, cropped.extent(3) - s.padding.right);
}

}  // namespace gpw::wavelet
