#include "gpw/ndgrad.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace gpw::nd {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + to_string(x.shape()));
  }
}

// Unary elementwise op with derivative expressed through input and output.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  counting::add_mul_adds(in.size());
  return detail::make_result(
      x.shape(), std::move(out), {x}, op, [x, deriv](Node& o) {
        double* gx = detail::grad_target(x);
        if (gx == nullptr) return;
        const auto xv = x.values();
        for (std::size_t i = 0; i < o.data.size(); ++i) {
          gx[i] += o.grad[i] * deriv(xv[i], o.data[i]);
        }
      });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t mid = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.mid = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Normalises `count` groups of `dim` strided elements. Group g starts at
// base(g) and element i sits at base(g) + i*stride.
template <class Base>
Tensor normalize_groups(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, double eps, std::size_t count,
                        std::size_t dim, std::size_t stride, Base base,
                        const char* op) {
  if (gamma.size() != dim || beta.size() != dim) {
    throw DimensionError(std::string(op) + ": affine size must be " +
                         std::to_string(dim));
  }
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(count);
  for (std::size_t g = 0; g < count; ++g) {
    const std::size_t b0 = base(g);
    double mu = 0.0;
    for (std::size_t i = 0; i < dim; ++i) mu += xv[b0 + i * stride];
    mu /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = xv[b0 + i * stride] - mu;
      var += d * d;
    }
    var /= static_cast<double>(dim);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[g] = is;
    for (std::size_t i = 0; i < dim; ++i) {
      const std::size_t k = b0 + i * stride;
      const double h = (xv[k] - mu) * is;
      (*xhat)[k] = h;
      out[k] = h * gv[i] + bv[i];
    }
  }
  counting::add_mul_adds(xv.size());
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, op,
      [x, gamma, beta, xhat, inv_std, count, dim, stride, base](Node& o) {
        double* gx = detail::grad_target(x);
        double* gg = detail::grad_target(gamma);
        double* gb = detail::grad_target(beta);
        const auto gv = gamma.values();
        const auto& h = *xhat;
        std::vector<double> dh(dim);
        for (std::size_t g = 0; g < count; ++g) {
          const std::size_t b0 = base(g);
          double mean_dh = 0.0;
          double mean_dh_h = 0.0;
          for (std::size_t i = 0; i < dim; ++i) {
            const std::size_t k = b0 + i * stride;
            const double dy = o.grad[k];
            if (gg != nullptr) gg[i] += dy * h[k];
            if (gb != nullptr) gb[i] += dy;
            dh[i] = dy * gv[i];
            mean_dh += dh[i];
            mean_dh_h += dh[i] * h[k];
          }
          if (gx == nullptr) continue;
          mean_dh /= static_cast<double>(dim);
          mean_dh_h /= static_cast<double>(dim);
          const double is = (*inv_std)[g];
          for (std::size_t i = 0; i < dim; ++i) {
            const std::size_t k = b0 + i * stride;
            gx[k] += is * (dh[i] - mean_dh - h[k] * mean_dh_h);
          }
        }
      });
}

struct ConvGeometry {
  std::size_t n, c, h, w, co, kh, kw, ho, wo, stride, pad, dil;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_px() const { return ho * wo; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && stride == 1 && pad == 0;
  }
};

void im2col(const ConvGeometry& g, const double* x, double* cols) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((ci * g.kh + i) * g.kw + j) * g.out_px();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i * g.dil) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j * g.dil) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 &&
                                iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wo + ox] =
                inside ? x[(ci * g.h + static_cast<std::size_t>(iy)) * g.w +
                           static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* x) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((ci * g.kh + i) * g.kw + j) * g.out_px();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i * g.dil) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j * g.dil) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(ci * g.h + static_cast<std::size_t>(iy)) * g.w +
              static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

struct BilinearTap {
  std::size_t i0, i1;
  double w1;
};

std::vector<BilinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<BilinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

// ---- basics ----------------------------------------------------------------

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Node::Node(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape.size() > 4) {
    throw DimensionError("tensor rank above 4: " + to_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor storage of " + std::to_string(data.size()) +
                         " values does not match shape " + to_string(shape));
  }
  counting::on_alloc(data.size());
}

Node::~Node() { counting::on_free(data.size()); }

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return from_vector(std::move(shape), std::vector<double>(n, value),
                     requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  auto node = std::make_shared<Node>(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_vector({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& e : v) e = dist(rng);
  return from_vector(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& e : v) e = dist(rng);
  return from_vector(std::move(shape), std::move(v), requires_grad);
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(shape()));
  }
  return node_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() on tensor of shape " + to_string(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw DimensionError("index rank does not match shape " + to_string(shape()));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) {
      throw DimensionError("index out of range for shape " + to_string(shape()));
    }
    off = off * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[off];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const {
  return from_vector(shape(), std::vector<double>(values().begin(), values().end()));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, const char* op,
                   std::function<void(Node& out)> backward) {
  auto node = std::make_shared<Node>(std::move(shape), std::move(data));
  node->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (auto& t : inputs) {
        if (t.defined() && t.requires_grad()) node->parents.push_back(t.node_ptr());
      }
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

double* grad_target(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->grad_buffer().data();
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void transpose_into(const double* src, double* dst, std::size_t rows,
                    std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  counting::add_mul_adds(out.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, "add",
                             [a, b](Node& o) {
                               for (const Tensor* t : {&a, &b}) {
                                 if (double* g = detail::grad_target(*t)) {
                                   for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                                 }
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  counting::add_mul_adds(out.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, "sub",
                             [a, b](Node& o) {
                               if (double* g = detail::grad_target(a)) {
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                               }
                               if (double* g = detail::grad_target(b)) {
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  counting::add_mul_adds(out.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, "mul",
                             [a, b](Node& o) {
                               const auto av = a.values();
                               const auto bv = b.values();
                               if (double* g = detail::grad_target(a)) {
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bv[i];
                               }
                               if (double* g = detail::grad_target(b)) {
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * av[i];
                               }
                             });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, "scale", [s](double v) { return v * s; },
               [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; },
               [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
               v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Tensor polynomial(const Tensor& x, std::span<const double> coeffs) {
  std::vector<double> c(coeffs.begin(), coeffs.end());
  if (c.empty()) c.push_back(0.0);
  auto value = [c](double v) {
    double acc = 0.0;
    for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * v + *it;
    return acc;
  };
  auto slope = [c](double v, double) {
    double acc = 0.0;
    for (std::size_t t = c.size() - 1; t >= 1; --t) {
      acc = acc * v + static_cast<double>(t) * c[t];
    }
    return acc;
  };
  return unary(x, "polynomial", value, slope);
}

Tensor mul_constant(const Tensor& x, std::span<const double> mask) {
  if (mask.size() != x.size()) {
    throw DimensionError("mul_constant: mask has " + std::to_string(mask.size()) +
                         " values for shape " + to_string(x.shape()));
  }
  auto m = std::make_shared<std::vector<double>>(mask.begin(), mask.end());
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*m)[i];
  counting::add_mul_adds(out.size());
  return detail::make_result(x.shape(), std::move(out), {x}, "mul_constant",
                             [x, m](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * (*m)[i];
                             });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  counting::add_mul_adds(x.size());
  return detail::make_result({1}, {s}, {x}, "sum", [x](Node& o) {
    double* g = detail::grad_target(x);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor channel_mean(const Tensor& x) {
  require_rank(x, 4, "channel_mean");
  const std::size_t n = x.extent(0), c = x.extent(1);
  const std::size_t hw = x.extent(2) * x.extent(3);
  const double inv = 1.0 / static_cast<double>(n * hw);
  const auto xv = x.values();
  std::vector<double> out(c, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = xv.data() + (b * c + ch) * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      out[ch] += s;
    }
  }
  for (auto& v : out) v *= inv;
  counting::add_mul_adds(x.size());
  return detail::make_result({1, c}, std::move(out), {x}, "channel_mean",
                             [x, n, c, hw, inv](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t b = 0; b < n; ++b) {
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const double d = o.grad[ch] * inv;
                                   double* p = g + (b * c + ch) * hw;
                                   for (std::size_t i = 0; i < hw; ++i) p[i] += d;
                                 }
                               }
                             });
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  counting::add_mul_adds(m * k * n);
  return detail::make_result({m, n}, std::move(out), {a, b}, "matmul",
                             [a, b, m, k, n](Node& o) {
                               if (double* ga = detail::grad_target(a)) {
                                 std::vector<double> bt(k * n);
                                 detail::transpose_into(b.values().data(), bt.data(), k, n);
                                 detail::gemm_nn(o.grad.data(), bt.data(), ga, m, n, k);
                               }
                               if (double* gb = detail::grad_target(b)) {
                                 std::vector<double> at(m * k);
                                 detail::transpose_into(a.values().data(), at.data(), m, k);
                                 detail::gemm_nn(at.data(), o.grad.data(), gb, k, m, n);
                               }
                             });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.extent(0), c = x.extent(1);
  std::vector<double> out(r * c);
  detail::transpose_into(x.values().data(), out.data(), r, c);
  return detail::make_result({c, r}, std::move(out), {x}, "transpose",
                             [x, r, c](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t i = 0; i < r; ++i) {
                                 for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
                               }
                             });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (bias.size() != cols) {
    throw DimensionError("add_row_bias: bias " + to_string(bias.shape()) +
                         " does not match row width of " + to_string(x.shape()));
  }
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] + bv[j];
  }
  counting::add_mul_adds(out.size());
  return detail::make_result(x.shape(), std::move(out), {x, bias}, "add_row_bias",
                             [x, bias, rows, cols](Node& o) {
                               if (double* g = detail::grad_target(x)) {
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                               }
                               if (double* g = detail::grad_target(bias)) {
                                 for (std::size_t i = 0; i < rows; ++i) {
                                   for (std::size_t j = 0; j < cols; ++j) g[j] += o.grad[i * cols + j];
                                 }
                               }
                             });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  return bias.defined() ? add_row_bias(y, bias) : y;
}

// ---- row-wise -------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = xv.data() + i * cols;
    double* y = out.data() + i * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (std::isnan(in[j]) || in[j] == std::numeric_limits<double>::infinity()) {
        throw NumericError("softmax_rows: non-finite input at row " + std::to_string(i));
      }
      mx = std::max(mx, in[j]);
    }
    if (!std::isfinite(mx)) {
      throw NumericError("softmax_rows: row " + std::to_string(i) + " has no finite entry");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(in[j] - mx);
      z += y[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
  }
  counting::add_mul_adds(out.size());
  return detail::make_result(x.shape(), std::move(out), {x}, "softmax_rows",
                             [x, rows, cols](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t i = 0; i < rows; ++i) {
                                 const double* y = o.data.data() + i * cols;
                                 const double* dy = o.grad.data() + i * cols;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < cols; ++j) dot += y[j] * dy[j];
                                 for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += y[j] * (dy[j] - dot);
                               }
                             });
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps) {
  require_rank(x, 2, "layernorm_rows");
  const std::size_t cols = x.extent(1);
  return normalize_groups(x, gamma, beta, eps, x.extent(0), cols, 1,
                          [cols](std::size_t g) { return g * cols; },
                          "layernorm_rows");
}

Tensor channel_layernorm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps) {
  require_rank(x, 4, "channel_layernorm");
  const std::size_t c = x.extent(1);
  const std::size_t hw = x.extent(2) * x.extent(3);
  return normalize_groups(
      x, gamma, beta, eps, x.extent(0) * hw, c, hw,
      [c, hw](std::size_t g) { return (g / hw) * c * hw + g % hw; },
      "channel_layernorm");
}

Tensor l2_normalize_rows(const Tensor& x) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ss += xv[i * cols + j] * xv[i * cols + j];
    const double n = std::max(std::sqrt(ss), 1e-12);
    (*norms)[i] = n;
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] / n;
  }
  counting::add_mul_adds(2 * out.size());
  return detail::make_result(x.shape(), std::move(out), {x}, "l2_normalize_rows",
                             [x, rows, cols, norms](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t i = 0; i < rows; ++i) {
                                 const double* y = o.data.data() + i * cols;
                                 const double* dy = o.grad.data() + i * cols;
                                 const double n = (*norms)[i];
                                 if (n <= 1e-12) {
                                   for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += dy[j] / n;
                                   continue;
                                 }
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < cols; ++j) dot += y[j] * dy[j];
                                 for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += (dy[j] - y[j] * dot) / n;
                               }
                             });
}

// ---- layout ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result(std::move(shape), std::move(out), {x}, "reshape",
                             [x](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                             });
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const std::size_t r = x.rank();
  if (order.size() != r) {
    throw DimensionError("permute: order length does not match shape " + to_string(x.shape()));
  }
  std::array<bool, 4> used{};
  for (auto a : order) {
    if (a >= r || used[a]) throw DimensionError("permute: invalid axis order");
    used[a] = true;
  }
  // Pad to rank 4 with leading unit axes.
  std::array<std::size_t, 4> in_ext{1, 1, 1, 1}, out_ext{1, 1, 1, 1};
  std::array<std::size_t, 4> perm{0, 1, 2, 3};
  const std::size_t off = 4 - r;
  for (std::size_t i = 0; i < r; ++i) {
    in_ext[off + i] = x.extent(i);
    perm[off + i] = off + order[i];
  }
  std::array<std::size_t, 4> in_stride{};
  in_stride[3] = 1;
  for (int i = 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in_ext[i + 1];
  std::array<std::size_t, 4> src_stride{};
  Shape out_shape(r);
  for (std::size_t i = 0; i < 4; ++i) {
    out_ext[i] = in_ext[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = out_ext[off + i];

  auto index_map = std::make_shared<std::vector<std::size_t>>(x.size());
  std::size_t k = 0;
  for (std::size_t a = 0; a < out_ext[0]; ++a)
    for (std::size_t b = 0; b < out_ext[1]; ++b)
      for (std::size_t c = 0; c < out_ext[2]; ++c)
        for (std::size_t d = 0; d < out_ext[3]; ++d)
          (*index_map)[k++] = a * src_stride[0] + b * src_stride[1] +
                              c * src_stride[2] + d * src_stride[3];
  const auto xv = x.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*index_map)[i]];
  return detail::make_result(std::move(out_shape), std::move(out), {x}, "permute",
                             [x, index_map](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*index_map)[i]] += o.grad[i];
                             });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  if (axis >= x.rank() || start + length > x.extent(axis) || length == 0) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on axis " +
                         std::to_string(axis) + " of " + to_string(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto xv = x.values();
  std::vector<double> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.data() + (o * s.mid + start) * s.inner, length * s.inner,
                out.data() + o * length * s.inner);
  }
  return detail::make_result(std::move(out_shape), std::move(out), {x}, "slice",
                             [x, s, start, length](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t b = 0; b < s.outer; ++b) {
                                 double* dst = g + (b * s.mid + start) * s.inner;
                                 const double* src = o.grad.data() + b * length * s.inner;
                                 for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
                               }
                             });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + to_string(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.extent(i) != ref[i]) {
        throw DimensionError("concat: shape " + to_string(p.shape()) +
                             " incompatible with " + to_string(ref) + " on axis " +
                             std::to_string(axis));
      }
    }
    total += p.extent(axis);
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.extent(axis);
    const auto pv = p.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.data() + o * len * s.inner, len * s.inner,
                  out.data() + (o * s.mid + offset) * s.inner);
    }
    offset += len;
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts, "concat",
                             [parts, s, axis](Node& o) {
                               std::size_t offset = 0;
                               for (const auto& p : parts) {
                                 const std::size_t len = p.extent(axis);
                                 if (double* g = detail::grad_target(p)) {
                                   for (std::size_t b = 0; b < s.outer; ++b) {
                                     const double* src = o.grad.data() + (b * s.mid + offset) * s.inner;
                                     double* dst = g + b * len * s.inner;
                                     for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                                   }
                                 }
                                 offset += len;
                               }
                             });
}

// ---- spatial ---------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride,
              std::size_t pad) {
  return conv2d(x, kernel, Tensor{}, Conv2dOptions{stride, pad, 1});
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              Conv2dOptions opt) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d kernel");
  if (kernel.extent(1) != x.extent(1)) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) +
                         " expects " + std::to_string(kernel.extent(1)) +
                         " input channels, input is " + to_string(x.shape()));
  }
  if (opt.stride == 0 || opt.dilation == 0) throw ContractError("conv2d: stride and dilation must be positive");
  ConvGeometry g{};
  g.n = x.extent(0);
  g.c = x.extent(1);
  g.h = x.extent(2);
  g.w = x.extent(3);
  g.co = kernel.extent(0);
  g.kh = kernel.extent(2);
  g.kw = kernel.extent(3);
  g.stride = opt.stride;
  g.pad = opt.pad;
  g.dil = opt.dilation;
  const std::size_t span_h = (g.kh - 1) * g.dil + 1;
  const std::size_t span_w = (g.kw - 1) * g.dil + 1;
  if (span_h > g.h + 2 * g.pad || span_w > g.w + 2 * g.pad) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) +
                         " larger than padded input " + to_string(x.shape()) +
                         " (pad " + std::to_string(g.pad) + ")");
  }
  if (bias.defined() && bias.size() != g.co) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " for " +
                         std::to_string(g.co) + " output channels");
  }
  g.ho = (g.h + 2 * g.pad - span_h) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - span_w) / g.stride + 1;

  const auto xv = x.values();
  const auto kv = kernel.values();
  std::vector<double> out(g.n * g.co * g.out_px(), 0.0);
  std::vector<double> cols(g.pointwise() ? 0 : g.patch() * g.out_px());
  for (std::size_t b = 0; b < g.n; ++b) {
    const double* xb = xv.data() + b * g.c * g.h * g.w;
    const double* src = xb;
    if (!g.pointwise()) {
      im2col(g, xb, cols.data());
      src = cols.data();
    }
    detail::gemm_nn(kv.data(), src, out.data() + b * g.co * g.out_px(), g.co,
                    g.patch(), g.out_px());
  }
  if (bias.defined()) {
    const auto bv = bias.values();
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t o = 0; o < g.co; ++o) {
        double* p = out.data() + (b * g.co + o) * g.out_px();
        for (std::size_t i = 0; i < g.out_px(); ++i) p[i] += bv[o];
      }
    counting::add_mul_adds(out.size());
  }
  counting::add_mul_adds(g.n * g.co * g.out_px() * g.patch());
  return detail::make_result(
      {g.n, g.co, g.ho, g.wo}, std::move(out), {x, kernel, bias}, "conv2d",
      [x, kernel, bias, g](Node& o) {
        double* gx = detail::grad_target(x);
        double* gk = detail::grad_target(kernel);
        double* gb = detail::grad_target(bias);
        const auto xv = x.values();
        const auto kv = kernel.values();
        const std::size_t px = g.out_px();
        std::vector<double> cols(g.pointwise() ? 0 : g.patch() * px);
        std::vector<double> cols_t(gk != nullptr ? g.patch() * px : 0);
        std::vector<double> kt(gx != nullptr ? g.patch() * g.co : 0);
        if (gx != nullptr) detail::transpose_into(kv.data(), kt.data(), g.co, g.patch());
        std::vector<double> dcols(gx != nullptr && !g.pointwise() ? g.patch() * px : 0);
        for (std::size_t b = 0; b < g.n; ++b) {
          const double* dout = o.grad.data() + b * g.co * px;
          if (gb != nullptr) {
            for (std::size_t c = 0; c < g.co; ++c)
              for (std::size_t i = 0; i < px; ++i) gb[c] += dout[c * px + i];
          }
          const double* xb = xv.data() + b * g.c * g.h * g.w;
          if (gk != nullptr) {
            const double* src = xb;
            if (!g.pointwise()) {
              im2col(g, xb, cols.data());
              src = cols.data();
            }
            detail::transpose_into(src, cols_t.data(), g.patch(), px);
            detail::gemm_nn(dout, cols_t.data(), gk, g.co, px, g.patch());
          }
          if (gx != nullptr) {
            double* gxb = gx + b * g.c * g.h * g.w;
            if (g.pointwise()) {
              detail::gemm_nn(kt.data(), dout, gxb, g.patch(), g.co, px);
            } else {
              std::fill(dcols.begin(), dcols.end(), 0.0);
              detail::gemm_nn(kt.data(), dout, dcols.data(), g.patch(), g.co, px);
              col2im_add(g, dcols.data(), gxb);
            }
          }
        }
      });
}

Tensor pad2d(const Tensor& x, std::size_t top, std::size_t bottom,
             std::size_t left, std::size_t right, PadMode mode) {
  require_rank(x, 4, "pad2d");
  const std::size_t nc = x.extent(0) * x.extent(1);
  const std::size_t h = x.extent(2), w = x.extent(3);
  if (h == 0 || w == 0) throw DimensionError("pad2d: empty spatial extent");
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  // Source index per output pixel; npos for zero fill.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  auto src = std::make_shared<std::vector<std::size_t>>(oh * ow, npos);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xq = 0; xq < ow; ++xq) {
      const auto sy = static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(top);
      const auto sx = static_cast<std::ptrdiff_t>(xq) - static_cast<std::ptrdiff_t>(left);
      const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                          sx < static_cast<std::ptrdiff_t>(w);
      if (inside) {
        (*src)[y * ow + xq] = static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx);
      } else if (mode != PadMode::zero) {
        const auto fold = [mode](std::ptrdiff_t i, std::ptrdiff_t n) {
          if (mode == PadMode::reflect && n > 1) {
            const std::ptrdiff_t period = 2 * (n - 1);
            i = ((i % period) + period) % period;
            return i < n ? i : period - i;
          }
          return std::clamp<std::ptrdiff_t>(i, 0, n - 1);
        };
        const auto cy = fold(sy, static_cast<std::ptrdiff_t>(h));
        const auto cx = fold(sx, static_cast<std::ptrdiff_t>(w));
        (*src)[y * ow + xq] = static_cast<std::size_t>(cy) * w + static_cast<std::size_t>(cx);
      }
    }
  }
  const auto xv = x.values();
  std::vector<double> out(nc * oh * ow, 0.0);
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t i = 0; i < oh * ow; ++i) {
      if ((*src)[i] != npos) out[p * oh * ow + i] = xv[p * h * w + (*src)[i]];
    }
  }
  return detail::make_result({x.extent(0), x.extent(1), oh, ow}, std::move(out), {x},
                             "pad2d", [x, src, nc, h, w, oh, ow](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t p = 0; p < nc; ++p) {
                                 for (std::size_t i = 0; i < oh * ow; ++i) {
                                   if ((*src)[i] != npos) g[p * h * w + (*src)[i]] += o.grad[p * oh * ow + i];
                                 }
                               }
                             });
}

Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t nc = x.extent(0) * x.extent(1);
  const std::size_t h = x.extent(2), w = x.extent(3);
  if (kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0) {
    throw DimensionError("avg_pool2d: window " + std::to_string(kh) + "x" +
                         std::to_string(kw) + " does not tile " + to_string(x.shape()));
  }
  const std::size_t oh = h / kh, ow = w / kw;
  const double inv = 1.0 / static_cast<double>(kh * kw);
  const auto xv = x.values();
  std::vector<double> out(nc * oh * ow, 0.0);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xq = 0; xq < w; ++xq)
        out[(p * oh + y / kh) * ow + xq / kw] += xv[(p * h + y) * w + xq];
  const double count = static_cast<double>(kh * kw);
  for (auto& v : out) v /= count;
  counting::add_mul_adds(x.size());
  return detail::make_result({x.extent(0), x.extent(1), oh, ow}, std::move(out), {x},
                             "avg_pool2d", [x, nc, h, w, kh, kw, oh, ow, inv](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t p = 0; p < nc; ++p)
                                 for (std::size_t y = 0; y < h; ++y)
                                   for (std::size_t xq = 0; xq < w; ++xq)
                                     g[(p * h + y) * w + xq] += inv * o.grad[(p * oh + y / kh) * ow + xq / kw];
                             });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  return avg_pool2d(x, x.extent(2), x.extent(3));
}

Tensor broadcast_spatial(const Tensor& x, std::size_t h, std::size_t w) {
  require_rank(x, 4, "broadcast_spatial");
  if (x.extent(2) != 1 || x.extent(3) != 1) {
    throw DimensionError("broadcast_spatial: expected [N,C,1,1], got " + to_string(x.shape()));
  }
  const std::size_t nc = x.extent(0) * x.extent(1);
  const auto xv = x.values();
  std::vector<double> out(nc * h * w);
  for (std::size_t p = 0; p < nc; ++p) std::fill_n(out.data() + p * h * w, h * w, xv[p]);
  return detail::make_result({x.extent(0), x.extent(1), h, w}, std::move(out), {x},
                             "broadcast_spatial", [x, nc, h, w](Node& o) {
                               double* g = detail::grad_target(x);
                               for (std::size_t p = 0; p < nc; ++p) {
                                 double s = 0.0;
                                 for (std::size_t i = 0; i < h * w; ++i) s += o.grad[p * h * w + i];
                                 g[p] += s;
                               }
                             });
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 4, "resize_bilinear");
  const std::size_t nc = x.extent(0) * x.extent(1);
  const std::size_t h = x.extent(2), w = x.extent(3);
  if (h == 0 || w == 0 || out_h == 0 || out_w == 0) {
    throw DimensionError("resize_bilinear: empty extent");
  }
  auto ty = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(w, out_w));
  const auto xv = x.values();
  std::vector<double> out(nc * out_h * out_w);
  for (std::size_t p = 0; p < nc; ++p) {
    const double* src = xv.data() + p * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = (*ty)[y];
      for (std::size_t xq = 0; xq < out_w; ++xq) {
        const auto& b = (*tx)[xq];
        const double top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        out[(p * out_h + y) * out_w + xq] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  counting::add_mul_adds(4 * out.size());
  return detail::make_result(
      {x.extent(0), x.extent(1), out_h, out_w}, std::move(out), {x}, "resize_bilinear",
      [x, ty, tx, nc, h, w, out_h, out_w](Node& o) {
        double* g = detail::grad_target(x);
        for (std::size_t p = 0; p < nc; ++p) {
          double* dst = g + p * h * w;
          for (std::size_t y = 0; y < out_h; ++y) {
            const auto& a = (*ty)[y];
            for (std::size_t xq = 0; xq < out_w; ++xq) {
              const auto& b = (*tx)[xq];
              const double d = o.grad[(p * out_h + y) * out_w + xq];
              dst[a.i0 * w + b.i0] += d * (1 - a.w1) * (1 - b.w1);
              dst[a.i0 * w + b.i1] += d * (1 - a.w1) * b.w1;
              dst[a.i1 * w + b.i0] += d * a.w1 * (1 - b.w1);
              dst[a.i1 * w + b.i1] += d * a.w1 * b.w1;
            }
          }
        }
      });
}

}  // namespace gpw::nd
