#pragma once

// Dense rank<=4 tensors of doubles with tape-based reverse-mode
// differentiation. Every op records a closure on its result node; backward()
// replays them in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gpw/counter.hpp"
#include "gpw/errors.hpp"

namespace gpw::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  Node(Shape s, std::vector<double> d);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> values() const { return node_->data; }
  // In-place mutation of stored values; bypasses the tape.
  std::span<double> mutable_values() { return node_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zeros when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // New leaf holding a copy of the values, outside any graph.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Thread-local switch that stops ops from recording onto the tape.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Populates .grad of every reachable tensor with requires_grad. Leaf
// gradients accumulate across calls; interior gradients are recomputed.
void backward(const Tensor& loss);

namespace detail {
// Builds an op result. `backward` runs only if some input requires grad and
// grad mode is on; it reads out.grad and accumulates into inputs.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, const char* op,
                   std::function<void(Node& out)> backward);
// Accumulation target for an input, or nullptr if it takes no gradient.
double* grad_target(const Tensor& t);

void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n);
void transpose_into(const double* src, double* dst, std::size_t rows,
                    std::size_t cols);
}  // namespace detail

// ---- elementwise -----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// sum_t coeffs[t] * x^t per element.
Tensor polynomial(const Tensor& x, std::span<const double> coeffs);

// ---- reductions ------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [N,C,H,W] -> [1,C]: mean over N, H and W per channel.
Tensor channel_mean(const Tensor& x);

// ---- linear algebra --------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
// x[L,d] + b[d] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// x[L,p]·w[p,q] (+ b[q]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// ---- row-wise -------------------------------------------------------------
Tensor softmax_rows(const Tensor& x);
Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x);

// ---- layout ----------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// ---- spatial (NCHW) ---------------------------------------------------------
struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
};
// Cross-correlation; kernel [C',C,kh,kw], optional bias [C'].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias = {},
              Conv2dOptions opt = {});
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride,
              std::size_t pad);

enum class PadMode { zero, replicate, reflect };
Tensor pad2d(const Tensor& x, std::size_t top, std::size_t bottom,
             std::size_t left, std::size_t right, PadMode mode = PadMode::zero);
// Non-overlapping kh×kw mean pooling.
Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw);
// [N,C,H,W] -> [N,C,1,1]
Tensor global_avg_pool(const Tensor& x);
// [N,C,1,1] -> [N,C,H,W]
Tensor broadcast_spatial(const Tensor& x, std::size_t h, std::size_t w);
// Half-pixel-centre bilinear resampling.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
// Per-pixel layer norm across channels with per-channel affine.
Tensor channel_layernorm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5);
// x * mask elementwise, mask constant (no gradient).
Tensor mul_constant(const Tensor& x, std::span<const double> mask);

}  // namespace gpw::nd
