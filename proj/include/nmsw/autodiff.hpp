#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmsw::ad {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;

/// Gives a backward rule mutable access to the gradient buffers of the inputs
/// it was recorded with. Inputs that do not require gradients yield an empty
/// span, so rules can skip work with `if (auto g = grads[i]; !g.empty())`.
class GradSink {
 public:
  explicit GradSink(std::span<const std::shared_ptr<Node>> parents) : parents_(parents) {}
  std::span<double> operator[](std::size_t i) const;

 private:
  std::span<const std::shared_ptr<Node>> parents_;
};

/// Backward rule: receives d(root)/d(output) and accumulates into the inputs.
using BackwardFn = std::function<void(std::span<const double> grad_out, const GradSink& grads)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;  // interior node whose graph has been backpropagated
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  const char* op = "leaf";
};

/// Dense row-major array that records the operations applied to it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int dim(int i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node().value.size()); }
  int rank() const { return static_cast<int>(node().shape.size()); }

  std::span<const double> values() const { return node().value; }
  /// Mutable storage; only meaningful for leaves (parameter updates, inputs).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::int64_t i) const { return node().value[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().is_leaf; }
  /// Gradient accumulated by backward(); empty if none reached this tensor.
  std::span<const double> grad() const { return node().grad; }
  void zero_grad() { node().grad.clear(); }

  /// Same values, no graph history.
  Tensor detach() const;

  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  Node& node() const;
  std::shared_ptr<Node> node_;

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, BackwardFn, const char*);
};

/// Records a new node. `fn` is kept only if grad mode is on and some input
/// requires gradients; otherwise the result is a constant.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs, BackwardFn fn,
                   const char* op);

bool grad_enabled();

/// Disables graph recording for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Topologically ordered view of the graph below a root.
class Tape {
 public:
  static Tape record(const Tensor& root);
  const std::vector<Node*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node*> order_;  // parents before children
};

/// Reverse-mode sweep from a one-element tensor. Interior nodes are released
/// afterwards; a second call on the same graph throws.
void backward(const Tensor& root);

// --- elementwise -----------------------------------------------------------
// Binary ops accept equal shapes or a one-element operand on either side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
/// log(x) for x > 0; -inf with zero gradient for x <= 0.
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
/// Replaces masked entries by `value`; those entries receive no gradient.
Tensor masked_fill(const Tensor& a, const std::vector<bool>& mask, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double b, const Tensor& a) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// --- shape / reductions ----------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<int>& axes);
Tensor mean(const Tensor& a, const std::vector<int>& axes);
/// Concatenation along axis 0.
Tensor concat0(const std::vector<Tensor>& parts);
/// Element `i` of a flattened tensor as a one-element tensor.
Tensor pick(const Tensor& a, std::int64_t i);

/// Contracts the leading axis: out[...] = sum_n z[n] * x[n, ...].
Tensor matvec(const Tensor& z, const Tensor& x);

// --- nn ----------------------------------------------------------------------
/// Temperature softmax of a 1-D tensor; -inf entries map to exactly 0.
/// Throws "empty support" if every entry is -inf.
Tensor softmax_tau(const Tensor& logits, double tau);
/// Softmax over axis 0 of a [C, ...] tensor, independently per position.
Tensor softmax_channels(const Tensor& logits);

/// 3-D cross-correlation. input [Cin,H,W,D], weight [Cout,Cin,k,k,k],
/// optional bias [Cout]. Output extent floor((n + 2p - k) / s) + 1.
Tensor conv3(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);
Tensor conv3(const Tensor& input, const Tensor& weight, int stride, int padding);

/// Trilinear resize of [C,H,W,D] (align-corners-false).
Tensor resize_trilinear(const Tensor& x, const std::array<int, 3>& target);
/// Adaptive average pooling of [C,H,W,D] onto `target` bins per axis.
Tensor adaptive_avg_pool3(const Tensor& x, const std::array<int, 3>& target);

/// Multiply-accumulates performed by conv3 forward passes on this thread.
std::uint64_t conv_mac_counter();
void reset_conv_mac_counter();

std::int64_t argmax(std::span<const double> v);

// --- verification ------------------------------------------------------------
/// Central-difference check of d f / d x at `x0`. f must be deterministic.
/// Returns max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const std::vector<double>& x0,
                         const Shape& shape, double eps = 1e-4);

}  // namespace nmsw::ad
