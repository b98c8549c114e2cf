#include "nmsw/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "nmsw/detail/interp.hpp"

namespace nmsw::ad {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_conv_macs = 0;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int v : s) n *= v;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::span<double> GradSink::operator[](std::size_t i) const {
  Node& p = *parents_[i];
  if (!p.requires_grad) return {};
  if (p.grad.empty()) p.grad.assign(p.value.size(), 0.0);
  return p.grad;
}

// --- Tensor -----------------------------------------------------------------

Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (ad::numel(shape) != static_cast<std::int64_t>(values.size()))
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const auto n = ad::numel(shape);
  return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

int Tensor::dim(int i) const {
  const auto& s = node().shape;
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size())) throw std::out_of_range("tensor dim index");
  return s[static_cast<std::size_t>(i)];
}

std::span<double> Tensor::mutable_values() { return node().value; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on a tensor with " + std::to_string(numel()) + " elements");
  return node().value[0];
}

Tensor Tensor::detach() const { return from(node().shape, node().value, false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs, BackwardFn fn,
                   const char* op) {
  Tensor out = Tensor::from(std::move(shape), std::move(value), false);
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  Node& n = *out.node_;
  n.requires_grad = true;
  n.is_leaf = false;
  n.op = op;
  n.backward = std::move(fn);
  n.parents.reserve(inputs.size());
  for (auto& t : inputs) n.parents.push_back(t.node_);
  return out;
}

// --- tape / backward ----------------------------------------------------------

Tape Tape::record(const Tensor& root) {
  Tape tape;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; parents are emitted before their children.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node_ptr().get(), 0);
  seen.insert(root.node_ptr().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) throw std::logic_error("backward through a graph that was already backpropagated");
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& root) {
  if (!root.defined()) throw std::invalid_argument("backward on an undefined tensor");
  if (root.numel() != 1) throw std::invalid_argument("backward: root must be a scalar, got " + shape_str(root.shape()));
  if (root.node_ptr()->consumed) throw std::logic_error("backward called twice on the same graph");
  if (!root.requires_grad()) throw std::invalid_argument("backward: root does not depend on any requires_grad leaf");
  Tape tape = Tape::record(root);
  Node& r = *root.node_ptr();
  if (r.grad.empty()) r.grad.assign(1, 0.0);
  r.grad[0] += 1.0;
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf || n->grad.empty() || !n->backward) continue;
    n->backward(n->grad, GradSink(n->parents));
  }
  for (Node* n : order) {
    if (n->is_leaf) continue;
    n->consumed = true;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

// --- elementwise ----------------------------------------------------------------

namespace {

enum class Bcast { same, scalar_b, scalar_a };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.numel() == 1) return Bcast::scalar_b;
  if (a.numel() == 1) return Bcast::scalar_a;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
}

// f(x, y) -> value; dfx/dfy(x, y, out) -> partial derivatives.
template <class F, class Dx, class Dy>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, Dx dfx, Dy dfy) {
  const Bcast kind = broadcast_kind(a, b, op);
  const Shape shape = kind == Bcast::scalar_a ? b.shape() : a.shape();
  const auto n = static_cast<std::size_t>(numel(shape));
  auto av = a.values();
  auto bv = b.values();
  auto ai = [kind](std::size_t i) { return kind == Bcast::scalar_a ? 0 : i; };
  auto bi = [kind](std::size_t i) { return kind == Bcast::scalar_b ? 0 : i; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ai(i)], bv[bi(i)]);
  auto fn = [a, b, kind, ai, bi, dfx, dfy](std::span<const double> g, const GradSink& grads) {
    auto av = a.values();
    auto bv = b.values();
    if (auto ga = grads[0]; !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[ai(i)] += g[i] * dfx(av[ai(i)], bv[bi(i)]);
    if (auto gb = grads[1]; !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[bi(i)] += g[i] * dfy(av[ai(i)], bv[bi(i)]);
    (void)kind;
  };
  return make_result(shape, std::move(out), {a, b}, fn, op);
}

// f(x) -> value; df(x, y) -> derivative given input x and output y.
template <class F, class D>
Tensor unary(const Tensor& a, const char* op, F f, D df) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  if (!g_grad_enabled || !a.requires_grad()) return Tensor::from(a.shape(), std::move(out));
  auto fn = [a, df, out](std::span<const double> g, const GradSink& grads) {
    auto ga = grads[0];
    auto av = a.values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(av[i], out[i]);
  };
  return make_result(a.shape(), out, {a}, fn, op);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add(const Tensor& a, double b) {
  return unary(
      a, "add_scalar", [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double b) {
  return unary(
      a, "mul_scalar", [b](double x) { return x * b; }, [b](double, double) { return b; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return x > 0 ? std::log(x) : kNegInf; },
      [](double x, double) { return x > 0 ? 1.0 / x : 0.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(
      a, "clamp_min", [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor masked_fill(const Tensor& a, const std::vector<bool>& mask, double value) {
  if (static_cast<std::int64_t>(mask.size()) != a.numel()) throw std::invalid_argument("masked_fill: mask size");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  auto fn = [mask](std::span<const double> g, const GradSink& grads) {
    auto ga = grads[0];
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!mask[i]) ga[i] += g[i];
  };
  return make_result(a.shape(), std::move(out), {a}, fn, "masked_fill");
}

// --- shape / reductions -----------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto fn = [](std::span<const double> g, const GradSink& grads) {
    auto ga = grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  };
  return make_result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()), {a}, fn,
                     "reshape");
}

Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.values()) s += v;
  auto fn = [](std::span<const double> g, const GradSink& grads) {
    auto ga = grads[0];
    for (auto& x : ga) x += g[0];
  };
  return make_result({1}, {s}, {a}, fn, "sum");
}

Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, const std::vector<int>& axes_in) {
  const int r = a.rank();
  std::vector<bool> reduce(static_cast<std::size_t>(r), false);
  for (int ax : axes_in) {
    const int x = ax < 0 ? ax + r : ax;
    if (x < 0 || x >= r) throw std::invalid_argument("sum: bad axis " + std::to_string(ax) + " for rank " + std::to_string(r));
    reduce[static_cast<std::size_t>(x)] = true;
  }
  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (!reduce[static_cast<std::size_t>(i)]) out_shape.push_back(a.shape()[static_cast<std::size_t>(i)]);
  if (out_shape.empty()) out_shape = {1};

  // out_index[i] = flat output position of input element i
  const auto n = static_cast<std::size_t>(a.numel());
  auto out_index = std::make_shared<std::vector<std::int64_t>>(n);
  std::vector<int> idx(static_cast<std::size_t>(r), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::int64_t o = 0;
    for (int d = 0; d < r; ++d)
      if (!reduce[static_cast<std::size_t>(d)]) o = o * a.shape()[static_cast<std::size_t>(d)] + idx[static_cast<std::size_t>(d)];
    (*out_index)[i] = o;
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < a.shape()[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)), 0.0);
  auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[static_cast<std::size_t>((*out_index)[i])] += av[i];
  auto fn = [out_index](std::span<const double> g, const GradSink& grads) {
    auto ga = grads[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[static_cast<std::size_t>((*out_index)[i])];
  };
  return make_result(out_shape, std::move(out), {a}, fn, "sum_axes");
}

Tensor mean(const Tensor& a, const std::vector<int>& axes) {
  Tensor s = sum(a, axes);
  return mul(s, static_cast<double>(s.numel()) / static_cast<double>(a.numel()));
}

Tensor concat0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat0: no inputs");
  Shape shape = parts[0].shape();
  int lead = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(shape.size()) || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      throw std::invalid_argument("concat0: trailing shapes differ");
    lead += p.dim(0);
  }
  shape[0] = lead;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(numel(shape)));
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  auto fn = [offsets](std::span<const double> g, const GradSink& grads) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      auto gk = grads[k];
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[offsets[k] + i];
    }
  };
  return make_result(shape, std::move(out), parts, fn, "concat0");
}

Tensor pick(const Tensor& a, std::int64_t i) {
  if (i < 0 || i >= a.numel()) throw std::out_of_range("pick: index out of range");
  auto fn = [i](std::span<const double> g, const GradSink& grads) {
    auto ga = grads[0];
    ga[static_cast<std::size_t>(i)] += g[0];
  };
  return make_result({1}, {a[i]}, {a}, fn, "pick");
}

Tensor matvec(const Tensor& z, const Tensor& x) {
  if (z.rank() != 1 || x.rank() < 1 || x.dim(0) != z.dim(0))
    throw std::invalid_argument("matvec: leading axis mismatch " + shape_str(z.shape()) + " vs " + shape_str(x.shape()));
  const int n = z.dim(0);
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  if (out_shape.empty()) out_shape = {1};
  const auto m = static_cast<std::size_t>(numel(out_shape));
  std::vector<double> out(m, 0.0);
  auto zv = z.values();
  auto xv = x.values();
  for (int k = 0; k < n; ++k) {
    const double w = zv[static_cast<std::size_t>(k)];
    if (w == 0.0) continue;
    const double* xk = xv.data() + static_cast<std::size_t>(k) * m;
    for (std::size_t i = 0; i < m; ++i) out[i] += w * xk[i];
  }
  auto fn = [z, x, n, m](std::span<const double> g, const GradSink& grads) {
    auto zv = z.values();
    auto xv = x.values();
    if (auto gz = grads[0]; !gz.empty())
      for (int k = 0; k < n; ++k) {
        const double* xk = xv.data() + static_cast<std::size_t>(k) * m;
        double s = 0;
        for (std::size_t i = 0; i < m; ++i) s += g[i] * xk[i];
        gz[static_cast<std::size_t>(k)] += s;
      }
    if (auto gx = grads[1]; !gx.empty())
      for (int k = 0; k < n; ++k) {
        const double w = zv[static_cast<std::size_t>(k)];
        double* gk = gx.data() + static_cast<std::size_t>(k) * m;
        for (std::size_t i = 0; i < m; ++i) gk[i] += w * g[i];
      }
  };
  return make_result(out_shape, std::move(out), {z, x}, fn, "matvec");
}

// --- nn -------------------------------------------------------------------------

Tensor softmax_tau(const Tensor& logits, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("softmax_tau: tau must be positive");
  auto xv = logits.values();
  double mx = kNegInf;
  for (double v : xv) mx = std::max(mx, v);
  if (mx == kNegInf) throw std::invalid_argument("softmax_tau: empty support");
  std::vector<double> y(xv.size());
  double z = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    y[i] = xv[i] == kNegInf ? 0.0 : std::exp((xv[i] - mx) / tau);
    z += y[i];
  }
  for (auto& v : y) v /= z;
  if (!g_grad_enabled || !logits.requires_grad()) return Tensor::from(logits.shape(), std::move(y));
  auto fn = [y, tau](std::span<const double> g, const GradSink& grads) {
    auto gx = grads[0];
    double dot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (g[i] - dot) / tau;
  };
  return make_result(logits.shape(), y, {logits}, fn, "softmax_tau");
}

Tensor softmax_channels(const Tensor& logits) {
  if (logits.rank() < 2) throw std::invalid_argument("softmax_channels: need [C, ...]");
  const int c = logits.dim(0);
  const auto m = static_cast<std::size_t>(logits.numel() / c);
  auto xv = logits.values();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = kNegInf;
    for (int k = 0; k < c; ++k) mx = std::max(mx, xv[k * m + i]);
    double z = 0;
    for (int k = 0; k < c; ++k) {
      y[k * m + i] = std::exp(xv[k * m + i] - mx);
      z += y[k * m + i];
    }
    for (int k = 0; k < c; ++k) y[k * m + i] /= z;
  }
  if (!g_grad_enabled || !logits.requires_grad()) return Tensor::from(logits.shape(), std::move(y));
  auto fn = [y, c, m](std::span<const double> g, const GradSink& grads) {
    auto gx = grads[0];
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0;
      for (int k = 0; k < c; ++k) dot += g[k * m + i] * y[k * m + i];
      for (int k = 0; k < c; ++k) gx[k * m + i] += y[k * m + i] * (g[k * m + i] - dot);
    }
  };
  return make_result(logits.shape(), y, {logits}, fn, "softmax_channels");
}

// --- conv3 ----------------------------------------------------------------------

namespace {

struct ConvGeom {
  int cin, cout, k, stride, pad;
  std::array<int, 3> in, out;
  std::int64_t in_vox() const { return static_cast<std::int64_t>(in[0]) * in[1] * in[2]; }
  std::int64_t out_vox() const { return static_cast<std::int64_t>(out[0]) * out[1] * out[2]; }
  int rows() const { return cin * k * k * k; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Valid output range [lo, hi) along one axis for kernel offset `kk`.
inline void valid_range(int out_len, int in_len, int kk, int s, int p, int& lo, int& hi) {
  // need 0 <= o*s - p + kk < in_len
  lo = 0;
  while (lo < out_len && lo * s - p + kk < 0) ++lo;
  hi = out_len;
  while (hi > lo && (hi - 1) * s - p + kk >= in_len) --hi;
}

// Stride-1 convolution as one GEMM per kernel offset over a zero-padded copy
// of the input: output corner i reads padded voxel i + offset(kh, kw, kd), so
// every offset is a plain [Cout x Cin] x [Cin x L] product on a shifted view.
struct ShiftPlan {
  std::array<int, 3> padded;
  std::int64_t p_vox, span;  // padded voxels; corners computed per channel
  std::vector<std::int64_t> offsets;
};

ShiftPlan shift_plan(const ConvGeom& g) {
  ShiftPlan s;
  for (int a = 0; a < 3; ++a) s.padded[a] = g.in[a] + 2 * g.pad;
  s.p_vox = static_cast<std::int64_t>(s.padded[0]) * s.padded[1] * s.padded[2];
  s.span = ((static_cast<std::int64_t>(g.out[0]) - 1) * s.padded[1] + (g.out[1] - 1)) * s.padded[2] + g.out[2];
  for (int kh = 0; kh < g.k; ++kh)
    for (int kw = 0; kw < g.k; ++kw)
      for (int kd = 0; kd < g.k; ++kd)
        s.offsets.push_back((static_cast<std::int64_t>(kh) * s.padded[1] + kw) * s.padded[2] + kd);
  return s;
}

std::vector<double> pad_input(const double* in, const ConvGeom& g, const ShiftPlan& s) {
  std::vector<double> out(static_cast<std::size_t>(g.cin * s.p_vox), 0.0);
  for (int c = 0; c < g.cin; ++c)
    for (int h = 0; h < g.in[0]; ++h)
      for (int w = 0; w < g.in[1]; ++w) {
        const double* src = in + c * g.in_vox() + (static_cast<std::int64_t>(h) * g.in[1] + w) * g.in[2];
        double* dst = out.data() + c * s.p_vox +
                      (static_cast<std::int64_t>(h + g.pad) * s.padded[1] + w + g.pad) * s.padded[2] + g.pad;
        std::copy(src, src + g.in[2], dst);
      }
  return out;
}

// Weights regrouped as [k^3][Cout][Cin].
std::vector<double> regroup_weights(const double* w, const ConvGeom& g) {
  const int k3 = g.k * g.k * g.k;
  std::vector<double> r(static_cast<std::size_t>(k3 * g.cout * g.cin));
  for (int co = 0; co < g.cout; ++co)
    for (int ci = 0; ci < g.cin; ++ci)
      for (int o = 0; o < k3; ++o) r[(static_cast<std::size_t>(o) * g.cout + co) * g.cin + ci] = w[(co * g.cin + ci) * k3 + o];
  return r;
}

template <class F>
void for_corners(const ConvGeom& g, const ShiftPlan& s, F&& body) {
  std::int64_t ov = 0;
  for (int h = 0; h < g.out[0]; ++h)
    for (int w = 0; w < g.out[1]; ++w) {
      const std::int64_t row = (static_cast<std::int64_t>(h) * s.padded[1] + w) * s.padded[2];
      for (int d = 0; d < g.out[2]; ++d, ++ov) body(ov, row + d);
    }
}

void shift_forward(const double* in, const double* w, const ConvGeom& g, double* out) {
  const auto s = shift_plan(g);
  const auto inp = pad_input(in, g, s);
  const auto wr = regroup_weights(w, g);
  std::vector<double> outp(static_cast<std::size_t>(g.cout * s.span), 0.0);
  for (std::size_t o = 0; o < s.offsets.size(); ++o)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, g.cout, static_cast<int>(s.span), g.cin, 1.0,
                wr.data() + o * g.cout * g.cin, g.cin, inp.data() + s.offsets[o], static_cast<int>(s.p_vox), 1.0,
                outp.data(), static_cast<int>(s.span));
  const auto ovx = g.out_vox();
  for (int co = 0; co < g.cout; ++co)
    for_corners(g, s, [&](std::int64_t v, std::int64_t i) { out[co * ovx + v] += outp[static_cast<std::size_t>(co * s.span + i)]; });
}

void shift_backward(const double* in, const double* w, const ConvGeom& g, std::span<const double> gout,
                    std::span<double> gin, std::span<double> gw) {
  const auto s = shift_plan(g);
  const auto ovx = g.out_vox();
  std::vector<double> goutp(static_cast<std::size_t>(g.cout * s.span), 0.0);
  for (int co = 0; co < g.cout; ++co)
    for_corners(g, s, [&](std::int64_t v, std::int64_t i) {
      goutp[static_cast<std::size_t>(co * s.span + i)] = gout[static_cast<std::size_t>(co * ovx + v)];
    });
  const int k3 = g.k * g.k * g.k;
  if (!gw.empty()) {
    const auto inp = pad_input(in, g, s);
    std::vector<double> gwr(static_cast<std::size_t>(k3 * g.cout * g.cin), 0.0);
    for (std::size_t o = 0; o < s.offsets.size(); ++o)
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, g.cout, g.cin, static_cast<int>(s.span), 1.0, goutp.data(),
                  static_cast<int>(s.span), inp.data() + s.offsets[o], static_cast<int>(s.p_vox), 0.0,
                  gwr.data() + o * g.cout * g.cin, g.cin);
    for (int co = 0; co < g.cout; ++co)
      for (int ci = 0; ci < g.cin; ++ci)
        for (int o = 0; o < k3; ++o)
          gw[static_cast<std::size_t>((co * g.cin + ci) * k3 + o)] += gwr[(static_cast<std::size_t>(o) * g.cout + co) * g.cin + ci];
  }
  if (!gin.empty()) {
    const auto wr = regroup_weights(w, g);
    std::vector<double> ginp(static_cast<std::size_t>(g.cin * s.p_vox), 0.0);
    for (std::size_t o = 0; o < s.offsets.size(); ++o)
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, g.cin, static_cast<int>(s.span), g.cout, 1.0,
                  wr.data() + o * g.cout * g.cin, g.cin, goutp.data(), static_cast<int>(s.span), 1.0,
                  ginp.data() + s.offsets[o], static_cast<int>(s.p_vox));
    for (int c = 0; c < g.cin; ++c)
      for (int h = 0; h < g.in[0]; ++h)
        for (int ww = 0; ww < g.in[1]; ++ww) {
          const double* src = ginp.data() + c * s.p_vox +
                              (static_cast<std::int64_t>(h + g.pad) * s.padded[1] + ww + g.pad) * s.padded[2] + g.pad;
          double* dst = gin.data() + c * g.in_vox() + (static_cast<std::int64_t>(h) * g.in[1] + ww) * g.in[2];
          for (int d = 0; d < g.in[2]; ++d) dst[d] += src[d];
        }
  }
}

void im2col(const double* in, const ConvGeom& g, double* col) {
  const auto ov = g.out_vox();
  int row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const double* src = in + ci * g.in_vox();
    for (int kh = 0; kh < g.k; ++kh)
      for (int kw = 0; kw < g.k; ++kw)
        for (int kd = 0; kd < g.k; ++kd, ++row) {
          double* dst = col + row * ov;
          std::fill(dst, dst + ov, 0.0);
          int h0, h1, w0, w1, d0, d1;
          valid_range(g.out[0], g.in[0], kh, g.stride, g.pad, h0, h1);
          valid_range(g.out[1], g.in[1], kw, g.stride, g.pad, w0, w1);
          valid_range(g.out[2], g.in[2], kd, g.stride, g.pad, d0, d1);
          for (int oh = h0; oh < h1; ++oh) {
            const int ih = oh * g.stride - g.pad + kh;
            for (int ow = w0; ow < w1; ++ow) {
              const int iw = ow * g.stride - g.pad + kw;
              const double* s = src + (static_cast<std::int64_t>(ih) * g.in[1] + iw) * g.in[2];
              double* d = dst + (static_cast<std::int64_t>(oh) * g.out[1] + ow) * g.out[2];
              if (g.stride == 1) {
                const int off = kd - g.pad;
                for (int od = d0; od < d1; ++od) d[od] = s[od + off];
              } else {
                for (int od = d0; od < d1; ++od) d[od] = s[od * g.stride - g.pad + kd];
              }
            }
          }
        }
  }
}

void col2im(const double* col, const ConvGeom& g, double* in_grad) {
  const auto ov = g.out_vox();
  int row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    double* dst = in_grad + ci * g.in_vox();
    for (int kh = 0; kh < g.k; ++kh)
      for (int kw = 0; kw < g.k; ++kw)
        for (int kd = 0; kd < g.k; ++kd, ++row) {
          const double* src = col + row * ov;
          int h0, h1, w0, w1, d0, d1;
          valid_range(g.out[0], g.in[0], kh, g.stride, g.pad, h0, h1);
          valid_range(g.out[1], g.in[1], kw, g.stride, g.pad, w0, w1);
          valid_range(g.out[2], g.in[2], kd, g.stride, g.pad, d0, d1);
          for (int oh = h0; oh < h1; ++oh) {
            const int ih = oh * g.stride - g.pad + kh;
            for (int ow = w0; ow < w1; ++ow) {
              const int iw = ow * g.stride - g.pad + kw;
              double* d = dst + (static_cast<std::int64_t>(ih) * g.in[1] + iw) * g.in[2];
              const double* s = src + (static_cast<std::int64_t>(oh) * g.out[1] + ow) * g.out[2];
              for (int od = d0; od < d1; ++od) d[od * g.stride - g.pad + kd] += s[od];
            }
          }
        }
  }
}

}  // namespace

Tensor conv3(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  if (stride < 1) throw std::invalid_argument("conv3: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv3: negative padding");
  if (input.rank() != 4 || weight.rank() != 5)
    throw std::invalid_argument("conv3: expected input [Cin,H,W,D] and weight [Cout,Cin,k,k,k]");
  ConvGeom g{};
  g.cin = input.dim(0);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.cin || weight.dim(3) != g.k || weight.dim(4) != g.k)
    throw std::invalid_argument("conv3: weight " + shape_str(weight.shape()) + " does not match input " +
                                shape_str(input.shape()));
  if (g.k % 2 == 0) throw std::invalid_argument("conv3: kernel size must be odd");
  for (int a = 0; a < 3; ++a) {
    g.in[a] = input.dim(a + 1);
    const int span = g.in[a] + 2 * padding - g.k;
    if (span < 0) throw std::invalid_argument("conv3: kernel larger than padded input");
    g.out[a] = span / stride + 1;
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.cout)) throw std::invalid_argument("conv3: bias shape");

  const auto ov = g.out_vox();
  const int rows = g.rows();
  // With very few input channels the per-offset GEMMs are too thin; im2col wins there.
  const bool shifted = g.stride == 1 && !g.pointwise() && g.cin >= 4;
  std::vector<double> out(static_cast<std::size_t>(g.cout * ov), 0.0);
  if (has_bias)
    for (int co = 0; co < g.cout; ++co) std::fill_n(out.begin() + co * ov, ov, bias[co]);
  if (shifted) {
    shift_forward(input.values().data(), weight.values().data(), g, out.data());
  } else {
    std::vector<double> col;
    const double* colp = input.values().data();
    if (!g.pointwise()) {
      col.resize(static_cast<std::size_t>(rows * ov));
      im2col(input.values().data(), g, col.data());
      colp = col.data();
    }
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, g.cout, static_cast<int>(ov), rows, 1.0,
                weight.values().data(), rows, colp, static_cast<int>(ov), 1.0, out.data(), static_cast<int>(ov));
  }
  g_conv_macs += static_cast<std::uint64_t>(g.cout) * static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(ov);

  auto fn = [input, weight, g, has_bias, shifted](std::span<const double> gout, const GradSink& grads) {
    const auto ov = g.out_vox();
    const int rows = g.rows();
    auto gin = grads[0];
    auto gw = grads[1];
    if (has_bias)
      if (auto gb = grads[2]; !gb.empty())
        for (int co = 0; co < g.cout; ++co) {
          double s = 0;
          for (std::int64_t v = 0; v < ov; ++v) s += gout[static_cast<std::size_t>(co * ov + v)];
          gb[static_cast<std::size_t>(co)] += s;
        }
    if (shifted) {
      shift_backward(input.values().data(), weight.values().data(), g, gout, gin, gw);
      return;
    }
    std::vector<double> col;
    const double* colp = input.values().data();
    if (!gw.empty() && !g.pointwise()) {
      col.resize(static_cast<std::size_t>(rows * ov));
      im2col(input.values().data(), g, col.data());
      colp = col.data();
    }
    if (!gw.empty())
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, g.cout, rows, static_cast<int>(ov), 1.0, gout.data(),
                  static_cast<int>(ov), colp, static_cast<int>(ov), 1.0, gw.data(), rows);
    if (!gin.empty()) {
      if (g.pointwise()) {
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, rows, static_cast<int>(ov), g.cout, 1.0,
                    weight.values().data(), rows, gout.data(), static_cast<int>(ov), 1.0, gin.data(),
                    static_cast<int>(ov));
      } else {
        std::vector<double> gcol(static_cast<std::size_t>(rows * ov));
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, rows, static_cast<int>(ov), g.cout, 1.0,
                    weight.values().data(), rows, gout.data(), static_cast<int>(ov), 0.0, gcol.data(),
                    static_cast<int>(ov));
        col2im(gcol.data(), g, gin.data());
      }
    }
  };
  std::vector<Tensor> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result({g.cout, g.out[0], g.out[1], g.out[2]}, std::move(out), std::move(inputs), fn, "conv3");
}

Tensor conv3(const Tensor& input, const Tensor& weight, int stride, int padding) {
  return conv3(input, weight, Tensor(), stride, padding);
}

std::uint64_t conv_mac_counter() { return g_conv_macs; }
void reset_conv_mac_counter() { g_conv_macs = 0; }

// --- resampling / pooling -----------------------------------------------------------

Tensor resize_trilinear(const Tensor& x, const std::array<int, 3>& target) {
  if (x.rank() != 4) throw std::invalid_argument("resize_trilinear: expected [C,H,W,D]");
  const int c = x.dim(0);
  const std::array<int, 3> in{x.dim(1), x.dim(2), x.dim(3)};
  for (int t : target)
    if (t < 1) throw std::invalid_argument("resize_trilinear: target extent must be >= 1");
  std::vector<double> src(x.values().begin(), x.values().end());
  auto out = detail::resize_trilinear(src, c, in, target);
  auto fn = [c, in, target](std::span<const double> g, const GradSink& grads) {
    auto gx = grads[0];
    std::vector<double> gv(g.begin(), g.end());
    auto back = detail::resize_trilinear_adjoint(gv, c, in, target);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += back[i];
  };
  return make_result({c, target[0], target[1], target[2]}, std::move(out), {x}, fn, "resize_trilinear");
}

Tensor adaptive_avg_pool3(const Tensor& x, const std::array<int, 3>& target) {
  if (x.rank() != 4) throw std::invalid_argument("adaptive_avg_pool3: expected [C,H,W,D]");
  const int c = x.dim(0);
  const std::array<int, 3> in{x.dim(1), x.dim(2), x.dim(3)};
  std::array<std::vector<std::pair<int, int>>, 3> bins;
  for (int a = 0; a < 3; ++a) {
    if (target[a] < 1 || target[a] > in[a]) throw std::invalid_argument("adaptive_avg_pool3: bad target extent");
    for (int i = 0; i < target[a]; ++i) {
      const int lo = (i * in[a]) / target[a];
      const int hi = ((i + 1) * in[a] + target[a] - 1) / target[a];
      bins[static_cast<std::size_t>(a)].emplace_back(lo, hi);
    }
  }
  const std::int64_t in_vox = static_cast<std::int64_t>(in[0]) * in[1] * in[2];
  const std::int64_t out_vox = static_cast<std::int64_t>(target[0]) * target[1] * target[2];
  auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c * out_vox), 0.0);
  auto visit = [bins, target, in, c, in_vox, out_vox](auto&& body) {
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < target[0]; ++i)
        for (int j = 0; j < target[1]; ++j)
          for (int l = 0; l < target[2]; ++l) {
            const auto [h0, h1] = bins[0][static_cast<std::size_t>(i)];
            const auto [w0, w1] = bins[1][static_cast<std::size_t>(j)];
            const auto [d0, d1] = bins[2][static_cast<std::size_t>(l)];
            const double inv = 1.0 / ((h1 - h0) * (w1 - w0) * (d1 - d0));
            const std::int64_t o = ch * out_vox + (static_cast<std::int64_t>(i) * target[1] + j) * target[2] + l;
            for (int h = h0; h < h1; ++h)
              for (int w = w0; w < w1; ++w)
                for (int d = d0; d < d1; ++d)
                  body(o, ch * in_vox + (static_cast<std::int64_t>(h) * in[1] + w) * in[2] + d, inv);
          }
  };
  visit([&](std::int64_t o, std::int64_t s, double inv) { out[static_cast<std::size_t>(o)] += xv[static_cast<std::size_t>(s)] * inv; });
  auto fn = [visit](std::span<const double> g, const GradSink& grads) {
    auto gx = grads[0];
    visit([&](std::int64_t o, std::int64_t s, double inv) { gx[static_cast<std::size_t>(s)] += g[static_cast<std::size_t>(o)] * inv; });
  };
  return make_result({c, target[0], target[1], target[2]}, std::move(out), {x}, fn, "adaptive_avg_pool3");
}

std::int64_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax of empty span");
  std::int64_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<std::int64_t>(i);
  return best;
}

// --- verification ---------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const std::vector<double>& x0,
                         const Shape& shape, double eps) {
  Tensor x = Tensor::from(shape, x0, true);
  Tensor y = f(x);
  if (y.numel() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
  backward(y);
  std::vector<double> analytic(x0.size(), 0.0);
  if (!x.grad().empty()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  double worst = 0;
  std::vector<double> probe = x0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    probe[i] = x0[i] + eps;
    const double fp = f(Tensor::from(shape, probe)).item();
    probe[i] = x0[i] - eps;
    const double fm = f(Tensor::from(shape, probe)).item();
    probe[i] = x0[i];
    const double numeric = (fp - fm) / (2 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric)));
  }
  return worst;
}

}  // namespace nmsw::ad
