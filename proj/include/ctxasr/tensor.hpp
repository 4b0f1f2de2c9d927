#pragma once

// Dense row-major tensors with tape-style reverse-mode differentiation.
//
// Every op returns a fresh Tensor. When gradients are enabled and at least one
// input requires a gradient, the result keeps its parents and a closure that
// pushes the output gradient back into them. backward() walks that graph once
// and then releases it.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ctxasr {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::invalid_argument(op + ": " + detail), op_(op) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
inline std::atomic<bool>& finite_checks() {
#ifdef NDEBUG
  static std::atomic<bool> on{false};
#else
  static std::atomic<bool> on{true};
#endif
  return on;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// When on, every op rejects NaN inputs. On by default in debug builds.
inline void set_finite_checks(bool on) { detail::finite_checks() = on; }
inline bool finite_checks_enabled() { return detail::finite_checks(); }

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const { return !backward_fn && parents.empty() && !consumed; }
  S* grad_buf() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad.data();
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from(shape, std::vector<S>(numel_of(shape), S(0)), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor", "zero-sized dimension in " + shape_str(shape));
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor", "shape " + shape_str(shape) + " does not match " +
                                     std::to_string(data.size()) + " elements");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<S> d(numel_of(shape));
    for (auto& x : d) x = static_cast<S>(dist(rng));
    return from(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.size() < 2 ? 1 : node_->shape.back(); }

  std::span<const S> data() const { return node_->data; }
  std::span<S> mutable_data() { return node_->data; }
  S operator[](std::size_t i) const { return node_->data[i]; }
  S at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  S item() const {
    if (numel() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() { return {node_->grad_buf(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf holding a copy of this tensor's values.
  Tensor detach_copy(bool requires_grad = false) const {
    return from(shape(), node_->data, requires_grad);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapM = Eigen::Map<const MatRM<S>>;

template <typename S>
void check_finite(const char* op, const Tensor<S>& t) {
  for (S v : t.data())
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
}

template <typename S>
Tensor<S> make_result(const char* op, Shape shape, std::vector<S> data,
                      std::initializer_list<const Tensor<S>*> inputs,
                      std::function<void(TensorNode<S>&)> backward_fn) {
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool needs = false;
  if (grad_enabled())
    for (auto* in : inputs) needs = needs || in->requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (auto* in : inputs) n->parents.push_back(in->node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>(std::move(n));
}

template <typename S>
Tensor<S> make_result_n(const char* op, Shape shape, std::vector<S> data,
                        const std::vector<Tensor<S>>& inputs,
                        std::function<void(TensorNode<S>&)> backward_fn) {
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool needs = false;
  if (grad_enabled())
    for (auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>(std::move(n));
}

template <typename S>
void guard_inputs(const char* op, std::initializer_list<const Tensor<S>*> inputs) {
  if (!finite_checks_enabled()) return;
  for (auto* in : inputs) check_finite(op, *in);
}

template <typename S>
void require_rank2(const char* op, const Tensor<S>& t) {
  if (t.rank() != 2) throw ShapeError(op, "expected a matrix, got " + shape_str(t.shape()));
}

template <typename S>
bool wants(const std::shared_ptr<TensorNode<S>>& p) {
  return p->requires_grad;
}

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// a[m,k] * b[k,n], or a[m,k] * b[n,k]^T when trans_b is set.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_b = false) {
  using namespace detail;
  guard_inputs("matmul", {&a, &b});
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul", "expected matrices, got " + shape_str(a.shape()) + " x " +
                                   shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t bk = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != bk)
    throw ShapeError("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " +
                                   shape_str(b.shape()) + (trans_b ? "^T" : ""));
  std::vector<S> out(m * n);
  CMapM<S> A(a.data().data(), m, k);
  CMapM<S> B(b.data().data(), b.dim(0), b.dim(1));
  MapM<S> C(out.data(), m, n);
  if (trans_b)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A * B;
  return make_result<S>("matmul", {m, n}, std::move(out), {&a, &b},
                        [m, k, n, trans_b](TensorNode<S>& o) {
                          auto& pa = o.parents[0];
                          auto& pb = o.parents[1];
                          CMapM<S> G(o.grad.data(), m, n);
                          if (wants(pa)) {
                            CMapM<S> Bm(pb->data.data(), pb->shape[0], pb->shape[1]);
                            MapM<S> GA(pa->grad_buf(), m, k);
                            if (trans_b)
                              GA.noalias() += G * Bm;
                            else
                              GA.noalias() += G * Bm.transpose();
                          }
                          if (wants(pb)) {
                            CMapM<S> Am(pa->data.data(), m, k);
                            MapM<S> GB(pb->grad_buf(), pb->shape[0], pb->shape[1]);
                            if (trans_b)
                              GB.noalias() += G.transpose() * Am;
                            else
                              GB.noalias() += Am.transpose() * G;
                          }
                        });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  using namespace detail;
  require_rank2("transpose", x);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<S> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return make_result<S>("transpose", {c, r}, std::move(out), {&x}, [r, c](TensorNode<S>& o) {
    auto& p = o.parents[0];
    S* g = p->grad_buf();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  using namespace detail;
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<S> out(x.data().begin(), x.data().end());
  return make_result<S>("reshape", std::move(shape), std::move(out), {&x}, [](TensorNode<S>& o) {
    auto& p = o.parents[0];
    S* g = p->grad_buf();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

// Same-shape add, or a trailing-dimension bias add when b is 1-D.
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  using namespace detail;
  guard_inputs("add", {&a, &b});
  const bool bias = b.rank() == 1 && a.shape() != b.shape();
  if (bias) {
    if (a.shape().back() != b.dim(0))
      throw ShapeError("add", "bias " + shape_str(b.shape()) + " does not match trailing dim of " +
                                  shape_str(a.shape()));
  } else if (a.shape() != b.shape()) {
    throw ShapeError("add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t w = b.numel();
  std::vector<S> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[bias ? i % w : i];
  return make_result<S>("add", a.shape(), std::move(out), {&a, &b}, [bias, w](TensorNode<S>& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    if (wants(pa)) {
      S* g = pa->grad_buf();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (wants(pb)) {
      S* g = pb->grad_buf();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[bias ? i % w : i] += o.grad[i];
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  using namespace detail;
  guard_inputs("sub", {&a, &b});
  if (a.shape() != b.shape())
    throw ShapeError("sub", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<S>("sub", a.shape(), std::move(out), {&a, &b}, [](TensorNode<S>& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    if (wants(pa)) {
      S* g = pa->grad_buf();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (wants(pb)) {
      S* g = pb->grad_buf();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  using namespace detail;
  guard_inputs("mul", {&a, &b});
  if (a.shape() != b.shape())
    throw ShapeError("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<S>("mul", a.shape(), std::move(out), {&a, &b}, [](TensorNode<S>& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    if (wants(pa)) {
      S* g = pa->grad_buf();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pb->data[i];
    }
    if (wants(pb)) {
      S* g = pb->grad_buf();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pa->data[i];
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  using namespace detail;
  guard_inputs("scale", {&a});
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result<S>("scale", a.shape(), std::move(out), {&a}, [s](TensorNode<S>& o) {
    S* g = o.parents[0]->grad_buf();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * s;
  });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  using namespace detail;
  guard_inputs("silu", {&x});
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sigmoid(x.data()[i]);
  return make_result<S>("silu", x.shape(), std::move(out), {&x}, [](TensorNode<S>& o) {
    auto& p = o.parents[0];
    S* g = p->grad_buf();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const S v = p->data[i];
      const S sg = sigmoid(v);
      g[i] += o.grad[i] * (sg + v * sg * (S(1) - sg));
    }
  });
}

// Gated linear unit over the last dimension: first half * sigmoid(second half).
template <typename S>
Tensor<S> glu(const Tensor<S>& x) {
  using namespace detail;
  guard_inputs("glu", {&x});
  const std::size_t c = x.shape().back();
  if (c % 2) throw ShapeError("glu", "odd trailing dimension in " + shape_str(x.shape()));
  const std::size_t h = c / 2, rows = x.numel() / c;
  Shape shape = x.shape();
  shape.back() = h;
  std::vector<S> out(rows * h);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < h; ++j)
      out[r * h + j] = x.data()[r * c + j] * sigmoid(x.data()[r * c + h + j]);
  return make_result<S>("glu", shape, std::move(out), {&x}, [rows, h, c](TensorNode<S>& o) {
    auto& p = o.parents[0];
    S* g = p->grad_buf();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < h; ++j) {
        const S a = p->data[r * c + j];
        const S sb = sigmoid(p->data[r * c + h + j]);
        const S go = o.grad[r * h + j];
        g[r * c + j] += go * sb;
        g[r * c + h + j] += go * a * sb * (S(1) - sb);
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations over the last dimension

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  using namespace detail;
  guard_inputs("sum", {&x});
  S total = 0;
  for (S v : x.data()) total += v;
  return make_result<S>("sum", {1}, {total}, {&x}, [](TensorNode<S>& o) {
    auto& p = o.parents[0];
    S* g = p->grad_buf();
    for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += o.grad[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  using namespace detail;
  guard_inputs("softmax_lastdim", {&x});
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = x.data().data() + r * c;
    S* y = out.data() + r * c;
    const S mx = *std::max_element(in, in + c);
    S z = 0;
    if (mx == -std::numeric_limits<S>::infinity()) {
      std::fill(y, y + c, std::numeric_limits<S>::quiet_NaN());
      continue;
    }
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return make_result<S>("softmax_lastdim", x.shape(), std::move(out), {&x},
                        [rows, c](TensorNode<S>& o) {
                          S* g = o.parents[0]->grad_buf();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const S* y = o.data.data() + r * c;
                            const S* gy = o.grad.data() + r * c;
                            S dot = 0;
                            for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
                            for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - dot);
                          }
                        });
}

template <typename S>
Tensor<S> log_softmax_lastdim(const Tensor<S>& x) {
  using namespace detail;
  guard_inputs("log_softmax_lastdim", {&x});
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = x.data().data() + r * c;
    const S mx = *std::max_element(in, in + c);
    S z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
    const S lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = in[j] - lse;
  }
  return make_result<S>("log_softmax_lastdim", x.shape(), std::move(out), {&x},
                        [rows, c](TensorNode<S>& o) {
                          S* g = o.parents[0]->grad_buf();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const S* y = o.data.data() + r * c;
                            const S* gy = o.grad.data() + r * c;
                            S total = 0;
                            for (std::size_t j = 0; j < c; ++j) total += gy[j];
                            for (std::size_t j = 0; j < c; ++j)
                              g[r * c + j] += gy[j] - std::exp(y[j]) * total;
                          }
                        });
}

template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                    S eps = S(1e-5)) {
  using namespace detail;
  guard_inputs("layernorm", {&x, &gamma, &beta});
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layernorm", "gain/bias " + shape_str(gamma.shape()) + "/" +
                                      shape_str(beta.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<S> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = x.data().data() + r * c;
    S mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= S(c);
    S var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= S(c);
    inv_std[r] = S(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (in[j] - mu) * inv_std[r];
      out[r * c + j] = xhat[r * c + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return make_result<S>(
      "layernorm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<S>& o) {
        auto& px = o.parents[0];
        auto& pg = o.parents[1];
        auto& pb = o.parents[2];
        if (wants(pg)) {
          S* g = pg->grad_buf();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i] * xhat[i];
        }
        if (wants(pb)) {
          S* g = pb->grad_buf();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i];
        }
        if (wants(px)) {
          S* g = px->grad_buf();
          for (std::size_t r = 0; r < rows; ++r) {
            S m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const S d = o.grad[r * c + j] * pg->data[j];
              m1 += d;
              m2 += d * xhat[r * c + j];
            }
            m1 /= S(c);
            m2 /= S(c);
            for (std::size_t j = 0; j < c; ++j) {
              const S d = o.grad[r * c + j] * pg->data[j];
              g[r * c + j] += inv_std[r] * (d - m1 - xhat[r * c + j] * m2);
            }
          }
        }
      });
}

template <typename S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& gamma, S eps = S(1e-6)) {
  using namespace detail;
  guard_inputs("rmsnorm", {&x, &gamma});
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  if (gamma.numel() != c)
    throw ShapeError("rmsnorm", "gain " + shape_str(gamma.shape()) + " vs input " +
                                    shape_str(x.shape()));
  std::vector<S> out(x.numel()), inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = x.data().data() + r * c;
    S ms = 0;
    for (std::size_t j = 0; j < c; ++j) ms += in[j] * in[j];
    inv_rms[r] = S(1) / std::sqrt(ms / S(c) + eps);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = in[j] * inv_rms[r] * gamma.data()[j];
  }
  return make_result<S>("rmsnorm", x.shape(), std::move(out), {&x, &gamma},
                        [rows, c, inv_rms = std::move(inv_rms)](TensorNode<S>& o) {
                          auto& px = o.parents[0];
                          auto& pg = o.parents[1];
                          if (wants(pg)) {
                            S* g = pg->grad_buf();
                            for (std::size_t i = 0; i < o.grad.size(); ++i)
                              g[i % c] += o.grad[i] * px->data[i] * inv_rms[i / c];
                          }
                          if (wants(px)) {
                            S* g = px->grad_buf();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const S* in = px->data.data() + r * c;
                              S dot = 0;
                              for (std::size_t j = 0; j < c; ++j)
                                dot += o.grad[r * c + j] * pg->data[j] * in[j];
                              const S k = inv_rms[r] * inv_rms[r] * inv_rms[r] * dot / S(c);
                              for (std::size_t j = 0; j < c; ++j)
                                g[r * c + j] += o.grad[r * c + j] * pg->data[j] * inv_rms[r] - in[j] * k;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, std::span<const int> ids) {
  using namespace detail;
  require_rank2("embedding_lookup", table);
  if (ids.empty()) throw ShapeError("embedding_lookup", "empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<S> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ShapeError("embedding_lookup", "id " + std::to_string(ids[i]) + " outside table " +
                                               shape_str(table.shape()));
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result<S>("embedding_lookup", {ids.size(), d}, std::move(out), {&table},
                        [idv = std::move(idv), d](TensorNode<S>& o) {
                          S* g = o.parents[0]->grad_buf();
                          for (std::size_t i = 0; i < idv.size(); ++i)
                            for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += o.grad[i * d + j];
                        });
}

// Concatenate matrices along rows (axis 0) or columns (axis 1).
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  using namespace detail;
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat", "axis must be 0 or 1");
  for (auto& p : parts) require_rank2("concat", p);
  const std::size_t fixed = parts[0].dim(1 - axis);
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (auto& p : parts) {
    if (p.dim(1 - axis) != fixed)
      throw ShapeError("concat", "mismatched " + shape_str(parts[0].shape()) + " and " +
                                     shape_str(p.shape()) + " on axis " + std::to_string(axis));
    sizes.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  std::vector<S> out(total * fixed);
  if (axis == 0) {
    std::size_t off = 0;
    for (auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), out.begin() + off);
      off += p.numel();
    }
  } else {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      for (std::size_t r = 0; r < fixed; ++r)
        std::copy_n(parts[k].data().data() + r * sizes[k], sizes[k], out.data() + r * total + off);
      off += sizes[k];
    }
  }
  return make_result_n<S>("concat", shape, std::move(out), parts,
                          [axis, sizes, fixed, total](TensorNode<S>& o) {
                            std::size_t off = 0;
                            for (std::size_t k = 0; k < o.parents.size(); ++k) {
                              auto& p = o.parents[k];
                              if (wants(p)) {
                                S* g = p->grad_buf();
                                if (axis == 0) {
                                  for (std::size_t i = 0; i < p->data.size(); ++i)
                                    g[i] += o.grad[off * fixed + i];
                                } else {
                                  for (std::size_t r = 0; r < fixed; ++r)
                                    for (std::size_t j = 0; j < sizes[k]; ++j)
                                      g[r * sizes[k] + j] += o.grad[r * total + off + j];
                                }
                              }
                              off += sizes[k];
                            }
                          });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, std::size_t start, std::size_t len) {
  using namespace detail;
  require_rank2("slice", x);
  if (axis != 0 && axis != 1) throw ShapeError("slice", "axis must be 0 or 1");
  if (len == 0 || start + len > x.dim(axis))
    throw ShapeError("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                  ") outside " + shape_str(x.shape()) + " on axis " +
                                  std::to_string(axis));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Shape shape = axis == 0 ? Shape{len, c} : Shape{r, len};
  std::vector<S> out(numel_of(shape));
  if (axis == 0) {
    std::copy_n(x.data().data() + start * c, len * c, out.data());
  } else {
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(x.data().data() + i * c + start, len, out.data() + i * len);
  }
  return make_result<S>("slice", shape, std::move(out), {&x}, [axis, start, len, r, c](TensorNode<S>& o) {
    S* g = o.parents[0]->grad_buf();
    if (axis == 0) {
      for (std::size_t i = 0; i < len * c; ++i) g[start * c + i] += o.grad[i];
    } else {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) g[i * c + start + j] += o.grad[i * len + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution helpers

// Depthwise 1-D convolution over time. x[T,C], w[C,K] with K odd, same-length
// zero padding.
template <typename S>
Tensor<S> depthwise_conv1d(const Tensor<S>& x, const Tensor<S>& w) {
  using namespace detail;
  guard_inputs("depthwise_conv1d", {&x, &w});
  require_rank2("depthwise_conv1d", x);
  require_rank2("depthwise_conv1d", w);
  const std::size_t t = x.dim(0), c = x.dim(1), k = w.dim(1);
  if (w.dim(0) != c)
    throw ShapeError("depthwise_conv1d", "kernel " + shape_str(w.shape()) + " vs input " +
                                             shape_str(x.shape()));
  if (k % 2 == 0) throw ShapeError("depthwise_conv1d", "kernel width must be odd, got " + std::to_string(k));
  const long half = static_cast<long>(k / 2);
  std::vector<S> out(t * c, S(0));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t q = 0; q < k; ++q) {
      const long src = static_cast<long>(i) + static_cast<long>(q) - half;
      if (src < 0 || src >= static_cast<long>(t)) continue;
      const S* xin = x.data().data() + src * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += xin[ch] * w.data()[ch * k + q];
    }
  return make_result<S>("depthwise_conv1d", {t, c}, std::move(out), {&x, &w},
                        [t, c, k, half](TensorNode<S>& o) {
                          auto& px = o.parents[0];
                          auto& pw = o.parents[1];
                          S* gx = wants(px) ? px->grad_buf() : nullptr;
                          S* gw = wants(pw) ? pw->grad_buf() : nullptr;
                          for (std::size_t i = 0; i < t; ++i)
                            for (std::size_t q = 0; q < k; ++q) {
                              const long src = static_cast<long>(i) + static_cast<long>(q) - half;
                              if (src < 0 || src >= static_cast<long>(t)) continue;
                              for (std::size_t ch = 0; ch < c; ++ch) {
                                const S go = o.grad[i * c + ch];
                                if (gx) gx[src * c + ch] += go * pw->data[ch * k + q];
                                if (gw) gw[ch * k + q] += go * px->data[src * c + ch];
                              }
                            }
                        });
}

// Gathers strided windows of x[T,C] into rows [T_out, K*C] (zero padded), so a
// strided convolution becomes a matmul. T_out = floor((T + 2*pad - K)/stride) + 1.
template <typename S>
Tensor<S> im2col(const Tensor<S>& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  using namespace detail;
  require_rank2("im2col", x);
  const std::size_t t = x.dim(0), c = x.dim(1);
  if (kernel == 0 || stride == 0 || t + 2 * pad < kernel)
    throw ShapeError("im2col", "invalid window for input " + shape_str(x.shape()));
  const std::size_t t_out = (t + 2 * pad - kernel) / stride + 1;
  std::vector<S> out(t_out * kernel * c, S(0));
  for (std::size_t i = 0; i < t_out; ++i)
    for (std::size_t q = 0; q < kernel; ++q) {
      const long src = static_cast<long>(i * stride + q) - static_cast<long>(pad);
      if (src < 0 || src >= static_cast<long>(t)) continue;
      std::copy_n(x.data().data() + src * c, c, out.data() + (i * kernel + q) * c);
    }
  return make_result<S>("im2col", {t_out, kernel * c}, std::move(out), {&x},
                        [t, c, t_out, kernel, stride, pad](TensorNode<S>& o) {
                          S* g = o.parents[0]->grad_buf();
                          for (std::size_t i = 0; i < t_out; ++i)
                            for (std::size_t q = 0; q < kernel; ++q) {
                              const long src = static_cast<long>(i * stride + q) - static_cast<long>(pad);
                              if (src < 0 || src >= static_cast<long>(t)) continue;
                              for (std::size_t ch = 0; ch < c; ++ch)
                                g[src * c + ch] += o.grad[(i * kernel + q) * c + ch];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Attention helpers

// Row-major boolean matrix, true = may attend.
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  bool operator()(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  bool operator==(const BoolMatrix&) const = default;
};

// Sets disallowed score entries to -inf.
template <typename S>
Tensor<S> mask_fill(const Tensor<S>& scores, const BoolMatrix& mask) {
  using namespace detail;
  require_rank2("mask_fill", scores);
  if (scores.dim(0) != mask.rows || scores.dim(1) != mask.cols)
    throw ShapeError("mask_fill", "mask [" + std::to_string(mask.rows) + "," +
                                      std::to_string(mask.cols) + "] vs scores " +
                                      shape_str(scores.shape()));
  std::vector<S> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask.bits[i]) out[i] = -std::numeric_limits<S>::infinity();
  return make_result<S>("mask_fill", scores.shape(), std::move(out), {&scores},
                        [bits = mask.bits](TensorNode<S>& o) {
                          S* g = o.parents[0]->grad_buf();
                          for (std::size_t i = 0; i < o.grad.size(); ++i)
                            if (bits[i]) g[i] += o.grad[i];
                        });
}

// Rotary embedding on x[T, H, D] (or [T, H*D] with heads given): each pair
// (2i, 2i+1) of a head at position p is rotated by p * base^(-2i/D).
template <typename S>
Tensor<S> rope(const Tensor<S>& x, std::span<const std::size_t> positions, std::size_t heads,
               double base = 10000.0) {
  using namespace detail;
  guard_inputs("rope", {&x});
  const std::size_t t = x.dim(0);
  const std::size_t width = x.numel() / t;
  if (heads == 0 || width % heads) throw ShapeError("rope", "width not divisible by heads in " + shape_str(x.shape()));
  const std::size_t hd = width / heads;
  if (hd % 2) throw ShapeError("rope", "head_dim must be even, got " + std::to_string(hd));
  if (positions.size() != t)
    throw ShapeError("rope", std::to_string(positions.size()) + " positions for " + std::to_string(t) + " rows");
  const std::size_t half = hd / 2;
  std::vector<S> cosv(t * half), sinv(t * half);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < half; ++j) {
      const double theta = static_cast<double>(positions[i]) *
                           std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
      cosv[i * half + j] = static_cast<S>(std::cos(theta));
      sinv[i * half + j] = static_cast<S>(std::sin(theta));
    }
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < half; ++j) {
        const std::size_t at = i * width + h * hd + 2 * j;
        const S a = x.data()[at], b = x.data()[at + 1];
        const S cs = cosv[i * half + j], sn = sinv[i * half + j];
        out[at] = a * cs - b * sn;
        out[at + 1] = a * sn + b * cs;
      }
  return make_result<S>("rope", x.shape(), std::move(out), {&x},
                        [t, heads, hd, half, width, cosv = std::move(cosv),
                         sinv = std::move(sinv)](TensorNode<S>& o) {
                          S* g = o.parents[0]->grad_buf();
                          for (std::size_t i = 0; i < t; ++i)
                            for (std::size_t h = 0; h < heads; ++h)
                              for (std::size_t j = 0; j < half; ++j) {
                                const std::size_t at = i * width + h * hd + 2 * j;
                                const S ga = o.grad[at], gb = o.grad[at + 1];
                                const S cs = cosv[i * half + j], sn = sinv[i * half + j];
                                g[at] += ga * cs + gb * sn;
                                g[at + 1] += -ga * sn + gb * cs;
                              }
                        });
}

// ---------------------------------------------------------------------------
// Stochastic and loss ops

// Inverted dropout. Identity (same handle) outside training or at rate 0.
template <typename S, typename Rng>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng* rng, bool training) {
  using namespace detail;
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  if (!rng) throw std::invalid_argument("dropout: training mode requires an rng stream");
  guard_inputs("dropout", {&x});
  std::bernoulli_distribution keep(1.0 - rate);
  const S inv = static_cast<S>(1.0 / (1.0 - rate));
  std::vector<S> m(x.numel()), out(x.numel());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = keep(*rng) ? inv : S(0);
    out[i] = x.data()[i] * m[i];
  }
  return make_result<S>("dropout", x.shape(), std::move(out), {&x}, [m = std::move(m)](TensorNode<S>& o) {
    S* g = o.parents[0]->grad_buf();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * m[i];
  });
}

// Mean negative log-likelihood of targets under softmax(logits), rows [n, V].
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> targets) {
  using namespace detail;
  guard_inputs("cross_entropy", {&logits});
  require_rank2("cross_entropy", logits);
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n)
    throw ShapeError("cross_entropy", std::to_string(targets.size()) + " targets for logits " +
                                          shape_str(logits.shape()));
  std::vector<S> prob(n * v);
  S total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
      throw ShapeError("cross_entropy", "target " + std::to_string(targets[r]) + " outside vocabulary");
    const S* in = logits.data().data() + r * v;
    const S mx = *std::max_element(in, in + v);
    S z = 0;
    for (std::size_t j = 0; j < v; ++j) z += (prob[r * v + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < v; ++j) prob[r * v + j] /= z;
    total += (mx + std::log(z)) - in[targets[r]];
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result<S>("cross_entropy", {1}, {total / S(n)}, {&logits},
                        [n, v, tg = std::move(tg), prob = std::move(prob)](TensorNode<S>& o) {
                          S* g = o.parents[0]->grad_buf();
                          const S k = o.grad[0] / S(n);
                          for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t j = 0; j < v; ++j)
                              g[r * v + j] += k * (prob[r * v + j] - (static_cast<int>(j) == tg[r] ? S(1) : S(0)));
                        });
}

// ---------------------------------------------------------------------------
// Backward pass

// Accumulates d(root)/dx into every requires_grad ancestor, then releases the
// graph. A consumed graph cannot be replayed.
template <typename S>
void backward(const Tensor<S>& root) {
  if (!root.defined()) throw GraphError("backward: undefined root");
  if (root.numel() != 1)
    throw ShapeError("backward", "root must be a scalar, got " + shape_str(root.shape()));
  auto r = root.node();
  if (r->consumed) throw GraphError("backward: graph already consumed");
  if (!r->requires_grad) throw GraphError("backward: root does not depend on any trainable tensor");

  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack{{r.get(), 0}};
  seen.insert(r.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<S>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  r->grad_buf()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (auto* node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->consumed = true;
    }
  }
}

}  // namespace ctxasr
