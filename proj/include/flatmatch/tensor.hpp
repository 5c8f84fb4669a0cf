#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays of
// doubles.
//
// Operations record themselves on the tape that is active on the calling
// thread (see Tape::Scope) whenever at least one input requires a gradient.
// With no active tape the same functions simply evaluate, which is what the
// inference paths use. A tape is single-threaded; independent tapes may run on
// different threads as long as they share no Tensor that requires a gradient.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flatmatch/error.hpp"

namespace flatmatch {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves
  std::size_t node = 0;
};

inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

/// Handle to a differentiable array. Copies share storage, the way framework
/// tensors do; use detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorData>()) {
    if (flatmatch::numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + to_string(shape) + " needs " +
                           std::to_string(flatmatch::numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = flatmatch::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->value.size(); }
  std::size_t dim() const { return impl_->shape.size(); }

  std::size_t rows() const {
    require_matrix();
    return impl_->shape[0];
  }
  std::size_t cols() const {
    require_matrix();
    return impl_->shape[1];
  }

  std::span<const double> data() const { return impl_->value; }

  /// Writable view of a leaf's values. Writing after the tensor has been used
  /// by a recorded operation invalidates that operation's saved state.
  std::span<double> mutable_data() {
    if (!is_leaf()) throw ContractError("mutable_data() is only available on leaf tensors");
    return impl_->value;
  }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() needs a single-element tensor, shape is " + to_string(shape()));
    }
    return impl_->value[0];
  }

  double at(std::size_t i, std::size_t j) const { return impl_->value[i * cols() + j]; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = on;
  }

  bool is_leaf() const { return impl_->tape_id == 0; }

  Tensor detach() const { return Tensor(impl_->shape, impl_->value, false); }

 private:
  friend class Tape;
  friend Tensor make_recorded(std::string_view, std::initializer_list<const Tensor*>, Shape,
                              std::vector<double>, std::function<void(const double*, double* const*)>);

  explicit Tensor(std::shared_ptr<detail::TensorData> impl) : impl_(std::move(impl)) {}

  void require_matrix() const {
    if (dim() != 2) throw DimensionError("expected a matrix, got shape " + to_string(shape()));
  }

  std::shared_ptr<detail::TensorData> impl_;
};

/// Ordered record of the operations of one forward pass.
///
/// backward() sweeps the nodes once in reverse order. Gradients of
/// intermediate results live only for the duration of that sweep; leaves
/// accumulate into their own grad buffer, so calling backward() twice without
/// zero_grad() sums the two contributions.
class Tape {
 public:
  /// in_grads[k] is null when input k does not need a gradient.
  using BackwardFn = std::function<void(const double* out_grad, double* const* in_grads)>;

  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<detail::TensorData>> inputs;
    std::size_t out_numel = 0;
    BackwardFn backward;
  };

  /// Makes a tape the active one on this thread for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(current()) { current() = &tape; }
    ~Scope() { current() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  std::size_t size() const { return nodes_.size(); }
  std::string_view op(std::size_t i) const { return nodes_.at(i).op; }

  /// Forgets every node. Tensors produced before the reset behave as constants.
  void clear() {
    nodes_.clear();
    id_ = detail::next_tape_id();
  }

  void backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1 || root.dim() > 1) {
      throw ContractError("backward() needs a scalar root, got shape " +
                          (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
    }
    auto& r = *root.impl_;
    if (!r.requires_grad) return;
    if (r.tape_id == 0) {
      if (r.grad.empty()) r.grad.assign(1, 0.0);
      r.grad[0] += 1.0;
      return;
    }
    if (r.tape_id != id_) throw ContractError("backward() root was recorded on a different tape");

    std::vector<std::vector<double>> grads(r.node + 1);
    grads[r.node].assign(1, 1.0);
    std::vector<double*> in_ptrs;
    for (std::size_t i = r.node + 1; i-- > 0;) {
      if (grads[i].empty()) continue;
      const Node& node = nodes_[i];
      in_ptrs.assign(node.inputs.size(), nullptr);
      bool any = false;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        auto& in = *node.inputs[k];
        if (!in.requires_grad) continue;
        if (in.tape_id == id_) {
          auto& g = grads[in.node];
          if (g.empty()) g.assign(in.value.size(), 0.0);
          in_ptrs[k] = g.data();
        } else if (in.tape_id == 0) {
          if (in.grad.empty()) in.grad.assign(in.value.size(), 0.0);
          in_ptrs[k] = in.grad.data();
        }
        any = any || in_ptrs[k];
      }
      // Inputs from another (or a cleared) tape are constants here.
      if (any) node.backward(grads[i].data(), in_ptrs.data());
      std::vector<double>().swap(grads[i]);
    }
  }

 private:
  friend Tensor make_recorded(std::string_view, std::initializer_list<const Tensor*>, Shape,
                              std::vector<double>, BackwardFn);

  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

/// Backward pass on the tape active on this thread.
inline void backward(const Tensor& root) {
  Tape* tape = Tape::active();
  if (!tape) throw ContractError("backward() called with no active tape");
  tape->backward(root);
}

/// Wraps a freshly computed value as an op result, recording it on the active
/// tape when any input requires a gradient.
inline Tensor make_recorded(std::string_view op, std::initializer_list<const Tensor*> inputs,
                            Shape shape, std::vector<double> value, Tape::BackwardFn fn) {
  Tape* tape = Tape::active();
  bool needs_grad = false;
  for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  Tensor out(std::move(shape), std::move(value), false);
  if (!tape || !needs_grad) return out;

  Tape::Node node;
  node.op = op;
  node.out_numel = out.numel();
  node.backward = std::move(fn);
  for (const Tensor* t : inputs) node.inputs.push_back(t->impl_);
  out.impl_->requires_grad = true;
  out.impl_->tape_id = tape->id_;
  out.impl_->node = tape->nodes_.size();
  tape->nodes_.push_back(std::move(node));
  return out;
}

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline bool is_scalar_like(const Tensor& t) { return t.numel() == 1 && t.dim() <= 1; }

enum class Broadcast { same, left_scalar, right_scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (is_scalar_like(a)) return Broadcast::left_scalar;
  if (is_scalar_like(b)) return Broadcast::right_scalar;
  throw DimensionError(std::string(op) + ": cannot combine shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

// Binary elementwise op with scalar broadcasting. da/db give the partial
// derivatives at one coordinate.
template <class F, class DA, class DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const auto kind = broadcast_kind(a, b, op);
  const Shape shape = kind == Broadcast::left_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  const auto av = a.data();
  const auto bv = b.data();
  auto ai = [&, kind](std::size_t i) { return kind == Broadcast::left_scalar ? av[0] : av[i]; };
  auto bi = [&, kind](std::size_t i) { return kind == Broadcast::right_scalar ? bv[0] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ai(i), bi(i));
  if (!recording({&a, &b})) return Tensor(shape, std::move(out));

  Tape::BackwardFn fn = [a, b, kind, n, da, db](const double* g, double* const* gin) {
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = kind == Broadcast::left_scalar ? av[0] : av[i];
      const double y = kind == Broadcast::right_scalar ? bv[0] : bv[i];
      if (gin[0]) gin[0][kind == Broadcast::left_scalar ? 0 : i] += g[i] * da(x, y);
      if (gin[1]) gin[1][kind == Broadcast::right_scalar ? 0 : i] += g[i] * db(x, y);
    }
  };
  return make_recorded(op, {&a, &b}, shape, std::move(out), std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return make_recorded("scale", {&a}, a.shape(), std::move(out),
                       [c, n = a.numel()](const double* g, double* const* gin) {
                         for (std::size_t i = 0; i < n; ++i) gin[0][i] += c * g[i];
                       });
}

/// Subgradient 0 at exactly 0.
inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_recorded("relu", {&a}, a.shape(), std::move(out), [a](const double* g, double* const* gin) {
    const auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) gin[0][i] += g[i];
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  if (!detail::recording({&a})) return Tensor(a.shape(), std::move(out));
  auto saved = std::make_shared<const std::vector<double>>(out);
  return make_recorded("exp", {&a}, a.shape(), std::move(out), [saved](const double* g, double* const* gin) {
    for (std::size_t i = 0; i < saved->size(); ++i) gin[0][i] += g[i] * (*saved)[i];
  });
}

/// Throws DomainError on any non-positive input; callers clamp first.
inline Tensor log(const Tensor& a) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(x[i]) + " at index " +
                        std::to_string(i));
    }
    out[i] = std::log(x[i]);
  }
  return make_recorded("log", {&a}, a.shape(), std::move(out), [a](const double* g, double* const* gin) {
    const auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) gin[0][i] += g[i] / x[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_recorded("sum", {&a}, Shape{}, {s}, [n = a.numel()](const double* g, double* const* gin) {
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// sum_i weights[i] * a[i] with constant weights.
inline Tensor weighted_sum(const Tensor& a, std::vector<double> weights) {
  if (weights.size() != a.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor of shape " +
                         to_string(a.shape()));
  }
  double s = 0.0;
  const auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) s += weights[i] * x[i];
  return make_recorded("weighted_sum", {&a}, Shape{}, {s},
                       [w = std::move(weights)](const double* g, double* const* gin) {
                         for (std::size_t i = 0; i < w.size(); ++i) gin[0][i] += w[i] * g[0];
                       });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return make_recorded("matmul", {&a, &b}, Shape{m, n}, std::move(out),
                       [a, b, m, k, n](const double* g, double* const* gin) {
                         const auto av = a.data();
                         const auto bv = b.data();
                         if (gin[0]) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               double s = 0.0;
                               for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                               gin[0][i * k + p] += s;
                             }
                         }
                         if (gin[1]) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               const double s = av[i * k + p];
                               double* grow = gin[1] + p * n;
                               for (std::size_t j = 0; j < n; ++j) grow[j] += s * g[i * n + j];
                             }
                         }
                       });
}

/// x[b x n] + bias[n], the bias added to every row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.dim() != 2 || bias.numel() != x.cols() || bias.dim() != 1) {
    throw DimensionError("add_bias: shapes " + to_string(x.shape()) + " and " + to_string(bias.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bv = bias.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bv[j];
  return make_recorded("add_bias", {&x, &bias}, x.shape(), std::move(out),
                       [rows, cols](const double* g, double* const* gin) {
                         if (gin[0])
                           for (std::size_t i = 0; i < rows * cols; ++i) gin[0][i] += g[i];
                         if (gin[1])
                           for (std::size_t i = 0; i < rows; ++i)
                             for (std::size_t j = 0; j < cols; ++j) gin[1][j] += g[i * cols + j];
                       });
}

/// Copies the contiguous range [offset, offset + numel(shape)) of a flat
/// tensor out as a tensor of the given shape.
inline Tensor slice(const Tensor& flat, std::size_t offset, Shape shape) {
  const std::size_t n = numel(shape);
  if (offset + n > flat.numel()) {
    throw DimensionError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                         ") exceeds tensor of " + std::to_string(flat.numel()) + " values");
  }
  const auto v = flat.data();
  std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(offset),
                          v.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return make_recorded("slice", {&flat}, std::move(shape), std::move(out),
                       [offset, n](const double* g, double* const* gin) {
                         for (std::size_t i = 0; i < n; ++i) gin[0][offset + i] += g[i];
                       });
}

// ---------------------------------------------------------------------------
// Classification helpers

/// Row-wise log-softmax with max shift.
inline Tensor log_softmax(const Tensor& logits) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  const auto x = logits.data();
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = x.data() + i * cols;
    const double mx = *std::max_element(r, r + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(r[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = r[j] - lse;
  }
  if (!detail::recording({&logits})) return Tensor(logits.shape(), std::move(out));
  auto saved = std::make_shared<const std::vector<double>>(out);
  return make_recorded("log_softmax", {&logits}, logits.shape(), std::move(out),
                       [saved, rows, cols](const double* g, double* const* gin) {
                         for (std::size_t i = 0; i < rows; ++i) {
                           double gs = 0.0;
                           for (std::size_t j = 0; j < cols; ++j) gs += g[i * cols + j];
                           for (std::size_t j = 0; j < cols; ++j) {
                             const std::size_t t = i * cols + j;
                             gin[0][t] += g[t] - std::exp((*saved)[t]) * gs;
                           }
                         }
                       });
}

/// Picks x[i, index[i]] from every row; result has shape [rows].
inline Tensor gather_rows(const Tensor& x, std::span<const int> index) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (index.size() != rows) {
    throw DimensionError("gather_rows: " + std::to_string(index.size()) + " indices for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<std::size_t> cols_picked(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= cols) {
      throw ContractError("gather_rows: index " + std::to_string(index[i]) + " out of range [0, " +
                          std::to_string(cols) + ") at row " + std::to_string(i));
    }
    cols_picked[i] = static_cast<std::size_t>(index[i]);
  }
  std::vector<double> out(rows);
  const auto v = x.data();
  for (std::size_t i = 0; i < rows; ++i) out[i] = v[i * cols + cols_picked[i]];
  return make_recorded("gather_rows", {&x}, Shape{rows}, std::move(out),
                       [picked = std::move(cols_picked), cols](const double* g, double* const* gin) {
                         for (std::size_t i = 0; i < picked.size(); ++i) gin[0][i * cols + picked[i]] += g[i];
                       });
}

/// Row-wise softmax of plain values (no gradient).
inline std::vector<double> softmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  const auto x = logits.data();
  std::vector<double> p(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = x.data() + i * cols;
    const double mx = *std::max_element(r, r + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += (p[i * cols + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) p[i * cols + j] /= s;
  }
  return p;
}

}  // namespace flatmatch
