#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flatmatch/error.hpp"
#include "flatmatch/tensor.hpp"

namespace flatmatch {

struct LayoutEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;

  std::size_t size() const { return numel(shape); }
  bool operator==(const LayoutEntry&) const = default;
};

/// Ordered description of how named parameter blocks sit in a flat array.
class Layout {
 public:
  Layout() = default;

  explicit Layout(const std::vector<std::pair<std::string, Shape>>& blocks) {
    for (const auto& [name, shape] : blocks) {
      entries_.push_back({name, shape, total_});
      total_ += numel(shape);
    }
  }

  const std::vector<LayoutEntry>& entries() const { return entries_; }
  std::size_t total() const { return total_; }

  const LayoutEntry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  bool operator==(const Layout&) const = default;

 private:
  std::vector<LayoutEntry> entries_;
  std::size_t total_ = 0;
};

/// Flat vector of every model parameter, plus the layout needed to cut it back
/// into per-layer blocks. Copying a ParamVector copies the values.
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(std::shared_ptr<const Layout> layout)
      : layout_(std::move(layout)), values_(layout_->total(), 0.0) {}

  ParamVector(std::shared_ptr<const Layout> layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->total()) {
      throw DimensionError("ParamVector: layout needs " + std::to_string(layout_->total()) + " values, got " +
                           std::to_string(values_.size()));
    }
  }

  const Layout& layout() const { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const { return layout_; }

  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> block(const LayoutEntry& e) const {
    return std::span<const double>(values_).subspan(e.offset, e.size());
  }
  std::span<double> block(const LayoutEntry& e) { return std::span<double>(values_).subspan(e.offset, e.size()); }

  bool same_layout(const ParamVector& other) const {
    return layout_ == other.layout_ || (layout_ && other.layout_ && *layout_ == *other.layout_);
  }

  ParamVector zeros_like() const { return ParamVector(layout_); }

  /// Flat [size] tensor holding a copy of the values.
  Tensor to_tensor(bool requires_grad = false) const { return Tensor(Shape{size()}, values_, requires_grad); }

  bool operator==(const ParamVector& other) const { return same_layout(other) && values_ == other.values_; }

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<double> values_;
};

inline void require_same_layout(const ParamVector& a, const ParamVector& b, const char* context) {
  if (!a.same_layout(b)) {
    throw ContractError(std::string(context) + ": parameter layouts differ (" + std::to_string(a.size()) +
                        " vs " + std::to_string(b.size()) + " values)");
  }
}

inline double dot(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const ParamVector& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

/// y += c * x
inline void axpy(double c, const ParamVector& x, ParamVector& y) {
  require_same_layout(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

inline ParamVector operator+(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b, "operator+");
  ParamVector out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
  return out;
}

inline ParamVector operator-(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b, "operator-");
  ParamVector out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] -= b[i];
  return out;
}

inline ParamVector operator*(double c, const ParamVector& a) {
  ParamVector out = a;
  for (auto& v : out.values()) v *= c;
  return out;
}

inline bool all_finite(const ParamVector& a) {
  for (double v : a.values())
    if (!std::isfinite(v)) return false;
  return true;
}

/// One tensor per layout block.
inline std::vector<Tensor> unflatten(const ParamVector& p) {
  std::vector<Tensor> out;
  for (const auto& e : p.layout().entries()) {
    auto b = p.block(e);
    out.emplace_back(e.shape, std::vector<double>(b.begin(), b.end()));
  }
  return out;
}

inline ParamVector flatten(std::shared_ptr<const Layout> layout, std::span<const Tensor> blocks) {
  if (blocks.size() != layout->entries().size()) {
    throw DimensionError("flatten: " + std::to_string(blocks.size()) + " blocks for a layout of " +
                         std::to_string(layout->entries().size()));
  }
  ParamVector out(layout);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& e = layout->entries()[k];
    if (blocks[k].shape() != e.shape) {
      throw DimensionError("flatten: block '" + e.name + "' expects shape " + to_string(e.shape) + ", got " +
                           to_string(blocks[k].shape()));
    }
    auto dst = out.block(e);
    auto src = blocks[k].data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

/// Runs `loss_of` on a gradient-tracking copy of theta and returns the loss
/// value together with d loss / d theta. `loss_of` maps a flat parameter
/// tensor to a scalar tensor.
template <class F>
std::pair<double, ParamVector> value_and_grad(const ParamVector& theta, F&& loss_of) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor params = theta.to_tensor(true);
  Tensor loss = loss_of(params);
  tape.backward(loss);
  ParamVector grad = theta.zeros_like();
  if (params.has_grad()) {
    auto g = params.grad();
    std::copy(g.begin(), g.end(), grad.values().begin());
  }
  return {loss.item(), std::move(grad)};
}

}  // namespace flatmatch
