#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "flatmatch/error.hpp"
#include "flatmatch/param_vector.hpp"
#include "flatmatch/rng.hpp"
#include "flatmatch/tensor.hpp"

namespace flatmatch {

enum class Activation { relu };

/// Fully connected classifier: input -> hidden... -> logits, relu between
/// layers. Weights are stored [fan_in x fan_out] so a layer is x * W + b.
struct MlpSpec {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden_dims;
  std::size_t num_classes = 2;
  Activation activation = Activation::relu;

  void validate() const {
    if (input_dim < 1) throw ConfigError("must be >= 1", "model.input_dim");
    for (auto h : hidden_dims)
      if (h < 1) throw ConfigError("every hidden width must be >= 1", "model.hidden");
    if (num_classes < 2) throw ConfigError("must be >= 2", "model.num_classes");
  }

  std::size_t num_layers() const { return hidden_dims.size() + 1; }

  std::size_t fan_in(std::size_t layer) const { return layer == 0 ? input_dim : hidden_dims[layer - 1]; }
  std::size_t fan_out(std::size_t layer) const {
    return layer == hidden_dims.size() ? num_classes : hidden_dims[layer];
  }

  std::shared_ptr<const Layout> layout() const {
    std::vector<std::pair<std::string, Shape>> blocks;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      blocks.emplace_back("fc" + std::to_string(l) + ".weight", Shape{fan_in(l), fan_out(l)});
      blocks.emplace_back("fc" + std::to_string(l) + ".bias", Shape{fan_out(l)});
    }
    return std::make_shared<const Layout>(blocks);
  }

  bool operator==(const MlpSpec&) const = default;
};

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
inline ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector theta(spec.layout());
  Rng rng = make_rng(seed, 0x1417);
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto* w = theta.layout().find("fc" + std::to_string(l) + ".weight");
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(spec.fan_in(l))));
    for (auto& v : theta.block(*w)) v = dist(rng);
  }
  return theta;
}

/// Differentiable forward pass; `params` is the flat parameter tensor.
inline Tensor forward(const MlpSpec& spec, const Tensor& params, const Tensor& x) {
  const auto layout = spec.layout();
  if (params.numel() != layout->total()) {
    throw ContractError("forward: parameter vector has " + std::to_string(params.numel()) +
                        " values, model needs " + std::to_string(layout->total()));
  }
  if (x.dim() != 2 || x.cols() != spec.input_dim) {
    throw DimensionError("forward: input shape " + to_string(x.shape()) + " does not match input_dim " +
                         std::to_string(spec.input_dim));
  }
  Tensor h = x;
  const auto& entries = layout->entries();
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto& w = entries[2 * l];
    const auto& b = entries[2 * l + 1];
    h = add_bias(matmul(h, slice(params, w.offset, w.shape)), slice(params, b.offset, b.shape));
    if (l + 1 < spec.num_layers()) h = relu(h);
  }
  return h;
}

inline void require_model_layout(const MlpSpec& spec, const ParamVector& theta, const char* context) {
  if (!theta.layout_ptr() || theta.layout() != *spec.layout()) {
    throw ContractError(std::string(context) + ": parameter layout does not match the model spec");
  }
}

/// Logits without gradient tracking.
inline Tensor forward(const MlpSpec& spec, const ParamVector& theta, const Tensor& x) {
  require_model_layout(spec, theta, "forward");
  return forward(spec, theta.to_tensor(false), x);
}

/// theta + eps as a new vector.
inline ParamVector perturb(const ParamVector& theta, const ParamVector& eps) {
  require_same_layout(theta, eps, "perturb");
  return theta + eps;
}

/// Gaussian direction in parameter space, deterministic in `seed`.
///
/// With filter normalization every weight column (one output unit) and every
/// bias block is rescaled to the norm of the matching block of theta. A block
/// whose theta norm is zero keeps its raw Gaussian values.
inline ParamVector random_direction(const ParamVector& theta, std::uint64_t seed, bool filter_normalized) {
  ParamVector d = theta.zeros_like();
  Rng rng = make_rng(seed, 0xD1EC);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& v : d.values()) v = gauss(rng);
  if (!filter_normalized) return d;

  auto rescale = [&](std::size_t start, std::size_t count, std::size_t stride) {
    double dn = 0.0, tn = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = start + k * stride;
      dn += d[i] * d[i];
      tn += theta[i] * theta[i];
    }
    if (tn == 0.0 || dn == 0.0) return;
    const double s = std::sqrt(tn) / std::sqrt(dn);
    for (std::size_t k = 0; k < count; ++k) d[start + k * stride] *= s;
  };

  for (const auto& e : theta.layout().entries()) {
    if (e.shape.size() == 2) {
      const std::size_t rows = e.shape[0], cols = e.shape[1];
      for (std::size_t j = 0; j < cols; ++j) rescale(e.offset + j, rows, cols);
    } else {
      rescale(e.offset, e.size(), 1);
    }
  }
  return d;
}

}  // namespace flatmatch
