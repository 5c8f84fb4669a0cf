#pragma once

// Measurement instruments: the worst-case sharpness probe, 1-D / 2-D loss
// landscape scans along random directions, and the angle between two
// gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flatmatch/error.hpp"
#include "flatmatch/losses.hpp"
#include "flatmatch/model.hpp"
#include "flatmatch/optim.hpp"

namespace flatmatch {

// ---------------------------------------------------------------------------
// Sharpness

struct SharpnessResult {
  double sharpness = 0.0;
  double loss = 0.0;
  bool degenerate = false;
};

/// L(theta + eps*) - L(theta), eps* = rho * grad / ||grad||. `loss_of` maps a
/// flat parameter tensor to a scalar loss tensor.
template <class LossFn>
SharpnessResult sharpness_probe(const ParamVector& theta, LossFn&& loss_of, double rho) {
  if (!(rho > 0.0)) throw ContractError("sharpness_probe: rho must be > 0");
  auto [base, grad] = value_and_grad(theta, loss_of);
  const auto pert = sam_perturbation(grad, rho);
  if (pert.degenerate) return {0.0, base, true};
  const double moved = loss_of(perturb(theta, pert.epsilon).to_tensor(false)).item();
  return {moved - base, base, false};
}

/// Sharpness of the cross-entropy of `spec` on (x, labels).
inline SharpnessResult sharpness_probe(const MlpSpec& spec, const ParamVector& theta, const Tensor& x,
                                       std::span<const int> labels, double rho) {
  require_model_layout(spec, theta, "sharpness_probe");
  return sharpness_probe(theta, [&](const Tensor& p) { return cross_entropy(forward(spec, p, x), labels); }, rho);
}

// ---------------------------------------------------------------------------
// Gradient angle

struct AngleResult {
  double degrees = 0.0;
  bool degenerate = false;  // one of the gradients is (numerically) zero
};

/// Angle between two gradients in degrees, in [0, 180].
///
/// Computed as 2 * atan2(|u - v|, |u + v|) on the unit vectors u, v: unlike
/// arccos of the cosine it keeps full precision near 0 and 180 degrees.
inline AngleResult gradient_angle(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b, "gradient_angle");
  const double na = norm(a), nb = norm(b);
  if (na < kDegenerateGradNorm || nb < kDegenerateGradNorm) return {0.0, true};
  double diff = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double u = a[i] / na, v = b[i] / nb;
    diff += (u - v) * (u - v);
    sum += (u + v) * (u + v);
  }
  const double rad = 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
  return {std::clamp(rad * 180.0 / std::numbers::pi, 0.0, 180.0), false};
}

// ---------------------------------------------------------------------------
// Loss landscapes

using ScalarLoss = std::function<double(const ParamVector&)>;

/// Cross-entropy of the model on a fixed labeled batch.
inline ScalarLoss labeled_probe(const MlpSpec& spec, Tensor x, std::vector<int> labels) {
  return [spec, x = std::move(x), labels = std::move(labels)](const ParamVector& p) {
    return cross_entropy(forward(spec, p, x), labels).item();
  };
}

/// Consistency loss on an unlabeled batch against pseudo-targets computed once
/// at `theta`, so every grid point evaluates the same functional.
inline ScalarLoss unlabeled_probe(const MlpSpec& spec, const ParamVector& theta, Tensor x, double tau = 0.0) {
  auto targets = pseudo_targets(forward(spec, theta, x), tau);
  return [spec, x = std::move(x), targets = std::move(targets)](const ParamVector& p) {
    return consistency_loss(forward(spec, p, x), targets).item();
  };
}

struct LandscapeGrid {
  std::vector<double> a;     // offsets along the first direction
  std::vector<double> b;     // offsets along the second direction ({0} for 1-D scans)
  std::vector<double> loss;  // row-major: loss[i * b.size() + j] at (a[i], b[j])
  std::string dataset = "labeled";
  std::uint64_t seed_a = 0;
  std::uint64_t seed_b = 0;
  bool filter_normalized = true;
  bool two_dimensional = false;

  double at(std::size_t i, std::size_t j = 0) const { return loss[i * b.size() + j]; }
};

namespace detail {

/// t_i = half * (2i - (n - 1)) / (n - 1), exactly 0 in the middle for odd n.
inline std::vector<double> symmetric_offsets(double half_width, std::size_t n) {
  std::vector<double> t(n);
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double num = 2.0 * static_cast<double>(i) - denom;
    t[i] = num == 0.0 ? 0.0 : half_width * num / denom;
  }
  return t;
}

// Evaluates every cell, splitting the cells over `workers` threads. Each
// worker builds its own parameter copies; results land at their grid index.
inline void scan_cells(LandscapeGrid& g, const ParamVector& theta, const ParamVector& d1, const ParamVector* d2,
                       const ScalarLoss& loss, std::size_t workers) {
  const std::size_t cells = g.a.size() * g.b.size();
  g.loss.assign(cells, 0.0);
  auto run = [&](std::size_t first, std::size_t stride) {
    ParamVector point = theta;
    for (std::size_t c = first; c < cells; c += stride) {
      const double a = g.a[c / g.b.size()];
      const double b = g.b[c % g.b.size()];
      if (a == 0.0 && b == 0.0) {
        g.loss[c] = loss(theta);
        continue;
      }
      for (std::size_t k = 0; k < theta.size(); ++k) {
        double v = theta[k] + a * d1[k];
        if (d2) v += b * (*d2)[k];
        point[k] = v;
      }
      g.loss[c] = loss(point);
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, cells));
  if (workers == 1) {
    run(0, 1);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Loss at theta + t * d for `num_points` offsets t evenly spaced over
/// [-half_width, half_width].
inline LandscapeGrid landscape_1d(const ParamVector& theta, const ScalarLoss& loss, std::uint64_t seed,
                                  double half_width, std::size_t num_points, bool filter_normalized,
                                  std::size_t workers = 1, std::string dataset = "labeled") {
  if (num_points < 3) throw ContractError("landscape_1d: num_points must be >= 3");
  if (!(half_width > 0.0)) throw ContractError("landscape_1d: half_width must be > 0");
  LandscapeGrid g;
  g.a = detail::symmetric_offsets(half_width, num_points);
  g.b = {0.0};
  g.dataset = std::move(dataset);
  g.seed_a = seed;
  g.filter_normalized = filter_normalized;
  const ParamVector d = random_direction(theta, seed, filter_normalized);
  detail::scan_cells(g, theta, d, nullptr, loss, workers);
  return g;
}

/// Loss at theta + a * d1 + b * d2 on an n x n grid.
inline LandscapeGrid landscape_2d(const ParamVector& theta, const ScalarLoss& loss, std::uint64_t seed_a,
                                  std::uint64_t seed_b, double half_a, double half_b, std::size_t n,
                                  bool filter_normalized, std::size_t workers = 1, std::string dataset = "labeled") {
  if (n < 3) throw ContractError("landscape_2d: grid size must be >= 3");
  if (!(half_a > 0.0) || !(half_b > 0.0)) throw ContractError("landscape_2d: ranges must be > 0");
  LandscapeGrid g;
  g.a = detail::symmetric_offsets(half_a, n);
  g.b = detail::symmetric_offsets(half_b, n);
  g.dataset = std::move(dataset);
  g.seed_a = seed_a;
  g.seed_b = seed_b;
  g.filter_normalized = filter_normalized;
  g.two_dimensional = true;
  const ParamVector d1 = random_direction(theta, seed_a, filter_normalized);
  const ParamVector d2 = random_direction(theta, seed_b, filter_normalized);
  detail::scan_cells(g, theta, d1, &d2, loss, workers);
  return g;
}

/// Second difference of a 1-D scan around its centre point, divided by the
/// squared step: a curvature proxy for the slice.
inline double curvature_at_center(const LandscapeGrid& g) {
  if (g.two_dimensional || g.a.size() < 3 || g.a.size() % 2 == 0) {
    throw ContractError("curvature_at_center needs a 1-D scan with an odd number of points");
  }
  const std::size_t c = g.a.size() / 2;
  const double h = g.a[c + 1] - g.a[c];
  return (g.at(c + 1) - 2.0 * g.at(c) + g.at(c - 1)) / (h * h);
}

/// CSV `a,b,loss` plus a JSON header describing the scan.
inline void save_landscape(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                           const LandscapeGrid& g) {
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  csv.precision(17);
  csv << "a,b,loss\n";
  for (std::size_t i = 0; i < g.a.size(); ++i)
    for (std::size_t j = 0; j < g.b.size(); ++j) csv << g.a[i] << ',' << g.b[j] << ',' << g.at(i, j) << '\n';

  nlohmann::json header = {
      {"kind", g.two_dimensional ? "2d" : "1d"},
      {"dataset", g.dataset},
      {"seeds", g.two_dimensional ? nlohmann::json::array({g.seed_a, g.seed_b}) : nlohmann::json::array({g.seed_a})},
      {"a_range", {g.a.front(), g.a.back()}},
      {"b_range", {g.b.front(), g.b.back()}},
      {"points", {g.a.size(), g.b.size()}},
      {"filter_normalized", g.filter_normalized},
  };
  std::ofstream js(json_path);
  if (!js) throw std::runtime_error("cannot write " + json_path.string());
  js << header.dump(2) << '\n';
}

}  // namespace flatmatch
