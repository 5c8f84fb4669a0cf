#pragma once

// Small random problems shared by the unit and acceptance tests.

#include <algorithm>
#include <memory>
#include <random>
#include <vector>

#include "flatmatch/flatmatch.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace flatmatch;

inline ParamVector flat(std::vector<double> v) {
  auto layout = std::make_shared<const Layout>(std::vector<std::pair<std::string, Shape>>{{"v", {v.size()}}});
  return ParamVector(layout, std::move(v));
}

inline std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

inline std::vector<double> to_vec(const ParamVector& p) { return {p.values().begin(), p.values().end()}; }
inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline std::vector<std::size_t> widths_of(const MlpSpec& spec) {
  std::vector<std::size_t> w{spec.input_dim};
  w.insert(w.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  w.push_back(spec.num_classes);
  return w;
}

/// A random FlatMatch step problem. tau sits between two anchor confidences so
/// that both selected and rejected rows occur.
struct StepProblem {
  MlpSpec spec;
  ParamVector theta;
  FlatMatchBatch batch;
  double tau = 0.5;
};

inline StepProblem random_step_problem(std::uint64_t seed, std::size_t n_l = 6, std::size_t n_u = 10) {
  std::mt19937_64 rng(seed);
  StepProblem p;
  p.spec = MlpSpec{2, {6, 5}, 3, Activation::relu};
  p.theta = init_params(p.spec, seed);
  // Larger weights give a spread of confidences.
  for (auto& v : p.theta.values()) v *= 2.0;
  p.batch.x_labeled = Tensor::matrix(n_l, 2, gaussian(n_l * 2, rng));
  std::uniform_int_distribution<int> label(0, 2);
  for (std::size_t i = 0; i < n_l; ++i) p.batch.y_labeled.push_back(label(rng));
  const auto anchor = gaussian(n_u * 2, rng);
  auto student = anchor;
  for (auto& v : student) v += 0.3 * gaussian(1, rng)[0];
  p.batch.x_anchor = Tensor::matrix(n_u, 2, anchor);
  p.batch.x_student = Tensor::matrix(n_u, 2, student);

  auto conf = pseudo_targets(forward(p.spec, p.theta, p.batch.x_anchor), 0.0).confidences;
  std::sort(conf.begin(), conf.end());
  p.tau = 0.5 * (conf[n_u / 2 - 1] + conf[n_u / 2]);
  return p;
}

inline oracle::StepInputs oracle_inputs(const StepProblem& p, const FlatMatchConfig& fm, const SgdState& sgd) {
  oracle::StepInputs in;
  in.x_l = to_vec(p.batch.x_labeled);
  in.y_l = p.batch.y_labeled;
  in.n_l = p.batch.y_labeled.size();
  in.x_anchor = to_vec(p.batch.x_anchor);
  in.x_student = to_vec(p.batch.x_student);
  in.n_u = p.batch.x_anchor.rows();
  in.rho = fm.rho;
  in.tau = fm.tau;
  in.lambda = fm.lambda_xsharp;
  in.lr = sgd.lr;
  in.momentum = sgd.momentum;
  in.weight_decay = sgd.weight_decay;
  return in;
}

/// Largest |a_i - b_i|.
inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace fixture
