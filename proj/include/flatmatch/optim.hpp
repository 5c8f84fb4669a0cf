#pragma once

// Parameter-space optimizers: momentum SGD, the worst-case (SAM) perturbation,
// the cross-sharpness regularizer, and one FlatMatch / FlatMatch-e update.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flatmatch/error.hpp"
#include "flatmatch/losses.hpp"
#include "flatmatch/model.hpp"
#include "flatmatch/param_vector.hpp"

namespace flatmatch {

// ---------------------------------------------------------------------------
// SGD

struct SgdState {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  ParamVector velocity;  // shaped on the first step

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("must be > 0", "optim.lr");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("must be in [0, 1)", "optim.momentum");
    if (weight_decay < 0.0) throw ConfigError("must be >= 0", "optim.weight_decay");
  }
};

/// velocity <- momentum * velocity + grad + weight_decay * theta
/// theta    <- theta - lr * velocity
inline void sgd_step(ParamVector& theta, const ParamVector& grad, SgdState& state) {
  require_same_layout(theta, grad, "sgd_step");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("sgd_step: gradient coordinate " + std::to_string(i) + " is not finite");
    }
  }
  if (state.velocity.size() == 0) {
    state.velocity = theta.zeros_like();
  } else {
    require_same_layout(theta, state.velocity, "sgd_step");
  }
  auto v = state.velocity.values();
  auto t = theta.values();
  for (std::size_t i = 0; i < t.size(); ++i) {
    v[i] = state.momentum * v[i] + grad[i] + state.weight_decay * t[i];
    t[i] -= state.lr * v[i];
  }
}

// ---------------------------------------------------------------------------
// Worst-case perturbation

struct Perturbation {
  ParamVector epsilon;
  bool degenerate = false;  // gradient norm below 1e-12, epsilon is zero
};

inline constexpr double kDegenerateGradNorm = 1e-12;

/// eps* = rho * g / ||g||_2, the first-order maximizer of the loss over the
/// l2 ball of radius rho.
inline Perturbation sam_perturbation(const ParamVector& grad, double rho) {
  if (rho < 0.0) throw ContractError("sam_perturbation: rho must be >= 0");
  if (!all_finite(grad)) throw NumericError("sam_perturbation: gradient is not finite");
  Perturbation p;
  const double n = norm(grad);
  if (n < kDegenerateGradNorm) {
    p.epsilon = grad.zeros_like();
    p.degenerate = true;
    return p;
  }
  p.epsilon = rho == 0.0 ? grad.zeros_like() : (rho / n) * grad;
  return p;
}

// ---------------------------------------------------------------------------
// Gradient memory for FlatMatch-e

enum class EmaConvention {
  conventional,   // M <- alpha * M + (1 - alpha) * g
  inverted,  // M <- (1 - alpha) * M + alpha * g
};

struct GradBuffer {
  ParamVector memory;
  double alpha = 0.999;
  std::size_t step_count = 0;

  GradBuffer() = default;
  GradBuffer(const ParamVector& like, double a) : memory(like.zeros_like()), alpha(a) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("must be in (0, 1)", "flatmatch.alpha");
  }
};

inline void ema_update(GradBuffer& buf, const ParamVector& g, EmaConvention convention) {
  require_same_layout(buf.memory, g, "ema_update");
  const double keep = convention == EmaConvention::conventional ? buf.alpha : 1.0 - buf.alpha;
  const double take = 1.0 - keep;
  auto m = buf.memory.values();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = keep * m[i] + take * g[i];
  ++buf.step_count;
}

// ---------------------------------------------------------------------------
// FlatMatch

/// Which unlabeled view the worst-case model sees. The anchor (pseudo-label)
/// view is always the weakly augmented one.
enum class StudentView { same, strong };

struct FlatMatchConfig {
  double rho = 0.1;
  double alpha = 0.999;
  double tau = 0.95;
  double lambda_xsharp = 1.0;
  bool efficient = false;
  EmaConvention ema_convention = EmaConvention::conventional;
  ConsistencyKind loss = ConsistencyKind::hard_ce;
  bool threshold_in_xsharp = true;  // false selects every unlabeled row
  StudentView student_view = StudentView::strong;
  MaskNormalization mask_normalization = MaskNormalization::batch;

  void validate() const {
    if (rho < 0.0) throw ConfigError("must be >= 0", "flatmatch.rho");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("must be in (0, 1)", "flatmatch.alpha");
    if (tau < 0.0 || tau > 1.0) throw ConfigError("must be in [0, 1]", "flatmatch.tau");
    if (lambda_xsharp < 0.0) throw ConfigError("must be >= 0", "flatmatch.lambda_xsharp");
  }

  double effective_tau() const { return threshold_in_xsharp ? tau : 0.0; }
};

/// Labeled cross-entropy at theta and its gradient.
inline std::pair<double, ParamVector> labeled_loss_and_grad(const MlpSpec& spec, const ParamVector& theta,
                                                            const Tensor& x, std::span<const int> y) {
  require_model_layout(spec, theta, "labeled_loss_and_grad");
  return value_and_grad(theta, [&](const Tensor& p) { return cross_entropy(forward(spec, p, x), y); });
}

struct CrossSharpness {
  Tensor loss;
  MaskedTargets targets;
};

/// Disagreement on unlabeled data between theta and the worst-case model.
///
/// theta's predictions on `x_anchor` are frozen into (masked) pseudo-targets;
/// the loss is the consistency of the worst-case model's predictions on
/// `x_student` with them. Only the worst-case branch is differentiable.
inline CrossSharpness cross_sharpness(const MlpSpec& spec, const ParamVector& theta, const Tensor& worst_case,
                                      const Tensor& x_anchor, const Tensor& x_student, double tau,
                                      ConsistencyKind kind = ConsistencyKind::hard_ce,
                                      MaskNormalization norm = MaskNormalization::batch) {
  require_model_layout(spec, theta, "cross_sharpness");
  if (worst_case.numel() != theta.size()) {
    throw ContractError("cross_sharpness: worst-case parameters do not match the layout of theta");
  }
  CrossSharpness out;
  out.targets = pseudo_targets(forward(spec, theta, x_anchor), tau);
  out.loss = consistency(forward(spec, worst_case, x_student), out.targets, kind, norm);
  return out;
}

inline CrossSharpness cross_sharpness(const MlpSpec& spec, const ParamVector& theta, const ParamVector& worst_case,
                                      const Tensor& x_anchor, const Tensor& x_student, double tau,
                                      ConsistencyKind kind = ConsistencyKind::hard_ce,
                                      MaskNormalization norm = MaskNormalization::batch) {
  require_same_layout(theta, worst_case, "cross_sharpness");
  return cross_sharpness(spec, theta, worst_case.to_tensor(false), x_anchor, x_student, tau, kind, norm);
}

/// Inputs of one FlatMatch update.
struct FlatMatchBatch {
  Tensor x_labeled;
  std::vector<int> y_labeled;
  Tensor x_anchor;   // unlabeled view that produces the pseudo-targets
  Tensor x_student;  // unlabeled view fed to the worst-case model
  // Optional set defining the worst-case perturbation instead of the labeled
  // batch (labeled points plus frozen pseudo-labels).
  Tensor x_perturb;
  std::vector<int> y_perturb;

  bool has_perturb_set() const { return x_perturb.defined(); }
};

struct StepDiagnostics {
  double loss_l = 0.0;
  double xsharp = 0.0;
  double eps_norm = 0.0;
  double mask_rate = 0.0;
  double grad_norm_l = 0.0;
  double grad_norm_xsharp = 0.0;
  double grad_norm_total = 0.0;
  bool degenerate = false;
  ParamVector grad_l;
  ParamVector grad_total;
};

/// One FlatMatch (or FlatMatch-e) iteration.
///
///  1. eps* from the labeled gradient at theta (first propagation), or from
///     the gradient memory when cfg.efficient is set;
///  2. worst-case model theta~ = theta + eps*;
///  3. second propagation: grad L_l(theta) + lambda * grad R(theta~), the
///     cross-sharpness gradient taken at theta~ and applied to theta;
///  4. SGD step with the combined gradient;
///  5. memory update with this step's labeled gradient.
inline StepDiagnostics flatmatch_step(const MlpSpec& spec, ParamVector& theta, const FlatMatchBatch& batch,
                                      const FlatMatchConfig& cfg, SgdState& sgd, GradBuffer& buf) {
  require_model_layout(spec, theta, "flatmatch_step");
  require_same_layout(theta, buf.memory, "flatmatch_step");
  if (cfg.efficient && batch.has_perturb_set()) {
    throw ContractError("flatmatch_step: a separate perturbation set needs the two-propagation variant");
  }
  StepDiagnostics d;

  ParamVector source_grad;
  Perturbation pert;
  if (cfg.efficient) {
    pert = sam_perturbation(buf.memory, cfg.rho);
  } else {
    const Tensor& xp = batch.has_perturb_set() ? batch.x_perturb : batch.x_labeled;
    const std::vector<int>& yp = batch.has_perturb_set() ? batch.y_perturb : batch.y_labeled;
    source_grad = labeled_loss_and_grad(spec, theta, xp, yp).second;
    pert = sam_perturbation(source_grad, cfg.rho);
  }
  d.degenerate = pert.degenerate;
  d.eps_norm = norm(pert.epsilon);

  if (cfg.lambda_xsharp == 0.0) {
    auto [loss, grad] = labeled_loss_and_grad(spec, theta, batch.x_labeled, batch.y_labeled);
    d.loss_l = loss;
    d.grad_l = std::move(grad);
    d.grad_total = d.grad_l;
  } else {
    const ParamVector worst = perturb(theta, pert.epsilon);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor p = theta.to_tensor(true);
    Tensor pw = worst.to_tensor(true);
    Tensor ll = cross_entropy(forward(spec, p, batch.x_labeled), batch.y_labeled);
    auto xs = cross_sharpness(spec, theta, pw, batch.x_anchor, batch.x_student, cfg.effective_tau(), cfg.loss,
                              cfg.mask_normalization);
    tape.backward(add(ll, scale(xs.loss, cfg.lambda_xsharp)));

    d.loss_l = ll.item();
    d.xsharp = xs.loss.item();
    d.mask_rate = xs.targets.mask_rate;
    d.grad_l = theta.zeros_like();
    std::copy(p.grad().begin(), p.grad().end(), d.grad_l.values().begin());
    ParamVector grad_x = theta.zeros_like();
    if (pw.has_grad()) std::copy(pw.grad().begin(), pw.grad().end(), grad_x.values().begin());
    d.grad_norm_xsharp = norm(grad_x);
    d.grad_total = d.grad_l + grad_x;
  }
  d.grad_norm_l = norm(d.grad_l);
  d.grad_norm_total = norm(d.grad_total);

  sgd_step(theta, d.grad_total, sgd);
  ema_update(buf, batch.has_perturb_set() ? source_grad : d.grad_l, cfg.ema_convention);
  return d;
}

}  // namespace flatmatch
