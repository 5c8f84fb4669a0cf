#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flatmatch/error.hpp"
#include "flatmatch/tensor.hpp"

namespace flatmatch {

/// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t b = logits.rows();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= logits.cols()) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                          " is outside [0, " + std::to_string(logits.cols()) + ")");
    }
  }
  return weighted_sum(gather_rows(log_softmax(logits), labels),
                      std::vector<double>(b, -1.0 / static_cast<double>(b)));
}

/// Hard pseudo-labels with the confidence mask of one batch.
struct MaskedTargets {
  std::vector<int> pseudo_labels;
  std::vector<double> confidences;
  std::vector<std::uint8_t> mask;
  std::vector<double> probs;  // row-major softmax, kept for the soft variant
  std::size_t num_classes = 0;
  double threshold = 0.0;
  double mask_rate = 0.0;

  std::size_t size() const { return pseudo_labels.size(); }
  std::size_t selected() const {
    std::size_t k = 0;
    for (auto m : mask) k += m;
    return k;
  }
};

/// argmax (lowest index on ties) and max softmax probability per row; a row
/// is selected when its confidence is strictly above tau.
inline MaskedTargets pseudo_targets(const Tensor& logits, double tau) {
  if (tau < 0.0 || tau > 1.0) throw ContractError("pseudo_targets: tau must lie in [0, 1]");
  MaskedTargets t;
  const std::size_t rows = logits.rows(), cols = logits.cols();
  t.num_classes = cols;
  t.threshold = tau;
  t.probs = softmax_rows(logits);
  t.pseudo_labels.resize(rows);
  t.confidences.resize(rows);
  t.mask.resize(rows);
  const auto x = logits.data();
  std::size_t selected = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (x[i * cols + j] > x[i * cols + best]) best = j;
    t.pseudo_labels[i] = static_cast<int>(best);
    t.confidences[i] = t.probs[i * cols + best];
    t.mask[i] = t.confidences[i] > tau ? 1 : 0;
    selected += t.mask[i];
  }
  t.mask_rate = rows ? static_cast<double>(selected) / static_cast<double>(rows) : 0.0;
  return t;
}

/// How the masked per-row losses are averaged.
enum class MaskNormalization {
  batch,     // divide by the batch size: (1/m) sum_i mask_i * loss_i
  selected,  // divide by the number of selected rows
};

enum class ConsistencyKind { hard_ce, soft_kl };

namespace detail {

inline std::vector<double> mask_weights(const MaskedTargets& t, MaskNormalization norm) {
  const std::size_t k = t.selected();
  std::vector<double> w(t.size(), 0.0);
  if (k == 0) return w;
  const double denom = static_cast<double>(norm == MaskNormalization::batch ? t.size() : k);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (t.mask[i]) w[i] = 1.0 / denom;
  return w;
}

}  // namespace detail

/// Cross-entropy of the student rows against the hard pseudo-labels, over the
/// selected rows only. An empty selection gives exactly zero loss and zero
/// gradient. The targets are constants; gradient flows into student_logits.
inline Tensor consistency_loss(const Tensor& student_logits, const MaskedTargets& targets,
                               MaskNormalization norm = MaskNormalization::batch) {
  if (student_logits.rows() != targets.size() || student_logits.cols() != targets.num_classes) {
    throw DimensionError("consistency_loss: logits " + to_string(student_logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets over " + std::to_string(targets.num_classes) +
                         " classes");
  }
  auto w = detail::mask_weights(targets, norm);
  for (auto& v : w) v = -v;
  return weighted_sum(gather_rows(log_softmax(student_logits), targets.pseudo_labels), std::move(w));
}

/// KL(anchor softmax || student softmax) over the selected rows.
inline Tensor soft_consistency_loss(const Tensor& student_logits, const MaskedTargets& targets,
                                    MaskNormalization norm = MaskNormalization::batch) {
  if (student_logits.rows() != targets.size() || student_logits.cols() != targets.num_classes) {
    throw DimensionError("soft_consistency_loss: logits " + to_string(student_logits.shape()) +
                         " do not match the targets");
  }
  const std::size_t cols = targets.num_classes;
  const auto row_w = detail::mask_weights(targets, norm);
  std::vector<double> w(targets.probs.size(), 0.0);
  double entropy_term = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (row_w[i] == 0.0) continue;
    for (std::size_t j = 0; j < cols; ++j) {
      const double p = targets.probs[i * cols + j];
      w[i * cols + j] = -row_w[i] * p;
      if (p > 0.0) entropy_term += row_w[i] * p * std::log(p);
    }
  }
  // sum_i w_i sum_j p_ij (log p_ij - log q_ij)
  return add(weighted_sum(log_softmax(student_logits), std::move(w)), Tensor::scalar(entropy_term));
}

inline Tensor consistency(const Tensor& student_logits, const MaskedTargets& targets, ConsistencyKind kind,
                          MaskNormalization norm = MaskNormalization::batch) {
  return kind == ConsistencyKind::hard_ce ? consistency_loss(student_logits, targets, norm)
                                          : soft_consistency_loss(student_logits, targets, norm);
}

}  // namespace flatmatch
