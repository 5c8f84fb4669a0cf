#pragma once

// End-to-end training loops: supervised, pseudo-label consistency (FixMatch
// style), FlatMatch / FlatMatch-e, and FlatMatch with fixed labels.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flatmatch/data.hpp"
#include "flatmatch/diagnostics.hpp"
#include "flatmatch/error.hpp"
#include "flatmatch/losses.hpp"
#include "flatmatch/model.hpp"
#include "flatmatch/optim.hpp"
#include "flatmatch/rng.hpp"

namespace flatmatch {

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  DatasetKind kind = DatasetKind::two_moons;
  std::size_t total = 1000;
  double noise = 0.1;
  int num_classes = 2;
  std::size_t labels_per_class = 4;
  double test_fraction = 0.2;
};

struct FixedLabelConfig {
  bool enabled = false;
  std::size_t num_fix = 40;
  std::size_t pretrain_epochs = 16;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  MlpSpec model{2, {32, 32}, 2, Activation::relu};
  DataConfig data;
  AugmentationSpec augment;
  std::size_t epochs = 200;
  std::size_t steps_per_epoch = 50;
  std::size_t labeled_batch = 64;
  std::size_t mu = 7;
  std::size_t eval_every = 50;
  double eval_ema = 0.999;  // parameter EMA of the evaluation model
  SgdState optimizer;
  double ssl_tau = 0.95;
  double lambda_u = 1.0;
  FlatMatchConfig flatmatch;
  FixedLabelConfig fixed_label;
  double sharpness_rho = 0.05;  // radius of the sharpness column
  bool log_wall_time = false;   // wall_ms column stays 0 unless set

  std::size_t total_steps() const { return epochs * steps_per_epoch; }

  void validate() const {
    model.validate();
    augment.validate();
    optimizer.validate();
    flatmatch.validate();
    if (epochs < 1) throw ConfigError("must be >= 1", "train.epochs");
    if (steps_per_epoch < 1) throw ConfigError("must be >= 1", "train.steps_per_epoch");
    if (labeled_batch < 1) throw ConfigError("must be >= 1", "train.labeled_batch");
    if (mu < 1) throw ConfigError("must be >= 1", "train.mu");
    if (eval_every < 1) throw ConfigError("must be >= 1", "train.eval_every");
    if (eval_ema < 0.0 || eval_ema >= 1.0) throw ConfigError("must be in [0, 1)", "train.eval_ema");
    if (ssl_tau < 0.0 || ssl_tau > 1.0) throw ConfigError("must be in [0, 1]", "ssl.tau");
    if (lambda_u < 0.0) throw ConfigError("must be >= 0", "ssl.lambda_u");
    if (!(sharpness_rho > 0.0)) throw ConfigError("must be > 0", "diag.sharpness_rho");
    if (data.test_fraction < 0.0 || data.test_fraction >= 1.0) {
      throw ConfigError("must be in [0, 1)", "data.test_fraction");
    }
    if (data.labels_per_class < 1) throw ConfigError("must be >= 1", "data.labels_per_class");
    if (fixed_label.enabled && fixed_label.pretrain_epochs >= epochs) {
      throw ConfigError("must be smaller than train.epochs", "fixed_label.pretrain_epochs");
    }
  }
};

/// Builds the dataset a config describes; deterministic in cfg.seed.
inline SslDataset make_ssl_dataset(const TrainConfig& cfg) {
  const auto full = make_dataset(cfg.data.kind, cfg.data.total, cfg.data.noise, cfg.data.num_classes,
                                 derive_seed(cfg.seed, 0x0D));
  return split_ssl(full, cfg.data.num_classes, cfg.data.labels_per_class, cfg.data.test_fraction,
                   derive_seed(cfg.seed, 0x5E));
}

// ---------------------------------------------------------------------------
// Experiment record

struct RecordRow {
  std::size_t step = 0;
  double loss_l = 0.0;
  double loss_u = 0.0;
  double xsharp = 0.0;
  double test_acc = 0.0;
  double test_err = 0.0;
  double mask_rate = 0.0;
  double sharpness = 0.0;
  double grad_angle_deg = 0.0;
  double grad_norm_l = 0.0;
  double wall_ms = 0.0;
  double test_acc_raw = 0.0;  // accuracy of the raw (non-EMA) weights; not in the CSV

  bool operator==(const RecordRow&) const = default;
};

inline constexpr const char* kRecordHeader =
    "step,loss_l,loss_u,xsharp,test_acc,test_err,mask_rate,sharpness,grad_angle_deg,grad_norm_l,wall_ms";

struct ExperimentRecord {
  std::string method;
  std::vector<RecordRow> rows;

  bool operator==(const ExperimentRecord&) const = default;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline std::string record_csv_line(const RecordRow& r) {
  using detail::format_double;
  std::string s = std::to_string(r.step);
  for (double v : {r.loss_l, r.loss_u, r.xsharp, r.test_acc, r.test_err, r.mask_rate, r.sharpness,
                   r.grad_angle_deg, r.grad_norm_l, r.wall_ms}) {
    s += ',';
    s += format_double(v);
  }
  return s;
}

inline void write_record_csv(const std::filesystem::path& path, const ExperimentRecord& rec) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kRecordHeader << '\n';
  for (const auto& r : rec.rows) out << record_csv_line(r) << '\n';
}

/// Parses a record CSV; throws ConfigError on a header or row mismatch.
inline ExperimentRecord read_record_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read record " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kRecordHeader) {
    throw ConfigError("unexpected record header in " + path.string());
  }
  ExperimentRecord rec;
  rec.method = path.stem().string();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) {
      double d = 0.0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), d);
      if (res.ec != std::errc()) throw ConfigError("bad number '" + cell + "' in " + path.string());
      v.push_back(d);
    }
    if (v.size() != 11) throw ConfigError("row with " + std::to_string(v.size()) + " columns in " + path.string());
    RecordRow r;
    r.step = static_cast<std::size_t>(v[0]);
    r.loss_l = v[1];
    r.loss_u = v[2];
    r.xsharp = v[3];
    r.test_acc = v[4];
    r.test_err = v[5];
    r.mask_rate = v[6];
    r.sharpness = v[7];
    r.grad_angle_deg = v[8];
    r.grad_norm_l = v[9];
    r.wall_ms = v[10];
    rec.rows.push_back(r);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Shared pieces

inline double accuracy(const MlpSpec& spec, const ParamVector& theta, const LabeledPoints& points) {
  if (points.size() == 0) return 0.0;
  const Tensor logits = forward(spec, theta, points.features());
  const auto targets = pseudo_targets(logits, 0.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < points.size(); ++i) correct += targets.pseudo_labels[i] == points.y[i];
  return static_cast<double>(correct) / static_cast<double>(points.size());
}

struct FixedLabel {
  std::size_t index = 0;  // position in the unlabeled pool
  int label = 0;
  double confidence = 0.0;

  bool operator==(const FixedLabel&) const = default;
};

/// The k rows with the highest max-softmax probability, ties broken by lower
/// row index, with their argmax labels.
inline std::vector<FixedLabel> select_topk_confident(const Tensor& logits, std::size_t k) {
  const auto t = pseudo_targets(logits, 0.0);
  if (k > t.size()) throw ConfigError("cannot fix more labels than there are unlabeled points", "fixed_label.num_fix");
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return t.confidences[a] > t.confidences[b]; });
  std::vector<FixedLabel> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], t.pseudo_labels[order[i]], t.confidences[order[i]]});
  return out;
}

inline std::vector<FixedLabel> select_topk_confident(const MlpSpec& spec, const ParamVector& theta,
                                                     const UnlabeledPoints& pool, std::size_t k) {
  return select_topk_confident(forward(spec, theta, pool.features()), k);
}

using RowObserver = std::function<void(const RecordRow&)>;

/// State of one training run: model, evaluation EMA, optimizer, gradient
/// memory, sampler and augmentation streams, and the record being built.
///
/// Every random stream is derived from cfg.seed. The labeled batches and
/// their augmentation draw from their own streams, so they are identical
/// across methods with the same seed.
class TrainingRun {
 public:
  TrainingRun(const TrainConfig& cfg, const SslDataset& ds, std::string method, RowObserver observer = {})
      : cfg_(validated(cfg)),
        ds_(ds),
        spec_(resolve_spec(cfg, ds)),
        theta_(init_params(spec_, derive_seed(cfg.seed, 0x1A17))),
        eval_theta_(theta_),
        sgd_(cfg.optimizer),
        buffer_(theta_, cfg.flatmatch.alpha),
        sampler_(ds, cfg.labeled_batch, cfg.mu, derive_seed(cfg.seed, 0x5A3)),
        labeled_aug_(make_rng(cfg.seed, 0xA1)),
        unlabeled_aug_(make_rng(cfg.seed, 0xA2)),
        perturb_aug_(make_rng(cfg.seed, 0xA3)),
        observer_(std::move(observer)),
        test_x_(ds.test().features()),
        started_(std::chrono::steady_clock::now()) {
    sgd_.velocity = ParamVector();
    record_.method = std::move(method);
  }

  const MlpSpec& spec() const { return spec_; }
  const ParamVector& theta() const { return theta_; }
  const ParamVector& eval_theta() const { return eval_theta_; }
  const ExperimentRecord& record() const { return record_; }
  ExperimentRecord& record() { return record_; }
  const GradBuffer& buffer() const { return buffer_; }
  std::size_t steps_done() const { return step_; }

  /// Labeled cross-entropy only.
  void supervised_step() {
    const auto idx = sampler_.next_labeled();
    const Tensor xl = labeled_view(idx);
    const auto yl = labels_of(idx);
    auto [loss, grad] = labeled_loss_and_grad(spec_, theta_, xl, yl);
    StepStats s;
    s.loss_l = loss;
    s.grad_norm_l = norm(grad);
    s.angle = gradient_angle(grad, grad).degrees;
    sgd_step(theta_, grad, sgd_);
    finish_step(s);
  }

  /// Labeled cross-entropy plus thresholded pseudo-label consistency: targets
  /// from the weak view at theta, loss on the strong view.
  void ssl_step() {
    const auto idx = sampler_.next_labeled();
    const auto uidx = sampler_.next_unlabeled();
    const Tensor xl = labeled_view(idx);
    const auto yl = labels_of(idx);
    const Tensor xw = augmented_batch(ds_.unlabeled(), uidx, cfg_.augment, Strength::weak, ds_.centroid(),
                                      unlabeled_aug_);
    const Tensor xs = augmented_batch(ds_.unlabeled(), uidx, cfg_.augment, Strength::strong, ds_.centroid(),
                                      unlabeled_aug_);

    auto [loss_l, grad_l] = labeled_loss_and_grad(spec_, theta_, xl, yl);
    const auto targets = pseudo_targets(forward(spec_, theta_, xw), cfg_.ssl_tau);
    StepStats s;
    s.loss_l = loss_l;
    s.mask_rate = targets.mask_rate;
    s.grad_norm_l = norm(grad_l);
    ParamVector total = grad_l;
    if (targets.selected() > 0 && cfg_.lambda_u > 0.0) {
      auto [loss_u, grad_u] = value_and_grad(theta_, [&](const Tensor& p) {
        return consistency_loss(forward(spec_, p, xs), targets);
      });
      s.loss_u = loss_u;
      axpy(cfg_.lambda_u, grad_u, total);
    }
    s.angle = gradient_angle(grad_l, total).degrees;
    sgd_step(theta_, total, sgd_);
    finish_step(s);
  }

  /// One FlatMatch update. With a perturbation pool, the worst-case direction
  /// comes from a batch of that pool instead of the labeled batch.
  void flatmatch_step(const LabeledPoints* perturb_pool = nullptr, EpochShuffler* perturb_sampler = nullptr) {
    const auto& fm = cfg_.flatmatch;
    const auto idx = sampler_.next_labeled();
    const auto uidx = sampler_.next_unlabeled();
    FlatMatchBatch batch;
    batch.x_labeled = labeled_view(idx);
    batch.y_labeled = labels_of(idx);
    if (fm.lambda_xsharp > 0.0) {
      batch.x_anchor = augmented_batch(ds_.unlabeled(), uidx, cfg_.augment, Strength::weak, ds_.centroid(),
                                       unlabeled_aug_);
      batch.x_student = fm.student_view == StudentView::strong
                            ? augmented_batch(ds_.unlabeled(), uidx, cfg_.augment, Strength::strong,
                                              ds_.centroid(), unlabeled_aug_)
                            : batch.x_anchor;
    }
    if (perturb_pool && perturb_sampler) {
      const auto pidx = perturb_sampler->take(cfg_.labeled_batch);
      batch.x_perturb = augmented_batch(*perturb_pool, pidx, cfg_.augment, Strength::weak, ds_.centroid(),
                                        perturb_aug_);
      for (auto i : pidx) batch.y_perturb.push_back(perturb_pool->y[i]);
    }
    const auto d = flatmatch::flatmatch_step(spec_, theta_, batch, fm, sgd_, buffer_);
    StepStats s;
    s.loss_l = d.loss_l;
    s.xsharp = d.xsharp;
    s.mask_rate = d.mask_rate;
    s.grad_norm_l = d.grad_norm_l;
    s.angle = gradient_angle(d.grad_l, d.grad_total).degrees;
    finish_step(s);
  }

  /// Evaluates now and appends a record row (also called by the step
  /// functions whenever an evaluation is due).
  void evaluate() {
    RecordRow r;
    r.step = step_;
    const double n = static_cast<double>(std::max<std::size_t>(1, since_eval_));
    r.loss_l = acc_.loss_l / n;
    r.loss_u = acc_.loss_u / n;
    r.xsharp = acc_.xsharp / n;
    r.mask_rate = acc_.mask_rate / n;
    r.grad_angle_deg = last_.angle;
    r.grad_norm_l = last_.grad_norm_l;
    r.test_acc = accuracy(spec_, eval_theta_, ds_.test());
    r.test_err = 1.0 - r.test_acc;
    r.test_acc_raw = accuracy(spec_, theta_, ds_.test());
    if (ds_.test().size() > 0) {
      r.sharpness = sharpness_probe(spec_, eval_theta_, test_x_, ds_.test().y, cfg_.sharpness_rho).sharpness;
    }
    if (cfg_.log_wall_time) {
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started_).count();
    }
    record_.rows.push_back(r);
    acc_ = {};
    since_eval_ = 0;
    if (observer_) observer_(r);
  }

  /// Per-step angle trace (every step, not only evaluation points).
  const std::vector<double>& angle_trace() const { return angles_; }

 private:
  struct StepStats {
    double loss_l = 0.0, loss_u = 0.0, xsharp = 0.0, mask_rate = 0.0, grad_norm_l = 0.0, angle = 0.0;
  };

  static const TrainConfig& validated(const TrainConfig& cfg) {
    cfg.validate();
    return cfg;
  }

  static MlpSpec resolve_spec(const TrainConfig& cfg, const SslDataset& ds) {
    MlpSpec s = cfg.model;
    s.input_dim = ds.dim();
    s.num_classes = static_cast<std::size_t>(ds.num_classes());
    return s;
  }

  Tensor labeled_view(const std::vector<std::size_t>& idx) {
    return augmented_batch(ds_.labeled(), idx, cfg_.augment, Strength::weak, ds_.centroid(), labeled_aug_);
  }

  std::vector<int> labels_of(const std::vector<std::size_t>& idx) const {
    std::vector<int> y;
    y.reserve(idx.size());
    for (auto i : idx) y.push_back(ds_.labeled().y[i]);
    return y;
  }

  void finish_step(const StepStats& s) {
    const double decay = cfg_.eval_ema;
    auto e = eval_theta_.values();
    const auto t = theta_.values();
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = decay * e[i] + (1.0 - decay) * t[i];
    acc_.loss_l += s.loss_l;
    acc_.loss_u += s.loss_u;
    acc_.xsharp += s.xsharp;
    acc_.mask_rate += s.mask_rate;
    last_ = s;
    angles_.push_back(s.angle);
    ++since_eval_;
    ++step_;
    if (step_ % cfg_.eval_every == 0 || step_ == cfg_.total_steps()) evaluate();
  }

  TrainConfig cfg_;
  const SslDataset& ds_;
  MlpSpec spec_;
  ParamVector theta_;
  ParamVector eval_theta_;
  SgdState sgd_;
  GradBuffer buffer_;
  BatchSampler sampler_;
  Rng labeled_aug_;
  Rng unlabeled_aug_;
  Rng perturb_aug_;
  RowObserver observer_;
  Tensor test_x_;
  std::chrono::steady_clock::time_point started_;
  ExperimentRecord record_;
  StepStats acc_;
  StepStats last_;
  std::vector<double> angles_;
  std::size_t since_eval_ = 0;
  std::size_t step_ = 0;
};

struct TrainResult {
  ParamVector theta;       // raw weights
  ParamVector eval_theta;  // EMA weights used for evaluation
  ExperimentRecord record;
  std::vector<double> angle_trace;
  double elapsed_ms = 0.0;
  double step_ms = 0.0;  // mean wall time per optimization step
  // Fixed-label runs only.
  std::vector<FixedLabel> fixed_labels;
  ParamVector theta_at_fix;
};

namespace detail {

template <class StepFn>
TrainResult run_loop(TrainingRun& run, std::size_t steps, StepFn&& step) {
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < steps; ++i) step();
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  TrainResult r;
  r.theta = run.theta();
  r.eval_theta = run.eval_theta();
  r.record = run.record();
  r.angle_trace = run.angle_trace();
  r.elapsed_ms = ms;
  r.step_ms = steps ? ms / static_cast<double>(steps) : 0.0;
  return r;
}

}  // namespace detail

inline TrainResult train_supervised(const TrainConfig& cfg, const SslDataset& ds, RowObserver observer = {}) {
  if (ds.labeled().size() == 0) throw ConfigError("the labeled set is empty");
  TrainingRun run(cfg, ds, "supervised", std::move(observer));
  return detail::run_loop(run, cfg.total_steps(), [&] { run.supervised_step(); });
}

inline TrainResult train_ssl_baseline(const TrainConfig& cfg, const SslDataset& ds, RowObserver observer = {}) {
  if (ds.labeled().size() == 0 || ds.unlabeled().size() == 0) {
    throw ConfigError("semi-supervised training needs labeled and unlabeled data");
  }
  TrainingRun run(cfg, ds, "ssl_baseline", std::move(observer));
  return detail::run_loop(run, cfg.total_steps(), [&] { run.ssl_step(); });
}

inline TrainResult train_flatmatch(const TrainConfig& cfg, const SslDataset& ds, RowObserver observer = {}) {
  if (ds.labeled().size() == 0 || ds.unlabeled().size() == 0) {
    throw ConfigError("semi-supervised training needs labeled and unlabeled data");
  }
  TrainingRun run(cfg, ds, cfg.flatmatch.efficient ? "flatmatch_e" : "flatmatch", std::move(observer));
  return detail::run_loop(run, cfg.total_steps(), [&] { run.flatmatch_step(); });
}

/// Pre-trains with the consistency objective for pretrain_epochs, freezes the
/// pseudo-labels of the num_fix most confident unlabeled points, then runs
/// FlatMatch with the worst-case perturbation computed on the labeled set
/// augmented by those points. The fixed points stay in the unlabeled pool
/// for the cross-sharpness term.
inline TrainResult train_flatmatch_fixed_labels(const TrainConfig& cfg, const SslDataset& ds,
                                                RowObserver observer = {}) {
  if (!cfg.fixed_label.enabled) throw ConfigError("fixed-label training is not enabled", "fixed_label.enabled");
  if (cfg.flatmatch.efficient) {
    throw ConfigError("fixed-label training uses the two-propagation variant", "flatmatch.efficient");
  }
  if (ds.labeled().size() == 0 || ds.unlabeled().size() == 0) {
    throw ConfigError("semi-supervised training needs labeled and unlabeled data");
  }
  if (cfg.fixed_label.num_fix > ds.unlabeled().size()) {
    throw ConfigError("exceeds the unlabeled pool size", "fixed_label.num_fix");
  }
  cfg.validate();

  TrainingRun run(cfg, ds, "flatmatch_fixlabel", std::move(observer));
  const std::size_t pre_steps = cfg.fixed_label.pretrain_epochs * cfg.steps_per_epoch;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < pre_steps; ++i) run.ssl_step();

  const ParamVector theta_at_fix = run.theta();
  const auto fixed = select_topk_confident(run.spec(), theta_at_fix, ds.unlabeled(), cfg.fixed_label.num_fix);

  LabeledPoints pool = ds.labeled();
  for (const auto& f : fixed) pool.push(ds.unlabeled().point(f.index), f.label, ds.unlabeled().source[f.index]);
  std::optional<EpochShuffler> pool_sampler;
  if (!fixed.empty()) pool_sampler.emplace(pool.size(), derive_seed(cfg.seed, 0xF1));

  for (std::size_t i = pre_steps; i < cfg.total_steps(); ++i) {
    if (pool_sampler) {
      run.flatmatch_step(&pool, &*pool_sampler);
    } else {
      run.flatmatch_step();
    }
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  TrainResult r;
  r.theta = run.theta();
  r.eval_theta = run.eval_theta();
  r.record = run.record();
  r.angle_trace = run.angle_trace();
  r.elapsed_ms = ms;
  r.step_ms = ms / static_cast<double>(cfg.total_steps());
  for (std::size_t k = 0; k < fixed.size(); ++k) {
    // The labels used for the perturbation are the ones frozen above.
    r.fixed_labels.push_back({fixed[k].index, pool.y[ds.labeled().size() + k], fixed[k].confidence});
  }
  r.theta_at_fix = theta_at_fix;
  return r;
}

}  // namespace flatmatch
