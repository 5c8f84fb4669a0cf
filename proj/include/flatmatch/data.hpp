#pragma once

// Synthetic 2-D classification problems, the labeled/unlabeled/test split,
// weak and strong point augmentations, and the mini-batch sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "flatmatch/error.hpp"
#include "flatmatch/rng.hpp"
#include "flatmatch/tensor.hpp"

namespace flatmatch {

enum class DatasetKind { two_moons, blobs, rings };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::two_moons: return "two_moons";
    case DatasetKind::blobs: return "blobs";
    case DatasetKind::rings: return "rings";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "two_moons") return DatasetKind::two_moons;
  if (s == "blobs") return DatasetKind::blobs;
  if (s == "rings") return DatasetKind::rings;
  throw ConfigError("unknown dataset kind '" + s + "' (two_moons | blobs | rings)", "data.kind");
}

/// Row-major points with class labels. `source` is the index of each point in
/// the dataset it was split from.
struct LabeledPoints {
  std::size_t dim = 2;
  std::vector<double> x;
  std::vector<int> y;
  std::vector<std::size_t> source;

  std::size_t size() const { return y.size(); }
  std::span<const double> point(std::size_t i) const { return {x.data() + i * dim, dim}; }

  void push(std::span<const double> p, int label, std::size_t src) {
    x.insert(x.end(), p.begin(), p.end());
    y.push_back(label);
    source.push_back(src);
  }

  /// The whole set as a [size x dim] tensor.
  Tensor features() const { return Tensor::matrix(size(), dim, x); }
};

struct UnlabeledPoints {
  std::size_t dim = 2;
  std::vector<double> x;
  std::vector<std::size_t> source;

  std::size_t size() const { return source.size(); }
  std::span<const double> point(std::size_t i) const { return {x.data() + i * dim, dim}; }
  Tensor features() const { return Tensor::matrix(size(), dim, x); }
};

/// Labeled set, unlabeled pool, and test set of one semi-supervised problem.
///
/// Ground-truth labels of the unlabeled pool are kept apart from the pool
/// itself; only diagnostics read them through oracle_unlabeled_labels().
class SslDataset {
 public:
  SslDataset() = default;
  SslDataset(LabeledPoints labeled, UnlabeledPoints unlabeled, std::vector<int> hidden_labels,
             LabeledPoints test, int num_classes)
      : labeled_(std::move(labeled)),
        unlabeled_(std::move(unlabeled)),
        hidden_(std::move(hidden_labels)),
        test_(std::move(test)),
        num_classes_(num_classes) {
    if (hidden_.size() != unlabeled_.size()) {
      throw ContractError("SslDataset: hidden label count does not match the unlabeled pool");
    }
    compute_centroid();
  }

  const LabeledPoints& labeled() const { return labeled_; }
  const UnlabeledPoints& unlabeled() const { return unlabeled_; }
  const LabeledPoints& test() const { return test_; }
  int num_classes() const { return num_classes_; }
  std::size_t dim() const { return labeled_.dim; }

  /// Mean of every training input (labeled and unlabeled).
  std::span<const double> centroid() const { return centroid_; }

  /// True classes of the unlabeled pool, -1 where unknown. Not for training.
  std::span<const int> oracle_unlabeled_labels() const { return hidden_; }

 private:
  void compute_centroid() {
    centroid_.assign(dim(), 0.0);
    const std::size_t n = labeled_.size() + unlabeled_.size();
    if (n == 0) return;
    for (std::size_t i = 0; i < labeled_.x.size(); ++i) centroid_[i % dim()] += labeled_.x[i];
    for (std::size_t i = 0; i < unlabeled_.x.size(); ++i) centroid_[i % dim()] += unlabeled_.x[i];
    for (auto& c : centroid_) c /= static_cast<double>(n);
  }

  LabeledPoints labeled_;
  UnlabeledPoints unlabeled_;
  std::vector<int> hidden_;
  LabeledPoints test_;
  int num_classes_ = 0;
  std::vector<double> centroid_;
};

// ---------------------------------------------------------------------------
// Generators

/// Two interleaving half circles, two concentric rings (radii 1 and 0.5), or
/// Gaussian blobs centred evenly on a circle of radius 3. Classes differ in size by at most
/// one and the point order is shuffled.
inline LabeledPoints make_dataset(DatasetKind kind, std::size_t total, double noise, int num_classes,
                                  std::uint64_t seed) {
  if ((kind == DatasetKind::two_moons || kind == DatasetKind::rings) && num_classes != 2) {
    throw ConfigError(to_string(kind) + " has exactly 2 classes, got " + std::to_string(num_classes),
                      "data.num_classes");
  }
  if (num_classes < 2) throw ConfigError("must be >= 2", "data.num_classes");
  if (total < 2 * static_cast<std::size_t>(num_classes)) {
    throw ConfigError("needs at least 2 points per class", "data.total");
  }
  if (noise < 0.0) throw ConfigError("must be >= 0", "data.noise");

  Rng rng = make_rng(seed, 0xDA7A);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double pi = std::numbers::pi;

  LabeledPoints out;
  out.dim = 2;
  const auto classes = static_cast<std::size_t>(num_classes);
  for (std::size_t i = 0; i < total; ++i) {
    const int c = static_cast<int>(i % classes);
    double px = 0.0, py = 0.0;
    switch (kind) {
      case DatasetKind::two_moons: {
        const double t = pi * unit(rng);
        if (c == 0) {
          px = std::cos(t);
          py = std::sin(t);
        } else {
          px = 1.0 - std::cos(t);
          py = 0.5 - std::sin(t);
        }
        break;
      }
      case DatasetKind::rings: {
        const double t = 2.0 * pi * unit(rng);
        const double r = c == 0 ? 1.0 : 0.5;
        px = r * std::cos(t);
        py = r * std::sin(t);
        break;
      }
      case DatasetKind::blobs: {
        const double a = 2.0 * pi * static_cast<double>(c) / static_cast<double>(classes);
        px = 3.0 * std::cos(a);
        py = 3.0 * std::sin(a);
        break;
      }
    }
    if (noise > 0.0) {
      px += noise * gauss(rng);
      py += noise * gauss(rng);
    }
    const double p[2] = {px, py};
    out.push(p, c, i);
  }

  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  LabeledPoints shuffled;
  shuffled.dim = 2;
  for (std::size_t i = 0; i < total; ++i) shuffled.push(out.point(order[i]), out.y[order[i]], i);
  return shuffled;
}

/// Splits a labeled dataset into test, labeled (exactly labels_per_class per
/// class) and unlabeled parts. The three parts partition the input.
inline SslDataset split_ssl(const LabeledPoints& full, int num_classes, std::size_t labels_per_class,
                            double test_fraction, std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) throw ConfigError("must be in [0, 1)", "data.test_fraction");
  const std::size_t n = full.size();
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  const std::size_t n_train = n - n_test;
  const std::size_t n_labeled = labels_per_class * static_cast<std::size_t>(num_classes);
  if (n_labeled > n_train) {
    throw ConfigError("requested " + std::to_string(n_labeled) + " labeled points but only " +
                          std::to_string(n_train) + " training points exist",
                      "data.labels_per_class");
  }

  Rng rng = make_rng(seed, 0x5B17);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  LabeledPoints test, labeled;
  UnlabeledPoints unlabeled;
  test.dim = labeled.dim = unlabeled.dim = full.dim;
  std::vector<int> hidden;
  for (std::size_t k = 0; k < n_test; ++k) test.push(full.point(order[k]), full.y[order[k]], order[k]);

  std::vector<std::size_t> taken(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::size_t> rest;
  for (std::size_t k = n_test; k < n; ++k) {
    const std::size_t i = order[k];
    const int c = full.y[i];
    if (c < 0 || c >= num_classes) throw ContractError("split_ssl: label out of range");
    auto& t = taken[static_cast<std::size_t>(c)];
    if (t < labels_per_class) {
      ++t;
      labeled.push(full.point(i), c, i);
    } else {
      rest.push_back(i);
    }
  }
  for (std::size_t c = 0; c < taken.size(); ++c) {
    if (taken[c] < labels_per_class) {
      throw ConfigError("class " + std::to_string(c) + " has only " + std::to_string(taken[c]) +
                            " training points for " + std::to_string(labels_per_class) + " labels",
                        "data.labels_per_class");
    }
  }
  for (std::size_t i : rest) {
    const auto p = full.point(i);
    unlabeled.x.insert(unlabeled.x.end(), p.begin(), p.end());
    unlabeled.source.push_back(i);
    hidden.push_back(full.y[i]);
  }
  return SslDataset(std::move(labeled), std::move(unlabeled), std::move(hidden), std::move(test), num_classes);
}

// ---------------------------------------------------------------------------
// Augmentation

enum class Strength { weak, strong };

struct AugmentationSpec {
  double weak_jitter_std = 0.05;
  double strong_jitter_std = 0.15;
  double strong_rotation_max_deg = 30.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (weak_jitter_std < 0.0) throw ConfigError("must be >= 0", "augment.weak_jitter_std");
    if (strong_jitter_std < weak_jitter_std) {
      throw ConfigError("must be >= weak_jitter_std", "augment.strong_jitter_std");
    }
    if (strong_rotation_max_deg < 0.0 || strong_rotation_max_deg > 180.0) {
      throw ConfigError("must be in [0, 180]", "augment.strong_rotation_max_deg");
    }
  }
};

/// Rotates a 2-D point about `center` by `degrees` (counter-clockwise).
inline std::vector<double> rotate_about(std::span<const double> x, std::span<const double> center, double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  const double dx = x[0] - center[0], dy = x[1] - center[1];
  return {center[0] + c * dx - s * dy, center[1] + s * dx + c * dy};
}

/// Weak: Gaussian jitter. Strong: rotation about `centroid` by a uniform angle
/// in [-max, +max] (2-D inputs only), then stronger jitter.
inline std::vector<double> augment(std::span<const double> x, const AugmentationSpec& spec, Strength strength,
                                   std::span<const double> centroid, Rng& rng) {
  std::vector<double> out(x.begin(), x.end());
  double jitter = spec.weak_jitter_std;
  if (strength == Strength::strong) {
    jitter = spec.strong_jitter_std;
    if (x.size() == 2 && spec.strong_rotation_max_deg > 0.0) {
      std::uniform_real_distribution<double> angle(-spec.strong_rotation_max_deg, spec.strong_rotation_max_deg);
      out = rotate_about(x, centroid, angle(rng));
    }
  }
  if (jitter > 0.0) {
    std::normal_distribution<double> gauss(0.0, jitter);
    for (auto& v : out) v += gauss(rng);
  }
  return out;
}

/// Gathers rows `index` of a point set into a [batch x dim] tensor, augmenting
/// each row.
template <class Points>
Tensor augmented_batch(const Points& points, std::span<const std::size_t> index, const AugmentationSpec& spec,
                       Strength strength, std::span<const double> centroid, Rng& rng) {
  std::vector<double> rows;
  rows.reserve(index.size() * points.dim);
  for (std::size_t i : index) {
    auto p = augment(points.point(i), spec, strength, centroid, rng);
    rows.insert(rows.end(), p.begin(), p.end());
  }
  return Tensor::matrix(index.size(), points.dim, std::move(rows));
}

template <class Points>
Tensor plain_batch(const Points& points, std::span<const std::size_t> index) {
  std::vector<double> rows;
  rows.reserve(index.size() * points.dim);
  for (std::size_t i : index) {
    auto p = points.point(i);
    rows.insert(rows.end(), p.begin(), p.end());
  }
  return Tensor::matrix(index.size(), points.dim, std::move(rows));
}

// ---------------------------------------------------------------------------
// Sampling

/// Endless stream of indices in [0, n): a fresh permutation every pass.
class EpochShuffler {
 public:
  EpochShuffler(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    if (n == 0) throw ConfigError("cannot sample from an empty set");
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    pos_ = n;
  }

  std::vector<std::size_t> take(std::size_t count) {
    std::vector<std::size_t> out(count);
    for (auto& v : out) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      v = order_[pos_++];
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Yields labeled batches of `labeled_batch` and unlabeled batches of
/// mu * labeled_batch. The two streams use independent generators, so the
/// labeled stream is the same whether or not unlabeled batches are drawn, and
/// the pairing of labeled and unlabeled batches is random.
class BatchSampler {
 public:
  struct Batch {
    std::vector<std::size_t> labeled;
    std::vector<std::size_t> unlabeled;
  };

  BatchSampler(const SslDataset& ds, std::size_t labeled_batch, std::size_t mu, std::uint64_t seed)
      : labeled_batch_(check_positive(labeled_batch, "train.labeled_batch")),
        mu_(check_positive(mu, "train.mu")),
        labeled_(ds.labeled().size(), derive_seed(seed, 0x1AB)),
        unlabeled_(ds.unlabeled().size() ? ds.unlabeled().size() : 1, derive_seed(seed, 0x11AB)),
        has_unlabeled_(ds.unlabeled().size() > 0) {}

  std::size_t labeled_batch_size() const { return labeled_batch_; }
  std::size_t unlabeled_batch_size() const { return mu_ * labeled_batch_; }

  std::vector<std::size_t> next_labeled() { return labeled_.take(labeled_batch_); }

  std::vector<std::size_t> next_unlabeled() {
    if (!has_unlabeled_) throw ConfigError("the unlabeled pool is empty");
    return unlabeled_.take(unlabeled_batch_size());
  }

  Batch next() {
    Batch b;
    b.labeled = next_labeled();
    b.unlabeled = next_unlabeled();
    return b;
  }

 private:
  static std::size_t check_positive(std::size_t v, const char* field) {
    if (v < 1) throw ConfigError("must be >= 1", field);
    return v;
  }

  std::size_t labeled_batch_;
  std::size_t mu_;
  EpochShuffler labeled_;
  EpochShuffler unlabeled_;
  bool has_unlabeled_;
};

// ---------------------------------------------------------------------------
// CSV dump / load: x0,...,x{d-1},label,split

inline void save_dataset_csv(const std::filesystem::path& path, const SslDataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (std::size_t k = 0; k < ds.dim(); ++k) out << 'x' << k << ',';
  out << "label,split\n";
  auto row = [&](std::span<const double> p, int label, const char* split) {
    for (double v : p) out << v << ',';
    out << label << ',' << split << '\n';
  };
  for (std::size_t i = 0; i < ds.labeled().size(); ++i) row(ds.labeled().point(i), ds.labeled().y[i], "labeled");
  for (std::size_t i = 0; i < ds.unlabeled().size(); ++i) row(ds.unlabeled().point(i), -1, "unlabeled");
  for (std::size_t i = 0; i < ds.test().size(); ++i) row(ds.test().point(i), ds.test().y[i], "test");
}

/// Unlabeled rows come back with unknown (-1) hidden labels.
inline SslDataset load_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty dataset file " + path.string());
  std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 3) throw ConfigError("dataset header needs x columns, label and split");
  const std::size_t dim = columns - 2;

  LabeledPoints labeled, test;
  UnlabeledPoints unlabeled;
  labeled.dim = test.dim = unlabeled.dim = dim;
  std::vector<int> hidden;
  int max_label = -1;
  std::size_t row_index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> p(dim);
    for (std::size_t k = 0; k < dim; ++k) {
      if (!std::getline(ss, cell, ',')) throw ConfigError("short row in " + path.string() + ": " + line);
      p[k] = std::stod(cell);
    }
    std::string label_s, split;
    if (!std::getline(ss, label_s, ',') || !std::getline(ss, split)) {
      throw ConfigError("short row in " + path.string() + ": " + line);
    }
    const int label = std::stoi(label_s);
    max_label = std::max(max_label, label);
    if (split == "labeled") {
      labeled.push(p, label, row_index);
    } else if (split == "test") {
      test.push(p, label, row_index);
    } else if (split == "unlabeled") {
      unlabeled.x.insert(unlabeled.x.end(), p.begin(), p.end());
      unlabeled.source.push_back(row_index);
      hidden.push_back(-1);
    } else {
      throw ConfigError("unknown split '" + split + "' in " + path.string());
    }
    ++row_index;
  }
  return SslDataset(std::move(labeled), std::move(unlabeled), std::move(hidden), std::move(test), max_label + 1);
}

}  // namespace flatmatch
