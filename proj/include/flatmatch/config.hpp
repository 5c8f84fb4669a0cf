#pragma once

// TrainConfig <-> nested JSON, with dotted-path overrides.
//
// Resolution order: built-in defaults, then the config file, then each
// `key=value` override in command-line order. Unknown keys and ill-typed
// values raise ConfigError naming the dotted field.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flatmatch/error.hpp"
#include "flatmatch/trainers.hpp"

namespace flatmatch {

using Json = nlohmann::json;

namespace detail {

inline std::string enum_name(EmaConvention e) { return e == EmaConvention::conventional ? "conventional" : "inverted"; }
inline std::string enum_name(ConsistencyKind k) { return k == ConsistencyKind::hard_ce ? "hard_ce" : "soft_kl"; }
inline std::string enum_name(StudentView v) { return v == StudentView::strong ? "strong" : "same"; }
inline std::string enum_name(MaskNormalization m) { return m == MaskNormalization::batch ? "batch" : "selected"; }

template <class E>
E parse_enum(const std::string& s, std::initializer_list<E> options, const std::string& field) {
  std::string known;
  for (E e : options) {
    if (enum_name(e) == s) return e;
    known += (known.empty() ? "" : ", ") + enum_name(e);
  }
  throw ConfigError("unknown value '" + s + "' (expected one of: " + known + ")", field);
}

// Reads one typed leaf; every accessor reports the dotted path on failure.
class Reader {
 public:
  Reader(const Json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("expected a table", prefix_.empty() ? "<root>" : prefix_);
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  Reader table(const std::string& key) const { return Reader(j_.at(key), path(key)); }

  const Json& raw(const std::string& key) const { return j_.at(key); }

  void check_keys(std::initializer_list<const char*> allowed) const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || it.key() == a;
      if (!ok) throw ConfigError("unknown key", path(it.key()));
    }
  }

  void get(const std::string& key, double& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError("expected a number", path(key));
    out = v.get<double>();
  }

  void get(const std::string& key, bool& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError("expected true or false", path(key));
    out = v.get<bool>();
  }

  void get(const std::string& key, std::size_t& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("expected a non-negative integer", path(key));
    }
    out = v.get<std::size_t>();
  }

  void get(const std::string& key, std::uint64_t& out, int) const {
    std::size_t tmp = out;
    get(key, tmp);
    out = tmp;
  }

  void get(const std::string& key, int& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError("expected an integer", path(key));
    out = v.get<int>();
  }

  void get(const std::string& key, std::string& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError("expected a string", path(key));
    out = v.get<std::string>();
  }

 private:
  const Json& j_;
  std::string prefix_;
};

}  // namespace detail

inline Json to_json(const TrainConfig& c) {
  using detail::enum_name;
  const auto& fm = c.flatmatch;
  return Json{
      {"seed", c.seed},
      {"model", {{"hidden", c.model.hidden_dims}, {"activation", "relu"}}},
      {"data",
       {{"kind", to_string(c.data.kind)},
        {"total", c.data.total},
        {"noise", c.data.noise},
        {"num_classes", c.data.num_classes},
        {"labels_per_class", c.data.labels_per_class},
        {"test_fraction", c.data.test_fraction}}},
      {"augment",
       {{"weak_jitter_std", c.augment.weak_jitter_std},
        {"strong_jitter_std", c.augment.strong_jitter_std},
        {"strong_rotation_max_deg", c.augment.strong_rotation_max_deg}}},
      {"train",
       {{"epochs", c.epochs},
        {"steps_per_epoch", c.steps_per_epoch},
        {"labeled_batch", c.labeled_batch},
        {"mu", c.mu},
        {"eval_every", c.eval_every},
        {"eval_ema", c.eval_ema}}},
      {"optim", {{"lr", c.optimizer.lr}, {"momentum", c.optimizer.momentum}, {"weight_decay", c.optimizer.weight_decay}}},
      {"ssl", {{"tau", c.ssl_tau}, {"lambda_u", c.lambda_u}}},
      {"flatmatch",
       {{"rho", fm.rho},
        {"alpha", fm.alpha},
        {"tau", fm.tau},
        {"lambda_xsharp", fm.lambda_xsharp},
        {"efficient", fm.efficient},
        {"ema_convention", enum_name(fm.ema_convention)},
        {"loss", enum_name(fm.loss)},
        {"threshold_in_xsharp", fm.threshold_in_xsharp},
        {"student_view", enum_name(fm.student_view)},
        {"mask_normalization", enum_name(fm.mask_normalization)}}},
      {"fixed_label",
       {{"enabled", c.fixed_label.enabled},
        {"num_fix", c.fixed_label.num_fix},
        {"pretrain_epochs", c.fixed_label.pretrain_epochs}}},
      {"diag", {{"sharpness_rho", c.sharpness_rho}, {"log_wall_time", c.log_wall_time}}},
  };
}

/// Applies the keys present in `j` on top of `c`; absent keys keep their
/// current values. Does not validate ranges (see TrainConfig::validate).
inline void merge_json(TrainConfig& c, const Json& j) {
  using namespace detail;
  Reader root(j, "");
  root.check_keys({"seed", "model", "data", "augment", "train", "optim", "ssl", "flatmatch", "fixed_label", "diag"});
  root.get("seed", c.seed, 0);

  if (root.has("model")) {
    auto m = root.table("model");
    m.check_keys({"hidden", "activation"});
    if (m.has("hidden")) {
      const auto& h = m.raw("hidden");
      if (!h.is_array()) throw ConfigError("expected a list of widths", "model.hidden");
      std::vector<std::size_t> dims;
      for (const auto& w : h) {
        if (!w.is_number_integer() || w.get<long long>() < 1) {
          throw ConfigError("every hidden width must be a positive integer", "model.hidden");
        }
        dims.push_back(w.get<std::size_t>());
      }
      c.model.hidden_dims = dims;
    }
    std::string act = "relu";
    m.get("activation", act);
    if (act != "relu") throw ConfigError("unknown activation '" + act + "' (expected relu)", "model.activation");
  }

  if (root.has("data")) {
    auto d = root.table("data");
    d.check_keys({"kind", "total", "noise", "num_classes", "labels_per_class", "test_fraction"});
    if (d.has("kind")) {
      std::string k;
      d.get("kind", k);
      c.data.kind = parse_dataset_kind(k);
    }
    d.get("total", c.data.total);
    d.get("noise", c.data.noise);
    d.get("num_classes", c.data.num_classes);
    d.get("labels_per_class", c.data.labels_per_class);
    d.get("test_fraction", c.data.test_fraction);
  }

  if (root.has("augment")) {
    auto a = root.table("augment");
    a.check_keys({"weak_jitter_std", "strong_jitter_std", "strong_rotation_max_deg"});
    a.get("weak_jitter_std", c.augment.weak_jitter_std);
    a.get("strong_jitter_std", c.augment.strong_jitter_std);
    a.get("strong_rotation_max_deg", c.augment.strong_rotation_max_deg);
  }

  if (root.has("train")) {
    auto t = root.table("train");
    t.check_keys({"epochs", "steps_per_epoch", "labeled_batch", "mu", "eval_every", "eval_ema"});
    t.get("epochs", c.epochs);
    t.get("steps_per_epoch", c.steps_per_epoch);
    t.get("labeled_batch", c.labeled_batch);
    t.get("mu", c.mu);
    t.get("eval_every", c.eval_every);
    t.get("eval_ema", c.eval_ema);
  }

  if (root.has("optim")) {
    auto o = root.table("optim");
    o.check_keys({"lr", "momentum", "weight_decay"});
    o.get("lr", c.optimizer.lr);
    o.get("momentum", c.optimizer.momentum);
    o.get("weight_decay", c.optimizer.weight_decay);
  }

  if (root.has("ssl")) {
    auto s = root.table("ssl");
    s.check_keys({"tau", "lambda_u"});
    s.get("tau", c.ssl_tau);
    s.get("lambda_u", c.lambda_u);
  }

  if (root.has("flatmatch")) {
    auto f = root.table("flatmatch");
    auto& fm = c.flatmatch;
    f.check_keys({"rho", "alpha", "tau", "lambda_xsharp", "efficient", "ema_convention", "loss",
                  "threshold_in_xsharp", "student_view", "mask_normalization"});
    f.get("rho", fm.rho);
    f.get("alpha", fm.alpha);
    f.get("tau", fm.tau);
    f.get("lambda_xsharp", fm.lambda_xsharp);
    f.get("efficient", fm.efficient);
    f.get("threshold_in_xsharp", fm.threshold_in_xsharp);
    std::string s;
    if (f.has("ema_convention")) {
      f.get("ema_convention", s);
      fm.ema_convention = parse_enum(s, {EmaConvention::conventional, EmaConvention::inverted},
                                     "flatmatch.ema_convention");
    }
    if (f.has("loss")) {
      f.get("loss", s);
      fm.loss = parse_enum(s, {ConsistencyKind::hard_ce, ConsistencyKind::soft_kl}, "flatmatch.loss");
    }
    if (f.has("student_view")) {
      f.get("student_view", s);
      fm.student_view = parse_enum(s, {StudentView::strong, StudentView::same}, "flatmatch.student_view");
    }
    if (f.has("mask_normalization")) {
      f.get("mask_normalization", s);
      fm.mask_normalization =
          parse_enum(s, {MaskNormalization::batch, MaskNormalization::selected}, "flatmatch.mask_normalization");
    }
  }

  if (root.has("fixed_label")) {
    auto f = root.table("fixed_label");
    f.check_keys({"enabled", "num_fix", "pretrain_epochs"});
    f.get("enabled", c.fixed_label.enabled);
    f.get("num_fix", c.fixed_label.num_fix);
    f.get("pretrain_epochs", c.fixed_label.pretrain_epochs);
  }

  if (root.has("diag")) {
    auto d = root.table("diag");
    d.check_keys({"sharpness_rho", "log_wall_time"});
    d.get("sharpness_rho", c.sharpness_rho);
    d.get("log_wall_time", c.log_wall_time);
  }
}

/// Parses `text` as JSON; syntax errors become ConfigError.
inline Json parse_config_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

inline Json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Turns `a.b.c=value` into the nested object {"a": {"b": {"c": value}}}.
/// The value is read as JSON when it parses (numbers, booleans, lists) and as
/// a bare string otherwise.
inline Json override_to_json(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value", "--set");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("empty path component", key);
    parts.push_back(p);
  }
  Json out = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) out = Json{{*it, out}};
  return out;
}

/// defaults < file < overrides, then validated.
inline TrainConfig resolve_config(const TrainConfig& defaults, const Json* file,
                                  const std::vector<std::string>& overrides) {
  TrainConfig c = defaults;
  if (file) merge_json(c, *file);
  for (const auto& o : overrides) merge_json(c, override_to_json(o));
  c.validate();
  return c;
}

}  // namespace flatmatch
