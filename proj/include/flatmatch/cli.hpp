#pragma once

// Experiment runner behind the `flatmatch` command line tool.
//
//   flatmatch run --exp <name> [--config file.json] [--seed S] [--seeds N]
//                 [--set key=value]... [--out dir]
//   flatmatch compare <record.csv>... [--out summary.csv]
//
// Exit codes: 0 success, 2 invalid configuration or input, 3 numeric failure
// during training (records written so far stay on disk).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flatmatch/checkpoint.hpp"
#include "flatmatch/config.hpp"
#include "flatmatch/data.hpp"
#include "flatmatch/diagnostics.hpp"
#include "flatmatch/error.hpp"
#include "flatmatch/trainers.hpp"

#ifndef FLATMATCH_VERSION
#define FLATMATCH_VERSION "0.1.0"
#endif
#ifndef FLATMATCH_GIT_REV
#define FLATMATCH_GIT_REV "unknown"
#endif

namespace flatmatch::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"supervised",         "ssl_baseline", "flatmatch", "flatmatch_e",
                                                 "flatmatch_fixlabel", "landscape",    "sweep"};
  return names;
}

struct RunOptions {
  std::string exp;
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 1;
  std::vector<std::string> overrides;
  fs::path out = "runs";
  // sweep
  std::string param;
  std::vector<std::string> values;
  // landscape and sweep: which trainer to run
  std::string method = "flatmatch";
  // landscape
  std::size_t grid = 21;
  double range = 1.0;
  std::size_t workers = 1;
  // independent (value, seed) runs executed concurrently
  std::size_t jobs = 1;
};

/// Everything a run leaves behind, relative to the output root.
struct RunManifest {
  nlohmann::json config;
  std::vector<std::uint64_t> seeds;
  std::string experiment;
  std::string started;
  std::string finished;
  std::string status = "ok";
  std::vector<std::string> files;

  nlohmann::json to_json() const {
    return {{"experiment", experiment},
            {"version", FLATMATCH_VERSION},
            {"git_rev", FLATMATCH_GIT_REV},
            {"config", config},
            {"seeds", seeds},
            {"started", started},
            {"finished", finished},
            {"status", status},
            {"files", files}};
  }
};

namespace detail {

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// Collects output paths from concurrent workers.
class FileLog {
 public:
  explicit FileLog(fs::path root) : root_(std::move(root)) {}

  void add(const fs::path& p) {
    std::lock_guard lock(mu_);
    files_.push_back(fs::relative(p, root_).generic_string());
  }

  std::vector<std::string> sorted() const {
    std::lock_guard lock(mu_);
    auto f = files_;
    std::sort(f.begin(), f.end());
    return f;
  }

 private:
  fs::path root_;
  mutable std::mutex mu_;
  std::vector<std::string> files_;
};

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Writes the CSV header up front and appends each evaluation row as it is
/// produced, so an aborted run keeps every completed row.
class StreamingRecord {
 public:
  explicit StreamingRecord(const fs::path& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << kRecordHeader << '\n';
    out_.flush();
  }

  RowObserver observer() {
    return [this](const RecordRow& r) {
      out_ << record_csv_line(r) << '\n';
      out_.flush();
    };
  }

 private:
  std::ofstream out_;
};

inline TrainResult train_method(const std::string& method, TrainConfig cfg, const SslDataset& ds,
                                RowObserver observer) {
  if (method == "supervised") return train_supervised(cfg, ds, std::move(observer));
  if (method == "ssl_baseline") return train_ssl_baseline(cfg, ds, std::move(observer));
  if (method == "flatmatch") return train_flatmatch(cfg, ds, std::move(observer));
  if (method == "flatmatch_e") {
    cfg.flatmatch.efficient = true;
    return train_flatmatch(cfg, ds, std::move(observer));
  }
  if (method == "flatmatch_fixlabel") {
    cfg.fixed_label.enabled = true;
    return train_flatmatch_fixed_labels(cfg, ds, std::move(observer));
  }
  throw ConfigError("unknown training method '" + method + "'", "--method");
}

/// Trains one (config, seed) pair into `dir`.
inline TrainResult train_into(const std::string& method, const TrainConfig& cfg, const fs::path& dir, FileLog& log) {
  fs::create_directories(dir);
  const auto ds = make_ssl_dataset(cfg);
  save_dataset_csv(dir / "dataset.csv", ds);
  log.add(dir / "dataset.csv");
  write_json(dir / "config.json", to_json(cfg));
  log.add(dir / "config.json");

  TrainResult result;
  {
    StreamingRecord rec(dir / "record.csv");
    log.add(dir / "record.csv");
    result = train_method(method, cfg, ds, rec.observer());
  }
  save_checkpoint(dir / "model", result.theta);
  save_checkpoint(dir / "model_ema", result.eval_theta);
  for (const char* stem : {"model", "model_ema"}) {
    log.add(dir / (std::string(stem) + ".layout"));
    log.add(dir / (std::string(stem) + ".bin"));
  }
  if (!result.fixed_labels.empty()) {
    std::ofstream fx(dir / "fixed_labels.csv");
    fx << "unlabeled_index,source_index,label,confidence\n";
    for (const auto& f : result.fixed_labels) {
      fx << f.index << ',' << ds.unlabeled().source[f.index] << ',' << f.label << ','
         << flatmatch::detail::format_double(f.confidence) << '\n';
    }
    log.add(dir / "fixed_labels.csv");
  }
  return result;
}

/// Loss-landscape scans around the evaluation weights of a trained model.
/// Probe batches are strongly augmented, as raw points can be fit exactly.
inline void scan_into(const TrainConfig& cfg, const TrainResult& trained, const RunOptions& opt, const fs::path& dir,
                      FileLog& log) {
  const auto ds = make_ssl_dataset(cfg);
  MlpSpec spec = cfg.model;
  spec.input_dim = ds.dim();
  spec.num_classes = static_cast<std::size_t>(ds.num_classes());
  const ParamVector& theta = trained.eval_theta;

  Rng rng = make_rng(cfg.seed, 0x1A4D);
  EpochShuffler lab(ds.labeled().size(), derive_seed(cfg.seed, 0x1A4E));
  const auto lidx = lab.take(cfg.labeled_batch);
  const Tensor xl = augmented_batch(ds.labeled(), lidx, cfg.augment, Strength::strong, ds.centroid(), rng);
  std::vector<int> yl;
  for (auto i : lidx) yl.push_back(ds.labeled().y[i]);

  std::vector<std::size_t> uidx(std::min<std::size_t>(512, ds.unlabeled().size()));
  for (std::size_t i = 0; i < uidx.size(); ++i) uidx[i] = i;
  const Tensor xu = augmented_batch(ds.unlabeled(), uidx, cfg.augment, Strength::strong, ds.centroid(), rng);

  const auto labeled = labeled_probe(spec, xl, yl);
  const auto unlabeled = unlabeled_probe(spec, theta, xu, 0.0);
  const std::uint64_t s1 = derive_seed(cfg.seed, 0xD1), s2 = derive_seed(cfg.seed, 0xD2);

  auto save = [&](const std::string& name, const LandscapeGrid& g) {
    save_landscape(dir / (name + ".csv"), dir / (name + ".json"), g);
    log.add(dir / (name + ".csv"));
    log.add(dir / (name + ".json"));
  };
  save("landscape_labeled_1d", landscape_1d(theta, labeled, s1, opt.range, opt.grid, true, opt.workers, "labeled"));
  save("landscape_unlabeled_1d",
       landscape_1d(theta, unlabeled, s1, opt.range, opt.grid, true, opt.workers, "unlabeled"));
  save("landscape_labeled_2d",
       landscape_2d(theta, labeled, s1, s2, opt.range, opt.range, opt.grid, true, opt.workers, "labeled"));
  save("landscape_unlabeled_2d",
       landscape_2d(theta, unlabeled, s1, s2, opt.range, opt.range, opt.grid, true, opt.workers, "unlabeled"));
}

/// Runs `count` independent tasks on up to `jobs` threads; rethrows the
/// first failure after all workers stop.
template <class Task>
void parallel_for(std::size_t count, std::size_t jobs, Task&& task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for fewer than two values.
inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace detail

/// Executes one `run` invocation. Throws ConfigError / NumericError; see
/// main() for the exit-code mapping.
inline RunManifest run(const RunOptions& opt, std::ostream& log_out = std::cout) {
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), opt.exp) == names.end()) {
    throw ConfigError("unknown experiment '" + opt.exp + "'", "--exp");
  }
  if (opt.seeds < 1) throw ConfigError("must be >= 1", "--seeds");

  std::optional<Json> file;
  if (opt.config) file = load_config_file(*opt.config);
  std::vector<std::string> overrides = opt.overrides;
  if (opt.seed) overrides.insert(overrides.begin(), "seed=" + std::to_string(*opt.seed));
  const TrainConfig cfg = resolve_config(TrainConfig{}, file ? &*file : nullptr, overrides);

  std::string method = opt.exp;
  if (opt.exp == "landscape" || opt.exp == "sweep") method = opt.method;
  if (method == "landscape" || method == "sweep") throw ConfigError("must name a trainer", "--method");

  std::vector<std::string> sweep_values;
  if (opt.exp == "sweep") {
    if (opt.param.empty()) throw ConfigError("a sweep needs --param", "--param");
    for (const auto& v : opt.values)
      for (const auto& item : detail::split_list(v)) sweep_values.push_back(item);
    if (sweep_values.empty()) throw ConfigError("a sweep needs --values", "--values");
    for (const auto& v : sweep_values) resolve_config(cfg, nullptr, {opt.param + "=" + v});
  }
  // Probe the method up front so a bad name fails before any output exists.
  if (method != "supervised" && method != "ssl_baseline" && method != "flatmatch" && method != "flatmatch_e" &&
      method != "flatmatch_fixlabel") {
    throw ConfigError("unknown training method '" + method + "'", "--method");
  }

  RunManifest manifest;
  manifest.experiment = opt.exp;
  manifest.config = to_json(cfg);
  manifest.started = detail::utc_timestamp();
  for (std::size_t i = 0; i < opt.seeds; ++i) manifest.seeds.push_back(cfg.seed + i);

  const fs::path root = opt.out / opt.exp;
  fs::create_directories(root);
  detail::FileLog files(opt.out);

  auto finish = [&](const std::string& status) {
    manifest.status = status;
    manifest.finished = detail::utc_timestamp();
    manifest.files = files.sorted();
    detail::write_json(root / "manifest.json", manifest.to_json());
  };

  auto seed_dir = [](const fs::path& base, std::uint64_t seed) { return base / ("seed_" + std::to_string(seed)); };

  try {
    if (opt.exp == "sweep") {
      const std::size_t nv = sweep_values.size(), ns = manifest.seeds.size();
      std::vector<double> final_err(nv * ns, 0.0);
      detail::parallel_for(nv * ns, opt.jobs, [&](std::size_t k) {
        const auto& value = sweep_values[k / ns];
        TrainConfig c = resolve_config(cfg, nullptr, {opt.param + "=" + value});
        c.seed = manifest.seeds[k % ns];
        const auto r = detail::train_into(method, c, seed_dir(root / (opt.param + "=" + value), c.seed), files);
        final_err[k] = r.record.rows.back().test_err;
      });
      std::ofstream sum(root / "summary.csv");
      sum << "param,value,seeds,mean_test_err,std_test_err,median_test_err\n";
      for (std::size_t v = 0; v < nv; ++v) {
        std::vector<double> e(final_err.begin() + static_cast<std::ptrdiff_t>(v * ns),
                              final_err.begin() + static_cast<std::ptrdiff_t>((v + 1) * ns));
        using flatmatch::detail::format_double;
        sum << opt.param << ',' << sweep_values[v] << ',' << ns << ',' << format_double(detail::mean_of(e)) << ','
            << format_double(detail::std_of(e)) << ',' << format_double(detail::median_of(e)) << '\n';
        log_out << opt.param << '=' << sweep_values[v] << "  median test error " << detail::median_of(e) << '\n';
      }
      sum.close();
      files.add(root / "summary.csv");
    } else {
      detail::parallel_for(manifest.seeds.size(), opt.jobs, [&](std::size_t k) {
        TrainConfig c = cfg;
        c.seed = manifest.seeds[k];
        const fs::path dir = seed_dir(root, c.seed);
        const auto r = detail::train_into(method, c, dir, files);
        if (opt.exp == "landscape") detail::scan_into(c, r, opt, dir, files);
        log_out << opt.exp << " seed " << c.seed << "  test error " << r.record.rows.back().test_err << '\n';
      });
    }
  } catch (const NumericError&) {
    finish("numeric_failure");
    throw;
  } catch (const ConfigError&) {
    finish("config_error");
    throw;
  }
  finish("ok");
  return manifest;
}

struct CompareRow {
  std::string method;
  std::size_t n = 0;
  double mean_err = 0.0;
  double std_err = 0.0;
};

/// Method label of a record path: `<method>/seed_<s>/record.csv` gives
/// `<method>`, anything else its file stem.
inline std::string method_label(const fs::path& p) {
  const auto parent = p.parent_path();
  if (parent.filename().string().rfind("seed_", 0) == 0 && !parent.parent_path().filename().empty()) {
    return parent.parent_path().filename().string();
  }
  return p.stem().string();
}

/// Mean and sample std of the final test error per method, in first-seen
/// order. Throws ConfigError when records disagree on the schema or on the
/// evaluation schedule.
inline std::vector<CompareRow> compare(const std::vector<fs::path>& paths) {
  if (paths.empty()) throw ConfigError("no records given");
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> errors;
  std::optional<std::vector<std::size_t>> schedule;
  for (const auto& p : paths) {
    const auto rec = read_record_csv(p);
    if (rec.rows.empty()) throw ConfigError("record " + p.string() + " has no rows");
    std::vector<std::size_t> steps;
    for (const auto& r : rec.rows) steps.push_back(r.step);
    if (!schedule) {
      schedule = steps;
    } else if (*schedule != steps) {
      throw ConfigError("record " + p.string() + " does not share the evaluation schedule of " + paths[0].string());
    }
    const auto label = method_label(p);
    if (!errors.count(label)) order.push_back(label);
    errors[label].push_back(rec.rows.back().test_err);
  }
  std::vector<CompareRow> rows;
  for (const auto& m : order) rows.push_back({m, errors[m].size(), detail::mean_of(errors[m]), detail::std_of(errors[m])});
  return rows;
}

/// Markdown table of test error in percent, the lowest mean in bold.
inline std::string format_compare(const std::vector<CompareRow>& rows) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].mean_err < rows[best].mean_err) best = i;
  std::ostringstream s;
  s << "| method | seeds | test error (%) |\n|---|---|---|\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(2) << 100.0 * rows[i].mean_err << " ± " << 100.0 * rows[i].std_err;
    const std::string text = i == best ? "**" + cell.str() + "**" : cell.str();
    s << "| " << rows[i].method << " | " << rows[i].n << " | " << text << " |\n";
  }
  return s.str();
}

inline void write_compare_csv(const fs::path& path, const std::vector<CompareRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "method,seeds,mean_test_err,std_test_err\n";
  using flatmatch::detail::format_double;
  for (const auto& r : rows)
    out << r.method << ',' << r.n << ',' << format_double(r.mean_err) << ',' << format_double(r.std_err) << '\n';
}

/// Parses argv and dispatches; returns the process exit code.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"FlatMatch experiment runner"};
  app.require_subcommand(1);

  RunOptions opt;
  std::uint64_t seed = 0;
  std::string config;
  auto* run_cmd = app.add_subcommand("run", "train and evaluate one experiment");
  run_cmd->add_option("--exp", opt.exp, "experiment")->required()->check(CLI::IsMember(experiment_names()));
  auto* config_opt = run_cmd->add_option("--config", config, "JSON config file");
  auto* seed_opt = run_cmd->add_option("--seed", seed, "first seed (overrides the config)");
  run_cmd->add_option("--seeds", opt.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);
  run_cmd->add_option("--set", opt.overrides, "dotted key=value override (repeatable)");
  run_cmd->add_option("--out", opt.out, "output directory");
  run_cmd->add_option("--param", opt.param, "sweep: dotted config key");
  run_cmd->add_option("--values", opt.values, "sweep: comma-separated values")->delimiter(',');
  run_cmd->add_option("--method", opt.method, "trainer for landscape and sweep");
  run_cmd->add_option("--grid", opt.grid, "landscape: points per axis")->check(CLI::Range(3, 1001));
  run_cmd->add_option("--range", opt.range, "landscape: half width of each axis")->check(CLI::PositiveNumber);
  run_cmd->add_option("--workers", opt.workers, "landscape: scanner threads")->check(CLI::PositiveNumber);
  run_cmd->add_option("--jobs", opt.jobs, "concurrent runs")->check(CLI::PositiveNumber);

  std::vector<std::string> record_paths;
  std::string compare_out;
  auto* cmp_cmd = app.add_subcommand("compare", "summarize final test error across records");
  cmp_cmd->add_option("records", record_paths, "record CSV files")->required();
  cmp_cmd->add_option("--out", compare_out, "also write the summary as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*run_cmd) {
      if (*config_opt) opt.config = config;
      if (*seed_opt) opt.seed = seed;
      const auto m = run(opt, out);
      out << "wrote " << m.files.size() << " files under " << (opt.out / opt.exp).string() << '\n';
    } else {
      std::vector<fs::path> paths(record_paths.begin(), record_paths.end());
      const auto rows = compare(paths);
      out << format_compare(rows);
      if (!compare_out.empty()) write_compare_csv(compare_out, rows);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DomainError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace flatmatch::cli
