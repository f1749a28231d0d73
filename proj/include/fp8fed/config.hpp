// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fp8fed/data_partition.hpp"
#include "fp8fed/fed_orchestrator.hpp"
#include "fp8fed/fp8_codec.hpp"
#include "fp8fed/metrics_ledger.hpp"
#include "fp8fed/qat_engine.hpp"
#include "fp8fed/server_optimizer.hpp"
#include "fp8fed/theory_bench.hpp"

namespace fp8fed {

/// One `key = value` line of an INI file.
struct IniEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

struct IniSection {
  std::string name;
  std::size_t line = 0;
  std::vector<IniEntry> entries;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Parses `[section]` headers and `key = value` lines. Blank lines and lines
/// starting with '#' or ';' are ignored. Keys outside a section, repeated
/// sections and repeated keys are errors.
inline std::vector<IniSection> parse_ini(const std::string& text, const std::string& origin) {
  std::vector<IniSection> out;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) { throw Error(origin + ":" + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line[0] == '[') {
      if (line.back() != ']') fail("malformed section header");
      const std::string name = detail::trim(line.substr(1, line.size() - 2));
      if (name.empty()) fail("empty section name");
      for (const auto& s : out) {
        if (s.name == name) fail("duplicate section [" + name + "]");
      }
      out.push_back({name, lineno, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    if (out.empty()) fail("key outside of any section");
    IniEntry e{detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), lineno};
    if (e.key.empty()) fail("empty key");
    for (const auto& prev : out.back().entries) {
      if (prev.key == e.key) fail("duplicate key " + e.key);
    }
    out.back().entries.push_back(std::move(e));
  }
  return out;
}

struct DataConfig {
  std::string source = "synthetic";  // synthetic | csv
  std::string path;                  // training CSV
  std::string eval_path;             // evaluation CSV
  int classes = 10;
  int features = 64;
  int train_examples = 10000;
  int eval_examples = 2000;
  double separation = 4.0;
};

/// Everything a CLI run needs. Defaults follow the i.i.d. recipe: K = 100,
/// C = 0.1, T = 300, U = 10, B = 50, lr = 0.1, weight decay = 0.001.
struct RunConfig {
  std::string task = "simulate";
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out = "runs/default";
  DataConfig data;
  PartitionSpec partition;
  std::vector<int> hidden{32};
  ModelSpec model;
  FedConfig fed;
  BenchConfig bench;

  RunConfig() {
    fed.local.weight_decay = 0.001;
    model.loss = LossKind::kCrossEntropy;
  }

  /// Model dims from the data shape and the hidden widths.
  ModelSpec model_spec() const {
    ModelSpec spec = model;
    spec.dims.clear();
    spec.dims.push_back(data.features);
    for (int h : hidden) spec.dims.push_back(h);
    spec.dims.push_back(data.classes);
    return spec;
  }

  FedConfig fed_config() const {
    FedConfig c = fed;
    c.seed = seed;
    c.threads = threads;
    c.server.link_quantized = c.link_quantized();
    return c;
  }

  PartitionSpec partition_spec() const {
    PartitionSpec p = partition;
    p.seed = seed;
    return p;
  }
};

namespace detail {

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i > 0) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  return out;
}

inline Fp8Format parse_format(const std::string& s) {
  if (s.size() >= 4 && (s[0] == 'e' || s[0] == 'E')) {
    const auto m = s.find_first_of("mM");
    if (m != std::string::npos && m > 1 && m + 1 < s.size()) {
      char* end = nullptr;
      const long e = std::strtol(s.c_str() + 1, &end, 10);
      if (end == s.c_str() + m) {
        const long man = std::strtol(s.c_str() + m + 1, &end, 10);
        if (*end == '\0') {
          Fp8Format f{static_cast<int>(e), static_cast<int>(man)};
          f.validate();
          return f;
        }
      }
    }
  }
  throw Error("expected a format like e4m3");
}

inline std::string format_key(Fp8Format f) {
  return "e" + std::to_string(f.exp_bits) + "m" + std::to_string(f.man_bits);
}

/// Typed view of one section that rejects unread keys on finish().
class SectionReader {
 public:
  SectionReader(const IniSection& s, std::string origin) : s_(s), origin_(std::move(origin)) {
    used_.assign(s.entries.size(), false);
  }

  template <typename T, typename Fn>
  void get(const std::string& key, T& out, Fn&& convert) {
    for (std::size_t i = 0; i < s_.entries.size(); ++i) {
      if (s_.entries[i].key != key) continue;
      used_[i] = true;
      try {
        out = convert(s_.entries[i].value);
      } catch (const Error& e) {
        throw Error(where(s_.entries[i].line) + key + ": " + e.what());
      }
      return;
    }
  }

  void get(const std::string& key, int& out) { get(key, out, to_int); }
  void get(const std::string& key, std::uint64_t& out) { get(key, out, to_u64); }
  void get(const std::string& key, double& out) { get(key, out, to_double); }
  void get(const std::string& key, bool& out) { get(key, out, to_bool); }
  void get(const std::string& key, std::string& out) {
    get(key, out, [](const std::string& v) { return v; });
  }
  void get(const std::string& key, std::vector<int>& out) {
    get(key, out, [](const std::string& v) {
      std::vector<int> xs;
      for (const auto& c : split_list(v)) xs.push_back(to_int(c));
      return xs;
    });
  }
  void get(const std::string& key, std::vector<double>& out) {
    get(key, out, [](const std::string& v) {
      std::vector<double> xs;
      for (const auto& c : split_list(v)) xs.push_back(to_double(c));
      return xs;
    });
  }

  template <typename E>
  void get_enum(const std::string& key, E& out, const std::vector<std::pair<std::string, E>>& names) {
    get(key, out, [&](const std::string& v) {
      for (const auto& [n, e] : names) {
        if (n == v) return e;
      }
      std::string allowed;
      for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : " | ") + n;
      throw Error("expected one of " + allowed);
    });
  }

  void finish() const {
    for (std::size_t i = 0; i < s_.entries.size(); ++i) {
      if (!used_[i]) throw Error(where(s_.entries[i].line) + "unknown key " + s_.name + "." + s_.entries[i].key);
    }
  }

  std::string where(std::size_t line) const { return origin_ + ":" + std::to_string(line) + ": "; }

  static int to_int(const std::string& v) {
    char* end = nullptr;
    errno = 0;
    const long x = std::strtol(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || errno != 0 || x < INT32_MIN || x > INT32_MAX) throw Error("expected an integer");
    return static_cast<int>(x);
  }
  static std::uint64_t to_u64(const std::string& v) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || v[0] == '-' || *end != '\0' || errno != 0) throw Error("expected a non-negative integer");
    return x;
  }
  static double to_double(const std::string& v) {
    char* end = nullptr;
    errno = 0;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || errno != 0 || !std::isfinite(x)) throw Error("expected a number");
    return x;
  }
  static bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw Error("expected true or false");
  }

 private:
  const IniSection& s_;
  std::string origin_;
  std::vector<bool> used_;
};

inline const std::vector<std::pair<std::string, QatMode>>& qat_names() {
  static const std::vector<std::pair<std::string, QatMode>> n{
      {"det", QatMode::kDet}, {"rand", QatMode::kRand}, {"fp32", QatMode::kFp32}};
  return n;
}
inline const std::vector<std::pair<std::string, LossKind>>& loss_names() {
  static const std::vector<std::pair<std::string, LossKind>> n{{"cross_entropy", LossKind::kCrossEntropy},
                                                               {"mse", LossKind::kMse}};
  return n;
}
inline const std::vector<std::pair<std::string, Aggregation>>& aggregation_names() {
  static const std::vector<std::pair<std::string, Aggregation>> n{
      {"uq", Aggregation::kUq}, {"uq+", Aggregation::kUqPlus}, {"fp32", Aggregation::kFp32Baseline}};
  return n;
}
inline const std::vector<std::pair<std::string, CommMode>>& comm_names() {
  static const std::vector<std::pair<std::string, CommMode>> n{
      {"rand", CommMode::kQuantizedRand}, {"det", CommMode::kQuantizedDet}, {"none", CommMode::kNone}};
  return n;
}
inline const std::vector<std::pair<std::string, PartitionScheme>>& scheme_names() {
  static const std::vector<std::pair<std::string, PartitionScheme>> n{{"iid", PartitionScheme::kIid},
                                                                      {"dirichlet", PartitionScheme::kDirichlet}};
  return n;
}
inline const std::vector<std::pair<std::string, ServerObjective>>& objective_names() {
  static const std::vector<std::pair<std::string, ServerObjective>> n{
      {"rand_fixed", ServerObjective::kRandFixed},
      {"rand_resampled", ServerObjective::kRandResampled},
      {"det", ServerObjective::kDet}};
  return n;
}
inline const std::vector<std::pair<std::string, AlphaTarget>>& alpha_target_names() {
  static const std::vector<std::pair<std::string, AlphaTarget>> n{{"next", AlphaTarget::kNext},
                                                                  {"current", AlphaTarget::kCurrent}};
  return n;
}

template <typename E>
std::string name_of(E e, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [n, v] : names) {
    if (v == e) return n;
  }
  return "?";
}

}  // namespace detail

/// Builds a RunConfig from INI text. Omitted keys keep their defaults.
/// Unknown sections or keys, type mismatches and a CSV data source without
/// paths are errors naming the line.
inline RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  for (const IniSection& s : parse_ini(text, origin)) {
    detail::SectionReader r(s, origin);
    if (s.name == "run") {
      r.get("task", cfg.task);
      r.get("seed", cfg.seed);
      r.get("threads", cfg.threads);
      r.get("out", cfg.out);
    } else if (s.name == "data") {
      r.get("source", cfg.data.source);
      r.get("path", cfg.data.path);
      r.get("eval_path", cfg.data.eval_path);
      r.get("classes", cfg.data.classes);
      r.get("features", cfg.data.features);
      r.get("train_examples", cfg.data.train_examples);
      r.get("eval_examples", cfg.data.eval_examples);
      r.get("separation", cfg.data.separation);
      if (cfg.data.source != "synthetic" && cfg.data.source != "csv") {
        throw Error(r.where(s.line) + "data.source must be synthetic or csv");
      }
      if (cfg.data.source == "csv" && (cfg.data.path.empty() || cfg.data.eval_path.empty())) {
        throw Error(r.where(s.line) + "missing required key data.path or data.eval_path for csv source");
      }
    } else if (s.name == "partition") {
      r.get_enum("scheme", cfg.partition.scheme, detail::scheme_names());
      r.get("concentration", cfg.partition.concentration);
      r.get("clients", cfg.partition.clients);
      r.get("max_attempts", cfg.partition.max_attempts);
    } else if (s.name == "model") {
      r.get("hidden", cfg.hidden);
      r.get_enum("loss", cfg.model.loss, detail::loss_names());
      r.get_enum("qat", cfg.model.quant, detail::qat_names());
      r.get("format", cfg.model.format, detail::parse_format);
      r.get("bias", cfg.model.bias);
    } else if (s.name == "federated") {
      r.get("participation", cfg.fed.participation);
      r.get("rounds", cfg.fed.rounds);
      r.get("local_steps", cfg.fed.local.steps);
      r.get("batch", cfg.fed.local.batch);
      r.get("lr", cfg.fed.local.lr);
      r.get("weight_decay", cfg.fed.local.weight_decay);
      r.get_enum("aggregation", cfg.fed.aggregation, detail::aggregation_names());
      r.get_enum("comm", cfg.fed.comm, detail::comm_names());
      r.get("calibration_batch", cfg.fed.calibration_batch);
      r.get("record_wall_time", cfg.fed.record_wall_time);
    } else if (s.name == "server") {
      r.get("gd_steps", cfg.fed.server.gd_steps);
      r.get("lr_grid", cfg.fed.server.lr_grid);
      r.get("alpha_grid_points", cfg.fed.server.alpha_grid_points);
      r.get_enum("objective", cfg.fed.server.objective, detail::objective_names());
      r.get_enum("alpha_target", cfg.fed.server.alpha_target, detail::alpha_target_names());
    } else if (s.name == "bench") {
      BenchConfig& b = cfg.bench;
      r.get("format", b.format, detail::parse_format);
      r.get("unbiased_pairs", b.unbiased_pairs);
      r.get("unbiased_draws", b.unbiased_draws);
      r.get("trials", b.errors.trials);
      r.get("qat_dims", b.qat_dims);
      r.get("qat_rows", b.qat_rows);
      r.get("qat_horizons", b.qat.horizons);
      r.get("qat_seeds", b.qat.seeds);
      r.get("fed_clients", b.fed.clients);
      r.get("fed_dims", b.fed.dims);
      r.get("fed_rounds", b.fed.rounds);
      r.get("fed_local_steps", b.fed.local_steps);
      r.get("fed_seeds", b.fed.seeds);
      r.get("fed_heterogeneity", b.fed.heterogeneity);
    } else {
      throw Error(r.where(s.line) + "unknown section [" + s.name + "]");
    }
    r.finish();
  }
  if (cfg.task != "simulate" && cfg.task != "verify") {
    throw Error(origin + ": run.task must be simulate or verify");
  }
  return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  return parse_config_text(read_file(path), path.string());
}

/// Canonical INI form of every result-determining setting. Thread count and
/// output directory are omitted: they do not change any output.
inline std::string config_to_ini(const RunConfig& c) {
  using detail::name_of;
  std::ostringstream o;
  o << "[run]\ntask = " << c.task << "\nseed = " << c.seed << "\n\n";
  o << "[data]\nsource = " << c.data.source << '\n';
  if (c.data.source == "csv") o << "path = " << c.data.path << "\neval_path = " << c.data.eval_path << '\n';
  o << "classes = " << c.data.classes << "\nfeatures = " << c.data.features
    << "\ntrain_examples = " << c.data.train_examples << "\neval_examples = " << c.data.eval_examples
    << "\nseparation = " << format_double(c.data.separation) << "\n\n";
  o << "[partition]\nscheme = " << name_of(c.partition.scheme, detail::scheme_names())
    << "\nconcentration = " << format_double(c.partition.concentration) << "\nclients = " << c.partition.clients
    << "\nmax_attempts = " << c.partition.max_attempts << "\n\n";
  o << "[model]\nhidden = " << detail::join(c.hidden) << "\nloss = " << name_of(c.model.loss, detail::loss_names())
    << "\nqat = " << name_of(c.model.quant, detail::qat_names()) << "\nformat = " << detail::format_key(c.model.format)
    << "\nbias = " << (c.model.bias ? "true" : "false") << "\n\n";
  o << "[federated]\nparticipation = " << format_double(c.fed.participation) << "\nrounds = " << c.fed.rounds
    << "\nlocal_steps = " << c.fed.local.steps << "\nbatch = " << c.fed.local.batch
    << "\nlr = " << format_double(c.fed.local.lr) << "\nweight_decay = " << format_double(c.fed.local.weight_decay)
    << "\naggregation = " << name_of(c.fed.aggregation, detail::aggregation_names())
    << "\ncomm = " << name_of(c.fed.comm, detail::comm_names()) << "\ncalibration_batch = " << c.fed.calibration_batch
    << "\nrecord_wall_time = " << (c.fed.record_wall_time ? "true" : "false") << "\n\n";
  o << "[server]\ngd_steps = " << c.fed.server.gd_steps << "\nlr_grid = " << detail::join(c.fed.server.lr_grid)
    << "\nalpha_grid_points = " << c.fed.server.alpha_grid_points
    << "\nobjective = " << name_of(c.fed.server.objective, detail::objective_names())
    << "\nalpha_target = " << name_of(c.fed.server.alpha_target, detail::alpha_target_names()) << "\n\n";
  const BenchConfig& b = c.bench;
  o << "[bench]\nformat = " << detail::format_key(b.format) << "\nunbiased_pairs = " << b.unbiased_pairs
    << "\nunbiased_draws = " << b.unbiased_draws << "\ntrials = " << b.errors.trials << "\nqat_dims = " << b.qat_dims
    << "\nqat_rows = " << b.qat_rows << "\nqat_horizons = " << detail::join(b.qat.horizons)
    << "\nqat_seeds = " << b.qat.seeds << "\nfed_clients = " << b.fed.clients << "\nfed_dims = " << b.fed.dims
    << "\nfed_rounds = " << b.fed.rounds << "\nfed_local_steps = " << b.fed.local_steps
    << "\nfed_seeds = " << b.fed.seeds << "\nfed_heterogeneity = " << format_double(b.fed.heterogeneity) << '\n';
  return o.str();
}

/// Training and evaluation sets named by the data section. Synthetic sets
/// are two disjoint slices of one draw, so they share class means.
inline std::pair<Dataset, Dataset> load_datasets(const RunConfig& c) {
  if (c.data.source == "csv") {
    Dataset train = load_csv(c.data.path);
    Dataset eval = load_csv(c.data.eval_path);
    if (train.dims() != eval.dims()) throw Error("training and evaluation CSVs differ in feature count");
    const int classes = std::max(train.classes, eval.classes);
    train.classes = eval.classes = classes;
    return {std::move(train), std::move(eval)};
  }
  if (c.data.train_examples < 1 || c.data.eval_examples < 1) throw Error("example counts must be positive");
  const auto n_train = static_cast<std::size_t>(c.data.train_examples);
  const auto n_eval = static_cast<std::size_t>(c.data.eval_examples);
  const Dataset all = synth_classification(c.data.classes, c.data.features, n_train + n_eval, c.data.separation, c.seed);
  return {all.slice(0, n_train), all.slice(n_train, n_eval)};
}

/// Copy whose data shape matches the loaded training set.
inline RunConfig with_data_shape(RunConfig c, const Dataset& train) {
  c.data.features = static_cast<int>(train.dims());
  c.data.classes = train.classes;
  return c;
}

}  // namespace fp8fed
