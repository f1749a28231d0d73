// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fp8fed/config.hpp"
#include "fp8fed/fed_orchestrator.hpp"
#include "fp8fed/fp8_codec.hpp"
#include "fp8fed/metrics_ledger.hpp"
#include "fp8fed/theory_bench.hpp"
#include "fp8fed/wire.hpp"

namespace fs = std::filesystem;
using namespace fp8fed;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
};

void add_common(CLI::App* app, CommonFlags& f, bool needs_config) {
  auto* opt = app->add_option("--config", f.config, "INI run configuration")->check(CLI::ExistingFile);
  if (needs_config) opt->required();
  app->add_option("--seed", f.seed, "Seed override");
  app->add_option("--threads", f.threads, "Worker threads; results do not depend on it")->check(CLI::PositiveNumber);
  app->add_option("--out", f.out, "Output directory");
}

RunConfig load_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : parse_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.threads) cfg.threads = *f.threads;
  if (!f.out.empty()) cfg.out = f.out;
  return cfg;
}

int cmd_simulate(const CommonFlags& flags) {
  RunConfig cfg = load_config(flags);
  cfg.task = "simulate";
  auto [train, eval] = load_datasets(cfg);
  cfg = with_data_shape(cfg, train);
  const std::vector<ClientRecord> clients = partition(train, cfg.partition_spec());
  const ModelSpec spec = cfg.model_spec();
  const FedConfig fed = cfg.fed_config();
  const RunResult r = run_federated(clients, eval, spec, fed);

  std::uint64_t up = 0, down = 0;
  for (const auto& e : r.ledger.entries()) {
    up += e.uplink_bytes;
    down += e.downlink_bytes;
  }
  const Summary summary{
      {"final_acc", format_double(r.final_eval.accuracy)},
      {"final_loss", format_double(r.final_eval.loss)},
      {"rounds", std::to_string(fed.rounds)},
      {"clients", std::to_string(clients.size())},
      {"active_per_round", std::to_string(std::lround(fed.participation * static_cast<double>(clients.size())))},
      {"uplink_bytes", std::to_string(up)},
      {"downlink_bytes", std::to_string(down)},
      {"total_bytes", std::to_string(r.ledger.total_bytes())},
  };
  persist_run(cfg.out, config_to_ini(cfg), r.ledger, summary);
  std::cout << summary_text(summary) << "wrote " << cfg.out << '\n';
  return 0;
}

int cmd_verify(const CommonFlags& flags) {
  RunConfig cfg = load_config(flags);
  const BenchReport report = run_bench_suite(cfg.bench, cfg.seed);
  std::cout << report.text();
  if (!flags.out.empty()) {
    fs::create_directories(flags.out);
    write_file(fs::path(flags.out) / "bench_summary.txt", report.text());
    write_file(fs::path(flags.out) / "bench_series.csv", report.series_csv());
  }
  const auto failures = report.failures();
  if (failures.empty()) {
    std::cout << "all " << report.checks.size() << " checks passed\n";
    return 0;
  }
  std::cerr << failures.size() << " of " << report.checks.size() << " checks failed:\n";
  for (const auto& f : failures) std::cerr << "  " << f << '\n';
  return 1;
}

std::vector<double> read_numbers(const std::string& path) {
  std::string text = read_file(path);
  for (char& c : text) {
    if (c == ',' || c == ';') c = ' ';
  }
  std::istringstream in(text);
  std::vector<double> xs;
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (*end != '\0') throw Error(path + ": not a number: " + tok);
    xs.push_back(v);
  }
  return xs;
}

struct QuantizeFlags {
  std::string in;
  std::string out;
  std::string format = "e4m3";
  double alpha = 0.0;
  std::string mode = "rand";
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> shape;
  bool decode = false;
};

int cmd_quantize(const QuantizeFlags& q) {
  if (q.decode) {
    const std::string blob = read_file(q.in);
    const QuantizedTensor qt = wire::deserialize(
        std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()));
    std::string text;
    for (double v : decode(qt)) text += format_double(v) + "\n";
    write_file(q.out, text);
    std::cout << "decoded " << qt.size() << " values, format " << qt.format.name() << ", alpha "
              << format_double(qt.alpha) << '\n';
    return 0;
  }
  if (!(q.alpha > 0.0)) throw Error("--alpha is required and must be positive");
  const Fp8Format fmt = detail::parse_format(q.format);
  const ClipParam clip = wire_clip(ClipParam(q.alpha));
  const std::vector<double> x = read_numbers(q.in);
  std::vector<std::uint32_t> shape = q.shape;
  if (shape.empty()) shape = {static_cast<std::uint32_t>(x.size())};
  RandomStream rng(q.seed);
  const QuantMode mode = q.mode == "det" ? QuantMode::kDet : QuantMode::kRand;
  const QuantizedTensor qt = encode(quantize(x, clip, fmt, mode, rng), shape, clip, fmt);
  const std::vector<std::uint8_t> blob = wire::serialize(qt);
  write_file(q.out, std::string(blob.begin(), blob.end()));
  std::cout << "wrote " << blob.size() << " bytes (" << x.size() << " values, " << fmt.name() << ", alpha "
            << format_double(clip.alpha()) << ")\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out, int window) {
  if (dirs.size() < 2) throw Error("report needs a baseline run and at least one other run");
  auto load = [](const std::string& dir) {
    const fs::path p = fs::path(dir) / "metrics.csv";
    return parse_metrics_csv(read_file(p), p.string());
  };
  const RoundLedger base = load(dirs[0]);
  GainOptions opt;
  opt.window = window;
  Summary summary{{"baseline", dirs[0]}};
  for (std::size_t i = 1; i < dirs.size(); ++i) {
    const GainReport g = compute_gain(base, load(dirs[i]), opt);
    const std::string key = fs::path(dirs[i]).filename().string();
    summary.push_back({key + ".gain", format_double(g.gain)});
    summary.push_back({key + ".threshold", format_double(g.threshold)});
    summary.push_back({key + ".base_round", std::to_string(g.base_round)});
    summary.push_back({key + ".test_round", std::to_string(g.test_round)});
    summary.push_back({key + ".base_bytes", std::to_string(g.base_bytes)});
    summary.push_back({key + ".test_bytes", std::to_string(g.test_bytes)});
  }
  std::cout << summary_text(summary);
  if (!out.empty()) {
    fs::create_directories(out);
    write_file(fs::path(out) / "gain.txt", summary_text(summary));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FP8 federated learning simulator"};
  app.require_subcommand(1);

  CommonFlags sim_flags;
  auto* sim = app.add_subcommand("simulate", "Run federated training and write metrics");
  add_common(sim, sim_flags, true);

  CommonFlags verify_flags;
  auto* verify = app.add_subcommand("verify", "Run the convergence and quantizer bench suites");
  add_common(verify, verify_flags, false);

  QuantizeFlags qflags;
  auto* quant = app.add_subcommand("quantize", "Quantize a CSV tensor into an FP8 blob, or decode one");
  quant->add_option("--in", qflags.in, "Input CSV tensor, or blob with --decode")->required()->check(CLI::ExistingFile);
  quant->add_option("--out", qflags.out, "Output blob, or CSV with --decode")->required();
  quant->add_option("--format", qflags.format, "Format such as e4m3");
  quant->add_option("--alpha", qflags.alpha, "Clipping value");
  quant->add_option("--mode", qflags.mode, "det or rand")->check(CLI::IsMember({"det", "rand"}));
  quant->add_option("--seed", qflags.seed, "Seed for stochastic rounding");
  quant->add_option("--shape", qflags.shape, "Tensor shape, e.g. 32,64")->delimiter(',');
  quant->add_flag("--decode", qflags.decode, "Decode a blob back to CSV");

  std::vector<std::string> report_dirs;
  std::string report_out;
  int report_window = GainOptions{}.window;
  auto* report = app.add_subcommand("report", "Communication gain of runs against the first (baseline) run");
  report->add_option("runs", report_dirs, "Run directories; the first is the baseline")->required()->check(
      CLI::ExistingDirectory);
  report->add_option("--out", report_out, "Directory for gain.txt");
  report->add_option("--window", report_window, "Smoothing window in rounds")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (sim->parsed()) return cmd_simulate(sim_flags);
    if (verify->parsed()) return cmd_verify(verify_flags);
    if (quant->parsed()) return cmd_quantize(qflags);
    if (report->parsed()) return cmd_report(report_dirs, report_out, report_window);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
