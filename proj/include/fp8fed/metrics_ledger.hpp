// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fp8fed/fp8_codec.hpp"

namespace fp8fed {

struct RoundEntry {
  int round = 0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
  std::uint64_t cum_bytes = 0;  // filled in by record_round
  double eval_acc = 0.0;
  double eval_loss = 0.0;
  double wall_ms = 0.0;
  // Server-side objective of the aggregate and of the plain federated
  // average; NaN when the round used plain averaging.
  double server_mse = std::numeric_limits<double>::quiet_NaN();
  double fedavg_mse = std::numeric_limits<double>::quiet_NaN();
};

class RoundLedger {
 public:
  const std::vector<RoundEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const RoundEntry& back() const { return entries_.back(); }
  std::uint64_t total_bytes() const { return entries_.empty() ? 0 : entries_.back().cum_bytes; }

  void append(RoundEntry e) {
    const int expected = entries_.empty() ? 1 : entries_.back().round + 1;
    if (e.round != expected) {
      throw Error("out-of-order round " + std::to_string(e.round) + ", expected " + std::to_string(expected));
    }
    e.cum_bytes = total_bytes() + e.uplink_bytes + e.downlink_bytes;
    entries_.push_back(e);
  }

  /// Copy with every byte count multiplied by factor.
  RoundLedger scaled(std::uint64_t factor) const {
    RoundLedger out;
    for (RoundEntry e : entries_) {
      e.uplink_bytes *= factor;
      e.downlink_bytes *= factor;
      out.append(e);
    }
    return out;
  }

 private:
  std::vector<RoundEntry> entries_;
};

inline void record_round(RoundLedger& ledger, const RoundEntry& entry) { ledger.append(entry); }

/// Trailing moving average over up to `window` rounds.
inline std::vector<double> smooth(const std::vector<double>& xs, int window) {
  if (window < 1) throw Error("smoothing window must be >= 1");
  std::vector<double> out(xs.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sum += xs[i];
    if (i >= static_cast<std::size_t>(window)) sum -= xs[i - static_cast<std::size_t>(window)];
    out[i] = sum / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

struct GainReport {
  double threshold = 0.0;
  int base_round = 0;
  int test_round = 0;
  std::uint64_t base_bytes = 0;
  std::uint64_t test_bytes = 0;
  double gain = 0.0;
};

struct GainOptions {
  int window = 5;
};

namespace detail {

inline std::vector<double> accuracies(const RoundLedger& l) {
  std::vector<double> acc;
  for (const auto& e : l.entries()) acc.push_back(e.eval_acc);
  return acc;
}

inline std::size_t first_reaching(const std::vector<double>& curve, double threshold) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i] >= threshold) return i;
  }
  return curve.size();
}

}  // namespace detail

/// Gain of `test` over `base` in cumulative bytes needed to first reach the
/// highest smoothed accuracy that both runs attain.
inline GainReport compute_gain_curves(const RoundLedger& base, const std::vector<double>& base_acc,
                                      const RoundLedger& test, const std::vector<double>& test_acc,
                                      const GainOptions& opt = {}) {
  if (base.empty() || test.empty()) throw Error("compute_gain: empty ledger");
  if (base_acc.size() != base.size() || test_acc.size() != test.size()) {
    throw Error("compute_gain: accuracy curve length mismatch");
  }
  const auto sb = smooth(base_acc, opt.window);
  const auto st = smooth(test_acc, opt.window);
  GainReport r;
  r.threshold = std::min(*std::max_element(sb.begin(), sb.end()), *std::max_element(st.begin(), st.end()));
  const std::size_t ib = detail::first_reaching(sb, r.threshold);
  const std::size_t it = detail::first_reaching(st, r.threshold);
  if (ib == sb.size() || it == st.size()) {
    std::ostringstream msg;
    msg << "compute_gain: threshold " << r.threshold << " not reached (base max "
        << *std::max_element(sb.begin(), sb.end()) << ", test max " << *std::max_element(st.begin(), st.end())
        << ")";
    throw Error(msg.str());
  }
  r.base_round = base.entries()[ib].round;
  r.test_round = test.entries()[it].round;
  r.base_bytes = base.entries()[ib].cum_bytes;
  r.test_bytes = test.entries()[it].cum_bytes;
  if (r.test_bytes == 0) throw Error("compute_gain: test run reached threshold with zero bytes");
  r.gain = static_cast<double>(r.base_bytes) / static_cast<double>(r.test_bytes);
  return r;
}

inline GainReport compute_gain(const RoundLedger& base, const RoundLedger& test, const GainOptions& opt = {}) {
  return compute_gain_curves(base, detail::accuracies(base), test, detail::accuracies(test), opt);
}

/// Key: value summary lines, in insertion order.
using Summary = std::vector<std::pair<std::string, std::string>>;

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline constexpr const char* kMetricsHeader = "round,uplink_bytes,downlink_bytes,cum_bytes,eval_acc,eval_loss,wall_ms";

inline std::string metrics_csv(const RoundLedger& ledger) {
  std::ostringstream out;
  out << kMetricsHeader << '\n';
  for (const auto& e : ledger.entries()) {
    char wall[64];
    std::snprintf(wall, sizeof(wall), "%.3f", e.wall_ms);
    out << e.round << ',' << e.uplink_bytes << ',' << e.downlink_bytes << ',' << e.cum_bytes << ','
        << format_double(e.eval_acc) << ',' << format_double(e.eval_loss) << ',' << wall << '\n';
  }
  return out.str();
}

inline RoundLedger parse_metrics_csv(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw Error(origin + ": unexpected metrics header");
  RoundLedger ledger;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    RoundEntry e;
    unsigned long long up = 0, down = 0, cum = 0;
    char acc[64], loss[64];
    if (std::sscanf(line.c_str(), "%d,%llu,%llu,%llu,%63[^,],%63[^,],%lf", &e.round, &up, &down, &cum, acc, loss,
                    &e.wall_ms) != 7) {
      throw Error(origin + ":" + std::to_string(lineno) + ": malformed metrics row");
    }
    e.uplink_bytes = up;
    e.downlink_bytes = down;
    e.eval_acc = std::strtod(acc, nullptr);
    e.eval_loss = std::strtod(loss, nullptr);
    ledger.append(e);
    if (ledger.back().cum_bytes != cum) {
      throw Error(origin + ":" + std::to_string(lineno) + ": cum_bytes is not the running total");
    }
  }
  return ledger;
}

inline std::string server_opt_csv(const RoundLedger& ledger) {
  std::ostringstream out;
  out << "round,server_mse,fedavg_mse\n";
  for (const auto& e : ledger.entries()) {
    out << e.round << ',' << format_double(e.server_mse) << ',' << format_double(e.fedavg_mse) << '\n';
  }
  return out.str();
}

inline std::string summary_text(const Summary& s) {
  std::string out;
  for (const auto& [k, v] : s) out += k + ": " + v + "\n";
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << contents;
  out.close();
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes config.ini, metrics.csv, summary.txt and, when any round used the
/// server optimizer, server_opt.csv into `dir`.
inline void persist_run(const std::filesystem::path& dir, const std::string& config_text,
                        const RoundLedger& ledger, const Summary& summary) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "config.ini", config_text);
  write_file(dir / "metrics.csv", metrics_csv(ledger));
  write_file(dir / "summary.txt", summary_text(summary));
  const bool has_server = std::any_of(ledger.entries().begin(), ledger.entries().end(),
                                      [](const RoundEntry& e) { return !std::isnan(e.server_mse); });
  if (has_server) write_file(dir / "server_opt.csv", server_opt_csv(ledger));
}

}  // namespace fp8fed
