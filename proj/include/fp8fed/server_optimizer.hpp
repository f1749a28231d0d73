// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Server-side aggregation by alternating minimization of the weighted
// quantized mean-squared error
//   MSE(w, a) = sum_k (n_k / m) * || Q(w; a) - u_k ||^2
// where u_k are the decoded client uploads: a few gradient steps on w with the
// clip fixed, then a grid search on the clip with w fixed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "fp8fed/fp8_codec.hpp"
#include "fp8fed/random.hpp"

namespace fp8fed {

enum class ServerObjective { kRandFixed, kRandResampled, kDet };

/// Which weights the clip search evaluates against.
enum class AlphaTarget { kNext, kCurrent };

struct ServerOptConfig {
  int gd_steps = 5;
  std::vector<double> lr_grid{0.01, 0.1, 1.0};
  int alpha_grid_points = 50;
  ServerObjective objective = ServerObjective::kRandFixed;
  AlphaTarget alpha_target = AlphaTarget::kNext;
  /// With unquantized links the federated average is the exact minimizer.
  bool link_quantized = true;

  void validate() const {
    if (gd_steps < 1) throw Error("server gd_steps must be >= 1");
    if (alpha_grid_points < 2) throw Error("server alpha_grid_points must be >= 2");
    if (lr_grid.empty()) throw Error("server lr_grid must not be empty");
    for (double lr : lr_grid) {
      if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("server learning rates must be positive");
    }
  }
};

/// Decoded uploads of one tensor from every active client.
struct UploadSet {
  std::vector<Eigen::VectorXd> values;  // u_k
  std::vector<double> weights;          // n_k / m_t
  std::vector<double> clips;            // alpha^k

  std::size_t clients() const { return values.size(); }
  Eigen::Index dims() const { return values.empty() ? 0 : values.front().size(); }

  void validate() const {
    if (values.empty()) throw Error("no uploads to aggregate");
    if (weights.size() != values.size() || clips.size() != values.size()) {
      throw Error("upload set size mismatch");
    }
    for (const auto& v : values) {
      if (v.size() != dims()) throw Error("upload tensor size mismatch");
    }
  }

  Eigen::VectorXd average() const {
    Eigen::VectorXd avg = Eigen::VectorXd::Zero(dims());
    for (std::size_t k = 0; k < values.size(); ++k) avg += weights[k] * values[k];
    return avg;
  }
  double average_clip() const {
    double a = 0.0;
    for (std::size_t k = 0; k < clips.size(); ++k) a += weights[k] * clips[k];
    return a;
  }
};

/// The quantized MSE with its quantizer randomness pinned down according to
/// the configured objective.
class QuantObjective {
 public:
  QuantObjective(Fp8Format fmt, ServerObjective mode, Eigen::Index dims, RandomStream& rng)
      : fmt_(fmt), mode_(mode), rng_(&rng) {
    if (mode_ == ServerObjective::kRandFixed) draws_ = fresh_draws(dims);
  }

  /// Quantizes w onto the grid of alpha.
  Eigen::VectorXd quantize(const Eigen::VectorXd& w, double alpha) {
    const Fp8Grid grid(ClipParam(alpha), fmt_);
    Eigen::VectorXd q(w.size());
    if (mode_ == ServerObjective::kDet) {
      for (Eigen::Index i = 0; i < w.size(); ++i) q(i) = grid.quantize_det(w(i));
      return q;
    }
    const std::vector<double> p = mode_ == ServerObjective::kRandFixed ? draws_ : fresh_draws(w.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      q(i) = grid.quantize_rand(w(i), p[static_cast<std::size_t>(i)]);
    }
    return q;
  }

  double mse(const Eigen::VectorXd& w, double alpha, const UploadSet& up) {
    return mse_of(quantize(w, alpha), up);
  }

  static double mse_of(const Eigen::VectorXd& q, const UploadSet& up) {
    double total = 0.0;
    for (std::size_t k = 0; k < up.clients(); ++k) total += up.weights[k] * (q - up.values[k]).squaredNorm();
    return total;
  }

  /// Straight-through gradient in w: 2 * sum_k (n_k/m)(Q(w) - u_k) inside the
  /// clipping range, zero where w saturates.
  Eigen::VectorXd grad(const Eigen::VectorXd& w, double alpha, const UploadSet& up) {
    const Eigen::VectorXd q = quantize(w, alpha);
    const double limit = Fp8Grid(ClipParam(alpha), fmt_).grid_max();
    double wsum = 0.0;
    for (double wk : up.weights) wsum += wk;
    Eigen::VectorXd g = 2.0 * (wsum * q - up.average());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      if (std::fabs(w(i)) > limit) g(i) = 0.0;
    }
    return g;
  }

  ServerObjective mode() const { return mode_; }

 private:
  std::vector<double> fresh_draws(Eigen::Index n) {
    std::vector<double> p(static_cast<std::size_t>(n));
    for (auto& v : p) v = rng_->uniform();
    return p;
  }

  Fp8Format fmt_;
  ServerObjective mode_;
  RandomStream* rng_;
  std::vector<double> draws_;
};

struct WeightSearch {
  Eigen::VectorXd w;
  double mse = 0.0;
  double lr = 0.0;  // 0 when the federated average itself won
};

/// Gradient descent on w with the clip fixed, started from the federated
/// average; every learning rate in the grid is tried and the lowest final MSE
/// wins, the starting point included.
inline WeightSearch optimize_weights(const UploadSet& up, double alpha_fixed, const ServerOptConfig& cfg,
                                     QuantObjective& obj) {
  up.validate();
  cfg.validate();
  WeightSearch best;
  best.w = up.average();
  best.mse = obj.mse(best.w, alpha_fixed, up);
  for (double lr : cfg.lr_grid) {
    Eigen::VectorXd w = up.average();
    for (int s = 0; s < cfg.gd_steps; ++s) w -= lr * obj.grad(w, alpha_fixed, up);
    if (!w.allFinite()) continue;
    const double m = obj.mse(w, alpha_fixed, up);
    if (std::isfinite(m) && m < best.mse) {
      best = {std::move(w), m, lr};
    }
  }
  return best;
}

/// Grid search over alpha_grid_points uniform candidates in
/// [min_k alpha^k, max_k alpha^k]. Ties go to the smaller clip.
inline double optimize_alpha(const Eigen::VectorXd& w_fixed, const UploadSet& up, const ServerOptConfig& cfg,
                             QuantObjective& obj) {
  up.validate();
  cfg.validate();
  const auto [lo_it, hi_it] = std::minmax_element(up.clips.begin(), up.clips.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (lo == hi) return lo;
  double best_alpha = lo;
  double best = std::numeric_limits<double>::infinity();
  const int n = cfg.alpha_grid_points;
  for (int i = 0; i < n; ++i) {
    const double a = i + 1 == n ? hi : lo + (hi - lo) * static_cast<double>(i) / (n - 1);
    const double m = obj.mse(w_fixed, a, up);
    if (m < best) {
      best = m;
      best_alpha = a;
    }
  }
  return best_alpha;
}

struct ServerOptResult {
  Eigen::VectorXd w;
  double alpha = 0.0;
  double mse = 0.0;         // objective at the returned (w, alpha)
  double fedavg_mse = 0.0;  // objective at the federated average and mean clip
  double lr = 0.0;
  bool fell_back = false;   // the federated average was returned
};

/// One alternation: weights with the mean clip fixed, then the clip. The
/// result is compared against the federated average under the same quantizer
/// draws and the better of the two is returned. `current` is the server's
/// previous weights, used when cfg.alpha_target is kCurrent.
inline ServerOptResult server_optimize(const UploadSet& up, Fp8Format fmt, const ServerOptConfig& cfg,
                                       RandomStream& rng, const Eigen::VectorXd* current = nullptr) {
  up.validate();
  cfg.validate();
  QuantObjective obj(fmt, cfg.objective, up.dims(), rng);
  // Candidates are compared under one common draw even when the descent
  // resamples.
  QuantObjective judge = obj;
  if (cfg.objective == ServerObjective::kRandResampled) {
    judge = QuantObjective(fmt, ServerObjective::kRandFixed, up.dims(), rng);
  }

  ServerOptResult fedavg;
  fedavg.w = up.average();
  fedavg.alpha = up.average_clip();
  fedavg.fell_back = true;
  if (!cfg.link_quantized) return fedavg;

  const WeightSearch ws = optimize_weights(up, fedavg.alpha, cfg, obj);
  const Eigen::VectorXd& target =
      cfg.alpha_target == AlphaTarget::kCurrent && current != nullptr ? *current : ws.w;
  if (target.size() != up.dims()) throw Error("current weights size mismatch");
  const double alpha = optimize_alpha(target, up, cfg, obj);

  fedavg.fedavg_mse = judge.mse(fedavg.w, fedavg.alpha, up);
  fedavg.mse = fedavg.fedavg_mse;
  const double m = judge.mse(ws.w, alpha, up);
  if (!std::isfinite(m) || !ws.w.allFinite() || m > fedavg.fedavg_mse) return fedavg;
  ServerOptResult r;
  r.w = ws.w;
  r.alpha = alpha;
  r.mse = m;
  r.fedavg_mse = fedavg.fedavg_mse;
  r.lr = ws.lr;
  return r;
}

}  // namespace fp8fed
