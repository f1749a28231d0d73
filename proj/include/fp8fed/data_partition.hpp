// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fp8fed/autodiff.hpp"
#include "fp8fed/fp8_codec.hpp"
#include "fp8fed/random.hpp"

namespace fp8fed {

/// Examples as rows. Classification data fills labels; regression data fills
/// targets (n x outputs). Either may be empty.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  Matrix targets;
  int classes = 0;

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dims() const { return static_cast<std::size_t>(features.cols()); }
  bool empty() const { return size() == 0; }
  bool has_labels() const { return !labels.empty(); }
  bool has_targets() const { return targets.size() > 0; }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.classes = classes;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    if (has_targets()) out.targets.resize(static_cast<Eigen::Index>(rows.size()), targets.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(rows[i]);
      if (rows[i] >= size()) throw Error("subset: row index out of range");
      out.features.row(static_cast<Eigen::Index>(i)) = features.row(r);
      if (has_labels()) out.labels.push_back(labels[rows[i]]);
      if (has_targets()) out.targets.row(static_cast<Eigen::Index>(i)) = targets.row(r);
    }
    return out;
  }

  /// Contiguous slice [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const {
    std::vector<std::size_t> rows(count);
    std::iota(rows.begin(), rows.end(), begin);
    return subset(rows);
  }

  std::vector<std::size_t> label_histogram() const {
    std::vector<std::size_t> h(static_cast<std::size_t>(std::max(classes, 0)), 0);
    for (int y : labels) ++h.at(static_cast<std::size_t>(y));
    return h;
  }
};

/// Gaussian blobs with unit covariance, one per class. Class means sit on
/// scaled orthogonal axes when classes <= dims, so every pair of means is
/// exactly `separation` apart; otherwise they are random directions of the
/// same norm. Labels are drawn uniformly.
inline Dataset synth_classification(int classes, int dims, std::size_t n, double separation,
                                    std::uint64_t seed) {
  if (classes < 2 || dims < 1) throw Error("synth_classification: invalid sizes");
  if (n < static_cast<std::size_t>(classes)) throw Error("synth_classification: n < classes");
  if (!(separation >= 0.0)) throw Error("synth_classification: invalid separation");
  const double radius = separation / std::sqrt(2.0);
  Matrix means = Matrix::Zero(classes, dims);
  RandomStream mean_rng = RandomStream::derive(seed, 0, 0, StreamTag::kData);
  if (classes <= dims) {
    for (int c = 0; c < classes; ++c) means(c, c) = radius;
  } else {
    for (int c = 0; c < classes; ++c) {
      for (int j = 0; j < dims; ++j) means(c, j) = mean_rng.normal();
      means.row(c) *= radius / means.row(c).norm();
    }
  }
  RandomStream rng = RandomStream::derive(seed, 0, 1, StreamTag::kData);
  Dataset ds;
  ds.classes = classes;
  ds.features.resize(static_cast<Eigen::Index>(n), dims);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    ds.labels[i] = y;
    for (int j = 0; j < dims; ++j) {
      ds.features(static_cast<Eigen::Index>(i), j) = means(y, j) + rng.normal();
    }
  }
  return ds;
}

/// Distributed least squares: F_k(w) = 0.5 * ||A_k w - b_k||^2 / n_k, with the
/// global objective F = sum_k (n_k / n) F_k. Data is rescaled so the largest
/// per-client smoothness constant is 1.
struct QuadraticProblem {
  std::vector<Matrix> A;
  std::vector<Eigen::VectorXd> b;
  Eigen::VectorXd w_star;
  double L = 0.0;      // smoothness of the global objective
  double L_max = 0.0;  // largest client smoothness constant
  double f_star = 0.0;

  std::size_t clients() const { return A.size(); }
  std::size_t dims() const { return static_cast<std::size_t>(w_star.size()); }
  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& a : A) n += static_cast<std::size_t>(a.rows());
    return n;
  }

  double client_loss(std::size_t k, const Eigen::VectorXd& w) const {
    return 0.5 * (A[k] * w - b[k]).squaredNorm() / static_cast<double>(A[k].rows());
  }
  Eigen::VectorXd client_grad(std::size_t k, const Eigen::VectorXd& w) const {
    return A[k].transpose() * (A[k] * w - b[k]) / static_cast<double>(A[k].rows());
  }
  /// Gradient of one row's loss 0.5 * (a_i w - b_i)^2.
  Eigen::VectorXd row_grad(std::size_t k, std::size_t row, const Eigen::VectorXd& w) const {
    const auto r = static_cast<Eigen::Index>(row);
    return A[k].row(r).transpose() * (A[k].row(r).dot(w) - b[k](r));
  }
  double loss(const Eigen::VectorXd& w) const {
    double total = 0.0;
    for (std::size_t k = 0; k < clients(); ++k) total += 0.5 * (A[k] * w - b[k]).squaredNorm();
    return total / static_cast<double>(total_rows());
  }
  Eigen::VectorXd grad(const Eigen::VectorXd& w) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
    for (std::size_t k = 0; k < clients(); ++k) g += A[k].transpose() * (A[k] * w - b[k]);
    return g / static_cast<double>(total_rows());
  }
  /// Upper bound on every client gradient norm within `radius` of w*.
  double gradient_bound(double radius) const {
    double g = 0.0;
    for (std::size_t k = 0; k < clients(); ++k) {
      g = std::max(g, client_grad(k, w_star).norm());
    }
    return g + L_max * radius;
  }
};

inline double max_eigenvalue_sym(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

/// heterogeneity = 0 gives every client the same (A, b).
inline QuadraticProblem synth_quadratic(int clients, int dims, double heterogeneity,
                                        std::uint64_t seed, int rows_per_client = 20) {
  if (clients < 1 || dims < 1 || rows_per_client < 1) throw Error("synth_quadratic: invalid sizes");
  if (!(heterogeneity >= 0.0)) throw Error("synth_quadratic: invalid heterogeneity");
  RandomStream rng = RandomStream::derive(seed, 0, 0, StreamTag::kData);
  Eigen::VectorXd w_true(dims);
  for (int j = 0; j < dims; ++j) w_true(j) = rng.normal();
  Matrix a0(rows_per_client, dims);
  Eigen::VectorXd noise0(rows_per_client);
  for (Eigen::Index i = 0; i < a0.size(); ++i) a0.data()[i] = rng.normal();
  for (int i = 0; i < rows_per_client; ++i) noise0(i) = 0.5 * rng.normal();

  QuadraticProblem p;
  for (int k = 0; k < clients; ++k) {
    RandomStream crng = RandomStream::derive(seed, 0, static_cast<std::uint64_t>(k) + 1, StreamTag::kData);
    Matrix a = a0;
    Eigen::VectorXd shift(rows_per_client);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] += heterogeneity * crng.normal();
    for (int i = 0; i < rows_per_client; ++i) shift(i) = heterogeneity * crng.normal();
    Eigen::VectorXd b = a * w_true + noise0 + shift;
    p.A.push_back(std::move(a));
    p.b.push_back(std::move(b));
  }

  double l_max = 0.0;
  for (const auto& a : p.A) {
    l_max = std::max(l_max, max_eigenvalue_sym(a.transpose() * a / static_cast<double>(a.rows())));
  }
  const double shrink = 1.0 / std::sqrt(l_max);
  for (std::size_t k = 0; k < p.A.size(); ++k) {
    p.A[k] *= shrink;
    p.b[k] *= shrink;
  }

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(dims, dims);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dims);
  p.L_max = 0.0;
  for (std::size_t k = 0; k < p.A.size(); ++k) {
    const Eigen::MatrixXd ak = p.A[k];
    gram += ak.transpose() * ak;
    rhs += ak.transpose() * p.b[k];
    p.L_max = std::max(p.L_max, max_eigenvalue_sym(ak.transpose() * ak / static_cast<double>(ak.rows())));
  }
  const double n = static_cast<double>(p.total_rows());
  p.w_star = gram.ldlt().solve(rhs);
  p.L = max_eigenvalue_sym(gram / n);
  p.f_star = p.loss(p.w_star);
  return p;
}

enum class PartitionScheme { kIid, kDirichlet };

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::kIid;
  double concentration = 0.3;
  int clients = 100;
  std::uint64_t seed = 0;
  int max_attempts = 100;
};

struct ClientRecord {
  int id = 0;
  std::vector<std::size_t> indices;
  Dataset shard;

  std::size_t n() const { return indices.size(); }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> split_iid(std::size_t n, int k, RandomStream& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(k));
  const std::size_t base = n / static_cast<std::size_t>(k);
  const std::size_t extra = n % static_cast<std::size_t>(k);
  std::size_t pos = 0;
  for (std::size_t c = 0; c < out.size(); ++c) {
    const std::size_t take = base + (c < extra ? 1 : 0);
    out[c].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                  perm.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> split_dirichlet(const Dataset& ds, int k,
                                                             double concentration,
                                                             RandomStream& rng) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(k));
  std::vector<double> props(static_cast<std::size_t>(k));
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng.engine());
    double total = 0.0;
    for (auto& p : props) {
      p = rng.gamma(concentration);
      total += p;
    }
    if (!(total > 0.0)) {
      // All draws underflowed; give the class to one random client.
      std::fill(props.begin(), props.end(), 0.0);
      props[rng.below(static_cast<std::uint64_t>(k))] = 1.0;
      total = 1.0;
    }
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t c = 0; c < props.size(); ++c) {
      cum += props[c] / total;
      std::size_t end = c + 1 == props.size()
                            ? members.size()
                            : std::min(members.size(), static_cast<std::size_t>(
                                                           std::floor(cum * static_cast<double>(members.size()))));
      end = std::max(end, start);
      out[c].insert(out[c].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                    members.begin() + static_cast<std::ptrdiff_t>(end));
      start = end;
    }
  }
  for (auto& idx : out) std::sort(idx.begin(), idx.end());
  return out;
}

}  // namespace detail

/// Splits a dataset into disjoint client shards covering every example.
inline std::vector<ClientRecord> partition(const Dataset& ds, const PartitionSpec& spec) {
  if (spec.clients < 1) throw Error("partition: need at least one client");
  if (ds.size() < static_cast<std::size_t>(spec.clients)) {
    throw Error("partition: fewer examples than clients");
  }
  RandomStream rng = RandomStream::derive(spec.seed, 0, 0, StreamTag::kPartition);
  std::vector<std::vector<std::size_t>> parts;
  if (spec.scheme == PartitionScheme::kIid) {
    parts = detail::split_iid(ds.size(), spec.clients, rng);
  } else {
    if (!ds.has_labels()) throw Error("partition: dirichlet scheme needs class labels");
    if (!(spec.concentration > 0.0) || !std::isfinite(spec.concentration)) {
      throw Error("partition: concentration must be positive");
    }
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
      parts = detail::split_dirichlet(ds, spec.clients, spec.concentration, rng);
      ok = std::none_of(parts.begin(), parts.end(), [](const auto& p) { return p.empty(); });
    }
    if (!ok) {
      throw Error("partition: a client shard stayed empty after " +
                  std::to_string(spec.max_attempts) + " attempts");
    }
  }
  std::vector<ClientRecord> out;
  out.reserve(parts.size());
  for (std::size_t c = 0; c < parts.size(); ++c) {
    ClientRecord rec;
    rec.id = static_cast<int>(c);
    rec.indices = std::move(parts[c]);
    rec.shard = ds.subset(rec.indices);
    out.push_back(std::move(rec));
  }
  return out;
}

/// Reads a comma-separated file with a header row. Every column but the last
/// is a real feature; the last column is an integer class label.
inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": missing header row");
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t cols = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) throw Error(path + ":" + std::to_string(lineno) + ": need at least 2 columns");
    if (cols == 0) cols = cells.size();
    if (cells.size() != cols) {
      throw Error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) + " columns");
    }
    std::vector<double> feats;
    try {
      for (std::size_t j = 0; j + 1 < cells.size(); ++j) {
        std::size_t used = 0;
        feats.push_back(std::stod(cells[j], &used));
        if (used != cells[j].size()) throw std::invalid_argument(cells[j]);
      }
      std::size_t used = 0;
      const int y = std::stoi(cells.back(), &used);
      if (used != cells.back().size() || y < 0) throw std::invalid_argument(cells.back());
      labels.push_back(y);
    } catch (const std::logic_error&) {
      throw Error(path + ":" + std::to_string(lineno) + ": malformed value");
    }
    rows.push_back(std::move(feats));
  }
  if (rows.empty()) throw Error(path + ": no data rows");
  Dataset ds;
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols - 1));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j + 1 < cols; ++j) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  ds.labels = std::move(labels);
  ds.classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  return ds;
}

}  // namespace fp8fed
