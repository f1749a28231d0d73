// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#include "fp8fed/data_partition.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "fp8fed/qat_engine.hpp"

namespace fp8fed {
namespace {

// Gaussian elimination with partial pivoting.
std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::fabs(a[r][c]) > std::fabs(a[piv][c])) piv = r;
    }
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = s / a[i][i];
  }
  return x;
}

double power_iteration(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  std::vector<double> v(n, 1.0);
  double lambda = 0.0;
  for (int it = 0; it < 5000; ++it) {
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) w[i] += m[i][j] * v[j];
    }
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
    lambda = norm;
  }
  return lambda;
}

void expect_set_partition(const std::vector<ClientRecord>& clients, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto& c : clients) {
    EXPECT_GE(c.n(), 1u);
    EXPECT_EQ(c.shard.size(), c.n());
    for (auto i : c.indices) ++seen.at(i);
  }
  for (int s : seen) ASSERT_EQ(s, 1);
}

double mean_label_entropy(const Dataset& ds, const std::vector<ClientRecord>& clients) {
  double total = 0.0;
  for (const auto& c : clients) {
    const auto h = c.shard.label_histogram();
    double e = 0.0;
    for (auto cnt : h) {
      if (cnt == 0) continue;
      const double p = static_cast<double>(cnt) / static_cast<double>(c.n());
      e -= p * std::log(p);
    }
    total += e;
  }
  (void)ds;
  return total / static_cast<double>(clients.size());
}

TEST(SynthClassification, SizeHistogramAndDeterminism) {
  const Dataset a = synth_classification(4, 3, 4000, 2.0, 11);
  EXPECT_EQ(a.size(), 4000u);
  EXPECT_EQ(a.dims(), 3u);
  for (auto cnt : a.label_histogram()) {
    EXPECT_NEAR(static_cast<double>(cnt), 1000.0, 4.0 * std::sqrt(4000.0));
  }
  const Dataset b = synth_classification(4, 3, 4000, 2.0, 11);
  EXPECT_TRUE(a.features == b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_THROW(synth_classification(1, 3, 10, 1.0, 1), Error);
  EXPECT_THROW(synth_classification(5, 3, 4, 1.0, 1), Error);
}

TEST(SynthClassification, WellSeparatedIsLinearlyLearnable) {
  const Dataset all = synth_classification(2, 5, 2000, 10.0, 3);
  const Dataset train = all.slice(0, 1500);
  const Dataset test = all.slice(1500, 500);
  ModelSpec spec;
  spec.dims = {5, 2};
  spec.quant = QatMode::kFp32;
  RandomStream rng(1);
  ParamSet p = init_params(spec, rng);
  p = local_update(p, train, spec, {200, 0.1, 0.0, 50}, rng);
  EXPECT_GE(evaluate(p, test, spec).accuracy, 0.99);
}

TEST(SynthQuadratic, MinimizerMatchesNormalEquations) {
  const QuadraticProblem q = synth_quadratic(5, 4, 0.5, 9);
  const std::size_t d = 4;
  std::vector<std::vector<double>> gram(d, std::vector<double>(d, 0.0));
  std::vector<double> rhs(d, 0.0);
  for (std::size_t k = 0; k < q.clients(); ++k) {
    for (Eigen::Index r = 0; r < q.A[k].rows(); ++r) {
      for (std::size_t i = 0; i < d; ++i) {
        rhs[i] += q.A[k](r, static_cast<Eigen::Index>(i)) * q.b[k](r);
        for (std::size_t j = 0; j < d; ++j) {
          gram[i][j] += q.A[k](r, static_cast<Eigen::Index>(i)) * q.A[k](r, static_cast<Eigen::Index>(j));
        }
      }
    }
  }
  const auto w = solve_dense(gram, rhs);
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(q.w_star(static_cast<Eigen::Index>(i)), w[i], 1e-10);
  EXPECT_LT(q.grad(q.w_star).norm(), 1e-10);

  const double n = static_cast<double>(q.total_rows());
  for (auto& row : gram) {
    for (auto& v : row) v /= n;
  }
  EXPECT_NEAR(q.L, power_iteration(gram), 1e-8);
  EXPECT_NEAR(q.L_max, 1.0, 1e-12);
  EXPECT_LE(q.L, q.L_max + 1e-12);
}

TEST(SynthQuadratic, ZeroHeterogeneitySharesData) {
  const QuadraticProblem q = synth_quadratic(3, 2, 0.0, 4);
  for (std::size_t k = 1; k < q.clients(); ++k) {
    EXPECT_TRUE(q.A[k] == q.A[0]);
    EXPECT_TRUE(q.b[k] == q.b[0]);
  }
  const Eigen::VectorXd ls = q.A[0].colPivHouseholderQr().solve(q.b[0]);
  EXPECT_LT((ls - q.w_star).norm(), 1e-10);
}

TEST(Partition, IidEqualShards) {
  const Dataset ds = synth_classification(3, 2, 600, 1.0, 1);
  const auto clients = partition(ds, {PartitionScheme::kIid, 0.3, 20, 5});
  ASSERT_EQ(clients.size(), 20u);
  for (const auto& c : clients) EXPECT_EQ(c.n(), 30u);
  expect_set_partition(clients, ds.size());
}

TEST(Partition, IidUnevenSizesDifferByAtMostOne) {
  const Dataset ds = synth_classification(3, 2, 103, 1.0, 1);
  const auto clients = partition(ds, {PartitionScheme::kIid, 0.3, 10, 5});
  for (const auto& c : clients) EXPECT_TRUE(c.n() == 10 || c.n() == 11);
  expect_set_partition(clients, ds.size());
}

TEST(Partition, DirichletIsSetPartitionAndDeterministic) {
  const Dataset ds = synth_classification(10, 4, 5000, 1.0, 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = partition(ds, {PartitionScheme::kDirichlet, 0.3, 100, seed});
    expect_set_partition(a, ds.size());
    const auto b = partition(ds, {PartitionScheme::kDirichlet, 0.3, 100, seed});
    for (std::size_t c = 0; c < a.size(); ++c) ASSERT_EQ(a[c].indices, b[c].indices);
  }
}

TEST(Partition, LargeConcentrationBehavesLikeIid) {
  const Dataset ds = synth_classification(4, 2, 40000, 1.0, 6);
  const auto clients = partition(ds, {PartitionScheme::kDirichlet, 1e4, 10, 1});
  const auto global = ds.label_histogram();
  for (const auto& c : clients) {
    const auto h = c.shard.label_histogram();
    for (std::size_t y = 0; y < h.size(); ++y) {
      const double local = static_cast<double>(h[y]) / static_cast<double>(c.n());
      const double all = static_cast<double>(global[y]) / static_cast<double>(ds.size());
      EXPECT_NEAR(local, all, 0.05);
    }
  }
}

TEST(Partition, SkewLowersLabelEntropy) {
  const Dataset ds = synth_classification(10, 2, 5000, 1.0, 8);
  double skewed = 0.0;
  double flat = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    skewed += mean_label_entropy(ds, partition(ds, {PartitionScheme::kDirichlet, 0.3, 50, seed}));
    flat += mean_label_entropy(ds, partition(ds, {PartitionScheme::kDirichlet, 1e4, 50, seed}));
  }
  EXPECT_LT(skewed, flat);
}

TEST(Partition, Errors) {
  const Dataset ds = synth_classification(2, 2, 10, 1.0, 1);
  EXPECT_THROW(partition(ds, {PartitionScheme::kIid, 0.3, 0, 1}), Error);
  EXPECT_THROW(partition(ds, {PartitionScheme::kIid, 0.3, 11, 1}), Error);
  EXPECT_THROW(partition(ds, {PartitionScheme::kDirichlet, -1.0, 2, 1}), Error);
  // Ten examples over ten clients under heavy skew cannot fill every shard.
  EXPECT_THROW(partition(ds, {PartitionScheme::kDirichlet, 0.01, 10, 1, 3}), Error);
}

TEST(LoadCsv, ParsesAndReportsLineNumbers) {
  const std::string path = ::testing::TempDir() + "fp8fed_load.csv";
  {
    std::ofstream out(path);
    out << "x1,x2,label\n0.5,1.5,1\n-1,2,0\n3,4,2\n";
  }
  const Dataset ds = load_csv(path);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.classes, 3);
  EXPECT_EQ(ds.features(1, 0), -1.0);
  EXPECT_EQ(ds.labels, (std::vector<int>{1, 0, 2}));
  {
    std::ofstream out(path);
    out << "x1,label\n0.5,1\nabc,0\n";
  }
  try {
    load_csv(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  std::remove(path.c_str());
  EXPECT_THROW(load_csv(path), Error);
}

}  // namespace
}  // namespace fp8fed
