// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// A small tape-based reverse-mode differentiator over dense row-major
// matrices. Only the handful of operations needed by the models in
// qat_engine.hpp are provided.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fp8fed/fp8_codec.hpp"
#include "fp8fed/random.hpp"

namespace fp8fed {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value) { return push(std::move(value), true); }
  Var constant(Matrix value) { return push(std::move(value), false); }

  /// Scalar leaf, used for clipping values.
  Var scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return leaf(std::move(m));
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }

  /// x * w^T for x (n x in) and w (out x in).
  Var matmul_nt(Var x, Var w) {
    Matrix out = value(x) * value(w).transpose();
    const Var r = push(std::move(out), needs(x) || needs(w));
    nodes_[r.id].back = [this, x, w, r] {
      const Matrix& g = nodes_[r.id].grad;
      if (needs(x)) nodes_[x.id].grad += g * value(w);
      if (needs(w)) nodes_[w.id].grad += g.transpose() * value(x);
    };
    return r;
  }

  /// Adds a 1 x out row vector to every row of x.
  Var add_row(Var x, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(x).cols()) {
      throw Error("add_row: shape mismatch");
    }
    Matrix out = value(x).rowwise() + value(row).row(0);
    const Var r = push(std::move(out), needs(x) || needs(row));
    nodes_[r.id].back = [this, x, row, r] {
      const Matrix& g = nodes_[r.id].grad;
      if (needs(x)) nodes_[x.id].grad += g;
      if (needs(row)) nodes_[row.id].grad += g.colwise().sum();
    };
    return r;
  }

  Var relu(Var x) {
    Matrix out = value(x).cwiseMax(0.0);
    const Var r = push(std::move(out), needs(x));
    nodes_[r.id].back = [this, x, r] {
      const Matrix& g = nodes_[r.id].grad;
      nodes_[x.id].grad += (value(x).array() > 0.0).select(g, 0.0);
    };
    return r;
  }

  /// Fake quantization onto the FP8 grid of clip (a 1 x 1 node). Backward uses
  /// the straight-through rules: dQ/dx = 1 inside the clipping range and 0
  /// outside; dQ/dclip = (Q - x) / clip inside and Q / clip outside.
  Var fake_quant(Var x, Var clip, Fp8Format fmt, QuantMode mode, RandomStream* rng) {
    const double alpha = value(clip)(0, 0);
    const Fp8Grid grid(ClipParam(alpha), fmt);
    const Matrix& in = value(x);
    Matrix out(in.rows(), in.cols());
    for (Eigen::Index i = 0; i < in.size(); ++i) {
      const double v = in.data()[i];
      if (!std::isfinite(v)) throw Error("non-finite input");
      if (mode == QuantMode::kRand) {
        if (rng == nullptr) throw Error("stochastic quantization needs a random stream");
        out.data()[i] = grid.quantize_rand(v, rng->uniform());
      } else {
        out.data()[i] = grid.quantize_det(v);
      }
    }
    const double limit = grid.grid_max();
    const Var r = push(std::move(out), needs(x) || needs(clip));
    nodes_[r.id].back = [this, x, clip, r, alpha, limit] {
      const Matrix& g = nodes_[r.id].grad;
      const Matrix& in = value(x);
      const Matrix& q = value(r);
      double dclip = 0.0;
      Matrix dx = Matrix::Zero(in.rows(), in.cols());
      for (Eigen::Index i = 0; i < in.size(); ++i) {
        const double gi = g.data()[i];
        if (std::fabs(in.data()[i]) > limit) {
          dclip += gi * q.data()[i] / alpha;
        } else {
          dx.data()[i] = gi;
          dclip += gi * (q.data()[i] - in.data()[i]) / alpha;
        }
      }
      if (needs(x)) nodes_[x.id].grad += dx;
      if (needs(clip)) nodes_[clip.id].grad(0, 0) += dclip;
    };
    return r;
  }

  /// 0.5 * mean over rows of the squared row error.
  Var mse(Var pred, const Matrix& target) {
    const Matrix& p = value(pred);
    if (p.rows() != target.rows() || p.cols() != target.cols()) {
      throw Error("mse: shape mismatch");
    }
    const double n = static_cast<double>(p.rows());
    Matrix diff = p - target;
    Matrix out(1, 1);
    out(0, 0) = 0.5 * diff.squaredNorm() / n;
    const Var r = push(std::move(out), needs(pred));
    nodes_[r.id].back = [this, pred, r, diff = std::move(diff), n] {
      nodes_[pred.id].grad += (nodes_[r.id].grad(0, 0) / n) * diff;
    };
    return r;
  }

  /// Mean softmax cross-entropy against integer labels.
  Var softmax_xent(Var logits, std::span<const int> labels) {
    const Matrix& z = value(logits);
    if (static_cast<std::size_t>(z.rows()) != labels.size()) {
      throw Error("softmax_xent: label count mismatch");
    }
    const double n = static_cast<double>(z.rows());
    Matrix prob(z.rows(), z.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      if (y < 0 || y >= z.cols()) throw Error("label out of range");
      const double zmax = z.row(i).maxCoeff();
      const auto e = (z.row(i).array() - zmax).exp();
      const double sum = e.sum();
      prob.row(i) = e / sum;
      total += std::log(sum) + zmax - z(i, y);
    }
    Matrix out(1, 1);
    out(0, 0) = total / n;
    std::vector<int> ys(labels.begin(), labels.end());
    const Var r = push(std::move(out), needs(logits));
    nodes_[r.id].back = [this, logits, r, prob = std::move(prob), ys = std::move(ys), n] {
      Matrix g = prob;
      for (std::size_t i = 0; i < ys.size(); ++i) g(static_cast<Eigen::Index>(i), ys[i]) -= 1.0;
      nodes_[logits.id].grad += (nodes_[r.id].grad(0, 0) / n) * g;
    };
    return r;
  }

  /// Seeds d(root)/d(root) = 1 and propagates to every node that needs a
  /// gradient. Can only be called once per tape.
  void backward(Var root) {
    if (done_) throw Error("backward already run on this tape");
    if (value(root).size() != 1) throw Error("backward root must be a scalar");
    done_ = true;
    for (auto& n : nodes_) {
      if (n.needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
    if (!needs(root)) return;
    nodes_[root.id].grad(0, 0) = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      if (nodes_[i].back && nodes_[i].needs_grad) nodes_[i].back();
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  Var push(Matrix value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, {}});
    return Var{nodes_.size() - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  std::vector<Node> nodes_;
  bool done_ = false;
};

}  // namespace fp8fed
