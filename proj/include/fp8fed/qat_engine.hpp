// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fp8fed/autodiff.hpp"
#include "fp8fed/data_partition.hpp"
#include "fp8fed/fp8_codec.hpp"
#include "fp8fed/random.hpp"

namespace fp8fed {

enum class LossKind { kMse, kCrossEntropy };

/// fp32 bypasses every quantizer; det and rand select the forward quantizer.
enum class QatMode { kFp32, kDet, kRand };

inline constexpr double kMinClip = 1e-8;

/// Fully connected network: dims = {input, hidden..., output}. Hidden layers
/// use ReLU. With two entries this is a linear (or softmax-linear) model.
struct ModelSpec {
  std::vector<int> dims;
  LossKind loss = LossKind::kCrossEntropy;
  QatMode quant = QatMode::kDet;
  Fp8Format format = Fp8Format::e4m3();
  bool bias = true;

  int layers() const { return static_cast<int>(dims.size()) - 1; }
  /// Activation quantization sites: every layer output except the logits.
  int act_sites() const { return std::max(layers() - 1, 0); }
  bool quantized() const { return quant != QatMode::kFp32; }

  void validate() const {
    if (dims.size() < 2) throw Error("model needs at least input and output dims");
    for (int d : dims) {
      if (d < 1) throw Error("model dims must be positive");
    }
    format.validate();
  }
};

struct ParamTensor {
  std::string name;
  Matrix value;
  bool quantized = false;
  double clip = 0.0;  // alpha; meaningful only when quantized
};

/// Master weights with their clipping values. Biases are never quantized.
struct ParamSet {
  std::vector<ParamTensor> tensors;
  std::vector<double> act_clips;  // beta, one per activation site

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
    return n;
  }
  std::size_t quantized_tensor_count() const {
    return static_cast<std::size_t>(std::count_if(tensors.begin(), tensors.end(),
                                                  [](const ParamTensor& t) { return t.quantized; }));
  }
};

struct GradSet {
  std::vector<Matrix> tensors;
  std::vector<double> weight_clips;  // zero for unquantized tensors
  std::vector<double> act_clips;
};

struct LocalUpdateConfig {
  int steps = 10;
  double lr = 0.1;
  double weight_decay = 0.0;
  int batch = 50;

  void validate() const {
    if (steps < 1) throw Error("local steps must be >= 1");
    if (batch < 1) throw Error("batch size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw Error("weight decay must be non-negative");
  }
};

/// State retained from forward_qat for the backward pass.
struct QatCache {
  std::shared_ptr<Tape> tape;
  Var loss;
  std::vector<Var> tensors;
  std::vector<std::optional<Var>> weight_clips;
  std::vector<Var> act_clips;
};

struct ForwardResult {
  double loss = 0.0;
  Matrix output;
  QatCache cache;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

namespace detail {

inline Matrix one_hot(const std::vector<int>& labels, int classes) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) m(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return m;
}

inline void check_params(const ParamSet& params, const ModelSpec& spec) {
  const std::size_t per_layer = spec.bias ? 2 : 1;
  if (params.tensors.size() != per_layer * static_cast<std::size_t>(spec.layers())) {
    throw Error("parameter set does not match model spec");
  }
  for (int l = 0; l < spec.layers(); ++l) {
    const auto& w = params.tensors[per_layer * static_cast<std::size_t>(l)].value;
    if (w.rows() != spec.dims[l + 1] || w.cols() != spec.dims[l]) {
      throw Error("weight shape mismatch in layer " + std::to_string(l));
    }
    if (spec.bias) {
      const auto& b = params.tensors[per_layer * static_cast<std::size_t>(l) + 1].value;
      if (b.rows() != 1 || b.cols() != spec.dims[l + 1]) {
        throw Error("bias shape mismatch in layer " + std::to_string(l));
      }
    }
  }
  if (spec.quantized() && params.act_clips.size() != static_cast<std::size_t>(spec.act_sites())) {
    throw Error("activation clip count does not match model spec");
  }
}

inline double safe_max_abs(const Matrix& m) {
  const double v = m.size() ? m.cwiseAbs().maxCoeff() : 0.0;
  return v > 0.0 && std::isfinite(v) ? v : 1.0;
}

}  // namespace detail

/// He-initialised weights, zero biases, alpha = max|w| per weight tensor and
/// beta = 1 until calibrated.
inline ParamSet init_params(const ModelSpec& spec, RandomStream& rng) {
  spec.validate();
  ParamSet p;
  for (int l = 0; l < spec.layers(); ++l) {
    const int in = spec.dims[l];
    const int out = spec.dims[l + 1];
    const double sd = std::sqrt((l + 1 < spec.layers() ? 2.0 : 1.0) / in);
    ParamTensor w{"fc" + std::to_string(l) + ".weight", Matrix(out, in), true, 0.0};
    for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = sd * rng.normal();
    w.clip = detail::safe_max_abs(w.value);
    p.tensors.push_back(std::move(w));
    if (spec.bias) {
      p.tensors.push_back({"fc" + std::to_string(l) + ".bias", Matrix::Zero(1, out), false, 0.0});
    }
  }
  p.act_clips.assign(static_cast<std::size_t>(spec.act_sites()), 1.0);
  return p;
}

inline ForwardResult forward_qat(const ParamSet& params, const Dataset& batch, const ModelSpec& spec,
                                 RandomStream* rng = nullptr) {
  spec.validate();
  detail::check_params(params, spec);
  if (batch.empty()) throw Error("empty batch");
  if (batch.dims() != static_cast<std::size_t>(spec.dims.front())) {
    throw Error("input dimension mismatch");
  }
  const QuantMode qmode = spec.quant == QatMode::kRand ? QuantMode::kRand : QuantMode::kDet;
  if (spec.quant == QatMode::kRand && rng == nullptr) {
    throw Error("stochastic QAT needs a random stream");
  }

  ForwardResult res;
  auto tape = std::make_shared<Tape>();
  QatCache& c = res.cache;
  for (const auto& t : params.tensors) {
    c.tensors.push_back(tape->leaf(t.value));
    if (spec.quantized() && t.quantized) {
      c.weight_clips.push_back(tape->scalar(t.clip));
    } else {
      c.weight_clips.push_back(std::nullopt);
    }
  }
  if (spec.quantized()) {
    for (double beta : params.act_clips) c.act_clips.push_back(tape->scalar(beta));
  }

  const std::size_t per_layer = spec.bias ? 2 : 1;
  Var h = tape->constant(batch.features);
  for (int l = 0; l < spec.layers(); ++l) {
    const std::size_t wi = per_layer * static_cast<std::size_t>(l);
    Var w = c.tensors[wi];
    if (c.weight_clips[wi]) w = tape->fake_quant(w, *c.weight_clips[wi], spec.format, qmode, rng);
    h = tape->matmul_nt(h, w);
    if (spec.bias) h = tape->add_row(h, c.tensors[wi + 1]);
    if (l + 1 < spec.layers()) {
      h = tape->relu(h);
      if (spec.quantized()) {
        h = tape->fake_quant(h, c.act_clips[static_cast<std::size_t>(l)], spec.format, qmode, rng);
      }
    }
  }
  res.output = tape->value(h);
  if (spec.loss == LossKind::kMse) {
    const Matrix target = batch.has_targets() ? batch.targets : detail::one_hot(batch.labels, spec.dims.back());
    c.loss = tape->mse(h, target);
  } else {
    if (!batch.has_labels()) throw Error("cross-entropy needs class labels");
    c.loss = tape->softmax_xent(h, batch.labels);
  }
  res.loss = tape->value(c.loss)(0, 0);
  if (!std::isfinite(res.loss)) throw Error("diverged");
  c.tape = std::move(tape);
  return res;
}

/// Straight-through gradients for every tensor and clip. Consumes the cache.
inline GradSet backward_ste(QatCache& cache) {
  if (!cache.tape) throw Error("missing forward cache");
  std::shared_ptr<Tape> tape = std::move(cache.tape);
  tape->backward(cache.loss);
  GradSet g;
  for (std::size_t i = 0; i < cache.tensors.size(); ++i) {
    g.tensors.push_back(tape->grad(cache.tensors[i]));
    g.weight_clips.push_back(cache.weight_clips[i] ? tape->grad(*cache.weight_clips[i])(0, 0) : 0.0);
  }
  for (Var v : cache.act_clips) g.act_clips.push_back(tape->grad(v)(0, 0));
  return g;
}

/// Sets every beta to the largest activation magnitude at its site over one
/// batch, with weights quantized and earlier sites already calibrated.
inline void calibrate_act_clips(ParamSet& params, const ModelSpec& spec, const Dataset& batch) {
  detail::check_params(params, spec);
  if (!spec.quantized()) return;
  const std::size_t per_layer = spec.bias ? 2 : 1;
  Matrix h = batch.features;
  for (int l = 0; l + 1 < spec.layers(); ++l) {
    const auto& wt = params.tensors[per_layer * static_cast<std::size_t>(l)];
    Matrix w = wt.value;
    if (wt.quantized) {
      const Fp8Grid grid(ClipParam(wt.clip), spec.format);
      w = w.unaryExpr([&](double v) { return grid.quantize_det(v); });
    }
    h = h * w.transpose();
    if (spec.bias) h.rowwise() += params.tensors[per_layer * static_cast<std::size_t>(l) + 1].value.row(0);
    h = h.cwiseMax(0.0);
    const double beta = detail::safe_max_abs(h);
    params.act_clips[static_cast<std::size_t>(l)] = beta;
    const Fp8Grid grid(ClipParam(beta), spec.format);
    h = h.unaryExpr([&](double v) { return grid.quantize_det(v); });
  }
}

/// U steps of minibatch SGD with weight decay on the master weights, alpha
/// and beta. Minibatches walk through a reshuffled permutation of the shard.
inline ParamSet local_update(ParamSet params, const Dataset& shard, const ModelSpec& spec,
                             const LocalUpdateConfig& cfg, RandomStream& rng) {
  cfg.validate();
  if (shard.empty()) throw Error("no local data");
  const std::size_t n = shard.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::size_t pos = 0;
  std::vector<std::size_t> rows(batch);
  for (int step = 0; step < cfg.steps; ++step) {
    for (auto& r : rows) {
      if (pos == n) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        pos = 0;
      }
      r = order[pos++];
    }
    const Dataset mb = shard.subset(rows);
    ForwardResult fwd = forward_qat(params, mb, spec, &rng);
    const GradSet g = backward_ste(fwd.cache);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      auto& t = params.tensors[i];
      t.value -= cfg.lr * (g.tensors[i] + cfg.weight_decay * t.value);
      if (spec.quantized() && t.quantized) {
        t.clip = std::max(t.clip - cfg.lr * g.weight_clips[i], kMinClip);
      }
    }
    if (spec.quantized()) {
      for (std::size_t s = 0; s < params.act_clips.size(); ++s) {
        params.act_clips[s] = std::max(params.act_clips[s] - cfg.lr * g.act_clips[s], kMinClip);
      }
    }
    for (const auto& t : params.tensors) {
      if (!t.value.allFinite()) throw Error("diverged");
    }
  }
  return params;
}

/// Accuracy and loss of the deployed model. Quantized models are evaluated
/// with the deterministic quantizer at every site.
inline EvalResult evaluate(const ParamSet& params, const Dataset& data, const ModelSpec& spec) {
  if (data.empty()) throw Error("empty evaluation set");
  ModelSpec eval_spec = spec;
  if (eval_spec.quant == QatMode::kRand) eval_spec.quant = QatMode::kDet;
  const ForwardResult fwd = forward_qat(params, data, eval_spec);
  EvalResult r;
  r.loss = fwd.loss;
  if (data.has_labels()) {
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < fwd.output.rows(); ++i) {
      Eigen::Index arg = 0;
      fwd.output.row(i).maxCoeff(&arg);
      hits += static_cast<int>(arg) == data.labels[static_cast<std::size_t>(i)];
    }
    r.accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
  }
  return r;
}

}  // namespace fp8fed
