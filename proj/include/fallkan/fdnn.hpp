#pragma once

// Fall-detection recurrent network:
//   FC1 -> batch norm -> dropout -> LSTM -> dropout -> LSTM -> dropout -> FC2 -> softmax
// with per-timestep cross-entropy, backpropagation through time and Adam.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fallkan/container.hpp"
#include "fallkan/error.hpp"
#include "fallkan/features.hpp"
#include "fallkan/rng.hpp"

namespace fallkan {

struct FdnnConfig {
  std::size_t input_dim = kFdnnInputs;
  std::size_t fc1_units = 16;
  std::size_t inner_dim = 16;
  std::size_t classes = 2;
  double dropout_rate = 0.5;
  std::size_t batch_size = 128;
  std::size_t epochs = 64;
  double threshold = 0.5;
  std::uint64_t seed = 1;
  // Adam
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double clip_norm = 5.0;
  // Batch norm
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;

  void validate() const {
    if (input_dim == 0 || fc1_units == 0 || inner_dim == 0) throw ValidationError("FDNN dimensions must be positive");
    if (classes != 2) throw ValidationError("FDNN expects 2 classes (background, fall)");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout rate must be in [0, 1)");
    if (batch_size == 0 || epochs == 0) throw ValidationError("batch size and epochs must be positive");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  }
};

inline void to_json(nlohmann::json& j, const FdnnConfig& c) {
  j = {{"input_dim", c.input_dim},       {"fc1_units", c.fc1_units},     {"inner_dim", c.inner_dim},
       {"classes", c.classes},           {"dropout_rate", c.dropout_rate}, {"batch_size", c.batch_size},
       {"epochs", c.epochs},             {"threshold", c.threshold},     {"seed", c.seed},
       {"learning_rate", c.learning_rate}, {"beta1", c.beta1},           {"beta2", c.beta2},
       {"adam_epsilon", c.adam_epsilon}, {"clip_norm", c.clip_norm},     {"bn_momentum", c.bn_momentum},
       {"bn_epsilon", c.bn_epsilon}};
}

inline void from_json(const nlohmann::json& j, FdnnConfig& c) {
  const FdnnConfig d;
  c.input_dim = j.value("input_dim", d.input_dim);
  c.fc1_units = j.value("fc1_units", d.fc1_units);
  c.inner_dim = j.value("inner_dim", d.inner_dim);
  c.classes = j.value("classes", d.classes);
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.threshold = j.value("threshold", d.threshold);
  c.seed = j.value("seed", d.seed);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_epsilon = j.value("adam_epsilon", d.adam_epsilon);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
  c.bn_epsilon = j.value("bn_epsilon", d.bn_epsilon);
}

// ---------------------------------------------------------------------------
// Parameters

enum class Tensor : int {
  Fc1W, Fc1B, BnGamma, BnBeta,
  Lstm1Wx, Lstm1Wh, Lstm1B,
  Lstm2Wx, Lstm2Wh, Lstm2B,
  Fc2W, Fc2B,
};
inline constexpr int kTensorCount = 12;

inline constexpr std::array<const char*, kTensorCount> kTensorNames{
    "fc1.weight", "fc1.bias", "bn.gamma", "bn.beta",
    "lstm1.wx",   "lstm1.wh", "lstm1.bias",
    "lstm2.wx",   "lstm2.wh", "lstm2.bias",
    "fc2.weight", "fc2.bias"};

/// Offsets of every trainable tensor inside one flat vector. LSTM gate rows
/// are stacked in the order input, forget, cell, output.
struct FdnnLayout {
  std::array<std::size_t, kTensorCount> offset{};
  std::array<std::size_t, kTensorCount> rows{};
  std::array<std::size_t, kTensorCount> cols{};
  std::size_t total = 0;

  explicit FdnnLayout(const FdnnConfig& c) {
    const auto F = c.fc1_units, H = c.inner_dim, I = c.input_dim, C = c.classes;
    const std::array<std::pair<std::size_t, std::size_t>, kTensorCount> shapes{{
        {F, I}, {F, 1}, {F, 1}, {F, 1},
        {4 * H, F}, {4 * H, H}, {4 * H, 1},
        {4 * H, H}, {4 * H, H}, {4 * H, 1},
        {C, H}, {C, 1}}};
    for (int t = 0; t < kTensorCount; ++t) {
      offset[t] = total;
      rows[t] = shapes[t].first;
      cols[t] = shapes[t].second;
      total += rows[t] * cols[t];
    }
  }

  std::size_t size(Tensor t) const { return rows[static_cast<int>(t)] * cols[static_cast<int>(t)]; }
};

struct FdnnParams {
  FdnnConfig config;
  std::vector<double> weights;       ///< trainable, FdnnLayout order
  std::vector<double> running_mean;  ///< batch-norm moments (fc1_units)
  std::vector<double> running_var;

  FdnnLayout layout() const { return FdnnLayout(config); }

  std::span<double> tensor(Tensor t) {
    const auto l = layout();
    return {weights.data() + l.offset[static_cast<int>(t)], l.size(t)};
  }
  std::span<const double> tensor(Tensor t) const {
    const auto l = layout();
    return {weights.data() + l.offset[static_cast<int>(t)], l.size(t)};
  }

  void validate() const {
    config.validate();
    if (weights.size() != layout().total) throw ValidationError("FDNN weight count does not match shapes");
    if (running_mean.size() != config.fc1_units || running_var.size() != config.fc1_units)
      throw ValidationError("batch-norm moment size mismatch");
    for (double v : weights)
      if (!std::isfinite(v)) throw ValidationError("non-finite FDNN weight");
    for (double v : running_var)
      if (!(v > 0.0)) throw ValidationError("batch-norm running variance must be positive");
  }

  friend bool operator==(const FdnnParams& a, const FdnnParams& b) {
    return a.weights == b.weights && a.running_mean == b.running_mean && a.running_var == b.running_var;
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget
/// gate bias 1, batch-norm scale 1.
inline FdnnParams init_params(const FdnnConfig& config, std::uint64_t seed) {
  config.validate();
  FdnnParams p;
  p.config = config;
  const FdnnLayout l(config);
  p.weights.assign(l.total, 0.0);
  p.running_mean.assign(config.fc1_units, 0.0);
  p.running_var.assign(config.fc1_units, 1.0);
  Rng rng(seed);
  auto fill = [&](Tensor t, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& w : p.tensor(t)) w = rng.uniform(-bound, bound);
  };
  fill(Tensor::Fc1W, config.input_dim);
  fill(Tensor::Lstm1Wx, config.fc1_units);
  fill(Tensor::Lstm1Wh, config.inner_dim);
  fill(Tensor::Lstm2Wx, config.inner_dim);
  fill(Tensor::Lstm2Wh, config.inner_dim);
  fill(Tensor::Fc2W, config.inner_dim);
  for (double& g : p.tensor(Tensor::BnGamma)) g = 1.0;
  const auto H = config.inner_dim;
  for (auto t : {Tensor::Lstm1B, Tensor::Lstm2B}) {
    auto b = p.tensor(t);
    std::fill(b.begin() + static_cast<std::ptrdiff_t>(H), b.begin() + static_cast<std::ptrdiff_t>(2 * H), 1.0);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Data

/// One standardized input sequence with per-step labels. The mask marks
/// valid steps; invalid steps may only appear as trailing padding.
struct LabeledSequence {
  std::size_t steps = 0;
  std::vector<double> inputs;   ///< steps x input_dim, row-major
  std::vector<std::uint8_t> labels;  ///< 1 = FALL
  std::vector<std::uint8_t> mask;    ///< 1 = valid; empty means all valid

  std::span<const double> step(std::size_t t, std::size_t width) const {
    return {inputs.data() + t * width, width};
  }
  bool valid(std::size_t t) const { return mask.empty() || mask[t] != 0; }

  std::size_t valid_steps() const {
    return mask.empty() ? steps : static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
  }

  void validate(std::size_t width) const {
    if (inputs.size() != steps * width) throw ValidationError("input width does not match the network");
    if (labels.size() != steps) throw ValidationError("labels do not match steps");
    if (!mask.empty()) {
      if (mask.size() != steps) throw ValidationError("mask does not match steps");
      const auto first_pad = std::find(mask.begin(), mask.end(), 0);
      if (std::find(first_pad, mask.end(), 1) != mask.end())
        throw ValidationError("masked steps must be trailing padding");
    }
  }
};

/// Concatenates the static 4-vector onto every 14-entry dynamic step.
inline LabeledSequence make_sequence(std::span<const double> statics,
                                     const std::vector<std::array<double, kDynamicSignals>>& dynamic,
                                     std::vector<std::uint8_t> labels = {}) {
  if (statics.size() != kStaticSignals) throw ValidationError("expected 4 static features");
  LabeledSequence s;
  s.steps = dynamic.size();
  s.inputs.reserve(s.steps * kFdnnInputs);
  for (const auto& d : dynamic) {
    s.inputs.insert(s.inputs.end(), statics.begin(), statics.end());
    s.inputs.insert(s.inputs.end(), d.begin(), d.end());
  }
  s.labels = labels.empty() ? std::vector<std::uint8_t>(s.steps, 0) : std::move(labels);
  return s;
}

/// Builds a standardized sequence from feature frames and trial labels.
inline LabeledSequence make_sequence(std::span<const FeatureFrame> frames, std::span<const Label> labels,
                                     const StandardizationStats& stats) {
  if (frames.size() != labels.size()) throw ValidationError("frames and labels differ in length");
  LabeledSequence s;
  s.steps = frames.size();
  s.inputs.reserve(s.steps * kFdnnInputs);
  s.labels.reserve(s.steps);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    auto row = frames[t].fdnn_view();
    stats.apply_row(row);
    s.inputs.insert(s.inputs.end(), row.begin(), row.end());
    s.labels.push_back(labels[t] == Label::Fall ? 1 : 0);
  }
  return s;
}

struct PredictionTrace {
  std::vector<double> p_falling;
  std::vector<std::uint8_t> decision;
};

/// Strict comparison: P == threshold is not falling.
inline std::vector<std::uint8_t> classify(std::span<const double> p_falling, double threshold) {
  std::vector<std::uint8_t> out(p_falling.size());
  for (std::size_t i = 0; i < p_falling.size(); ++i) out[i] = p_falling[i] > threshold ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

namespace nn {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// y = W x + b, W is rows x cols row-major.
inline void affine(std::span<const double> W, std::span<const double> b, std::span<const double> x,
                   std::span<double> y) {
  const auto cols = x.size();
  for (std::size_t r = 0; r < y.size(); ++r) {
    double acc = b[r];
    const double* w = W.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += w[c] * x[c];
    y[r] = acc;
  }
}

/// y += W x
inline void add_matvec(std::span<const double> W, std::span<const double> x, std::span<double> y) {
  const auto cols = x.size();
  for (std::size_t r = 0; r < y.size(); ++r) {
    double acc = 0.0;
    const double* w = W.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += w[c] * x[c];
    y[r] += acc;
  }
}

/// x_grad += W^T g
inline void add_matvec_t(std::span<const double> W, std::span<const double> g, std::span<double> x_grad) {
  const auto cols = x_grad.size();
  for (std::size_t r = 0; r < g.size(); ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const double* w = W.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) x_grad[c] += w[c] * gr;
  }
}

/// dW += g x^T
inline void add_outer(std::span<double> dW, std::span<const double> g, std::span<const double> x) {
  const auto cols = x.size();
  for (std::size_t r = 0; r < g.size(); ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    double* w = dW.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) w[c] += gr * x[c];
  }
}

/// Two-class softmax; returns P(class 1).
inline double softmax2(double l0, double l1, std::array<double, 2>& p) {
  const double m = std::max(l0, l1);
  const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
  const double s = e0 + e1;
  p = {e0 / s, e1 / s};
  return p[1];
}

/// One LSTM cell step. `gates` receives the activated i, f, g, o blocks.
inline void lstm_step(std::span<const double> Wx, std::span<const double> Wh, std::span<const double> b,
                      std::span<const double> x, std::span<const double> h_prev, std::span<const double> c_prev,
                      std::span<double> gates, std::span<double> c, std::span<double> h) {
  const auto H = h.size();
  affine(Wx, b, x, gates);
  add_matvec(Wh, h_prev, gates);
  for (std::size_t k = 0; k < H; ++k) {
    const double i = sigmoid(gates[k]);
    const double f = sigmoid(gates[H + k]);
    const double g = std::tanh(gates[2 * H + k]);
    const double o = sigmoid(gates[3 * H + k]);
    gates[k] = i;
    gates[H + k] = f;
    gates[2 * H + k] = g;
    gates[3 * H + k] = o;
    c[k] = f * c_prev[k] + i * g;
    h[k] = o * std::tanh(c[k]);
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Inference

/// Stateful inference-mode evaluation, one step at a time. Batch norm uses
/// the running moments; dropout is the identity.
class FdnnStepper {
 public:
  explicit FdnnStepper(const FdnnParams& params) : p_(params) {
    p_.validate();
    const auto& c = p_.config;
    z1_.resize(c.fc1_units);
    gates_.resize(4 * c.inner_dim);
    reset();
  }

  void reset() {
    const auto H = p_.config.inner_dim;
    h1_.assign(H, 0.0);
    c1_.assign(H, 0.0);
    h2_.assign(H, 0.0);
    c2_.assign(H, 0.0);
    c_tmp_.assign(H, 0.0);
    h_tmp_.assign(H, 0.0);
  }

  /// Returns P(falling) for one standardized input row.
  double step(std::span<const double> x) {
    const auto& c = p_.config;
    if (x.size() != c.input_dim)
      throw ValidationError("FDNN input width " + std::to_string(x.size()) + " != " + std::to_string(c.input_dim));
    nn::affine(p_.tensor(Tensor::Fc1W), p_.tensor(Tensor::Fc1B), x, z1_);
    const auto gamma = p_.tensor(Tensor::BnGamma), beta = p_.tensor(Tensor::BnBeta);
    for (std::size_t k = 0; k < c.fc1_units; ++k)
      z1_[k] = gamma[k] * ((z1_[k] - p_.running_mean[k]) / std::sqrt(p_.running_var[k] + c.bn_epsilon)) + beta[k];

    nn::lstm_step(p_.tensor(Tensor::Lstm1Wx), p_.tensor(Tensor::Lstm1Wh), p_.tensor(Tensor::Lstm1B), z1_, h1_, c1_,
                  gates_, c_tmp_, h_tmp_);
    c1_.swap(c_tmp_);
    h1_.swap(h_tmp_);
    nn::lstm_step(p_.tensor(Tensor::Lstm2Wx), p_.tensor(Tensor::Lstm2Wh), p_.tensor(Tensor::Lstm2B), h1_, h2_, c2_,
                  gates_, c_tmp_, h_tmp_);
    c2_.swap(c_tmp_);
    h2_.swap(h_tmp_);

    std::array<double, 2> logits{}, prob{};
    nn::affine(p_.tensor(Tensor::Fc2W), p_.tensor(Tensor::Fc2B), h2_, logits);
    if (!std::isfinite(logits[0]) || !std::isfinite(logits[1])) throw NumericError("non-finite FDNN activation");
    return nn::softmax2(logits[0], logits[1], prob);
  }

  const FdnnParams& params() const { return p_; }

 private:
  FdnnParams p_;
  std::vector<double> z1_, gates_, h1_, c1_, h2_, c2_, c_tmp_, h_tmp_;
};

enum class Mode { Train, Infer };

struct GradientResult {
  double loss = 0.0;                 ///< mean cross-entropy over valid steps
  std::vector<double> gradient;      ///< FdnnLayout order
  std::vector<double> batch_mean;    ///< batch-norm statistics used
  std::vector<double> batch_var;
  std::size_t valid_steps = 0;
  std::vector<PredictionTrace> traces;
};

namespace detail {

/// Per-sequence activations kept for the backward pass.
struct SequenceCache {
  std::vector<double> xhat;           // T x F
  std::vector<double> m1, m2, m3;     // dropout multipliers, T x F / T x H / T x H
  std::vector<double> d1;             // LSTM-1 input, T x F
  std::vector<double> g1, c1, h1;     // gates T x 4H, cell and hidden T x H
  std::vector<double> d2;             // LSTM-2 input, T x H
  std::vector<double> g2, c2, h2;
  std::vector<double> d3;             // FC2 input, T x H
  std::vector<double> prob;           // T x 2
};

inline void draw_mask(std::span<double> m, double rate, Rng* rng) {
  if (rate == 0.0 || rng == nullptr) {
    std::fill(m.begin(), m.end(), 1.0);
    return;
  }
  const double keep = 1.0 / (1.0 - rate);
  for (double& v : m) v = rng->uniform() < rate ? 0.0 : keep;
}

inline void lstm_backward(std::span<const double> Wx, std::span<const double> Wh, std::size_t T, std::size_t H,
                          std::size_t in_dim, std::span<const double> inputs, std::span<const double> gates,
                          std::span<const double> cells, std::span<const double> hidden,
                          std::span<const double> dh_out, std::span<double> dWx, std::span<double> dWh,
                          std::span<double> db, std::span<double> dinputs) {
  std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0), da(4 * H), dh(H), zeros(H, 0.0);
  for (std::size_t t = T; t-- > 0;) {
    const double* g = gates.data() + t * 4 * H;
    const double* c = cells.data() + t * H;
    for (std::size_t k = 0; k < H; ++k) dh[k] = dh_out[t * H + k] + dh_next[k];
    for (std::size_t k = 0; k < H; ++k) {
      const double i = g[k], f = g[H + k], gg = g[2 * H + k], o = g[3 * H + k];
      const double tc = std::tanh(c[k]);
      const double c_prev = t > 0 ? cells[(t - 1) * H + k] : 0.0;
      const double dc = dh[k] * o * (1.0 - tc * tc) + dc_next[k];
      da[k] = dc * gg * i * (1.0 - i);
      da[H + k] = dc * c_prev * f * (1.0 - f);
      da[2 * H + k] = dc * i * (1.0 - gg * gg);
      da[3 * H + k] = dh[k] * tc * o * (1.0 - o);
      dc_next[k] = dc * f;
    }
    const std::span<const double> x_t(inputs.data() + t * in_dim, in_dim);
    const std::span<const double> h_prev = t > 0 ? std::span<const double>(hidden.data() + (t - 1) * H, H)
                                                 : std::span<const double>(zeros);
    nn::add_outer(dWx, da, x_t);
    nn::add_outer(dWh, da, h_prev);
    for (std::size_t k = 0; k < 4 * H; ++k) db[k] += da[k];
    nn::add_matvec_t(Wx, da, dinputs.subspan(t * in_dim, in_dim));
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    nn::add_matvec_t(Wh, da, dh_next);
  }
}

}  // namespace detail

/// Train-mode loss and gradients over a batch. Batch norm uses the batch
/// statistics over all valid (sequence, step) pairs; dropout masks come from
/// `dropout_rng` in sequence order (pass nullptr to disable dropout).
/// Parameters are not modified; running moments are left to the caller.
inline GradientResult loss_and_gradients(const FdnnParams& p, std::span<const LabeledSequence> batch,
                                         Rng* dropout_rng, bool keep_traces = false) {
  p.validate();
  if (batch.empty()) throw ValidationError("empty batch");
  const auto& cfg = p.config;
  const auto F = cfg.fc1_units, H = cfg.inner_dim, I = cfg.input_dim;
  const FdnnLayout layout(cfg);
  for (const auto& s : batch) s.validate(I);

  GradientResult out;
  out.gradient.assign(layout.total, 0.0);
  auto grad = [&](Tensor t) {
    return std::span<double>(out.gradient.data() + layout.offset[static_cast<int>(t)], layout.size(t));
  };

  // FC1 for every step, then batch-norm statistics over valid steps.
  std::vector<std::vector<double>> z1(batch.size());
  std::vector<double> mean(F, 0.0), var(F, 0.0);
  std::size_t n_valid = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    z1[b].resize(s.steps * F);
    for (std::size_t t = 0; t < s.steps; ++t) {
      std::span<double> z(z1[b].data() + t * F, F);
      nn::affine(p.tensor(Tensor::Fc1W), p.tensor(Tensor::Fc1B), s.step(t, I), z);
      if (!s.valid(t)) continue;
      ++n_valid;
      for (std::size_t k = 0; k < F; ++k) mean[k] += z[k];
    }
  }
  if (n_valid == 0) throw ValidationError("batch has no valid steps");
  const auto N = static_cast<double>(n_valid);
  for (auto& m : mean) m /= N;
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t t = 0; t < batch[b].steps; ++t) {
      if (!batch[b].valid(t)) continue;
      for (std::size_t k = 0; k < F; ++k) {
        const double d = z1[b][t * F + k] - mean[k];
        var[k] += d * d;
      }
    }
  for (auto& v : var) v /= N;
  std::vector<double> inv_std(F);
  for (std::size_t k = 0; k < F; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + cfg.bn_epsilon);

  const auto gamma = p.tensor(Tensor::BnGamma), beta = p.tensor(Tensor::BnBeta);
  // Upstream gradient of the batch-norm output, kept for the global BN backward.
  std::vector<std::vector<double>> dy(batch.size());
  std::vector<std::vector<double>> xhat_all(batch.size());

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    const auto T = s.steps;
    detail::SequenceCache k;
    k.xhat.resize(T * F);
    k.m1.resize(T * F);
    k.m2.resize(T * H);
    k.m3.resize(T * H);
    k.d1.resize(T * F);
    k.g1.resize(T * 4 * H);
    k.c1.resize(T * H);
    k.h1.resize(T * H);
    k.d2.resize(T * H);
    k.g2.resize(T * 4 * H);
    k.c2.resize(T * H);
    k.h2.resize(T * H);
    k.d3.resize(T * H);
    k.prob.resize(T * 2);

    for (std::size_t t = 0; t < T; ++t) {
      detail::draw_mask({k.m1.data() + t * F, F}, cfg.dropout_rate, dropout_rng);
      detail::draw_mask({k.m2.data() + t * H, H}, cfg.dropout_rate, dropout_rng);
      detail::draw_mask({k.m3.data() + t * H, H}, cfg.dropout_rate, dropout_rng);
    }

    std::vector<double> zeros(H, 0.0);
    PredictionTrace trace;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < F; ++j) {
        const double xh = (z1[b][t * F + j] - mean[j]) * inv_std[j];
        k.xhat[t * F + j] = xh;
        k.d1[t * F + j] = (gamma[j] * xh + beta[j]) * k.m1[t * F + j];
      }
      auto prev = [&](const std::vector<double>& v) {
        return t > 0 ? std::span<const double>(v.data() + (t - 1) * H, H) : std::span<const double>(zeros);
      };
      nn::lstm_step(p.tensor(Tensor::Lstm1Wx), p.tensor(Tensor::Lstm1Wh), p.tensor(Tensor::Lstm1B),
                    {k.d1.data() + t * F, F}, prev(k.h1), prev(k.c1), {k.g1.data() + t * 4 * H, 4 * H},
                    {k.c1.data() + t * H, H}, {k.h1.data() + t * H, H});
      for (std::size_t j = 0; j < H; ++j) k.d2[t * H + j] = k.h1[t * H + j] * k.m2[t * H + j];
      nn::lstm_step(p.tensor(Tensor::Lstm2Wx), p.tensor(Tensor::Lstm2Wh), p.tensor(Tensor::Lstm2B),
                    {k.d2.data() + t * H, H}, prev(k.h2), prev(k.c2), {k.g2.data() + t * 4 * H, 4 * H},
                    {k.c2.data() + t * H, H}, {k.h2.data() + t * H, H});
      for (std::size_t j = 0; j < H; ++j) k.d3[t * H + j] = k.h2[t * H + j] * k.m3[t * H + j];
      std::array<double, 2> logits{}, prob{};
      nn::affine(p.tensor(Tensor::Fc2W), p.tensor(Tensor::Fc2B), {k.d3.data() + t * H, H}, logits);
      if (!std::isfinite(logits[0]) || !std::isfinite(logits[1])) throw NumericError("non-finite FDNN activation");
      nn::softmax2(logits[0], logits[1], prob);
      k.prob[2 * t] = prob[0];
      k.prob[2 * t + 1] = prob[1];
      if (keep_traces) trace.p_falling.push_back(prob[1]);
      if (s.valid(t)) out.loss -= std::log(std::max(prob[s.labels[t]], 1e-300));
    }
    if (keep_traces) {
      trace.decision = classify(trace.p_falling, cfg.threshold);
      out.traces.push_back(std::move(trace));
    }

    // Backward through FC2 and the two LSTM layers.
    std::vector<double> dh2(T * H, 0.0), dd2(T * H, 0.0), dh1(T * H, 0.0), dd1(T * F, 0.0);
    auto dW2 = grad(Tensor::Fc2W);
    auto db2 = grad(Tensor::Fc2B);
    const auto W2 = p.tensor(Tensor::Fc2W);
    for (std::size_t t = 0; t < T; ++t) {
      if (!s.valid(t)) continue;
      std::array<double, 2> dl{k.prob[2 * t] / N, k.prob[2 * t + 1] / N};
      dl[s.labels[t]] -= 1.0 / N;
      const std::span<const double> d3(k.d3.data() + t * H, H);
      nn::add_outer(dW2, dl, d3);
      db2[0] += dl[0];
      db2[1] += dl[1];
      std::span<double> g(dh2.data() + t * H, H);
      nn::add_matvec_t(W2, dl, g);
      for (std::size_t j = 0; j < H; ++j) g[j] *= k.m3[t * H + j];
    }
    detail::lstm_backward(p.tensor(Tensor::Lstm2Wx), p.tensor(Tensor::Lstm2Wh), T, H, H, k.d2, k.g2, k.c2, k.h2,
                          dh2, grad(Tensor::Lstm2Wx), grad(Tensor::Lstm2Wh), grad(Tensor::Lstm2B), dd2);
    for (std::size_t i = 0; i < T * H; ++i) dh1[i] = dd2[i] * k.m2[i];
    detail::lstm_backward(p.tensor(Tensor::Lstm1Wx), p.tensor(Tensor::Lstm1Wh), T, H, F, k.d1, k.g1, k.c1, k.h1,
                          dh1, grad(Tensor::Lstm1Wx), grad(Tensor::Lstm1Wh), grad(Tensor::Lstm1B), dd1);
    dy[b].resize(T * F);
    for (std::size_t i = 0; i < T * F; ++i) dy[b][i] = dd1[i] * k.m1[i];
    xhat_all[b] = std::move(k.xhat);
  }

  // Batch-norm backward with batch statistics, then FC1.
  std::vector<double> sum_dxhat(F, 0.0), sum_dxhat_xhat(F, 0.0);
  auto dgamma = grad(Tensor::BnGamma), dbeta = grad(Tensor::BnBeta);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t t = 0; t < batch[b].steps; ++t) {
      if (!batch[b].valid(t)) continue;
      for (std::size_t j = 0; j < F; ++j) {
        const double g = dy[b][t * F + j], xh = xhat_all[b][t * F + j];
        dgamma[j] += g * xh;
        dbeta[j] += g;
        const double dxh = g * gamma[j];
        sum_dxhat[j] += dxh;
        sum_dxhat_xhat[j] += dxh * xh;
      }
    }
  auto dW1 = grad(Tensor::Fc1W), db1 = grad(Tensor::Fc1B);
  std::vector<double> dz(F);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t t = 0; t < batch[b].steps; ++t) {
      if (!batch[b].valid(t)) continue;
      for (std::size_t j = 0; j < F; ++j) {
        const double dxh = dy[b][t * F + j] * gamma[j];
        dz[j] = inv_std[j] / N * (N * dxh - sum_dxhat[j] - xhat_all[b][t * F + j] * sum_dxhat_xhat[j]);
        db1[j] += dz[j];
      }
      nn::add_outer(dW1, dz, batch[b].step(t, I));
    }

  out.loss /= N;
  out.batch_mean = std::move(mean);
  out.batch_var = std::move(var);
  out.valid_steps = n_valid;
  return out;
}

/// Forward pass for one sequence. Infer mode is pure and uses the stepper;
/// train mode uses the sequence's own batch statistics and dropout.
inline PredictionTrace forward(const FdnnParams& p, const LabeledSequence& seq, Mode mode, Rng* dropout_rng = nullptr) {
  seq.validate(p.config.input_dim);
  if (mode == Mode::Train) {
    std::vector<LabeledSequence> one{seq};
    auto r = loss_and_gradients(p, one, dropout_rng, true);
    return std::move(r.traces.front());
  }
  FdnnStepper stepper(p);
  PredictionTrace trace;
  trace.p_falling.reserve(seq.steps);
  for (std::size_t t = 0; t < seq.steps; ++t) trace.p_falling.push_back(stepper.step(seq.step(t, p.config.input_dim)));
  trace.decision = classify(trace.p_falling, p.config.threshold);
  return trace;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;  ///< 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;           ///< per-sample, valid steps
  double val_sequence_accuracy = 0.0;  ///< any-step decision vs any FALL label
  double wall_seconds = 0.0;
};

struct Accuracy {
  double sample = 0.0;
  double sequence = 0.0;
};

inline Accuracy evaluate_accuracy(const FdnnParams& p, std::span<const LabeledSequence> data) {
  std::size_t correct = 0, total = 0, seq_correct = 0;
  for (const auto& s : data) {
    const auto trace = forward(p, s, Mode::Infer);
    bool any_pred = false, any_label = false;
    for (std::size_t t = 0; t < s.steps; ++t) {
      if (!s.valid(t)) continue;
      ++total;
      correct += trace.decision[t] == s.labels[t];
      any_pred |= trace.decision[t] != 0;
      any_label |= s.labels[t] != 0;
    }
    seq_correct += any_pred == any_label;
  }
  return {total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0,
          data.empty() ? 0.0 : static_cast<double>(seq_correct) / static_cast<double>(data.size())};
}

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,train_loss,val_accuracy,wall_seconds\n";
  for (const auto& e : log)
    out += std::to_string(e.epoch) + "," + csv::format_double(e.train_loss) + "," +
           csv::format_double(e.val_accuracy) + "," + csv::format_double(e.wall_seconds) + "\n";
  return out;
}

struct TrainResult {
  FdnnParams params;  ///< snapshot with the highest validation accuracy
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

/// Adam state over the flat weight vector.
class Adam {
 public:
  Adam(std::size_t n, const FdnnConfig& c) : m_(n, 0.0), v_(n, 0.0), c_(c) {}

  void step(std::vector<double>& w, const std::vector<double>& g) {
    ++t_;
    const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m_[i] = c_.beta1 * m_[i] + (1.0 - c_.beta1) * g[i];
      v_[i] = c_.beta2 * v_[i] + (1.0 - c_.beta2) * g[i] * g[i];
      w[i] -= c_.learning_rate * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + c_.adam_epsilon);
    }
  }

 private:
  std::vector<double> m_, v_;
  FdnnConfig c_;
  std::size_t t_ = 0;
};

inline void clip_gradient(std::vector<double>& g, double max_norm) {
  if (!(max_norm > 0.0)) return;
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm)
    for (double& v : g) v *= max_norm / norm;
}

/// Mini-batch training with validation-accuracy model selection (ties keep
/// the earliest epoch). Each sequence is processed to its own length, which
/// equals padding to the batch maximum with masked loss.
inline TrainResult train(const FdnnConfig& config, std::span<const LabeledSequence> train_set,
                         std::span<const LabeledSequence> validation_set,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  config.validate();
  if (train_set.empty() || validation_set.empty()) throw ValidationError("training and validation sets must be non-empty");
  auto params = init_params(config, config.seed);
  Adam adam(params.weights.size(), config);
  Rng rng(config.seed ^ 0x9E3779B97F4A7C15ULL);

  TrainResult result;
  result.params = params;
  bool have_best = false;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t step_sum = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const auto end = std::min(order.size(), begin + config.batch_size);
      std::vector<LabeledSequence> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) batch.push_back(train_set[order[i]]);
      auto g = loss_and_gradients(params, batch, &rng);
      if (!std::isfinite(g.loss))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
      loss_sum += g.loss * static_cast<double>(g.valid_steps);
      step_sum += g.valid_steps;
      clip_gradient(g.gradient, config.clip_norm);
      adam.step(params.weights, g.gradient);
      for (std::size_t k = 0; k < config.fc1_units; ++k) {
        params.running_mean[k] = config.bn_momentum * params.running_mean[k] + (1.0 - config.bn_momentum) * g.batch_mean[k];
        params.running_var[k] = config.bn_momentum * params.running_var[k] + (1.0 - config.bn_momentum) * g.batch_var[k];
        params.running_var[k] = std::max(params.running_var[k], 1e-12);
      }
    }
    const auto acc = evaluate_accuracy(params, validation_set);
    EpochLog e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(step_sum);
    e.val_accuracy = acc.sample;
    e.val_sequence_accuracy = acc.sequence;
    e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);
    if (!have_best || e.val_accuracy > result.best_val_accuracy) {
      have_best = true;
      result.best_val_accuracy = e.val_accuracy;
      result.best_epoch = epoch;
      result.params = params;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kFdnnKind = "fdnn";

/// `metadata` is stored verbatim (feature names, filter settings, ...).
inline void save_checkpoint(const FdnnParams& p, const StandardizationStats& stats, const std::string& path,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
  p.validate();
  if (stats.size() != p.config.input_dim) throw ValidationError("standardizer width does not match the network input");
  const FdnnLayout l(p.config);
  nlohmann::json tensors = nlohmann::json::array();
  for (int t = 0; t < kTensorCount; ++t)
    tensors.push_back({{"name", kTensorNames[t]}, {"shape", {l.rows[t], l.cols[t]}}});
  container::Blob blob;
  blob.header = {{"kind", kFdnnKind}, {"config", p.config},      {"tensors", tensors},
                 {"standardizer", to_json(stats)}, {"metadata", metadata}};
  blob.payload = p.weights;
  blob.payload.insert(blob.payload.end(), p.running_mean.begin(), p.running_mean.end());
  blob.payload.insert(blob.payload.end(), p.running_var.begin(), p.running_var.end());
  container::save(path, blob);
}

struct FdnnCheckpoint {
  FdnnParams params;
  StandardizationStats standardizer;
  nlohmann::json metadata;
};

inline FdnnCheckpoint decode_fdnn_checkpoint(const container::Blob& blob, const std::string& what) {
  if (!blob.header.contains("standardizer")) throw ValidationError(what + ": checkpoint has no standardizer block");
  FdnnCheckpoint ck;
  try {
    ck.params.config = blob.header.at("config").get<FdnnConfig>();
    ck.standardizer = standardizer_from_json(blob.header.at("standardizer"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(what + ": malformed header: " + e.what());
  }
  ck.metadata = blob.header.value("metadata", nlohmann::json::object());
  const FdnnLayout l(ck.params.config);
  const auto F = ck.params.config.fc1_units;
  if (blob.payload.size() != l.total + 2 * F) throw ValidationError(what + ": payload does not match declared shapes");
  const auto& tensors = blob.header.at("tensors");
  if (!tensors.is_array() || tensors.size() != static_cast<std::size_t>(kTensorCount))
    throw ValidationError(what + ": tensor table mismatch");
  for (int t = 0; t < kTensorCount; ++t) {
    const auto shape = tensors[static_cast<std::size_t>(t)].at("shape").get<std::vector<std::size_t>>();
    if (shape != std::vector<std::size_t>{l.rows[t], l.cols[t]}) throw ValidationError(what + ": tensor shape mismatch");
  }
  const auto* d = blob.payload.data();
  ck.params.weights.assign(d, d + l.total);
  ck.params.running_mean.assign(d + l.total, d + l.total + F);
  ck.params.running_var.assign(d + l.total + F, d + l.total + 2 * F);
  ck.params.validate();
  if (ck.standardizer.size() != ck.params.config.input_dim)
    throw ValidationError(what + ": standardizer width does not match the network input");
  return ck;
}

inline FdnnCheckpoint load_checkpoint(const std::string& path) {
  return decode_fdnn_checkpoint(container::load(path, kFdnnKind), path);
}

}  // namespace fallkan
