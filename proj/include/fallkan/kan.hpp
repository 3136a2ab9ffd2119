#pragma once

// Kolmogorov-Arnold time-of-impact regressor
//   y = sum_j Phi_j( sum_i phi_ij(x_i) ),  j = 0..2d,
// with piecewise-linear univariate functions identified record by record
// with the Newton-Kaczmarz projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fallkan/container.hpp"
#include "fallkan/csv.hpp"
#include "fallkan/error.hpp"
#include "fallkan/features.hpp"
#include "fallkan/rng.hpp"
#include "fallkan/sisfall.hpp"

namespace fallkan {

// ---------------------------------------------------------------------------
// Piecewise-linear functions

/// Nodes with nonzero interpolation weight at some x, plus the local slope.
struct NodeWeights {
  std::size_t first = 0;    ///< index of the first active node
  std::size_t count = 1;    ///< 1 or 2 active nodes
  double w0 = 1.0, w1 = 0.0;
  double slope = 0.0;       ///< derivative in x; zero where the argument is clamped
};

struct PwlFunction {
  std::vector<double> grid;
  std::vector<double> values;

  static PwlFunction uniform(double lo, double hi, std::size_t nodes, double fill = 0.0) {
    if (nodes < 2 || !(hi > lo)) throw ValidationError("a piecewise-linear grid needs >= 2 nodes over a non-empty range");
    PwlFunction f;
    f.grid.resize(nodes);
    for (std::size_t k = 0; k < nodes; ++k)
      f.grid[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(nodes - 1);
    f.grid.back() = hi;
    f.values.assign(nodes, fill);
    return f;
  }

  void validate() const {
    if (grid.size() < 2 || grid.size() != values.size()) throw ValidationError("piecewise-linear function needs >= 2 nodes");
    for (std::size_t k = 0; k < grid.size(); ++k) {
      if (!std::isfinite(grid[k]) || !std::isfinite(values[k])) throw ValidationError("non-finite piecewise-linear node");
      if (k > 0 && !(grid[k] > grid[k - 1])) throw ValidationError("grid must be strictly increasing");
    }
  }

  friend bool operator==(const PwlFunction&, const PwlFunction&) = default;
};

/// Interpolation coefficients of the bracketing nodes. Outside the grid the
/// argument is clamped, so the single end node carries weight 1.
inline NodeWeights pwl_grad_nodes(const PwlFunction& f, double x) {
  NodeWeights nw;
  const auto& g = f.grid;
  if (!(x > g.front())) {
    nw.first = 0;
    return nw;
  }
  if (!(x < g.back())) {
    nw.first = g.size() - 1;
    return nw;
  }
  const auto k = static_cast<std::size_t>(std::upper_bound(g.begin(), g.end(), x) - g.begin()) - 1;
  const double h = g[k + 1] - g[k];
  const double t = (x - g[k]) / h;
  nw.first = k;
  nw.slope = (f.values[k + 1] - f.values[k]) / h;
  if (t == 0.0) return nw;
  nw.count = 2;
  nw.w0 = 1.0 - t;
  nw.w1 = t;
  return nw;
}

inline double pwl_eval(const PwlFunction& f, const NodeWeights& nw) {
  double v = nw.w0 * f.values[nw.first];
  if (nw.count == 2) v += nw.w1 * f.values[nw.first + 1];
  return v;
}

inline double pwl_eval(const PwlFunction& f, double x) { return pwl_eval(f, pwl_grad_nodes(f, x)); }

// ---------------------------------------------------------------------------
// Configuration and model

struct KanConfig {
  std::size_t n = 4;          ///< inner nodes
  std::size_t q = 64;         ///< outer nodes
  double mu = 0.0625;
  double window_ms = 50.0;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  bool shuffle = true;             ///< seeded shuffle per epoch; false = sequential
  bool standardize_target = true;  ///< fit in standardized target units (outputs stay in ms)
  double inner_range = 3.0;        ///< inner grids span [-inner_range, inner_range]
  double init_noise = 0.1;         ///< inner node values start in [-init_noise, init_noise]
  double outer_margin = 0.5;       ///< outer grids widen the warm-up range by this fraction per side

  void validate() const {
    if (n < 2 || q < 2) throw ValidationError("KAN node counts must be >= 2");
    if (!(mu > 0.0 && mu < 2.0)) throw ValidationError("KAN mu must lie in (0, 2)");
    const double w = window_ms / kSamplePeriodMs;
    if (!(window_ms > 0.0) || w != std::round(w)) throw ValidationError("KAN window must be a positive multiple of 5 ms");
    if (epochs == 0) throw ValidationError("KAN epochs must be positive");
    if (!(inner_range > 0.0) || !(init_noise >= 0.0) || !(outer_margin >= 0.0))
      throw ValidationError("invalid KAN grid settings");
  }

  std::size_t window_samples() const { return static_cast<std::size_t>(std::llround(window_ms / kSamplePeriodMs)); }

  friend bool operator==(const KanConfig&, const KanConfig&) = default;
};

inline void to_json(nlohmann::json& j, const KanConfig& c) {
  j = {{"n", c.n},
       {"q", c.q},
       {"mu", c.mu},
       {"window_ms", c.window_ms},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"shuffle", c.shuffle},
       {"standardize_target", c.standardize_target},
       {"inner_range", c.inner_range},
       {"init_noise", c.init_noise},
       {"outer_margin", c.outer_margin}};
}

inline void from_json(const nlohmann::json& j, KanConfig& c) {
  const KanConfig d;
  c.n = j.value("n", d.n);
  c.q = j.value("q", d.q);
  c.mu = j.value("mu", d.mu);
  c.window_ms = j.value("window_ms", d.window_ms);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.shuffle = j.value("shuffle", d.shuffle);
  c.standardize_target = j.value("standardize_target", d.standardize_target);
  c.inner_range = j.value("inner_range", d.inner_range);
  c.init_noise = j.value("init_noise", d.init_noise);
  c.outer_margin = j.value("outer_margin", d.outer_margin);
}

struct KanModel {
  std::size_t d = 0;
  KanConfig config;
  std::vector<PwlFunction> inner;  ///< index j * d + i
  std::vector<PwlFunction> outer;  ///< 2d + 1 entries
  StandardizationStats standardizer;
  std::vector<std::string> features;
  double target_mean = 0.0;   ///< ms = target_mean + target_scale * raw output
  double target_scale = 1.0;

  std::size_t branches() const { return 2 * d + 1; }
  PwlFunction& phi(std::size_t i, std::size_t j) { return inner[j * d + i]; }
  const PwlFunction& phi(std::size_t i, std::size_t j) const { return inner[j * d + i]; }

  void validate() const {
    if (d == 0) throw ValidationError("KAN input dimension must be positive");
    if (inner.size() != branches() * d || outer.size() != branches())
      throw ValidationError("KAN must have (2d+1)*d inner and 2d+1 outer functions");
    for (const auto& f : inner) {
      f.validate();
      if (f.grid.size() != inner.front().grid.size()) throw ValidationError("inner node counts must be uniform");
    }
    for (const auto& f : outer) {
      f.validate();
      if (f.grid.size() != outer.front().grid.size()) throw ValidationError("outer node counts must be uniform");
    }
    if (!standardizer.mean.empty() && standardizer.size() != d) throw ValidationError("standardizer width != d");
    if (!features.empty() && features.size() != d) throw ValidationError("feature list width != d");
    if (!std::isfinite(target_mean) || !(target_scale > 0.0)) throw ValidationError("invalid target scaling");
  }

  friend bool operator==(const KanModel&, const KanModel&) = default;
};

/// Empty model with the configured grids; inner values get seeded noise,
/// outer grids span [lo, hi] with zero values.
inline KanModel make_kan(std::size_t d, const KanConfig& cfg, double outer_lo = -1.0, double outer_hi = 1.0) {
  cfg.validate();
  if (d == 0) throw ValidationError("KAN input dimension must be positive");
  KanModel m;
  m.d = d;
  m.config = cfg;
  Rng rng(cfg.seed);
  for (std::size_t k = 0; k < (2 * d + 1) * d; ++k) {
    auto f = PwlFunction::uniform(-cfg.inner_range, cfg.inner_range, cfg.n);
    for (double& v : f.values) v = cfg.init_noise > 0.0 ? rng.uniform(-cfg.init_noise, cfg.init_noise) : 0.0;
    m.inner.push_back(std::move(f));
  }
  for (std::size_t j = 0; j < 2 * d + 1; ++j) m.outer.push_back(PwlFunction::uniform(outer_lo, outer_hi, cfg.q));
  return m;
}

namespace detail {

inline double raw_eval(const KanModel& m, std::span<const double> x) {
  double y = 0.0;
  for (std::size_t j = 0; j < m.branches(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.d; ++i) s += pwl_eval(m.phi(i, j), x[i]);
    y += pwl_eval(m.outer[j], s);
  }
  return y;
}

inline void check_width(const KanModel& m, std::span<const double> x) {
  if (x.size() != m.d) throw ValidationError("KAN input has " + std::to_string(x.size()) + " entries, expected " + std::to_string(m.d));
}

}  // namespace detail

/// Evaluates a standardized input; the result is in ms and may be negative.
inline double kan_eval(const KanModel& m, std::span<const double> x) {
  detail::check_width(m, x);
  return m.target_mean + m.target_scale * detail::raw_eval(m, x);
}

/// Gradient of the raw output with respect to every node value, flattened
/// as all inner values (function order) followed by all outer values.
/// Only the bracketing nodes are nonzero.
struct SparseGradient {
  std::vector<std::size_t> index;
  std::vector<double> value;
};

inline std::size_t parameter_count(const KanModel& m) {
  std::size_t n = 0;
  for (const auto& f : m.inner) n += f.values.size();
  for (const auto& f : m.outer) n += f.values.size();
  return n;
}

inline SparseGradient node_gradient(const KanModel& m, std::span<const double> x) {
  detail::check_width(m, x);
  SparseGradient g;
  const std::size_t n = m.inner.front().values.size(), q = m.outer.front().values.size();
  const std::size_t outer_base = m.inner.size() * n;
  std::vector<NodeWeights> in(m.d);
  for (std::size_t j = 0; j < m.branches(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.d; ++i) {
      in[i] = pwl_grad_nodes(m.phi(i, j), x[i]);
      s += pwl_eval(m.phi(i, j), in[i]);
    }
    const auto out = pwl_grad_nodes(m.outer[j], s);
    g.index.push_back(outer_base + j * q + out.first);
    g.value.push_back(out.w0);
    if (out.count == 2) {
      g.index.push_back(outer_base + j * q + out.first + 1);
      g.value.push_back(out.w1);
    }
    if (out.slope == 0.0) continue;
    for (std::size_t i = 0; i < m.d; ++i) {
      const std::size_t base = (j * m.d + i) * n;
      g.index.push_back(base + in[i].first);
      g.value.push_back(out.slope * in[i].w0);
      if (in[i].count == 2) {
        g.index.push_back(base + in[i].first + 1);
        g.value.push_back(out.slope * in[i].w1);
      }
    }
  }
  return g;
}

inline double& node_value(KanModel& m, std::size_t flat) {
  const std::size_t n = m.inner.front().values.size(), q = m.outer.front().values.size();
  const std::size_t inner_total = m.inner.size() * n;
  if (flat < inner_total) return m.inner[flat / n].values[flat % n];
  flat -= inner_total;
  if (flat >= m.outer.size() * q) throw ValidationError("node index out of range");
  return m.outer[flat / q].values[flat % q];
}

inline constexpr double kKaczmarzLambda = 1e-12;

struct UpdateResult {
  double residual = 0.0;  ///< before the update, in model (raw) units
  bool degenerate = false;
};

/// One Newton-Kaczmarz projection for a single standardized record with
/// target `y_ms`. With gᵀg = 0 nothing changes and `degenerate` is set.
inline UpdateResult kaczmarz_update(KanModel& m, std::span<const double> x, double y_ms, double mu) {
  const double target = (y_ms - m.target_mean) / m.target_scale;
  UpdateResult u;
  u.residual = target - detail::raw_eval(m, x);
  if (u.residual == 0.0) return u;
  const auto g = node_gradient(m, x);
  double gg = 0.0;
  for (double v : g.value) gg += v * v;
  if (gg == 0.0) {
    u.degenerate = true;
    return u;
  }
  const double step = mu * u.residual / (gg + kKaczmarzLambda);
  for (std::size_t k = 0; k < g.index.size(); ++k) node_value(m, g.index[k]) += step * g.value[k];
  return u;
}

// ---------------------------------------------------------------------------
// Records: smoothed selected features with time-of-impact targets

struct KanRecords {
  Matrix x;  ///< smoothed, unstandardized selected features
  std::vector<double> y;
  std::vector<std::size_t> segment;  ///< owning segment per row

  std::size_t size() const { return y.size(); }
};

/// Trailing mean over `window` rows of the history + segment concatenation,
/// truncated where the trial starts.
inline Matrix smooth_segment(const FallSegment& s, std::span<const std::size_t> columns, std::size_t window) {
  if (window == 0) throw ValidationError("smoothing window must be positive");
  const std::size_t H = s.history.rows, N = s.rows.rows, D = columns.size();
  auto at = [&](std::size_t r, std::size_t c) { return r < H ? s.history(r, c) : s.rows(r - H, c); };
  Matrix out(N, D);
  for (std::size_t t = 0; t < N; ++t) {
    const std::size_t end = H + t + 1;
    const std::size_t begin = end > window ? end - window : 0;
    for (std::size_t k = 0; k < D; ++k) {
      double sum = 0.0;
      for (std::size_t r = begin; r < end; ++r) sum += at(r, columns[k]);
      out(t, k) = sum / static_cast<double>(end - begin);
    }
  }
  return out;
}

inline std::vector<std::size_t> feature_columns(const FallSegment& s, std::span<const std::string> names) {
  std::vector<std::size_t> cols;
  for (const auto& n : names) {
    const auto it = std::find(s.features.begin(), s.features.end(), n);
    if (it == s.features.end()) throw ValidationError("segment " + s.id.str() + " lacks feature '" + n + "'");
    cols.push_back(static_cast<std::size_t>(it - s.features.begin()));
  }
  return cols;
}

inline KanRecords build_records(std::span<const FallSegment> segments, std::span<const std::string> features,
                                std::size_t window) {
  KanRecords r;
  r.x = Matrix(0, features.size());
  for (std::size_t k = 0; k < segments.size(); ++k) {
    const auto& s = segments[k];
    if (s.tti_ms.size() != s.rows.rows) throw ValidationError("segment " + s.id.str() + " has mismatched targets");
    const auto cols = feature_columns(s, features);
    const auto sm = smooth_segment(s, cols, window);
    r.x.data.insert(r.x.data.end(), sm.data.begin(), sm.data.end());
    r.x.rows += sm.rows;
    r.y.insert(r.y.end(), s.tti_ms.begin(), s.tti_ms.end());
    r.segment.insert(r.segment.end(), sm.rows, k);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Fitting

struct KanEpochLog {
  std::size_t epoch = 0;
  double train_rmse = 0.0;
  double val_rmse = 0.0;
  std::size_t degenerate_updates = 0;
};

struct KanFitResult {
  KanModel model;  ///< epoch with the lowest validation RMSE (ties: earliest)
  std::vector<KanEpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_rmse = 0.0;
};

inline std::string kan_log_csv(const std::vector<KanEpochLog>& log) {
  std::string out = "epoch,train_rmse,val_rmse\n";
  for (const auto& e : log)
    out += std::to_string(e.epoch) + "," + csv::format_double(e.train_rmse) + "," + csv::format_double(e.val_rmse) + "\n";
  return out;
}

/// RMSE in ms over standardized rows.
inline double kan_rmse(const KanModel& m, const Matrix& z, std::span<const double> y) {
  if (z.rows == 0) return 0.0;
  double sq = 0.0;
  for (std::size_t r = 0; r < z.rows; ++r) {
    const double e = kan_eval(m, z.row(r)) - y[r];
    sq += e * e;
  }
  return std::sqrt(sq / static_cast<double>(z.rows));
}

/// `train` and `validation` hold raw (smoothed) features; the input
/// standardizer is fit on the training rows and stored in the model.
inline KanFitResult fit(const KanConfig& cfg, const Matrix& train_x, std::span<const double> train_y,
                        const Matrix& val_x, std::span<const double> val_y,
                        std::vector<std::string> features = {},
                        const std::function<void(const KanEpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train_x.rows == 0) throw ValidationError("KAN training set is empty");
  if (train_x.rows != train_y.size() || val_x.rows != val_y.size()) throw ValidationError("KAN rows and targets differ");
  if (val_x.rows > 0 && val_x.cols != train_x.cols) throw ValidationError("KAN validation width differs from training");
  const std::size_t d = train_x.cols;

  const auto stats = fit_standardizer(train_x);
  const auto z = apply_standardizer(stats, train_x);
  const auto zv = val_x.rows > 0 ? apply_standardizer(stats, val_x) : Matrix(0, d);

  double y_mean = 0.0;
  for (double v : train_y) y_mean += v;
  y_mean /= static_cast<double>(train_y.size());

  KanModel m = make_kan(d, cfg);
  m.standardizer = stats;
  m.features = std::move(features);
  if (cfg.standardize_target) {
    double var = 0.0;
    for (double v : train_y) var += (v - y_mean) * (v - y_mean);
    m.target_mean = y_mean;
    m.target_scale = std::max(std::sqrt(var / static_cast<double>(train_y.size())), kMinStd);
  }

  // Warm-up pass: outer grids cover the inner sums of the initial model.
  for (std::size_t j = 0; j < m.branches(); ++j) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t r = 0; r < z.rows; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += pwl_eval(m.phi(i, j), z(r, i));
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    const double span = std::max(hi - lo, 1e-6);
    lo -= cfg.outer_margin * span;
    hi += cfg.outer_margin * span;
    auto f = PwlFunction::uniform(lo, hi, cfg.q);
    const double top = (y_mean - m.target_mean) / m.target_scale / static_cast<double>(m.branches());
    for (std::size_t k = 0; k < cfg.q; ++k) f.values[k] = top * static_cast<double>(k) / static_cast<double>(cfg.q - 1);
    m.outer[j] = std::move(f);
  }

  Rng rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(z.rows);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  KanFitResult result;
  bool have_best = false;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) rng.shuffle(std::span<std::size_t>(order));
    KanEpochLog e;
    e.epoch = epoch;
    for (auto r : order)
      if (kaczmarz_update(m, z.row(r), train_y[r], cfg.mu).degenerate) ++e.degenerate_updates;
    e.train_rmse = kan_rmse(m, z, train_y);
    e.val_rmse = zv.rows > 0 ? kan_rmse(m, zv, val_y) : e.train_rmse;
    if (!std::isfinite(e.train_rmse)) throw NumericError("KAN fit diverged at epoch " + std::to_string(epoch));
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);
    if (!have_best || e.val_rmse < result.best_val_rmse) {
      have_best = true;
      result.best_val_rmse = e.val_rmse;
      result.best_epoch = epoch;
      result.model = m;
    }
  }
  return result;
}

inline KanFitResult fit(const KanConfig& cfg, const KanRecords& train, const KanRecords& validation,
                        std::vector<std::string> features = {},
                        const std::function<void(const KanEpochLog&)>& on_epoch = {}) {
  return fit(cfg, train.x, train.y, validation.x, validation.y, std::move(features), on_epoch);
}

inline KanFitResult fit_segments(const KanConfig& cfg, std::span<const FallSegment> train,
                                 std::span<const FallSegment> validation, const std::vector<std::string>& features,
                                 const std::function<void(const KanEpochLog&)>& on_epoch = {}) {
  const auto w = cfg.window_samples();
  return fit(cfg, build_records(train, features, w), build_records(validation, features, w), features, on_epoch);
}

// ---------------------------------------------------------------------------
// Prediction

/// Evaluates one smoothed, unstandardized row; clamped to >= 0 ms.
inline double predict_smoothed(const KanModel& m, std::span<const double> smoothed) {
  detail::check_width(m, smoothed);
  std::vector<double> z(smoothed.begin(), smoothed.end());
  if (!m.standardizer.mean.empty()) m.standardizer.apply_row(z);
  return std::max(0.0, kan_eval(m, z));
}

/// `window` holds recent rows (oldest first) of the selected features; the
/// trailing w ms are averaged.
inline double predict_tti(const KanModel& m, std::span<const std::vector<double>> window) {
  const auto W = m.config.window_samples();
  if (window.size() < W)
    throw ValidationError("prediction window holds " + std::to_string(window.size()) + " rows, needs " + std::to_string(W));
  std::vector<double> mean(m.d, 0.0);
  for (std::size_t r = window.size() - W; r < window.size(); ++r) {
    detail::check_width(m, window[r]);
    for (std::size_t i = 0; i < m.d; ++i) mean[i] += window[r][i];
  }
  for (double& v : mean) v /= static_cast<double>(W);
  return predict_smoothed(m, mean);
}

/// Clamped predictions for every row of a segment.
inline std::vector<double> predict_segment(const KanModel& m, const FallSegment& s) {
  const auto sm = smooth_segment(s, feature_columns(s, m.features), m.config.window_samples());
  std::vector<double> out(sm.rows);
  for (std::size_t r = 0; r < sm.rows; ++r) out[r] = predict_smoothed(m, sm.row(r));
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation over repetitions

/// Repetition roles per (subject, activity). Validation folds rotate over
/// the tuning repetitions; the test repetition is never used here.
struct CvPlan {
  std::vector<int> tuning_repetitions{1, 2, 3, 4};
  int test_repetition = 5;

  void validate() const {
    if (tuning_repetitions.size() < 2) throw ValidationError("cross-validation needs >= 2 tuning repetitions");
    std::set<int> seen(tuning_repetitions.begin(), tuning_repetitions.end());
    if (seen.size() != tuning_repetitions.size() || seen.count(test_repetition))
      throw ValidationError("cross-validation repetition sets must be disjoint");
  }

  std::size_t folds() const { return tuning_repetitions.size(); }
  int validation_repetition(std::size_t fold) const { return tuning_repetitions.at(fold); }
  bool is_train(int rep, std::size_t fold) const {
    return rep != test_repetition && rep != validation_repetition(fold) &&
           std::find(tuning_repetitions.begin(), tuning_repetitions.end(), rep) != tuning_repetitions.end();
  }
};

struct CvScore {
  KanConfig config;
  std::vector<double> fold_rmse;
  double mean_rmse = 0.0;
};

struct CvResult {
  KanConfig best;
  std::vector<CvScore> table;  ///< one row per candidate, grid order
  std::vector<std::string> warnings;

  std::string to_csv() const {
    std::string out = "n,q,mu,window_ms,mean_val_rmse";
    const auto folds = table.empty() ? 0 : table.front().fold_rmse.size();
    for (std::size_t f = 0; f < folds; ++f) out += ",fold" + std::to_string(f + 1) + "_rmse";
    out += "\n";
    for (const auto& s : table) {
      out += std::to_string(s.config.n) + "," + std::to_string(s.config.q) + "," + csv::format_double(s.config.mu) + "," +
             csv::format_double(s.config.window_ms) + "," + csv::format_double(s.mean_rmse);
      for (double v : s.fold_rmse) out += "," + csv::format_double(v);
      out += "\n";
    }
    return out;
  }
};

/// Notes (subject, activity) groups lacking some repetition; such groups
/// contribute only the folds they can.
inline std::vector<std::string> cv_coverage_warnings(std::span<const FallSegment> segments, const CvPlan& plan) {
  std::map<std::string, std::set<int>> reps;
  for (const auto& s : segments) reps[s.id.subject + "/" + s.id.activity.str()].insert(s.id.repetition);
  std::vector<std::string> out;
  for (const auto& [group, have] : reps) {
    std::vector<int> need = plan.tuning_repetitions;
    need.push_back(plan.test_repetition);
    for (int r : need)
      if (!have.count(r)) out.push_back(group + " lacks repetition " + std::to_string(r));
  }
  return out;
}

/// `jobs` candidate configurations are fitted concurrently.
inline CvResult cross_validate(std::span<const KanConfig> grid, const CvPlan& plan, std::span<const FallSegment> segments,
                               const std::vector<std::string>& features, std::size_t jobs = 1) {
  if (grid.empty()) throw ValidationError("hyperparameter grid is empty");
  plan.validate();
  for (const auto& c : grid) c.validate();
  CvResult result;
  result.warnings = cv_coverage_warnings(segments, plan);
  result.table.resize(grid.size());
  detail::parallel_for(grid.size(), jobs, [&](std::size_t g) {
    CvScore score;
    score.config = grid[g];
    const auto w = grid[g].window_samples();
    for (std::size_t f = 0; f < plan.folds(); ++f) {
      std::vector<FallSegment> tr, va;
      for (const auto& s : segments) {
        if (s.id.repetition == plan.validation_repetition(f)) va.push_back(s);
        else if (plan.is_train(s.id.repetition, f)) tr.push_back(s);
      }
      if (tr.empty() || va.empty()) continue;
      const auto vr = build_records(va, features, w);
      const auto fitted = fit(grid[g], build_records(tr, features, w), vr, features);
      score.fold_rmse.push_back(kan_rmse(fitted.model, apply_standardizer(fitted.model.standardizer, vr.x), vr.y));
    }
    if (score.fold_rmse.empty()) throw ValidationError("no cross-validation fold has both training and validation data");
    for (double v : score.fold_rmse) score.mean_rmse += v;
    score.mean_rmse /= static_cast<double>(score.fold_rmse.size());
    result.table[g] = std::move(score);
  });
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g)
    if (result.table[g].mean_rmse < result.table[best].mean_rmse) best = g;
  result.best = grid[best];
  return result;
}

/// The candidate grid explored by default; contains the reference optimum.
inline std::vector<KanConfig> default_kan_grid(const KanConfig& base = {}) {
  std::vector<KanConfig> grid;
  for (std::size_t n : {4u, 6u})
    for (std::size_t q : {32u, 64u})
      for (double mu : {0.03125, 0.0625})
        for (double w : {25.0, 50.0}) {
          auto c = base;
          c.n = n;
          c.q = q;
          c.mu = mu;
          c.window_ms = w;
          grid.push_back(c);
        }
  return grid;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kKanKind = "kan";

inline void save_kan(const KanModel& m, const std::string& path) {
  m.validate();
  nlohmann::json inner_grids = nlohmann::json::array(), outer_grids = nlohmann::json::array();
  container::Blob blob;
  for (const auto& f : m.inner) {
    inner_grids.push_back(f.grid);
    blob.payload.insert(blob.payload.end(), f.values.begin(), f.values.end());
  }
  for (const auto& f : m.outer) {
    outer_grids.push_back(f.grid);
    blob.payload.insert(blob.payload.end(), f.values.begin(), f.values.end());
  }
  blob.header = {{"kind", kKanKind},
                 {"config", m.config},
                 {"d", m.d},
                 {"inner_grids", inner_grids},
                 {"outer_grids", outer_grids},
                 {"standardizer", to_json(m.standardizer)},
                 {"features", m.features},
                 {"target_mean", m.target_mean},
                 {"target_scale", m.target_scale}};
  container::save(path, blob);
}

inline KanModel decode_kan(const container::Blob& blob, const std::string& what) {
  KanModel m;
  try {
    const auto& h = blob.header;
    m.config = h.at("config").get<KanConfig>();
    m.d = h.at("d").get<std::size_t>();
    m.features = h.at("features").get<std::vector<std::string>>();
    m.target_mean = h.at("target_mean").get<double>();
    m.target_scale = h.at("target_scale").get<double>();
    if (!h.contains("standardizer")) throw ValidationError(what + ": KAN checkpoint has no standardizer block");
    m.standardizer = standardizer_from_json(h.at("standardizer"));
    std::size_t at = 0;
    auto take = [&](const nlohmann::json& grids, std::vector<PwlFunction>& into) {
      for (const auto& g : grids) {
        PwlFunction f;
        f.grid = g.get<std::vector<double>>();
        if (blob.payload.size() < at + f.grid.size()) throw ValidationError(what + ": payload shorter than declared grids");
        f.values.assign(blob.payload.begin() + static_cast<std::ptrdiff_t>(at),
                        blob.payload.begin() + static_cast<std::ptrdiff_t>(at + f.grid.size()));
        at += f.grid.size();
        into.push_back(std::move(f));
      }
    };
    take(h.at("inner_grids"), m.inner);
    take(h.at("outer_grids"), m.outer);
    if (at != blob.payload.size()) throw ValidationError(what + ": payload longer than declared grids");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(what + ": malformed KAN header: " + e.what());
  }
  m.validate();
  return m;
}

inline KanModel load_kan(const std::string& path) { return decode_kan(container::load(path, kKanKind), path); }

}  // namespace fallkan
