#pragma once

// Feature assembly and selection: per-sample feature frames, standardization,
// correlation and mRMR ranking, fall-segment extraction with time-of-impact
// targets, and sequence-level dataset splits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fallkan/csv.hpp"
#include "fallkan/error.hpp"
#include "fallkan/orientation.hpp"
#include "fallkan/rng.hpp"
#include "fallkan/sisfall.hpp"

namespace fallkan {

// ---------------------------------------------------------------------------
// Signals

enum class Signal : int {
  Age, Height, Weight, Gender,
  AxAdxl, AyAdxl, AzAdxl,
  AxMma, AyMma, AzMma,
  GxItg, GyItg, GzItg,
  Q1, Q2, Q3, Q4,
  Theta, ThetaDeriv,
};

inline constexpr std::size_t kStaticSignals = 4;
inline constexpr std::size_t kDynamicSignals = 14;
inline constexpr std::size_t kFdnnInputs = kStaticSignals + kDynamicSignals;  // 18
inline constexpr std::size_t kAllSignals = kFdnnInputs + 1;                    // 19

inline constexpr std::array<std::string_view, kAllSignals> kSignalNames{
    "age",         "height",      "weight",      "gender",          "a_x_adxl345",
    "a_y_adxl345", "a_z_adxl345", "a_x_mma8451q", "a_y_mma8451q",   "a_z_mma8451q",
    "omega_x_itg3200", "omega_y_itg3200", "omega_z_itg3200", "q1", "q2",
    "q3",          "q4",          "theta",       "theta_deriv"};

inline std::string_view signal_name(std::size_t index) { return kSignalNames.at(index); }

inline std::size_t signal_index(std::string_view name) {
  for (std::size_t i = 0; i < kSignalNames.size(); ++i)
    if (kSignalNames[i] == name) return i;
  throw ValidationError("unknown feature '" + std::string(name) + "'");
}

inline std::vector<std::string> signal_names(std::size_t count) {
  return {kSignalNames.begin(), kSignalNames.begin() + static_cast<std::ptrdiff_t>(count)};
}

/// Features used by the time-of-impact regressor.
inline std::vector<std::string> default_kan_features() {
  return {"a_y_adxl345", "a_y_mma8451q", "omega_y_itg3200", "theta", "theta_deriv"};
}

struct FeatureFrame {
  std::array<double, kStaticSignals> statics{};   ///< age, height, weight, gender
  std::array<double, kDynamicSignals> dynamic{};  ///< 9 sensor channels, q1..q4, theta
  double theta_deriv = 0.0;

  /// The 18-entry recurrent-network input.
  std::array<double, kFdnnInputs> fdnn_view() const {
    std::array<double, kFdnnInputs> v;
    std::copy(statics.begin(), statics.end(), v.begin());
    std::copy(dynamic.begin(), dynamic.end(), v.begin() + kStaticSignals);
    return v;
  }

  /// All 19 signals in Signal order.
  std::array<double, kAllSignals> full_view() const {
    std::array<double, kAllSignals> v;
    std::copy(statics.begin(), statics.end(), v.begin());
    std::copy(dynamic.begin(), dynamic.end(), v.begin() + kStaticSignals);
    v[kAllSignals - 1] = theta_deriv;
    return v;
  }
};

inline std::array<double, kStaticSignals> static_features(const SubjectProfile& p) {
  return {p.age, p.height_cm, p.weight_kg, p.gender};
}

inline FeatureFrame make_frame(const std::array<double, kStaticSignals>& statics,
                               const CalibratedSample& s, const Quaternion& q, double theta,
                               double theta_deriv) {
  FeatureFrame f;
  f.statics = statics;
  f.dynamic = {s.adxl345[0], s.adxl345[1], s.adxl345[2], s.mma8451q[0], s.mma8451q[1],
               s.mma8451q[2], s.itg3200[0], s.itg3200[1], s.itg3200[2], q.w,
               q.x,           q.y,           q.z,           theta};
  f.theta_deriv = theta_deriv;
  return f;
}

inline std::vector<FeatureFrame> build_feature_frames(const AnnotatedTrial& trial,
                                                      const SubjectProfile& subject,
                                                      std::span<const Quaternion> orientation,
                                                      const TiltSeries& tilt) {
  const auto n = trial.samples.size();
  if (orientation.size() != n || tilt.theta.size() != n || tilt.theta_deriv.size() != n)
    throw ValidationError(trial.id.str() + ": orientation length does not match samples");
  const auto statics = static_features(subject);
  std::vector<FeatureFrame> frames;
  frames.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    frames.push_back(
        make_frame(statics, trial.samples[i], orientation[i], tilt.theta[i], tilt.theta_deriv[i]));
  return frames;
}

/// Orientation, tilt and frames for one trial in a single call.
inline std::vector<FeatureFrame> compute_features(const AnnotatedTrial& trial,
                                                  const SubjectProfile& subject,
                                                  const FilterConfig& filter,
                                                  int derivative_order = 2) {
  const auto q = estimate_orientation(trial.samples, filter);
  const auto tilt = tilt_series(q, filter.vertical_axis, derivative_order);
  return build_feature_frames(trial, subject, q, tilt);
}

// ---------------------------------------------------------------------------
// Dense row-major matrix

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r] = (*this)(r, c);
    return out;
  }

  void append_row(std::span<const double> values) {
    if (rows == 0 && cols == 0) cols = values.size();
    if (values.size() != cols) throw ValidationError("row width mismatch");
    data.insert(data.end(), values.begin(), values.end());
    ++rows;
  }

  /// Copy of the listed columns, in the given order.
  Matrix select_columns(std::span<const std::size_t> which) const {
    Matrix out(rows, which.size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < which.size(); ++k) out(r, k) = (*this)(r, which[k]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// ---------------------------------------------------------------------------
// Standardization

inline constexpr double kMinStd = 1e-8;

struct StandardizationStats {
  std::vector<double> mean;
  std::vector<double> std;  ///< population std, clamped to >= kMinStd

  std::size_t size() const { return mean.size(); }

  void apply_row(std::span<double> row) const {
    if (row.size() != mean.size()) throw ValidationError("standardizer width mismatch");
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean[c]) / std[c];
  }

  friend bool operator==(const StandardizationStats&, const StandardizationStats&) = default;
};

inline StandardizationStats fit_standardizer(const Matrix& x) {
  if (x.rows == 0 || x.cols == 0) throw ValidationError("cannot fit a standardizer on empty data");
  StandardizationStats s;
  s.mean.assign(x.cols, 0.0);
  s.std.assign(x.cols, 0.0);
  const auto n = static_cast<double>(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) s.mean[c] += x(r, c);
  for (auto& m : s.mean) m /= n;
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double d = x(r, c) - s.mean[c];
      s.std[c] += d * d;
    }
  for (auto& v : s.std) v = std::max(std::sqrt(v / n), kMinStd);
  return s;
}

inline Matrix apply_standardizer(const StandardizationStats& s, Matrix x) {
  if (x.cols != s.size()) throw ValidationError("standardizer width mismatch");
  for (std::size_t r = 0; r < x.rows; ++r) s.apply_row(x.row(r));
  return x;
}

inline Matrix invert_standardizer(const StandardizationStats& s, Matrix x) {
  if (x.cols != s.size()) throw ValidationError("standardizer width mismatch");
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) x(r, c) = x(r, c) * s.std[c] + s.mean[c];
  return x;
}

inline nlohmann::json to_json(const StandardizationStats& s) {
  return {{"mean", s.mean}, {"std", s.std}};
}

inline StandardizationStats standardizer_from_json(const nlohmann::json& j) {
  StandardizationStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  if (s.mean.size() != s.std.size()) throw ValidationError("standardizer mean/std size mismatch");
  for (double v : s.std)
    if (!(v >= kMinStd)) throw ValidationError("standardizer std below floor");
  return s;
}

// ---------------------------------------------------------------------------
// Correlation ranking

/// Pearson correlation; 0 when either side has zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("correlation inputs differ in length");
  if (a.empty()) return 0.0;
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

struct RankedFeature {
  std::size_t index;
  double score;
};

/// Absolute Pearson correlation of every column with the target.
inline std::vector<double> correlation_scores(const Matrix& x, std::span<const double> target) {
  if (x.rows != target.size()) throw ValidationError("feature rows and target differ in length");
  std::vector<double> scores(x.cols);
  for (std::size_t c = 0; c < x.cols; ++c) {
    const auto col = x.column(c);
    scores[c] = std::abs(pearson(col, target));
  }
  return scores;
}

/// Features with |r| >= threshold, ranked by descending |r| (ties by index).
inline std::vector<RankedFeature> correlation_select(const Matrix& x, std::span<const double> target,
                                                     double threshold) {
  const auto scores = correlation_scores(x, target);
  std::vector<RankedFeature> kept;
  for (std::size_t c = 0; c < scores.size(); ++c)
    if (scores[c] > 0.0 && scores[c] >= threshold) kept.push_back({c, scores[c]});
  std::stable_sort(kept.begin(), kept.end(),
                   [](const RankedFeature& a, const RankedFeature& b) { return a.score > b.score; });
  return kept;
}

// ---------------------------------------------------------------------------
// Mutual information and mRMR

/// Equal-width binning over [min, max]; a constant column maps to bin 0.
inline std::vector<int> discretize(std::span<const double> x, int bins) {
  if (bins < 1) throw ValidationError("bin count must be positive");
  std::vector<int> out(x.size(), 0);
  if (x.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  const double scale = bins / (hi - lo);
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = std::min(bins - 1, static_cast<int>((x[i] - lo) * scale));
  return out;
}

/// Mutual information in bits between two binned series, with the
/// Miller-Madow bias correction (occupied-cell counts).
inline double mutual_information(std::span<const int> a, std::span<const int> b, int bins) {
  if (a.size() != b.size()) throw ValidationError("MI inputs differ in length");
  if (a.empty()) return 0.0;
  const auto B = static_cast<std::size_t>(bins);
  std::vector<double> joint(B * B, 0.0), pa(B, 0.0), pb(B, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[static_cast<std::size_t>(a[i]) * B + static_cast<std::size_t>(b[i])] += 1.0;
    pa[static_cast<std::size_t>(a[i])] += 1.0;
    pb[static_cast<std::size_t>(b[i])] += 1.0;
  }
  const auto n = static_cast<double>(a.size());
  double mi = 0.0;
  int occupied_joint = 0, occupied_a = 0, occupied_b = 0;
  for (std::size_t i = 0; i < B; ++i) {
    occupied_a += pa[i] > 0.0;
    occupied_b += pb[i] > 0.0;
    for (std::size_t j = 0; j < B; ++j) {
      const double c = joint[i * B + j];
      if (c <= 0.0) continue;
      ++occupied_joint;
      mi += c / n * std::log2(c * n / (pa[i] * pb[j]));
    }
  }
  const double bias = (occupied_joint - occupied_a - occupied_b + 1) / (2.0 * n * std::log(2.0));
  return mi - bias;
}

struct MrmrStep {
  std::size_t index;
  double relevance;   ///< I(f; y)
  double redundancy;  ///< mean I(f; s) over already-selected s (0 for the first pick)
  double score;
};

inline constexpr double kScoreTieTolerance = 1e-12;

/// Greedy forward selection maximizing I(f;y) - mean_{s in S} I(f;s).
/// Scores within kScoreTieTolerance are ties, resolved toward the lower index.
inline std::vector<MrmrStep> mrmr_select(const Matrix& x, std::span<const double> target,
                                         std::size_t k, int bins = 32) {
  if (k < 1) throw ValidationError("mRMR needs k >= 1");
  if (k > x.cols) throw ValidationError("mRMR k exceeds feature count");
  if (x.rows != target.size()) throw ValidationError("feature rows and target differ in length");

  std::vector<std::vector<int>> binned(x.cols);
  for (std::size_t c = 0; c < x.cols; ++c) binned[c] = discretize(x.column(c), bins);
  const auto y = discretize(target, bins);

  std::vector<double> relevance(x.cols);
  for (std::size_t c = 0; c < x.cols; ++c) relevance[c] = mutual_information(binned[c], y, bins);

  std::vector<double> redundancy_sum(x.cols, 0.0);
  std::vector<bool> chosen(x.cols, false);
  std::vector<MrmrStep> steps;
  for (std::size_t step = 0; step < k; ++step) {
    std::optional<MrmrStep> best;
    for (std::size_t c = 0; c < x.cols; ++c) {
      if (chosen[c]) continue;
      const double red = step == 0 ? 0.0 : redundancy_sum[c] / static_cast<double>(step);
      const double score = relevance[c] - red;
      if (!best || score > best->score + kScoreTieTolerance) best = MrmrStep{c, relevance[c], red, score};
    }
    chosen[best->index] = true;
    steps.push_back(*best);
    for (std::size_t c = 0; c < x.cols; ++c)
      if (!chosen[c]) redundancy_sum[c] += mutual_information(binned[c], binned[best->index], bins);
  }
  return steps;
}

struct SelectionConfig {
  double correlation_threshold = 0.3;
  std::size_t correlation_top = 4;
  std::size_t mrmr_k = 2;
  int mrmr_bins = 32;
};

struct SelectionReport {
  std::vector<std::string> features;
  std::vector<double> correlation;                  ///< |r| per feature
  std::vector<std::optional<std::size_t>> mrmr_rank; ///< 1-based
  std::vector<double> relevance;
  std::vector<std::optional<double>> redundancy;
  std::vector<bool> chosen;

  std::vector<std::string> chosen_features() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < features.size(); ++i)
      if (chosen[i]) out.push_back(features[i]);
    return out;
  }

  std::string to_csv() const {
    std::string out = "feature,correlation,mrmr_rank,relevance,redundancy,chosen\n";
    for (std::size_t i = 0; i < features.size(); ++i) {
      out += features[i] + "," + csv::format_double(correlation[i]) + ",";
      if (mrmr_rank[i]) out += std::to_string(*mrmr_rank[i]);
      out += "," + csv::format_double(relevance[i]) + ",";
      if (redundancy[i]) out += csv::format_double(*redundancy[i]);
      out += std::string(",") + (chosen[i] ? "1" : "0") + "\n";
    }
    return out;
  }
};

/// Runs both selectors on standardized data. The chosen set is the union of
/// the top correlation features above threshold and the mRMR picks.
inline SelectionReport select_features(const Matrix& x, std::span<const double> target,
                                       std::vector<std::string> names, const SelectionConfig& cfg) {
  if (names.size() != x.cols) throw ValidationError("feature names do not match matrix width");
  const auto z = apply_standardizer(fit_standardizer(x), x);
  SelectionReport r;
  r.features = std::move(names);
  r.correlation = correlation_scores(z, target);
  r.mrmr_rank.assign(x.cols, std::nullopt);
  r.redundancy.assign(x.cols, std::nullopt);
  r.chosen.assign(x.cols, false);

  const auto ranked = correlation_select(z, target, cfg.correlation_threshold);
  for (std::size_t i = 0; i < ranked.size() && i < cfg.correlation_top; ++i) r.chosen[ranked[i].index] = true;

  const auto y = discretize(target, cfg.mrmr_bins);
  r.relevance.resize(x.cols);
  for (std::size_t c = 0; c < x.cols; ++c)
    r.relevance[c] = mutual_information(discretize(z.column(c), cfg.mrmr_bins), y, cfg.mrmr_bins);
  const auto steps = mrmr_select(z, target, std::min(cfg.mrmr_k, x.cols), cfg.mrmr_bins);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    r.mrmr_rank[steps[i].index] = i + 1;
    r.redundancy[steps[i].index] = steps[i].redundancy;
    r.chosen[steps[i].index] = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Fall segments and time-of-impact targets

/// [(n-1)*5, (n-2)*5, ..., 5, 0] milliseconds.
inline std::vector<double> tti_targets(std::size_t n) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(n - 1 - i) * kSamplePeriodMs;
  return t;
}

struct StillnessConfig {
  double window_ms = 200.0;
  double threshold_g = 0.05;
  std::size_t history_samples = 40;  ///< frames kept before the segment for smoothing

  std::size_t window_samples() const {
    return std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(window_ms / kSamplePeriodMs)));
  }
};

struct FallInterval {
  std::size_t start = 0;
  std::size_t end = 0;  ///< impact sample
  bool stillness_reached = true;
};

/// Population std of |a| over the forward window starting at i.
inline double window_std(std::span<const double> mag, std::size_t i, std::size_t w) {
  double mean = 0.0;
  for (std::size_t k = i; k < i + w; ++k) mean += mag[k];
  mean /= static_cast<double>(w);
  double var = 0.0;
  for (std::size_t k = i; k < i + w; ++k) var += (mag[k] - mean) * (mag[k] - mean);
  return std::sqrt(var / static_cast<double>(w));
}

/// Start is the first FALL label. The impact is the first index at or after
/// the start where the forward-window std of the primary accelerometer
/// magnitude drops below the threshold, after having been at or above it.
inline FallInterval find_fall_interval(const AnnotatedTrial& trial, const StillnessConfig& cfg,
                                       PrimaryAccelerometer accel = PrimaryAccelerometer::Adxl345) {
  const auto span = trial.fall_span();
  if (!span) throw ValidationError(trial.id.str() + ": no FALL labels");
  std::vector<double> mag(trial.samples.size());
  for (std::size_t i = 0; i < mag.size(); ++i) {
    const auto& a = accel == PrimaryAccelerometer::Adxl345 ? trial.samples[i].adxl345
                                                            : trial.samples[i].mma8451q;
    mag[i] = std::hypot(a[0], a[1], a[2]);
  }
  const auto w = cfg.window_samples();
  bool moving = false;
  for (std::size_t i = span->start; i + w <= mag.size(); ++i) {
    const bool still = window_std(mag, i, w) < cfg.threshold_g;
    if (!still) moving = true;
    if (still && moving) return {span->start, i, true};
  }
  return {span->start, span->end, false};
}

struct FallSegment {
  TrialId id;
  std::size_t start_index = 0;
  std::size_t end_index = 0;
  bool stillness_reached = true;
  std::vector<std::string> features;  ///< column names of rows/history
  Matrix rows;                        ///< one row per segment sample
  Matrix history;                     ///< rows preceding start_index, oldest first
  std::vector<double> tti_ms;

  std::size_t size() const { return rows.rows; }
};

inline FallSegment extract_fall_segment(const AnnotatedTrial& trial,
                                        std::span<const FeatureFrame> frames,
                                        const StillnessConfig& cfg,
                                        PrimaryAccelerometer accel = PrimaryAccelerometer::Adxl345) {
  if (frames.size() != trial.samples.size())
    throw ValidationError(trial.id.str() + ": frames do not match samples");
  const auto interval = find_fall_interval(trial, cfg, accel);
  FallSegment seg;
  seg.id = trial.id;
  seg.start_index = interval.start;
  seg.end_index = interval.end;
  seg.stillness_reached = interval.stillness_reached;
  seg.features = signal_names(kAllSignals);
  seg.rows = Matrix(0, kAllSignals);
  seg.history = Matrix(0, kAllSignals);
  const auto h0 = interval.start >= cfg.history_samples ? interval.start - cfg.history_samples : 0;
  for (std::size_t i = h0; i < interval.start; ++i) seg.history.append_row(frames[i].full_view());
  for (std::size_t i = interval.start; i <= interval.end; ++i) seg.rows.append_row(frames[i].full_view());
  seg.tti_ms = tti_targets(seg.rows.rows);
  return seg;
}

inline nlohmann::json to_json(const FallSegment& s) {
  auto rows_json = [](const Matrix& m) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows; ++r)
      a.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return a;
  };
  return {{"trial_id", s.id.str()},
          {"start_index", s.start_index},
          {"end_index", s.end_index},
          {"stillness_reached", s.stillness_reached},
          {"features", s.features},
          {"history", rows_json(s.history)},
          {"rows", rows_json(s.rows)},
          {"tti_ms", s.tti_ms}};
}

inline FallSegment segment_from_json(const nlohmann::json& j) {
  FallSegment s;
  s.id = TrialId::parse(j.at("trial_id").get<std::string>());
  s.start_index = j.at("start_index").get<std::size_t>();
  s.end_index = j.at("end_index").get<std::size_t>();
  s.stillness_reached = j.at("stillness_reached").get<bool>();
  s.features = j.at("features").get<std::vector<std::string>>();
  auto read_rows = [&](const nlohmann::json& a) {
    Matrix m(0, s.features.size());
    for (const auto& r : a) m.append_row(r.get<std::vector<double>>());
    return m;
  };
  s.history = read_rows(j.at("history"));
  s.rows = read_rows(j.at("rows"));
  s.tti_ms = j.at("tti_ms").get<std::vector<double>>();
  if (s.tti_ms.size() != s.rows.rows) throw ValidationError(s.id.str() + ": targets do not match rows");
  if (s.end_index + 1 != s.start_index + s.rows.rows)
    throw ValidationError(s.id.str() + ": segment indices do not match rows");
  return s;
}

// ---------------------------------------------------------------------------
// Dataset split

struct SplitRatios {
  double train = 0.6;
  double validation = 0.2;
  double test = 0.2;
};

struct SequenceSplit {
  std::vector<TrialId> train, validation, test;
};

/// Whole-trial partition after a seeded shuffle. Validation and test sizes
/// are ratio * n rounded to nearest; train takes the remainder.
inline SequenceSplit split_sequences(std::vector<TrialId> trials, const SplitRatios& r,
                                     std::uint64_t seed) {
  if (trials.empty()) throw ValidationError("cannot split an empty trial list");
  if (r.train < 0 || r.validation < 0 || r.test < 0 ||
      std::abs(r.train + r.validation + r.test - 1.0) > 1e-9)
    throw ValidationError("split ratios must be non-negative and sum to 1");
  std::sort(trials.begin(), trials.end());
  Rng rng(seed);
  rng.shuffle(std::span<TrialId>(trials));
  const auto n = trials.size();
  const auto n_test = static_cast<std::size_t>(std::llround(r.test * static_cast<double>(n)));
  const auto n_val = std::min(n - n_test,
                              static_cast<std::size_t>(std::llround(r.validation * static_cast<double>(n))));
  SequenceSplit s;
  s.test.assign(trials.begin(), trials.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.validation.assign(trials.begin() + static_cast<std::ptrdiff_t>(n_test),
                      trials.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  s.train.assign(trials.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), trials.end());
  return s;
}

}  // namespace fallkan
