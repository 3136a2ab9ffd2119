#pragma once

// Sample-by-sample replay of a trial through orientation tracking, feature
// construction, the recurrent detector and the impact-time regressor, with
// per-sample latency accounting against the 5 ms budget of a 200 Hz stream.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fallkan/csv.hpp"
#include "fallkan/error.hpp"
#include "fallkan/fdnn.hpp"
#include "fallkan/features.hpp"
#include "fallkan/kan.hpp"
#include "fallkan/orientation.hpp"
#include "fallkan/sisfall.hpp"

namespace fallkan {

inline constexpr double kDeadlineUs = 5000.0;

/// Causal feature frames: the orientation is seeded from the first sample
/// and the tilt derivative uses backward differences (zero until enough
/// samples exist).
class FrameStreamer {
 public:
  FrameStreamer(const SubjectProfile& subject, const FilterConfig& filter, int derivative_order = 2)
      : statics_(static_features(subject)), tracker_(filter), axis_(filter.vertical_axis), order_(derivative_order) {
    if (order_ != 1 && order_ != 2) throw ValidationError("tilt derivative order must be 1 or 2");
  }

  FeatureFrame step(const CalibratedSample& s) {
    const auto q = tracker_.step(s);
    const double theta = tilt_angle(q, axis_);
    recent_.push_back(theta);
    if (recent_.size() > static_cast<std::size_t>(order_) + 1) recent_.pop_front();
    double deriv = 0.0;
    if (recent_.size() == static_cast<std::size_t>(order_) + 1) {
      const std::vector<double> r(recent_.begin(), recent_.end());
      deriv = causal_derivative(r, kSamplePeriodS, order_);
    }
    return make_frame(statics_, s, q, theta, deriv);
  }

 private:
  std::array<double, kStaticSignals> statics_;
  OrientationTracker tracker_;
  Vec3 axis_;
  int order_;
  std::deque<double> recent_;
};

/// Batch form of FrameStreamer, for training on exactly what a stream sees.
inline std::vector<FeatureFrame> causal_features(const AnnotatedTrial& trial, const SubjectProfile& subject,
                                                 const FilterConfig& filter, int derivative_order = 2) {
  FrameStreamer fs(subject, filter, derivative_order);
  std::vector<FeatureFrame> out;
  out.reserve(trial.samples.size());
  for (const auto& s : trial.samples) out.push_back(fs.step(s));
  return out;
}

struct StreamEvent {
  std::size_t index = 0;
  double p_falling = 0.0;
  bool decision = false;
  std::optional<double> tti_ms;  ///< present while the detector reports a fall
  double latency_us = 0.0;
};

struct LatencyReport {
  std::size_t samples = 0;
  double mean_us = 0.0;
  double p99_us = 0.0;
  double max_us = 0.0;
  std::size_t misses = 0;  ///< samples over the 5000 us budget
};

/// Nearest-rank percentiles over the recorded latencies.
inline LatencyReport latency_report(std::span<const double> latencies_us) {
  LatencyReport r;
  r.samples = latencies_us.size();
  if (latencies_us.empty()) return r;
  std::vector<double> v(latencies_us.begin(), latencies_us.end());
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) {
    sum += x;
    if (x > kDeadlineUs) ++r.misses;
  }
  r.mean_us = sum / static_cast<double>(v.size());
  const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(v.size())));
  r.p99_us = v[std::max<std::size_t>(rank, 1) - 1];
  r.max_us = v.back();
  return r;
}

enum class Pacing { Fast, Realtime };

struct StreamOptions {
  FilterConfig filter;
  int derivative_order = 2;
  Pacing pacing = Pacing::Fast;
  bool gate_kan = true;  ///< evaluate the regressor only while a fall is reported
};

struct StreamResult {
  std::vector<StreamEvent> events;
  LatencyReport latency;
};

/// Checks that the detector expects the 18 standard inputs and that the
/// regressor's features exist in a feature frame.
inline void check_compatibility(const FdnnCheckpoint& fdnn, const KanModel& kan) {
  if (fdnn.params.config.input_dim != kFdnnInputs || fdnn.standardizer.size() != kFdnnInputs)
    throw ValidationError("detector checkpoint does not take the " + std::to_string(kFdnnInputs) + " standard inputs");
  if (fdnn.metadata.contains("features")) {
    const auto names = fdnn.metadata.at("features").get<std::vector<std::string>>();
    if (names != signal_names(kFdnnInputs)) throw ValidationError("detector checkpoint was trained on a different feature list");
  }
  if (kan.features.size() != kan.d) throw ValidationError("regressor checkpoint does not list its features");
  for (const auto& f : kan.features) signal_index(f);
}

/// Stateful single-stream engine.
class StreamEngine {
 public:
  StreamEngine(const FdnnCheckpoint& fdnn, const KanModel& kan, const SubjectProfile& subject, const StreamOptions& opt)
      : frames_(subject, opt.filter, opt.derivative_order), stepper_(fdnn.params), stats_(fdnn.standardizer), kan_(kan),
        threshold_(fdnn.params.config.threshold), gate_(opt.gate_kan), window_(kan.config.window_samples()) {
    check_compatibility(fdnn, kan);
    for (const auto& f : kan.features) columns_.push_back(signal_index(f));
  }

  StreamEvent step(std::size_t index, const CalibratedSample& s) {
    const auto t0 = std::chrono::steady_clock::now();
    StreamEvent e;
    e.index = index;
    const auto frame = frames_.step(s);
    auto x = frame.fdnn_view();
    stats_.apply_row(x);
    e.p_falling = stepper_.step(x);
    e.decision = e.p_falling > threshold_;

    const auto full = frame.full_view();
    std::vector<double> row(columns_.size());
    for (std::size_t k = 0; k < columns_.size(); ++k) row[k] = full[columns_[k]];
    recent_.push_back(row);
    if (recent_.size() > window_) recent_.pop_front();
    if (e.decision || !gate_) {
      std::vector<double> mean(columns_.size(), 0.0);
      for (const auto& r : recent_)
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += r[k];
      for (double& v : mean) v /= static_cast<double>(recent_.size());
      e.tti_ms = predict_smoothed(kan_, mean);
    }
    e.latency_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    return e;
  }

 private:
  FrameStreamer frames_;
  FdnnStepper stepper_;
  StandardizationStats stats_;
  KanModel kan_;
  double threshold_;
  bool gate_;
  std::size_t window_;
  std::vector<std::size_t> columns_;
  std::deque<std::vector<double>> recent_;
};

/// Replays `trial`. Realtime pacing releases sample i at start + i * 5 ms;
/// latency covers processing only, never the wait.
inline StreamResult stream_trial(const FdnnCheckpoint& fdnn, const KanModel& kan, const AnnotatedTrial& trial,
                                 const SubjectProfile& subject, const StreamOptions& opt = {}) {
  StreamEngine engine(fdnn, kan, subject, opt);
  StreamResult r;
  r.events.reserve(trial.samples.size());
  std::vector<double> lat;
  lat.reserve(trial.samples.size());
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < trial.samples.size(); ++i) {
    if (opt.pacing == Pacing::Realtime)
      std::this_thread::sleep_until(start + std::chrono::microseconds(static_cast<long long>(i) * 5000));
    r.events.push_back(engine.step(i, trial.samples[i]));
    lat.push_back(r.events.back().latency_us);
  }
  r.latency = latency_report(lat);
  return r;
}

inline std::string events_csv(std::span<const StreamEvent> events) {
  std::string out = "index,p_falling,decision,tti_ms,latency_us\n";
  for (const auto& e : events)
    out += std::to_string(e.index) + "," + csv::format_double(e.p_falling) + "," + (e.decision ? "1" : "0") + "," +
           (e.tti_ms ? csv::format_double(*e.tti_ms) : std::string()) + "," + csv::format_double(e.latency_us) + "\n";
  return out;
}

inline nlohmann::json to_json(const LatencyReport& r) {
  return {{"samples", r.samples}, {"mean_us", r.mean_us}, {"p99_us", r.p99_us}, {"max_us", r.max_us},
          {"deadline_us", kDeadlineUs}, {"misses", r.misses}};
}

}  // namespace fallkan
