#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "fallkan/evaluation.hpp"
#include "fallkan/streaming.hpp"

namespace fk = fallkan;

namespace {

fk::SubjectProfile subject() { return {"SA01", 26.0, 165.0, 53.0, 0.0}; }

fk::FilterConfig filter() {
  fk::FilterConfig f;
  f.vertical_axis = {0.0, -1.0, 0.0};
  return f;
}

fk::AnnotatedTrial fall_trial(double duration_s = 8.0) {
  fk::SyntheticSpec spec;
  spec.duration_s = duration_s;
  spec.onset_s = 3.0;
  spec.impact_s = 3.7;
  return fk::generate_synthetic_trial(spec, 7).trial;
}

fk::StandardizationStats stats_for(const std::vector<fk::FeatureFrame>& frames) {
  fk::Matrix m;
  for (const auto& f : frames) {
    const auto row = f.fdnn_view();
    m.append_row(row);
  }
  return fk::fit_standardizer(m);
}

fk::FdnnCheckpoint detector(const fk::AnnotatedTrial& trial, double threshold = 0.5) {
  fk::FdnnConfig c;
  c.threshold = threshold;
  fk::FdnnCheckpoint ck;
  ck.params = fk::init_params(c, 3);
  ck.standardizer = stats_for(fk::causal_features(trial, subject(), filter()));
  ck.metadata = {{"features", fk::signal_names(fk::kFdnnInputs)}};
  return ck;
}

fk::KanModel regressor() {
  fk::KanConfig cfg;
  cfg.window_ms = 50;
  auto m = fk::make_kan(5, cfg, -3.0, 3.0);
  for (auto& f : m.outer)
    for (std::size_t k = 0; k < f.values.size(); ++k) f.values[k] = 0.05 * static_cast<double>(k);
  m.features = fk::default_kan_features();
  m.target_mean = 300.0;
  m.target_scale = 100.0;
  return m;
}

// Threshold at the median probability, so both decisions occur.
double median_probability(const fk::FdnnCheckpoint& ck, const fk::AnnotatedTrial& trial) {
  auto r = fk::stream_trial(ck, regressor(), trial, subject(), {filter()});
  std::vector<double> p;
  for (const auto& e : r.events) p.push_back(e.p_falling);
  std::nth_element(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(p.size() / 2), p.end());
  return p[p.size() / 2];
}

bool same_values(const fk::StreamEvent& a, const fk::StreamEvent& b) {
  return a.index == b.index && a.p_falling == b.p_falling && a.decision == b.decision && a.tti_ms == b.tti_ms;
}

}  // namespace

TEST(Streaming, OneEventPerSample) {
  const auto trial = fall_trial();
  const auto r = fk::stream_trial(detector(trial), regressor(), trial, subject(), {filter()});
  ASSERT_EQ(r.events.size(), trial.samples.size());
  for (std::size_t i = 0; i < r.events.size(); ++i) {
    EXPECT_EQ(r.events[i].index, i);
    EXPECT_TRUE(std::isfinite(r.events[i].p_falling));
    EXPECT_GE(r.events[i].latency_us, 0.0);
  }
  EXPECT_EQ(r.latency.samples, trial.samples.size());
}

TEST(Streaming, MatchesBatchInference) {
  const auto trial = fall_trial();
  const auto ck = detector(trial);
  const auto frames = fk::causal_features(trial, subject(), filter());
  const auto seq = fk::make_sequence(frames, trial.labels, ck.standardizer);
  const auto batch = fk::forward(ck.params, seq, fk::Mode::Infer);
  const auto r = fk::stream_trial(ck, regressor(), trial, subject(), {filter()});
  ASSERT_EQ(batch.p_falling.size(), r.events.size());
  for (std::size_t i = 0; i < r.events.size(); ++i) {
    EXPECT_EQ(r.events[i].p_falling, batch.p_falling[i]) << i;
    EXPECT_EQ(r.events[i].decision, batch.decision[i] == 1) << i;
  }
}

TEST(Streaming, FrameStreamerDerivativeIsBackward) {
  const auto trial = fall_trial();
  const auto frames = fk::causal_features(trial, subject(), filter(), 2);
  EXPECT_EQ(frames[0].theta_deriv, 0.0);
  EXPECT_EQ(frames[1].theta_deriv, 0.0);
  for (std::size_t i = 2; i < frames.size(); i += 97) {
    const double th0 = frames[i - 2].dynamic.back(), th1 = frames[i - 1].dynamic.back(), th2 = frames[i].dynamic.back();
    const double h = fk::kSamplePeriodS;
    EXPECT_DOUBLE_EQ(frames[i].theta_deriv, (th2 - 2 * th1 + th0) / (h * h)) << i;
  }
  const auto first = fk::causal_features(trial, subject(), filter(), 1);
  EXPECT_EQ(first[0].theta_deriv, 0.0);
  EXPECT_DOUBLE_EQ(first[5].theta_deriv, (first[5].dynamic.back() - first[4].dynamic.back()) / fk::kSamplePeriodS);
  EXPECT_THROW(fk::causal_features(trial, subject(), filter(), 3), fk::ValidationError);
}

TEST(Streaming, PrefixCausality) {
  const auto trial = fall_trial();
  const auto ck = detector(trial);
  auto prefix = trial;
  const std::size_t cut = 700;
  prefix.samples.resize(cut);
  prefix.labels.resize(cut);
  fk::StreamOptions opt{filter()};
  opt.gate_kan = false;
  const auto full = fk::stream_trial(ck, regressor(), trial, subject(), opt);
  const auto part = fk::stream_trial(ck, regressor(), prefix, subject(), opt);
  ASSERT_EQ(part.events.size(), cut);
  for (std::size_t i = 0; i < cut; ++i) EXPECT_TRUE(same_values(full.events[i], part.events[i])) << i;
}

TEST(Streaming, RealtimePacingGivesSameValues) {
  const auto trial = fall_trial();
  auto short_trial = trial;
  short_trial.samples.resize(120);
  short_trial.labels.resize(120);
  const auto ck = detector(trial);
  fk::StreamOptions fast{filter()};
  auto paced = fast;
  paced.pacing = fk::Pacing::Realtime;
  const auto t0 = std::chrono::steady_clock::now();
  const auto a = fk::stream_trial(ck, regressor(), short_trial, subject(), paced);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto b = fk::stream_trial(ck, regressor(), short_trial, subject(), fast);
  EXPECT_GE(elapsed, 119 * 0.005);
  ASSERT_EQ(a.events.size(), b.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i) EXPECT_TRUE(same_values(a.events[i], b.events[i])) << i;
  // Latency excludes the wait between samples.
  EXPECT_LT(a.latency.mean_us, 5000.0);
}

TEST(Streaming, TimeToImpactOnlyWhileFalling) {
  const auto trial = fall_trial();
  auto ck = detector(trial);
  ck.params.config.threshold = median_probability(ck, trial);
  const auto r = fk::stream_trial(ck, regressor(), trial, subject(), {filter()});
  std::size_t falling = 0;
  for (const auto& e : r.events) {
    EXPECT_EQ(e.tti_ms.has_value(), e.decision) << e.index;
    if (e.tti_ms) {
      EXPECT_GE(*e.tti_ms, 0.0);
    }
    falling += e.decision;
  }
  EXPECT_GT(falling, 0u);
  EXPECT_LT(falling, r.events.size());
}

TEST(Streaming, UngatedRegressorUsesTruncatedMeanAtStart) {
  const auto trial = fall_trial();
  const auto ck = detector(trial);
  const auto kan = regressor();
  fk::StreamOptions opt{filter()};
  opt.gate_kan = false;
  const auto r = fk::stream_trial(ck, kan, trial, subject(), opt);
  const auto frames = fk::causal_features(trial, subject(), filter());
  const auto W = kan.config.window_samples();
  ASSERT_EQ(W, 10u);
  std::vector<std::size_t> cols;
  for (const auto& f : kan.features) cols.push_back(fk::signal_index(f));
  for (std::size_t i : {std::size_t{0}, std::size_t{3}, std::size_t{9}, std::size_t{10}, std::size_t{500}}) {
    const std::size_t lo = i + 1 >= W ? i + 1 - W : 0;
    std::vector<double> mean(cols.size(), 0.0);
    for (std::size_t t = lo; t <= i; ++t)
      for (std::size_t k = 0; k < cols.size(); ++k) mean[k] += frames[t].full_view()[cols[k]];
    for (double& v : mean) v /= static_cast<double>(i + 1 - lo);
    ASSERT_TRUE(r.events[i].tti_ms.has_value());
    EXPECT_NEAR(*r.events[i].tti_ms, fk::predict_smoothed(kan, mean), 1e-9) << i;
  }
}

TEST(Streaming, LatencyReportNearestRank) {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  std::reverse(v.begin(), v.end());
  auto r = fk::latency_report(v);
  EXPECT_EQ(r.samples, 100u);
  EXPECT_DOUBLE_EQ(r.mean_us, 50.5);
  EXPECT_DOUBLE_EQ(r.p99_us, 99.0);
  EXPECT_DOUBLE_EQ(r.max_us, 100.0);
  EXPECT_EQ(r.misses, 0u);

  const std::vector<double> w{100.0, 6000.0, 5000.0, 5000.1};
  r = fk::latency_report(w);
  EXPECT_EQ(r.misses, 2u);
  EXPECT_DOUBLE_EQ(r.p99_us, 6000.0);
  EXPECT_EQ(fk::latency_report(std::vector<double>{}).samples, 0u);
}

TEST(Streaming, RejectsMismatchedModels) {
  const auto trial = fall_trial();
  auto ck = detector(trial);
  auto names = fk::signal_names(fk::kFdnnInputs);
  std::swap(names[0], names[1]);
  ck.metadata["features"] = names;
  EXPECT_THROW(fk::stream_trial(ck, regressor(), trial, subject(), {filter()}), fk::ValidationError);

  auto kan = regressor();
  kan.features[0] = "not_a_signal";
  EXPECT_THROW(fk::stream_trial(detector(trial), kan, trial, subject(), {filter()}), fk::ValidationError);

  kan = regressor();
  kan.features.pop_back();
  EXPECT_THROW(fk::stream_trial(detector(trial), kan, trial, subject(), {filter()}), fk::ValidationError);

  fk::FdnnCheckpoint narrow;
  fk::FdnnConfig c;
  c.input_dim = 17;
  narrow.params = fk::init_params(c, 1);
  narrow.standardizer.mean.assign(17, 0.0);
  narrow.standardizer.std.assign(17, 1.0);
  EXPECT_THROW(fk::stream_trial(narrow, regressor(), trial, subject(), {filter()}), fk::ValidationError);
}

TEST(Streaming, EventsCsv) {
  std::vector<fk::StreamEvent> ev(2);
  ev[0] = {0, 0.25, false, std::nullopt, 12.5};
  ev[1] = {1, 0.75, true, 310.0, 8.0};
  EXPECT_EQ(fk::events_csv(ev), "index,p_falling,decision,tti_ms,latency_us\n0,0.25,0,,12.5\n1,0.75,1,310,8\n");
}
