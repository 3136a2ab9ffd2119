#include <cmath>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fallkan/features.hpp"

namespace fk = fallkan;

namespace {

// ---- independent mRMR oracle -------------------------------------------------
// Entropy route with Miller-Madow corrections: I = H(X) + H(Y) - H(X,Y).
// The greedy search recomputes every score from scratch at each step.

double entropy_mm(const std::map<std::pair<int, int>, int>& counts, std::size_t n) {
  double h = 0.0;
  for (const auto& [k, c] : counts) {
    (void)k;
    const double p = static_cast<double>(c) / static_cast<double>(n);
    h -= p * std::log(p);
  }
  return (h + (static_cast<double>(counts.size()) - 1.0) / (2.0 * static_cast<double>(n))) / std::log(2.0);
}

double oracle_mi(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<int, int>, int> ca, cb, cab;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++ca[{a[i], 0}];
    ++cb[{b[i], 0}];
    ++cab[{a[i], b[i]}];
  }
  const auto n = a.size();
  return entropy_mm(ca, n) + entropy_mm(cb, n) - entropy_mm(cab, n);
}

std::vector<int> oracle_bins(const std::vector<double>& x, int bins) {
  const double lo = *std::min_element(x.begin(), x.end());
  const double hi = *std::max_element(x.begin(), x.end());
  std::vector<int> out(x.size(), 0);
  if (hi == lo) return out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    int b = static_cast<int>(std::floor((x[i] - lo) / (hi - lo) * bins));
    out[i] = std::clamp(b, 0, bins - 1);
  }
  return out;
}

std::vector<std::size_t> oracle_mrmr(const fk::Matrix& x, const std::vector<double>& y, std::size_t k, int bins) {
  std::vector<std::vector<int>> f(x.cols);
  for (std::size_t c = 0; c < x.cols; ++c) f[c] = oracle_bins(x.column(c), bins);
  const auto yb = oracle_bins(y, bins);
  std::vector<std::size_t> chosen;
  while (chosen.size() < k) {
    double best = -1e300;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < x.cols; ++c) {
      if (std::find(chosen.begin(), chosen.end(), c) != chosen.end()) continue;
      double red = 0.0;
      for (auto s : chosen) red += oracle_mi(f[c], f[s]);
      const double score = oracle_mi(f[c], yb) - (chosen.empty() ? 0.0 : red / static_cast<double>(chosen.size()));
      if (score > best + fk::kScoreTieTolerance) {
        best = score;
        arg = c;
      }
    }
    chosen.push_back(arg);
  }
  return chosen;
}

fk::AnnotatedTrial fall_trial_with_known_impact(std::size_t onset, std::size_t impact, std::size_t n) {
  fk::AnnotatedTrial t;
  t.id = fk::TrialId::parse("F05_SA03_R02");
  t.samples.resize(n);
  t.labels.assign(n, fk::Label::Background);
  for (std::size_t i = 0; i < n; ++i) {
    const double ph = 0.2 * static_cast<double>(i);
    double mag = 1.0;
    if (i < onset) mag = 1.0 + 0.3 * std::sin(ph);
    else if (i < impact) mag = 0.6 + 0.4 * std::sin(ph);
    if (i + 1 == impact) mag = 3.0;
    t.samples[i].adxl345 = {0.0, 0.0, mag};
    t.samples[i].t = static_cast<double>(i) * fk::kSamplePeriodS;
  }
  for (std::size_t i = onset; i < impact + 20 && i < n; ++i) t.labels[i] = fk::Label::Fall;
  return t;
}

std::vector<fk::FeatureFrame> frames_for(const fk::AnnotatedTrial& t) {
  fk::SubjectProfile p{"SA03", 30, 170, 70, 1.0};
  return fk::compute_features(t, p, fk::FilterConfig{});
}

}  // namespace

TEST(Frames, WidthsAndStaticFields) {
  const auto t = fall_trial_with_known_impact(1000, 1140, 3000);
  const auto frames = frames_for(t);
  ASSERT_EQ(frames.size(), 3000u);
  EXPECT_EQ(frames.front().fdnn_view().size(), 18u);
  EXPECT_EQ(frames.front().full_view().size(), 19u);
  EXPECT_EQ(fk::kSignalNames.size(), 19u);
  EXPECT_EQ(frames.front().statics, frames.back().statics);
  EXPECT_EQ(frames.front().statics[0], 30.0);
  EXPECT_EQ(fk::signal_index("theta_deriv"), 18u);
}

TEST(Frames, LengthMismatch) {
  const auto t = fall_trial_with_known_impact(100, 140, 300);
  const auto q = fk::estimate_orientation(t.samples, fk::FilterConfig{});
  auto tilt = fk::tilt_series(q, {0, 0, 1});
  tilt.theta.pop_back();
  EXPECT_THROW(fk::build_feature_frames(t, {}, q, tilt), fk::ValidationError);
}

TEST(Standardizer, DefinitionAndDegenerateColumn) {
  fk::Matrix x(2, 2);
  x(0, 0) = 1;
  x(1, 0) = 3;
  x(0, 1) = 7;
  x(1, 1) = 7;
  const auto s = fk::fit_standardizer(x);
  EXPECT_EQ(s.mean[0], 2.0);
  EXPECT_EQ(s.std[0], 1.0);
  EXPECT_EQ(s.std[1], fk::kMinStd);
  const auto z = fk::apply_standardizer(s, x);
  EXPECT_EQ(z(0, 0), -1.0);
  EXPECT_EQ(z(1, 0), 1.0);
  EXPECT_EQ(z(0, 1), 0.0);
  EXPECT_THROW(fk::fit_standardizer(fk::Matrix{}), fk::ValidationError);
}

TEST(Standardizer, IdempotentAndInvertible) {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> n(5, 3);
  fk::Matrix x(500, 6);
  for (auto& v : x.data) v = n(gen);
  const auto s = fk::fit_standardizer(x);
  const auto z = fk::apply_standardizer(s, x);
  const auto s2 = fk::fit_standardizer(z);
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_NEAR(s2.mean[c], 0.0, 1e-9);
    EXPECT_NEAR(s2.std[c], 1.0, 1e-9);
  }
  const auto back = fk::invert_standardizer(s, z);
  for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_NEAR(back.data[i], x.data[i], 1e-9 * std::abs(x.data[i]));
}

TEST(Correlation, IdenticalAndConstantFeatures) {
  fk::Matrix x(100, 3);
  std::vector<double> y(100);
  for (std::size_t i = 0; i < 100; ++i) {
    y[i] = std::sin(0.1 * static_cast<double>(i));
    x(i, 0) = 0.5 * static_cast<double>(i % 7);
    x(i, 1) = y[i];
    x(i, 2) = 4.0;
  }
  const auto ranked = fk::correlation_select(x, y, 0.0);
  ASSERT_FALSE(ranked.empty());
  EXPECT_EQ(ranked[0].index, 1u);
  EXPECT_NEAR(ranked[0].score, 1.0, 1e-12);
  for (const auto& r : ranked) EXPECT_NE(r.index, 2u);
  EXPECT_EQ(fk::correlation_scores(x, y)[2], 0.0);
}

TEST(Correlation, RankingInvariantUnderPositiveAffineMaps) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> scale(0.1, 50), shift(-100, 100);
  for (int trial = 0; trial < 50; ++trial) {
    fk::Matrix x(200, 5);
    std::vector<double> y(200);
    for (std::size_t i = 0; i < 200; ++i) {
      y[i] = n(gen);
      for (std::size_t c = 0; c < 5; ++c) x(i, c) = n(gen) + 0.3 * static_cast<double>(c) * y[i];
    }
    auto xt = x;
    for (std::size_t c = 0; c < 5; ++c) {
      const double a = scale(gen), b = shift(gen);
      for (std::size_t i = 0; i < 200; ++i) xt(i, c) = a * x(i, c) + b;
    }
    const auto r1 = fk::correlation_select(x, y, 0.05);
    const auto r2 = fk::correlation_select(xt, y, 0.05);
    ASSERT_EQ(r1.size(), r2.size());
    for (std::size_t k = 0; k < r1.size(); ++k) EXPECT_EQ(r1[k].index, r2[k].index);
  }
}

TEST(Mrmr, TargetCopyChosenFirst) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0, 1);
  fk::Matrix x(300, 4);
  std::vector<double> y(300);
  for (std::size_t i = 0; i < 300; ++i) {
    for (std::size_t c = 0; c < 4; ++c) x(i, c) = u(gen);
    y[i] = x(i, 2);
  }
  EXPECT_EQ(fk::mrmr_select(x, y, 1).front().index, 2u);
}

TEST(Mrmr, DuplicateFeatureIsDeferred) {
  // f1 is a copy of f0; f2 carries independent information about y.
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> u(0, 1);
  fk::Matrix x(200, 4);
  std::vector<double> y(200);
  for (std::size_t i = 0; i < 200; ++i) {
    x(i, 0) = u(gen);
    x(i, 1) = x(i, 0);
    x(i, 2) = u(gen);
    x(i, 3) = u(gen);
    y[i] = x(i, 0) + x(i, 2);
  }
  const auto steps = fk::mrmr_select(x, y, 4, 8);
  std::vector<std::size_t> order;
  for (const auto& s : steps) order.push_back(s.index);
  EXPECT_EQ(order, oracle_mrmr(x, y, 4, 8));
  const auto pos = [&](std::size_t f) { return std::find(order.begin(), order.end(), f) - order.begin(); };
  EXPECT_LT(pos(0), pos(1));
  EXPECT_LT(pos(2), pos(1));
}

TEST(Mrmr, NoiseRelevanceBelowBound) {
  std::mt19937_64 gen(21);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> a(10000), b(10000);
    for (auto& v : a) v = u(gen);
    for (auto& v : b) v = u(gen);
    const double mi = fk::mutual_information(fk::discretize(a, 32), fk::discretize(b, 32), 32);
    EXPECT_LE(mi, 0.05);
  }
}

TEST(Mrmr, KTooLarge) {
  fk::Matrix x(10, 2);
  std::vector<double> y(10);
  EXPECT_THROW(fk::mrmr_select(x, y, 3), fk::ValidationError);
  EXPECT_THROW(fk::mrmr_select(x, y, 0), fk::ValidationError);
}

TEST(Mrmr, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 gen(seed);
    const std::size_t cols = 2 + seed % 5;    // 2..6
    const std::size_t rows = 20 + (seed * 37) % 281;  // 20..300
    std::uniform_real_distribution<double> u(-1, 1);
    std::uniform_int_distribution<int> coin(0, 3);
    fk::Matrix x(rows, cols);
    std::vector<double> y(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      y[i] = u(gen);
      for (std::size_t c = 0; c < cols; ++c) {
        switch (coin(gen) * 0 + static_cast<int>((c + seed) % 4)) {
          case 0: x(i, c) = u(gen); break;
          case 1: x(i, c) = y[i] + 0.5 * u(gen); break;
          case 2: x(i, c) = std::round(3 * u(gen)); break;
          default: x(i, c) = c > 0 ? x(i, c - 1) * 2.0 : y[i]; break;
        }
      }
    }
    const int bins = seed % 2 ? 32 : 8;
    const auto steps = fk::mrmr_select(x, y, cols, bins);
    std::vector<std::size_t> got;
    for (const auto& s : steps) got.push_back(s.index);
    EXPECT_EQ(got, oracle_mrmr(x, y, cols, bins)) << "seed " << seed;
  }
}

TEST(SelectionReport, CsvSchema) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0, 1);
  fk::Matrix x(400, 3);
  std::vector<double> y(400);
  for (std::size_t i = 0; i < 400; ++i) {
    y[i] = u(gen);
    x(i, 0) = y[i];
    x(i, 1) = u(gen);
    x(i, 2) = -2 * y[i] + 0.1 * u(gen);
  }
  const auto r = fk::select_features(x, y, {"a", "b", "c"}, {});
  const auto text = r.to_csv();
  EXPECT_EQ(text.substr(0, text.find('\n')), "feature,correlation,mrmr_rank,relevance,redundancy,chosen");
  EXPECT_TRUE(r.chosen[0]);
  EXPECT_TRUE(r.chosen[2]);
  EXPECT_LT(r.correlation[1], 0.3);
  EXPECT_EQ(r.chosen[1], r.mrmr_rank[1].has_value());
  EXPECT_EQ(r.mrmr_rank[0], 1u);
}

TEST(FallSegment, RecoversKnownImpact) {
  const auto t = fall_trial_with_known_impact(1000, 1140, 3000);
  const auto frames = frames_for(t);
  const auto seg = fk::extract_fall_segment(t, frames, {});
  EXPECT_EQ(seg.start_index, 1000u);
  EXPECT_EQ(seg.end_index, 1140u);
  EXPECT_TRUE(seg.stillness_reached);
  EXPECT_EQ(seg.size(), 141u);
  EXPECT_EQ(seg.tti_ms.front(), 700.0);
  EXPECT_EQ(seg.history.rows, 40u);
  EXPECT_EQ(seg.rows.row(0)[fk::signal_index("a_z_adxl345")], t.samples[1000].adxl345[2]);
}

TEST(FallSegment, AdlTrialAndNoStillness) {
  auto t = fall_trial_with_known_impact(1000, 1140, 3000);
  auto adl = t;
  std::fill(adl.labels.begin(), adl.labels.end(), fk::Label::Background);
  EXPECT_THROW(fk::find_fall_interval(adl, {}), fk::ValidationError);

  for (std::size_t i = 1140; i < 3000; ++i) t.samples[i].adxl345[2] = 1.0 + 0.5 * std::sin(0.3 * i);
  const auto iv = fk::find_fall_interval(t, {});
  EXPECT_FALSE(iv.stillness_reached);
  EXPECT_EQ(iv.end, 1159u);  // last FALL label
}

TEST(FallSegment, JsonCacheRoundTrip) {
  const auto t = fall_trial_with_known_impact(300, 380, 800);
  const auto seg = fk::extract_fall_segment(t, frames_for(t), {});
  const auto back = fk::segment_from_json(nlohmann::json::parse(fk::to_json(seg).dump()));
  EXPECT_EQ(back.id, seg.id);
  EXPECT_EQ(back.rows, seg.rows);
  EXPECT_EQ(back.history, seg.history);
  EXPECT_EQ(back.tti_ms, seg.tti_ms);
}

TEST(TtiTargets, ConstructionLaw) {
  EXPECT_EQ(fk::tti_targets(1), std::vector<double>{0.0});
  const auto t141 = fk::tti_targets(141);
  EXPECT_EQ(t141.front(), 700.0);
  EXPECT_EQ(t141[1], 695.0);
  EXPECT_EQ(t141.back(), 0.0);
  std::mt19937_64 gen(6);
  std::uniform_int_distribution<std::size_t> n(1, 4000);
  for (int i = 0; i < 200; ++i) {
    const auto N = n(gen);
    const auto t = fk::tti_targets(N);
    ASSERT_EQ(t.size(), N);
    EXPECT_EQ(t.back(), 0.0);
    EXPECT_EQ(t.front(), static_cast<double>(N - 1) * 5.0);
    for (std::size_t k = 1; k < N; ++k) ASSERT_EQ(t[k] - t[k - 1], -5.0);
  }
}

TEST(Split, PublishedSizesDeterminismAndCoverage) {
  std::vector<fk::TrialId> ids;
  for (const char* group : {"SA", "SE"})
    for (int s = 1; s <= 23; ++s)
      for (int f = 1; f <= 15; ++f)
        for (int r = 1; r <= 5; ++r) {
          if (ids.size() == 1798) break;
          ids.push_back({fk::ActivityCode::fall(f), group + std::string(s < 10 ? "0" : "") + std::to_string(s), r});
        }
  ASSERT_EQ(ids.size(), 1798u);
  const auto a = fk::split_sequences(ids, {}, 42);
  EXPECT_EQ(a.train.size(), 1078u);
  EXPECT_EQ(a.validation.size(), 360u);
  EXPECT_EQ(a.test.size(), 360u);
  const auto b = fk::split_sequences(ids, {}, 42);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  std::set<fk::TrialId> all(a.train.begin(), a.train.end());
  all.insert(a.validation.begin(), a.validation.end());
  all.insert(a.test.begin(), a.test.end());
  EXPECT_EQ(all.size(), ids.size());

  const auto c = fk::split_sequences(ids, {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(c.train.size(), ids.size());
  EXPECT_THROW(fk::split_sequences({}, {}, 1), fk::ValidationError);
  EXPECT_THROW(fk::split_sequences(ids, {0.5, 0.2, 0.2}, 1), fk::ValidationError);
}
