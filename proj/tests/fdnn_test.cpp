#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "fallkan/fdnn.hpp"

namespace fk = fallkan;

namespace {

fk::FdnnConfig tiny_config() {
  fk::FdnnConfig c;
  c.input_dim = 3;
  c.fc1_units = 4;
  c.inner_dim = 4;
  c.batch_size = 4;
  return c;
}

fk::LabeledSequence random_sequence(std::size_t steps, std::size_t width, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n(0, 1);
  fk::LabeledSequence s;
  s.steps = steps;
  s.inputs.resize(steps * width);
  for (auto& v : s.inputs) v = n(gen);
  for (std::size_t t = 0; t < steps; ++t) s.labels.push_back(static_cast<std::uint8_t>((gen() >> 7) & 1));
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fallkan_fdnn_" + std::to_string(::getpid()) + "_" + name);
}

// Central differences on the full parameter vector. Dropout masks are
// reproduced exactly by reseeding the generator for every evaluation.
void expect_gradient_matches(const fk::FdnnParams& p, const std::vector<fk::LabeledSequence>& batch,
                             std::uint64_t dropout_seed, bool with_dropout) {
  auto loss_at = [&](const fk::FdnnParams& q) {
    fk::Rng r(dropout_seed);
    return fk::loss_and_gradients(q, batch, with_dropout ? &r : nullptr).loss;
  };
  fk::Rng r(dropout_seed);
  const auto analytic = fk::loss_and_gradients(p, batch, with_dropout ? &r : nullptr).gradient;
  const double h = 1e-6;
  double diff_sq = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    auto plus = p, minus = p;
    plus.weights[i] += h;
    minus.weights[i] -= h;
    const double numeric = (loss_at(plus) - loss_at(minus)) / (2 * h);
    const double a = analytic[i];
    EXPECT_LT(std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-4), 1e-4)
        << "parameter " << i << " analytic " << a << " numeric " << numeric;
    diff_sq += (a - numeric) * (a - numeric);
    sum_sq += (std::abs(a) + std::abs(numeric)) * (std::abs(a) + std::abs(numeric));
  }
  EXPECT_LT(std::sqrt(diff_sq / sum_sq), 1e-4);
}

}  // namespace

TEST(Gradient, MatchesFiniteDifferencesWithoutDropout) {
  auto p = fk::init_params(tiny_config(), 5);
  // Non-trivial batch-norm affine parameters.
  auto g = p.tensor(fk::Tensor::BnGamma);
  auto b = p.tensor(fk::Tensor::BnBeta);
  for (std::size_t k = 0; k < g.size(); ++k) {
    g[k] = 0.7 + 0.2 * static_cast<double>(k);
    b[k] = 0.1 * static_cast<double>(k) - 0.15;
  }
  expect_gradient_matches(p, {random_sequence(2, 3, 1), random_sequence(2, 3, 2)}, 0, false);
}

TEST(Gradient, MatchesFiniteDifferencesWithFixedDropoutMasks) {
  const auto p = fk::init_params(tiny_config(), 6);
  expect_gradient_matches(p, {random_sequence(2, 3, 3), random_sequence(2, 3, 4), random_sequence(3, 3, 5)}, 77, true);
}

TEST(Gradient, PaddingIsInvisible) {
  const auto p = fk::init_params(tiny_config(), 7);
  auto a = random_sequence(5, 3, 11);
  auto b = random_sequence(3, 3, 12);
  auto b_padded = b;
  b_padded.steps = 5;
  for (int i = 0; i < 6; ++i) b_padded.inputs.push_back(123.0 + i);
  b_padded.labels.insert(b_padded.labels.end(), {1, 0});
  b_padded.mask = {1, 1, 1, 0, 0};
  const auto plain = fk::loss_and_gradients(p, std::vector{a, b}, nullptr);
  const auto padded = fk::loss_and_gradients(p, std::vector{a, b_padded}, nullptr);
  EXPECT_EQ(plain.loss, padded.loss);
  EXPECT_EQ(plain.gradient, padded.gradient);
  EXPECT_EQ(plain.valid_steps, 8u);
  EXPECT_EQ(padded.valid_steps, 8u);
}

TEST(Gradient, DuplicatedSequenceKeepsMeanLoss) {
  const auto p = fk::init_params(tiny_config(), 8);
  const auto s = random_sequence(6, 3, 13);
  const auto one = fk::loss_and_gradients(p, std::vector{s}, nullptr);
  const auto two = fk::loss_and_gradients(p, std::vector{s, s}, nullptr);
  EXPECT_NEAR(one.loss, two.loss, 1e-12);
  for (std::size_t i = 0; i < one.gradient.size(); ++i) EXPECT_NEAR(one.gradient[i], two.gradient[i], 1e-12);
}

TEST(Gradient, InteriorMaskRejected) {
  const auto p = fk::init_params(tiny_config(), 8);
  auto s = random_sequence(4, 3, 14);
  s.mask = {1, 0, 1, 1};
  EXPECT_THROW(fk::loss_and_gradients(p, std::vector{s}, nullptr), fk::ValidationError);
}

TEST(Forward, ProbabilitiesAndThreshold) {
  const auto p = fk::init_params(fk::FdnnConfig{}, 3);
  const auto s = random_sequence(50, fk::kFdnnInputs, 1);
  const auto tr = fk::forward(p, s, fk::Mode::Infer);
  ASSERT_EQ(tr.p_falling.size(), 50u);
  for (std::size_t t = 0; t < 50; ++t) {
    EXPECT_GT(tr.p_falling[t], 0.0);
    EXPECT_LT(tr.p_falling[t], 1.0);
    EXPECT_EQ(tr.decision[t], tr.p_falling[t] > 0.5 ? 1 : 0);
  }
  const std::vector<double> edge{0.5, std::nextafter(0.5, 1.0), 0.49};
  EXPECT_EQ(fk::classify(edge, 0.5), (std::vector<std::uint8_t>{0, 1, 0}));
  std::array<double, 2> prob{};
  fk::nn::softmax2(800.0, -3.0, prob);
  EXPECT_NEAR(prob[0] + prob[1], 1.0, 1e-12);
}

TEST(Forward, ZeroOutputWeightsGiveOneHalf) {
  auto p = fk::init_params(fk::FdnnConfig{}, 3);
  for (double& w : p.tensor(fk::Tensor::Fc2W)) w = 0.0;
  for (double& w : p.tensor(fk::Tensor::Fc2B)) w = 0.0;
  for (double v : fk::forward(p, random_sequence(20, fk::kFdnnInputs, 2), fk::Mode::Infer).p_falling) EXPECT_EQ(v, 0.5);
}

TEST(Forward, InferIsDeterministicAndMatchesStepper) {
  const auto p = fk::init_params(fk::FdnnConfig{}, 4);
  const auto s = random_sequence(40, fk::kFdnnInputs, 3);
  const auto a = fk::forward(p, s, fk::Mode::Infer);
  const auto b = fk::forward(p, s, fk::Mode::Infer);
  EXPECT_EQ(a.p_falling, b.p_falling);
  fk::FdnnStepper st(p);
  for (std::size_t t = 0; t < s.steps; ++t) EXPECT_EQ(st.step(s.step(t, fk::kFdnnInputs)), a.p_falling[t]);
  st.reset();
  EXPECT_EQ(st.step(s.step(0, fk::kFdnnInputs)), a.p_falling[0]);
  EXPECT_THROW(st.step(std::vector<double>(3, 0.0)), fk::ValidationError);
}

TEST(Init, DeterministicBoundsAndForgetBias) {
  const fk::FdnnConfig c;
  const auto a = fk::init_params(c, 9), b = fk::init_params(c, 9), d = fk::init_params(c, 10);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.weights, d.weights);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.input_dim));
  for (double w : a.tensor(fk::Tensor::Fc1W)) EXPECT_LE(std::abs(w), bound);
  const auto bias = a.tensor(fk::Tensor::Lstm1B);
  for (std::size_t k = 0; k < 4 * c.inner_dim; ++k)
    EXPECT_EQ(bias[k], (k >= c.inner_dim && k < 2 * c.inner_dim) ? 1.0 : 0.0);
  for (double g : a.tensor(fk::Tensor::BnGamma)) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(fk::FdnnLayout(c).total, a.weights.size());
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto p = fk::init_params(fk::FdnnConfig{}, 12);
  fk::StandardizationStats st;
  st.mean.assign(fk::kFdnnInputs, 0.5);
  st.std.assign(fk::kFdnnInputs, 2.0);
  const auto path = temp_path("ck.bin").string();
  fk::save_checkpoint(p, st, path, {{"note", "x"}});
  const auto ck = fk::load_checkpoint(path);
  EXPECT_EQ(ck.params, p);
  EXPECT_EQ(ck.standardizer.mean, st.mean);
  EXPECT_EQ(ck.metadata.at("note"), "x");

  auto bytes = fk::csv::read_file(path);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(fk::container::decode(bad, "mem", fk::kFdnnKind), fk::ValidationError);
  EXPECT_THROW(fk::container::decode(bytes.substr(0, bytes.size() - 3), "mem", fk::kFdnnKind), fk::ValidationError);
  EXPECT_THROW(fk::container::decode(bytes, "mem", "kan"), fk::ValidationError);

  auto blob = fk::container::decode(bytes, "mem", fk::kFdnnKind);
  blob.header.erase("standardizer");
  EXPECT_THROW(fk::decode_fdnn_checkpoint(blob, "mem"), fk::ValidationError);
  EXPECT_THROW(fk::load_checkpoint(temp_path("missing.bin").string()), fk::IoError);
  std::filesystem::remove(path);
}

TEST(Train, DeterministicAndLearnsSeparableTask) {
  // The label is on whenever the first input channel is positive.
  auto c = tiny_config();
  c.epochs = 30;
  c.learning_rate = 0.01;
  c.dropout_rate = 0.0;
  std::vector<fk::LabeledSequence> train, val;
  for (std::uint64_t i = 0; i < 24; ++i) {
    auto s = random_sequence(30, 3, 100 + i);
    for (std::size_t t = 0; t < s.steps; ++t) s.labels[t] = s.inputs[t * 3] > 0 ? 1 : 0;
    (i < 16 ? train : val).push_back(s);
  }
  std::size_t calls = 0;
  const auto a = fk::train(c, train, val, [&](const fk::EpochLog&) { ++calls; });
  const auto b = fk::train(c, train, val);
  EXPECT_EQ(calls, 30u);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  double best = 0;
  std::size_t arg = 0;
  for (const auto& e : a.log)
    if (e.val_accuracy > best) best = e.val_accuracy, arg = e.epoch;
  EXPECT_EQ(a.best_epoch, arg);
  EXPECT_GT(a.best_val_accuracy, 0.9);
  EXPECT_EQ(fk::evaluate_accuracy(a.params, val).sample, a.best_val_accuracy);
  const auto csv = fk::training_log_csv(a.log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_accuracy,wall_seconds");
}
