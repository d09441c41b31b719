#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "emoattack/nn.hpp"

using namespace emoattack;

namespace {

std::vector<std::vector<double>> random_inputs(const CnnShape& s, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<std::vector<double>> out(n, std::vector<double>(s.input_size()));
  for (auto& x : out) {
    for (auto& v : x) v = g(rng);
  }
  return out;
}

double batch_loss(const CnnParams<double>& p, const std::vector<std::vector<double>>& x,
                  const std::vector<std::size_t>& y) {
  return loss_and_grad<double>(p, x, y).loss;
}

// Central differences on every entry (or an evenly spaced subset) of every
// tensor; returns the worst relative error.
double worst_gradient_error(const CnnShape& shape, std::size_t max_per_tensor, std::uint64_t seed) {
  auto p = init_cnn<double>(shape, seed);
  const auto x = random_inputs(shape, 2, seed + 1);
  const std::vector<std::size_t> y = {0, shape.classes - 1};
  const auto analytic = loss_and_grad<double>(p, x, y).grad;
  const double h = 1e-6;
  double worst = 0.0;
  auto params = p.tensors();
  const auto grads = analytic.tensors();
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& w = *params[t];
    const std::size_t step = std::max<std::size_t>(1, w.size() / max_per_tensor);
    for (std::size_t i = 0; i < w.size(); i += step) {
      const double keep = w[i];
      w[i] = keep + h;
      const double up = batch_loss(p, x, y);
      w[i] = keep - h;
      const double down = batch_loss(p, x, y);
      w[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double a = (*grads[t])[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double err = std::abs(a - numeric) / denom;
      EXPECT_LE(err, 1e-4) << CnnParams<double>::kNames[t] << "[" << i << "] analytic " << a << " numeric "
                           << numeric;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

CnnShape small_shape() {
  CnnShape s;
  s.frames = 12;
  s.mels = 8;
  s.channels = 3;
  s.hidden = 6;
  s.classes = 4;
  return s;
}

// Class k has a bright stripe at mel band 2k, plus noise.
std::vector<std::vector<float>> stripe_data(const CnnShape& s, std::size_t n, std::uint64_t seed,
                                            std::vector<std::size_t>& labels) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 0.3f);
  std::vector<std::vector<float>> out;
  labels.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % s.classes;
    std::vector<float> x(s.input_size());
    for (std::size_t f = 0; f < s.frames; ++f) {
      for (std::size_t m = 0; m < s.mels; ++m) x[f * s.mels + m] = g(rng) + (m == 2 * k ? 2.0f : 0.0f);
    }
    out.push_back(std::move(x));
    labels.push_back(k);
  }
  return out;
}

std::pair<Classifier, TrainHistory> train_small(std::size_t epochs, std::uint64_t seed = 1) {
  const auto s = small_shape();
  static std::vector<std::size_t> ytr, yte;
  static const auto xtr = stripe_data(s, 64, 1, ytr);
  static const auto xte = stripe_data(s, 32, 2, yte);
  std::vector<LabeledFeatures> tr, te;
  for (std::size_t i = 0; i < xtr.size(); ++i) tr.push_back({&xtr[i], ytr[i]});
  for (std::size_t i = 0; i < xte.size(); ++i) te.push_back({&xte[i], yte[i]});
  TrainConfig cfg;
  cfg.shape = s;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.adam.lr = 1e-2;
  cfg.init_seed = seed;
  cfg.shuffle_seed = seed;
  return train_classifier(cfg, tr, te);
}

}  // namespace

TEST(Gradient, MatchesFiniteDifferencesOnSmallNetwork) {
  EXPECT_LE(worst_gradient_error(small_shape(), 1000, 3), 1e-4);
}

TEST(Gradient, MatchesFiniteDifferencesOnDeployedShape) {
  // 98 x 40 input, 8 channels, 64 hidden, 10 classes; a subset of each tensor.
  EXPECT_LE(worst_gradient_error(CnnShape{}, 12, 5), 1e-4);
}

TEST(Loss, UniformLogitsGiveLogK) {
  const CnnShape s;
  CnnParams<double> p(s);
  const auto x = random_inputs(s, 3, 1);
  EXPECT_NEAR(batch_loss(p, x, {0, 4, 9}), std::log(10.0), 1e-12);
}

TEST(Loss, LargeMarginGivesNearZeroLoss) {
  const CnnShape s;
  CnnParams<double> p(s);
  p.fc2_b[3] = 20.0;
  const auto x = random_inputs(s, 1, 2);
  EXPECT_LT(batch_loss(p, x, {3}), 1e-6);
  EXPECT_NEAR(batch_loss(p, x, {4}), 20.0 + std::log(1.0 + 9.0 * std::exp(-20.0)), 1e-9);
}

TEST(Loss, RejectsBadBatches) {
  const auto s = small_shape();
  CnnParams<double> p(s);
  const auto x = random_inputs(s, 1, 2);
  EXPECT_THROW(loss_and_grad<double>(p, x, std::vector<std::size_t>{4}), DomainError);
  EXPECT_THROW(loss_and_grad<double>(p, {}, {}), DomainError);
}

TEST(Prediction, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax_lowest(std::vector<float>{1.0f, 3.0f, 3.0f}), 1u);
  EXPECT_EQ(argmax_lowest(std::vector<float>{0.0f, 0.0f, 0.0f}), 0u);
  EXPECT_EQ(argmax_lowest(std::vector<float>{-1.0f, -2.0f, -0.5f}), 2u);
}

TEST(Shape, Validation) {
  CnnShape s;
  s.classes = 1;
  EXPECT_THROW(s.validate(), DomainError);
  s = CnnShape{};
  s.frames = 2;
  EXPECT_THROW(s.validate(), DomainError);
  EXPECT_EQ(CnnShape{}.flat(), 8u * 24u * 10u);
}

TEST(Training, ConfigErrors) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.adam.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Training, LearnsSeparableDataDeterministically) {
  const auto [a, ha] = train_small(30);
  const auto [b, hb] = train_small(30);
  EXPECT_EQ(serialize(a), serialize(b));
  EXPECT_EQ(history_csv(ha), history_csv(hb));
  ASSERT_EQ(ha.size(), 30u);
  EXPECT_LT(ha.back().loss, ha.front().loss);
  EXPECT_GE(ha.back().test_acc, 0.9);
  EXPECT_NE(serialize(a), serialize(train_small(30, 2).first));
}

TEST(Checkpoint, RoundTripPreservesLogits) {
  const auto m = train_small(3).first;
  const auto path = std::filesystem::temp_directory_path() / "emoattack_victim.model";
  save_classifier(m, path);
  const auto back = load_classifier(path);
  EXPECT_EQ(serialize(back), serialize(m));
  std::vector<std::size_t> labels;
  for (const auto& x : stripe_data(small_shape(), 8, 9, labels)) EXPECT_EQ(back.logits(x), m.logits(x));
  std::filesystem::remove(path);
  EXPECT_THROW(load_classifier(path), IoError);
}

TEST(Checkpoint, MalformedTextIsRejected) {
  const auto text = serialize(train_small(1).first);
  EXPECT_THROW(deserialize_classifier("model-v2\n"), FormatError);
  EXPECT_THROW(deserialize_classifier(text.substr(0, text.size() * 2 / 3)), FormatError);
  auto renamed = text;
  renamed.replace(renamed.find("fc2.bias"), 8, "fc9.bias");
  EXPECT_THROW(deserialize_classifier(renamed), FormatError);
}

TEST(Checkpoint, HistoryCsvFormat) {
  TrainHistory h = {{1, 0.5, 0.25, 0.125}};
  EXPECT_EQ(history_csv(h), "epoch,loss,train_acc,test_acc\n1,0.5,0.25,0.125\n");
}
