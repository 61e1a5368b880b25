#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "clusterfit/nnet.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace clusterfit;

namespace {

const MlpShape kSmall{8, {16}, {4}};

LabelVector random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::vector<std::uint32_t> v(n);
  for (auto& l : v) l = static_cast<std::uint32_t>(gen() % classes);
  return LabelVector(classes, std::move(v));
}

std::vector<std::vector<std::uint32_t>> as_batch_labels(const LabelVector& l) {
  return {std::vector<std::uint32_t>(l.labels().begin(), l.labels().end())};
}

}  // namespace

TEST(MlpShape, ParameterCount) {
  EXPECT_EQ(kSmall.parameter_count(), 212u);
  EXPECT_EQ(init_model<float>(kSmall, 0).flatten().size(), 212u);
  EXPECT_EQ((MlpShape{3, {}, {2}}.parameter_count()), 8u);
}

TEST(MlpShape, ZeroWidthIsConfigError) {
  try {
    init_model<float>(MlpShape{8, {0}, {4}}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Init, HeadsAndBiasesZeroHiddenScaled) {
  const auto m = init_model<double>(MlpShape{400, {300}, {5}}, 3);
  EXPECT_TRUE(m.heads[0].weight.isZero());
  EXPECT_TRUE(m.heads[0].bias.isZero());
  EXPECT_TRUE(m.trunk[0].bias.isZero());
  const double var = m.trunk[0].weight.squaredNorm() / double(m.trunk[0].weight.size());
  EXPECT_NEAR(var, 1.0 / 400.0, 0.05 / 400.0);
  EXPECT_EQ(init_model<double>(kSmall, 9).flatten(), init_model<double>(kSmall, 9).flatten());
  EXPECT_NE(init_model<double>(kSmall, 9).flatten(), init_model<double>(kSmall, 10).flatten());
}

TEST(Init, ZeroHeadGivesLogC) {
  for (std::size_t classes : {2u, 4u, 10u, 100u}) {
    const auto m = init_model<double>(MlpShape{8, {16, 8}, {classes}}, 1);
    const auto x = oracle::gaussian_matrix(20, 8, classes);
    const auto labels = random_labels(20, classes, 2);
    const auto r = loss_and_grad<double>(m, to_matrix<double>(x), as_batch_labels(labels), CrossEntropyLoss{});
    EXPECT_NEAR(r.loss, std::log(double(classes)), 1e-6);
  }
}

TEST(Forward, ProbabilitiesAndPenultimateShape) {
  std::mt19937_64 gen(4);
  const auto m = gradcheck::random_model(MlpShape{8, {16}, {4, 3}}, gen);
  const auto x = oracle::gaussian_matrix(5, 8, 4);
  const auto r = forward(m, x);
  ASSERT_EQ(r.probabilities.size(), 2u);
  for (const auto& p : r.probabilities) {
    for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-6);
  }
  EXPECT_EQ(r.penultimate.rows(), 5);
  EXPECT_EQ(r.penultimate.cols(), 16);
}

TEST(Forward, LinearModelIsAffine) {
  auto m = MlpModel<double>::zeros(MlpShape{3, {}, {3}});
  m.heads[0].weight.setIdentity();
  m.heads[0].bias << 0.5, -1.0, 2.0;
  const auto cache = forward_cache(m, to_matrix<double>(FeatureMatrix(1, 3, {1.f, 2.f, 3.f})));
  EXPECT_EQ(cache.logits[0](0, 0), 1.5);
  EXPECT_EQ(cache.logits[0](0, 1), 1.0);
  EXPECT_EQ(cache.logits[0](0, 2), 5.0);
}

TEST(Forward, ShapeMismatch) {
  const auto m = init_model<float>(kSmall, 0);
  try {
    extract_features(m, oracle::gaussian_matrix(2, 7, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
  }
}

TEST(ExtractFeatures, WidthPurityAndNoMutation) {
  std::mt19937_64 gen(5);
  const auto m = gradcheck::random_model(MlpShape{8, {16, 6}, {4}}, gen).cast<float>();
  const auto before = m.flatten();
  std::vector<float> v(4 * 8);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i % 8) * 0.25f;
  const auto f = extract_features(m, FeatureMatrix(4, 8, v), 3);
  EXPECT_EQ(f.cols(), 6u);
  for (std::size_t r = 1; r < 4; ++r) {
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(f(r, j), f(0, j));
  }
  EXPECT_EQ(m.flatten(), before);
}

class GradientCheck : public ::testing::TestWithParam<gradcheck::Variant> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  for (std::uint64_t draw = 0; draw < 10; ++draw) {
    EXPECT_LT(gradcheck::max_error(GetParam(), 1000 + draw), 1e-4) << "draw " << draw;
  }
}

INSTANTIATE_TEST_SUITE_P(Losses, GradientCheck,
                         ::testing::Values(gradcheck::Variant::cross_entropy, gradcheck::Variant::distill,
                                           gradcheck::Variant::multitask),
                         [](const auto& info) {
                           auto n = gradcheck::name(info.param);
                           n.erase(std::remove(n.begin(), n.end(), '-'), n.end());
                           return n;
                         });

TEST(Distill, AlphaZeroMatchesCrossEntropyTrajectory) {
  const auto x = oracle::gaussian_matrix(300, 8, 6);
  const LabelVector labels[] = {random_labels(300, 4, 6)};
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 32;
  cfg.seed = 2;
  TrainHistory ce, distill;
  train_from_scratch<double>(kSmall, x, labels, cfg, CrossEntropyLoss{}, &ce);
  std::mt19937_64 gen(1);
  auto teacher = std::make_shared<const MlpModel<double>>(gradcheck::random_model(kSmall, gen));
  train_from_scratch<double>(kSmall, x, labels, cfg, DistillLoss<double>{{20.0, 0.0}, teacher}, &distill);
  ASSERT_EQ(ce.step_loss.size(), distill.step_loss.size());
  for (std::size_t s = 0; s < ce.step_loss.size(); ++s) EXPECT_NEAR(ce.step_loss[s], distill.step_loss[s], 1e-12);
}

TEST(Distill, SelfDistillationSoftLossIsEntropy) {
  std::mt19937_64 gen(7);
  auto model = std::make_shared<const MlpModel<double>>(gradcheck::random_model(kSmall, gen));
  const auto x = to_matrix<double>(oracle::gaussian_matrix(16, 8, 7));
  const auto labels = as_batch_labels(random_labels(16, 4, 7));
  for (double T : {1.0, 4.0, 20.0}) {
    const Matrix<double> logits = forward_cache(*model, x).logits[0];
    const auto r = loss_and_grad<double>(*model, x, labels, DistillLoss<double>{{T, 1.0}, model}, &logits);
    const Matrix<double> q = softmax_rows(logits, T);
    double entropy = 0.0;
    for (Eigen::Index i = 0; i < q.size(); ++i) entropy -= q.data()[i] * std::log(q.data()[i]);
    entropy /= double(q.rows());
    EXPECT_NEAR(r.soft, entropy, 1e-12);
    // soft gradient vanishes at the fixed point
    for (double g : r.grad.flatten()) EXPECT_NEAR(g, 0.0, 1e-12);
  }
}

TEST(Distill, AlphaOneIgnoresHardLabels) {
  std::mt19937_64 gen(8);
  const auto student = gradcheck::random_model(kSmall, gen);
  auto teacher = std::make_shared<const MlpModel<double>>(gradcheck::random_model(kSmall, gen));
  const auto x = to_matrix<double>(oracle::gaussian_matrix(16, 8, 8));
  const Matrix<double> tl = forward_cache(*teacher, x).logits[0];
  const DistillLoss<double> spec{{20.0, 1.0}, teacher};
  const auto a = loss_and_grad<double>(student, x, as_batch_labels(random_labels(16, 4, 1)), spec, &tl);
  const auto b = loss_and_grad<double>(student, x, as_batch_labels(random_labels(16, 4, 2)), spec, &tl);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad.flatten(), b.grad.flatten());
}

TEST(MultiTask, IdenticalHeadsDoubleTheLoss) {
  std::mt19937_64 gen(9);
  auto two = gradcheck::random_model(MlpShape{8, {16}, {4, 4}}, gen);
  two.heads[1] = two.heads[0];
  auto one = MlpModel<double>::zeros(kSmall);
  one.trunk = two.trunk;
  one.heads = {two.heads[0]};
  const auto x = to_matrix<double>(oracle::gaussian_matrix(16, 8, 9));
  const auto l = as_batch_labels(random_labels(16, 4, 9));
  const std::vector<std::vector<std::uint32_t>> both{l[0], l[0]};
  const double single = loss_and_grad<double>(one, x, l, CrossEntropyLoss{}).loss;
  EXPECT_NEAR(loss_and_grad<double>(two, x, both, MultiTaskLoss{}).loss, 2.0 * single, 1e-12);
}

TEST(LrSchedule, ThirteenHalvingsEquallySpaced) {
  const LrSchedule s;
  const std::size_t total = 1400;
  std::size_t halvings = 0;
  for (std::size_t t = 1; t < total; ++t) {
    const double prev = s.at(0.1, t - 1, total);
    const double cur = s.at(0.1, t, total);
    if (cur != prev) {
      EXPECT_DOUBLE_EQ(cur, prev / 2);
      EXPECT_EQ(t % 100, 0u);
      ++halvings;
    }
  }
  EXPECT_EQ(halvings, 13u);
  EXPECT_DOUBLE_EQ(s.at(0.1, 0, total), 0.1);
  EXPECT_DOUBLE_EQ(s.at(0.1, total - 1, total), 0.1 * std::pow(2.0, -13));
}

TEST(LrSchedule, RecordedDuringTraining) {
  const auto x = oracle::gaussian_matrix(100, 8, 1);
  const LabelVector labels[] = {random_labels(100, 4, 1)};
  TrainConfig cfg;
  cfg.epochs = 7;
  cfg.batch_size = 50;
  TrainHistory h;
  train_from_scratch<float>(kSmall, x, labels, cfg, CrossEntropyLoss{}, &h);
  ASSERT_EQ(h.step_lr.size(), 14u);
  EXPECT_EQ(h.epoch_loss.size(), 7u);
  for (std::size_t t = 0; t < 14; ++t) EXPECT_DOUBLE_EQ(h.step_lr[t], 0.1 * std::pow(2.0, -double(t)));
}

TEST(Train, DeterministicUnderSeed) {
  const auto x = oracle::gaussian_matrix(500, 8, 2);
  const LabelVector labels[] = {random_labels(500, 4, 2)};
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 5;
  const auto a = train_from_scratch<float>(kSmall, x, labels, cfg, CrossEntropyLoss{}).flatten();
  const auto b = train_from_scratch<float>(kSmall, x, labels, cfg, CrossEntropyLoss{}).flatten();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
}

TEST(Train, LabelSpaceMismatchIsValidationError) {
  const auto x = oracle::gaussian_matrix(10, 8, 3);
  const LabelVector labels[] = {random_labels(10, 5, 3)};
  try {
    train_from_scratch<float>(kSmall, x, labels, TrainConfig{}, CrossEntropyLoss{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation);
  }
}

TEST(Train, DivergenceReportsStep) {
  const auto x = oracle::gaussian_matrix(64, 8, 4, 1e3);
  const LabelVector labels[] = {random_labels(64, 4, 4)};
  TrainConfig cfg;
  cfg.lr0 = 1e30;
  cfg.batch_size = 16;
  try {
    train_from_scratch<float>(kSmall, x, labels, cfg, CrossEntropyLoss{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::divergence);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Train, SeparableBlobsReachFullTrainingAccuracy) {
  const auto [x, labels] = oracle::two_blobs(200, 4, 1.5, 0.5, 3);
  std::vector<int> y;
  for (auto l : labels.labels()) y.push_back(l ? 1 : -1);
  ASSERT_TRUE(oracle::perceptron_separable(x, y));
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  const LabelVector ls[] = {labels};
  const auto m = train_from_scratch<float>(MlpShape{4, {16}, {2}}, x, ls, cfg, CrossEntropyLoss{});
  const auto pred = predict(m, x);
  EXPECT_EQ(oracle::count_mismatches(pred, labels.labels()), 0u);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 gen(11);
  auto m = gradcheck::random_model(MlpShape{8, {16, 5}, {4, 2}}, gen).cast<float>();
  m.seed = 77;
  m.epochs_trained = 12;
  const auto p = std::filesystem::temp_directory_path() / ("cf_model_" + std::to_string(::getpid()) + ".ckpt");
  save_model(p, m);
  const auto back = load_model<float>(p);
  EXPECT_EQ(back.shape, m.shape);
  EXPECT_EQ(back.flatten(), m.flatten());
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.epochs_trained, 12u);
  auto bytes = detail::read_file(p);
  bytes.pop_back();
  detail::write_file(p, bytes);
  try {
    load_model<float>(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::truncation);
  }
  std::filesystem::remove(p);
}
