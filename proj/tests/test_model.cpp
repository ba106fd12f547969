#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "triage/datasets.hpp"
#include "triage/model.hpp"

using namespace triage;

namespace {

Architecture arch(std::vector<std::size_t> sizes, double rate = 0.2) {
  Architecture a;
  a.layer_sizes = std::move(sizes);
  a.dropout_rate = rate;
  return a;
}

Dataset separated_blobs(std::uint64_t seed, std::size_t C = 2, std::size_t dim = 2, double sigma = 0.04) {
  BlobSpec spec;
  spec.n_classes = C;
  spec.dim = dim;
  spec.points_per_class = 250;
  spec.sigma = sigma;
  spec.seed = seed;
  spec.train_size = 300 * C / 2;
  spec.test_size = 100 * C / 2;
  spec.pool_size = 100 * C / 2;
  spec.centers = {std::vector<float>(dim, 0.25f), std::vector<float>(dim, 0.75f)};
  auto s = make_blobs(spec);
  return s.train;
}

MLPModel small_trained_model(std::uint64_t seed) {
  BlobSpec spec;
  spec.n_classes = 4;
  spec.dim = 6;
  spec.points_per_class = 200;
  spec.sigma = 0.15;
  spec.train_size = 500;
  spec.test_size = 100;
  spec.pool_size = 200;
  spec.seed = seed;
  const auto s = make_blobs(spec);
  TrainConfig tc;
  tc.epochs = 15;
  tc.seed = seed;
  return train(s.train, arch({6, 16, 12, 4}), tc).model;
}

}  // namespace

TEST(Model, ZeroWeightsGiveUniformProbabilities) {
  const MLPModel m(arch({4, 5, 3}));
  const Matrix x = Matrix::from_rows({{1, 2, 3, 4}, {0, 0, 0, 0}});
  const Matrix p = predict_proba(m, x);
  for (float v : p.data()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
  const Matrix a = activations(m, x, 0);
  for (float v : a.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Model, HandSetReluActivations) {
  MLPModel m(arch({2, 2, 2}));
  auto& l0 = m.mutable_layers()[0];
  l0.weights = Matrix::from_rows({{1, -1}, {2, 0.5f}});
  l0.bias = {0.5f, -1.0f};
  const Matrix x = Matrix::from_rows({{1, 1}, {-1, 0.5f}});
  const Matrix a = activations(m, x, 0);
  // row 0: [1+2+0.5, -1+0.5-1] -> [3.5, 0]; row 1: [-1+1+0.5, 1+0.25-1] -> [0.5, 0.25]
  EXPECT_EQ(a, Matrix::from_rows({{3.5f, 0.0f}, {0.5f, 0.25f}}));
  EXPECT_THROW(activations(m, x, 1), std::out_of_range);
}

TEST(Model, DuplicateRowsGiveDuplicateOutputs) {
  const MLPModel m = MLPModel::he_initialized(arch({3, 8, 4}), 7);
  const Matrix x = Matrix::from_rows({{0.1f, 0.2f, 0.3f}, {0.5f, 0.5f, 0.5f}, {0.1f, 0.2f, 0.3f}});
  const Matrix p = predict_proba(m, x);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(p(0, c), p(2, c));
  double s = 0;
  for (float v : p.row(1)) s += v;
  EXPECT_NEAR(s, 1.0, 1e-5);
  const Matrix a = all_hidden_activations(m, x);
  for (std::size_t c = 0; c < a.cols(); ++c) EXPECT_EQ(a(0, c), a(2, c));
  EXPECT_THROW(predict_proba(m, Matrix(1, 2)), std::invalid_argument);
}

TEST(McDropout, SingleNeuronMatchesTheTwoEnumeratedMasks) {
  MLPModel m(arch({1, 1, 2}, 0.5));
  auto& layers = m.mutable_layers();
  layers[0].weights = Matrix::from_rows({{2.0f}});
  layers[0].bias = {0.5f};
  layers[1].weights = Matrix::from_rows({{1.0f, -1.0f}});
  layers[1].bias = {0.25f, 0.0f};
  const Matrix x = Matrix::from_rows({{1.0f}, {-1.0f}});
  // kept neuron: h = 2 * relu(2x + 0.5); dropped: h = 0.
  auto expected = [](float xv, bool kept) {
    const float h = kept ? 2.0f * std::max(0.0f, 2.0f * xv + 0.5f) : 0.0f;
    const double a = h + 0.25, b = -h;
    const double top = std::max(a, b);
    const double ea = std::exp(a - top), eb = std::exp(b - top);
    return std::pair<double, double>{ea / (ea + eb), eb / (ea + eb)};
  };
  const ProbTensor t = mc_predict_proba(m, x, 50, 123);
  std::size_t kept_count = 0;
  for (std::size_t j = 0; j < t.mutants(); ++j) {
    const auto on = expected(1.0f, true), off = expected(1.0f, false);
    const bool kept = std::abs(t.at(j, 0, 0) - on.first) < 1e-6;
    if (!kept) EXPECT_NEAR(t.at(j, 0, 0), off.first, 1e-6);
    kept_count += kept;
    // the mask is shared across inputs, so row 1 follows the same outcome
    const auto row1 = expected(-1.0f, kept);
    EXPECT_NEAR(t.at(j, 1, 0), row1.first, 1e-6);
    EXPECT_NEAR(t.at(j, 1, 1), row1.second, 1e-6);
  }
  EXPECT_GT(kept_count, 0u);
  EXPECT_LT(kept_count, 50u);
}

TEST(McDropout, TinyRateMatchesDeterministicPass) {
  MLPModel m = MLPModel::he_initialized(arch({5, 16, 8, 3}, 1e-9), 2);
  Rng rng(4);
  Matrix x(20, 5);
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  const Matrix det = predict_proba(m, x);
  const ProbTensor t = mc_predict_proba(m, x, 7, 9);
  for (std::size_t j = 0; j < t.mutants(); ++j) {
    const Matrix s = t.slice(j);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s.data()[i], det.data()[i], 1e-4);
  }
  t.validate();
}

TEST(McDropout, DeterministicAndThreadIndependent) {
  const MLPModel m = MLPModel::he_initialized(arch({5, 32, 16, 4}), 3);
  Rng rng(5);
  Matrix x(40, 5);
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  const std::size_t keep = max_threads();
  set_max_threads(1);
  const ProbTensor a = mc_predict_proba(m, x, 50, 77);
  set_max_threads(8);
  const ProbTensor b = mc_predict_proba(m, x, 50, 77);
  set_max_threads(keep);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == mc_predict_proba(m, x, 50, 78));
  // batching must not matter either: score the first row on its own
  const ProbTensor one = mc_predict_proba(m, x.gather_rows(std::vector<std::size_t>{0}), 50, 77);
  for (std::size_t j = 0; j < 50; ++j) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(one.at(j, 0, c), a.at(j, 0, c));
  }
}

TEST(McDropout, MaterializedMutantsReproduceTheSlices) {
  const MLPModel m = MLPModel::he_initialized(arch({4, 12, 10, 3}), 8);
  Rng rng(6);
  Matrix x(10, 4);
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  const ProbTensor t = mc_predict_proba(m, x, 6, 31);
  const auto mutants = materialize_mutants(m, 6, 31);
  for (std::size_t j = 0; j < 6; ++j) {
    const Matrix p = predict_proba(mutants[j], x);
    const Matrix s = t.slice(j);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p.data()[i], s.data()[i], 1e-5);
  }
}

TEST(McDropout, Preconditions) {
  const MLPModel m = MLPModel::he_initialized(arch({2, 4, 2}), 1);
  const Matrix x(3, 2);
  EXPECT_THROW(mc_predict_proba(m, x, 1, 0), std::invalid_argument);
  const MLPModel no_dropout = MLPModel::he_initialized(arch({2, 4, 2}, 0.0), 1);
  EXPECT_THROW(mc_predict_proba(no_dropout, x, 5, 0), std::invalid_argument);
  EXPECT_THROW(mc_predict_proba(m, Matrix(3, 3), 5, 0), std::invalid_argument);
}

TEST(Gradient, MatchesFiniteDifferences) {
  const MLPModel m = small_trained_model(21);
  Rng rng(8);
  for (int p = 0; p < 20; ++p) {
    std::vector<float> x(6);
    for (float& v : x) v = static_cast<float>(rng.uniform());
    const auto label = static_cast<ClassIndex>(rng.below(4));
    const auto g = input_gradient(m, x, label);
    const auto num = oracle::numeric_gradient(m, x, label);
    EXPECT_LE(oracle::max_relative_error(g, num), 1e-2) << "point " << p;
  }
}

TEST(Gradient, ConfidentPredictionKeepsPrecision) {
  // logit gap of 18: p_y rounds to 1 in float, the gradient is still ~e^-18 and must not vanish
  MLPModel m(arch({1, 1, 2}));
  auto& layers = m.mutable_layers();
  layers[0].weights(0, 0) = 1.0f;
  layers[0].bias[0] = 1.0f;
  layers[1].weights(0, 0) = 6.0f;
  layers[1].weights(0, 1) = -6.0f;
  const std::vector<float> x = {0.5f};
  const auto g = input_gradient(m, x, 0);
  const auto num = oracle::numeric_gradient(m, x, 0);
  EXPECT_LT(g[0], 0.0f);
  EXPECT_LE(oracle::max_relative_error(g, num, 0.0), 1e-2);
}

TEST(Gradient, ZeroOutputLayerGivesZeroVector) {
  MLPModel m = MLPModel::he_initialized(arch({3, 6, 3}), 4);
  auto& out = m.mutable_layers().back();
  for (float& w : out.weights.data()) w = 0.0f;
  const std::vector<float> x = {0.2f, 0.4f, 0.6f};
  for (float g : input_gradient(m, x, 1)) EXPECT_EQ(g, 0.0f);
}

TEST(Gradient, DeterministicAndChecked) {
  MLPModel m = MLPModel::he_initialized(arch({3, 6, 3}), 4);
  for (float& w : m.mutable_layers().back().weights.data()) w *= 2.0f;
  const std::vector<float> x = {0.2f, 0.4f, 0.6f};
  EXPECT_EQ(input_gradient(m, x, 2), input_gradient(m, x, 2));
  EXPECT_THROW(input_gradient(m, x, 3), std::out_of_range);
  EXPECT_THROW(input_gradient(m, std::vector<float>{1.0f}, 0), std::invalid_argument);
}

TEST(Training, SeparatedBlobsAreLearned) {
  BlobSpec spec;
  spec.n_classes = 2;
  spec.dim = 2;
  spec.points_per_class = 250;
  spec.sigma = 0.04;
  spec.seed = 5;
  spec.train_size = 300;
  spec.test_size = 100;
  spec.pool_size = 100;
  spec.centers = {{0.25f, 0.25f}, {0.75f, 0.75f}};  // ~8.8 sigma apart
  const auto s = make_blobs(spec);
  TrainConfig tc;
  tc.epochs = 20;
  tc.seed = 1;
  const auto res = train(s.train, arch({2, 16, 2}), tc);
  EXPECT_GE(accuracy(res.model, s.test), 0.95);
  EXPECT_EQ(res.validation_accuracy.size(), 20u);
  EXPECT_EQ(res.training_loss.size(), 20u);
  EXPECT_GE(res.best_epoch, 1u);
}

TEST(Training, SameSeedSameWeights) {
  const Dataset d = separated_blobs(3);
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 10;
  const auto a = train(d, arch({2, 8, 4, 2}), tc);
  const auto b = train(d, arch({2, 8, 4, 2}), tc);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.validation_accuracy, b.validation_accuracy);
  tc.seed = 11;
  EXPECT_FALSE(train(d, arch({2, 8, 4, 2}), tc).model == a.model);
}

TEST(Training, Preconditions) {
  const Dataset d = separated_blobs(3);
  TrainConfig tc;
  tc.epochs = 0;
  EXPECT_THROW(train(d, arch({2, 8, 2}), tc), std::invalid_argument);
  tc.epochs = 1;
  EXPECT_THROW(train(d, arch({3, 8, 2}), tc), std::invalid_argument);
  EXPECT_THROW(train(d, arch({2, 8, 3}), tc), std::invalid_argument);
  EXPECT_THROW(arch({2, 2}).validate(), std::invalid_argument);
  EXPECT_THROW(arch({2, 4, 2}, 1.0).validate(), std::invalid_argument);
  Dataset bad = d;
  bad.labels[0] = 5;
  EXPECT_THROW(train(bad, arch({2, 8, 2}), tc), std::invalid_argument);
}

TEST(Training, DivergenceIsReported) {
  const Dataset d = separated_blobs(3);
  TrainConfig tc;
  tc.epochs = 5;
  tc.learning_rate = 1e38;
  EXPECT_THROW(train(d, arch({2, 8, 2}), tc), TrainingDiverged);
  try {
    train(d, arch({2, 8, 2}), tc);
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.epoch(), 1u);
    EXPECT_LE(e.epoch(), 5u);
  }
}
