#include <gtest/gtest.h>

#include <cmath>

#include "triage/pipeline.hpp"

using namespace triage;

namespace {

struct Desk {
  BlobSplits data;
  MLPModel model;
};

const Desk& desk() {
  static const Desk d = [] {
    BlobSplits s = make_blobs(desk_blob_spec(1));
    TrainConfig tc;
    tc.seed = derive_seed(1, "train");
    MLPModel m = train(s.train, desk_architecture(20, 10), tc).model;
    return Desk{std::move(s), std::move(m)};
  }();
  return d;
}

const Scorer& desk_scorer() {
  static const Scorer s(desk().model, desk().data.train.features, ScoringConfig{50, 3, {}});
  return s;
}

MLPModel tiny_model() {
  Architecture arch;
  arch.layer_sizes = {3, 6, 2};
  MLPModel m = MLPModel::he_initialized(arch, 5);
  return m;
}

}  // namespace

TEST(Fgsm, ZeroIterationsLeavesTheInput) {
  const MLPModel m = tiny_model();
  const std::vector<float> x = {0.2f, 0.5f, 0.9f};
  FgsmConfig cfg;
  cfg.max_iters = 0;
  const auto t = fgsm_attack(m, x, 0, cfg);
  EXPECT_FALSE(t.success);
  ASSERT_EQ(t.iterates.size(), 1u);
  EXPECT_EQ(t.iterates[0].x, x);
  EXPECT_EQ(t.iters_used, 0u);
}

TEST(Fgsm, StepsStayInsideClipAndEpsBall) {
  const auto& d = desk();
  FgsmConfig cfg;
  cfg.eps = 0.01;
  cfg.max_iters = 30;
  const auto t = fgsm_attack(d.model, d.data.test.features.row(0), d.data.test.labels[0], cfg);
  for (std::size_t i = 1; i < t.iterates.size(); ++i) {
    for (std::size_t j = 0; j < 20; ++j) {
      const float v = t.iterates[i].x[j];
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      EXPECT_LE(std::abs(v - t.iterates[i - 1].x[j]), 0.01f + 1e-6f);
    }
  }
  EXPECT_EQ(t.iters_used + 1, t.iterates.size());
}

TEST(Fgsm, SaturatingStepFlipsInOneIteration) {
  const auto& d = desk();
  FgsmConfig cfg;
  cfg.eps = 1.0;
  cfg.max_iters = 5;
  // a test point the model classifies correctly; one full-range step lands on a corner
  const auto rows = attack_targets(d.model, d.data.test, 20, 0);
  std::size_t one_step = 0;
  for (std::size_t r : rows) {
    const auto x = d.data.test.features.row(r);
    const auto t = fgsm_attack(d.model, x, d.data.test.labels[r], cfg);
    for (std::size_t j = 0; j < 20; ++j) EXPECT_LE(std::abs(t.iterates[1].x[j] - x[j]), 1.0f);
    if (t.success && t.iters_used == 1) ++one_step;
  }
  EXPECT_GT(one_step, 0u);
}

TEST(Fgsm, InvalidArguments) {
  const MLPModel m = tiny_model();
  FgsmConfig cfg;
  cfg.eps = 0.0;
  EXPECT_THROW(fgsm_attack(m, std::vector<float>{0, 0, 0}, 0, cfg), std::invalid_argument);
  cfg.eps = 0.1;
  EXPECT_THROW(fgsm_attack(m, std::vector<float>{0, 0}, 0, cfg), std::invalid_argument);
}

TEST(Fgsm, MostDeskPointsFlipWithinFiftySteps) {
  const auto& d = desk();
  const auto rows = attack_targets(d.model, d.data.test, 100, 7);
  ASSERT_EQ(rows.size(), 100u);
  FgsmConfig cfg;
  const auto traces = fgsm_attack_rows(d.model, d.data.test, rows, cfg);
  std::size_t flipped = 0;
  for (const auto& t : traces) {
    flipped += t.success;
    if (t.success) EXPECT_NE(t.iterates.back().predicted, t.original_prediction);
    // the penultimate iterate still carries the original class
    if (t.success) EXPECT_EQ(t.iterates[t.iterates.size() - 2].predicted, t.original_prediction);
  }
  EXPECT_GE(flipped, 80u);
}

TEST(MixedSet, NoTracesGivesTheRealSet) {
  const auto& d = desk();
  const auto mixed = build_mixed_set(d.data.test, {}, MixMode::final_only);
  EXPECT_EQ(mixed.inputs, d.data.test.features);
  EXPECT_EQ(mixed.labels, d.data.test.labels);
  EXPECT_EQ(mixed.adversarial_count(), 0u);
}

TEST(MixedSet, ConstructionCounts) {
  const auto& d = desk();
  const auto rows = attack_targets(d.model, d.data.test, 100, 3);
  const auto traces = fgsm_attack_rows(d.model, d.data.test, rows, FgsmConfig{});
  std::size_t ok = 0;
  for (const auto& t : traces) ok += t.success;

  const auto both = build_mixed_set(d.data.test, traces, MixMode::final_plus_penultimate, false);
  EXPECT_EQ(both.size(), 2 * ok);
  EXPECT_EQ(both.warnings.size(), traces.size() - ok);
  const auto pred = predict_classes(d.model, both.inputs);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < both.size(); ++i) wrong += pred[i] != both.labels[i];
  EXPECT_EQ(wrong, ok);

  const auto fin = build_mixed_set(d.data.test, traces, MixMode::final_only, true);
  EXPECT_EQ(fin.size(), d.data.test.size() + ok);
  const auto fpred = predict_classes(d.model, fin.inputs);
  for (std::size_t i = d.data.test.size(); i < fin.size(); ++i) {
    EXPECT_NE(fpred[i], fin.labels[i]);
    EXPECT_EQ(fin.tags[i], SourceTag::adversarial);
    EXPECT_GE(fin.provenance[i], 0);
  }

  AttackTrace forged = traces.front();
  forged.true_label = (forged.true_label + 1) % 10;
  EXPECT_THROW(build_mixed_set(d.data.test, std::vector<AttackTrace>{forged}, MixMode::final_only),
               std::invalid_argument);
}

TEST(Trends, ConstantTraceIsUndefined) {
  const auto& d = desk();
  FgsmConfig cfg;
  cfg.max_iters = 0;
  std::vector<AttackTrace> traces = {fgsm_attack(d.model, d.data.test.features.row(0), d.data.test.labels[0], cfg)};
  const auto table = trace_metric_trends(traces, desk_scorer());
  for (std::size_t m = 0; m < kAllMetrics.size(); ++m) {
    EXPECT_FALSE(table.per_trace_tau[0][m].has_value());
    EXPECT_FALSE(table.median_tau[m].has_value());
    EXPECT_EQ(table.defined_count[m], 0u);
  }
  EXPECT_EQ(table.rows.size(), 1u);
}

TEST(Trends, UncertaintyRisesAlongFlippingTraces) {
  const auto& d = desk();
  const auto rows = attack_targets(d.model, d.data.test, 40, 11);
  const auto traces = fgsm_attack_rows(d.model, d.data.test, rows, FgsmConfig{});
  const auto table = trace_metric_trends(traces, desk_scorer());
  auto med = [&](MetricId m) { return *table.median_tau[static_cast<std::size_t>(m)]; };
  EXPECT_LT(med(MetricId::MaxP), 0.0);
  EXPECT_LT(med(MetricId::KL), 0.0);
  EXPECT_GT(med(MetricId::Var), 0.0);
  EXPECT_GT(med(MetricId::VarW), 0.0);

  const auto again = trace_metric_trends(traces, desk_scorer());
  ASSERT_EQ(again.rows.size(), table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    for (std::size_t m = 0; m < kAllMetrics.size(); ++m) {
      const double a = table.rows[i].scores[m], b = again.rows[i].scores[m];
      EXPECT_TRUE(a == b || (std::isnan(a) && std::isnan(b)));
    }
  }
}

TEST(Trends, ModeNames) {
  EXPECT_EQ(parse_mix_mode("final-only"), MixMode::final_only);
  EXPECT_EQ(to_string(parse_mix_mode("final-plus-penultimate")), "final-plus-penultimate");
  EXPECT_THROW(parse_mix_mode("both"), std::invalid_argument);
}
