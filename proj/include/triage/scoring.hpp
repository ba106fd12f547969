#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "triage/metrics.hpp"
#include "triage/model.hpp"

namespace triage {

struct ScoringConfig {
  std::size_t k = 50;
  std::uint64_t seed = 0;
  KdeConfig kde;
};

/// Scores plus the intermediate tensors they were computed from.
struct ScoreSet {
  Matrix det_probs;
  std::vector<ClassIndex> predictions;
  ProbTensor mc;
  std::vector<ScoreVector> scores;

  const ScoreVector& get(MetricId m) const {
    for (const auto& s : scores) {
      if (s.metric == m) return s;
    }
    throw std::out_of_range("ScoreSet: metric " + std::string(to_string(m)) + " was not computed");
  }
  bool has(MetricId m) const {
    for (const auto& s : scores) {
      if (s.metric == m) return true;
    }
    return false;
  }
};

/// MaxP, Var, VarW and KL from a mutant tensor and the deterministic probabilities.
inline std::vector<ScoreVector> uncertainty_scores(const ProbTensor& mc, const Matrix& det_probs) {
  return {max_p(det_probs), var_score(mc), var_weighted(mc, det_probs), kl_score(mc)};
}

/// Holds everything needed to score new inputs against one trained model: the
/// model itself, the training-set reference activations for LSA/DSA and the fitted KDE.
class Scorer {
 public:
  Scorer(const MLPModel& model, const Matrix& train_features, ScoringConfig cfg)
      : model_(&model),
        cfg_(cfg),
        train_all_(all_hidden_activations(model, train_features)),
        train_pred_(predict_classes(model, train_features)) {
    kde_.emplace(deepest_slice(train_all_), cfg_.kde);
  }

  const ScoringConfig& config() const noexcept { return cfg_; }
  const MLPModel& model() const noexcept { return *model_; }

  /// All six metrics.
  ScoreSet score(const Matrix& x) const { return score(x, kAllMetrics); }

  /// Only the requested metrics; the mutant tensor is computed when any of
  /// Var, VarW or KL is requested.
  ScoreSet score(const Matrix& x, std::span<const MetricId> wanted) const {
    auto want = [&](MetricId m) { return std::find(wanted.begin(), wanted.end(), m) != wanted.end(); };
    ScoreSet out;
    out.det_probs = predict_proba(*model_, x);
    out.predictions = argmax_rows(out.det_probs);
    if (want(MetricId::Var) || want(MetricId::VarW) || want(MetricId::KL)) {
      out.mc = mc_predict_proba(*model_, x, cfg_.k, cfg_.seed);
    }
    for (MetricId m : kAllMetrics) {
      if (!want(m)) continue;
      switch (m) {
        case MetricId::MaxP: out.scores.push_back(max_p(out.det_probs)); break;
        case MetricId::Var: out.scores.push_back(var_score(out.mc)); break;
        case MetricId::VarW: out.scores.push_back(var_weighted(out.mc, out.det_probs)); break;
        case MetricId::KL: out.scores.push_back(kl_score(out.mc)); break;
        case MetricId::LSA:
        case MetricId::DSA: break;
      }
    }
    if (want(MetricId::LSA) || want(MetricId::DSA)) {
      const Matrix all = all_hidden_activations(*model_, x);
      if (want(MetricId::LSA)) out.scores.push_back(lsa(*kde_, deepest_slice(all), cfg_.kde.density_floor));
      if (want(MetricId::DSA)) out.scores.push_back(dsa(train_all_, train_pred_, all, out.predictions));
    }
    return out;
  }

 private:
  Matrix deepest_slice(const Matrix& all) const {
    const std::size_t deepest_width = model_->hidden_width(model_->hidden_layer_count() - 1);
    const std::size_t offset = model_->total_hidden_width() - deepest_width;
    Matrix out(all.rows(), deepest_width);
    for (std::size_t r = 0; r < all.rows(); ++r) {
      const auto src = all.row(r).subspan(offset);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
  }

  const MLPModel* model_;
  ScoringConfig cfg_;
  Matrix train_all_;
  std::vector<ClassIndex> train_pred_;
  std::optional<GaussianKde> kde_;
};

}  // namespace triage
