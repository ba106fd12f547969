#pragma once

// Uncertainty ranking with optional tie-breaking, and the budgeted
// retraining-selection simulation.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "triage/metrics.hpp"
#include "triage/model.hpp"
#include "triage/parallel.hpp"
#include "triage/scoring.hpp"

namespace triage {

struct SelectionPolicy {
  /// nullopt selects uniformly at random.
  std::optional<MetricId> primary;
  std::optional<MetricId> tie_breaker;
  std::uint64_t seed = 0;

  static SelectionPolicy random(std::uint64_t seed = 0) { return {std::nullopt, std::nullopt, seed}; }
  static SelectionPolicy by(MetricId m) { return {m, std::nullopt, 0}; }
  static SelectionPolicy by(MetricId m, MetricId tie) { return {m, tie, 0}; }

  bool is_random() const noexcept { return !primary.has_value(); }

  void validate() const {
    if (tie_breaker && !primary) throw std::invalid_argument("SelectionPolicy: a tie-breaker needs a primary metric");
    if (tie_breaker && *tie_breaker == *primary) {
      throw std::invalid_argument("SelectionPolicy: tie-breaker must differ from the primary metric");
    }
  }

  /// "random", "Var", or "Var+MaxP".
  std::string name() const {
    if (!primary) return "random";
    std::string s(to_string(*primary));
    if (tie_breaker) s += "+" + std::string(to_string(*tie_breaker));
    return s;
  }

  static SelectionPolicy parse(std::string_view text, std::uint64_t seed = 0) {
    if (text == "random") return random(seed);
    SelectionPolicy p;
    p.seed = seed;
    const auto plus = text.find('+');
    p.primary = parse_metric(text.substr(0, plus));
    if (plus != std::string_view::npos) p.tie_breaker = parse_metric(text.substr(plus + 1));
    p.validate();
    return p;
  }
};

/// Stable most-uncertain-first order. Exact ties on the primary score are resolved
/// by the tie-breaker (in its own orientation), then by original index. Invalid
/// entries go last.
inline std::vector<std::size_t> rank_inputs(const ScoreVector& primary, const ScoreVector* tie = nullptr) {
  if (tie != nullptr && tie->size() != primary.size()) throw std::invalid_argument("rank_inputs: score length mismatch");
  std::vector<std::size_t> idx(primary.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto more_uncertain = [](const ScoreVector& s, std::size_t a, std::size_t b) {
    return s.orientation() == Orientation::high_is_uncertain ? s.values[a] > s.values[b] : s.values[a] < s.values[b];
  };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const bool va = primary.is_valid(a), vb = primary.is_valid(b);
    if (va != vb) return va;
    if (va && primary.values[a] != primary.values[b]) return more_uncertain(primary, a, b);
    if (tie != nullptr) {
      const bool ta = tie->is_valid(a), tb = tie->is_valid(b);
      if (ta != tb) return ta;
      if (ta && tie->values[a] != tie->values[b]) return more_uncertain(*tie, a, b);
    }
    return false;
  });
  return idx;
}

/// Ranking under a policy; random policies ignore the scores and shuffle n inputs.
inline std::vector<std::size_t> rank_inputs(std::size_t n, const ScoreVector* primary, const ScoreVector* tie,
                                            const SelectionPolicy& policy) {
  policy.validate();
  if (policy.is_random()) {
    Rng rng(policy.seed);
    return seeded_shuffle(n, rng);
  }
  if (primary == nullptr || primary->size() != n) throw std::invalid_argument("rank_inputs: primary scores missing");
  if (primary->metric != *policy.primary) throw std::invalid_argument("rank_inputs: primary metric does not match policy");
  if (policy.tie_breaker && (tie == nullptr || tie->metric != *policy.tie_breaker)) {
    throw std::invalid_argument("rank_inputs: tie-breaker scores missing");
  }
  return rank_inputs(*primary, policy.tie_breaker ? tie : nullptr);
}

// ---------------------------------------------------------------------------
// Retraining simulation
// ---------------------------------------------------------------------------

struct RetrainConfig {
  std::size_t initial_size = 1000;
  std::size_t batch_size = 500;
  std::size_t epochs_per_iteration = 50;
  std::size_t repetitions = 5;
  SelectionPolicy policy = SelectionPolicy::random();
  std::vector<std::size_t> hidden_layers = {64, 32};
  double dropout_rate = 0.2;
  Activation hidden_activation = Activation::relu;
  /// Optimizer settings; epochs and seed are overridden per iteration.
  TrainConfig train;
  /// k and KDE settings for scoring; the seed is overridden per iteration.
  ScoringConfig scoring;
  std::uint64_t seed = 0;
  /// Continue from the previous iteration's weights instead of re-initializing.
  bool warm_start = false;

  void validate(std::size_t pool_size) const {
    if (repetitions < 1) throw std::invalid_argument("RetrainConfig: repetitions must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("RetrainConfig: batch size must be >= 1");
    if (initial_size < 1) throw std::invalid_argument("RetrainConfig: initial size must be >= 1");
    if (initial_size + batch_size > pool_size) {
      throw std::invalid_argument("RetrainConfig: initial size + batch size exceeds the pool (" +
                                  std::to_string(pool_size) + ")");
    }
    policy.validate();
  }
};

struct RetrainIteration {
  std::size_t iteration = 0;
  std::size_t train_size = 0;
  double test_accuracy = 0.0;
  std::vector<double> validation_curve;  // per epoch
  std::vector<std::size_t> selected;     // pool ids added in this iteration
};

struct RetrainRepetition {
  std::uint64_t seed = 0;
  std::vector<RetrainIteration> iterations;
};

struct RetrainTrace {
  std::string policy;
  std::vector<RetrainRepetition> repetitions;

  std::size_t iteration_count() const { return repetitions.empty() ? 0 : repetitions.front().iterations.size(); }

  /// Median test accuracy across repetitions, per iteration.
  std::vector<double> median_accuracy() const {
    std::vector<double> out;
    for (std::size_t it = 0; it < iteration_count(); ++it) {
      std::vector<double> v;
      for (const auto& r : repetitions) v.push_back(r.iterations.at(it).test_accuracy);
      out.push_back(median(v));
    }
    return out;
  }

  /// The iteration halfway through the budget: (iterations - 1) / 2.
  std::size_t mid_budget_iteration() const { return iteration_count() == 0 ? 0 : (iteration_count() - 1) / 2; }
};

namespace detail {
inline void check_disjoint(const Dataset& pool, const Dataset& test) {
  std::unordered_set<std::string> seen;
  seen.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto r = pool.features.row(i);
    seen.emplace(reinterpret_cast<const char*>(r.data()), r.size_bytes());
  }
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto r = test.features.row(i);
    if (seen.contains(std::string(reinterpret_cast<const char*>(r.data()), r.size_bytes()))) {
      throw std::invalid_argument("retrain_loop: test row " + std::to_string(i) + " also appears in the pool");
    }
  }
}

inline RetrainRepetition run_repetition(const Dataset& pool, const Dataset& test, const RetrainConfig& cfg,
                                        std::uint64_t rep_seed) {
  Architecture arch;
  arch.layer_sizes.push_back(pool.features.cols());
  arch.layer_sizes.insert(arch.layer_sizes.end(), cfg.hidden_layers.begin(), cfg.hidden_layers.end());
  arch.layer_sizes.push_back(pool.num_classes);
  arch.dropout_rate = cfg.dropout_rate;
  arch.hidden_activation = cfg.hidden_activation;

  RetrainRepetition rep;
  rep.seed = rep_seed;
  Rng init_rng(derive_seed(rep_seed, "initial-subset"));
  const auto perm = seeded_shuffle(pool.size(), init_rng);
  std::vector<std::size_t> in_train(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(cfg.initial_size));
  std::vector<std::size_t> remaining(perm.begin() + static_cast<std::ptrdiff_t>(cfg.initial_size), perm.end());
  std::sort(remaining.begin(), remaining.end());
  std::vector<std::size_t> just_added = in_train;

  std::optional<MLPModel> previous;
  for (std::size_t iter = 0;; ++iter) {
    std::sort(in_train.begin(), in_train.end());
    const Dataset train_set = pool.subset(in_train);
    TrainConfig tc = cfg.train;
    tc.epochs = cfg.epochs_per_iteration;
    tc.seed = derive_seed(rep_seed, "train", iter);
    TrainResult tr = train(train_set, arch, tc, cfg.warm_start && previous ? &*previous : nullptr);

    RetrainIteration record;
    record.iteration = iter;
    record.train_size = in_train.size();
    record.test_accuracy = accuracy(tr.model, test);
    record.validation_curve = tr.validation_accuracy;
    record.selected = just_added;
    rep.iterations.push_back(std::move(record));
    if (remaining.empty()) break;

    std::vector<std::size_t> order;
    if (cfg.policy.is_random()) {
      SelectionPolicy p = cfg.policy;
      p.seed = derive_seed(rep_seed, "random-selection", iter);
      order = rank_inputs(remaining.size(), nullptr, nullptr, p);
    } else {
      ScoringConfig sc = cfg.scoring;
      sc.seed = derive_seed(rep_seed, "mc", iter);
      const Scorer scorer(tr.model, train_set.features, sc);
      std::vector<MetricId> wanted{*cfg.policy.primary};
      if (cfg.policy.tie_breaker) wanted.push_back(*cfg.policy.tie_breaker);
      const ScoreSet set = scorer.score(pool.features.gather_rows(remaining), wanted);
      const ScoreVector& primary = set.get(*cfg.policy.primary);
      if (primary.invalid_count() > 0) {
        for (std::size_t i = 0; i < primary.size(); ++i) {
          if (!primary.is_valid(i)) {
            throw std::runtime_error("retrain_loop: scoring failed for pool item " + std::to_string(remaining[i]) +
                                     " in iteration " + std::to_string(iter) + ": " +
                                     (primary.errors.empty() ? std::string("invalid score") : primary.errors[i]));
          }
        }
      }
      const ScoreVector* tie = cfg.policy.tie_breaker ? &set.get(*cfg.policy.tie_breaker) : nullptr;
      order = rank_inputs(remaining.size(), &primary, tie, cfg.policy);
    }
    const std::size_t take = std::min(cfg.batch_size, remaining.size());
    just_added.clear();
    std::vector<char> picked(remaining.size(), 0);
    for (std::size_t q = 0; q < take; ++q) {
      just_added.push_back(remaining[order[q]]);
      picked[order[q]] = 1;
    }
    in_train.insert(in_train.end(), just_added.begin(), just_added.end());
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      if (!picked[i]) rest.push_back(remaining[i]);
    }
    remaining.swap(rest);
    if (cfg.warm_start) previous = tr.model;
  }
  return rep;
}
}  // namespace detail

/// Starts from initial_size random pool items, then repeatedly scores the remaining
/// pool with the current model, adds the batch_size most uncertain items and
/// retrains from scratch, until the pool is exhausted. Repetitions use child seeds
/// of cfg.seed and run in parallel.
inline RetrainTrace retrain_loop(const Dataset& pool, const Dataset& test, const RetrainConfig& cfg) {
  pool.validate();
  test.validate();
  cfg.validate(pool.size());
  if (pool.num_classes != test.num_classes || pool.features.cols() != test.features.cols()) {
    throw std::invalid_argument("retrain_loop: pool and test sets have different shapes");
  }
  detail::check_disjoint(pool, test);
  RetrainTrace trace;
  trace.policy = cfg.policy.name();
  trace.repetitions.resize(cfg.repetitions);
  parallel_for(cfg.repetitions, [&](std::size_t r) {
    trace.repetitions[r] = detail::run_repetition(pool, test, cfg, derive_seed(cfg.seed, "repetition", r));
  });
  return trace;
}

}  // namespace triage
