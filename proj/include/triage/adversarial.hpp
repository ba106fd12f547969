#pragma once

// Iterative FGSM against the native model, per-iterate metric traces and mixed
// real + adversarial evaluation sets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "triage/model.hpp"
#include "triage/parallel.hpp"
#include "triage/scoring.hpp"
#include "triage/stats.hpp"

namespace triage {

/// Per-feature valid range; a single entry applies to every feature.
struct ClipRange {
  std::vector<float> lo{0.0f};
  std::vector<float> hi{1.0f};

  float low(std::size_t j) const { return lo.size() == 1 ? lo[0] : lo.at(j); }
  float high(std::size_t j) const { return hi.size() == 1 ? hi[0] : hi.at(j); }
  float apply(std::size_t j, float v) const { return std::clamp(v, low(j), high(j)); }
};

struct FgsmConfig {
  double eps = 0.01;
  std::size_t max_iters = 50;
  ClipRange clip;
};

using MetricScores = std::array<double, kAllMetrics.size()>;

struct AttackIterate {
  std::vector<float> x;
  ClassIndex predicted = 0;
  /// Filled by score_traces; NaN marks an invalid score (e.g. DSA without reference).
  std::optional<MetricScores> scores;
};

struct AttackTrace {
  std::size_t original_index = 0;
  ClassIndex true_label = 0;
  ClassIndex original_prediction = 0;
  std::vector<AttackIterate> iterates;  // iterates[0] is the unmodified input
  bool success = false;
  double eps = 0.0;
  std::size_t iters_used = 0;
};

/// x_{t+1} = clip(x_t + eps * sign(grad_x loss(x_t, true_label))), stopping at the
/// first iterate whose predicted class differs from the original prediction.
inline AttackTrace fgsm_attack(const MLPModel& model, std::span<const float> x, ClassIndex true_label,
                               const FgsmConfig& cfg, std::size_t original_index = 0) {
  if (!(cfg.eps > 0.0)) throw std::invalid_argument("fgsm_attack: eps must be > 0");
  if (x.size() != model.input_dim()) throw std::invalid_argument("fgsm_attack: input width mismatch");
  AttackTrace trace;
  trace.original_index = original_index;
  trace.true_label = true_label;
  trace.eps = cfg.eps;
  auto classify = [&](const std::vector<float>& v) {
    return predict_classes(model, Matrix(1, v.size(), v)).front();
  };
  std::vector<float> cur(x.begin(), x.end());
  trace.original_prediction = classify(cur);
  trace.iterates.push_back({cur, trace.original_prediction, std::nullopt});
  const float step = static_cast<float>(cfg.eps);
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    const auto g = input_gradient(model, cur, true_label);
    for (std::size_t j = 0; j < cur.size(); ++j) {
      const float dir = g[j] > 0.0f ? 1.0f : (g[j] < 0.0f ? -1.0f : 0.0f);
      cur[j] = cfg.clip.apply(j, cur[j] + step * dir);
    }
    const ClassIndex pred = classify(cur);
    trace.iterates.push_back({cur, pred, std::nullopt});
    trace.iters_used = it;
    if (pred != trace.original_prediction) {
      trace.success = true;
      break;
    }
  }
  return trace;
}

/// Attacks the given rows of a dataset in parallel; results are in `rows` order.
inline std::vector<AttackTrace> fgsm_attack_rows(const MLPModel& model, const Dataset& data,
                                                 std::span<const std::size_t> rows, const FgsmConfig& cfg) {
  std::vector<AttackTrace> traces(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    traces[i] = fgsm_attack(model, data.features.row(rows[i]), data.labels.at(rows[i]), cfg, rows[i]);
  });
  return traces;
}

/// Scores every iterate of every trace with all six metrics in one batch.
inline void score_traces(std::vector<AttackTrace>& traces, const Scorer& scorer) {
  Matrix all;
  for (const auto& t : traces) {
    for (const auto& it : t.iterates) all.append_row(it.x);
  }
  if (all.rows() == 0) return;
  const ScoreSet set = scorer.score(all);
  std::size_t row = 0;
  for (auto& t : traces) {
    for (auto& it : t.iterates) {
      MetricScores s{};
      for (std::size_t m = 0; m < kAllMetrics.size(); ++m) {
        const auto& sv = set.get(kAllMetrics[m]);
        s[m] = sv.is_valid(row) ? sv.values[row] : std::numeric_limits<double>::quiet_NaN();
      }
      it.scores = s;
      ++row;
    }
  }
}

struct TrendRow {
  std::size_t trace = 0;
  std::size_t iteration = 0;
  ClassIndex predicted = 0;
  MetricScores scores{};
};

struct TrendTable {
  std::vector<TrendRow> rows;
  /// Kendall tau of each metric against the iteration index, per trace; nullopt
  /// when undefined (fewer than two iterates, or a constant metric).
  std::vector<std::array<std::optional<double>, kAllMetrics.size()>> per_trace_tau;
  /// Median of the defined per-trace taus.
  std::array<std::optional<double>, kAllMetrics.size()> median_tau{};
  std::array<std::size_t, kAllMetrics.size()> defined_count{};
};

/// Per-iteration metric table for a set of traces (scored with `scorer` if needed)
/// plus a monotonicity summary.
inline TrendTable trace_metric_trends(std::vector<AttackTrace> traces, const Scorer& scorer) {
  if (traces.empty()) throw std::invalid_argument("trace_metric_trends: need at least one trace");
  const bool scored = std::all_of(traces.begin(), traces.end(), [](const AttackTrace& t) {
    return std::all_of(t.iterates.begin(), t.iterates.end(), [](const AttackIterate& it) { return it.scores.has_value(); });
  });
  if (!scored) score_traces(traces, scorer);
  TrendTable table;
  std::array<std::vector<double>, kAllMetrics.size()> taus;
  for (std::size_t t = 0; t < traces.size(); ++t) {
    const auto& tr = traces[t];
    std::array<std::optional<double>, kAllMetrics.size()> per{};
    for (std::size_t i = 0; i < tr.iterates.size(); ++i) {
      table.rows.push_back({t, i, tr.iterates[i].predicted, *tr.iterates[i].scores});
    }
    if (tr.iterates.size() >= 2) {
      for (std::size_t m = 0; m < kAllMetrics.size(); ++m) {
        std::vector<double> xs, ys;
        for (std::size_t i = 0; i < tr.iterates.size(); ++i) {
          const double v = (*tr.iterates[i].scores)[m];
          if (std::isnan(v)) continue;
          xs.push_back(static_cast<double>(i));
          ys.push_back(v);
        }
        if (xs.size() >= 2) per[m] = kendall_tau_b(xs, ys);
        if (per[m]) taus[m].push_back(*per[m]);
      }
    }
    table.per_trace_tau.push_back(per);
  }
  for (std::size_t m = 0; m < kAllMetrics.size(); ++m) {
    table.defined_count[m] = taus[m].size();
    if (!taus[m].empty()) table.median_tau[m] = median(taus[m]);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Mixed sets
// ---------------------------------------------------------------------------

enum class SourceTag { real, adversarial };
enum class MixMode { final_only, final_plus_penultimate };

inline std::string_view to_string(MixMode m) {
  return m == MixMode::final_only ? "final-only" : "final-plus-penultimate";
}

inline MixMode parse_mix_mode(std::string_view s) {
  if (s == "final-only") return MixMode::final_only;
  if (s == "final-plus-penultimate") return MixMode::final_plus_penultimate;
  throw std::invalid_argument("unknown mix mode '" + std::string(s) + "'");
}

struct MixedSet {
  Matrix inputs;
  std::vector<ClassIndex> labels;
  std::vector<SourceTag> tags;
  /// Source row in the real set for adversarial rows; -1 for real rows.
  std::vector<std::int64_t> provenance;
  std::vector<std::string> warnings;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t adversarial_count() const {
    return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), SourceTag::adversarial));
  }
};

/// Real rows (when include_real) followed by adversarial rows: the final iterate of
/// each successful trace, and in final_plus_penultimate mode also the iterate just
/// before it. Unsuccessful traces are skipped with a warning.
inline MixedSet build_mixed_set(const Dataset& real, std::span<const AttackTrace> traces, MixMode mode,
                                bool include_real = true) {
  MixedSet out;
  out.inputs = Matrix(0, real.features.cols());
  if (include_real) {
    for (std::size_t i = 0; i < real.size(); ++i) {
      out.inputs.append_row(real.features.row(i));
      out.labels.push_back(real.labels[i]);
      out.tags.push_back(SourceTag::real);
      out.provenance.push_back(-1);
    }
  }
  for (const auto& t : traces) {
    if (t.original_index >= real.size() || real.labels[t.original_index] != t.true_label) {
      throw std::invalid_argument("build_mixed_set: trace for row " + std::to_string(t.original_index) +
                                  " does not derive from the real set");
    }
    if (!t.success || t.iterates.size() < 2) {
      out.warnings.push_back("skipped unsuccessful trace for row " + std::to_string(t.original_index));
      continue;
    }
    auto add = [&](const AttackIterate& it) {
      out.inputs.append_row(it.x);
      out.labels.push_back(t.true_label);
      out.tags.push_back(SourceTag::adversarial);
      out.provenance.push_back(static_cast<std::int64_t>(t.original_index));
    };
    if (mode == MixMode::final_plus_penultimate) add(t.iterates[t.iterates.size() - 2]);
    add(t.iterates.back());
  }
  return out;
}

}  // namespace triage
