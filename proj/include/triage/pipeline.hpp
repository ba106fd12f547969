#pragma once

// Protocol drivers shared by the command-line tool and the acceptance suite:
// the desk-scale substrate, correlation on real data, adversarial mixes.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "triage/adversarial.hpp"
#include "triage/datasets.hpp"
#include "triage/model.hpp"
#include "triage/scoring.hpp"
#include "triage/selection.hpp"
#include "triage/stats.hpp"

namespace triage {

// Desk substrate: 10 classes in 20 dimensions, 2000/1000/5000 split. Gaussian
// class overlap (sigma) sets the error rate; test accuracy lands near 0.93.
inline constexpr double kDeskSigma = 0.21;
inline const std::vector<std::size_t> kDeskHiddenLayers = {256, 128};

inline BlobSpec desk_blob_spec(std::uint64_t seed) {
  BlobSpec spec;
  spec.seed = seed;
  spec.sigma = kDeskSigma;
  return spec;
}

inline Architecture desk_architecture(std::size_t input_dim, std::size_t num_classes, double dropout_rate = 0.2,
                                      const std::vector<std::size_t>& hidden = kDeskHiddenLayers) {
  Architecture arch;
  arch.layer_sizes.push_back(input_dim);
  arch.layer_sizes.insert(arch.layer_sizes.end(), hidden.begin(), hidden.end());
  arch.layer_sizes.push_back(num_classes);
  arch.dropout_rate = dropout_rate;
  return arch;
}

/// Same weights, different dropout rate for the mutants.
inline MLPModel with_dropout_rate(const MLPModel& model, double rate) {
  Architecture arch = model.architecture();
  arch.dropout_rate = rate;
  MLPModel out(arch);
  out.mutable_layers() = std::vector<DenseLayer>(model.layers().begin(), model.layers().end());
  out.label_names = model.label_names;
  out.init_seed = model.init_seed;
  out.train_seed = model.train_seed;
  return out;
}

struct Evaluation {
  ScoreSet set;
  CorrectnessVector correct;
  CorrelationReport report;
};

inline Evaluation evaluate(const Scorer& scorer, const Matrix& inputs, std::span<const ClassIndex> labels,
                           std::size_t dcor_cap = kDefaultDistanceCorrelationCap) {
  Evaluation ev;
  ev.set = scorer.score(inputs);
  ev.correct = correctness(ev.set.predictions, labels);
  ev.report = correlate(ev.set.scores, ev.correct, dcor_cap);
  return ev;
}

/// Up to n correctly classified rows, chosen by a seeded shuffle and returned in
/// ascending order.
inline std::vector<std::size_t> attack_targets(const MLPModel& model, const Dataset& data, std::size_t n,
                                               std::uint64_t seed) {
  const auto pred = predict_classes(model, data.features);
  Rng rng(derive_seed(seed, "attack-targets"));
  const auto order = seeded_shuffle(data.size(), rng);
  std::vector<std::size_t> out;
  for (std::size_t i : order) {
    if (out.size() == n) break;
    if (pred[i] == data.labels[i]) out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct MixEvaluation {
  MixedSet mixed;
  Evaluation eval;
  std::size_t traces = 0;
  std::size_t successful = 0;
};

/// Attacks n_traces correctly classified rows of `data`, builds the mixed set and
/// correlates every metric with correctness on it.
inline MixEvaluation mix_protocol(const MLPModel& model, const Scorer& scorer, const Dataset& data,
                                  std::size_t n_traces, MixMode mode, bool include_real, const FgsmConfig& fgsm,
                                  std::uint64_t seed, std::size_t dcor_cap = kDefaultDistanceCorrelationCap) {
  const auto rows = attack_targets(model, data, n_traces, seed);
  const auto traces = fgsm_attack_rows(model, data, rows, fgsm);
  MixEvaluation out;
  out.traces = traces.size();
  out.successful = static_cast<std::size_t>(
      std::count_if(traces.begin(), traces.end(), [](const AttackTrace& t) { return t.success; }));
  out.mixed = build_mixed_set(data, traces, mode, include_real);
  out.eval = evaluate(scorer, out.mixed.inputs, out.mixed.labels, dcor_cap);
  return out;
}

}  // namespace triage
