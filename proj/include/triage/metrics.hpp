#pragma once

// Selection scores: prediction-probability (MaxP), dropout variance (Var, VarW),
// vote divergence from uniform (KL), and the two surprise-adequacy scores (LSA, DSA).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "triage/model.hpp"
#include "triage/parallel.hpp"
#include "triage/tensor.hpp"

namespace triage {

enum class MetricId { MaxP, Var, VarW, KL, LSA, DSA };

inline constexpr std::array<MetricId, 6> kAllMetrics = {MetricId::MaxP, MetricId::Var, MetricId::VarW,
                                                        MetricId::KL,   MetricId::LSA, MetricId::DSA};

enum class Orientation { low_is_uncertain, high_is_uncertain };

inline std::string_view to_string(MetricId m) {
  switch (m) {
    case MetricId::MaxP: return "MaxP";
    case MetricId::Var: return "Var";
    case MetricId::VarW: return "VarW";
    case MetricId::KL: return "KL";
    case MetricId::LSA: return "LSA";
    case MetricId::DSA: return "DSA";
  }
  return "?";
}

inline MetricId parse_metric(std::string_view name) {
  for (auto m : kAllMetrics) {
    if (to_string(m) == name) return m;
  }
  if (name == "P") return MetricId::MaxP;
  throw std::invalid_argument("unknown metric '" + std::string(name) + "'");
}

inline std::string_view to_string(Orientation o) {
  return o == Orientation::low_is_uncertain ? "low-is-uncertain" : "high-is-uncertain";
}

/// MaxP and KL drop as uncertainty grows; the others rise.
constexpr Orientation orientation_of(MetricId m) noexcept {
  return (m == MetricId::MaxP || m == MetricId::KL) ? Orientation::low_is_uncertain
                                                     : Orientation::high_is_uncertain;
}

struct ScoreVector {
  MetricId metric = MetricId::MaxP;
  std::vector<double> values;
  /// Per-input validity; empty means every value is valid. Invalid entries hold 0.
  std::vector<bool> valid;
  /// Per-input diagnostics for invalid entries (same length as values when non-empty).
  std::vector<std::string> errors;
  /// LSA only: the raw kernel density behind each score.
  std::vector<double> density;

  Orientation orientation() const noexcept { return orientation_of(metric); }
  std::size_t size() const noexcept { return values.size(); }
  bool is_valid(std::size_t i) const { return valid.empty() || valid[i]; }
  std::size_t invalid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), false));
  }
};

// ---------------------------------------------------------------------------
// Uncertainty scores
// ---------------------------------------------------------------------------

inline ScoreVector max_p(const Matrix& probs) {
  ScoreVector s{MetricId::MaxP, std::vector<double>(probs.rows()), {}, {}, {}};
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto row = probs.row(i);
    s.values[i] = static_cast<double>(*std::max_element(row.begin(), row.end()));
  }
  return s;
}

/// Mean over classes of the population variance of the k mutant probabilities.
inline ScoreVector var_score(const ProbTensor& t) {
  if (t.mutants() < 2) throw std::invalid_argument("var_score: need at least 2 mutants");
  const std::size_t k = t.mutants();
  const std::size_t c = t.classes();
  ScoreVector s{MetricId::Var, std::vector<double>(t.inputs()), {}, {}, {}};
  for (std::size_t i = 0; i < t.inputs(); ++i) {
    double total = 0.0;
    for (std::size_t cls = 0; cls < c; ++cls) {
      double m = 0.0;
      for (std::size_t j = 0; j < k; ++j) m += t.at(j, i, cls);
      m /= static_cast<double>(k);
      double v = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double d = t.at(j, i, cls) - m;
        v += d * d;
      }
      total += v / static_cast<double>(k);
    }
    s.values[i] = total / static_cast<double>(c);
  }
  return s;
}

/// Var divided by the deterministic model's top probability.
inline ScoreVector var_weighted(const ProbTensor& t, const Matrix& det_probs) {
  if (det_probs.rows() != t.inputs()) throw std::invalid_argument("var_weighted: input count mismatch");
  ScoreVector s = var_score(t);
  s.metric = MetricId::VarW;
  const ScoreVector top = max_p(det_probs);
  for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] /= top.values[i];
  return s;
}

/// KL divergence of the mutants' argmax-vote histogram from the uniform distribution.
inline ScoreVector kl_score(const ProbTensor& t) {
  if (t.mutants() < 1) throw std::invalid_argument("kl_score: need at least 1 mutant");
  const std::size_t k = t.mutants();
  const std::size_t c = t.classes();
  ScoreVector s{MetricId::KL, std::vector<double>(t.inputs()), {}, {}, {}};
  std::vector<std::size_t> votes(c);
  for (std::size_t i = 0; i < t.inputs(); ++i) {
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t j = 0; j < k; ++j) ++votes[argmax(t.row(j, i))];
    double kl = 0.0;
    for (std::size_t cls = 0; cls < c; ++cls) {
      if (votes[cls] == 0) continue;
      const double h = static_cast<double>(votes[cls]) / static_cast<double>(k);
      kl += h * std::log(h * static_cast<double>(c));
    }
    s.values[i] = kl;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Likelihood-based surprise (Gaussian KDE)
// ---------------------------------------------------------------------------

enum class BandwidthRule { scott, fixed };

inline std::string_view to_string(BandwidthRule r) { return r == BandwidthRule::scott ? "scott" : "fixed"; }

inline BandwidthRule parse_bandwidth_rule(std::string_view s) {
  if (s == "scott") return BandwidthRule::scott;
  if (s == "fixed") return BandwidthRule::fixed;
  throw std::invalid_argument("unknown bandwidth rule '" + std::string(s) + "'");
}

struct KdeConfig {
  BandwidthRule bandwidth_rule = BandwidthRule::scott;
  /// Per-dimension bandwidth (standard deviation) when bandwidth_rule == fixed.
  double fixed_bandwidth = 1.0;
  /// Dimensions whose training variance falls below this are dropped.
  double variance_floor = 1e-5;
  /// Added to the density before taking -log; 0 keeps the exact log-density.
  double density_floor = 0.0;

  void validate() const {
    if (!(variance_floor >= 0.0)) throw std::invalid_argument("KdeConfig: variance floor must be >= 0");
    if (!(density_floor >= 0.0)) throw std::invalid_argument("KdeConfig: density floor must be >= 0");
    if (bandwidth_rule == BandwidthRule::fixed && !(fixed_bandwidth > 0.0)) {
      throw std::invalid_argument("KdeConfig: fixed bandwidth must be > 0");
    }
  }
};

/// Product-Gaussian KDE with a diagonal bandwidth matrix. Under Scott's rule the
/// per-dimension bandwidth is sd_j * n^(-1/(d+4)) with sd_j the sample standard
/// deviation (n-1) of retained dimension j.
class GaussianKde {
 public:
  GaussianKde(const Matrix& train, const KdeConfig& cfg) {
    cfg.validate();
    const std::size_t n = train.rows();
    if (n < 2) throw std::invalid_argument("LSA: need at least 2 training rows");
    for (std::size_t j = 0; j < train.cols(); ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += train(i, j);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = train(i, j) - m;
        v += d * d;
      }
      v /= static_cast<double>(n - 1);
      if (v >= cfg.variance_floor && v > 0.0) {
        dims_.push_back(j);
        sd_.push_back(std::sqrt(v));
      }
    }
    if (dims_.empty()) {
      throw std::invalid_argument("LSA: every activation dimension was filtered out by the variance floor");
    }
    const double d = static_cast<double>(dims_.size());
    const double factor = std::pow(static_cast<double>(n), -1.0 / (d + 4.0));
    log_norm_ = -0.5 * d * std::log(2.0 * 3.14159265358979323846);
    for (double& sd : sd_) {
      const double h = cfg.bandwidth_rule == BandwidthRule::scott ? sd * factor : cfg.fixed_bandwidth;
      bandwidth_.push_back(h);
      log_norm_ -= std::log(h);
    }
    scaled_.resize(n * dims_.size());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t q = 0; q < dims_.size(); ++q) scaled_[i * dims_.size() + q] = train(i, dims_[q]) / bandwidth_[q];
    }
    n_ = n;
    width_ = train.cols();
  }

  std::span<const std::size_t> retained_dims() const noexcept { return dims_; }
  std::span<const double> bandwidths() const noexcept { return bandwidth_; }
  std::size_t input_width() const noexcept { return width_; }

  /// log of (1/n) sum_i K_H(x - t_i), evaluated with log-sum-exp.
  double log_density(std::span<const float> x) const {
    if (x.size() != width_) throw std::invalid_argument("LSA: activation width mismatch");
    const std::size_t d = dims_.size();
    std::vector<double> z(d);
    for (std::size_t q = 0; q < d; ++q) z[q] = x[dims_[q]] / bandwidth_[q];
    std::vector<double> expo(n_);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n_; ++i) {
      const double* t = scaled_.data() + i * d;
      double sq = 0.0;
      for (std::size_t q = 0; q < d; ++q) {
        const double diff = z[q] - t[q];
        sq += diff * diff;
      }
      expo[i] = -0.5 * sq;
      top = std::max(top, expo[i]);
    }
    double acc = 0.0;
    for (double e : expo) acc += std::exp(e - top);
    return log_norm_ + top + std::log(acc) - std::log(static_cast<double>(n_));
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> sd_;
  std::vector<double> bandwidth_;
  std::vector<double> scaled_;
  std::size_t n_ = 0;
  std::size_t width_ = 0;
  double log_norm_ = 0.0;
};

/// LSA score = -log(density + density_floor) against an already fitted KDE.
inline ScoreVector lsa(const GaussianKde& kde, const Matrix& test_acts, double density_floor = 0.0) {
  ScoreVector s{MetricId::LSA, std::vector<double>(test_acts.rows()), {}, {}, std::vector<double>(test_acts.rows())};
  parallel_for(test_acts.rows(), [&](std::size_t i) {
    const double logd = kde.log_density(test_acts.row(i));
    s.density[i] = std::exp(logd);
    if (density_floor > 0.0) {
      const double lf = std::log(density_floor);
      const double hi = std::max(logd, lf);
      s.values[i] = -(hi + std::log(std::exp(logd - hi) + std::exp(lf - hi)));
    } else {
      s.values[i] = -logd;
    }
  });
  return s;
}

/// LSA score = -log(density + density_floor); higher means more surprising.
inline ScoreVector lsa(const Matrix& train_acts, const Matrix& test_acts, const KdeConfig& cfg) {
  if (train_acts.cols() != test_acts.cols()) throw std::invalid_argument("LSA: activation width mismatch");
  return lsa(GaussianKde(train_acts, cfg), test_acts, cfg.density_floor);
}

// ---------------------------------------------------------------------------
// Distance-based surprise
// ---------------------------------------------------------------------------

/// ||a(x) - a(x_a)|| / ||a(x) - a(x_b)||, x_a the nearest training point predicted
/// as x's class and x_b the nearest predicted as any other class. Ties go to the
/// lowest training index. Inputs without a same-class or other-class reference, or
/// sitting exactly on an other-class reference, are marked invalid.
inline ScoreVector dsa(const Matrix& train_acts, std::span<const ClassIndex> train_pred, const Matrix& test_acts,
                       std::span<const ClassIndex> test_pred) {
  if (train_acts.cols() != test_acts.cols()) throw std::invalid_argument("DSA: activation width mismatch");
  if (train_pred.size() != train_acts.rows() || test_pred.size() != test_acts.rows()) {
    throw std::invalid_argument("DSA: prediction count mismatch");
  }
  const std::size_t n = test_acts.rows();
  ScoreVector s{MetricId::DSA, std::vector<double>(n, 0.0), std::vector<bool>(n, true),
                std::vector<std::string>(n), {}};
  std::vector<char> ok(n, 1);
  parallel_for(n, [&](std::size_t i) {
    const auto x = test_acts.row(i);
    double best_same = std::numeric_limits<double>::infinity();
    double best_other = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < train_acts.rows(); ++t) {
      const auto y = train_acts.row(t);
      double sq = 0.0;
      for (std::size_t q = 0; q < x.size(); ++q) {
        const double d = static_cast<double>(x[q]) - static_cast<double>(y[q]);
        sq += d * d;
      }
      if (train_pred[t] == test_pred[i]) {
        if (sq < best_same) best_same = sq;
      } else if (sq < best_other) {
        best_other = sq;
      }
    }
    if (!std::isfinite(best_same)) {
      ok[i] = 0;
      s.errors[i] = "no training point predicted as class " + std::to_string(test_pred[i]);
    } else if (!std::isfinite(best_other)) {
      ok[i] = 0;
      s.errors[i] = "no training point predicted as a class other than " + std::to_string(test_pred[i]);
    } else if (best_other == 0.0) {
      ok[i] = 0;
      s.errors[i] = "input coincides with a training point of another class";
    } else {
      s.values[i] = std::sqrt(best_same) / std::sqrt(best_other);
    }
  });
  for (std::size_t i = 0; i < n; ++i) s.valid[i] = ok[i] != 0;
  return s;
}

}  // namespace triage
