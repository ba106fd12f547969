#pragma once

// Correlation between scores and the correctness indicator (Kendall tau-b,
// Pearson, distance correlation) and cumulative decile accuracy curves.
// Degenerate correlations (a constant side) come back as std::nullopt.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "triage/metrics.hpp"
#include "triage/parallel.hpp"

namespace triage {

/// 1 = well classified, 0 = misclassified.
using CorrectnessVector = std::vector<std::uint8_t>;

inline CorrectnessVector correctness(std::span<const ClassIndex> predicted, std::span<const ClassIndex> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("correctness: length mismatch");
  CorrectnessVector out(predicted.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = predicted[i] == truth[i] ? 1 : 0;
  return out;
}

namespace detail {
inline void check_pair(std::span<const double> x, std::span<const double> y, const char* who) {
  if (x.size() != y.size()) {
    throw std::invalid_argument(std::string(who) + ": length mismatch (" + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw std::invalid_argument(std::string(who) + ": need at least 2 observations");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw std::invalid_argument(std::string(who) + ": non-finite value");
  }
}

/// Sum of t(t-1)/2 over runs of equal values in a sorted range.
template <typename It, typename Eq>
std::int64_t tied_pairs(It first, It last, Eq eq) {
  std::int64_t total = 0;
  while (first != last) {
    It run = first;
    std::int64_t t = 0;
    while (run != last && eq(*run, *first)) {
      ++run;
      ++t;
    }
    total += t * (t - 1) / 2;
    first = run;
  }
  return total;
}

/// Stable merge sort that returns the number of inversions (pairs i<j, v[i] > v[j]).
inline std::int64_t sort_counting_inversions(std::vector<double>& v) {
  std::vector<double> buf(v.size());
  std::int64_t swaps = 0;
  for (std::size_t width = 1; width < v.size(); width *= 2) {
    for (std::size_t lo = 0; lo < v.size(); lo += 2 * width) {
      const std::size_t mid = std::min(v.size(), lo + width);
      const std::size_t hi = std::min(v.size(), lo + 2 * width);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[j] < v[i]) {
          swaps += static_cast<std::int64_t>(mid - i);
          buf[k++] = v[j++];
        } else {
          buf[k++] = v[i++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
    }
    v.swap(buf);
  }
  return swaps;
}
}  // namespace detail

/// Kendall tau-b in O(n log n) (Knight's algorithm).
inline std::optional<double> kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y, "kendall_tau_b");
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  const auto n0 = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n - 1) / 2;
  const std::int64_t n1 = detail::tied_pairs(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] == x[b]; });
  const std::int64_t n3 = detail::tied_pairs(idx.begin(), idx.end(),
                                             [&](std::size_t a, std::size_t b) { return x[a] == x[b] && y[a] == y[b]; });
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
  const std::int64_t swaps = detail::sort_counting_inversions(ys);
  const std::int64_t n2 = detail::tied_pairs(ys.begin(), ys.end(), [](double a, double b) { return a == b; });
  if (n0 == n1 || n0 == n2) return std::nullopt;
  const std::int64_t s = n0 - n1 - n2 + n3 - 2 * swaps;
  const double denom = std::sqrt(static_cast<double>(n0 - n1)) * std::sqrt(static_cast<double>(n0 - n2));
  return std::clamp(static_cast<double>(s) / denom, -1.0, 1.0);
}

inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y, "pearson");
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

inline constexpr std::size_t kDefaultDistanceCorrelationCap = 20000;

/// Sample distance correlation from double-centred distance matrices. The matrices
/// are never materialized: row means come from one O(n^2) pass and the centred
/// products from a second. Per-row partial sums are reduced in row order, so the
/// result does not depend on the thread count.
inline std::optional<double> distance_correlation(std::span<const double> x, std::span<const double> y,
                                                  std::size_t cap = kDefaultDistanceCorrelationCap) {
  detail::check_pair(x, y, "distance_correlation");
  const std::size_t n = x.size();
  if (n > cap) {
    throw std::length_error("distance_correlation: " + std::to_string(n) + " observations exceed the cap of " +
                            std::to_string(cap) + "; subsample the inputs first");
  }
  std::vector<double> row_a(n), row_b(n);
  parallel_for(n, [&](std::size_t i) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      sa += std::abs(x[i] - x[j]);
      sb += std::abs(y[i] - y[j]);
    }
    row_a[i] = sa / static_cast<double>(n);
    row_b[i] = sb / static_cast<double>(n);
  });
  double grand_a = 0.0, grand_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    grand_a += row_a[i];
    grand_b += row_b[i];
  }
  grand_a /= static_cast<double>(n);
  grand_b /= static_cast<double>(n);

  std::vector<double> part_ab(n), part_aa(n), part_bb(n);
  parallel_for(n, [&](std::size_t i) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double a = std::abs(x[i] - x[j]) - row_a[i] - row_a[j] + grand_a;
      const double b = std::abs(y[i] - y[j]) - row_b[i] - row_b[j] + grand_b;
      ab += a * b;
      aa += a * a;
      bb += b * b;
    }
    part_ab[i] = ab;
    part_aa[i] = aa;
    part_bb[i] = bb;
  });
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += part_ab[i];
    aa += part_aa[i];
    bb += part_bb[i];
  }
  if (aa <= 0.0 || bb <= 0.0) return std::nullopt;
  const double r2 = ab / std::sqrt(aa * bb);
  return std::clamp(std::sqrt(std::max(0.0, r2)), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct CorrelationEntry {
  MetricId metric;
  std::optional<double> kendall;
  std::optional<double> distance;
  std::optional<double> pearson;
  std::size_t n = 0;
};

struct CorrelationReport {
  std::vector<CorrelationEntry> entries;
  /// Share of correctly classified inputs in the evaluated set.
  double accuracy = 0.0;
  std::size_t n = 0;

  const CorrelationEntry& get(MetricId m) const {
    for (const auto& e : entries) {
      if (e.metric == m) return e;
    }
    throw std::out_of_range("CorrelationReport: no entry for " + std::string(to_string(m)));
  }
};

/// Correlations of each score vector with the correctness indicator. Invalid score
/// entries are left out of that metric's correlation.
inline CorrelationReport correlate(std::span<const ScoreVector> scores, std::span<const std::uint8_t> correct,
                                   std::size_t dcor_cap = kDefaultDistanceCorrelationCap) {
  CorrelationReport report;
  report.n = correct.size();
  std::size_t hits = 0;
  for (auto c : correct) hits += c != 0;
  report.accuracy = correct.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(correct.size());
  for (const auto& s : scores) {
    if (s.size() != correct.size()) throw std::invalid_argument("correlate: score/correctness length mismatch");
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!s.is_valid(i)) continue;
      xs.push_back(s.values[i]);
      ys.push_back(correct[i] != 0 ? 1.0 : 0.0);
    }
    CorrelationEntry e{s.metric, std::nullopt, std::nullopt, std::nullopt, xs.size()};
    if (xs.size() >= 2) {
      e.kendall = kendall_tau_b(xs, ys);
      e.distance = distance_correlation(xs, ys, dcor_cap);
      e.pearson = pearson(xs, ys);
    }
    report.entries.push_back(e);
  }
  return report;
}

struct DecileCurve {
  MetricId metric = MetricId::MaxP;
  std::array<double, 10> fractions{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::array<double, 10> cumulative_accuracy{};
  std::array<double, 10> mean_metric{};
  std::size_t n = 0;
};

/// Order in which inputs are consumed by decile_curve: most uncertain first by the
/// metric's orientation; equal scores put correct inputs first, then lower index.
/// Invalid scores go last.
inline std::vector<std::size_t> uncertainty_order(const ScoreVector& s, std::span<const std::uint8_t> correct) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const bool high_first = s.orientation() == Orientation::high_is_uncertain;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const bool va = s.is_valid(a), vb = s.is_valid(b);
    if (va != vb) return va;
    if (va && s.values[a] != s.values[b]) return high_first ? s.values[a] > s.values[b] : s.values[a] < s.values[b];
    if (correct[a] != correct[b]) return correct[a] > correct[b];
    return a < b;
  });
  return idx;
}

/// Cumulative accuracy over the 10%, 20%, ..., 100% most uncertain inputs. When n is
/// not divisible by 10 the first n % 10 subsets receive one extra input each.
inline DecileCurve decile_curve(const ScoreVector& s, std::span<const std::uint8_t> correct) {
  if (s.size() != correct.size()) throw std::invalid_argument("decile_curve: length mismatch");
  if (s.size() < 10) throw std::invalid_argument("decile_curve: need at least 10 inputs");
  DecileCurve curve;
  curve.metric = s.metric;
  curve.n = s.size();
  const auto order = uncertainty_order(s, correct);
  const std::size_t base = s.size() / 10;
  const std::size_t extra = s.size() % 10;
  std::size_t pos = 0, hits = 0;
  for (std::size_t d = 0; d < 10; ++d) {
    const std::size_t len = base + (d < extra ? 1 : 0);
    double metric_sum = 0.0;
    for (std::size_t q = 0; q < len; ++q, ++pos) {
      hits += correct[order[pos]] != 0;
      metric_sum += s.values[order[pos]];
    }
    curve.cumulative_accuracy[d] = static_cast<double>(hits) / static_cast<double>(pos);
    curve.mean_metric[d] = metric_sum / static_cast<double>(len);
  }
  return curve;
}

}  // namespace triage
