#pragma once

// Dense numeric kernels shared by the rest of the library: a row-major float
// matrix, a portable seeded RNG, softmax and a few reductions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace triage {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                  " does not match " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
  }

  static Matrix from_rows(const std::vector<std::vector<float>>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols_) throw std::invalid_argument("Matrix::from_rows: ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  /// Rows selected by index, in the given order.
  Matrix gather_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= rows_) throw std::out_of_range("Matrix::gather_rows: index out of range");
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * cols_), cols_,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
    }
    return out;
  }

  void append_row(std::span<const float> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) throw std::invalid_argument("Matrix::append_row: width mismatch");
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// out = x * w + bias, with x (n x in), w (in x out). Accumulates in float with a
/// fixed summation order so results are reproducible.
inline Matrix affine(const Matrix& x, const Matrix& w, std::span<const float> bias) {
  if (x.cols() != w.rows()) {
    throw std::invalid_argument("affine: input width " + std::to_string(x.cols()) +
                                " does not match weight rows " + std::to_string(w.rows()));
  }
  if (bias.size() != w.cols()) throw std::invalid_argument("affine: bias length mismatch");
  Matrix out(x.rows(), w.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto dst = out.row(r);
    std::copy(bias.begin(), bias.end(), dst.begin());
    const auto src = x.row(r);
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const float a = src[k];
      if (a == 0.0f) continue;
      const auto wrow = w.row(k);
      for (std::size_t c = 0; c < w.cols(); ++c) dst[c] += a * wrow[c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer; used to fan a master seed out into independent child seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Child seed for a named purpose ("dropout", "shuffle", "init", ...) and an index.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                                 std::uint64_t index = 0) noexcept {
  // FNV-1a over the purpose tag keeps tags stable across platforms.
  std::uint64_t tag = 0xcbf29ce484222325ULL;
  for (unsigned char ch : purpose) {
    tag ^= ch;
    tag *= 0x100000001b3ULL;
  }
  return mix64(mix64(master ^ tag) + index);
}

/// Portable RNG: std::mt19937_64 (its output sequence is fixed by the C++ standard)
/// with our own conversions to uniform/normal/bounded values, because the standard
/// distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> seeded_shuffle(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

/// Numerically stable softmax (max-subtracted, double accumulation).
inline std::vector<float> softmax(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  for (float v : logits) {
    if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite logit");
  }
  const float top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> ex(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    ex[i] = std::exp(static_cast<double>(logits[i]) - static_cast<double>(top));
    total += ex[i];
  }
  std::vector<float> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(ex[i] / total);
  return out;
}

inline void softmax_rows_inplace(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const auto p = softmax(row);
    std::copy(p.begin(), p.end(), row.begin());
  }
}

/// Index of the largest entry; the lowest index wins ties.
template <typename T>
std::size_t argmax(std::span<const T> values) {
  if (values.empty()) throw std::invalid_argument("argmax: empty input");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

template <typename T>
double mean(std::span<const T> values) {
  if (values.empty()) throw std::invalid_argument("mean: empty input");
  double s = 0.0;
  for (T v : values) s += static_cast<double>(v);
  return s / static_cast<double>(values.size());
}

/// Population variance (divides by n).
template <typename T>
double population_variance(std::span<const T> values) {
  const double m = mean(values);
  double s = 0.0;
  for (T v : values) {
    const double d = static_cast<double>(v) - m;
    s += d * d;
  }
  return s / static_cast<double>(values.size());
}

/// Median of a copy; the mean of the two middle values for even n.
inline double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace triage
