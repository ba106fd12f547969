#pragma once

// Desk-scale datasets: seeded Gaussian-blob problems with stratified
// train/test/pool splits, and an IDX-style binary import/export.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "triage/binary.hpp"
#include "triage/model.hpp"
#include "triage/tensor.hpp"

namespace triage {

struct BlobSpec {
  std::size_t n_classes = 10;
  std::size_t points_per_class = 800;
  std::size_t dim = 20;
  /// Gaussian modes per class; each point picks one of its class's modes uniformly.
  std::size_t modes_per_class = 1;
  /// (n_classes * modes_per_class) x dim, class-major; generated from the seed when empty.
  std::vector<std::vector<float>> centers;
  double sigma = 0.1;
  /// Share of points drawn on the segment towards another class's centre
  /// (mixing weight uniform in [0.25, 0.75]) instead of around their own centre.
  double overlap_factor = 0.0;
  std::uint64_t seed = 0;
  /// Split totals; must add up to n_classes * points_per_class.
  std::size_t train_size = 2000;
  std::size_t test_size = 1000;
  std::size_t pool_size = 5000;
  /// Generated centres are drawn uniformly from [margin, 1 - margin]^dim.
  double center_margin = 0.2;

  void validate() const {
    if (n_classes < 2) throw std::invalid_argument("BlobSpec: need at least 2 classes");
    if (dim < 1) throw std::invalid_argument("BlobSpec: dim must be >= 1");
    if (modes_per_class < 1) throw std::invalid_argument("BlobSpec: modes_per_class must be >= 1");
    if (!(sigma > 0.0)) throw std::invalid_argument("BlobSpec: sigma must be > 0");
    if (!(overlap_factor >= 0.0 && overlap_factor <= 1.0)) {
      throw std::invalid_argument("BlobSpec: overlap_factor must lie in [0, 1]");
    }
    if (train_size + test_size + pool_size != n_classes * points_per_class) {
      throw std::invalid_argument("BlobSpec: split sizes must add up to n_classes * points_per_class");
    }
    if (!centers.empty()) {
      if (centers.size() != n_classes * modes_per_class) {
        throw std::invalid_argument("BlobSpec: need n_classes * modes_per_class centres");
      }
      for (const auto& c : centers) {
        if (c.size() != dim) throw std::invalid_argument("BlobSpec: centre width does not match dim");
      }
      for (std::size_t a = 0; a < centers.size(); ++a) {
        for (std::size_t b = a + 1; b < centers.size(); ++b) {
          if (centers[a] == centers[b]) {
            throw std::invalid_argument("BlobSpec: centres " + std::to_string(a) + " and " + std::to_string(b) +
                                        " coincide");
          }
        }
      }
    }
  }
};

struct BlobSplits {
  Dataset train;
  Dataset test;
  Dataset pool;
  std::vector<std::vector<float>> centers;
};

/// Deterministic per seed; features are clipped to [0, 1]. Every class contributes
/// points_per_class points, and each split's per-class quota differs by at most one
/// between classes. Rows inside each split are shuffled.
inline BlobSplits make_blobs(const BlobSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "blobs"));
  BlobSplits out;
  out.centers = spec.centers;
  if (out.centers.empty()) {
    Rng crng(derive_seed(spec.seed, "centers"));
    out.centers.assign(spec.n_classes * spec.modes_per_class, std::vector<float>(spec.dim));
    for (auto& c : out.centers) {
      for (float& v : c) v = static_cast<float>(crng.uniform(spec.center_margin, 1.0 - spec.center_margin));
    }
  }
  const std::size_t C = spec.n_classes;
  const std::size_t M = spec.modes_per_class;
  auto quota = [C](std::size_t total, std::size_t cls) { return total / C + (cls < total % C ? 1 : 0); };

  std::vector<Dataset*> splits = {&out.train, &out.test, &out.pool};
  const std::size_t totals[3] = {spec.train_size, spec.test_size, spec.pool_size};
  const Split tags[3] = {Split::train, Split::test, Split::pool};
  for (std::size_t s = 0; s < 3; ++s) {
    splits[s]->num_classes = C;
    splits[s]->split = tags[s];
    splits[s]->features = Matrix(0, spec.dim);
  }

  std::vector<float> point(spec.dim);
  for (std::size_t cls = 0; cls < C; ++cls) {
    const std::size_t q_train = quota(spec.train_size, cls);
    const std::size_t q_test = quota(spec.test_size, cls);
    if (q_train + q_test > spec.points_per_class) {
      throw std::invalid_argument("BlobSpec: split quotas exceed points_per_class");
    }
    for (std::size_t p = 0; p < spec.points_per_class; ++p) {
      const std::size_t mode = M == 1 ? 0 : static_cast<std::size_t>(rng.below(M));
      const auto& own = out.centers[cls * M + mode];
      std::vector<float> center = own;
      if (rng.uniform() < spec.overlap_factor) {
        std::size_t other = static_cast<std::size_t>(rng.below(C - 1));
        if (other >= cls) ++other;
        const auto& far = out.centers[other * M + (M == 1 ? 0 : static_cast<std::size_t>(rng.below(M)))];
        const double w = rng.uniform(0.25, 0.75);
        for (std::size_t j = 0; j < spec.dim; ++j) {
          center[j] = static_cast<float>((1.0 - w) * own[j] + w * far[j]);
        }
      }
      for (std::size_t j = 0; j < spec.dim; ++j) {
        point[j] = static_cast<float>(std::clamp(rng.normal(center[j], spec.sigma), 0.0, 1.0));
      }
      const std::size_t s = p < q_train ? 0 : (p < q_train + q_test ? 1 : 2);
      splits[s]->features.append_row(point);
      splits[s]->labels.push_back(static_cast<ClassIndex>(cls));
    }
  }
  for (std::size_t s = 0; s < 3; ++s) {
    if (splits[s]->size() != totals[s]) throw std::logic_error("make_blobs: split size bookkeeping failed");
    Rng srng(derive_seed(spec.seed, "split-order", s));
    const auto perm = seeded_shuffle(splits[s]->size(), srng);
    *splits[s] = splits[s]->subset(perm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX-style files
//
// Features: 0x00 0x00 <dtype> <ndim>, ndim big-endian u32 dims (first = rows),
// then row-major data; dtype 0x08 = unsigned byte (scaled by 1/255 on import),
// 0x0D = big-endian float32 (must already lie in [0, 1]).
// Labels: 0x00 0x00 0x08 0x01, u32 count, then one byte per label.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kIdxUnsignedByte = 0x08;
inline constexpr std::uint8_t kIdxFloat32 = 0x0D;

inline Dataset import_idx_like(const std::filesystem::path& features_path, const std::filesystem::path& labels_path,
                               std::optional<std::size_t> num_classes = std::nullopt) {
  const Bytes fbytes = read_file(features_path);
  ByteReader fr(fbytes, features_path.string());
  if (fr.u8() != 0 || fr.u8() != 0) throw IoError(IoErrc::bad_magic, features_path.string() + ": bad magic at byte offset 0");
  const std::uint8_t dtype = fr.u8();
  if (dtype != kIdxUnsignedByte && dtype != kIdxFloat32) {
    throw IoError(IoErrc::unsupported_dtype, features_path.string() + ": unsupported dtype at byte offset 2");
  }
  const std::uint8_t ndim = fr.u8();
  if (ndim < 1) throw IoError(IoErrc::malformed, features_path.string() + ": zero dimensions at byte offset 3");
  std::vector<std::uint64_t> dims;
  for (std::uint8_t i = 0; i < ndim; ++i) dims.push_back(fr.u32be());
  std::uint64_t width = 1;
  for (std::size_t i = 1; i < dims.size(); ++i) {
    if (dims[i] != 0 && width > (std::uint64_t{1} << 40) / dims[i]) {
      throw IoError(IoErrc::dim_overflow, features_path.string() + ": dimensions overflow");
    }
    width *= dims[i];
  }
  const std::uint64_t rows = dims[0];
  const std::size_t elem = dtype == kIdxUnsignedByte ? 1 : 4;
  fr.need(static_cast<std::size_t>(rows * width * elem));
  Matrix features(static_cast<std::size_t>(rows), static_cast<std::size_t>(width));
  for (std::size_t i = 0; i < features.size(); ++i) {
    const std::size_t at = fr.offset();
    float v = dtype == kIdxUnsignedByte ? static_cast<float>(fr.u8()) / 255.0f : fr.f32be();
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw IoError(IoErrc::malformed, features_path.string() + ": feature value outside [0, 1] at byte offset " +
                                           std::to_string(at));
    }
    features.data()[i] = v;
  }
  if (fr.remaining() != 0) {
    throw IoError(IoErrc::trailing_data, features_path.string() + ": " + std::to_string(fr.remaining()) +
                                             " unexpected bytes at byte offset " + std::to_string(fr.offset()));
  }

  const Bytes lbytes = read_file(labels_path);
  ByteReader lr(lbytes, labels_path.string());
  if (lr.u8() != 0 || lr.u8() != 0 || lr.u8() != kIdxUnsignedByte || lr.u8() != 1) {
    throw IoError(IoErrc::bad_magic, labels_path.string() + ": bad magic at byte offset 0");
  }
  const std::uint32_t count = lr.u32be();
  if (count != rows) {
    throw IoError(IoErrc::malformed, labels_path.string() + ": " + std::to_string(count) + " labels for " +
                                         std::to_string(rows) + " feature rows (byte offset 4)");
  }
  lr.need(count);
  Dataset ds;
  ds.features = std::move(features);
  ds.labels.resize(count);
  std::size_t max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.labels[i] = lr.u8();
    max_label = std::max<std::size_t>(max_label, ds.labels[i]);
  }
  if (lr.remaining() != 0) {
    throw IoError(IoErrc::trailing_data, labels_path.string() + ": unexpected bytes at byte offset " +
                                             std::to_string(lr.offset()));
  }
  ds.num_classes = num_classes.value_or(std::max<std::size_t>(2, max_label + 1));
  for (std::uint32_t i = 0; i < count; ++i) {
    if (ds.labels[i] >= ds.num_classes) {
      throw IoError(IoErrc::malformed, labels_path.string() + ": label " + std::to_string(ds.labels[i]) +
                                           " out of range [0, " + std::to_string(ds.num_classes) +
                                           ") at byte offset " + std::to_string(8 + i));
    }
  }
  ds.split = Split::train;
  return ds;
}

/// Writes features as float32 IDX (exact round trip) and labels as bytes.
inline void export_idx_like(const Dataset& ds, const std::filesystem::path& features_path,
                            const std::filesystem::path& labels_path) {
  if (ds.features.rows() != ds.labels.size()) throw std::invalid_argument("export_idx_like: row/label mismatch");
  ByteWriter fw;
  fw.u8(0);
  fw.u8(0);
  fw.u8(kIdxFloat32);
  fw.u8(2);
  fw.u32be(static_cast<std::uint32_t>(ds.features.rows()));
  fw.u32be(static_cast<std::uint32_t>(ds.features.cols()));
  for (float v : ds.features.data()) fw.f32be(v);
  write_file(features_path, fw.bytes());

  ByteWriter lw;
  lw.u8(0);
  lw.u8(0);
  lw.u8(kIdxUnsignedByte);
  lw.u8(1);
  lw.u32be(static_cast<std::uint32_t>(ds.labels.size()));
  for (auto l : ds.labels) {
    if (l > 255) throw std::invalid_argument("export_idx_like: label does not fit in a byte");
    lw.u8(static_cast<std::uint8_t>(l));
  }
  write_file(labels_path, lw.bytes());
}

}  // namespace triage
