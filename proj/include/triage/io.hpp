#pragma once

// Persistence: tensor container, model checkpoints, score files, attack traces,
// run manifests and JSON/CSV reports. Byte layouts are documented in docs/formats.md.

#include <array>
#include <charconv>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "triage/adversarial.hpp"
#include "triage/binary.hpp"
#include "triage/metrics.hpp"
#include "triage/model.hpp"
#include "triage/selection.hpp"
#include "triage/stats.hpp"

#ifndef TRIAGE_VERSION
#define TRIAGE_VERSION "0.0.0"
#endif

namespace triage {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

inline constexpr std::string_view kTensorMagic = "TRGTENSR";
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 1;
inline constexpr std::uint32_t kMaxTensorRank = 8;

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {
inline std::uint64_t checked_volume(std::span<const std::uint64_t> dims, const std::string& source) {
  std::uint64_t volume = 1;
  for (auto d : dims) {
    if (d != 0 && volume > (std::uint64_t{1} << 61) / d) {
      throw IoError(IoErrc::dim_overflow, source + ": dimension product overflows");
    }
    volume *= d;
  }
  return volume;
}
}  // namespace detail

inline Bytes encode_tensor(std::span<const std::uint64_t> dims, std::span<const float> data) {
  if (dims.size() > kMaxTensorRank) throw IoError(IoErrc::malformed, "tensor rank exceeds " + std::to_string(kMaxTensorRank));
  const std::uint64_t volume = detail::checked_volume(dims, "tensor");
  if (volume != data.size()) {
    throw std::invalid_argument("write_tensor: dims describe " + std::to_string(volume) + " values but data has " +
                                std::to_string(data.size()));
  }
  ByteWriter w;
  w.raw(kTensorMagic);
  w.u32le(kTensorVersion);
  w.u32le(kDtypeFloat32);
  w.u32le(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.u64le(d);
  const std::size_t payload_start = w.size();
  for (float v : data) w.f32le(v);
  const auto& b = w.bytes();
  const std::uint32_t crc = crc32_of(std::span(b).subspan(payload_start));
  w.u32le(crc);
  return w.take();
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& source) {
  ByteReader r(bytes, source);
  const auto magic = r.take(kTensorMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kTensorMagic.begin())) {
    throw IoError(IoErrc::bad_magic, source + ": not a tensor file");
  }
  const std::uint32_t version = r.u32le();
  if (version != kTensorVersion) {
    throw IoError(IoErrc::unsupported_version, source + ": version " + std::to_string(version) + ", expected " +
                                                   std::to_string(kTensorVersion));
  }
  const std::uint32_t dtype = r.u32le();
  if (dtype != kDtypeFloat32) throw IoError(IoErrc::unsupported_dtype, source + ": dtype " + std::to_string(dtype));
  const std::uint32_t rank = r.u32le();
  if (rank > kMaxTensorRank) throw IoError(IoErrc::malformed, source + ": rank " + std::to_string(rank) + " too large");
  Tensor t;
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(r.u64le());
  const std::uint64_t volume = detail::checked_volume(t.dims, source);
  if (volume > r.remaining() / 4) {
    throw IoError(IoErrc::truncated, source + ": payload needs " + std::to_string(volume * 4 + 4) + " bytes, " +
                                         std::to_string(r.remaining()) + " present");
  }
  const auto payload = r.take(static_cast<std::size_t>(volume * 4));
  const std::uint32_t stored_crc = r.u32le();
  if (r.remaining() != 0) throw IoError(IoErrc::trailing_data, source + ": unexpected bytes after checksum");
  if (crc32_of(payload) != stored_crc) throw IoError(IoErrc::checksum_mismatch, source + ": payload checksum mismatch");
  ByteReader pr(payload, source);
  t.data.resize(static_cast<std::size_t>(volume));
  for (auto& v : t.data) v = pr.f32le();
  return t;
}

inline void write_tensor(const std::filesystem::path& path, std::span<const std::uint64_t> dims, std::span<const float> data) {
  write_file(path, encode_tensor(dims, data));
}

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path), path.string()); }

inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  const std::array<std::uint64_t, 2> dims{m.rows(), m.cols()};
  write_tensor(path, dims, m.data());
}

inline Matrix read_matrix(const std::filesystem::path& path) {
  Tensor t = read_tensor(path);
  if (t.dims.size() != 2) throw IoError(IoErrc::malformed, path.string() + ": expected a rank-2 tensor");
  return Matrix(static_cast<std::size_t>(t.dims[0]), static_cast<std::size_t>(t.dims[1]), std::move(t.data));
}

inline void write_prob_tensor(const std::filesystem::path& path, const ProbTensor& p) {
  const std::array<std::uint64_t, 3> dims{p.mutants(), p.inputs(), p.classes()};
  write_tensor(path, dims, p.data());
}

inline ProbTensor read_prob_tensor(const std::filesystem::path& path) {
  Tensor t = read_tensor(path);
  if (t.dims.size() != 3) throw IoError(IoErrc::malformed, path.string() + ": expected a rank-3 tensor (k x n x C)");
  return ProbTensor(static_cast<std::size_t>(t.dims[0]), static_cast<std::size_t>(t.dims[1]),
                    static_cast<std::size_t>(t.dims[2]), std::move(t.data));
}

/// Class indices stored as a rank-1 float32 tensor (exact for indices < 2^24).
inline void write_labels(const std::filesystem::path& path, std::span<const ClassIndex> labels) {
  std::vector<float> v(labels.begin(), labels.end());
  const std::array<std::uint64_t, 1> dims{labels.size()};
  write_tensor(path, dims, v);
}

inline std::vector<ClassIndex> read_labels(const std::filesystem::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dims.size() != 1) throw IoError(IoErrc::malformed, path.string() + ": expected a rank-1 label tensor");
  std::vector<ClassIndex> out;
  out.reserve(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const float v = t.data[i];
    if (!(v >= 0.0f) || v != std::floor(v) || v > 16777216.0f) {
      throw IoError(IoErrc::malformed, path.string() + ": entry " + std::to_string(i) + " is not a class index");
    }
    out.push_back(static_cast<ClassIndex>(v));
  }
  return out;
}

/// A dataset split as <dir>/<split>.x.tns + <dir>/<split>.y.tns.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  const std::string name(to_string(ds.split));
  write_matrix(dir / (name + ".x.tns"), ds.features);
  write_labels(dir / (name + ".y.tns"), ds.labels);
}

inline Dataset read_dataset(const std::filesystem::path& dir, Split split, std::size_t num_classes) {
  const std::string name(to_string(split));
  Dataset ds;
  ds.features = read_matrix(dir / (name + ".x.tns"));
  ds.labels = read_labels(dir / (name + ".y.tns"));
  ds.num_classes = num_classes;
  ds.split = split;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Model checkpoint
// ---------------------------------------------------------------------------

inline constexpr std::string_view kModelMagic = "TRGMODEL";
inline constexpr std::uint32_t kModelVersion = 1;

inline Bytes encode_model(const MLPModel& m) {
  const auto& arch = m.architecture();
  json header = {
      {"format", "triage-mlp"},
      {"layer_sizes", arch.layer_sizes},
      {"dropout_rate", arch.dropout_rate},
      {"hidden_activation", std::string(to_string(arch.hidden_activation))},
      {"output_activation", "softmax"},
      {"label_names", m.label_names},
      {"seed_lineage", {{"init_seed", m.init_seed}, {"train_seed", m.train_seed}}},
      {"weight_layout", "per layer: fan_in x fan_out row-major weights, then fan_out biases"},
  };
  const std::string text = header.dump();
  ByteWriter w;
  w.raw(kModelMagic);
  w.u32le(kModelVersion);
  w.u64le(text.size());
  const std::size_t body_start = w.size();
  w.raw(text);
  for (const auto& layer : m.layers()) {
    for (float v : layer.weights.data()) w.f32le(v);
    for (float v : layer.bias) w.f32le(v);
  }
  const std::uint32_t crc = crc32_of(std::span(w.bytes()).subspan(body_start));
  w.u32le(crc);
  return w.take();
}

inline MLPModel decode_model(std::span<const std::uint8_t> bytes, const std::string& source) {
  ByteReader r(bytes, source);
  const auto magic = r.take(kModelMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kModelMagic.begin())) {
    throw IoError(IoErrc::bad_magic, source + ": not a model checkpoint");
  }
  const std::uint32_t version = r.u32le();
  if (version != kModelVersion) throw IoError(IoErrc::unsupported_version, source + ": model version " + std::to_string(version));
  const std::uint64_t header_len = r.u64le();
  if (header_len > r.remaining()) throw IoError(IoErrc::truncated, source + ": header length exceeds file");
  const std::size_t body_start = r.offset();
  const auto htext = r.take(static_cast<std::size_t>(header_len));
  json header;
  try {
    header = json::parse(htext.begin(), htext.end());
  } catch (const json::exception& e) {
    throw IoError(IoErrc::malformed, source + ": bad header JSON: " + e.what());
  }
  Architecture arch;
  try {
    arch.layer_sizes = header.at("layer_sizes").get<std::vector<std::size_t>>();
    arch.dropout_rate = header.at("dropout_rate").get<double>();
    arch.hidden_activation = parse_activation(header.at("hidden_activation").get<std::string>());
  } catch (const std::exception& e) {
    throw IoError(IoErrc::malformed, source + ": " + e.what());
  }
  MLPModel m(arch);
  for (auto& layer : m.mutable_layers()) {
    for (float& v : layer.weights.data()) v = r.f32le();
    for (float& v : layer.bias) v = r.f32le();
  }
  const std::size_t body_end = r.offset();
  const std::uint32_t stored = r.u32le();
  if (r.remaining() != 0) throw IoError(IoErrc::trailing_data, source + ": unexpected bytes after checksum");
  if (crc32_of(bytes.subspan(body_start, body_end - body_start)) != stored) {
    throw IoError(IoErrc::checksum_mismatch, source + ": checkpoint checksum mismatch");
  }
  m.label_names = header.value("label_names", std::vector<std::string>{});
  if (header.contains("seed_lineage")) {
    m.init_seed = header["seed_lineage"].value("init_seed", std::uint64_t{0});
    m.train_seed = header["seed_lineage"].value("train_seed", std::uint64_t{0});
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const MLPModel& m) { write_file(path, encode_model(m)); }
inline MLPModel load_model(const std::filesystem::path& path) { return decode_model(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Describes how a result was produced. The "volatile" block (timestamps, thread
/// count, output directory) is kept apart so that everything else is reproducible
/// byte for byte.
struct RunManifest {
  std::string tool_version = TRIAGE_VERSION;
  std::string command;
  std::uint64_t master_seed = 0;
  json config = json::object();
  std::map<std::string, std::string> input_digests;
  json volatile_info = json::object();

  void add_input(const std::filesystem::path& p) { input_digests[p.generic_string()] = "sha256:" + sha256_file(p); }

  json to_json(bool include_volatile = true) const {
    json j = {{"tool", "triage"},
              {"tool_version", tool_version},
              {"command", command},
              {"master_seed", master_seed},
              {"config", config},
              {"input_digests", input_digests}};
    if (include_volatile) j["volatile"] = volatile_info;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { json, csv };

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : "degenerate"; }

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const CorrelationReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    json degenerate = json::array();
    if (!e.kendall) degenerate.push_back("kendall");
    if (!e.distance) degenerate.push_back("distance");
    if (!e.pearson) degenerate.push_back("pearson");
    entries.push_back({{"metric", std::string(to_string(e.metric))},
                       {"orientation", std::string(to_string(orientation_of(e.metric)))},
                       {"kendall", optional_json(e.kendall)},
                       {"distance", optional_json(e.distance)},
                       {"pearson", optional_json(e.pearson)},
                       {"n", e.n},
                       {"degenerate", degenerate}});
  }
  return {{"kind", "correlation"}, {"n", r.n}, {"accuracy", r.accuracy}, {"metrics", entries}};
}

inline std::string to_csv(const CorrelationReport& r) {
  std::string out = "metric,kendall,distance,pearson,n\n";
  for (const auto& e : r.entries) {
    out += std::string(to_string(e.metric)) + "," + format_optional(e.kendall) + "," + format_optional(e.distance) + "," +
           format_optional(e.pearson) + "," + std::to_string(e.n) + "\n";
  }
  return out;
}

inline json to_json(const DecileCurve& c) {
  return {{"kind", "decile_curve"},
          {"metric", std::string(to_string(c.metric))},
          {"orientation", std::string(to_string(orientation_of(c.metric)))},
          {"n", c.n},
          {"fractions", c.fractions},
          {"cumulative_accuracy", c.cumulative_accuracy},
          {"mean_metric", c.mean_metric}};
}

inline std::string to_csv(const DecileCurve& c) {
  std::string out = "fraction,accuracy,mean_metric\n";
  for (std::size_t i = 0; i < 10; ++i) {
    out += format_double(c.fractions[i]) + "," + format_double(c.cumulative_accuracy[i]) + "," +
           format_double(c.mean_metric[i]) + "\n";
  }
  return out;
}

inline json to_json(const RetrainTrace& t) {
  json reps = json::array();
  for (std::size_t r = 0; r < t.repetitions.size(); ++r) {
    json iters = json::array();
    for (const auto& it : t.repetitions[r].iterations) {
      iters.push_back({{"iteration", it.iteration},
                       {"train_size", it.train_size},
                       {"test_accuracy", it.test_accuracy},
                       {"selected", it.selected}});
    }
    reps.push_back({{"repetition", r}, {"seed", t.repetitions[r].seed}, {"iterations", iters}});
  }
  return {{"kind", "retrain_trace"},
          {"policy", t.policy},
          {"iterations", t.iteration_count()},
          {"mid_budget_iteration", t.mid_budget_iteration()},
          {"median_accuracy", t.median_accuracy()},
          {"repetitions", reps}};
}

/// repetition, iteration, train_size, accuracy
inline std::string to_csv(const RetrainTrace& t) {
  std::string out = "repetition,iteration,train_size,accuracy\n";
  for (std::size_t r = 0; r < t.repetitions.size(); ++r) {
    for (const auto& it : t.repetitions[r].iterations) {
      out += std::to_string(r) + "," + std::to_string(it.iteration) + "," + std::to_string(it.train_size) + "," +
             format_double(it.test_accuracy) + "\n";
    }
  }
  return out;
}

/// repetition, iteration, epoch, validation_accuracy
inline std::string epoch_curves_csv(const RetrainTrace& t) {
  std::string out = "repetition,iteration,epoch,validation_accuracy\n";
  for (std::size_t r = 0; r < t.repetitions.size(); ++r) {
    for (const auto& it : t.repetitions[r].iterations) {
      for (std::size_t e = 0; e < it.validation_curve.size(); ++e) {
        out += std::to_string(r) + "," + std::to_string(it.iteration) + "," + std::to_string(e + 1) + "," +
               format_double(it.validation_curve[e]) + "\n";
      }
    }
  }
  return out;
}

/// JSON reports embed the manifest without its volatile block.
template <typename Result>
void write_report(const std::filesystem::path& path, const Result& result, ReportFormat format,
                  const RunManifest& manifest) {
  if (format == ReportFormat::csv) {
    write_text(path, to_csv(result));
    return;
  }
  json j = to_json(result);
  j["manifest"] = manifest.to_json(false);
  write_text(path, j.dump(2) + "\n");
}

inline void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
  write_text(path, manifest.to_json(true).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Score files
// ---------------------------------------------------------------------------

struct ScoreFile {
  std::vector<ScoreVector> scores;
  std::vector<ClassIndex> predictions;
  std::optional<std::vector<ClassIndex>> labels;
  json config = json::object();

  std::optional<CorrectnessVector> correct() const {
    if (!labels) return std::nullopt;
    return correctness(predictions, *labels);
  }
  const ScoreVector& get(MetricId m) const {
    for (const auto& s : scores) {
      if (s.metric == m) return s;
    }
    throw std::out_of_range("score file has no " + std::string(to_string(m)) + " scores");
  }
};

inline json to_json(const ScoreFile& f) {
  json metrics = json::array();
  for (const auto& s : f.scores) {
    json m = {{"metric", std::string(to_string(s.metric))},
              {"orientation", std::string(to_string(s.orientation()))},
              {"values", s.values}};
    if (!s.valid.empty()) {
      m["valid"] = s.valid;
      json errs = json::object();
      for (std::size_t i = 0; i < s.errors.size(); ++i) {
        if (!s.errors[i].empty()) errs[std::to_string(i)] = s.errors[i];
      }
      m["errors"] = errs;
    }
    if (!s.density.empty()) m["density"] = s.density;
    metrics.push_back(m);
  }
  json j = {{"format", "triage-scores"},
            {"version", 1},
            {"n", f.predictions.size()},
            {"predictions", f.predictions},
            {"config", f.config},
            {"metrics", metrics}};
  if (f.labels) {
    j["labels"] = *f.labels;
    j["correct"] = *f.correct();
  } else {
    j["labels"] = nullptr;
    j["correct"] = nullptr;
  }
  return j;
}

/// JSON has no NaN; invalid entries are written as null and read back as NaN.
inline std::vector<double> doubles_or_nan(const json& a) {
  std::vector<double> out;
  out.reserve(a.size());
  for (const auto& v : a) out.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
  return out;
}

inline ScoreFile score_file_from_json(const json& j) {
  if (j.value("format", std::string{}) != "triage-scores") throw IoError(IoErrc::malformed, "not a triage score file");
  ScoreFile f;
  f.predictions = j.at("predictions").get<std::vector<ClassIndex>>();
  if (!j.at("labels").is_null()) f.labels = j.at("labels").get<std::vector<ClassIndex>>();
  f.config = j.value("config", json::object());
  for (const auto& m : j.at("metrics")) {
    ScoreVector s;
    s.metric = parse_metric(m.at("metric").get<std::string>());
    s.values = doubles_or_nan(m.at("values"));
    if (m.contains("valid")) {
      s.valid = m.at("valid").get<std::vector<bool>>();
      s.errors.assign(s.values.size(), "");
      const json errs = m.value("errors", json::object());
      for (const auto& [k, v] : errs.items()) s.errors.at(std::stoul(k)) = v.get<std::string>();
    }
    if (m.contains("density")) s.density = doubles_or_nan(m.at("density"));
    if (s.values.size() != f.predictions.size()) throw IoError(IoErrc::malformed, "score vector length mismatch");
    f.scores.push_back(std::move(s));
  }
  return f;
}

inline void write_scores(const std::filesystem::path& path, const ScoreFile& f, const RunManifest& manifest) {
  json j = to_json(f);
  j["manifest"] = manifest.to_json(false);
  write_text(path, j.dump(2) + "\n");
}

inline ScoreFile read_scores(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw IoError(IoErrc::malformed, path.string() + ": " + e.what());
  }
  return score_file_from_json(j);
}

/// index,label,prediction,correct,<metric>... for plotting.
inline std::string scores_csv(const ScoreFile& f) {
  std::string out = "index,label,prediction,correct";
  for (const auto& s : f.scores) out += "," + std::string(to_string(s.metric));
  out += "\n";
  const auto correct = f.correct();
  for (std::size_t i = 0; i < f.predictions.size(); ++i) {
    out += std::to_string(i) + "," + (f.labels ? std::to_string((*f.labels)[i]) : std::string("")) + "," +
           std::to_string(f.predictions[i]) + "," + (correct ? std::to_string((*correct)[i]) : std::string(""));
    for (const auto& s : f.scores) out += "," + (s.is_valid(i) ? format_double(s.values[i]) : std::string("invalid"));
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attack traces: iterates as a (rows x d) tensor plus a JSON sidecar
// ---------------------------------------------------------------------------

inline void write_traces(const std::filesystem::path& tensor_path, const std::filesystem::path& sidecar_path,
                         const std::vector<AttackTrace>& traces, const RunManifest& manifest) {
  std::size_t width = 0;
  for (const auto& t : traces) {
    if (!t.iterates.empty()) width = t.iterates.front().x.size();
  }
  Matrix rows(0, width);
  json list = json::array();
  for (const auto& t : traces) {
    const std::size_t first = rows.rows();
    json preds = json::array();
    for (const auto& it : t.iterates) {
      rows.append_row(it.x);
      preds.push_back(it.predicted);
    }
    list.push_back({{"original_index", t.original_index},
                    {"true_label", t.true_label},
                    {"original_prediction", t.original_prediction},
                    {"success", t.success},
                    {"eps", t.eps},
                    {"iters_used", t.iters_used},
                    {"first_row", first},
                    {"row_count", t.iterates.size()},
                    {"predictions", preds}});
  }
  write_matrix(tensor_path, rows);
  json j = {{"format", "triage-traces"}, {"version", 1}, {"tensor", tensor_path.filename().string()}, {"traces", list}};
  j["manifest"] = manifest.to_json(false);
  write_text(sidecar_path, j.dump(2) + "\n");
}

inline std::vector<AttackTrace> read_traces(const std::filesystem::path& tensor_path,
                                            const std::filesystem::path& sidecar_path) {
  const Matrix rows = read_matrix(tensor_path);
  const json j = json::parse(read_text(sidecar_path));
  if (j.value("format", std::string{}) != "triage-traces") throw IoError(IoErrc::malformed, "not a trace sidecar");
  std::vector<AttackTrace> out;
  for (const auto& e : j.at("traces")) {
    AttackTrace t;
    t.original_index = e.at("original_index").get<std::size_t>();
    t.true_label = e.at("true_label").get<ClassIndex>();
    t.original_prediction = e.at("original_prediction").get<ClassIndex>();
    t.success = e.at("success").get<bool>();
    t.eps = e.at("eps").get<double>();
    t.iters_used = e.at("iters_used").get<std::size_t>();
    const auto first = e.at("first_row").get<std::size_t>();
    const auto count = e.at("row_count").get<std::size_t>();
    const auto preds = e.at("predictions").get<std::vector<ClassIndex>>();
    if (first + count > rows.rows() || preds.size() != count) throw IoError(IoErrc::malformed, "trace rows out of range");
    for (std::size_t q = 0; q < count; ++q) {
      const auto r = rows.row(first + q);
      t.iterates.push_back({std::vector<float>(r.begin(), r.end()), preds[q], std::nullopt});
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace triage
