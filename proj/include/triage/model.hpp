#pragma once

// Feed-forward classifier with dropout: SGD training, deterministic and
// Monte-Carlo-dropout inference, activation extraction and input gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "triage/parallel.hpp"
#include "triage/tensor.hpp"

namespace triage {

using ClassIndex = std::uint32_t;

enum class Activation { relu, tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "relu";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

enum class Split { train, test, pool };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::pool: return "pool";
  }
  return "train";
}

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  if (name == "pool") return Split::pool;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

struct Dataset {
  Matrix features;
  std::vector<ClassIndex> labels;
  std::size_t num_classes = 0;
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("Dataset: no rows");
    if (features.rows() != labels.size()) {
      throw std::invalid_argument("Dataset: " + std::to_string(features.rows()) + " feature rows but " +
                                  std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= num_classes) {
        throw std::invalid_argument("Dataset: label " + std::to_string(labels[i]) + " at row " +
                                    std::to_string(i) + " is not below class count " +
                                    std::to_string(num_classes));
      }
    }
    if (!features.all_finite()) throw std::invalid_argument("Dataset: non-finite feature value");
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.features = features.gather_rows(indices);
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels.at(i));
    out.num_classes = num_classes;
    out.split = split;
    return out;
  }
};

struct Architecture {
  /// Input width, hidden widths..., class count.
  std::vector<std::size_t> layer_sizes;
  double dropout_rate = 0.2;
  Activation hidden_activation = Activation::relu;

  void validate() const {
    if (layer_sizes.size() < 3) {
      throw std::invalid_argument("Architecture: need input, at least one hidden layer and output");
    }
    for (auto s : layer_sizes) {
      if (s == 0) throw std::invalid_argument("Architecture: zero-width layer");
    }
    if (layer_sizes.back() < 2) throw std::invalid_argument("Architecture: need at least 2 classes");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("Architecture: dropout rate must lie in [0, 1)");
    }
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct DenseLayer {
  Matrix weights;  // fan_in x fan_out
  std::vector<float> bias;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

class MLPModel {
 public:
  /// All-zero parameters.
  explicit MLPModel(Architecture arch) : arch_(std::move(arch)) {
    arch_.validate();
    for (std::size_t l = 0; l + 1 < arch_.layer_sizes.size(); ++l) {
      layers_.push_back({Matrix(arch_.layer_sizes[l], arch_.layer_sizes[l + 1]),
                         std::vector<float>(arch_.layer_sizes[l + 1], 0.0f)});
    }
  }

  /// He-normal weights, zero biases.
  static MLPModel he_initialized(Architecture arch, std::uint64_t seed) {
    MLPModel m(std::move(arch));
    Rng rng(seed);
    for (auto& layer : m.layers_) {
      const double scale = std::sqrt(2.0 / static_cast<double>(layer.weights.rows()));
      for (float& w : layer.weights.data()) w = static_cast<float>(rng.normal() * scale);
    }
    m.init_seed = seed;
    return m;
  }

  const Architecture& architecture() const noexcept { return arch_; }
  std::size_t input_dim() const noexcept { return arch_.layer_sizes.front(); }
  std::size_t num_classes() const noexcept { return arch_.layer_sizes.back(); }
  std::size_t hidden_layer_count() const noexcept { return arch_.layer_sizes.size() - 2; }
  std::size_t hidden_width(std::size_t h) const { return arch_.layer_sizes.at(h + 1); }
  std::size_t total_hidden_width() const noexcept {
    std::size_t w = 0;
    for (std::size_t h = 0; h < hidden_layer_count(); ++h) w += arch_.layer_sizes[h + 1];
    return w;
  }
  double dropout_rate() const noexcept { return arch_.dropout_rate; }
  Activation hidden_activation() const noexcept { return arch_.hidden_activation; }

  std::span<const DenseLayer> layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& mutable_layers() noexcept { return layers_; }

  std::vector<std::string> label_names;
  std::uint64_t init_seed = 0;
  std::uint64_t train_seed = 0;

  friend bool operator==(const MLPModel& a, const MLPModel& b) {
    return a.arch_ == b.arch_ && a.layers_ == b.layers_;
  }

 private:
  Architecture arch_;
  std::vector<DenseLayer> layers_;
};

/// k x n x C stack of per-mutant probability rows.
class ProbTensor {
 public:
  ProbTensor() = default;
  ProbTensor(std::size_t k, std::size_t n, std::size_t classes)
      : k_(k), n_(n), c_(classes), data_(k * n * classes, 0.0f) {}
  ProbTensor(std::size_t k, std::size_t n, std::size_t classes, std::vector<float> data)
      : k_(k), n_(n), c_(classes), data_(std::move(data)) {
    if (data_.size() != k_ * n_ * c_) throw std::invalid_argument("ProbTensor: data length mismatch");
  }

  std::size_t mutants() const noexcept { return k_; }
  std::size_t inputs() const noexcept { return n_; }
  std::size_t classes() const noexcept { return c_; }

  std::span<float> row(std::size_t mutant, std::size_t input) noexcept {
    return {data_.data() + (mutant * n_ + input) * c_, c_};
  }
  std::span<const float> row(std::size_t mutant, std::size_t input) const noexcept {
    return {data_.data() + (mutant * n_ + input) * c_, c_};
  }
  float at(std::size_t mutant, std::size_t input, std::size_t cls) const noexcept {
    return data_[(mutant * n_ + input) * c_ + cls];
  }

  Matrix slice(std::size_t mutant) const {
    std::vector<float> d(data_.begin() + static_cast<std::ptrdiff_t>(mutant * n_ * c_),
                         data_.begin() + static_cast<std::ptrdiff_t>((mutant + 1) * n_ * c_));
    return Matrix(n_, c_, std::move(d));
  }

  std::span<const float> data() const noexcept { return data_; }

  /// Throws unless every (mutant, input) row is a probability simplex.
  void validate(double tolerance = 1e-5) const {
    for (std::size_t j = 0; j < k_; ++j) {
      for (std::size_t i = 0; i < n_; ++i) {
        double s = 0.0;
        for (float p : row(j, i)) {
          if (!(p >= 0.0f) || !std::isfinite(p)) {
            throw std::invalid_argument("ProbTensor: negative or non-finite probability at mutant " +
                                        std::to_string(j) + ", input " + std::to_string(i));
          }
          s += p;
        }
        if (std::abs(s - 1.0) > tolerance) {
          throw std::invalid_argument("ProbTensor: row (" + std::to_string(j) + ", " + std::to_string(i) +
                                      ") sums to " + std::to_string(s));
        }
      }
    }
  }

  friend bool operator==(const ProbTensor&, const ProbTensor&) = default;

 private:
  std::size_t k_ = 0;
  std::size_t n_ = 0;
  std::size_t c_ = 0;
  std::vector<float> data_;
};

struct TrainConfig {
  std::size_t epochs = 50;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw std::invalid_argument("TrainConfig: validation fraction must lie in [0, 1)");
    }
  }
};

struct TrainResult {
  MLPModel model;
  std::vector<double> validation_accuracy;  // one per epoch
  std::vector<double> training_loss;        // one per epoch
  std::size_t best_epoch = 0;               // 1-based
  double best_validation_accuracy = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(std::size_t epoch)
      : std::runtime_error("training diverged: loss became non-finite in epoch " + std::to_string(epoch)),
        epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

namespace detail {

inline float activate(Activation a, float v) {
  return a == Activation::relu ? (v > 0.0f ? v : 0.0f) : std::tanh(v);
}

/// Derivative expressed through the pre-activation value.
inline float activate_grad(Activation a, float pre, float post) {
  return a == Activation::relu ? (pre > 0.0f ? 1.0f : 0.0f) : 1.0f - post * post;
}

/// Dropout multipliers for one hidden layer. Either empty (no dropout), a single
/// row broadcast to every input, or one row per input.
struct LayerMask {
  Matrix scale;
  float at(std::size_t r, std::size_t c) const {
    return scale.rows() == 1 ? scale(0, c) : scale(r, c);
  }
  bool active() const noexcept { return !scale.empty(); }
};

struct ForwardPass {
  std::vector<Matrix> pre;   // per layer, before activation (last = logits)
  std::vector<Matrix> post;  // per hidden layer, after activation and dropout
};

inline ForwardPass forward(const MLPModel& model, const Matrix& x, std::span<const LayerMask> masks) {
  if (x.cols() != model.input_dim()) {
    throw std::invalid_argument("model input width is " + std::to_string(model.input_dim()) + " but X has " +
                                std::to_string(x.cols()) + " columns");
  }
  ForwardPass fp;
  const auto layers = model.layers();
  const Matrix* input = &x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    fp.pre.push_back(affine(*input, layers[l].weights, layers[l].bias));
    if (l + 1 == layers.size()) break;
    Matrix h = fp.pre.back();
    const bool masked = l < masks.size() && masks[l].active();
    for (std::size_t r = 0; r < h.rows(); ++r) {
      auto row = h.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        row[c] = activate(model.hidden_activation(), row[c]);
        if (masked) row[c] *= masks[l].at(r, c);
      }
    }
    fp.post.push_back(std::move(h));
    input = &fp.post.back();
  }
  return fp;
}

/// Fills a 1 x width (shared) or rows x width mask with 0 or 1/(1-r).
inline LayerMask sample_mask(std::size_t rows, std::size_t width, double rate, Rng& rng) {
  LayerMask m{Matrix(rows, width)};
  const float keep_scale = static_cast<float>(1.0 / (1.0 - rate));
  for (float& v : m.scale.data()) v = rng.uniform() < rate ? 0.0f : keep_scale;
  return m;
}

/// One mutant's masks: a single mask row per hidden layer, shared by all inputs.
inline std::vector<LayerMask> mutant_masks(const MLPModel& model, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LayerMask> masks;
  for (std::size_t h = 0; h < model.hidden_layer_count(); ++h) {
    masks.push_back(sample_mask(1, model.hidden_width(h), model.dropout_rate(), rng));
  }
  return masks;
}

inline std::uint64_t mutant_seed(std::uint64_t seed, std::size_t j) { return derive_seed(seed, "mutant", j); }

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<float>> bias;
  Matrix input;
};

/// Backprop of mean cross-entropy over the batch. Returns the summed loss.
inline double backward(const MLPModel& model, const Matrix& x, const ForwardPass& fp,
                       std::span<const ClassIndex> labels, std::span<const LayerMask> masks, Gradients& g,
                       bool want_input_grad) {
  const auto layers = model.layers();
  const std::size_t n = x.rows();
  const std::size_t L = layers.size();
  Matrix delta = fp.pre.back();
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = delta.row(r);
    const auto p = softmax(row);
    const ClassIndex y = labels[r];
    loss -= std::log(std::max(static_cast<double>(p[y]), 1e-30));
    // p_y - 1 cancels badly in float when the model is confident; use the sum of the other classes
    double rest = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c != y) rest += p[c];
    }
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] = static_cast<float>((c == y ? -rest : static_cast<double>(p[c])) / static_cast<double>(n));
    }
  }
  g.weights.resize(L);
  g.bias.resize(L);
  for (std::size_t l = L; l-- > 0;) {
    const Matrix& in = l == 0 ? x : fp.post[l - 1];
    const Matrix& w = layers[l].weights;
    Matrix gw(w.rows(), w.cols());
    std::vector<float> gb(w.cols(), 0.0f);
    for (std::size_t r = 0; r < n; ++r) {
      const auto d = delta.row(r);
      const auto a = in.row(r);
      for (std::size_t c = 0; c < d.size(); ++c) gb[c] += d[c];
      for (std::size_t i = 0; i < a.size(); ++i) {
        const float ai = a[i];
        if (ai == 0.0f) continue;
        auto gwrow = gw.row(i);
        for (std::size_t c = 0; c < d.size(); ++c) gwrow[c] += ai * d[c];
      }
    }
    g.weights[l] = std::move(gw);
    g.bias[l] = std::move(gb);
    if (l == 0 && !want_input_grad) break;
    // delta_prev = delta * W^T, then through the activation and dropout of layer l-1.
    Matrix wt(w.cols(), w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t c = 0; c < w.cols(); ++c) wt(c, i) = w(i, c);
    }
    Matrix prev(n, w.rows());
    for (std::size_t c = 0; c < wt.rows(); ++c) {
      const auto wtrow = wt.row(c);
      for (std::size_t r = 0; r < n; ++r) {
        const float dc = delta(r, c);
        auto out = prev.row(r);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += dc * wtrow[i];
      }
    }
    if (l == 0) {
      g.input = std::move(prev);
      break;
    }
    const Matrix& pre = fp.pre[l - 1];
    const Matrix& post = fp.post[l - 1];
    const bool masked = l - 1 < masks.size() && masks[l - 1].active();
    for (std::size_t r = 0; r < n; ++r) {
      auto row = prev.row(r);
      for (std::size_t i = 0; i < row.size(); ++i) {
        const float m = masked ? masks[l - 1].at(r, i) : 1.0f;
        if (m == 0.0f) {
          row[i] = 0.0f;
          continue;
        }
        const float unmasked_post = post(r, i) / m;
        row[i] *= m * activate_grad(model.hidden_activation(), pre(r, i), unmasked_post);
      }
    }
    delta = std::move(prev);
  }
  return loss;
}

}  // namespace detail

/// Softmax probabilities with dropout disabled.
inline Matrix predict_proba(const MLPModel& model, const Matrix& x) {
  auto fp = detail::forward(model, x, {});
  Matrix probs = std::move(fp.pre.back());
  softmax_rows_inplace(probs);
  return probs;
}

inline std::vector<ClassIndex> predict_classes(const MLPModel& model, const Matrix& x) {
  const Matrix p = predict_proba(model, x);
  std::vector<ClassIndex> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) out[r] = static_cast<ClassIndex>(argmax(p.row(r)));
  return out;
}

inline std::vector<ClassIndex> argmax_rows(const Matrix& probs) {
  std::vector<ClassIndex> out(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) out[r] = static_cast<ClassIndex>(argmax(probs.row(r)));
  return out;
}

inline double accuracy(const MLPModel& model, const Dataset& data) {
  const auto pred = predict_classes(model, data.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return data.size() == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Monte-Carlo dropout inference. Mutant j draws one dropout mask per hidden layer
/// from a seed derived from (seed, j) and applies it to every input, so mutant j is
/// a fixed neuron-masked copy of the model and results do not depend on batching
/// or thread count.
inline ProbTensor mc_predict_proba(const MLPModel& model, const Matrix& x, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("mc_predict_proba: need k >= 2 mutants");
  if (!(model.dropout_rate() > 0.0)) {
    throw std::invalid_argument("mc_predict_proba: dropout rate is 0, mutants would be identical");
  }
  if (x.cols() != model.input_dim()) throw std::invalid_argument("mc_predict_proba: input width mismatch");
  ProbTensor out(k, x.rows(), model.num_classes());
  parallel_for(k, [&](std::size_t j) {
    const auto masks = detail::mutant_masks(model, detail::mutant_seed(seed, j));
    auto fp = detail::forward(model, x, masks);
    Matrix& logits = fp.pre.back();
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto p = softmax(logits.row(i));
      std::copy(p.begin(), p.end(), out.row(j, i).begin());
    }
  });
  return out;
}

/// Explicit weight-pruned copies of the k mutants used by mc_predict_proba (debugging aid).
inline std::vector<MLPModel> materialize_mutants(const MLPModel& model, std::size_t k, std::uint64_t seed) {
  std::vector<MLPModel> out;
  out.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto masks = detail::mutant_masks(model, detail::mutant_seed(seed, j));
    MLPModel m = model;
    auto& layers = m.mutable_layers();
    for (std::size_t h = 0; h < masks.size(); ++h) {
      Matrix& w = layers[h + 1].weights;
      for (std::size_t i = 0; i < w.rows(); ++i) {
        for (float& v : w.row(i)) v *= masks[h].scale(0, i);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Post-activation values of one hidden layer (0-based), dropout disabled.
inline Matrix activations(const MLPModel& model, const Matrix& x, std::size_t hidden_layer) {
  if (hidden_layer >= model.hidden_layer_count()) {
    throw std::out_of_range("activations: hidden layer " + std::to_string(hidden_layer) + " out of range (model has " +
                            std::to_string(model.hidden_layer_count()) + ")");
  }
  auto fp = detail::forward(model, x, {});
  return std::move(fp.post[hidden_layer]);
}

inline Matrix deepest_hidden_activations(const MLPModel& model, const Matrix& x) {
  return activations(model, x, model.hidden_layer_count() - 1);
}

/// All hidden-layer activations concatenated column-wise, shallowest first.
inline Matrix all_hidden_activations(const MLPModel& model, const Matrix& x) {
  auto fp = detail::forward(model, x, {});
  Matrix out(x.rows(), model.total_hidden_width());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto dst = out.row(r).begin();
    for (const auto& h : fp.post) dst = std::copy(h.row(r).begin(), h.row(r).end(), dst);
  }
  return out;
}

/// Gradient of the cross-entropy loss at (x, label) with respect to x, dropout disabled.
inline std::vector<float> input_gradient(const MLPModel& model, std::span<const float> x, ClassIndex label) {
  if (label >= model.num_classes()) throw std::out_of_range("input_gradient: label out of range");
  if (x.size() != model.input_dim()) throw std::invalid_argument("input_gradient: input width mismatch");
  Matrix xm(1, x.size(), std::vector<float>(x.begin(), x.end()));
  const auto fp = detail::forward(model, xm, {});
  detail::Gradients g;
  const ClassIndex labels[1] = {label};
  detail::backward(model, xm, fp, labels, {}, g, true);
  return {g.input.data().begin(), g.input.data().end()};
}

/// Mini-batch SGD with momentum and dropout on hidden layers. A validation_fraction
/// share of the data is held out; the snapshot with the best held-out accuracy wins.
inline TrainResult train(const Dataset& data, const Architecture& arch, const TrainConfig& cfg,
                         const MLPModel* warm_start = nullptr) {
  cfg.validate();
  arch.validate();
  data.validate();
  if (arch.layer_sizes.front() != data.features.cols()) {
    throw std::invalid_argument("train: architecture input width " + std::to_string(arch.layer_sizes.front()) +
                                " does not match feature width " + std::to_string(data.features.cols()));
  }
  if (arch.layer_sizes.back() != data.num_classes) {
    throw std::invalid_argument("train: architecture output width does not match class count");
  }
  if (warm_start != nullptr && !(warm_start->architecture() == arch)) {
    throw std::invalid_argument("train: warm-start model has a different architecture");
  }

  Rng split_rng(derive_seed(cfg.seed, "holdout"));
  const auto perm = seeded_shuffle(data.size(), split_rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(data.size())));
  if (cfg.validation_fraction > 0.0 && n_val == 0 && data.size() >= 2) n_val = 1;
  std::vector<std::size_t> train_idx(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> val_idx(perm.end() - static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  const Dataset val = n_val > 0 ? data.subset(val_idx) : data;

  MLPModel model = warm_start ? *warm_start : MLPModel::he_initialized(arch, derive_seed(cfg.seed, "init"));
  model.train_seed = cfg.seed;
  TrainResult result{model, {}, {}, 0, -1.0};

  std::vector<Matrix> vel_w;
  std::vector<std::vector<float>> vel_b;
  for (const auto& layer : model.layers()) {
    vel_w.emplace_back(layer.weights.rows(), layer.weights.cols());
    vel_b.emplace_back(layer.bias.size(), 0.0f);
  }

  Rng order_rng(derive_seed(cfg.seed, "shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  const float lr = static_cast<float>(cfg.learning_rate);
  const float mu = static_cast<float>(cfg.momentum);
  const bool use_dropout = arch.dropout_rate > 0.0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = seeded_shuffle(train_idx.size(), order_rng);
    double loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train_idx[order[i]]);
      const Matrix xb = data.features.gather_rows(batch);
      std::vector<ClassIndex> yb;
      yb.reserve(batch.size());
      for (auto i : batch) yb.push_back(data.labels[i]);

      std::vector<detail::LayerMask> masks;
      if (use_dropout) {
        for (std::size_t h = 0; h < model.hidden_layer_count(); ++h) {
          masks.push_back(detail::sample_mask(xb.rows(), model.hidden_width(h), arch.dropout_rate, dropout_rng));
        }
      }
      detail::Gradients g;
      try {
        const auto fp = detail::forward(model, xb, masks);
        loss += detail::backward(model, xb, fp, yb, masks, g, false);
      } catch (const std::domain_error&) {
        throw TrainingDiverged(epoch);  // non-finite logits
      }

      auto& layers = model.mutable_layers();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        auto w = layers[l].weights.data();
        auto vw = vel_w[l].data();
        const auto gw = g.weights[l].data();
        for (std::size_t i = 0; i < w.size(); ++i) {
          vw[i] = mu * vw[i] - lr * gw[i];
          w[i] += vw[i];
        }
        for (std::size_t i = 0; i < layers[l].bias.size(); ++i) {
          vel_b[l][i] = mu * vel_b[l][i] - lr * g.bias[l][i];
          layers[l].bias[i] += vel_b[l][i];
        }
      }
    }
    loss /= static_cast<double>(std::max<std::size_t>(1, order.size()));
    if (!std::isfinite(loss)) throw TrainingDiverged(epoch);
    for (const auto& layer : model.layers()) {
      if (!layer.weights.all_finite()) throw TrainingDiverged(epoch);
      for (float b : layer.bias) {
        if (!std::isfinite(b)) throw TrainingDiverged(epoch);
      }
    }
    const double val_acc = accuracy(model, val);
    result.training_loss.push_back(loss);
    result.validation_accuracy.push_back(val_acc);
    if (val_acc > result.best_validation_accuracy) {
      result.best_validation_accuracy = val_acc;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

}  // namespace triage
