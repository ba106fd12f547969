// triage: command-line front end. Every command writes manifest.json next to its
// outputs; errors go to stderr as one JSON object. Exit codes: 0 ok, 1 runtime
// failure, 2 usage error (bad flag, missing input file, conflicting settings).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "triage/io.hpp"
#include "triage/pipeline.hpp"

namespace fs = std::filesystem;
using namespace triage;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit_error(const std::string& kind, const std::string& message, const std::string& code = "") {
  json j = {{"error", {{"kind", kind}, {"message", message}}}};
  if (!code.empty()) j["error"]["code"] = code;
  std::cerr << j.dump() << "\n";
}

struct Globals {
  std::uint64_t seed = 0;
  std::size_t k = 50;
  double dropout_rate = 0.2;
  std::string out_dir = "out";
  std::size_t threads = 0;
  CLI::Option* k_opt = nullptr;
  CLI::Option* rate_opt = nullptr;
};

struct KdeFlags {
  std::string bandwidth = "scott";
  double fixed_bandwidth = 1.0;
  double variance_floor = 1e-5;
  double density_floor = 0.0;

  void add(CLI::App* cmd) {
    cmd->add_option("--bandwidth", bandwidth, "KDE bandwidth rule")
        ->check(CLI::IsMember({"scott", "fixed"}))
        ->capture_default_str();
    cmd->add_option("--fixed-bandwidth", fixed_bandwidth, "Bandwidth when --bandwidth fixed")->capture_default_str();
    cmd->add_option("--variance-floor", variance_floor, "Drop activation dims with lower training variance")
        ->capture_default_str();
    cmd->add_option("--density-floor", density_floor, "LSA = -log(density + floor)")->capture_default_str();
  }
  KdeConfig config() const {
    KdeConfig c;
    c.bandwidth_rule = parse_bandwidth_rule(bandwidth);
    c.fixed_bandwidth = fixed_bandwidth;
    c.variance_floor = variance_floor;
    c.density_floor = density_floor;
    c.validate();
    return c;
  }
};

json kde_json(const KdeConfig& c) {
  return {{"bandwidth_rule", std::string(to_string(c.bandwidth_rule))},
          {"fixed_bandwidth", c.fixed_bandwidth},
          {"variance_floor", c.variance_floor},
          {"density_floor", c.density_floor}};
}

// ---------------------------------------------------------------------------
// Data directory: dataset.json + <split>.x.tns / <split>.y.tns
// ---------------------------------------------------------------------------

struct DataDir {
  fs::path dir;
  json meta;

  static DataDir open(const fs::path& dir) {
    DataDir d{dir, {}};
    try {
      d.meta = json::parse(read_text(dir / "dataset.json"));
    } catch (const json::exception& e) {
      throw IoError(IoErrc::malformed, (dir / "dataset.json").string() + ": " + e.what());
    }
    if (d.meta.value("format", std::string{}) != "triage-dataset") {
      throw IoError(IoErrc::malformed, (dir / "dataset.json").string() + ": not a dataset description");
    }
    return d;
  }
  std::size_t num_classes() const { return meta.at("num_classes").get<std::size_t>(); }
  bool has(Split s) const { return meta.at("splits").contains(std::string(to_string(s))); }
  Dataset load(Split s, RunManifest& manifest) const {
    if (!has(s)) throw UsageError("data directory " + dir.string() + " has no " + std::string(to_string(s)) + " split");
    const std::string name(to_string(s));
    manifest.add_input(dir / (name + ".x.tns"));
    manifest.add_input(dir / (name + ".y.tns"));
    return read_dataset(dir, s, num_classes());
  }
};

void write_dataset_meta(const fs::path& dir, std::size_t num_classes, std::size_t dim,
                        const std::map<std::string, std::size_t>& splits, const json& extra) {
  json j = {{"format", "triage-dataset"},
            {"version", 1},
            {"num_classes", num_classes},
            {"dim", dim},
            {"splits", splits},
            {"feature_range", {0.0, 1.0}}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_text(dir / "dataset.json", j.dump(2) + "\n");
}

RunManifest start_manifest(const std::string& command, const Globals& g) {
  RunManifest m;
  m.command = command;
  m.master_seed = g.seed;
  m.volatile_info = {{"started_at", utc_timestamp()}, {"threads", max_threads()}, {"out_dir", g.out_dir}};
  return m;
}

void finish(RunManifest& m, const Globals& g) {
  m.volatile_info["finished_at"] = utc_timestamp();
  write_manifest(fs::path(g.out_dir) / "manifest.json", m);
}

MLPModel load_model_input(const std::string& path, RunManifest& m) {
  m.add_input(path);
  return load_model(path);
}

/// Model used for the mutants: the checkpoint's rate unless --dropout-rate was given.
MLPModel mutant_model(const MLPModel& model, const Globals& g) {
  if (g.rate_opt->count() == 0) return model;
  return with_dropout_rate(model, g.dropout_rate);
}

ScoreFile to_score_file(const ScoreSet& set, std::optional<std::vector<ClassIndex>> labels, json config) {
  ScoreFile f;
  f.scores = set.scores;
  f.predictions = set.predictions;
  f.labels = std::move(labels);
  f.config = std::move(config);
  return f;
}

std::vector<MetricId> parse_metric_list(const std::vector<std::string>& names) {
  std::vector<MetricId> out;
  for (const auto& n : names) {
    if (n == "all") return {kAllMetrics.begin(), kAllMetrics.end()};
    const MetricId m = parse_metric(n);
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GenDataOpts {
  std::size_t classes = 10, dim = 20, points_per_class = 800;
  double sigma = kDeskSigma, overlap = 0.0, center_margin = 0.2;
  std::size_t train_size = 2000, test_size = 1000, pool_size = 5000;
  std::vector<std::string> idx_train, idx_test, idx_pool;
  std::optional<std::size_t> idx_classes;
};

void run_gen_data(const GenDataOpts& o, const Globals& g) {
  RunManifest m = start_manifest("gen-data", g);
  const fs::path out(g.out_dir);
  const bool idx = !o.idx_train.empty() || !o.idx_test.empty() || !o.idx_pool.empty();
  if (idx) {
    std::map<std::string, std::size_t> sizes;
    std::optional<std::size_t> classes = o.idx_classes;
    std::size_t dim = 0;
    json files = json::object();
    const std::pair<Split, const std::vector<std::string>*> parts[] = {
        {Split::train, &o.idx_train}, {Split::test, &o.idx_test}, {Split::pool, &o.idx_pool}};
    std::vector<Dataset> loaded;
    for (const auto& [split, paths] : parts) {
      if (paths->empty()) continue;
      m.add_input((*paths)[0]);
      m.add_input((*paths)[1]);
      Dataset ds = import_idx_like((*paths)[0], (*paths)[1], o.idx_classes);
      ds.split = split;
      if (dim != 0 && ds.features.cols() != dim) throw UsageError("IDX splits have different feature widths");
      dim = ds.features.cols();
      loaded.push_back(std::move(ds));
    }
    std::size_t c = classes.value_or(0);
    for (const auto& ds : loaded) c = std::max(c, ds.num_classes);
    for (auto& ds : loaded) {
      ds.num_classes = c;
      write_dataset(out, ds);
      sizes[std::string(to_string(ds.split))] = ds.size();
    }
    write_dataset_meta(out, c, dim, sizes, {{"source", "idx"}});
    m.config = {{"source", "idx"}, {"num_classes", c}};
    finish(m, g);
    return;
  }
  BlobSpec spec;
  spec.n_classes = o.classes;
  spec.dim = o.dim;
  spec.points_per_class = o.points_per_class;
  spec.sigma = o.sigma;
  spec.overlap_factor = o.overlap;
  spec.center_margin = o.center_margin;
  spec.train_size = o.train_size;
  spec.test_size = o.test_size;
  spec.pool_size = o.pool_size;
  spec.seed = g.seed;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const BlobSplits splits = make_blobs(spec);
  std::map<std::string, std::size_t> sizes;
  for (const Dataset* ds : {&splits.train, &splits.test, &splits.pool}) {
    if (ds->size() == 0) continue;
    write_dataset(out, *ds);
    sizes[std::string(to_string(ds->split))] = ds->size();
  }
  json blob = {{"classes", spec.n_classes},   {"dim", spec.dim},
               {"points_per_class", spec.points_per_class}, {"sigma", spec.sigma},
               {"overlap_factor", spec.overlap_factor},      {"center_margin", spec.center_margin},
               {"train_size", spec.train_size},              {"test_size", spec.test_size},
               {"pool_size", spec.pool_size}};
  write_dataset_meta(out, spec.n_classes, spec.dim, sizes,
                     {{"source", "blobs"}, {"blobs", blob}, {"centers", splits.centers}});
  m.config = {{"source", "blobs"}, {"blobs", blob}};
  finish(m, g);
}

struct TrainOpts {
  std::string data;
  std::vector<std::size_t> hidden = kDeskHiddenLayers;
  std::string activation = "relu";
  std::size_t epochs = 50, batch_size = 32;
  double lr = 0.01, momentum = 0.9, validation_fraction = 0.1;
};

void run_train(const TrainOpts& o, const Globals& g) {
  RunManifest m = start_manifest("train", g);
  const DataDir dd = DataDir::open(o.data);
  const Dataset tr = dd.load(Split::train, m);
  Architecture arch = desk_architecture(tr.features.cols(), tr.num_classes, g.dropout_rate, o.hidden);
  arch.hidden_activation = parse_activation(o.activation);
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.learning_rate = o.lr;
  tc.momentum = o.momentum;
  tc.validation_fraction = o.validation_fraction;
  tc.seed = derive_seed(g.seed, "train");
  try {
    arch.validate();
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  TrainResult res = train(tr, arch, tc);
  if (dd.meta.contains("label_names")) res.model.label_names = dd.meta["label_names"].get<std::vector<std::string>>();
  const fs::path out(g.out_dir);
  save_model(out / "model.trgm", res.model);
  std::string curve = "epoch,training_loss,validation_accuracy\n";
  for (std::size_t e = 0; e < res.validation_accuracy.size(); ++e) {
    curve += std::to_string(e + 1) + "," + format_double(res.training_loss[e]) + "," +
             format_double(res.validation_accuracy[e]) + "\n";
  }
  write_text(out / "training.csv", curve);
  json summary = {{"best_epoch", res.best_epoch},
                  {"best_validation_accuracy", res.best_validation_accuracy},
                  {"train_accuracy", accuracy(res.model, tr)}};
  if (dd.has(Split::test)) summary["test_accuracy"] = accuracy(res.model, dd.load(Split::test, m));
  m.config = {{"architecture",
               {{"layer_sizes", arch.layer_sizes},
                {"dropout_rate", arch.dropout_rate},
                {"hidden_activation", std::string(to_string(arch.hidden_activation))}}},
              {"train",
               {{"epochs", tc.epochs},
                {"batch_size", tc.batch_size},
                {"learning_rate", tc.learning_rate},
                {"momentum", tc.momentum},
                {"validation_fraction", tc.validation_fraction},
                {"seed", tc.seed}}}};
  summary["manifest"] = m.to_json(false);
  write_text(out / "training.json", summary.dump(2) + "\n");
  finish(m, g);
}

struct ScoreOpts {
  std::string model, data, split = "test";
  std::vector<std::string> metrics = {"all"};
  KdeFlags kde;
  bool from_files = false;
  std::string probs, det_probs, labels, acts, train_acts, train_preds;
};

void run_mc_score_native(const ScoreOpts& o, const Globals& g) {
  RunManifest m = start_manifest("mc-score", g);
  const MLPModel base = load_model_input(o.model, m);
  const MLPModel model = mutant_model(base, g);
  const DataDir dd = DataDir::open(o.data);
  const Dataset train_set = dd.load(Split::train, m);
  const Dataset eval = dd.load(parse_split(o.split), m);
  ScoringConfig sc;
  sc.k = g.k;
  sc.seed = derive_seed(g.seed, "mc");
  sc.kde = o.kde.config();
  const auto wanted = parse_metric_list(o.metrics);
  const Scorer scorer(model, train_set.features, sc);
  const ScoreSet set = scorer.score(eval.features, wanted);
  const fs::path out(g.out_dir);
  json config = {{"source", "native"},
                 {"split", o.split},
                 {"k", sc.k},
                 {"dropout_rate", model.dropout_rate()},
                 {"mc_seed", sc.seed},
                 {"kde", kde_json(sc.kde)},
                 {"lsa_layer", "deepest-hidden"},
                 {"dsa_layers", "all-hidden"}};
  m.config = config;
  if (set.mc.mutants() > 0) write_prob_tensor(out / "probs.tns", set.mc);
  write_matrix(out / "det_probs.tns", set.det_probs);
  const ScoreFile f = to_score_file(set, eval.labels, config);
  write_scores(out / "scores.json", f, m);
  write_text(out / "scores.csv", scores_csv(f));
  finish(m, g);
}

void run_mc_score_files(const ScoreOpts& o, const Globals& g) {
  RunManifest m = start_manifest("mc-score", g);
  m.add_input(o.probs);
  m.add_input(o.det_probs);
  const ProbTensor mc = read_prob_tensor(o.probs);
  const Matrix det = read_matrix(o.det_probs);
  if (g.k_opt->count() > 0 && g.k != mc.mutants()) {
    throw UsageError("--k " + std::to_string(g.k) + " conflicts with the " + std::to_string(mc.mutants()) +
                     " mutants in " + o.probs);
  }
  if (det.rows() != mc.inputs() || det.cols() != mc.classes()) {
    throw std::runtime_error("deterministic probabilities are " + std::to_string(det.rows()) + "x" +
                             std::to_string(det.cols()) + " but the mutant tensor covers " +
                             std::to_string(mc.inputs()) + "x" + std::to_string(mc.classes()));
  }
  mc.validate();
  const auto wanted = parse_metric_list(o.metrics);
  auto want = [&](MetricId id) { return std::find(wanted.begin(), wanted.end(), id) != wanted.end(); };
  ScoreSet set;
  set.det_probs = det;
  set.predictions = argmax_rows(det);
  for (MetricId id : wanted) {
    switch (id) {
      case MetricId::MaxP: set.scores.push_back(max_p(det)); break;
      case MetricId::Var: set.scores.push_back(var_score(mc)); break;
      case MetricId::VarW: set.scores.push_back(var_weighted(mc, det)); break;
      case MetricId::KL: set.scores.push_back(kl_score(mc)); break;
      default: break;
    }
  }
  const KdeConfig kde = o.kde.config();
  const bool surprise = want(MetricId::LSA) || want(MetricId::DSA);
  const bool have_acts = !o.acts.empty() && !o.train_acts.empty();
  if (surprise && have_acts) {
    m.add_input(o.acts);
    m.add_input(o.train_acts);
    const Matrix acts = read_matrix(o.acts);
    const Matrix train_acts = read_matrix(o.train_acts);
    if (acts.rows() != mc.inputs()) throw std::runtime_error("activation rows do not match the mutant tensor");
    if (want(MetricId::LSA)) set.scores.push_back(lsa(train_acts, acts, kde));
    if (want(MetricId::DSA)) {
      if (o.train_preds.empty()) throw UsageError("DSA from files needs --train-preds");
      m.add_input(o.train_preds);
      set.scores.push_back(dsa(train_acts, read_labels(o.train_preds), acts, set.predictions));
    }
  } else if (surprise && o.metrics != std::vector<std::string>{"all"}) {
    throw UsageError("LSA/DSA from files need --acts and --train-acts");
  }
  std::optional<std::vector<ClassIndex>> labels;
  if (!o.labels.empty()) {
    m.add_input(o.labels);
    labels = read_labels(o.labels);
    if (labels->size() != mc.inputs()) throw std::runtime_error("label count does not match the mutant tensor");
  }
  json config = {{"source", "files"}, {"k", mc.mutants()}, {"kde", kde_json(kde)}};
  m.config = config;
  const ScoreFile f = to_score_file(set, labels, config);
  const fs::path out(g.out_dir);
  write_scores(out / "scores.json", f, m);
  write_text(out / "scores.csv", scores_csv(f));
  finish(m, g);
}

ScoreFile load_scores_input(const std::string& path, RunManifest& m) {
  m.add_input(path);
  ScoreFile f = read_scores(path);
  if (!f.labels) throw UsageError(path + " has no labels; correctness cannot be derived");
  return f;
}

struct CorrelateOpts {
  std::string scores;
  std::size_t cap = kDefaultDistanceCorrelationCap;
};

void run_correlate(const CorrelateOpts& o, const Globals& g) {
  RunManifest m = start_manifest("correlate", g);
  const ScoreFile f = load_scores_input(o.scores, m);
  m.config = {{"dcor_cap", o.cap}, {"scores_config", f.config}};
  const CorrelationReport r = correlate(f.scores, *f.correct(), o.cap);
  const fs::path out(g.out_dir);
  write_report(out / "correlation.json", r, ReportFormat::json, m);
  write_report(out / "correlation.csv", r, ReportFormat::csv, m);
  finish(m, g);
}

struct CurveOpts {
  std::string scores;
  std::vector<std::string> metrics = {"MaxP"};
};

void run_curve(const CurveOpts& o, const Globals& g) {
  RunManifest m = start_manifest("curve", g);
  const ScoreFile f = load_scores_input(o.scores, m);
  const auto correct = *f.correct();
  m.config = {{"metrics", o.metrics}, {"scores_config", f.config}};
  const fs::path out(g.out_dir);
  for (MetricId id : parse_metric_list(o.metrics)) {
    const DecileCurve c = decile_curve(f.get(id), correct);
    const std::string stem = "curve_" + std::string(to_string(id));
    write_report(out / (stem + ".json"), c, ReportFormat::json, m);
    write_report(out / (stem + ".csv"), c, ReportFormat::csv, m);
  }
  finish(m, g);
}

struct AttackOpts {
  std::string model, data, split = "test";
  std::size_t n = 100;
  double eps = 0.01;
  std::size_t max_iters = 50;
  KdeFlags kde;
};

FgsmConfig fgsm_config(double eps, std::size_t max_iters) {
  if (!(eps > 0.0)) throw UsageError("--eps must be > 0");
  FgsmConfig c;
  c.eps = eps;
  c.max_iters = max_iters;
  return c;
}

void run_attack(const AttackOpts& o, const Globals& g) {
  RunManifest m = start_manifest("attack", g);
  const MLPModel base = load_model_input(o.model, m);
  const MLPModel model = mutant_model(base, g);
  const DataDir dd = DataDir::open(o.data);
  const Dataset train_set = dd.load(Split::train, m);
  const Dataset eval = dd.load(parse_split(o.split), m);
  const FgsmConfig fc = fgsm_config(o.eps, o.max_iters);
  ScoringConfig sc;
  sc.k = g.k;
  sc.seed = derive_seed(g.seed, "mc");
  sc.kde = o.kde.config();
  const auto rows = attack_targets(model, eval, o.n, g.seed);
  auto traces = fgsm_attack_rows(model, eval, rows, fc);
  const Scorer scorer(model, train_set.features, sc);
  score_traces(traces, scorer);
  m.config = {{"split", o.split},
              {"n", o.n},
              {"targets", "correctly classified rows, seeded shuffle"},
              {"fgsm", {{"eps", fc.eps}, {"max_iters", fc.max_iters}, {"clip", {0.0, 1.0}}}},
              {"k", sc.k},
              {"dropout_rate", model.dropout_rate()},
              {"mc_seed", sc.seed},
              {"kde", kde_json(sc.kde)}};
  const fs::path out(g.out_dir);
  write_traces(out / "traces.tns", out / "traces.json", traces, m);

  std::string csv = "trace,original_index,iteration,predicted";
  for (MetricId id : kAllMetrics) csv += "," + std::string(to_string(id));
  csv += "\n";
  const std::size_t successful =
      static_cast<std::size_t>(std::count_if(traces.begin(), traces.end(), [](const AttackTrace& t) { return t.success; }));
  json summary = {{"kind", "attack_trends"}, {"traces", traces.size()}, {"successful", successful}};
  if (!traces.empty()) {
    const TrendTable table = trace_metric_trends(traces, scorer);
    for (const auto& r : table.rows) {
      csv += std::to_string(r.trace) + "," + std::to_string(traces[r.trace].original_index) + "," +
             std::to_string(r.iteration) + "," + std::to_string(r.predicted);
      for (double v : r.scores) csv += "," + (std::isnan(v) ? std::string("invalid") : format_double(v));
      csv += "\n";
    }
    json med = json::object();
    for (std::size_t i = 0; i < kAllMetrics.size(); ++i) {
      med[std::string(to_string(kAllMetrics[i]))] = {{"median_tau", optional_json(table.median_tau[i])},
                                                     {"defined", table.defined_count[i]}};
    }
    summary["trend"] = med;
  }
  summary["manifest"] = m.to_json(false);
  write_text(out / "trends.csv", csv);
  write_text(out / "trends.json", summary.dump(2) + "\n");
  finish(m, g);
}

struct MixOpts {
  std::string model, data, split = "test", mode = "final-only";
  std::size_t n_traces = 0;
  double eps = 0.01;
  std::size_t max_iters = 50;
  bool include_real = true;
  CLI::Option* include_opt = nullptr;
  std::size_t cap = kDefaultDistanceCorrelationCap;
  KdeFlags kde;
};

void run_mix_correlate(const MixOpts& o, const Globals& g) {
  RunManifest m = start_manifest("mix-correlate", g);
  const MLPModel base = load_model_input(o.model, m);
  const MLPModel model = mutant_model(base, g);
  const DataDir dd = DataDir::open(o.data);
  const Dataset train_set = dd.load(Split::train, m);
  const Dataset eval = dd.load(parse_split(o.split), m);
  const MixMode mode = parse_mix_mode(o.mode);
  // Defaults follow the two protocols: real rows plus n/2 final iterates, or
  // 100 traces contributing penultimate and final iterates only.
  const std::size_t n_traces =
      o.n_traces > 0 ? o.n_traces : (mode == MixMode::final_only ? eval.size() / 2 : std::size_t{100});
  const bool include_real = o.include_opt->count() > 0 ? o.include_real : mode == MixMode::final_only;
  const FgsmConfig fc = fgsm_config(o.eps, o.max_iters);
  ScoringConfig sc;
  sc.k = g.k;
  sc.seed = derive_seed(g.seed, "mc");
  sc.kde = o.kde.config();
  const Scorer scorer(model, train_set.features, sc);
  const MixEvaluation mix = mix_protocol(model, scorer, eval, n_traces, mode, include_real, fc, g.seed, o.cap);
  for (const auto& w : mix.mixed.warnings) std::cerr << json({{"warning", w}}).dump() << "\n";
  json config = {{"split", o.split},
                 {"mode", std::string(to_string(mode))},
                 {"n_traces", n_traces},
                 {"include_real", include_real},
                 {"fgsm", {{"eps", fc.eps}, {"max_iters", fc.max_iters}, {"clip", {0.0, 1.0}}}},
                 {"k", sc.k},
                 {"dropout_rate", model.dropout_rate()},
                 {"mc_seed", sc.seed},
                 {"kde", kde_json(sc.kde)},
                 {"dcor_cap", o.cap}};
  m.config = config;
  const fs::path out(g.out_dir);
  write_report(out / "correlation.json", mix.eval.report, ReportFormat::json, m);
  write_report(out / "correlation.csv", mix.eval.report, ReportFormat::csv, m);
  write_scores(out / "scores.json", to_score_file(mix.eval.set, mix.mixed.labels, config), m);
  json tags = json::array();
  for (auto t : mix.mixed.tags) tags.push_back(t == SourceTag::real ? "real" : "adversarial");
  json mixed = {{"kind", "mixed_set"},
                {"rows", mix.mixed.size()},
                {"adversarial_rows", mix.mixed.adversarial_count()},
                {"traces", mix.traces},
                {"successful_traces", mix.successful},
                {"warnings", mix.mixed.warnings},
                {"tags", tags},
                {"provenance", mix.mixed.provenance},
                {"manifest", m.to_json(false)}};
  write_text(out / "mixed.json", mixed.dump(2) + "\n");
  finish(m, g);
}

struct RetrainOpts {
  std::string data, policy = "Var+MaxP";
  std::size_t reps = 5, initial_size = 1000, batch_size = 500, epochs = 50;
  std::vector<std::size_t> hidden = {64, 32};
  std::string activation = "relu";
  double lr = 0.01, momentum = 0.9;
  std::size_t train_batch = 32;
  bool warm_start = false;
  KdeFlags kde;
};

void run_retrain(const RetrainOpts& o, const Globals& g) {
  RunManifest m = start_manifest("retrain-sim", g);
  const DataDir dd = DataDir::open(o.data);
  const Dataset pool = dd.load(Split::pool, m);
  const Dataset test = dd.load(Split::test, m);
  RetrainConfig cfg;
  cfg.initial_size = o.initial_size;
  cfg.batch_size = o.batch_size;
  cfg.epochs_per_iteration = o.epochs;
  cfg.repetitions = o.reps;
  cfg.hidden_layers = o.hidden;
  cfg.dropout_rate = g.dropout_rate;
  cfg.hidden_activation = parse_activation(o.activation);
  cfg.train.learning_rate = o.lr;
  cfg.train.momentum = o.momentum;
  cfg.train.batch_size = o.train_batch;
  cfg.scoring.k = g.k;
  cfg.scoring.kde = o.kde.config();
  cfg.seed = g.seed;
  cfg.warm_start = o.warm_start;
  try {
    cfg.policy = SelectionPolicy::parse(o.policy, derive_seed(g.seed, "policy"));
    cfg.validate(pool.size());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const RetrainTrace trace = retrain_loop(pool, test, cfg);
  m.config = {{"policy", trace.policy},
              {"initial_size", cfg.initial_size},
              {"batch_size", cfg.batch_size},
              {"epochs_per_iteration", cfg.epochs_per_iteration},
              {"repetitions", cfg.repetitions},
              {"hidden_layers", cfg.hidden_layers},
              {"dropout_rate", cfg.dropout_rate},
              {"hidden_activation", std::string(to_string(cfg.hidden_activation))},
              {"learning_rate", cfg.train.learning_rate},
              {"momentum", cfg.train.momentum},
              {"train_batch_size", cfg.train.batch_size},
              {"validation_fraction", cfg.train.validation_fraction},
              {"k", cfg.scoring.k},
              {"kde", kde_json(cfg.scoring.kde)},
              {"warm_start", cfg.warm_start}};
  const fs::path out(g.out_dir);
  write_report(out / "trace.json", trace, ReportFormat::json, m);
  write_report(out / "trace.csv", trace, ReportFormat::csv, m);
  write_text(out / "epochs.csv", epoch_curves_csv(trace));
  finish(m, g);
}

struct ReportOpts {
  std::vector<std::string> inputs;
};

/// Collects correlation, curve, trend and retraining results from earlier runs
/// into one markdown summary and one JSON document.
void run_report(const ReportOpts& o, const Globals& g) {
  RunManifest m = start_manifest("report", g);
  json all = json::array();
  std::string md = "# triage report\n";
  for (const auto& dir : o.inputs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".json" && e.path().filename() != "manifest.json") {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      json j;
      try {
        j = json::parse(read_text(p));
      } catch (const json::exception&) {
        continue;
      }
      const std::string kind = j.value("kind", std::string{});
      if (kind.empty()) continue;
      m.add_input(p);
      j.erase("manifest");
      md += "\n## " + p.generic_string() + "\n\n";
      if (kind == "correlation") {
        md += "accuracy " + format_double(j["accuracy"].get<double>()) + ", n = " + std::to_string(j["n"].get<std::size_t>()) +
              "\n\n| metric | kendall | distance | pearson |\n|---|---|---|---|\n";
        for (const auto& e : j["metrics"]) {
          auto cell = [&](const char* k) { return e[k].is_null() ? std::string("degenerate") : format_double(e[k].get<double>()); };
          md += "| " + e["metric"].get<std::string>() + " | " + cell("kendall") + " | " + cell("distance") + " | " +
                cell("pearson") + " |\n";
        }
      } else if (kind == "decile_curve") {
        md += "metric " + j["metric"].get<std::string>() + "\n\n| fraction | accuracy |\n|---|---|\n";
        for (std::size_t i = 0; i < j["fractions"].size(); ++i) {
          md += "| " + format_double(j["fractions"][i].get<double>()) + " | " +
                format_double(j["cumulative_accuracy"][i].get<double>()) + " |\n";
        }
      } else if (kind == "retrain_trace") {
        md += "policy " + j["policy"].get<std::string>() + "\n\n| iteration | median accuracy |\n|---|---|\n";
        for (std::size_t i = 0; i < j["median_accuracy"].size(); ++i) {
          md += "| " + std::to_string(i) + " | " + format_double(j["median_accuracy"][i].get<double>()) + " |\n";
        }
        j.erase("repetitions");
      } else if (kind == "attack_trends") {
        md += std::to_string(j["successful"].get<std::size_t>()) + " of " + std::to_string(j["traces"].get<std::size_t>()) +
              " traces flipped\n";
        if (j.contains("trend")) {
          md += "\n| metric | median tau vs iteration |\n|---|---|\n";
          for (const auto& [name, v] : j["trend"].items()) {
            md += "| " + name + " | " +
                  (v["median_tau"].is_null() ? std::string("undefined") : format_double(v["median_tau"].get<double>())) +
                  " |\n";
          }
        }
      } else {
        md += "kind " + kind + "\n";
      }
      all.push_back({{"file", p.generic_string()}, {"result", j}});
    }
  }
  m.config = {{"inputs", o.inputs}};
  const fs::path out(g.out_dir);
  write_text(out / "report.md", md);
  json doc = {{"kind", "report"}, {"results", all}, {"manifest", m.to_json(false)}};
  write_text(out / "report.json", doc.dump(2) + "\n");
  finish(m, g);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-based test triage for classifiers"};
  app.set_version_flag("--version", std::string(TRIAGE_VERSION));
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);

  Globals g;
  app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
  g.k_opt = app.add_option("--k", g.k, "Number of dropout mutants")->check(CLI::Range(2, 100000))->capture_default_str();
  g.rate_opt = app.add_option("--dropout-rate", g.dropout_rate, "Dropout rate r")
                   ->check(CLI::Range(0.0, 0.999999))
                   ->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker thread cap (0 = all cores)")->capture_default_str();

  GenDataOpts gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the blob dataset or import IDX files");
  c_gen->add_option("--classes", gd.classes)->capture_default_str();
  c_gen->add_option("--dim", gd.dim)->capture_default_str();
  c_gen->add_option("--points-per-class", gd.points_per_class)->capture_default_str();
  c_gen->add_option("--sigma", gd.sigma)->capture_default_str();
  c_gen->add_option("--overlap", gd.overlap, "Share of points drawn between two class centres")->capture_default_str();
  c_gen->add_option("--center-margin", gd.center_margin)->capture_default_str();
  c_gen->add_option("--train-size", gd.train_size)->capture_default_str();
  c_gen->add_option("--test-size", gd.test_size)->capture_default_str();
  c_gen->add_option("--pool-size", gd.pool_size)->capture_default_str();
  c_gen->add_option("--idx-train", gd.idx_train, "FEATURES LABELS")->expected(2)->check(CLI::ExistingFile);
  c_gen->add_option("--idx-test", gd.idx_test, "FEATURES LABELS")->expected(2)->check(CLI::ExistingFile);
  c_gen->add_option("--idx-pool", gd.idx_pool, "FEATURES LABELS")->expected(2)->check(CLI::ExistingFile);
  c_gen->add_option("--idx-classes", gd.idx_classes, "Class count for imported labels");

  TrainOpts to;
  auto* c_train = app.add_subcommand("train", "Train the classifier on the train split");
  c_train->add_option("--data", to.data)->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--hidden", to.hidden)->delimiter(',')->capture_default_str();
  c_train->add_option("--activation", to.activation)->check(CLI::IsMember({"relu", "tanh"}))->capture_default_str();
  c_train->add_option("--epochs", to.epochs)->capture_default_str();
  c_train->add_option("--batch-size", to.batch_size)->capture_default_str();
  c_train->add_option("--lr", to.lr)->capture_default_str();
  c_train->add_option("--momentum", to.momentum)->capture_default_str();
  c_train->add_option("--validation-fraction", to.validation_fraction)->capture_default_str();

  ScoreOpts so;
  auto* c_score = app.add_subcommand("mc-score", "Mutant tensor and all six scores for one split");
  auto* s_model = c_score->add_option("--model", so.model)->check(CLI::ExistingFile);
  auto* s_data = c_score->add_option("--data", so.data)->check(CLI::ExistingDirectory);
  c_score->add_option("--split", so.split)->check(CLI::IsMember({"train", "test", "pool"}))->capture_default_str();
  c_score->add_option("--metrics", so.metrics, "Subset of MaxP,Var,VarW,KL,LSA,DSA or all")
      ->delimiter(',')
      ->capture_default_str();
  so.kde.add(c_score);
  auto* s_files = c_score->add_flag("--from-files", so.from_files, "Score exported tensors instead of a model");
  c_score->add_option("--probs", so.probs, "k x n x C mutant probabilities")->check(CLI::ExistingFile);
  c_score->add_option("--det-probs", so.det_probs, "n x C deterministic probabilities")->check(CLI::ExistingFile);
  c_score->add_option("--labels", so.labels)->check(CLI::ExistingFile);
  c_score->add_option("--acts", so.acts, "n x m activations of the scored inputs")->check(CLI::ExistingFile);
  c_score->add_option("--train-acts", so.train_acts)->check(CLI::ExistingFile);
  c_score->add_option("--train-preds", so.train_preds)->check(CLI::ExistingFile);
  s_files->excludes(s_model)->excludes(s_data);

  CorrelateOpts co;
  auto* c_corr = app.add_subcommand("correlate", "Correlate scores with correctness");
  c_corr->add_option("--scores", co.scores)->required()->check(CLI::ExistingFile);
  c_corr->add_option("--dcor-cap", co.cap)->capture_default_str();

  CurveOpts cu;
  auto* c_curve = app.add_subcommand("curve", "Cumulative accuracy over uncertainty deciles");
  c_curve->add_option("--scores", cu.scores)->required()->check(CLI::ExistingFile);
  c_curve->add_option("--metric", cu.metrics, "Metric name(s) or all")->delimiter(',')->capture_default_str();

  AttackOpts ao;
  auto* c_attack = app.add_subcommand("attack", "Iterative FGSM traces with per-iterate scores");
  c_attack->add_option("--model", ao.model)->required()->check(CLI::ExistingFile);
  c_attack->add_option("--data", ao.data)->required()->check(CLI::ExistingDirectory);
  c_attack->add_option("--split", ao.split)->check(CLI::IsMember({"train", "test", "pool"}))->capture_default_str();
  c_attack->add_option("--n", ao.n, "Number of correctly classified inputs to attack")->capture_default_str();
  c_attack->add_option("--eps", ao.eps)->capture_default_str();
  c_attack->add_option("--max-iters", ao.max_iters)->capture_default_str();
  ao.kde.add(c_attack);

  MixOpts mo;
  auto* c_mix = app.add_subcommand("mix-correlate", "Correlations on real plus adversarial inputs");
  c_mix->add_option("--model", mo.model)->required()->check(CLI::ExistingFile);
  c_mix->add_option("--data", mo.data)->required()->check(CLI::ExistingDirectory);
  c_mix->add_option("--split", mo.split)->check(CLI::IsMember({"train", "test", "pool"}))->capture_default_str();
  c_mix->add_option("--mode", mo.mode)
      ->check(CLI::IsMember({"final-only", "final-plus-penultimate"}))
      ->capture_default_str();
  c_mix->add_option("--n-traces", mo.n_traces, "0 = half the split (final-only) or 100");
  mo.include_opt = c_mix->add_flag("--include-real,!--adversarial-only", mo.include_real,
                                   "Keep the real rows (default: only in final-only mode)");
  c_mix->add_option("--eps", mo.eps)->capture_default_str();
  c_mix->add_option("--max-iters", mo.max_iters)->capture_default_str();
  c_mix->add_option("--dcor-cap", mo.cap)->capture_default_str();
  mo.kde.add(c_mix);

  RetrainOpts ro;
  auto* c_retrain = app.add_subcommand("retrain-sim", "Budgeted selection and retraining simulation");
  c_retrain->add_option("--data", ro.data)->required()->check(CLI::ExistingDirectory);
  c_retrain->add_option("--policy", ro.policy, "random, a metric, or metric+tiebreaker (e.g. Var+MaxP)")
      ->capture_default_str();
  c_retrain->add_option("--reps", ro.reps)->capture_default_str();
  c_retrain->add_option("--initial-size", ro.initial_size)->capture_default_str();
  c_retrain->add_option("--batch-size", ro.batch_size)->capture_default_str();
  c_retrain->add_option("--epochs", ro.epochs)->capture_default_str();
  c_retrain->add_option("--hidden", ro.hidden)->delimiter(',')->capture_default_str();
  c_retrain->add_option("--activation", ro.activation)->check(CLI::IsMember({"relu", "tanh"}))->capture_default_str();
  c_retrain->add_option("--lr", ro.lr)->capture_default_str();
  c_retrain->add_option("--momentum", ro.momentum)->capture_default_str();
  c_retrain->add_option("--train-batch-size", ro.train_batch)->capture_default_str();
  c_retrain->add_flag("--warm-start", ro.warm_start, "Continue from the previous iteration's weights");
  ro.kde.add(c_retrain);

  ReportOpts rp;
  auto* c_report = app.add_subcommand("report", "Summarise result directories");
  c_report->add_option("--input", rp.inputs, "Result directories")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  try {
    set_max_threads(g.threads);
    if (c_gen->parsed()) run_gen_data(gd, g);
    if (c_train->parsed()) run_train(to, g);
    if (c_score->parsed()) {
      if (so.from_files) {
        if (so.probs.empty() || so.det_probs.empty()) throw UsageError("--from-files needs --probs and --det-probs");
        run_mc_score_files(so, g);
      } else {
        if (so.model.empty() || so.data.empty()) throw UsageError("mc-score needs --model and --data (or --from-files)");
        run_mc_score_native(so, g);
      }
    }
    if (c_corr->parsed()) run_correlate(co, g);
    if (c_curve->parsed()) run_curve(cu, g);
    if (c_attack->parsed()) run_attack(ao, g);
    if (c_mix->parsed()) run_mix_correlate(mo, g);
    if (c_retrain->parsed()) run_retrain(ro, g);
    if (c_report->parsed()) run_report(rp, g);
  } catch (const UsageError& e) {
    emit_error("usage", e.what());
    return 2;
  } catch (const IoError& e) {
    emit_error("io", e.what(), std::string(to_string(e.code())));
    return 1;
  } catch (const std::exception& e) {
    emit_error("runtime", e.what());
    return 1;
  }
  return 0;
}
