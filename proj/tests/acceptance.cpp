// Desk-scale acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "support.hpp"
#include "triage/io.hpp"
#include "triage/pipeline.hpp"

using namespace triage;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kSeeds = 5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int shell(const std::string& cmd, std::string* output = nullptr) {
  FILE* p = popen((cmd + " 2>&1").c_str(), "r");
  if (p == nullptr) return -1;
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) out.append(buf, n);
  const int status = pclose(p);
  if (output != nullptr) *output = out;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// one trained desk model per seed, shared by A2-A5 and A9
struct SeedRun {
  BlobSplits data;
  MLPModel model;
  std::unique_ptr<Scorer> scorer;  // points at `model`, so runs never move
  Evaluation eval;

  explicit SeedRun(std::uint64_t s)
      : data(make_blobs(desk_blob_spec(s))), model(train(data.train, desk_architecture(20, 10), [&] {
          TrainConfig tc;
          tc.seed = derive_seed(s, "train");
          return tc;
        }()).model) {
    ScoringConfig sc;
    sc.seed = derive_seed(s, "mc");
    scorer = std::make_unique<Scorer>(model, data.train.features, sc);
    eval = evaluate(*scorer, data.test.features, data.test.labels);
  }
};

const std::deque<SeedRun>& seed_runs() {
  static const std::deque<SeedRun> runs = [] {
    std::deque<SeedRun> out;
    for (std::uint64_t s = 0; s < kSeeds; ++s) out.emplace_back(s);
    return out;
  }();
  return runs;
}

double abs_tau(const CorrelationReport& r, MetricId m) {
  const auto t = r.get(m).kendall;
  return t ? std::abs(*t) : 0.0;
}

double median_tau(const std::vector<CorrelationReport>& reports, MetricId m) {
  std::vector<double> v;
  for (const auto& r : reports) v.push_back(r.get(m).kendall.value_or(0.0));
  return median(v);
}

double median_abs_tau(const std::vector<CorrelationReport>& reports, MetricId m) {
  std::vector<double> v;
  for (const auto& r : reports) v.push_back(abs_tau(r, m));
  return median(v);
}

std::vector<CorrelationReport> real_reports() {
  std::vector<CorrelationReport> out;
  for (const auto& r : seed_runs()) out.push_back(r.eval.report);
  return out;
}

constexpr MetricId kUncertainty[] = {MetricId::MaxP, MetricId::Var, MetricId::VarW, MetricId::KL};

Outcome a1() {
  // every example and oracle comparison lives in the unit suite; the CLI cases are A7's business
  std::string out;
  const int rc = shell(std::string("\"") + TRIAGE_TESTS_PATH + "\" --gtest_brief=1 --gtest_filter=-Cli.*", &out);
  const auto at = out.rfind("[==========] ");
  std::string summary = at == std::string::npos ? "no summary" : out.substr(at + 13, out.find('\n', at) - at - 13);
  return {rc == 0, summary + (rc == 0 ? "" : "\n" + out)};
}

Outcome a2() {
  const auto reports = real_reports();
  std::vector<double> acc;
  for (const auto& r : reports) acc.push_back(r.accuracy);
  const double maxp = median_tau(reports, MetricId::MaxP), kl = median_tau(reports, MetricId::KL);
  const double var = median_tau(reports, MetricId::Var), varw = median_tau(reports, MetricId::VarW);
  const double lsa = median_tau(reports, MetricId::LSA), dsa = median_tau(reports, MetricId::DSA);
  const double floor = std::min({std::abs(maxp), std::abs(kl), std::abs(var), std::abs(varw)});
  const bool pass = kl >= 0.15 && maxp >= 0.15 && var <= -0.15 && varw <= -0.15 && std::abs(lsa) < floor &&
                    std::abs(dsa) < floor;
  return {pass, "accuracy " + fmt(median(acc)) + "; median tau MaxP " + fmt(maxp) + " Var " + fmt(var) + " VarW " +
                    fmt(varw) + " KL " + fmt(kl) + " LSA " + fmt(lsa) + " DSA " + fmt(dsa)};
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return rank;
}

Outcome a3() {
  bool pass = true, endpoint = true;
  std::string detail = "min rank agreement";
  for (MetricId m : kUncertainty) {
    double worst = 1.0;
    for (const auto& r : seed_runs()) {
      const auto& s = r.eval.set.get(m);
      const auto curve = decile_curve(s, r.eval.correct);
      std::vector<double> index(10);
      std::iota(index.begin(), index.end(), 1.0);
      const std::vector<double> acc(curve.cumulative_accuracy.begin(), curve.cumulative_accuracy.end());
      const auto agree = pearson(average_ranks(index), average_ranks(acc));
      const double a = agree.value_or(0.0);
      worst = std::min(worst, a);
      if (a < 0.8) pass = false;
      if (curve.cumulative_accuracy.back() != r.eval.report.accuracy) endpoint = false;
    }
    detail += " " + std::string(to_string(m)) + " " + fmt(worst, 3);
  }
  return {pass && endpoint, detail + " over " + std::to_string(kSeeds) + " seeds; final point equals accuracy: " +
                                (endpoint ? "yes" : "no")};
}

// attacks shuffled correctly classified rows until `want` traces succeed
std::vector<AttackTrace> successful_traces(const SeedRun& r, std::size_t want, std::uint64_t seed) {
  const auto pred = predict_classes(r.model, r.data.test.features);
  Rng rng(derive_seed(seed, "mix-targets"));
  std::vector<std::size_t> candidates;
  for (std::size_t i : seeded_shuffle(r.data.test.size(), rng)) {
    if (pred[i] == r.data.test.labels[i]) candidates.push_back(i);
  }
  std::vector<AttackTrace> out;
  for (std::size_t start = 0; start < candidates.size() && out.size() < want; start += 100) {
    const std::size_t stop = std::min(candidates.size(), start + 100);
    const std::vector<std::size_t> rows(candidates.begin() + start, candidates.begin() + stop);
    for (auto& t : fgsm_attack_rows(r.model, r.data.test, rows, FgsmConfig{})) {
      if (t.success && out.size() < want) out.push_back(std::move(t));
    }
  }
  return out;
}

Outcome a4() {
  const auto real = real_reports();
  std::vector<CorrelationReport> mixed;
  std::size_t adv = 0;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const auto& r = seed_runs()[s];
    const auto traces = successful_traces(r, r.data.test.size() / 2, derive_seed(s, "a4"));
    adv += traces.size();
    const auto set = build_mixed_set(r.data.test, traces, MixMode::final_only, true);
    mixed.push_back(evaluate(*r.scorer, set.inputs, set.labels).report);
  }
  bool pass = adv == kSeeds * 500;
  std::string detail = "median |tau| real -> mixed:";
  for (MetricId m : kUncertainty) {
    const double before = median_abs_tau(real, m), after = median_abs_tau(mixed, m);
    pass = pass && after > before;
    detail += " " + std::string(to_string(m)) + " " + fmt(before) + "->" + fmt(after);
  }
  return {pass, detail + "; adversarial rows " + std::to_string(adv)};
}

Outcome a5() {
  const auto real = real_reports();
  std::vector<CorrelationReport> adv;
  std::size_t rows = 0;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const auto& r = seed_runs()[s];
    const auto mix = mix_protocol(r.model, *r.scorer, r.data.test, 100, MixMode::final_plus_penultimate, false,
                                  FgsmConfig{}, derive_seed(s, "a5"));
    rows += mix.mixed.size();
    adv.push_back(mix.eval.report);
  }
  const double before = median_abs_tau(real, MetricId::MaxP), after = median_abs_tau(adv, MetricId::MaxP);
  std::string detail = "MaxP median |tau| " + fmt(before) + " -> " + fmt(after) + " on " + std::to_string(rows) +
                       " adversarial rows; others:";
  for (MetricId m : {MetricId::Var, MetricId::VarW, MetricId::KL, MetricId::LSA, MetricId::DSA}) {
    detail += " " + std::string(to_string(m)) + " " + fmt(median_abs_tau(adv, m));
  }
  return {after < before, detail};
}

Outcome a6() {
  const BlobSplits data = make_blobs(desk_blob_spec(0));
  std::map<std::string, double> gain;
  std::string detail = "median gain to mid-budget:";
  for (const char* policy : {"random", "Var+MaxP", "KL+MaxP", "LSA", "DSA"}) {
    RetrainConfig cfg;  // N0 1000, B 500, E 50, R 5
    cfg.policy = SelectionPolicy::parse(policy, derive_seed(0, "random-policy"));
    cfg.seed = derive_seed(0, "retrain");
    cfg.scoring.k = 50;
    const auto trace = retrain_loop(data.pool, data.test, cfg);
    const std::size_t mid = trace.mid_budget_iteration();
    std::vector<double> g;
    for (const auto& rep : trace.repetitions) g.push_back(rep.iterations[mid].test_accuracy - rep.iterations[0].test_accuracy);
    gain[policy] = median(g);
    detail += " " + std::string(policy) + " " + fmt(gain[policy]);
  }
  const double random = gain["random"];
  const double var = gain["Var+MaxP"], kl = gain["KL+MaxP"];
  const double surprise = std::max(gain["LSA"], gain["DSA"]);
  const bool pass = var >= 1.2 * random && kl >= 1.2 * random && var > surprise && kl > surprise && random > 0.0;
  return {pass, detail + "; ratios Var+MaxP " + fmt(var / random, 3) + " KL+MaxP " + fmt(kl / random, 3) +
                    " (need >= 1.2)"};
}

// all outputs of a run directory, manifests compared without their volatile block
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).string();
    std::string body = read_text(e.path());
    if (e.path().filename() == "manifest.json") {
      json j = json::parse(body);
      j.erase("volatile");
      body = j.dump();
    }
    out[rel] = std::move(body);
  }
  return out;
}

Outcome a7() {
  testing_support::TempDir tmp("acceptance");
  const std::vector<std::string> steps = {
      "--seed 3 --out-dir data gen-data",
      "--seed 3 --out-dir model train --data data --epochs 5",
      "--seed 3 --out-dir scores mc-score --model model/model.trgm --data data",
      "--out-dir corr correlate --scores scores/scores.json",
      "--out-dir curve curve --scores scores/scores.json --metric all",
      "--seed 3 --out-dir attack attack --model model/model.trgm --data data --n 20",
      "--seed 3 --out-dir mix mix-correlate --model model/model.trgm --data data --n-traces 100",
      "--seed 3 --out-dir retrain retrain-sim --data data --policy Var+MaxP --reps 2 --initial-size 1000"
      " --batch-size 2000 --epochs 2",
      "--out-dir report report --input corr curve mix retrain",
  };
  const std::pair<std::string, std::string> runs[] = {{"t1", "1"}, {"t1again", "1"}, {"t8", "8"}};
  for (const auto& [name, threads] : runs) {
    fs::create_directories(tmp / name);
    for (const auto& step : steps) {
      std::string out;
      const std::string cmd = "cd \"" + (tmp / name).string() + "\" && \"" + TRIAGE_CLI_PATH + "\" --threads " +
                              threads + " " + step;
      if (shell(cmd, &out) != 0) return {false, "command failed: " + step + "\n" + out};
    }
  }
  const auto base = snapshot(tmp / "t1");
  std::size_t compared = 0;
  for (const char* other : {"t1again", "t8"}) {
    const auto snap = snapshot(tmp / other);
    if (snap.size() != base.size()) return {false, std::string(other) + " produced a different file set"};
    for (const auto& [rel, body] : base) {
      const auto it = snap.find(rel);
      if (it == snap.end() || it->second != body) return {false, rel + " differs in " + other};
      ++compared;
    }
  }
  return {true, std::to_string(steps.size()) + " commands, " + std::to_string(compared) +
                    " file comparisons byte-identical (repeat and threads 1 vs 8)"};
}

Outcome a8() {
  Rng rng(derive_seed(8, "a8"));
  double kendall_err = 0, dcor_err = 0, dsa_err = 0;
  std::size_t undefined_mismatch = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(299);
    std::vector<double> x(n), y(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::round(rng.normal() * 5.0) / 5.0;  // ties
      y[i] = rng.bernoulli(0.8) ? 1.0 : 0.0;
      z[i] = rng.normal();
    }
    const auto kt = kendall_tau_b(x, y), ko = oracle::kendall_tau_b(x, y);
    if (kt.has_value() != ko.has_value()) ++undefined_mismatch;
    if (kt && ko) kendall_err = std::max(kendall_err, std::abs(*kt - *ko));
    for (const auto& other : {y, z}) {
      const auto dt = distance_correlation(x, other), dn = oracle::distance_correlation(x, other);
      if (dt.has_value() != dn.has_value()) ++undefined_mismatch;
      if (dt && dn) dcor_err = std::max(dcor_err, std::abs(*dt - *dn));
    }

    const std::size_t m = 2 + rng.below(299), q = 1 + rng.below(50), d = 1 + rng.below(16);
    const std::size_t classes = 2 + rng.below(4);
    Matrix train(m, d), test(q, d);
    for (float& v : train.data()) v = static_cast<float>(rng.normal());
    for (float& v : test.data()) v = static_cast<float>(rng.normal());
    std::vector<ClassIndex> tp(m), sp(q);
    for (auto& c : tp) c = static_cast<ClassIndex>(rng.below(classes));
    for (auto& c : sp) c = static_cast<ClassIndex>(rng.below(classes));
    const auto s = dsa(train, tp, test, sp);
    for (std::size_t i = 0; i < q; ++i) {
      const double want = oracle::dsa_one(train, tp, test.row(i), sp[i]);
      if (std::isnan(want) != !s.is_valid(i)) ++undefined_mismatch;
      if (s.is_valid(i) && !std::isnan(want)) dsa_err = std::max(dsa_err, std::abs(s.values[i] - want));
    }
  }
  const bool pass = undefined_mismatch == 0 && kendall_err <= 1e-12 && dcor_err <= 1e-9 && dsa_err <= 1e-12;
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << "max error kendall " << kendall_err << " (1e-12) dcor "
     << dcor_err << " (1e-9) dsa " << dsa_err << " (1e-12); definedness mismatches " << undefined_mismatch;
  return {pass, os.str()};
}

Outcome a9() {
  // random test points; a point whose stencil crosses a ReLU kink is replaced, since the
  // finite difference there is not a derivative of either linear piece
  const auto& r = seed_runs()[0];
  Rng rng(derive_seed(9, "a9"));
  double worst = 0.0, worst_skipped = 0.0;
  std::size_t used = 0, skipped = 0;
  while (used < 20 && used + skipped < 1000) {
    const std::size_t row = rng.below(r.data.test.size());
    const auto x = r.data.test.features.row(row);
    const ClassIndex label = r.data.test.labels[row];
    const double err = oracle::max_relative_error(input_gradient(r.model, x, label),
                                                  oracle::numeric_gradient(r.model, x, label, 1e-3));
    if (oracle::stencil_crosses_kink(r.model, x, 1e-3)) {
      ++skipped;
      worst_skipped = std::max(worst_skipped, err);
      continue;
    }
    ++used;
    worst = std::max(worst, err);
  }
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << "max relative error " << worst << " over " << used
     << " points (<= 1e-2); " << skipped << " kink-straddling draws replaced (their max " << worst_skipped << ")";
  return {used == 20 && worst <= 1e-2, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> only(argv + 1, argv + argc);
  const std::vector<std::tuple<std::string, double, std::function<Outcome()>>> criteria = {
      {"A1", 60, a1}, {"A2", 600, a2}, {"A3", 300, a3}, {"A4", 900, a4}, {"A5", 600, a5},
      {"A6", 1800, a6}, {"A7", 600, a7}, {"A8", 300, a8}, {"A9", 60, a9},
  };
  std::size_t failed = 0;
  for (const auto& [name, limit, run] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= limit) {
      o.pass = false;
      o.detail += "; over the " + fmt(limit, 0) + " s budget";
    }
    failed += !o.pass;
    std::cout << name << ' ' << (o.pass ? "PASS" : "FAIL") << " [" << fmt(secs, 1) << " s] " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
