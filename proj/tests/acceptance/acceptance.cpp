// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "rvit/costmodel.hpp"
#include "rvit/harness.hpp"
#include "rvit/masking.hpp"
#include "rvit/metrics.hpp"

namespace {

using Clock = std::chrono::steady_clock;
using rvit::Tensor;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  std::string out(static_cast<std::size_t>(std::snprintf(nullptr, 0, f, args...)), '\0');
  std::snprintf(out.data(), out.size() + 1, f, args...);
  return out;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- 1
Outcome efficiency_ratios() {
  const auto t0 = Clock::now();
  const rvit::ModelConfig vitb = rvit::model_preset("vitb16");
  const rvit::Efficiency q = rvit::compare_to_full(vitb, 0.25, "vitb16");
  const rvit::Efficiency t = rvit::compare_to_full(vitb, 0.05, "vitb16");
  const double dt = seconds_since(t0);
  const bool ok = q.flops_ratio >= 3.5 && q.flops_ratio <= 4.5 && t.flops_ratio >= 16.0 && t.flops_ratio <= 24.0 &&
                  t.memory_ratio >= 8.0 && t.memory_ratio <= 12.0 && dt < 1.0;
  return {ok, fmt("flops x%.2f at r=0.25, x%.2f at r=0.05, memory x%.2f at r=0.05 (%.3f s)", q.flops_ratio,
                  t.flops_ratio, t.memory_ratio, dt)};
}

// ---------------------------------------------------------------- 2
Outcome cost_oracle() {
  const auto t0 = Clock::now();
  struct Grid {
    std::size_t width, heads, depth, mlp, patch, h, w, channels;
    double ratio;
  };
  const Grid grid[] = {
      {32, 4, 1, 4, 4, 16, 16, 3, 1.0},   {32, 2, 2, 2, 4, 16, 32, 1, 0.5},   {48, 3, 2, 4, 8, 32, 32, 3, 0.25},
      {64, 4, 4, 4, 8, 64, 64, 3, 1.0},   {64, 4, 4, 4, 8, 64, 64, 3, 0.25},  {64, 8, 2, 4, 16, 64, 64, 3, 0.5},
      {96, 6, 1, 4, 8, 48, 32, 2, 0.1},   {16, 1, 3, 4, 2, 8, 8, 1, 0.75},    {64, 4, 2, 4, 4, 32, 32, 3, 0.05},
      {128, 8, 1, 2, 16, 32, 64, 4, 1.0}, {40, 5, 2, 3, 8, 40, 40, 3, 0.33}, {32, 4, 6, 4, 8, 32, 32, 3, 0.6},
  };
  double worst = 0.0;
  for (const Grid& g : grid) {
    rvit::ModelConfig cfg;
    cfg.width = g.width;
    cfg.heads = g.heads;
    cfg.depth = g.depth;
    cfg.mlp_ratio = g.mlp;
    cfg.patch_size = g.patch;
    cfg.image_h = g.h;
    cfg.image_w = g.w;
    cfg.channels = g.channels;
    const double analytic = static_cast<double>(rvit::estimate_cost(cfg, g.ratio).total_flops());
    const double counted = static_cast<double>(oracle::instrumented_flops(cfg, g.ratio, true));
    worst = std::max(worst, std::abs(analytic - counted) / counted);
  }
  const double dt = seconds_since(t0);
  return {worst <= 0.01 && dt < 60.0, fmt("12 configs, worst relative gap %.3g (%.2f s)", worst, dt)};
}

// ---------------------------------------------------------------- 3
Outcome masking_oracles() {
  const auto t0 = Clock::now();
  rvit::SplitMix64 rng(2024);
  std::size_t ms2_bad = 0, ms3_bad = 0, card_bad = 0, ms1_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.next() % 9;
    const Tensor s = oracle::random_similarity(rng, n, trial % 2 == 1);
    const rvit::SimilarityMatrix sim = rvit::similarity_from_values(s);
    const std::size_t k = 1 + rng.next() % n;
    const rvit::RetentionPlan p2 = rvit::ms2_diversity(sim, static_cast<double>(k) / static_cast<double>(n));
    if (p2.indices != oracle::ms2_brute_force(s, k)) ++ms2_bad;
    // thresholds both off and on the quarter grid used for ties
    const double tau = trial % 3 == 0 ? 0.25 * static_cast<double>(1 + rng.next() % 4) : 1e-3 + 0.999 * rng.uniform();
    if (rvit::ms3_select(sim, tau).indices != oracle::ms3_predicate(s, tau)) ++ms3_bad;
  }
  for (std::size_t n = 1; n <= 300; ++n) {
    for (std::size_t pct = 1; pct <= 100; ++pct) {
      const double r = static_cast<double>(pct) / 100.0;
      const std::size_t want = pct * n / 100;
      if (want == 0) continue;
      if (rvit::ms1_uniform(rvit::SampleSeed::from_key("c"), r, n).kept() != want) ++card_bad;
    }
  }
  const std::size_t N = 16, keys = 10000;
  const double r = 0.25;
  std::vector<double> hits(N, 0.0);
  for (std::size_t i = 0; i < keys; ++i) {
    const std::string key = "key-" + std::to_string(i);
    const rvit::RetentionPlan p = rvit::ms1_uniform(rvit::SampleSeed::from_key(key), r, N);
    if (p.indices != oracle::ms1_reference(key, r, N)) ++ms1_bad;
    for (std::size_t j : p.indices) hits[j] += 1.0;
  }
  const double expect = keys * r, sigma = std::sqrt(keys * r * (1.0 - r));
  double worst_z = 0.0;
  for (double h : hits) worst_z = std::max(worst_z, std::abs(h - expect) / sigma);
  const double dt = seconds_since(t0);
  const bool ok = ms2_bad == 0 && ms3_bad == 0 && card_bad == 0 && ms1_bad == 0 && worst_z <= 3.0 && dt < 60.0;
  return {ok, fmt("MS2 mismatches %zu/1000, MS3 mismatches %zu/1000, cardinality errors %zu, MS1 trace "
                  "mismatches %zu, worst inclusion z %.2f (%.2f s)",
                  ms2_bad, ms3_bad, card_bad, ms1_bad, worst_z, dt)};
}

// ---------------------------------------------------------------- 4
Outcome golden_trace() {
  // Registered from a hand run of FNV-1a("s0") -> splitmix64 -> descending Fisher-Yates.
  const std::uint64_t want_seed = 637538656335744918ull;
  const std::vector<std::size_t> want{0, 1, 4, 2};
  const rvit::RetentionPlan p = rvit::ms1_uniform(rvit::SampleSeed::from_key("s0"), 0.5, 8);
  const std::string got = rvit::to_json(p).dump();
  const bool ok = p.seed == want_seed && p.indices == want && p.mask == std::vector<std::uint8_t>{1, 1, 1, 0, 1, 0, 0, 0} &&
                  rvit::plan_from_json(nlohmann::json::parse(got)).indices == want;
  std::string idx;
  for (std::size_t i : p.indices) idx += (idx.empty() ? "" : ",") + std::to_string(i);
  return {ok, fmt("seed %llu, plan [%s]", static_cast<unsigned long long>(p.seed.value_or(0)), idx.c_str())};
}

// ---------------------------------------------------------------- 5
Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  rvit::SplitMix64 rng(5);
  for (const oracle::GradCase& c : oracle::gradient_cases()) {
    ++cases;
    for (int i = 0; i < 100; ++i) {
      const oracle::GradInstance inst = c.make(rng);
      const double err = oracle::gradient_check(inst.graph, inst.inputs, rng, inst.max_coords);
      if (!(err <= worst)) {
        worst = std::isnan(err) ? INFINITY : err;
        worst_name = c.name;
      }
    }
  }
  const double dt = seconds_since(t0);
  return {worst < 1e-5 && dt < 300.0,
          fmt("%zu ops x 100 instances, worst relative error %.3g (%s) (%.1f s)", cases, worst, worst_name.c_str(), dt)};
}

// ---------------------------------------------------------------- 6
Outcome unmasked_equivalence() {
  double worst = 0.0;
  rvit::SplitMix64 rng(6);
  for (int trial = 0; trial < 6; ++trial) {
    rvit::ModelConfig cfg;
    cfg.task = trial % 2 == 0 ? rvit::Task::classification : rvit::Task::segmentation;
    cfg.width = trial < 3 ? 32 : 64;
    cfg.heads = trial < 3 ? 4 : 8;
    cfg.depth = 4;
    cfg.patch_size = trial % 3 == 0 ? 4 : 8;
    cfg.image_h = 32;
    cfg.image_w = 24 + 8 * static_cast<std::size_t>(trial % 2);
    if (cfg.image_w % cfg.patch_size != 0) cfg.image_w = 32;
    cfg.decoder_width = 16;
    rvit::Network net(cfg, 100 + static_cast<std::uint64_t>(trial));
    for (std::size_t i = 0; i < net.params().size(); ++i) {
      for (double& v : net.params()[i].data()) v += 0.1 * rng.normal();
    }
    const Tensor px = oracle::random_tensor(rng, {cfg.image_h, cfg.image_w, cfg.channels});
    const rvit::PatchGrid grid = rvit::partition(px, cfg.patch_size);
    const rvit::RetentionPlan plan = rvit::RetentionPlan::full(grid.count());
    const rvit::PatchGrid* grids[] = {&grid};
    const rvit::RetentionPlan* plans[] = {&plan};
    rvit::nk::Tape tape;
    const rvit::BoundParams p = net.bind(tape, false, false);
    const rvit::Encoded enc = net.encode(tape, p, net.embed(tape, p, grids, plans));
    const oracle::ReferenceOutput ref = oracle::reference_forward(net, px);

    auto rel = [&](std::span<const double> a, std::span<const double> b) -> double {
      double diff = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < b.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max(scale, std::abs(b[i]));
      }
      if (a.size() != b.size()) return HUGE_VAL;
      return diff / std::max(scale, 1e-300);
    };
    worst = std::max(worst, rel(enc.class_embedding.value().data(), ref.class_embedding));
    for (std::size_t t = 0; t < ref.taps.size(); ++t) {
      worst = std::max(worst, rel(enc.taps[t].value().data(), ref.taps[t].data()));
    }
    if (cfg.task == rvit::Task::classification) {
      worst = std::max(worst, rel(net.classify(tape, p, enc.class_embedding).value().data(), ref.logits));
    }
  }
  return {worst < 1e-12, fmt("6 models, worst relative difference %.3g", worst)};
}

// ---------------------------------------------------------------- 7, 8, 9

rvit::ExperimentConfig desk_config(double lambda) {
  rvit::ExperimentConfig cfg;
  cfg.task = rvit::Task::classification;
  cfg.strategy = rvit::Strategy::ms1;
  cfg.data.scene.height = 64;
  cfg.data.scene.width = 64;
  cfg.data.scene.channels = 3;
  cfg.data.scene.classes = 4;
  cfg.data.scene.lambda = lambda;
  cfg.data.scene.thresholds = rvit::balanced_levels(cfg.data.scene);
  cfg.data.train_count = 2000;
  cfg.data.eval_count = 500;
  cfg.model.width = 64;
  cfg.model.depth = 4;
  cfg.model.heads = 4;
  cfg.model.patch_size = 8;
  cfg.optim.steps = 500;
  cfg.optim.batch_size = 32;
  cfg.optim.step_size = 0.05;
  cfg.optim.momentum = 0.9;
  return cfg;
}

struct DeskRun {
  double full = 0.0;    // train r, eval 1
  double masked = 0.0;  // train r, eval 0.25
  double seconds = 0.0;
};

// Three seeds at train ratio 1 and 0.25 on one dataset.
struct DeskStudy {
  std::map<double, std::vector<DeskRun>> runs;
  double seconds = 0.0;

  double mean_full(double r) const {
    double s = 0.0;
    for (const DeskRun& d : runs.at(r)) s += d.full;
    return s / static_cast<double>(runs.at(r).size());
  }
  double mean_masked(double r) const {
    double s = 0.0;
    for (const DeskRun& d : runs.at(r)) s += d.masked;
    return s / static_cast<double>(runs.at(r).size());
  }
  double degradation() const { return mean_full(1.0) - mean_full(0.25); }
};

const DeskStudy& desk_study(double lambda) {
  static std::map<double, DeskStudy> cache;
  auto it = cache.find(lambda);
  if (it != cache.end()) return it->second;
  const auto t0 = Clock::now();
  DeskStudy study;
  rvit::ExperimentConfig cfg = desk_config(lambda);
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  for (double r : {1.0, 0.25}) {
    for (std::uint64_t seed : {0, 1, 2}) {
      const auto t1 = Clock::now();
      cfg.train_ratio = r;
      cfg.eval_ratio = 1.0;
      cfg.seed = seed;
      const rvit::TrainOutcome out = rvit::train(cfg, data.train, data.eval);
      DeskRun run;
      run.full = out.row.metric_value;
      run.masked = rvit::evaluate_metric(out.network, data.eval, rvit::Strategy::ms1, 0.25, cfg.tau).metric;
      run.seconds = seconds_since(t1);
      std::printf("  lambda %g, train r %.2f, seed %llu: F1 %.4f (eval r=1), %.4f (eval r=0.25), %.0f s\n", lambda,
                  r, static_cast<unsigned long long>(seed), run.full, run.masked, run.seconds);
      std::fflush(stdout);
      study.runs[r].push_back(run);
    }
  }
  study.seconds = seconds_since(t0);
  return cache.emplace(lambda, std::move(study)).first->second;
}

Outcome setting_a() {
  const DeskStudy& s = desk_study(16.0);
  const double ratio = s.mean_full(0.25) / s.mean_full(1.0);
  return {ratio >= 0.9 && s.seconds < 900.0,
          fmt("macro-F1 %.4f at r=0.25 vs %.4f at r=1, ratio %.3f (%.0f s)", s.mean_full(0.25), s.mean_full(1.0),
              ratio, s.seconds)};
}

Outcome setting_b() {
  const DeskStudy& s = desk_study(16.0);
  return {s.mean_masked(0.25) >= s.mean_masked(1.0),
          fmt("eval r=0.25: trained at 0.25 %.4f, trained at 1 %.4f", s.mean_masked(0.25), s.mean_masked(1.0))};
}

Outcome redundancy_causality() {
  const DeskStudy& smooth = desk_study(16.0);
  const DeskStudy& rough = desk_study(1.0);
  // the eval-time gap of the r=1 models is printed for context only
  return {smooth.degradation() < rough.degradation(),
          fmt("degradation at r=0.25: lambda 16 %.4f (%.4f -> %.4f), lambda 1 %.4f (%.4f -> %.4f); "
              "eval-time gap of r=1 models: lambda 16 %.4f, lambda 1 %.4f",
              smooth.degradation(), smooth.mean_full(1.0), smooth.mean_full(0.25), rough.degradation(),
              rough.mean_full(1.0), rough.mean_full(0.25), smooth.mean_full(1.0) - smooth.mean_masked(1.0),
              rough.mean_full(1.0) - rough.mean_masked(1.0))};
}

// ---------------------------------------------------------------- 10

// Retention-vs-metric curve of one trained model evaluated at each ratio.
std::vector<double> retention_curve(const rvit::ExperimentConfig& cfg, const std::vector<double>& ratios) {
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  const rvit::TrainOutcome out = rvit::train(cfg, data.train, {});
  std::vector<double> metric;
  for (double r : ratios) {
    metric.push_back(rvit::evaluate_metric(out.network, data.eval, cfg.strategy, r, cfg.tau).metric);
  }
  return rvit::normalize_curve(ratios, metric);
}

rvit::ExperimentConfig curve_config(std::size_t classes) {
  rvit::ExperimentConfig cfg;
  cfg.data.scene.height = 32;
  cfg.data.scene.width = 32;
  cfg.data.scene.lambda = 8.0;
  cfg.data.scene.classes = classes;
  cfg.data.scene.thresholds = rvit::balanced_levels(cfg.data.scene);
  cfg.data.train_count = 1000;
  cfg.data.eval_count = 400;
  cfg.model.width = 64;
  cfg.model.depth = 4;
  cfg.model.heads = 4;
  cfg.optim.steps = 300;
  cfg.optim.step_size = 0.05;
  cfg.optim.momentum = 0.9;
  return cfg;
}

double min_pairwise_spearman(const std::vector<std::vector<double>>& curves) {
  double worst = 1.0;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    for (std::size_t j = i + 1; j < curves.size(); ++j) worst = std::min(worst, rvit::spearman(curves[i], curves[j]));
  }
  return worst;
}

std::string curve_str(const std::vector<double>& c) {
  std::string s;
  for (double v : c) s += (s.empty() ? "" : " ") + fmt("%.3f", v);
  return "[" + s + "]";
}

Outcome curve_consistency() {
  const auto t0 = Clock::now();
  const std::vector<double> ratios{0.25, 0.5, 0.75, 1.0};
  std::vector<std::vector<double>> by_patch;
  std::string detail = "P";
  for (std::size_t p : {4, 8, 16}) {
    rvit::ExperimentConfig cfg = curve_config(8);
    cfg.model.patch_size = p;
    by_patch.push_back(retention_curve(cfg, ratios));
    detail += fmt(" %zu %s", p, curve_str(by_patch.back()).c_str());
  }
  std::vector<std::vector<double>> by_group;
  detail += "; labels";
  // Presence labels of merged interval classes are almost always on, which
  // flattens the coarse curve to F1 1. Per-pixel maps with equal-mass levels
  // keep both granularities informative.
  for (std::size_t group : {1, 2}) {
    rvit::ExperimentConfig cfg = curve_config(8);
    cfg.task = rvit::Task::segmentation;
    cfg.data.scene.thresholds.clear();
    cfg.data.scene.thresholds = cfg.data.scene.levels();
    cfg.model.patch_size = 8;
    cfg.data.label_group = group;
    by_group.push_back(retention_curve(cfg, ratios));
    detail += fmt(" %zu %s", 8 / group, curve_str(by_group.back()).c_str());
  }
  const double sp = min_pairwise_spearman(by_patch), sg = min_pairwise_spearman(by_group);
  return {sp >= 0.8 && sg >= 0.8,
          fmt("min Spearman over patch sizes %.3f, over granularity %.3f; ", sp, sg) + detail +
              fmt(" (%.0f s)", seconds_since(t0))};
}

// ---------------------------------------------------------------- 11
Outcome calibration() {
  std::vector<double> taus;
  for (int i = 0; i < 20; ++i) taus.push_back(0.3 + 0.035 * i);
  std::map<double, std::vector<rvit::CalibrationRow>> table;
  bool monotone = true;
  for (double lambda : {1.0, 4.0, 16.0}) {
    rvit::SceneSpec spec;
    spec.lambda = lambda;
    spec.seed = 11;
    std::vector<rvit::SimilarityMatrix> sims;
    for (const auto& s : rvit::generate_dataset(spec, 200, "calibrate")) {
      sims.push_back(rvit::similarity_matrix(rvit::partition(s, 8)));
    }
    table[lambda] = rvit::calibrate_threshold(sims, taus);
    for (std::size_t i = 1; i < taus.size(); ++i) {
      monotone &= table[lambda][i].mean_retention >= table[lambda][i - 1].mean_retention;
    }
  }
  bool lower = true;
  for (std::size_t i = 0; i < taus.size(); ++i) lower &= table[16.0][i].mean_retention < table[1.0][i].mean_retention;
  return {monotone && lower,
          fmt("tau %.3f..%.3f: lambda 16 retention %.3f..%.3f, lambda 1 %.3f..%.3f, non-decreasing %s", taus.front(),
              taus.back(), table[16.0].front().mean_retention, table[16.0].back().mean_retention,
              table[1.0].front().mean_retention, table[1.0].back().mean_retention, monotone ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"efficiency ratios", efficiency_ratios},
      {"cost model matches instrumented counts", cost_oracle},
      {"masking oracles", masking_oracles},
      {"golden MS1 trace", golden_trace},
      {"gradient suite", gradient_suite},
      {"unmasked path equals reference forward", unmasked_equivalence},
      {"desk-scale setting A", setting_a},
      {"desk-scale setting B", setting_b},
      {"redundancy causality", redundancy_causality},
      {"curve-shape consistency", curve_consistency},
      {"calibration monotonicity", calibration},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  // ctest hides the output of passing tests, so keep a copy
  std::FILE* report = std::fopen("acceptance_report.txt", "w");
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    const std::string line = fmt("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                                 o.detail.c_str());
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    if (report) {
      std::fputs(line.c_str(), report);
      std::fflush(report);
    }
  }
  if (report) std::fclose(report);
  return failed == 0 ? 0 : 1;
}
