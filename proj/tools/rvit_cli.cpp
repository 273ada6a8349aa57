#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rvit/checkpoint.hpp"
#include "rvit/costmodel.hpp"
#include "rvit/harness.hpp"
#include "rvit/masking.hpp"
#include "rvit/synthdata.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw rvit::Error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw rvit::ParseError(path + ": " + e.what(), e.byte);
  }
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw rvit::Error("cannot write " + path);
  out << text;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Flags shared by the verbs that build an experiment.
struct Overrides {
  std::string config;
  std::optional<std::string> strategy;
  std::optional<double> ratio, tau, lambda;
  std::optional<std::size_t> patch, steps, batch;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app, bool with_training) {
    app->add_option("--config", config, "experiment config JSON");
    app->add_option("--strategy", strategy, "masking strategy")->check(CLI::IsMember({"ms1", "ms2", "ms3"}));
    app->add_option("--ratio", ratio, "retention ratio in (0, 1]");
    app->add_option("--tau", tau, "similarity threshold for ms3");
    app->add_option("--patch", patch, "patch size in pixels");
    app->add_option("--lambda", lambda, "correlation length of generated data");
    app->add_option("--seed", seed, "run seed");
    if (with_training) {
      app->add_option("--steps", steps, "SGD steps");
      app->add_option("--batch", batch, "minibatch size");
      app->add_option("--lr", lr, "SGD step size");
    }
  }

  // ratio applies to training when train_ratio is true, to evaluation otherwise.
  rvit::ExperimentConfig resolve(bool train_ratio) const {
    return resolve(config.empty() ? json::object() : load_json(config), train_ratio);
  }
  rvit::ExperimentConfig resolve(json doc, bool train_ratio) const {
    if (strategy) doc["strategy"] = *strategy;
    if (ratio) doc[train_ratio ? "train_ratio" : "eval_ratio"] = *ratio;
    if (tau) doc["tau"] = *tau;
    if (patch) doc["model"]["patch_size"] = *patch;
    if (lambda) doc["data"]["scene"]["lambda"] = *lambda;
    if (seed) doc["seed"] = *seed;
    if (steps) doc["optim"]["steps"] = *steps;
    if (batch) doc["optim"]["batch_size"] = *batch;
    if (lr) doc["optim"]["step_size"] = *lr;
    return rvit::ExperimentConfig::from_json(doc);
  }
};

// Samples from --data if given, else generated from the config. A directory
// written by gen-data also replaces the scene recorded in the config.
std::vector<rvit::ImageSample> load_split(const std::string& dir, rvit::DataConfig& data, bool eval) {
  if (!dir.empty()) {
    auto samples = rvit::read_dataset(dir);
    const json meta = load_json(dir + "/meta.json");
    if (meta.contains("extra") && meta["extra"].contains("scene")) {
      data.scene = rvit::SceneSpec::from_json(meta["extra"]["scene"]);
    }
    return samples;
  }
  rvit::Datasets d = rvit::make_datasets(data);
  return eval ? std::move(d.eval) : std::move(d.train);
}

std::string pgm(const rvit::RetentionPlan& plan, std::size_t grid_h, std::size_t grid_w, std::size_t cell,
                const rvit::ImageSample* image, std::size_t patch) {
  std::string out = "P5\n" + std::to_string(grid_w * cell) + " " + std::to_string(grid_h * cell) + "\n255\n";
  double lo = 0.0, hi = 1.0;
  if (image) {
    lo = 1e300;
    hi = -1e300;
    for (std::size_t i = 0; i < image->height() * image->width(); ++i) {
      lo = std::min(lo, image->pixels[i * image->channels()]);
      hi = std::max(hi, image->pixels[i * image->channels()]);
    }
    if (hi <= lo) hi = lo + 1.0;
  }
  for (std::size_t y = 0; y < grid_h * cell; ++y) {
    for (std::size_t x = 0; x < grid_w * cell; ++x) {
      const std::size_t idx = (y / cell) * grid_w + x / cell;
      unsigned char v = 0;
      if (plan.mask[idx]) {
        if (image) {
          const std::size_t py = (y / cell) * patch + (y % cell) * patch / cell;
          const std::size_t px = (x / cell) * patch + (x % cell) * patch / cell;
          const double val = image->pixels[(py * image->width() + px) * image->channels()];
          v = static_cast<unsigned char>(std::lround(55.0 + 200.0 * (val - lo) / (hi - lo)));
        } else {
          v = 255;
        }
      }
      out.push_back(static_cast<char>(v));
    }
  }
  return out;
}

std::vector<double> default_taus() {
  std::vector<double> taus;
  // Stops short of 1, where every patch without an exact duplicate is kept.
  for (int i = 0; i < 20; ++i) taus.push_back(0.3 + 0.035 * i);
  return taus;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rvit: redundancy-aware vision transformer toolkit"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  std::string out;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset split");
  rvit::SceneSpec scene;
  std::size_t count = 100;
  std::string split = "train", scene_config;
  std::vector<double> thresholds;
  bool quantile_levels = false;
  gen->add_option("--config", scene_config, "scene spec JSON");
  gen->add_option("--lambda", scene.lambda, "correlation length in pixels");
  gen->add_option("--seed", scene.seed, "data seed");
  gen->add_option("--count", count, "number of samples");
  gen->add_option("--split", split, "split name (seeds differ per split)");
  gen->add_option("--size", scene.height, "image height and width");
  gen->add_option("--channels", scene.channels, "channels");
  gen->add_option("--classes", scene.classes, "class count");
  gen->add_option("--thresholds", thresholds, "class threshold levels");
  gen->add_flag("--quantile-levels", quantile_levels, "standard-normal quantile levels instead of balanced ones");
  gen->add_option("--out", out, "output directory")->required();

  // mask
  auto* mask = app.add_subcommand("mask", "compute a retention plan");
  std::string strategy = "ms1", key = "s0", mask_data;
  std::size_t n = 0, patch = 8, index = 0, cell = 0;
  double ratio = 0.25, tau = 0.9, lambda = 16.0;
  std::uint64_t seed = 0;
  std::string viz;
  mask->add_option("--strategy", strategy, "ms1, ms2 or ms3")->check(CLI::IsMember({"ms1", "ms2", "ms3"}));
  mask->add_option("--key", key, "sample key for ms1");
  mask->add_option("--n", n, "patch count (ms1 without an image)");
  mask->add_option("--ratio", ratio, "retention ratio");
  mask->add_option("--tau", tau, "similarity threshold (ms3)");
  mask->add_option("--patch", patch, "patch size");
  mask->add_option("--data", mask_data, "dataset directory holding the image");
  mask->add_option("--index", index, "sample index within --data");
  mask->add_option("--lambda", lambda, "correlation length of a generated image");
  mask->add_option("--seed", seed, "seed of a generated image");
  mask->add_option("--viz", viz, "write the mask as a PGM image")->expected(0, 1)->default_str("mask.pgm");
  mask->add_option("--cell", cell, "PGM pixels per patch (default: patch size)");
  mask->add_option("--out", out, "plan JSON path");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "mean ms3 retention per threshold");
  std::string cal_data;
  std::vector<double> taus;
  std::size_t cal_count = 200;
  cal->add_option("--data", cal_data, "dataset directory");
  cal->add_option("--lambda", lambda, "correlation length of generated data");
  cal->add_option("--seed", seed, "seed of generated data");
  cal->add_option("--count", cal_count, "generated sample count");
  cal->add_option("--patch", patch, "patch size");
  cal->add_option("--taus", taus, "thresholds to evaluate");
  cal->add_option("--out", out, "CSV path");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  Overrides train_flags;
  std::string train_data, eval_data;
  train_flags.attach(tr, true);
  tr->add_option("--data", train_data, "training split directory");
  tr->add_option("--eval-data", eval_data, "evaluation split directory");
  tr->add_option("--out", out, "checkpoint path")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  Overrides eval_flags;
  std::string checkpoint;
  eval_flags.attach(ev, false);
  ev->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  ev->add_option("--data", eval_data, "evaluation split directory");
  ev->add_option("--out", out, "result JSON or CSV path");

  // probe
  auto* pr = app.add_subcommand("probe", "train a fresh linear head on a frozen encoder");
  Overrides probe_flags;
  probe_flags.attach(pr, true);
  pr->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  pr->add_option("--data", train_data, "target training split directory");
  pr->add_option("--eval-data", eval_data, "target evaluation split directory");
  pr->add_option("--out", out, "result JSON or CSV path");

  // sweep
  auto* sw = app.add_subcommand("sweep", "run a grid of experiments");
  std::string grid_path, summary_path;
  std::size_t jobs = 1;
  bool wall_clock = false;
  sw->add_option("--grid", grid_path, "grid JSON")->required();
  sw->add_option("--jobs", jobs, "concurrent cells")->check(CLI::PositiveNumber);
  sw->add_option("--summary", summary_path, "mean and std CSV (default: <out>.summary.csv)");
  sw->add_flag("--wall-clock", wall_clock, "record wall time per cell");
  sw->add_option("--out", out, "results CSV path")->required();

  // cost
  auto* co = app.add_subcommand("cost", "analytic compute and memory report");
  std::string model = "vitb16", task = "classification";
  std::optional<std::size_t> image, cost_patch;
  co->add_option("--model", model, "vits16, vitb16, vitl16 or desk");
  co->add_option("--image", image, "square image size");
  co->add_option("--patch", cost_patch, "patch size");
  co->add_option("--ratio", ratio, "retention ratio");
  co->add_option("--task", task, "classification or segmentation");
  co->add_option("--out", out, "JSON path");

  if (argc > 1 && argv[1][0] != '-') {
    const std::string verb = argv[1];
    const auto subs = app.get_subcommands([](CLI::App*) { return true; });
    const bool known = std::any_of(subs.begin(), subs.end(), [&](CLI::App* s) { return s->get_name() == verb; });
    if (!known) {
      std::cerr << "error: unknown verb '" << verb << "'\n" << app.help();
      return 2;
    }
  }
  CLI11_PARSE(app, argc, argv);
  rvit::log_level();

  try {
    if (*gen) {
      if (!scene_config.empty()) {
        rvit::SceneSpec base = rvit::SceneSpec::from_json(load_json(scene_config));
        for (const CLI::Option* opt : gen->get_options()) {
          if (opt->count() == 0) continue;
          const std::string name = opt->get_name();
          if (name == "--lambda") base.lambda = scene.lambda;
          if (name == "--seed") base.seed = scene.seed;
          if (name == "--size") base.height = base.width = scene.height;
          if (name == "--channels") base.channels = scene.channels;
          if (name == "--classes") base.classes = scene.classes;
        }
        scene = base;
      } else {
        scene.width = scene.height;
      }
      if (!thresholds.empty()) {
        scene.thresholds = thresholds;
      } else if (scene.thresholds.empty() && !quantile_levels) {
        scene.thresholds = rvit::balanced_levels(scene);
      }
      scene.validate();
      const auto samples = rvit::generate_dataset(scene, count, split);
      rvit::write_dataset(samples, out, {{"scene", scene.to_json()}, {"split", split}});
      double ac = 0.0;
      std::vector<double> presence(scene.classes, 0.0);
      for (const auto& s : samples) {
        ac += rvit::lag1_autocorrelation(s, 0);
        for (std::size_t c = 0; c < scene.classes; ++c) presence[c] += s.class_labels[c];
      }
      std::cout << "wrote " << samples.size() << " samples to " << out << "\n";
      std::cout << "scene " << scene.to_json().dump() << "\n";
      std::cout << "mean lag-1 autocorrelation (channel 0): " << ac / static_cast<double>(samples.size()) << "\n";
      std::cout << "class presence:";
      for (double p : presence) std::cout << " " << p / static_cast<double>(samples.size());
      std::cout << "\n";
      return 0;
    }

    if (*mask) {
      const rvit::Strategy s = rvit::parse_strategy(strategy);
      std::optional<rvit::ImageSample> image;
      if (!mask_data.empty()) {
        auto samples = rvit::read_dataset(mask_data);
        if (index >= samples.size()) throw rvit::ConfigError("--index is past the end of the dataset");
        image = samples[index];
      } else if (s != rvit::Strategy::ms1 || n == 0) {
        rvit::SceneSpec spec;
        spec.lambda = lambda;
        spec.seed = seed;
        image = rvit::generate(spec);
      }
      rvit::RetentionPlan plan;
      std::size_t gh = 0, gw = 0;
      if (image) {
        const rvit::PatchGrid grid = rvit::partition(*image, patch);
        gh = grid.grid_h;
        gw = grid.grid_w;
        if (mask->count("--key") == 0 && !mask_data.empty()) key = image->key;
        plan = rvit::plan_for(*image, grid, s, s == rvit::Strategy::ms3 ? 0.0 : ratio, tau, key);
      } else {
        plan = rvit::ms1_uniform(rvit::SampleSeed::from_key(key), ratio, n);
        gw = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
        gh = (n + gw - 1) / gw;
      }
      json doc = rvit::to_json(plan);
      if (s == rvit::Strategy::ms1) doc["key"] = key;
      const std::string text = doc.dump(2) + "\n";
      std::cout << text;
      if (!out.empty()) write_text(out, text);
      if (mask->count("--viz")) {
        if (viz.empty()) viz = "mask.pgm";
        rvit::RetentionPlan padded = plan;
        padded.mask.resize(gh * gw, 0);
        const std::size_t c = cell ? cell : (image ? patch : 16);
        write_text(viz, pgm(padded, gh, gw, c, image ? &*image : nullptr, patch));
        std::cerr << "mask image written to " << viz << "\n";
      }
      return 0;
    }

    if (*cal) {
      std::vector<rvit::ImageSample> samples;
      if (!cal_data.empty()) {
        samples = rvit::read_dataset(cal_data);
      } else {
        rvit::SceneSpec spec;
        spec.lambda = lambda;
        spec.seed = seed;
        samples = rvit::generate_dataset(spec, cal_count, "calibrate");
      }
      if (taus.empty()) taus = default_taus();
      std::vector<rvit::SimilarityMatrix> sims;
      for (const auto& smp : samples) sims.push_back(rvit::similarity_matrix(rvit::partition(smp, patch)));
      const auto rows = rvit::calibrate_threshold(sims, taus);
      const std::string csv = rvit::calibration_csv(rows);
      std::cout << csv;
      if (!out.empty()) write_text(out, csv);
      return 0;
    }

    if (*tr) {
      rvit::ExperimentConfig cfg = train_flags.resolve(true);
      const auto train_set = load_split(train_data, cfg.data, false);
      std::vector<rvit::ImageSample> eval_set;
      if (!eval_data.empty() || train_data.empty()) eval_set = load_split(eval_data, cfg.data, true);
      cfg.model = rvit::fit_model_to_data(cfg.model, train_set, cfg.task);
      const rvit::TrainOutcome result = rvit::train(cfg, train_set, eval_set);
      json meta = {{"experiment", cfg.to_json()},
                   {"final_loss", result.losses.back()},
                   {"steps", result.losses.size()}};
      if (!eval_set.empty()) meta["result"] = result.row.to_json();
      rvit::write_checkpoint(out, result.network, meta);
      write_text(out + ".json", meta.dump(2) + "\n");
      std::cout << "trained " << result.losses.size() << " steps, loss " << result.losses.front() << " -> "
                << result.losses.back() << "\n";
      if (!eval_set.empty()) {
        std::cout << result.row.metric_name << " at r_eval=" << result.row.eval_ratio << ": "
                  << result.row.metric_value << "\n";
      }
      std::cout << "checkpoint written to " << out << "\n";
      return 0;
    }

    if (*ev || *pr) {
      const rvit::Checkpoint ckpt = rvit::read_checkpoint(checkpoint);
      Overrides& flags = *ev ? eval_flags : probe_flags;
      // Checkpoint experiment, then --config, then flags; the model always comes from the checkpoint.
      json base = ckpt.meta.contains("experiment") ? ckpt.meta["experiment"] : json::object();
      if (!flags.config.empty()) base = load_json(flags.config);
      base["model"] = ckpt.config.to_json();
      if (*ev || !base.contains("task")) base["task"] = to_string(ckpt.config.task);
      rvit::ExperimentConfig cfg = flags.resolve(base, pr->parsed());
      rvit::ResultRow row;
      if (*ev) {
        const auto samples = load_split(eval_data, cfg.data, true);
        row = rvit::evaluate(ckpt.network(), samples, cfg.strategy, cfg.eval_ratio, cfg.tau, cfg.seed,
                             cfg.data.scene.lambda);
        row.digest = cfg.digest();
      } else {
        const auto train_set = load_split(train_data, cfg.data, false);
        std::vector<rvit::ImageSample> eval_set;
        if (!eval_data.empty() || train_data.empty()) eval_set = load_split(eval_data, cfg.data, true);
        if (eval_set.empty()) eval_set = train_set;
        row = rvit::linear_probe(ckpt.network(), cfg, train_set, eval_set).row;
      }
      json doc = row.to_json();
      doc["experiment"] = cfg.to_json();
      std::cout << row.metric_name << " = " << row.metric_value << " (r_eval=" << row.eval_ratio
                << ", mean retention " << row.mean_retention << ")\n";
      if (!out.empty()) {
        write_text(out, ends_with(out, ".csv") ? rvit::to_csv({row}) : doc.dump(2) + "\n");
      }
      return 0;
    }

    if (*sw) {
      const rvit::SweepGrid grid = rvit::SweepGrid::from_json(load_json(grid_path));
      rvit::SweepOptions options;
      options.jobs = jobs;
      options.wall_clock = wall_clock;
      const auto rows = rvit::sweep(grid, options);
      write_text(out, rvit::to_csv(rows));
      if (summary_path.empty()) summary_path = out + ".summary.csv";
      write_text(summary_path, rvit::summary_csv(rows));
      write_text(out + ".grid.json", grid.to_json().dump(2) + "\n");
      std::size_t failed = 0;
      for (const auto& r : rows) failed += !r.error.empty();
      std::cout << rows.size() << " rows (" << failed << " failed) written to " << out << "\n";
      std::cout << rvit::summary_csv(rows);
      return 0;
    }

    if (*co) {
      rvit::ModelConfig cfg = rvit::model_preset(model);
      cfg.task = rvit::parse_task(task);
      if (image) cfg.image_h = cfg.image_w = *image;
      if (cost_patch) cfg.patch_size = *cost_patch;
      const rvit::Efficiency eff = rvit::compare_to_full(cfg, ratio, model);
      json doc = eff.to_json();
      doc["model_config"] = cfg.to_json();
      const std::string text = doc.dump(2) + "\n";
      std::cout << text;
      if (!out.empty()) write_text(out, text);
      return 0;
    }
  } catch (const rvit::ParseError& e) {
    std::cerr << "parse error: " << e.what() << " (byte offset " << e.offset() << ")\n";
    return 3;
  } catch (const rvit::ConfigError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
