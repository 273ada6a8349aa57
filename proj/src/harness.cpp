#include "rvit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <future>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "rvit/costmodel.hpp"
#include "rvit/metrics.hpp"

namespace rvit {

namespace {

std::atomic<int> g_log_level{-1};
std::mutex g_log_mutex;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  SplitMix64 rng(a ^ (b * 0x9e3779b97f4a7c15ull));
  return rng.next();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

LogLevel log_level() {
  int level = g_log_level.load();
  if (level < 0) {
    level = 0;
    if (const char* env = std::getenv("RVIT_LOG")) {
      const std::string v = env;
      if (v == "info") level = 1;
      if (v == "debug") level = 2;
    }
    g_log_level.store(level);
  }
  return static_cast<LogLevel>(level);
}

void set_log_level(LogLevel level) { g_log_level.store(static_cast<int>(level)); }

void log_message(LogLevel level, const std::string& message) {
  if (level > log_level()) return;
  static const char* names[] = {"error", "info", "debug"};
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << message << "\n";
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"step_size", step_size}, {"momentum", momentum}, {"steps", steps}, {"batch_size", batch_size}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& doc) {
  OptimizerConfig o;
  o.step_size = doc.value("step_size", o.step_size);
  o.momentum = doc.value("momentum", o.momentum);
  o.steps = doc.value("steps", o.steps);
  o.batch_size = doc.value("batch_size", o.batch_size);
  return o;
}

nlohmann::json DataConfig::to_json() const {
  return {{"scene", scene.to_json()},
          {"train_count", train_count},
          {"eval_count", eval_count},
          {"label_group", label_group},
          {"downscale", downscale}};
}

DataConfig DataConfig::from_json(const nlohmann::json& doc) {
  DataConfig d;
  if (doc.contains("scene")) d.scene = SceneSpec::from_json(doc["scene"]);
  d.train_count = doc.value("train_count", d.train_count);
  d.eval_count = doc.value("eval_count", d.eval_count);
  d.label_group = doc.value("label_group", d.label_group);
  d.downscale = doc.value("downscale", d.downscale);
  return d;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid experiment config: " + msg); };
  if (!(train_ratio > 0.0 && train_ratio <= 1.0)) fail("train_ratio must be in (0, 1]");
  if (!(eval_ratio > 0.0 && eval_ratio <= 1.0)) fail("eval_ratio must be in (0, 1]");
  if (strategy == Strategy::ms3 && !(tau > 0.0 && tau <= 1.0)) fail("tau must be in (0, 1]");
  if (optim.steps < 1) fail("steps must be at least 1");
  if (optim.batch_size < 1) fail("batch_size must be at least 1");
  if (!(optim.step_size > 0.0)) fail("step_size must be positive");
  if (!(optim.momentum >= 0.0 && optim.momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (data.label_group < 1) fail("label_group must be at least 1");
  if (data.downscale < 1) fail("downscale must be at least 1");
  data.scene.validate();
  model.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  ModelConfig m = model;
  m.task = task;
  return {{"task", to_string(task)},
          {"strategy", to_string(strategy)},
          {"train_ratio", train_ratio},
          {"eval_ratio", eval_ratio},
          {"tau", tau},
          {"model", m.to_json()},
          {"optim", optim.to_json()},
          {"data", data.to_json()},
          {"seed", seed}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc) {
  ExperimentConfig c;
  try {
    if (doc.contains("task")) c.task = parse_task(doc["task"].get<std::string>());
    if (doc.contains("strategy")) c.strategy = parse_strategy(doc["strategy"].get<std::string>());
    c.train_ratio = doc.value("train_ratio", c.train_ratio);
    c.eval_ratio = doc.value("eval_ratio", c.eval_ratio);
    c.tau = doc.value("tau", c.tau);
    if (doc.contains("model")) c.model = ModelConfig::from_json(doc["model"]);
    c.model.task = c.task;
    if (doc.contains("optim")) c.optim = OptimizerConfig::from_json(doc["optim"]);
    if (doc.contains("data")) c.data = DataConfig::from_json(doc["data"]);
    c.seed = doc.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::digest() const {
  nlohmann::json doc = to_json();
  doc.erase("seed");
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(doc.dump())));
  return buf;
}

nlohmann::json ResultRow::to_json() const {
  nlohmann::json doc = {{"digest", digest},
                        {"task", to_string(task)},
                        {"strategy", to_string(strategy)},
                        {"train_ratio", train_ratio},
                        {"eval_ratio", eval_ratio},
                        {"tau", tau ? nlohmann::json(*tau) : nlohmann::json(nullptr)},
                        {"patch_size", patch_size},
                        {"lambda", lambda},
                        {"seed", seed},
                        {"metric_name", metric_name},
                        {"metric_value", metric_value},
                        {"mean_retention", mean_retention},
                        {"gflops", gflops},
                        {"peak_mem_mb", peak_mem_mb},
                        {"wall_s", wall_s}};
  if (!error.empty()) doc["error"] = error;
  return doc;
}

std::string metric_name(Task task) { return task == Task::classification ? "macro_f1" : "miou"; }

Datasets make_datasets(const DataConfig& cfg) {
  SceneSpec scene = cfg.scene;
  if (scene.thresholds.empty()) scene.thresholds = balanced_levels(scene);
  Datasets d;
  d.train = generate_dataset(scene, cfg.train_count, "train");
  d.eval = generate_dataset(scene, cfg.eval_count, "eval");
  for (auto* split : {&d.train, &d.eval}) {
    if (cfg.label_group > 1) *split = merge_classes(*split, cfg.label_group);
    if (cfg.downscale > 1) {
      for (ImageSample& s : *split) s = downscale(s, cfg.downscale);
    }
  }
  return d;
}

ModelConfig fit_model_to_data(ModelConfig model, const std::vector<ImageSample>& samples, Task task) {
  if (samples.empty()) throw Error("empty dataset");
  const ImageSample& s = samples.front();
  model.task = task;
  model.image_h = s.height();
  model.image_w = s.width();
  model.channels = s.channels();
  model.classes = s.class_labels.size();
  model.validate();
  return model;
}

namespace {

void check_data(const ModelConfig& cfg, const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw Error("empty dataset");
  for (const ImageSample& s : samples) {
    if (s.pixels.rank() != 3 || s.height() != cfg.image_h || s.width() != cfg.image_w ||
        s.channels() != cfg.channels) {
      throw ShapeError("sample " + s.key + " has shape " + shape_str(s.pixels.shape()) +
                       ", model expects " + shape_str({cfg.image_h, cfg.image_w, cfg.channels}));
    }
    if (s.class_labels.size() != cfg.classes) {
      throw ShapeError("sample " + s.key + " has " + std::to_string(s.class_labels.size()) +
                       " classes, model expects " + std::to_string(cfg.classes));
    }
    if (cfg.task == Task::segmentation && s.seg_labels.size() != cfg.image_h * cfg.image_w) {
      throw ShapeError("sample " + s.key + " has no dense labels of the image size");
    }
  }
}

nk::Var task_loss(const Network& net, nk::Var logits, const std::vector<const ImageSample*>& batch) {
  const ModelConfig& cfg = net.config();
  if (cfg.task == Task::classification) {
    Tensor targets({batch.size(), cfg.classes});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t c = 0; c < cfg.classes; ++c) targets[b * cfg.classes + c] = batch[b]->class_labels[c];
    }
    return nk::bce_with_logits(logits, targets);
  }
  std::vector<int> labels;
  labels.reserve(batch.size() * cfg.image_h * cfg.image_w);
  for (const ImageSample* s : batch) labels.insert(labels.end(), s->seg_labels.begin(), s->seg_labels.end());
  return nk::ce_pixelwise(logits, labels);
}

nk::Var batch_forward(nk::Tape& tape, const Network& net, const BoundParams& p,
                      const std::vector<const ImageSample*>& batch, const std::vector<RetentionPlan>& plans,
                      std::vector<PatchGrid>& grids) {
  if (batch.size() != plans.size()) throw ShapeError("batch and plan counts differ");
  grids.clear();
  for (const ImageSample* s : batch) grids.push_back(partition(*s, net.config().patch_size));
  std::vector<const PatchGrid*> gp;
  std::vector<const RetentionPlan*> pp;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    gp.push_back(&grids[b]);
    pp.push_back(&plans[b]);
  }
  return net.forward(tape, p, gp, pp);
}

}  // namespace

RetentionPlan plan_for(const ImageSample& sample, const PatchGrid& grid, Strategy strategy,
                       double ratio, double tau, const std::string& key) {
  (void)sample;
  if (strategy != Strategy::ms3 && ratio >= 1.0) return RetentionPlan::full(grid.count());
  if (strategy == Strategy::ms1) return ms1_uniform(SampleSeed::from_key(key), ratio, grid.count());
  const SimilarityMatrix sim = similarity_matrix(grid);
  if (strategy == Strategy::ms2) return ms2_diversity(sim, ratio);
  if (ratio >= 1.0) return RetentionPlan::full(grid.count());
  return ms3_select(sim, tau);
}

double batch_loss(const Network& net, const std::vector<const ImageSample*>& batch,
                  const std::vector<RetentionPlan>& plans) {
  nk::Tape tape;
  const BoundParams p = net.bind(tape, false, false);
  std::vector<PatchGrid> grids;
  return task_loss(net, batch_forward(tape, net, p, batch, plans, grids), batch).value()[0];
}

double sgd_step(Network& net, const std::vector<const ImageSample*>& batch,
                const std::vector<RetentionPlan>& plans, const OptimizerConfig& optim,
                std::vector<Tensor>& velocity, bool train_encoder) {
  nk::Tape tape;
  const BoundParams p = net.bind(tape, train_encoder, true);
  std::vector<PatchGrid> grids;
  const nk::Var loss = task_loss(net, batch_forward(tape, net, p, batch, plans, grids), batch);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) {
    throw Error("training diverged: loss is " + fmt(value) + " (lower the step size)");
  }
  tape.backward(loss);
  Params& params = net.params();
  if (velocity.size() != params.size()) velocity.assign(params.size(), Tensor());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!tape.has_grad(p[i].id)) continue;
    const Tensor& g = tape.grad(p[i].id);
    Tensor& w = params[i];
    if (optim.momentum > 0.0) {
      Tensor& v = velocity[i];
      if (v.empty()) v = Tensor(w.shape());
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = optim.momentum * v[j] + g[j];
        w[j] -= optim.step_size * v[j];
      }
    } else {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= optim.step_size * g[j];
    }
  }
  return value;
}

namespace {

struct Trainer {
  const ExperimentConfig& cfg;
  const std::vector<ImageSample>& data;
  bool train_encoder;
  std::vector<RetentionPlan> fixed;  // per-image plans for the similarity strategies

  void prepare(const ModelConfig& model) {
    if (cfg.strategy == Strategy::ms1 || (cfg.strategy == Strategy::ms2 && cfg.train_ratio >= 1.0)) return;
    fixed.reserve(data.size());
    for (const ImageSample& s : data) {
      const PatchGrid grid = partition(s, model.patch_size);
      fixed.push_back(plan_for(s, grid, cfg.strategy, cfg.strategy == Strategy::ms3 ? 0.0 : cfg.train_ratio,
                               cfg.tau, s.key));
    }
  }

  RetentionPlan plan(std::size_t i, std::size_t epoch, std::size_t n) const {
    if (!fixed.empty()) return fixed[i];
    if (cfg.train_ratio >= 1.0) return RetentionPlan::full(n);
    return ms1_uniform(SampleSeed::from_key(data[i].key + "/e" + std::to_string(epoch)), cfg.train_ratio, n);
  }

  std::vector<double> run(Network& net) {
    const std::size_t n = data.size();
    const std::size_t batch = std::min(cfg.optim.batch_size, n);
    const std::size_t per_epoch = (n + batch - 1) / batch;
    const std::size_t tokens = net.config().tokens();
    std::vector<double> losses;
    losses.reserve(cfg.optim.steps);
    std::vector<Tensor> velocity;
    std::vector<std::size_t> order(n);
    std::size_t epoch = static_cast<std::size_t>(-1);
    for (std::size_t step = 0; step < cfg.optim.steps; ++step) {
      const std::size_t e = step / per_epoch, pos = step % per_epoch;
      if (e != epoch) {
        epoch = e;
        std::iota(order.begin(), order.end(), 0);
        SplitMix64 rng(mix(mix(cfg.seed, 0x6f72646572ull), epoch));
        for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.next() % (i + 1)]);
      }
      std::vector<const ImageSample*> samples;
      std::vector<RetentionPlan> plans;
      for (std::size_t j = pos * batch; j < std::min(n, (pos + 1) * batch); ++j) {
        samples.push_back(&data[order[j]]);
        plans.push_back(plan(order[j], epoch, tokens));
      }
      losses.push_back(sgd_step(net, samples, plans, cfg.optim, velocity, train_encoder));
      if (log_level() >= LogLevel::debug && (step % 50 == 0 || step + 1 == cfg.optim.steps)) {
        log_message(LogLevel::debug, "step " + std::to_string(step) + " epoch " + std::to_string(epoch) +
                                         " loss " + fmt(losses.back()));
      }
    }
    return losses;
  }
};

ResultRow make_row(const ModelConfig& model, Strategy strategy, double train_ratio, double eval_ratio,
                   double tau, std::uint64_t seed, double lambda, const Evaluation& ev) {
  ResultRow row;
  row.task = model.task;
  row.strategy = strategy;
  row.train_ratio = train_ratio;
  row.eval_ratio = eval_ratio;
  if (strategy == Strategy::ms3) row.tau = tau;
  row.patch_size = model.patch_size;
  row.lambda = lambda;
  row.seed = seed;
  row.metric_name = metric_name(model.task);
  row.metric_value = ev.metric;
  row.mean_retention = ev.mean_retention;
  const double r = std::clamp(ev.mean_retention, 1.0 / static_cast<double>(model.tokens()), 1.0);
  const CostReport cost = estimate_cost(model, r);
  row.gflops = cost.gflops();
  row.peak_mem_mb = cost.peak_mem_mb();
  return row;
}

}  // namespace

TrainOutcome train(const ExperimentConfig& cfg, const std::vector<ImageSample>& train_set,
                   const std::vector<ImageSample>& eval_set) {
  ExperimentConfig run = cfg;
  run.model = fit_model_to_data(cfg.model, train_set, cfg.task);
  run.validate();
  check_data(run.model, train_set);
  Network net(run.model, mix(cfg.seed, 0x696e6974ull));
  Trainer trainer{run, train_set, true, {}};
  trainer.prepare(run.model);
  log_message(LogLevel::info, "train " + to_string(cfg.task) + " " + to_string(cfg.strategy) + " r=" +
                                  fmt(cfg.train_ratio) + " P=" + std::to_string(cfg.model.patch_size) +
                                  " seed=" + std::to_string(cfg.seed));
  std::vector<double> losses = trainer.run(net);
  ResultRow row;
  if (!eval_set.empty()) {
    row = evaluate(net, eval_set, cfg.strategy, cfg.eval_ratio, cfg.tau, cfg.seed, cfg.data.scene.lambda);
    row.train_ratio = cfg.train_ratio;
    row.digest = cfg.digest();
  }
  return TrainOutcome{std::move(net), std::move(losses), std::move(row)};
}

Evaluation evaluate_metric(const Network& net, const std::vector<ImageSample>& samples, Strategy strategy,
                           double ratio, double tau) {
  const ModelConfig& cfg = net.config();
  check_data(cfg, samples);
  MacroF1 f1(cfg.classes);
  MeanIoU iou(cfg.classes);
  double retained = 0.0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<const ImageSample*> batch;
    std::vector<RetentionPlan> plans;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) {
      batch.push_back(&samples[i]);
      const PatchGrid grid = partition(samples[i], cfg.patch_size);
      plans.push_back(plan_for(samples[i], grid, strategy, ratio, tau, samples[i].key));
      retained += static_cast<double>(plans.back().kept()) / static_cast<double>(grid.count());
    }
    nk::Tape tape;
    const BoundParams p = net.bind(tape, false, false);
    std::vector<PatchGrid> grids;
    const Tensor& logits = batch_forward(tape, net, p, batch, plans, grids).value();
    if (cfg.task == Task::classification) {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        f1.add(std::span<const double>(logits.ptr() + b * cfg.classes, cfg.classes), batch[b]->class_labels);
      }
    } else {
      const std::size_t hw = cfg.image_h * cfg.image_w;
      std::vector<std::uint8_t> pred(hw);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const double* base = logits.ptr() + b * cfg.classes * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          std::size_t best = 0;
          for (std::size_t c = 1; c < cfg.classes; ++c) {
            if (base[c * hw + i] > base[best * hw + i]) best = c;
          }
          pred[i] = static_cast<std::uint8_t>(best);
        }
        iou.add(pred, batch[b]->seg_labels);
      }
    }
  }
  Evaluation ev;
  ev.metric = cfg.task == Task::classification ? f1.value() : iou.value();
  ev.mean_retention = retained / static_cast<double>(samples.size());
  return ev;
}

ResultRow evaluate(const Network& net, const std::vector<ImageSample>& samples, Strategy strategy,
                   double ratio, double tau, std::uint64_t seed, double lambda) {
  const Evaluation ev = evaluate_metric(net, samples, strategy, ratio, tau);
  return make_row(net.config(), strategy, 1.0, ratio, tau, seed, lambda, ev);
}

ProbeOutcome linear_probe(const Network& frozen, const ExperimentConfig& cfg,
                          const std::vector<ImageSample>& train_set,
                          const std::vector<ImageSample>& eval_set) {
  // Zero steps is allowed here: it scores the untrained head.
  ExperimentConfig checked = cfg;
  checked.optim.steps = std::max<std::size_t>(1, cfg.optim.steps);
  checked.validate();
  ModelConfig target = fit_model_to_data(frozen.config(), train_set, cfg.task);
  Network probe(target, mix(cfg.seed, 0x70726f6265ull));
  const Params& src = frozen.params();
  if (probe.head_begin() != frozen.head_begin()) throw ConfigError("probe: encoder layouts differ");
  for (std::size_t i = 0; i < probe.head_begin(); ++i) {
    if (src.name(i) != probe.params().name(i) || src[i].shape() != probe.params()[i].shape()) {
      throw ConfigError("probe: encoder parameter " + src.name(i) + " does not fit the target data");
    }
    probe.params()[i] = src[i];
  }
  check_data(target, train_set);
  ExperimentConfig run = cfg;
  run.model = target;
  Trainer trainer{run, train_set, false, {}};
  trainer.prepare(target);
  if (cfg.optim.steps > 0) trainer.run(probe);
  ResultRow row;
  if (!eval_set.empty()) {
    row = evaluate(probe, eval_set, cfg.strategy, cfg.eval_ratio, cfg.tau, cfg.seed, cfg.data.scene.lambda);
    row.train_ratio = cfg.train_ratio;
    row.digest = run.digest();
  }
  return ProbeOutcome{std::move(probe), std::move(row)};
}

namespace {

void set_path(nlohmann::json& doc, const std::string& path, const nlohmann::json& value) {
  static const std::map<std::string, std::string> aliases = {{"patch_size", "model.patch_size"},
                                                             {"lambda", "data.scene.lambda"},
                                                             {"label_group", "data.label_group"},
                                                             {"downscale", "data.downscale"}};
  const auto alias = aliases.find(path);
  const std::string full = alias == aliases.end() ? path : alias->second;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = full.find('.', start);
    const std::string part = full.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("grid axis '" + path + "' is not a valid config path");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace

SweepGrid SweepGrid::from_json(const nlohmann::json& doc) {
  SweepGrid g;
  try {
    if (doc.contains("base")) g.base = doc["base"];
    if (doc.contains("axes")) {
      for (const auto& [name, values] : doc["axes"].items()) {
        if (!values.is_array()) throw ConfigError("grid axis '" + name + "' must be a list");
        g.axes.emplace_back(name, values.get<std::vector<nlohmann::json>>());
      }
    }
    if (doc.contains("eval_ratios")) g.eval_ratios = doc["eval_ratios"].get<std::vector<double>>();
    if (doc.contains("seeds")) g.seeds = doc["seeds"].get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sweep grid: ") + e.what());
  }
  return g;
}

nlohmann::json SweepGrid::to_json() const {
  nlohmann::json axes_doc = nlohmann::json::object();
  for (const auto& [name, values] : axes) axes_doc[name] = values;
  return {{"base", base}, {"axes", axes_doc}, {"eval_ratios", eval_ratios}, {"seeds", seeds}};
}

std::vector<ExperimentConfig> SweepGrid::cells() const {
  std::vector<nlohmann::json> docs{base};
  for (const auto& [name, values] : axes) {
    std::vector<nlohmann::json> next;
    for (const auto& doc : docs) {
      for (const auto& v : values) {
        nlohmann::json d = doc;
        set_path(d, name, v);
        next.push_back(std::move(d));
      }
    }
    docs = std::move(next);
  }
  std::vector<ExperimentConfig> out;
  for (const auto& doc : docs) {
    for (std::uint64_t seed : seeds) {
      nlohmann::json d = doc;
      d["seed"] = seed;
      out.push_back(ExperimentConfig::from_json(d));
    }
  }
  return out;
}

std::vector<ResultRow> sweep(const SweepGrid& grid, const SweepOptions& options) {
  const std::vector<ExperimentConfig> cells = grid.cells();
  std::vector<std::vector<ResultRow>> results(cells.size());
  std::mutex cache_mutex;
  std::map<std::string, std::shared_future<std::shared_ptr<const Datasets>>> cache;

  auto datasets_for = [&](const DataConfig& data) {
    const std::string key = data.to_json().dump();
    std::promise<std::shared_ptr<const Datasets>> promise;
    std::shared_future<std::shared_ptr<const Datasets>> future;
    bool owner = false;
    {
      std::lock_guard<std::mutex> lock(cache_mutex);
      auto it = cache.find(key);
      if (it == cache.end()) {
        future = promise.get_future().share();
        cache.emplace(key, future);
        owner = true;
      } else {
        future = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(std::make_shared<const Datasets>(make_datasets(data)));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return future.get();
  };

  auto run_cell = [&](std::size_t index) {
    const ExperimentConfig& base_cfg = cells[index];
    const std::vector<double> evals = grid.eval_ratios.empty() ? std::vector<double>{base_cfg.eval_ratio}
                                                               : grid.eval_ratios;
    const auto start = std::chrono::steady_clock::now();
    std::vector<ResultRow>& rows = results[index];
    try {
      const auto data = datasets_for(base_cfg.data);
      ExperimentConfig cfg = base_cfg;
      cfg.model = fit_model_to_data(cfg.model, data->train, cfg.task);
      ExperimentConfig train_cfg = cfg;
      train_cfg.eval_ratio = 1.0;
      const TrainOutcome outcome = train(train_cfg, data->train, {});
      for (double r : evals) {
        ResultRow row = evaluate(outcome.network, data->eval, cfg.strategy, r, cfg.tau, cfg.seed,
                                 cfg.data.scene.lambda);
        row.train_ratio = cfg.train_ratio;
        ExperimentConfig tagged = base_cfg;
        tagged.eval_ratio = r;
        row.digest = tagged.digest();
        rows.push_back(std::move(row));
      }
    } catch (const std::exception& e) {
      log_message(LogLevel::error, "sweep cell " + std::to_string(index) + " failed: " + e.what());
      rows.clear();
      for (double r : evals) {
        ResultRow row;
        ExperimentConfig tagged = base_cfg;
        tagged.eval_ratio = r;
        row.digest = tagged.digest();
        row.task = base_cfg.task;
        row.strategy = base_cfg.strategy;
        row.train_ratio = base_cfg.train_ratio;
        row.eval_ratio = r;
        if (base_cfg.strategy == Strategy::ms3) row.tau = base_cfg.tau;
        row.patch_size = base_cfg.model.patch_size;
        row.lambda = base_cfg.data.scene.lambda;
        row.seed = base_cfg.seed;
        row.metric_name = metric_name(base_cfg.task);
        row.metric_value = std::nan("");
        row.error = e.what();
        rows.push_back(std::move(row));
      }
    }
    if (options.wall_clock) {
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      for (ResultRow& row : rows) row.wall_s = wall;
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, cells.size()));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t j = 0; j < jobs; ++j) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
      });
    }
    for (auto& w : workers) w.join();
  }
  std::vector<ResultRow> out;
  for (auto& rows : results) {
    for (auto& row : rows) out.push_back(std::move(row));
  }
  return out;
}

std::string csv_header() {
  return "task,strategy,train_ratio,eval_ratio,tau,patch_size,lambda,seed,metric_name,metric_value,gflops,"
         "peak_mem_mb,wall_s\n";
}

std::string csv_row(const ResultRow& row) {
  std::ostringstream out;
  out << to_string(row.task) << ',' << to_string(row.strategy) << ',' << fmt(row.train_ratio) << ','
      << fmt(row.eval_ratio) << ',' << (row.tau ? fmt(*row.tau) : std::string()) << ',' << row.patch_size
      << ',' << fmt(row.lambda) << ',' << row.seed << ',' << row.metric_name << ','
      << fmt(row.metric_value) << ',' << fmt(row.gflops) << ',' << fmt(row.peak_mem_mb) << ','
      << fmt(row.wall_s) << '\n';
  return out.str();
}

std::string to_csv(const std::vector<ResultRow>& rows) {
  std::string out = csv_header();
  for (const ResultRow& row : rows) out += csv_row(row);
  return out;
}

std::string summary_csv(const std::vector<ResultRow>& rows) {
  struct Group {
    const ResultRow* first = nullptr;
    std::vector<double> values;
    std::size_t failed = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Group> groups;
  for (const ResultRow& row : rows) {
    auto [it, inserted] = groups.try_emplace(row.digest);
    if (inserted) {
      order.push_back(row.digest);
      it->second.first = &row;
    }
    if (row.error.empty()) {
      it->second.values.push_back(row.metric_value);
    } else {
      ++it->second.failed;
    }
  }
  std::ostringstream out;
  out << "task,strategy,train_ratio,eval_ratio,tau,patch_size,lambda,metric_name,mean,std,n,failed\n";
  for (const std::string& key : order) {
    const Group& g = groups[key];
    const ResultRow& r = *g.first;
    const MeanStd ms = mean_std(g.values);
    out << to_string(r.task) << ',' << to_string(r.strategy) << ',' << fmt(r.train_ratio) << ','
        << fmt(r.eval_ratio) << ',' << (r.tau ? fmt(*r.tau) : std::string()) << ',' << r.patch_size << ','
        << fmt(r.lambda) << ',' << r.metric_name << ',' << fmt(ms.mean) << ',' << fmt(ms.std) << ','
        << g.values.size() << ',' << g.failed << '\n';
  }
  return out.str();
}

std::vector<double> normalize_curve(const std::vector<double>& ratios, const std::vector<double>& metrics) {
  if (ratios.size() != metrics.size() || ratios.empty()) throw ShapeError("normalize_curve: bad series");
  const std::size_t top = static_cast<std::size_t>(std::max_element(ratios.begin(), ratios.end()) - ratios.begin());
  const double base = metrics[top];
  std::vector<double> out(metrics.size());
  for (std::size_t i = 0; i < metrics.size(); ++i) out[i] = base != 0.0 ? metrics[i] / base : 0.0;
  return out;
}

}  // namespace rvit
