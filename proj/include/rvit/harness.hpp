#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvit/masking.hpp"
#include "rvit/model.hpp"
#include "rvit/synthdata.hpp"

namespace rvit {

enum class LogLevel { error = 0, info = 1, debug = 2 };
// Reads RVIT_LOG once; defaults to error.
LogLevel log_level();
void set_log_level(LogLevel level);
void log_message(LogLevel level, const std::string& message);

struct OptimizerConfig {
  double step_size = 0.05;
  double momentum = 0.0;
  std::size_t steps = 500;
  std::size_t batch_size = 32;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& doc);
};

struct DataConfig {
  SceneSpec scene;
  std::size_t train_count = 2000;
  std::size_t eval_count = 500;
  // Merge groups of this many adjacent classes into one label.
  std::size_t label_group = 1;
  // Block-mean downscaling factor applied after generation.
  std::size_t downscale = 1;

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& doc);
};

struct ExperimentConfig {
  Task task = Task::classification;
  Strategy strategy = Strategy::ms1;
  double train_ratio = 1.0;
  double eval_ratio = 1.0;
  // Threshold used by the thresholded strategy for both training and masked evaluation.
  double tau = 0.9;
  ModelConfig model;
  OptimizerConfig optim;
  DataConfig data;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& doc);
  // Hex FNV-1a of the canonical JSON without the seed.
  std::string digest() const;
};

struct ResultRow {
  std::string digest;
  Task task = Task::classification;
  Strategy strategy = Strategy::ms1;
  double train_ratio = 1.0;
  double eval_ratio = 1.0;
  std::optional<double> tau;
  std::size_t patch_size = 0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::string metric_name;
  double metric_value = 0.0;
  double mean_retention = 1.0;
  double gflops = 0.0;
  double peak_mem_mb = 0.0;
  double wall_s = 0.0;
  std::string error;  // non-empty when the cell failed

  nlohmann::json to_json() const;
};

std::string metric_name(Task task);

struct Datasets {
  std::vector<ImageSample> train;
  std::vector<ImageSample> eval;
};
// Generates both splits and applies class merging and downscaling. Empty
// thresholds select balanced levels for the scene.
Datasets make_datasets(const DataConfig& cfg);

// Model config adjusted to the data shape (image extents, channels, classes).
ModelConfig fit_model_to_data(ModelConfig model, const std::vector<ImageSample>& samples, Task task);

// Retention plan for one sample. ratio >= 1 gives the full plan for every
// strategy; the thresholded strategy uses tau otherwise.
RetentionPlan plan_for(const ImageSample& sample, const PatchGrid& grid, Strategy strategy,
                       double ratio, double tau, const std::string& key);

// Task loss of a batch under the given plans, on a fresh tape.
double batch_loss(const Network& net, const std::vector<const ImageSample*>& batch,
                  const std::vector<RetentionPlan>& plans);

// One SGD update on a batch. velocity is resized on first use. Returns the
// loss before the update.
double sgd_step(Network& net, const std::vector<const ImageSample*>& batch,
                const std::vector<RetentionPlan>& plans, const OptimizerConfig& optim,
                std::vector<Tensor>& velocity, bool train_encoder = true);

struct TrainOutcome {
  Network network;
  std::vector<double> losses;  // per step
  ResultRow row;               // evaluation at cfg.eval_ratio
};

// The model config is fitted to the shape of train_set first.
TrainOutcome train(const ExperimentConfig& cfg, const std::vector<ImageSample>& train_set,
                   const std::vector<ImageSample>& eval_set);

struct Evaluation {
  double metric = 0.0;
  double mean_retention = 1.0;
};

Evaluation evaluate_metric(const Network& net, const std::vector<ImageSample>& samples,
                           Strategy strategy, double ratio, double tau);
ResultRow evaluate(const Network& net, const std::vector<ImageSample>& samples, Strategy strategy,
                   double ratio, double tau, std::uint64_t seed = 0, double lambda = 0.0);

struct ProbeOutcome {
  Network network;
  ResultRow row;
};

// Copies the encoder into a model with a fresh head for target (task and class
// count from cfg, data shape from the target samples) and trains the head only.
ProbeOutcome linear_probe(const Network& frozen, const ExperimentConfig& cfg,
                          const std::vector<ImageSample>& train_set,
                          const std::vector<ImageSample>& eval_set);

// Cartesian grid over dotted config paths, e.g. "train_ratio",
// "model.patch_size", "data.scene.lambda". Every trained cell is evaluated at
// each of eval_ratios (default: the cell's own eval_ratio).
struct SweepGrid {
  nlohmann::json base = nlohmann::json::object();
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;
  std::vector<double> eval_ratios;
  std::vector<std::uint64_t> seeds{0};

  static SweepGrid from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  std::vector<ExperimentConfig> cells() const;
};

struct SweepOptions {
  std::size_t jobs = 1;
  bool wall_clock = false;
};

std::vector<ResultRow> sweep(const SweepGrid& grid, const SweepOptions& options = {});

std::string csv_header();
std::string csv_row(const ResultRow& row);
std::string to_csv(const std::vector<ResultRow>& rows);
// Mean and sample standard deviation over seeds for each config and eval ratio.
std::string summary_csv(const std::vector<ResultRow>& rows);

// Normalizes a retention-vs-metric curve by its value at the highest retention.
std::vector<double> normalize_curve(const std::vector<double>& ratios, const std::vector<double>& metrics);

}  // namespace rvit
