#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rvit/harness.hpp"

namespace {

rvit::ExperimentConfig tiny(rvit::Task task = rvit::Task::classification) {
  rvit::ExperimentConfig cfg;
  cfg.task = task;
  cfg.model.width = 16;
  cfg.model.heads = 2;
  cfg.model.mlp_ratio = 2;
  cfg.model.patch_size = 4;
  cfg.model.decoder_width = 8;
  cfg.data.scene.height = 16;
  cfg.data.scene.width = 16;
  cfg.data.scene.lambda = 4.0;
  cfg.data.train_count = 48;
  cfg.data.eval_count = 24;
  cfg.optim.steps = 12;
  cfg.optim.batch_size = 8;
  return cfg;
}

rvit::SweepGrid tiny_grid() {
  rvit::SweepGrid g;
  g.base = tiny().to_json();
  g.axes = {{"train_ratio", {1.0, 0.5}}};
  g.eval_ratios = {1.0, 0.25};
  g.seeds = {0, 1};
  return g;
}

}  // namespace

TEST_CASE("config json round trip and digest") {
  rvit::ExperimentConfig cfg = tiny(rvit::Task::segmentation);
  cfg.strategy = rvit::Strategy::ms3;
  cfg.tau = 0.8;
  const rvit::ExperimentConfig back = rvit::ExperimentConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.model.task == rvit::Task::segmentation);
  rvit::ExperimentConfig other = cfg;
  other.seed = 9;
  CHECK(other.digest() == cfg.digest());
  other.train_ratio = 0.5;
  CHECK(other.digest() != cfg.digest());
}

TEST_CASE("config validation") {
  rvit::ExperimentConfig cfg = tiny();
  CHECK_NOTHROW(cfg.validate());
  cfg.train_ratio = 0.0;
  CHECK_THROWS_AS(cfg.validate(), rvit::ConfigError);
  cfg = tiny();
  cfg.eval_ratio = 1.5;
  CHECK_THROWS_AS(cfg.validate(), rvit::ConfigError);
  cfg = tiny();
  cfg.optim.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), rvit::ConfigError);
  cfg = tiny();
  cfg.strategy = rvit::Strategy::ms3;
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), rvit::ConfigError);
  CHECK_THROWS_AS(rvit::ExperimentConfig::from_json({{"task", "regression"}}), rvit::ConfigError);
}

TEST_CASE("one small step lowers the loss on a fixed batch") {
  for (auto task : {rvit::Task::classification, rvit::Task::segmentation}) {
    rvit::ExperimentConfig cfg = tiny(task);
    const rvit::Datasets data = rvit::make_datasets(cfg.data);
    rvit::Network net(rvit::fit_model_to_data(cfg.model, data.train, task), 1);
    std::vector<const rvit::ImageSample*> batch;
    std::vector<rvit::RetentionPlan> plans;
    for (std::size_t i = 0; i < 8; ++i) {
      batch.push_back(&data.train[i]);
      const rvit::PatchGrid g = rvit::partition(data.train[i], 4);
      plans.push_back(rvit::plan_for(data.train[i], g, rvit::Strategy::ms1, 0.5, 0.9, data.train[i].key));
    }
    rvit::OptimizerConfig opt;
    opt.step_size = 1e-3;
    std::vector<rvit::Tensor> velocity;
    const double before = rvit::batch_loss(net, batch, plans);
    const double reported = rvit::sgd_step(net, batch, plans, opt, velocity);
    CHECK(reported == doctest::Approx(before).epsilon(1e-12));
    CHECK(rvit::batch_loss(net, batch, plans) < before);
  }
}

TEST_CASE("divergence is reported") {
  rvit::ExperimentConfig cfg = tiny();
  cfg.optim.step_size = 1e300;
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  CHECK_THROWS_WITH(rvit::train(cfg, data.train, data.eval), doctest::Contains("diverged"));
}

TEST_CASE("training is deterministic and full retention is plain training") {
  const rvit::ExperimentConfig cfg = tiny();
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  const rvit::TrainOutcome a = rvit::train(cfg, data.train, data.eval);
  const rvit::TrainOutcome b = rvit::train(cfg, data.train, data.eval);
  CHECK(a.network.params() == b.network.params());
  CHECK(a.losses == b.losses);
  CHECK(a.row.metric_value == b.row.metric_value);
  CHECK(a.losses.size() == cfg.optim.steps);
  CHECK(a.row.metric_value >= 0.0);
  CHECK(a.row.metric_value <= 1.0);
  CHECK(a.row.metric_name == "macro_f1");
  rvit::ExperimentConfig ms2 = cfg;
  ms2.strategy = rvit::Strategy::ms2;
  CHECK(rvit::train(ms2, data.train, data.eval).network.params() == a.network.params());
}

TEST_CASE("evaluation is repeatable and reports cost") {
  rvit::ExperimentConfig cfg = tiny(rvit::Task::segmentation);
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  const rvit::TrainOutcome out = rvit::train(cfg, data.train, data.eval);
  const rvit::ResultRow r1 = rvit::evaluate(out.network, data.eval, rvit::Strategy::ms1, 1.0, 0.9);
  const rvit::ResultRow r2 = rvit::evaluate(out.network, data.eval, rvit::Strategy::ms1, 1.0, 0.9);
  CHECK(r1.metric_value == r2.metric_value);
  CHECK(r1.metric_name == "miou");
  const rvit::ResultRow q = rvit::evaluate(out.network, data.eval, rvit::Strategy::ms1, 0.25, 0.9);
  CHECK(q.mean_retention == doctest::Approx(0.25));
  CHECK(q.gflops < r1.gflops);
  const rvit::ResultRow t = rvit::evaluate(out.network, data.eval, rvit::Strategy::ms3, 0.5, 0.9);
  CHECK(t.mean_retention > 0.0);
  CHECK(t.mean_retention <= 1.0);
  CHECK(t.tau.has_value());
}

TEST_CASE("evaluation rejects mismatched data") {
  const rvit::ExperimentConfig cfg = tiny();
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  const rvit::Network net(rvit::fit_model_to_data(cfg.model, data.train, cfg.task), 0);
  rvit::DataConfig bigger = cfg.data;
  bigger.scene.height = 32;
  const rvit::Datasets other = rvit::make_datasets(bigger);
  CHECK_THROWS_AS(rvit::evaluate(net, other.eval, rvit::Strategy::ms1, 1.0, 0.9), rvit::ShapeError);
  CHECK_THROWS(rvit::evaluate(net, {}, rvit::Strategy::ms1, 1.0, 0.9));
}

TEST_CASE("probe keeps the encoder frozen") {
  const rvit::ExperimentConfig cfg = tiny();
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  const rvit::TrainOutcome base = rvit::train(cfg, data.train, data.eval);
  const rvit::Params before = base.network.params();
  rvit::ExperimentConfig target = tiny(rvit::Task::segmentation);
  const rvit::ProbeOutcome probe = rvit::linear_probe(base.network, target, data.train, data.eval);
  CHECK(base.network.params() == before);
  for (std::size_t i = 0; i < base.network.head_begin(); ++i) {
    CHECK(probe.network.params()[i] == before[i]);
  }
  CHECK(probe.row.metric_name == "miou");
}

TEST_CASE("zero-step probe is an untrained head") {
  const rvit::ExperimentConfig cfg = tiny();
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  const rvit::TrainOutcome base = rvit::train(cfg, data.train, data.eval);
  rvit::ExperimentConfig p = cfg;
  p.optim.steps = 0;
  const rvit::ProbeOutcome probe = rvit::linear_probe(base.network, p, data.train, data.eval);
  CHECK(probe.network.params().size() == base.network.params().size());
  for (std::size_t i = base.network.head_begin(); i < base.network.params().size(); ++i) {
    CHECK_FALSE(probe.network.params()[i] == base.network.params()[i]);
  }
}

TEST_CASE("self probe recovers the trained head's metric") {
  rvit::ExperimentConfig cfg = tiny();
  cfg.optim.steps = 60;
  cfg.optim.momentum = 0.9;
  const rvit::Datasets data = rvit::make_datasets(cfg.data);
  const rvit::TrainOutcome base = rvit::train(cfg, data.train, data.eval);
  rvit::ExperimentConfig p = cfg;
  p.optim.steps = 120;
  const rvit::ProbeOutcome probe = rvit::linear_probe(base.network, p, data.train, data.eval);
  CHECK(probe.row.metric_value >= base.row.metric_value - 0.02);
}

TEST_CASE("sweep: empty grid is header only") {
  rvit::SweepGrid g = tiny_grid();
  g.axes = {{"train_ratio", {}}};
  const auto rows = rvit::sweep(g);
  CHECK(rows.empty());
  CHECK(rvit::to_csv(rows) == rvit::csv_header());
  CHECK(rvit::csv_header() ==
        "task,strategy,train_ratio,eval_ratio,tau,patch_size,lambda,seed,metric_name,metric_value,gflops,"
        "peak_mem_mb,wall_s\n");
}

TEST_CASE("sweep: a grid of one is one row") {
  rvit::SweepGrid g;
  g.base = tiny().to_json();
  const auto rows = rvit::sweep(g);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].error.empty());
  CHECK(rows[0].wall_s == 0.0);
}

TEST_CASE("sweep: rerun is identical, jobs do not matter") {
  const rvit::SweepGrid g = tiny_grid();
  const auto a = rvit::sweep(g);
  CHECK(a.size() == 2 * 2 * 2);
  const std::string csv = rvit::to_csv(a);
  CHECK(rvit::to_csv(rvit::sweep(g)) == csv);
  CHECK(rvit::to_csv(rvit::sweep(g, {.jobs = 3})) == csv);
  const std::string summary = rvit::summary_csv(a);
  // header plus one line per (train ratio, eval ratio)
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 1 + 4);
}

TEST_CASE("sweep: failed cells are recorded and the rest continue") {
  rvit::SweepGrid g = tiny_grid();
  g.axes = {{"optim.step_size", {1e300, 0.05}}};
  g.eval_ratios = {};
  g.seeds = {0};
  const auto rows = rvit::sweep(g);
  REQUIRE(rows.size() == 2);
  CHECK(std::isnan(rows[0].metric_value));
  CHECK(rows[0].error.find("diverged") != std::string::npos);
  CHECK(rows[1].error.empty());
  CHECK(std::isfinite(rows[1].metric_value));
  const std::string summary = rvit::summary_csv(rows);
  CHECK(summary.find(",1\n") != std::string::npos);  // failed count of the bad cell
}

TEST_CASE("grid aliases and json") {
  rvit::SweepGrid g;
  g.base = tiny().to_json();
  g.axes = {{"patch_size", {2, 4}}, {"lambda", {1.0, 4.0}}};
  const auto cells = g.cells();
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].model.patch_size == 2);
  CHECK(cells[3].model.patch_size == 4);
  CHECK(cells[1].data.scene.lambda == 4.0);
  CHECK(rvit::SweepGrid::from_json(g.to_json()).to_json() == g.to_json());
  g.axes = {{"model..width", {8}}};
  CHECK_THROWS_AS(g.cells(), rvit::ConfigError);
}

TEST_CASE("curve normalization") {
  const auto n = rvit::normalize_curve({0.25, 1.0, 0.5}, {0.4, 0.8, 0.6});
  REQUIRE(n.size() == 3);
  CHECK(n[0] == doctest::Approx(0.5));
  CHECK(n[1] == 1.0);
  CHECK(n[2] == doctest::Approx(0.75));
  CHECK_THROWS(rvit::normalize_curve({1.0}, {}));
}
