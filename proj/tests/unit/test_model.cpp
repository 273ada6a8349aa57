#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rvit/model.hpp"

using rvit::Tensor;
namespace nk = rvit::nk;

namespace {

rvit::ModelConfig small_config(rvit::Task task) {
  rvit::ModelConfig cfg;
  cfg.task = task;
  cfg.width = 16;
  cfg.depth = 4;
  cfg.heads = 4;
  cfg.mlp_ratio = 2;
  cfg.patch_size = 4;
  cfg.channels = 2;
  cfg.image_h = 16;
  cfg.image_w = 12;
  cfg.classes = 3;
  cfg.decoder_width = 8;
  return cfg;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Rows [row0, row0 + rows) of a [*, D] tensor.
std::vector<double> rows_of(const Tensor& t, std::size_t row0, std::size_t rows) {
  const std::size_t d = t.dim(1);
  return {t.vec().begin() + static_cast<long>(row0 * d), t.vec().begin() + static_cast<long>((row0 + rows) * d)};
}

}  // namespace

TEST_CASE("config validation") {
  rvit::ModelConfig cfg = small_config(rvit::Task::classification);
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.tap_blocks() == std::vector<std::size_t>{1, 2, 3, 4});
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), rvit::ConfigError);
  cfg = small_config(rvit::Task::classification);
  cfg.image_w = 13;
  CHECK_THROWS_AS(cfg.validate(), rvit::ConfigError);
  cfg = small_config(rvit::Task::classification);
  cfg.depth = 8;
  CHECK(cfg.tap_blocks() == std::vector<std::size_t>{2, 4, 6, 8});
  cfg.taps = {1, 9, 2, 3};
  CHECK_THROWS_AS(cfg.validate(), rvit::ConfigError);
  CHECK(rvit::ModelConfig::from_json(small_config(rvit::Task::segmentation).to_json()).to_json() ==
        small_config(rvit::Task::segmentation).to_json());
}

TEST_CASE("parameter count matches the allocated network") {
  for (auto task : {rvit::Task::classification, rvit::Task::segmentation}) {
    const rvit::ModelConfig cfg = small_config(task);
    const rvit::Network net(cfg, 1);
    CHECK(rvit::parameter_count(cfg) == net.params().scalar_count());
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  const rvit::ModelConfig cfg = small_config(rvit::Task::classification);
  CHECK(rvit::Network(cfg, 5).params() == rvit::Network(cfg, 5).params());
  CHECK_FALSE(rvit::Network(cfg, 5).params() == rvit::Network(cfg, 6).params());
}

TEST_CASE("unmasked encoder matches the plain-loop reference") {
  for (auto task : {rvit::Task::classification, rvit::Task::segmentation}) {
    const rvit::ModelConfig cfg = small_config(task);
    rvit::Network net(cfg, 21);
    rvit::SplitMix64 rng(4);
    // Nonzero norm parameters so every term participates.
    for (std::size_t i = 0; i < net.params().size(); ++i) {
      for (double& v : net.params()[i].data()) v += 0.1 * rng.normal();
    }
    const Tensor px = oracle::random_tensor(rng, {cfg.image_h, cfg.image_w, cfg.channels});
    const rvit::PatchGrid grid = rvit::partition(px, cfg.patch_size);
    const rvit::RetentionPlan plan = rvit::RetentionPlan::full(grid.count());
    const rvit::PatchGrid* grids[] = {&grid};
    const rvit::RetentionPlan* plans[] = {&plan};

    nk::Tape tape;
    const rvit::BoundParams p = net.bind(tape, false, false);
    const rvit::TokenInput in = net.embed(tape, p, grids, plans);
    const rvit::Encoded enc = net.encode(tape, p, in);
    const oracle::ReferenceOutput ref = oracle::reference_forward(net, px);

    CHECK(max_abs_diff(enc.class_embedding.value().data(), ref.class_embedding) < 1e-12);
    REQUIRE(enc.taps.size() == ref.taps.size());
    for (std::size_t t = 0; t < ref.taps.size(); ++t) {
      CHECK(max_abs_diff(enc.taps[t].value().data(), ref.taps[t].data()) < 1e-12);
    }
    if (task == rvit::Task::classification) {
      const nk::Var logits = net.classify(tape, p, enc.class_embedding);
      CHECK(max_abs_diff(logits.value().data(), ref.logits) < 1e-12);
    }
  }
}

TEST_CASE("padding does not leak into real tokens") {
  const rvit::ModelConfig cfg = small_config(rvit::Task::classification);
  const rvit::Network net(cfg, 8);
  rvit::SplitMix64 rng(9);
  const rvit::PatchGrid a = rvit::partition(oracle::random_tensor(rng, {16, 12, 2}), 4);
  const rvit::PatchGrid b = rvit::partition(oracle::random_tensor(rng, {16, 12, 2}), 4);
  const rvit::RetentionPlan pa = rvit::ms1_uniform(rvit::SampleSeed::from_key("a"), 0.25, a.count());
  const rvit::RetentionPlan pb = rvit::ms1_uniform(rvit::SampleSeed::from_key("b"), 0.75, b.count());

  auto run = [&](std::vector<const rvit::PatchGrid*> gs, std::vector<const rvit::RetentionPlan*> ps) {
    nk::Tape tape;
    const rvit::BoundParams p = net.bind(tape, false, false);
    const rvit::Encoded enc = net.encode(tape, p, net.embed(tape, p, gs, ps));
    return std::pair{enc.class_embedding.value(), enc.taps.back().value()};
  };
  const auto [alone, alone_tap] = run({&a}, {&pa});
  const auto [both, both_tap] = run({&a, &b}, {&pa, &pb});
  CHECK(both.dim(0) == 2);
  CHECK(max_abs_diff(rows_of(both, 0, 1), alone.data()) < 1e-12);
  CHECK(max_abs_diff(rows_of(both_tap, 0, 1 + pa.kept()), rows_of(alone_tap, 0, 1 + pa.kept())) < 1e-12);
  const auto [b_alone, unused] = run({&b}, {&pb});
  CHECK(max_abs_diff(rows_of(both, 1, 1), b_alone.data()) < 1e-12);
}

TEST_CASE("masked forward sees only retained patches") {
  const rvit::ModelConfig cfg = small_config(rvit::Task::classification);
  const rvit::Network net(cfg, 8);
  rvit::SplitMix64 rng(10);
  Tensor px = oracle::random_tensor(rng, {16, 12, 2});
  const rvit::PatchGrid g1 = rvit::partition(px, 4);
  const rvit::RetentionPlan plan = rvit::ms1_uniform(rvit::SampleSeed::from_key("k"), 0.5, g1.count());
  // Overwrite a dropped patch.
  std::size_t dropped = 0;
  while (plan.mask[dropped]) ++dropped;
  rvit::PatchGrid g2 = g1;
  for (std::size_t j = 0; j < g2.patches.dim(1); ++j) g2.patches.at(dropped, j) = 100.0;

  auto cls = [&](const rvit::PatchGrid& g) {
    nk::Tape tape;
    const rvit::BoundParams p = net.bind(tape, false, false);
    const rvit::PatchGrid* gs[] = {&g};
    const rvit::RetentionPlan* ps[] = {&plan};
    return net.forward(tape, p, gs, ps).value();
  };
  CHECK(cls(g1) == cls(g2));
}

TEST_CASE("scatter back places features at their grid cells") {
  rvit::RetentionPlan plan;
  plan.total = 6;
  plan.indices = {4, 1};
  plan.mask = {0, 1, 0, 0, 1, 0};
  const Tensor f = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Tensor m = rvit::scatter_back(f, plan, 2, 3);
  CHECK(m.shape() == rvit::Shape{3, 2, 3});
  for (std::size_t d = 0; d < 3; ++d) {
    for (std::size_t cell = 0; cell < 6; ++cell) {
      const double want = cell == 4 ? f.at(0, d) : cell == 1 ? f.at(1, d) : 0.0;
      CHECK(m[d * 6 + cell] == want);
    }
  }
  CHECK_THROWS(rvit::scatter_back(Tensor({3, 3}), plan, 2, 3));
}

TEST_CASE("taped scatter back agrees with the plain one") {
  rvit::SplitMix64 rng(12);
  const rvit::RetentionPlan p0 = rvit::ms1_uniform(rvit::SampleSeed::from_key("x"), 0.5, 6);
  const rvit::RetentionPlan p1 = rvit::RetentionPlan::full(6);
  const std::size_t seq = 7, d = 3;
  const Tensor tap = oracle::random_tensor(rng, {2 * seq, d});
  nk::Tape tape;
  const rvit::RetentionPlan* plans[] = {&p0, &p1};
  const Tensor out = rvit::scatter_back(tape.constant(tap), plans, seq, 2, 3).value();
  CHECK(out.shape() == rvit::Shape{2, d, 2, 3});
  for (std::size_t b = 0; b < 2; ++b) {
    const rvit::RetentionPlan& pl = *plans[b];
    Tensor feats({pl.kept(), d});
    for (std::size_t i = 0; i < pl.kept(); ++i) {
      for (std::size_t c = 0; c < d; ++c) feats.at(i, c) = tap.at(b * seq + 1 + i, c);
    }
    const Tensor want = rvit::scatter_back(feats, pl, 2, 3);
    CHECK(max_abs_diff(rows_of(out.reshaped({2, d * 6}), b, 1), want.data()) == 0.0);
  }
}

TEST_CASE("segmentation forward shape and dropped-cell dependence") {
  const rvit::ModelConfig cfg = small_config(rvit::Task::segmentation);
  const rvit::Network net(cfg, 2);
  rvit::SplitMix64 rng(13);
  const rvit::PatchGrid g = rvit::partition(oracle::random_tensor(rng, {16, 12, 2}), 4);
  const rvit::RetentionPlan plan = rvit::ms1_uniform(rvit::SampleSeed::from_key("s"), 0.25, g.count());
  nk::Tape tape;
  const rvit::BoundParams p = net.bind(tape, false, false);
  const rvit::PatchGrid* gs[] = {&g};
  const rvit::RetentionPlan* ps[] = {&plan};
  const Tensor out = net.forward(tape, p, gs, ps).value();
  CHECK(out.shape() == rvit::Shape{1, 3, 16, 12});
  // All dropped cells decode from zero features, so they share logits.
  std::vector<double> first;
  for (std::size_t cell = 0; cell < g.count(); ++cell) {
    if (plan.mask[cell]) continue;
    const std::size_t y = (cell / 3) * 4, x = (cell % 3) * 4;
    std::vector<double> logits;
    for (std::size_t c = 0; c < 3; ++c) logits.push_back(out[(c * 16 + y) * 12 + x]);
    if (first.empty()) first = logits;
    CHECK(logits == first);
  }
}

TEST_CASE("reset_head leaves the encoder alone") {
  rvit::Network net(small_config(rvit::Task::classification), 3);
  for (std::size_t i = net.head_begin(); i < net.params().size(); ++i) net.params()[i].fill(0.5);
  const rvit::Params before = net.params();
  net.reset_head(99);
  for (std::size_t i = 0; i < net.head_begin(); ++i) CHECK(net.params()[i] == before[i]);
  bool changed = false;
  for (std::size_t i = net.head_begin(); i < net.params().size(); ++i) changed |= !(net.params()[i] == before[i]);
  CHECK(changed);
}
