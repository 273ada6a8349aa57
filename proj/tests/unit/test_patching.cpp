#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rvit/patching.hpp"

using rvit::Tensor;

TEST_CASE("partition then reassemble is the identity") {
  rvit::SplitMix64 rng(1);
  for (std::size_t p : {1u, 2u, 4u, 8u}) {
    Tensor px = oracle::random_tensor(rng, {16, 8, 3});
    const rvit::PatchGrid g = rvit::partition(px, p);
    CHECK(g.count() == (16 / p) * (8 / p));
    CHECK(g.patches.shape() == rvit::Shape{g.count(), p * p * 3});
    CHECK(rvit::reassemble(g) == px);
  }
}

TEST_CASE("patch vectors are laid out row, column, channel") {
  Tensor px({4, 4, 2});
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(i);
  const rvit::PatchGrid g = rvit::partition(px, 2);
  // Patch 1 is grid cell (0, 1): pixel (0, 2) channel 1 is its element 1.
  CHECK(g.patches.at(1, 1) == px[(0 * 4 + 2) * 2 + 1]);
  // Its element (1, 1, 0) is pixel (1, 3) channel 0.
  CHECK(g.patches.at(1, (1 * 2 + 1) * 2 + 0) == px[(1 * 4 + 3) * 2 + 0]);
}

TEST_CASE("partition rejects indivisible extents") {
  CHECK_THROWS_AS(rvit::partition(Tensor({10, 8, 1}), 4), rvit::ShapeError);
  CHECK_THROWS(rvit::partition(Tensor({8, 8, 1}), 0));
}

TEST_CASE("sinusoidal positions") {
  const Tensor t = rvit::sinusoidal_positions(2, 3, 8);
  CHECK(t.shape() == rvit::Shape{7, 8});
  for (std::size_t j = 0; j < 8; ++j) CHECK(t.at(0, j) == 0.0);
  // patch 4 sits at (gy, gx) = (1, 1); with omega_0 = 1 the first entries are sin 1, cos 1.
  CHECK(t.at(5, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(t.at(5, 2) == doctest::Approx(std::cos(1.0)));
  CHECK(t.at(5, 5) == doctest::Approx(std::sin(0.01)));
  CHECK_THROWS(rvit::sinusoidal_positions(2, 2, 6));
}

TEST_CASE("embed keeps plan order and each patch's own position") {
  rvit::SplitMix64 rng(3);
  const rvit::PatchGrid g = rvit::partition(oracle::random_tensor(rng, {8, 8, 1}), 4);
  rvit::EmbeddingConfig cfg;
  cfg.width = 4;
  cfg.projection = oracle::random_tensor(rng, {16, 4});
  cfg.projection_bias = oracle::random_tensor(rng, {4});
  cfg.class_token = oracle::random_tensor(rng, {4});
  cfg.positions = rvit::sinusoidal_positions(2, 2, 4);
  const std::vector<std::size_t> idx{3, 0};
  const Tensor e = rvit::embed(g, idx, cfg);
  CHECK(e.shape() == rvit::Shape{3, 4});
  for (std::size_t d = 0; d < 4; ++d) CHECK(e.at(0, d) == cfg.class_token[d]);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t d = 0; d < 4; ++d) {
      double v = cfg.projection_bias[d] + cfg.positions.at(idx[r] + 1, d);
      for (std::size_t i = 0; i < 16; ++i) v += g.patches.at(idx[r], i) * cfg.projection.at(i, d);
      CHECK(e.at(r + 1, d) == doctest::Approx(v).epsilon(1e-12));
    }
  }
}

TEST_CASE("downscale averages pixels and takes majority labels") {
  rvit::ImageSample s;
  s.pixels = Tensor({2, 2, 1}, std::vector<double>{1, 2, 3, 6});
  s.seg_labels = {2, 1, 1, 2};
  s.class_labels = {0, 1, 1};
  const rvit::ImageSample d = rvit::downscale(s, 2);
  CHECK(d.pixels.shape() == rvit::Shape{1, 1, 1});
  CHECK(d.pixels[0] == 3.0);
  CHECK(d.seg_labels == std::vector<std::uint8_t>{1});
  CHECK(d.class_labels == s.class_labels);
}
