#include <doctest.h>

#include <cmath>

#include "rvit/metrics.hpp"

TEST_CASE("macro F1 by hand") {
  rvit::MacroF1 f1(2);
  // class 0: tp 1, fp 1, fn 0 -> 2/3. class 1: tp 1, fp 0, fn 1 -> 2/3.
  f1.add_predicted(std::vector<std::uint8_t>{1, 1}, std::vector<std::uint8_t>{1, 1});
  f1.add_predicted(std::vector<std::uint8_t>{1, 0}, std::vector<std::uint8_t>{0, 1});
  CHECK(f1.value() == doctest::Approx(2.0 / 3.0));
  CHECK(f1.per_class()[0] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("macro F1 thresholds logits at zero") {
  rvit::MacroF1 f1(3);
  f1.add(std::vector<double>{0.1, -0.1, 0.0}, std::vector<std::uint8_t>{1, 0, 0});
  CHECK(f1.value() == 1.0);
}

TEST_CASE("all-negative labels and predictions give F1 of 1") {
  rvit::MacroF1 f1(4);
  for (int i = 0; i < 3; ++i) f1.add(std::vector<double>(4, -1.0), std::vector<std::uint8_t>(4, 0));
  CHECK(f1.value() == 1.0);
  rvit::MacroF1 miss(1);
  miss.add(std::vector<double>{-1.0}, std::vector<std::uint8_t>{1});
  CHECK(miss.value() == 0.0);
}

TEST_CASE("mean IoU") {
  rvit::MeanIoU iou(3);
  const std::vector<std::uint8_t> t{0, 0, 1, 1};
  iou.add(t, t);
  CHECK(iou.value() == 1.0);  // class 2 absent, skipped
  rvit::MeanIoU half(2);
  half.add(std::vector<std::uint8_t>{0, 0, 0, 1}, std::vector<std::uint8_t>{0, 0, 1, 1});
  // class 0: 2 / 3, class 1: 1 / 2
  CHECK(half.value() == doctest::Approx((2.0 / 3.0 + 0.5) / 2.0));
  CHECK(rvit::MeanIoU(2).value() == 1.0);
  CHECK_THROWS(half.add(std::vector<std::uint8_t>{0}, std::vector<std::uint8_t>{0, 1}));
  CHECK_THROWS(half.add(std::vector<std::uint8_t>{5}, std::vector<std::uint8_t>{0}));
}

TEST_CASE("spearman") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  CHECK(rvit::spearman(a, std::vector<double>{2, 4, 6, 8, 100}) == doctest::Approx(1.0));
  CHECK(rvit::spearman(a, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(rvit::spearman(a, std::vector<double>{1, 1, 1, 1, 1}) == 0.0);
  // ranks with ties: b -> {1.5, 1.5, 3, 4, 5}
  const std::vector<double> b{7, 7, 8, 9, 10};
  const double rx[] = {1, 2, 3, 4, 5}, ry[] = {1.5, 1.5, 3, 4, 5};
  double mx = 3, my = 3, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 5; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  CHECK(rvit::spearman(a, b) == doctest::Approx(sxy / std::sqrt(sxx * syy)));
  CHECK_THROWS(rvit::spearman(a, std::vector<double>{1, 2}));
}

TEST_CASE("mean and sample std") {
  const auto m = rvit::mean_std(std::vector<double>{1, 2, 3, 4});
  CHECK(m.mean == 2.5);
  CHECK(m.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(rvit::mean_std(std::vector<double>{3}).std == 0.0);
}
