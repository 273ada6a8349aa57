#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace rvit {

// Multi-label F1 accumulated over a dataset. A class is predicted present
// when its logit is positive (probability above 0.5). A class with no true
// positives, false positives or false negatives scores 1.
class MacroF1 {
 public:
  explicit MacroF1(std::size_t classes);
  void add(std::span<const double> logits, std::span<const std::uint8_t> truth);
  void add_predicted(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
  double value() const;
  std::vector<double> per_class() const;

 private:
  std::vector<std::uint64_t> tp_, fp_, fn_;
};

// Mean intersection-over-union from a dataset-wide confusion count. Classes
// absent from both prediction and truth are skipped; if every class is
// skipped the score is 1.
class MeanIoU {
 public:
  explicit MeanIoU(std::size_t classes);
  void add(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
  double value() const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> intersection_, union_;
};

// Spearman rank correlation with average ranks for ties. Zero when either
// series is constant.
double spearman(std::span<const double> a, std::span<const double> b);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for fewer than two values
};
MeanStd mean_std(std::span<const double> values);

}  // namespace rvit
