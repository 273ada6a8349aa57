#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvit/patching.hpp"
#include "rvit/tensor.hpp"

namespace rvit {

enum class Strategy { ms1, ms2, ms3 };

std::string to_string(Strategy strategy);
Strategy parse_strategy(std::string_view name);

// 64-bit FNV-1a over the bytes of the key.
std::uint64_t fnv1a64(std::string_view key);

// splitmix64 stream. Portable and bit-exact on every platform.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  // Uniform in [0, 1) from the top 53 bits.
  double uniform();
  // Standard normal via Box-Muller (one draw per call, the pair partner is discarded).
  double normal();

 private:
  std::uint64_t state_;
};

struct SampleSeed {
  std::string key;
  std::uint64_t seed = 0;

  static SampleSeed from_key(std::string key);
};

// Number of tokens kept at ratio r out of n: floor(r * n), with a 1e-9 slack so
// that products such as 0.29 * 100 are not truncated by representation error.
std::size_t retained_count(double ratio, std::size_t n);

struct RetentionPlan {
  Strategy strategy = Strategy::ms1;
  double ratio = 1.0;  // requested r for MS1/MS2; achieved k/N for MS3
  double tau = 0.0;    // MS3 only
  std::size_t total = 0;
  // Retained patch indices (0-based) in the order the strategy produced them:
  // permutation order for MS1, greedy order for MS2, ascending for MS3.
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> mask;  // mask[i] == 1 iff i is retained
  std::optional<std::uint64_t> seed;

  std::size_t kept() const { return indices.size(); }
  // Every index retained, in ascending order.
  static RetentionPlan full(std::size_t n);
};

nlohmann::json to_json(const RetentionPlan& plan);
RetentionPlan plan_from_json(const nlohmann::json& doc);

// Pixel-space cosine similarities between flattened patches. Zero-norm patches
// have similarity 0 to every other patch and 1 to themselves.
struct SimilarityMatrix {
  Tensor values;                      // [N, N], symmetric
  std::vector<double> mean_similarity;  // row means including the diagonal

  std::size_t size() const { return mean_similarity.size(); }
  double operator()(std::size_t i, std::size_t j) const { return values.at(i, j); }
};

SimilarityMatrix similarity_matrix(const PatchGrid& grid);
// Builds the derived statistics for an explicit matrix (used by tests and tools).
SimilarityMatrix similarity_from_values(Tensor values);

// Uniform random retention seeded by the sample key.
RetentionPlan ms1_uniform(const SampleSeed& seed, double ratio, std::size_t n);
// Greedy farthest-first retention of the most mutually dissimilar patches.
RetentionPlan ms2_diversity(const SimilarityMatrix& sim, double ratio);
// Keeps every patch whose highest similarity to any other patch is below tau.
// Falls back to the single patch with the lowest mean similarity when no
// patch qualifies.
RetentionPlan ms3_select(const SimilarityMatrix& sim, double tau);

// Padded batch of retained tokens with key-padding masks.
struct TokenBatch {
  Tensor tokens;                    // [B, seq_len, D]
  std::vector<std::uint8_t> mask;   // [B, seq_len]
  std::vector<std::size_t> counts;  // k_b

  std::size_t batch() const { return counts.size(); }
  std::size_t seq_len() const { return tokens.dim(1); }
};

// Pads each [k_b, D] sequence with zero rows to the longest one. seq_len is
// capped at max_len when it is nonzero.
TokenBatch collate(std::span<const Tensor> sequences, std::size_t max_len = 0);

// Thresholded selection over a batch of embedded tokens [B, N, D].
TokenBatch ms3_thresholded(std::span<const SimilarityMatrix> sims, double tau,
                           const Tensor& tokens);

struct CalibrationRow {
  double tau = 0.0;
  double mean_retention = 0.0;
  std::size_t samples = 0;
};

std::vector<CalibrationRow> calibrate_threshold(std::span<const SimilarityMatrix> sims,
                                                std::span<const double> taus);
std::string calibration_csv(std::span<const CalibrationRow> rows);

// Convenience dispatcher used by the training loop and tools.
RetentionPlan make_plan(Strategy strategy, const PatchGrid& grid, const SimilarityMatrix* sim,
                        const std::string& key, double ratio, double tau);

}  // namespace rvit
