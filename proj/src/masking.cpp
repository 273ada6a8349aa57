#include "rvit/masking.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace rvit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ConfigError("retention ratio " + std::to_string(ratio) + " is outside (0, 1]");
  }
}

std::size_t checked_count(double ratio, std::size_t n) {
  check_ratio(ratio);
  if (n == 0) throw ConfigError("token count N must be at least 1");
  const std::size_t k = retained_count(ratio, n);
  if (k == 0) {
    throw ConfigError("degenerate retention: floor(" + std::to_string(ratio) + " * " +
                      std::to_string(n) + ") = 0 tokens");
  }
  return k;
}

RetentionPlan finish_plan(Strategy strategy, std::size_t n, std::vector<std::size_t> indices) {
  RetentionPlan plan;
  plan.strategy = strategy;
  plan.total = n;
  plan.mask.assign(n, 0);
  for (std::size_t i : indices) plan.mask[i] = 1;
  plan.indices = std::move(indices);
  return plan;
}

}  // namespace

std::string to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::ms1: return "ms1";
    case Strategy::ms2: return "ms2";
    case Strategy::ms3: return "ms3";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "ms1") return Strategy::ms1;
  if (name == "ms2") return Strategy::ms2;
  if (name == "ms3") return Strategy::ms3;
  throw ConfigError("unknown masking strategy '" + std::string(name) + "' (expected ms1, ms2 or ms3)");
}

std::uint64_t fnv1a64(std::string_view key) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char byte : key) {
    h ^= byte;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t SplitMix64::next() {
  state_ += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double SplitMix64::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SampleSeed SampleSeed::from_key(std::string key) {
  const std::uint64_t seed = fnv1a64(key);
  return SampleSeed{std::move(key), seed};
}

std::size_t retained_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

RetentionPlan RetentionPlan::full(std::size_t n) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  RetentionPlan plan = finish_plan(Strategy::ms1, n, std::move(all));
  plan.ratio = 1.0;
  return plan;
}

nlohmann::json to_json(const RetentionPlan& plan) {
  nlohmann::json doc;
  doc["strategy"] = to_string(plan.strategy);
  if (plan.strategy == Strategy::ms3) {
    doc["tau"] = plan.tau;
  } else {
    doc["r"] = plan.ratio;
  }
  doc["N"] = plan.total;
  doc["k"] = plan.kept();
  doc["indices"] = plan.indices;
  if (plan.seed) {
    doc["seed"] = *plan.seed;
  } else {
    doc["seed"] = nullptr;
  }
  return doc;
}

RetentionPlan plan_from_json(const nlohmann::json& doc) {
  try {
    const Strategy strategy = parse_strategy(doc.at("strategy").get<std::string>());
    const auto n = doc.at("N").get<std::size_t>();
    auto indices = doc.at("indices").get<std::vector<std::size_t>>();
    for (std::size_t i : indices) {
      if (i >= n) throw ConfigError("plan index " + std::to_string(i) + " out of range");
    }
    RetentionPlan plan = finish_plan(strategy, n, std::move(indices));
    if (strategy == Strategy::ms3) {
      plan.tau = doc.at("tau").get<double>();
      plan.ratio = n ? static_cast<double>(plan.kept()) / static_cast<double>(n) : 0.0;
    } else {
      plan.ratio = doc.at("r").get<double>();
    }
    if (doc.contains("seed") && !doc["seed"].is_null()) plan.seed = doc["seed"].get<std::uint64_t>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed retention plan: ") + e.what());
  }
}

SimilarityMatrix similarity_from_values(Tensor values) {
  if (values.rank() != 2 || values.dim(0) != values.dim(1)) {
    throw ShapeError("similarity matrix must be square, got " + shape_str(values.shape()));
  }
  const std::size_t n = values.dim(0);
  SimilarityMatrix sim;
  sim.mean_similarity.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += values.at(i, j);
    sim.mean_similarity[i] = total / static_cast<double>(n);
  }
  sim.values = std::move(values);
  return sim;
}

SimilarityMatrix similarity_matrix(const PatchGrid& grid) {
  const std::size_t n = grid.count(), dim = grid.patch_dim();
  if (n == 0) throw ShapeError("similarity_matrix: grid has no patches");
  RowMat unit = Eigen::Map<const RowMat>(grid.patches.ptr(), n, dim);
  std::vector<bool> zero(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = unit.row(i).norm();
    if (norm == 0.0) {
      zero[i] = true;
    } else {
      unit.row(i) /= norm;
    }
  }
  RowMat gram = unit * unit.transpose();
  Tensor values({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    values.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = (zero[i] || zero[j]) ? 0.0 : std::clamp(gram(i, j), -1.0, 1.0);
      // Rounding can leave identical patches just below 1.
      if (s > 1.0 - 1e-9 &&
          std::equal(grid.patches.ptr() + i * dim, grid.patches.ptr() + (i + 1) * dim, grid.patches.ptr() + j * dim)) {
        s = 1.0;
      }
      values.at(i, j) = s;
      values.at(j, i) = s;
    }
  }
  return similarity_from_values(std::move(values));
}

RetentionPlan ms1_uniform(const SampleSeed& seed, double ratio, std::size_t n) {
  const std::size_t k = checked_count(ratio, n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  SplitMix64 rng(seed.seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next() % (i + 1));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(k);
  RetentionPlan plan = finish_plan(Strategy::ms1, n, std::move(perm));
  plan.ratio = ratio;
  plan.seed = seed.seed;
  return plan;
}

RetentionPlan ms2_diversity(const SimilarityMatrix& sim, double ratio) {
  const std::size_t n = sim.size();
  const std::size_t k = checked_count(ratio, n);
  const auto& mean = sim.mean_similarity;
  std::size_t first = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (mean[i] < mean[first]) first = i;
  }
  std::vector<std::size_t> chosen{first};
  std::vector<std::uint8_t> taken(n, 0);
  taken[first] = 1;
  // Highest similarity of each candidate to the chosen set.
  std::vector<double> closest(n);
  for (std::size_t i = 0; i < n; ++i) closest[i] = sim(i, first);
  while (chosen.size() < k) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || closest[i] < closest[best]) best = i;
    }
    chosen.push_back(best);
    taken[best] = 1;
    for (std::size_t i = 0; i < n; ++i) closest[i] = std::max(closest[i], sim(i, best));
  }
  RetentionPlan plan = finish_plan(Strategy::ms2, n, std::move(chosen));
  plan.ratio = ratio;
  return plan;
}

RetentionPlan ms3_select(const SimilarityMatrix& sim, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw ConfigError("similarity threshold " + std::to_string(tau) + " is outside (0, 1]");
  }
  const std::size_t n = sim.size();
  if (n == 0) throw ConfigError("ms3_select: empty similarity matrix");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i) {
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) peak = std::max(peak, sim(i, j));
    }
    if (peak < tau) kept.push_back(i);
  }
  if (kept.empty()) {
    const auto& mean = sim.mean_similarity;
    kept.push_back(static_cast<std::size_t>(std::min_element(mean.begin(), mean.end()) - mean.begin()));
  }
  RetentionPlan plan = finish_plan(Strategy::ms3, n, std::move(kept));
  plan.tau = tau;
  plan.ratio = static_cast<double>(plan.kept()) / static_cast<double>(n);
  return plan;
}

TokenBatch collate(std::span<const Tensor> sequences, std::size_t max_len) {
  if (sequences.empty()) throw ConfigError("collate: empty batch");
  const std::size_t d = sequences.front().dim(1);
  std::size_t longest = 0;
  for (const Tensor& s : sequences) {
    if (s.rank() != 2 || s.dim(1) != d) {
      throw ShapeError("collate: sequence " + shape_str(s.shape()) + " does not have width " +
                       std::to_string(d));
    }
    longest = std::max(longest, s.dim(0));
  }
  const std::size_t seq_len = max_len ? std::min(longest, max_len) : longest;
  TokenBatch batch;
  batch.tokens = Tensor({sequences.size(), seq_len, d});
  batch.mask.assign(sequences.size() * seq_len, 0);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    const std::size_t k = std::min(sequences[b].dim(0), seq_len);
    std::copy_n(sequences[b].ptr(), k * d, batch.tokens.ptr() + b * seq_len * d);
    std::fill_n(batch.mask.begin() + static_cast<std::ptrdiff_t>(b * seq_len), k, 1);
    batch.counts.push_back(k);
  }
  return batch;
}

TokenBatch ms3_thresholded(std::span<const SimilarityMatrix> sims, double tau, const Tensor& tokens) {
  if (tokens.rank() != 3 || tokens.dim(0) != sims.size()) {
    throw ShapeError("ms3_thresholded: tokens " + shape_str(tokens.shape()) + " do not match " +
                     std::to_string(sims.size()) + " similarity matrices");
  }
  const std::size_t n = tokens.dim(1), d = tokens.dim(2);
  std::vector<Tensor> kept;
  kept.reserve(sims.size());
  for (std::size_t b = 0; b < sims.size(); ++b) {
    if (sims[b].size() != n) throw ShapeError("ms3_thresholded: similarity size differs from N");
    const RetentionPlan plan = ms3_select(sims[b], tau);
    Tensor seq({plan.kept(), d});
    for (std::size_t r = 0; r < plan.kept(); ++r) {
      std::copy_n(tokens.ptr() + (b * n + plan.indices[r]) * d, d, seq.ptr() + r * d);
    }
    kept.push_back(std::move(seq));
  }
  return collate(kept, n);
}

std::vector<CalibrationRow> calibrate_threshold(std::span<const SimilarityMatrix> sims,
                                                std::span<const double> taus) {
  if (sims.empty()) throw ConfigError("calibrate_threshold: empty dataset");
  // Highest off-diagonal similarity of every token, computed once.
  std::vector<std::vector<double>> peaks;
  peaks.reserve(sims.size());
  for (const auto& sim : sims) {
    std::vector<double> p(sim.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < sim.size(); ++i) {
      for (std::size_t j = 0; j < sim.size(); ++j) {
        if (i != j) p[i] = std::max(p[i], sim(i, j));
      }
    }
    peaks.push_back(std::move(p));
  }
  std::vector<CalibrationRow> rows;
  for (double tau : taus) {
    if (!(tau > 0.0 && tau <= 1.0)) {
      throw ConfigError("calibrate_threshold: tau " + std::to_string(tau) + " outside (0, 1]");
    }
    double total = 0.0;
    for (const auto& p : peaks) {
      const auto kept = static_cast<std::size_t>(
          std::count_if(p.begin(), p.end(), [tau](double v) { return v < tau; }));
      total += static_cast<double>(std::max<std::size_t>(kept, 1)) / static_cast<double>(p.size());
    }
    rows.push_back({tau, total / static_cast<double>(peaks.size()), peaks.size()});
  }
  return rows;
}

std::string calibration_csv(std::span<const CalibrationRow> rows) {
  std::ostringstream out;
  out.precision(10);
  out << "tau,mean_retention,n_samples\n";
  for (const auto& row : rows) out << row.tau << ',' << row.mean_retention << ',' << row.samples << '\n';
  return out.str();
}

RetentionPlan make_plan(Strategy strategy, const PatchGrid& grid, const SimilarityMatrix* sim,
                        const std::string& key, double ratio, double tau) {
  if (strategy == Strategy::ms1) {
    if (ratio >= 1.0) {
      RetentionPlan plan = RetentionPlan::full(grid.count());
      return plan;
    }
    return ms1_uniform(SampleSeed::from_key(key), ratio, grid.count());
  }
  SimilarityMatrix local;
  if (sim == nullptr) {
    local = similarity_matrix(grid);
    sim = &local;
  }
  if (strategy == Strategy::ms2) return ms2_diversity(*sim, ratio);
  return ms3_select(*sim, tau);
}

}  // namespace rvit
