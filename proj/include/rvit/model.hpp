#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvit/autodiff.hpp"
#include "rvit/masking.hpp"
#include "rvit/patching.hpp"
#include "rvit/tensor.hpp"

namespace rvit {

enum class Task { classification, segmentation };

std::string to_string(Task task);
Task parse_task(std::string_view name);

struct ModelConfig {
  Task task = Task::classification;
  std::size_t width = 64;  // D
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t classes = 4;
  std::size_t decoder_width = 64;
  // 1-based blocks whose outputs feed the dense decoder. Empty selects the
  // evenly spaced default depth/4 * {1, 2, 3, 4}.
  std::vector<std::size_t> taps;

  std::size_t grid_h() const { return image_h / patch_size; }
  std::size_t grid_w() const { return image_w / patch_size; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return width / heads; }
  std::vector<std::size_t> tap_blocks() const;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& doc);
};

// Ordered collection of named tensors. Declaration order is the checkpoint order.
class Params {
 public:
  std::size_t add(std::string name, Tensor value);
  std::size_t index(std::string_view name) const;
  Tensor& operator[](std::size_t i) { return entries_[i].second; }
  const Tensor& operator[](std::size_t i) const { return entries_[i].second; }
  Tensor& at(std::string_view name) { return entries_[index(name)].second; }
  const Tensor& at(std::string_view name) const { return entries_[index(name)].second; }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  bool operator==(const Params& other) const = default;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Parameters placed on a tape, index-aligned with Params.
struct BoundParams {
  std::vector<nk::Var> vars;
  nk::Var operator[](std::size_t i) const { return vars[i]; }
};

// Token batch on a tape: class token at row 0 of every sequence, padded rows
// zero. tokens is [B * seq_len, D].
struct TokenInput {
  nk::Var tokens;
  std::vector<std::uint8_t> mask;   // [B, seq_len]
  std::vector<std::size_t> counts;  // retained patches per sample (excludes class token)
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

struct Encoded {
  nk::Var class_embedding;    // [B, D] after the final norm
  std::vector<nk::Var> taps;  // [B * seq_len, D] after each tap block
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

class Network {
 public:
  Network(ModelConfig cfg, std::uint64_t seed);
  Network(ModelConfig cfg, Params params);

  const ModelConfig& config() const { return cfg_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }
  const Tensor& positions() const { return positions_; }
  // Parameters before this index belong to the encoder; the rest to the head.
  std::size_t head_begin() const { return head_begin_; }

  // Fresh task head drawn from seed, encoder weights untouched.
  void reset_head(std::uint64_t seed);

  BoundParams bind(nk::Tape& tape, bool train_encoder, bool train_head) const;

  TokenInput embed(nk::Tape& tape, const BoundParams& p, std::span<const PatchGrid* const> grids,
                   std::span<const RetentionPlan* const> plans) const;
  // Embedding config with the current weights, for the standalone embed().
  EmbeddingConfig embedding_config() const;

  Encoded encode(nk::Tape& tape, const BoundParams& p, const TokenInput& input) const;
  nk::Var classify(nk::Tape& tape, const BoundParams& p, nk::Var class_embedding) const;
  // Scatter every tap back to the grid and decode to [B, classes, H, W].
  nk::Var segment(nk::Tape& tape, const BoundParams& p, const Encoded& enc,
                  std::span<const RetentionPlan* const> plans) const;

  // Task logits: [B, classes] or [B, classes, H, W].
  nk::Var forward(nk::Tape& tape, const BoundParams& p, std::span<const PatchGrid* const> grids,
                  std::span<const RetentionPlan* const> plans) const;

 private:
  struct BlockIndex {
    std::size_t ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_gain, ln2_bias, w1, b1, w2, b2;
  };
  void build_index();
  void add_head(SplitMix64& rng);
  nk::Var block(nk::Tape& tape, const BoundParams& p, const BlockIndex& blk, nk::Var x,
                std::size_t batch, std::size_t seq_len, std::span<const std::uint8_t> mask) const;

  ModelConfig cfg_;
  Params params_;
  Tensor positions_;
  std::size_t head_begin_ = 0;
  std::size_t patch_w_ = 0, patch_b_ = 0, cls_ = 0, norm_g_ = 0, norm_b_ = 0;
  std::vector<BlockIndex> blocks_;
};

// Scalar parameter count of Network(cfg), without allocating it.
std::size_t parameter_count(const ModelConfig& cfg);

// Class-token logits: embedding [B, D] times weight [D, L] plus bias.
nk::Var linear_head(nk::Var embedding, nk::Var weight, nk::Var bias);

// Dense map [D, grid_h, grid_w] with retained features at their grid cells
// and zero vectors elsewhere. features holds one row per plan index, in plan order.
Tensor scatter_back(const Tensor& features, const RetentionPlan& plan, std::size_t grid_h,
                    std::size_t grid_w);

// Same on a tape: tap [B * seq_len, D] with patch j of sample b at row
// b * seq_len + 1 + j. Returns [B, D, grid_h, grid_w].
nk::Var scatter_back(nk::Var tap, std::span<const RetentionPlan* const> plans, std::size_t seq_len,
                     std::size_t grid_h, std::size_t grid_w);

}  // namespace rvit
