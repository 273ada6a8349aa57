#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "rvit/model.hpp"

// Analytic compute and activation-memory accounting for one image.
//
// FLOPs count matrix products only, two per multiply-accumulate. The sequence
// length is the retained patch count plus the class token.
//
// Peak activation memory is the largest set of tensors live at once during
// inference, counted at 4 bytes per value:
//   embed      input image H*W*C + retained patch pixels + token sequence
//   attention  residual, normed input, q, k, v, context (6*T*D) plus one
//              probability map per head (softmax in place, heads*T*T)
//   mlp        residual, normed input, hidden pre-activation and activation
//   head       class embedding and logits
// The full-resolution input is live before patch selection, which bounds the
// savings at very low retention.
namespace rvit {

struct BlockFlops {
  std::uint64_t qkv = 0;
  std::uint64_t logits = 0;
  std::uint64_t values = 0;
  std::uint64_t proj = 0;
  std::uint64_t mlp = 0;

  std::uint64_t total() const { return qkv + logits + values + proj + mlp; }
};

struct CostReport {
  std::string config_name;
  std::size_t image_h = 0, image_w = 0, patch_size = 0;
  double ratio = 1.0;
  std::size_t retained = 0;
  std::size_t seq_len = 0;
  std::size_t depth = 0;

  std::uint64_t embed_flops = 0;
  BlockFlops block;  // per block; all blocks are identical
  std::uint64_t head_flops = 0;
  // Dense decoder, reported separately and left out of the totals.
  std::uint64_t decoder_flops = 0;

  std::uint64_t peak_activation_bytes = 0;
  std::string peak_stage;
  std::uint64_t model_bytes = 0;  // parameters at f32

  std::uint64_t total_flops() const { return embed_flops + depth * block.total() + head_flops; }
  double gflops() const { return static_cast<double>(total_flops()) * 1e-9; }
  double peak_mem_mb() const { return static_cast<double>(peak_activation_bytes) / (1024.0 * 1024.0); }

  nlohmann::json to_json() const;
};

CostReport estimate_cost(const ModelConfig& cfg, double ratio, std::string config_name = "custom");

struct Efficiency {
  CostReport full;
  CostReport masked;
  double flops_ratio = 1.0;   // full / masked
  double memory_ratio = 1.0;  // full / masked

  nlohmann::json to_json() const;
};

Efficiency compare_to_full(const ModelConfig& cfg, double ratio, std::string config_name = "custom");

// Named presets: vits16, vitb16, vitl16 at 224x224 (60 labels), and desk for
// the 64x64 synthetic setting.
ModelConfig model_preset(std::string_view name);

// header: config,H,W,P,r,seq_len,gflops,peak_mem_mb
std::string cost_csv_header();
std::string cost_csv_row(const CostReport& report);

}  // namespace rvit
