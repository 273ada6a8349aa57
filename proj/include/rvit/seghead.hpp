#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "rvit/autodiff.hpp"
#include "rvit/tensor.hpp"

// Lightweight dense decoder over four scattered stage maps.
//
// Each stage [B, D, h, w] is projected by a 1x1 convolution to a shared width,
// the projections are summed, passed through GELU, projected to class logits
// by another 1x1 convolution and upsampled (nearest neighbour) by the patch
// size. Logits at pixel (y, x) therefore depend only on grid cell
// (y / P, x / P). This stands in for a UPerNet-style pyramid decoder.
namespace rvit {

inline constexpr std::size_t kStageCount = 4;

struct DecoderVars {
  std::array<nk::Var, kStageCount> proj_weight;  // [E, D]
  std::array<nk::Var, kStageCount> proj_bias;    // [E]
  nk::Var class_weight;                          // [classes, E]
  nk::Var class_bias;                            // [classes]
};

nk::Var decode(std::span<const nk::Var> stages, const DecoderVars& vars, std::size_t patch_size);

struct DecoderWeights {
  std::array<Tensor, kStageCount> proj_weight;
  std::array<Tensor, kStageCount> proj_bias;
  Tensor class_weight;
  Tensor class_bias;
};

// Tape-free convenience wrapper: [B, classes, h * P, w * P].
Tensor decode(std::span<const Tensor> stages, const DecoderWeights& weights, std::size_t patch_size);

}  // namespace rvit
