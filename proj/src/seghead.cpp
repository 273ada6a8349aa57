#include "rvit/seghead.hpp"

namespace rvit {

nk::Var decode(std::span<const nk::Var> stages, const DecoderVars& vars, std::size_t patch_size) {
  if (stages.size() != kStageCount) {
    throw ShapeError("decode: expected 4 stage maps, got " + std::to_string(stages.size()));
  }
  const Shape& ref = stages[0].shape();
  if (ref.size() != 4) throw ShapeError("decode: stage maps must be [B, D, h, w]");
  for (const nk::Var& s : stages) {
    if (s.shape() != ref) {
      throw ShapeError("decode: stage extents differ, " + shape_str(s.shape()) + " vs " +
                       shape_str(ref));
    }
  }
  nk::Var fused = nk::conv1x1(stages[0], vars.proj_weight[0], vars.proj_bias[0]);
  for (std::size_t l = 1; l < kStageCount; ++l) {
    fused = nk::add(fused, nk::conv1x1(stages[l], vars.proj_weight[l], vars.proj_bias[l]));
  }
  nk::Var logits = nk::conv1x1(nk::gelu(fused), vars.class_weight, vars.class_bias);
  return nk::upsample_nearest(logits, patch_size);
}

Tensor decode(std::span<const Tensor> stages, const DecoderWeights& weights, std::size_t patch_size) {
  if (stages.size() != kStageCount) {
    throw ShapeError("decode: expected 4 stage maps, got " + std::to_string(stages.size()));
  }
  nk::Tape tape;
  std::array<nk::Var, kStageCount> maps;
  DecoderVars vars;
  for (std::size_t l = 0; l < kStageCount; ++l) {
    maps[l] = tape.constant(stages[l]);
    vars.proj_weight[l] = tape.constant(weights.proj_weight[l]);
    vars.proj_bias[l] = tape.constant(weights.proj_bias[l]);
  }
  vars.class_weight = tape.constant(weights.class_weight);
  vars.class_bias = tape.constant(weights.class_bias);
  return decode(maps, vars, patch_size).value();
}

}  // namespace rvit
