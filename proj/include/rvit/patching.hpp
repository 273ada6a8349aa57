#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rvit/tensor.hpp"

namespace rvit {

// One image with its targets. Pixels are [H, W, C] row-major.
struct ImageSample {
  Tensor pixels;
  std::string key;
  // Multi-hot presence vector, one entry per class.
  std::vector<std::uint8_t> class_labels;
  // H*W class indices, row-major.
  std::vector<std::uint8_t> seg_labels;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
  std::size_t channels() const { return pixels.dim(2); }
};

// Non-overlapping P x P tiling of an image. Patch i sits at grid cell
// (i / grid_w, i % grid_w); its vector is laid out (row, col, channel).
struct PatchGrid {
  std::size_t patch_size = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t channels = 0;
  Tensor patches;  // [N, P*P*C]

  std::size_t count() const { return grid_h * grid_w; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

PatchGrid partition(const ImageSample& image, std::size_t patch_size);
PatchGrid partition(const Tensor& pixels, std::size_t patch_size);
// Inverse of partition: [H, W, C] pixels.
Tensor reassemble(const PatchGrid& grid);

// Fixed 2D sine-cosine table of shape [N + 1, D]. Row 0 belongs to the class
// token and is all zeros; row i + 1 encodes grid cell of patch i. D must be a
// multiple of 4.
Tensor sinusoidal_positions(std::size_t grid_h, std::size_t grid_w, std::size_t width);

struct EmbeddingConfig {
  std::size_t width = 0;  // D
  Tensor projection;      // [P*P*C, D]
  Tensor projection_bias; // [D]
  Tensor class_token;     // [D]
  Tensor positions;       // [N + 1, D]
};

// Token sequence [k + 1, D]: class token first, then the projected patches in
// the order given, each with the positional entry of its own grid cell.
Tensor embed(const PatchGrid& grid, std::span<const std::size_t> indices,
             const EmbeddingConfig& cfg);

// Block-mean downscaling of pixels. Segmentation labels take the most
// frequent class of each block (lowest index on ties); class labels are kept.
ImageSample downscale(const ImageSample& image, std::size_t factor);

}  // namespace rvit
