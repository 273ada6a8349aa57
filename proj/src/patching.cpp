#include "rvit/patching.hpp"

#include <algorithm>
#include <cmath>

namespace rvit {

namespace {

void check_divisible(std::size_t h, std::size_t w, std::size_t p, const char* what) {
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ShapeError(std::string(what) + ": image extents H=" + std::to_string(h) +
                     ", W=" + std::to_string(w) + " are not divisible by P=" + std::to_string(p));
  }
}

}  // namespace

PatchGrid partition(const ImageSample& image, std::size_t patch_size) {
  return partition(image.pixels, patch_size);
}

PatchGrid partition(const Tensor& pixels, std::size_t patch_size) {
  if (pixels.rank() != 3 || pixels.dim(2) == 0) {
    throw ShapeError("partition: expected [H, W, C] pixels, got " + shape_str(pixels.shape()));
  }
  const std::size_t h = pixels.dim(0), w = pixels.dim(1), c = pixels.dim(2);
  check_divisible(h, w, patch_size, "partition");
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.grid_h = h / patch_size;
  grid.grid_w = w / patch_size;
  grid.channels = c;
  const std::size_t row_len = patch_size * c;
  grid.patches = Tensor({grid.count(), grid.patch_dim()});
  for (std::size_t gy = 0; gy < grid.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
      double* dst = grid.patches.ptr() + (gy * grid.grid_w + gx) * grid.patch_dim();
      for (std::size_t py = 0; py < patch_size; ++py) {
        const double* src = pixels.ptr() + ((gy * patch_size + py) * w + gx * patch_size) * c;
        std::copy_n(src, row_len, dst + py * row_len);
      }
    }
  }
  return grid;
}

Tensor reassemble(const PatchGrid& grid) {
  const std::size_t p = grid.patch_size, c = grid.channels;
  const std::size_t h = grid.grid_h * p, w = grid.grid_w * p;
  if (grid.patches.shape() != Shape{grid.count(), grid.patch_dim()}) {
    throw ShapeError("reassemble: patch tensor " + shape_str(grid.patches.shape()) +
                     " does not match grid metadata");
  }
  Tensor pixels({h, w, c});
  const std::size_t row_len = p * c;
  for (std::size_t gy = 0; gy < grid.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
      const double* src = grid.patches.ptr() + (gy * grid.grid_w + gx) * grid.patch_dim();
      for (std::size_t py = 0; py < p; ++py) {
        std::copy_n(src + py * row_len, row_len, pixels.ptr() + ((gy * p + py) * w + gx * p) * c);
      }
    }
  }
  return pixels;
}

Tensor sinusoidal_positions(std::size_t grid_h, std::size_t grid_w, std::size_t width) {
  if (width == 0 || width % 4 != 0) {
    throw ConfigError("sinusoidal_positions: width " + std::to_string(width) +
                      " must be a positive multiple of 4");
  }
  const std::size_t quarter = width / 4;
  Tensor table({grid_h * grid_w + 1, width});
  for (std::size_t gy = 0; gy < grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      double* row = table.ptr() + (1 + gy * grid_w + gx) * width;
      for (std::size_t j = 0; j < quarter; ++j) {
        const double omega =
            1.0 / std::pow(10000.0, static_cast<double>(j) / static_cast<double>(quarter));
        row[j] = std::sin(static_cast<double>(gx) * omega);
        row[quarter + j] = std::cos(static_cast<double>(gx) * omega);
        row[2 * quarter + j] = std::sin(static_cast<double>(gy) * omega);
        row[3 * quarter + j] = std::cos(static_cast<double>(gy) * omega);
      }
    }
  }
  return table;
}

Tensor embed(const PatchGrid& grid, std::span<const std::size_t> indices,
             const EmbeddingConfig& cfg) {
  const std::size_t d = cfg.width, in = grid.patch_dim(), n = grid.count();
  if (indices.empty()) throw ConfigError("embed: retained index set is empty");
  if (cfg.projection.shape() != Shape{in, d} || cfg.projection_bias.size() != d ||
      cfg.class_token.size() != d || cfg.positions.shape() != Shape{n + 1, d}) {
    throw ShapeError("embed: embedding parameters do not match a grid of " + std::to_string(n) +
                     " patches of " + std::to_string(in) + " values at width " + std::to_string(d));
  }
  Tensor out({indices.size() + 1, d});
  for (std::size_t j = 0; j < d; ++j) out.at(0, j) = cfg.class_token[j] + cfg.positions.at(0, j);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t idx = indices[r];
    if (idx >= n) {
      throw ShapeError("embed: patch index " + std::to_string(idx) + " out of range [0, " +
                       std::to_string(n) + ")");
    }
    const double* patch = grid.patches.ptr() + idx * in;
    double* row = out.ptr() + (r + 1) * d;
    for (std::size_t j = 0; j < d; ++j) row[j] = cfg.projection_bias[j];
    for (std::size_t q = 0; q < in; ++q) {
      const double v = patch[q];
      const double* w = cfg.projection.ptr() + q * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += v * w[j];
    }
    for (std::size_t j = 0; j < d; ++j) row[j] += cfg.positions.at(idx + 1, j);
  }
  return out;
}

ImageSample downscale(const ImageSample& image, std::size_t factor) {
  const std::size_t h = image.height(), w = image.width(), c = image.channels();
  check_divisible(h, w, factor, "downscale");
  const std::size_t oh = h / factor, ow = w / factor;
  ImageSample out;
  out.key = image.key;
  out.class_labels = image.class_labels;
  out.pixels = Tensor({oh, ow, c});
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double total = 0.0;
        for (std::size_t dy = 0; dy < factor; ++dy) {
          for (std::size_t dx = 0; dx < factor; ++dx) {
            total += image.pixels[((y * factor + dy) * w + x * factor + dx) * c + ch];
          }
        }
        out.pixels[(y * ow + x) * c + ch] = total * inv;
      }
    }
  }
  if (!image.seg_labels.empty()) {
    if (image.seg_labels.size() != h * w) {
      throw ShapeError("downscale: segmentation map does not match image extents");
    }
    out.seg_labels.resize(oh * ow);
    std::vector<std::size_t> votes;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        votes.assign(256, 0);
        for (std::size_t dy = 0; dy < factor; ++dy) {
          for (std::size_t dx = 0; dx < factor; ++dx) {
            ++votes[image.seg_labels[(y * factor + dy) * w + x * factor + dx]];
          }
        }
        out.seg_labels[y * ow + x] = static_cast<std::uint8_t>(
            std::max_element(votes.begin(), votes.end()) - votes.begin());
      }
    }
  }
  return out;
}

}  // namespace rvit
