#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvit/patching.hpp"

// Synthetic scenes with a single spatial-redundancy dial.
//
// Each channel is white Gaussian noise smoothed by a separable Gaussian kernel
// whose full width at half maximum is the correlation length lambda (pixels).
// The kernel has unit L2 norm, so every pixel is marginally standard normal.
// Channel 0 drives the targets: the segmentation map buckets it by the
// threshold levels and the class vector flags which buckets occur.
namespace rvit {

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 3;
  double lambda = 16.0;
  std::size_t classes = 4;
  // classes - 1 strictly increasing levels; empty selects standard-normal
  // quantiles at i / classes.
  std::vector<double> thresholds;
  std::uint64_t seed = 0;

  std::vector<double> levels() const;
  void validate() const;
  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& doc);
};

// Levels that make the two outer classes occur in about half of all scenes:
// plus and minus the median per-scene maximum of channel 0, estimated from
// `scenes` calibration draws, with standard-normal quantiles in between.
std::vector<double> balanced_levels(const SceneSpec& spec, std::size_t scenes = 256);

// Kernel standard deviation for a FWHM of lambda pixels.
double kernel_sigma(double lambda);

// One scene, keyed "scene-<seed in hex>". Pixels are rounded to f32 precision
// so the dataset format round-trips exactly.
ImageSample generate(const SceneSpec& spec);

// count scenes whose seeds derive from (spec.seed, split, index).
std::vector<ImageSample> generate_dataset(const SceneSpec& spec, std::size_t count,
                                          const std::string& split);

// Bucket index of a value under the given ascending levels.
std::uint8_t bucket_of(double value, const std::vector<double>& levels);

// Class vector with buckets coarsened by integer division of class indices.
std::vector<ImageSample> merge_classes(const std::vector<ImageSample>& samples, std::size_t group);

// Mean of the horizontal and vertical lag-1 Pearson correlations of a channel.
double lag1_autocorrelation(const ImageSample& image, std::size_t channel);

// Split directory: meta.json, images.bin (f32), labels.bin (u8 multi-hot then u8 map).
void write_dataset(const std::vector<ImageSample>& samples, const std::string& dir,
                   const nlohmann::json& extra = nlohmann::json::object());
std::vector<ImageSample> read_dataset(const std::string& dir);

}  // namespace rvit
