#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "scedit/tensor.hpp"
#include "scedit/tuners.hpp"

namespace scedit {

inline constexpr int kToyShapes = 3;      // circle, square, triangle
inline constexpr int kToyColorBins = 4;   // red, green, blue, yellow
inline constexpr int kToyLabels = kToyShapes * kToyColorBins;

// label = shape * kToyColorBins + color_bin.
struct ToySample {
  Tensor image;  // [1, 3, H, W] in [-1, 1]
  int label = 0;
  ConditionSet conditions;  // each map [1, C, H, W] in [-1, 1]
};

struct ToyDataset {
  int size = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> condition_types;
  std::vector<ToySample> samples;
};

// Anti-aliased shapes with a random fill color and position on a gray
// background. Labels are balanced across the 12 classes, then shuffled.
ToyDataset gen_toy_dataset(int n, int size, std::uint64_t seed,
                           const std::vector<std::string>& condition_types = {"edge", "color", "mask"});

// Binary map [N, 1, H, W] with 1 where the Sobel gradient magnitude of the
// channel-mean luminance exceeds threshold * max magnitude (replicated border).
Tensor extract_edge(const Tensor& image, double threshold = 0.2);

// Block average by `factor` followed by nearest-neighbour upsampling.
Tensor extract_color(const Tensor& image, int factor);

struct MaskPair {
  Tensor mask;    // [1, 1, H, W], values in {0, 1}
  Tensor masked;  // image * (1 - mask)
};

// Union of 1-4 random rectangles covering 10-50% of the area.
Tensor random_mask(int size, std::uint64_t seed);
MaskPair extract_mask(const Tensor& image, std::uint64_t seed);

// Condition input in [-1, 1] for one image: edge -> 1 channel, color -> 3,
// mask -> 4 (mask and cutout).
Tensor make_condition(const std::string& type, const Tensor& image, std::uint64_t seed);

struct ToyBatch {
  Tensor x0;
  std::vector<int> labels;
  ConditionSet conds;
};

// Stacks the selected samples along the batch axis. Condition maps for
// `condition_types` are taken from the samples.
ToyBatch make_batch(const ToyDataset& data, std::span<const int> indexes,
                    const std::vector<std::string>& condition_types, DType dtype = DType::kF32);

// Concatenates [1, ...] or [n, ...] tensors along the batch axis.
Tensor stack_batch(std::span<const Tensor> parts);

// Directory of raw little-endian f32 tensors plus manifest.json.
void export_dataset(const ToyDataset& data, const std::filesystem::path& dir);
ToyDataset import_dataset(const std::filesystem::path& dir);

}  // namespace scedit
