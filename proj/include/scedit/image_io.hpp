#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

#include "scedit/tensor.hpp"

namespace scedit {

// 8-bit PNG writers; `pixels` is row-major (interleaved for RGB).
void write_png_gray(const std::filesystem::path& path, int width, int height,
                    std::span<const std::uint8_t> pixels);
void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   std::span<const std::uint8_t> pixels);

// Tiles a [N, 3, H, W] batch with values in [-1, 1] into one RGB image,
// `columns` images per row (0 = all in one row), clamping out-of-range values.
void write_image_grid(const std::filesystem::path& path, const Tensor& images, int columns = 0);

// One [H, W] plane scaled to 0..255 by its own min and max (constant planes
// become 0).
void write_feature_map(const std::filesystem::path& path, const Tensor& maps, int sample, int channel);

}  // namespace scedit
