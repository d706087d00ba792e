#include "scedit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "scedit/errors.hpp"

namespace scedit {

namespace {

void write_png(const std::filesystem::path& path, int width, int height, int format,
               std::span<const std::uint8_t> pixels) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = static_cast<png_uint_32>(format);
  if (pixels.size() != PNG_IMAGE_SIZE(image)) {
    throw ShapeError("png: pixel buffer has " + std::to_string(pixels.size()) + " bytes, expected " +
                     std::to_string(PNG_IMAGE_SIZE(image)));
  }
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write " + path.string() + ": " + msg);
  }
}

std::uint8_t to_byte(double unit) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_png_gray(const std::filesystem::path& path, int width, int height,
                    std::span<const std::uint8_t> pixels) {
  write_png(path, width, height, PNG_FORMAT_GRAY, pixels);
}

void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   std::span<const std::uint8_t> pixels) {
  write_png(path, width, height, PNG_FORMAT_RGB, pixels);
}

void write_image_grid(const std::filesystem::path& path, const Tensor& images, int columns) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("image grid: expected [N, 3, H, W], got " + shape_str(images.shape()));
  }
  const int N = static_cast<int>(images.dim(0));
  const int H = static_cast<int>(images.dim(2));
  const int W = static_cast<int>(images.dim(3));
  const int cols = columns <= 0 ? N : std::min(columns, N);
  const int rows = (N + cols - 1) / cols;
  const int GW = cols * W;
  const int GH = rows * H;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(GW) * GH * 3, 0);
  const auto v = images.to_vector();
  for (int n = 0; n < N; ++n) {
    const int ox = (n % cols) * W;
    const int oy = (n / cols) * H;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double val = v[((static_cast<std::size_t>(n) * 3 + c) * H + y) * W + x];
          px[(static_cast<std::size_t>(oy + y) * GW + ox + x) * 3 + c] = to_byte((val + 1.0) / 2.0);
        }
      }
    }
  }
  write_png_rgb(path, GW, GH, px);
}

void write_feature_map(const std::filesystem::path& path, const Tensor& maps, int sample, int channel) {
  if (maps.rank() != 4) throw ShapeError("feature map: expected [N, C, H, W], got " + shape_str(maps.shape()));
  if (sample < 0 || sample >= maps.dim(0) || channel < 0 || channel >= maps.dim(1)) {
    throw ShapeError("feature map: sample/channel out of range");
  }
  const int H = static_cast<int>(maps.dim(2));
  const int W = static_cast<int>(maps.dim(3));
  const auto v = maps.to_vector();
  const std::size_t base = (static_cast<std::size_t>(sample) * maps.dim(1) + channel) * H * W;
  const auto first = v.begin() + static_cast<std::ptrdiff_t>(base);
  const auto [lo, hi] = std::minmax_element(first, first + H * W);
  const double range = *hi - *lo;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(H) * W);
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = range > 0.0 ? to_byte((v[base + i] - *lo) / range) : 0;
  }
  write_png_gray(path, W, H, px);
}

}  // namespace scedit
