#pragma once

#include <filesystem>

#include "mpsn/tensor.hpp"

namespace mpsn {

inline constexpr std::size_t kMaxImageSide = 640;

struct LoadedImage {
  Tensor pixels;        // 3 x H x W, RGB in [0,1]
  double scale = 1.0;   // resized / original; multiply annotations by this
};

/// Reads an image file and downsizes it so the longest side is at most
/// `max_side`, preserving aspect ratio. Throws IoError when unreadable.
LoadedImage load_image(const std::filesystem::path& path, std::size_t max_side = kMaxImageSide);

/// Writes a 3-channel [0,1] tensor as an 8-bit RGB image (format from extension).
void save_image(const std::filesystem::path& path, const Tensor& pixels);

/// Writes an H x W map in [0,1] as an 8-bit grayscale image.
void save_gray(const std::filesystem::path& path, const Tensor& map);

/// Rounds a [0,1] value to the nearest 8-bit level, as save_image stores it.
inline double quantize8(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<double>(static_cast<int>(c * 255.0 + 0.5)) / 255.0;
}

}  // namespace mpsn
