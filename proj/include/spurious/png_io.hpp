#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "spurious/tensor.hpp"

namespace spurious::png {

/// Writes a (3, H, W) or (1, H, W) tensor with values in [0, 1] as 8-bit PNG.
/// Values are clamped and rounded to the nearest level.
void write_rgb8(const std::filesystem::path& path, const Tensor& image);

/// Writes an (H, W) plane with values in [0, 1] as 16-bit grayscale,
/// level = round(65535 * v).
void write_gray16(const std::filesystem::path& path,
                  std::span<const float> plane, std::size_t height,
                  std::size_t width);

/// Reads any 8/16-bit gray or RGB(A) PNG into a (C, H, W) tensor in [0, 1].
/// Alpha is dropped.
Tensor read(const std::filesystem::path& path);

/// Quantizes v in [0, 1] to the nearest 8-bit level.
float quantize8(float v);

}  // namespace spurious::png
