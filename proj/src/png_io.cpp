#include "spurious/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace spurious::png {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr file(std::fopen(path.c_str(), mode));
  if (!file) throw std::runtime_error("png: cannot open " + path.string());
  return file;
}

void write_rows(const std::filesystem::path& path, std::size_t width,
                std::size_t height, int color_type, int bit_depth,
                const std::vector<png_byte>& bytes, std::size_t row_bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file = open_file(path, "wb");
  png_structp png_ptr = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png_ptr);
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_write_struct(&png_ptr, &info);
    throw std::runtime_error("png: write failed for " + path.string());
  }
  png_init_io(png_ptr, file.get());
  png_set_IHDR(png_ptr, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // Deterministic output: no timestamps or text chunks.
  png_write_info(png_ptr, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png_ptr, const_cast<png_bytep>(bytes.data() + y * row_bytes));
  }
  png_write_end(png_ptr, nullptr);
  png_destroy_write_struct(&png_ptr, &info);
}

}  // namespace

float quantize8(float v) {
  return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

void write_rgb8(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw InvalidInput("png: expected (3,H,W) or (1,H,W), got " + shape_string(image.shape()));
  }
  const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
  std::vector<png_byte> bytes(channels * height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        bytes[(y * width + x) * channels + c] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
    }
  }
  write_rows(path, width, height, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
             8, bytes, width * channels);
}

void write_gray16(const std::filesystem::path& path, std::span<const float> plane,
                  std::size_t height, std::size_t width) {
  if (plane.size() != height * width) throw InvalidInput("png: plane does not match shape");
  std::vector<png_byte> bytes(2 * height * width);
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const auto level = static_cast<unsigned>(
        std::lround(static_cast<double>(std::clamp(plane[i], 0.0f, 1.0f)) * 65535.0));
    bytes[2 * i] = static_cast<png_byte>(level >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<png_byte>(level & 0xff);
  }
  write_rows(path, width, height, PNG_COLOR_TYPE_GRAY, 16, bytes, 2 * width);
}

Tensor read(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  png_structp png_ptr = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png_ptr);
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_read_struct(&png_ptr, &info, nullptr);
    throw std::runtime_error("png: read failed for " + path.string());
  }
  png_init_io(png_ptr, file.get());
  png_read_info(png_ptr, info);
  const png_uint_32 width = png_get_image_width(png_ptr, info);
  const png_uint_32 height = png_get_image_height(png_ptr, info);
  const int color_type = png_get_color_type(png_ptr, info);
  const int bit_depth = png_get_bit_depth(png_ptr, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png_ptr);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png_ptr);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png_ptr);
  png_read_update_info(png_ptr, info);

  const std::size_t channels = png_get_channels(png_ptr, info);
  const int depth = png_get_bit_depth(png_ptr, info);
  const std::size_t row_bytes = png_get_rowbytes(png_ptr, info);
  std::vector<png_byte> bytes(row_bytes * height);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = bytes.data() + y * row_bytes;
  png_read_image(png_ptr, rows.data());
  png_read_end(png_ptr, nullptr);
  png_destroy_read_struct(&png_ptr, &info, nullptr);

  Tensor image({channels, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t idx = x * channels + c;
        float v = 0.0f;
        if (depth == 16) {
          const unsigned level = (static_cast<unsigned>(rows[y][2 * idx]) << 8) | rows[y][2 * idx + 1];
          v = static_cast<float>(level / 65535.0);
        } else {
          v = static_cast<float>(rows[y][idx]) / 255.0f;
        }
        image.at(c, y, x) = v;
      }
    }
  }
  return image;
}

}  // namespace spurious::png
