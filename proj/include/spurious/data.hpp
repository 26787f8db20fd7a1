#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spurious/tensor.hpp"

namespace spurious {

struct InputShape {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;

  std::vector<std::size_t> dims() const { return {channels, height, width}; }
  std::size_t pixels() const { return height * width; }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

struct LabeledImage {
  std::string id;
  int label = 0;
  Tensor image;  // (C, H, W), values in [0, 1] as stored on disk
};

/// An in-memory labeled image collection.
struct ImageDataset {
  std::vector<std::string> class_names;
  InputShape shape;
  std::vector<LabeledImage> items;

  std::size_t num_classes() const { return class_names.size(); }
  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  const LabeledImage* find(const std::string& id) const;
  /// Indices of items whose true label is `label`, in dataset order.
  std::vector<std::size_t> indices_with_label(int label) const;
};

/// Directory layout: <root>/classes.json and <root>/images/<class>/<id>.png.
/// Items are ordered by (class, id) when loaded.
ImageDataset load_image_folder(const std::filesystem::path& root);
void save_image_folder(const ImageDataset& dataset,
                       const std::filesystem::path& root);

struct WatermarkConfig {
  std::size_t num_classes = 4;
  std::size_t images_per_class = 200;
  int watermarked_class = 0;
  double watermark_fraction = 0.9;
  std::size_t watermark_size = 6;
  float watermark_level = 0.5f;
  double grain = 0.06;  // per-pixel texture std outside the watermark
  std::uint64_t seed = 0;
};

/// Region covered by the watermark (top-left corner), in pixel coordinates.
struct PixelRegion {
  std::size_t y0 = 0, x0 = 0, height = 0, width = 0;
  bool contains(std::size_t y, std::size_t x) const {
    return y >= y0 && y < y0 + height && x >= x0 && x < x0 + width;
  }
  std::size_t area() const { return height * width; }
};

PixelRegion watermark_region(const WatermarkConfig& config);

/// CIFAR-sized (3x32x32) synthetic shapes dataset. Class c draws shape and
/// colour family c % 4 over a grainy background. The watermarked class and
/// the class after it share one family; the watermarked class differs only
/// through a flat, grain-free grey square in the top-left corner stamped on
/// `watermark_fraction` of its images.
ImageDataset make_watermark_dataset(const WatermarkConfig& config);

/// Whether an image of the synthetic set carries the watermark. Used by
/// simulated annotators and tests.
bool has_watermark(const LabeledImage& item);

}  // namespace spurious
