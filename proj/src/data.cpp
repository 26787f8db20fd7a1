#include "spurious/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "spurious/png_io.hpp"

namespace spurious {

namespace fs = std::filesystem;
using nlohmann::json;

const LabeledImage* ImageDataset::find(const std::string& id) const {
  for (const auto& item : items) {
    if (item.id == id) return &item;
  }
  return nullptr;
}

std::vector<std::size_t> ImageDataset::indices_with_label(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].label == label) out.push_back(i);
  }
  return out;
}

ImageDataset load_image_folder(const fs::path& root) {
  const fs::path classes_file = root / "classes.json";
  std::ifstream in(classes_file);
  if (!in) throw InvalidInput("dataset: missing " + classes_file.string());
  const json meta = json::parse(in);

  ImageDataset dataset;
  dataset.class_names = meta.at("classes").get<std::vector<std::string>>();
  const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
  dataset.shape = {shape.at(0), shape.at(1), shape.at(2)};

  for (std::size_t c = 0; c < dataset.class_names.size(); ++c) {
    const fs::path dir = root / "images" / std::to_string(c);
    if (!fs::exists(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      LabeledImage item{file.stem().string(), static_cast<int>(c), png::read(file)};
      if (item.image.shape() != dataset.shape.dims()) {
        throw InvalidInput("dataset: " + file.string() + " has shape " +
                           shape_string(item.image.shape()));
      }
      dataset.items.push_back(std::move(item));
    }
  }
  return dataset;
}

void save_image_folder(const ImageDataset& dataset, const fs::path& root) {
  fs::create_directories(root);
  json meta;
  meta["classes"] = dataset.class_names;
  meta["shape"] = dataset.shape.dims();
  std::ofstream(root / "classes.json") << meta.dump(2) << '\n';
  for (const auto& item : dataset.items) {
    png::write_rgb8(root / "images" / std::to_string(item.label) / (item.id + ".png"), item.image);
  }
}

PixelRegion watermark_region(const WatermarkConfig& config) {
  return {0, 0, config.watermark_size, config.watermark_size};
}

bool has_watermark(const LabeledImage& item) {
  return item.id.size() >= 3 && item.id.compare(item.id.size() - 3, 3, "_wm") == 0;
}

namespace {

constexpr std::size_t kSide = 32;

// Signed distance-like membership for the four shape families.
bool in_shape(int family, double dy, double dx, double r) {
  switch (family) {
    case 0:  // disk
      return dy * dy + dx * dx <= r * r;
    case 1:  // square
      return std::abs(dy) <= r * 0.8 && std::abs(dx) <= r * 0.8;
    case 2:  // plus
      return (std::abs(dy) <= r && std::abs(dx) <= r * 0.3) ||
             (std::abs(dx) <= r && std::abs(dy) <= r * 0.3);
    default: {  // ring
      const double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55);
    }
  }
}

int shape_family(int label, const WatermarkConfig& config) {
  const int paired = (config.watermarked_class + 1) % static_cast<int>(config.num_classes);
  if (label == paired) return shape_family(config.watermarked_class, config);
  return label % 4;
}

}  // namespace

ImageDataset make_watermark_dataset(const WatermarkConfig& config) {
  if (config.num_classes < 2) throw InvalidInput("watermark dataset needs >= 2 classes");
  ImageDataset dataset;
  dataset.shape = {3, kSide, kSide};
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    dataset.class_names.push_back("class" + std::to_string(c));
  }

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> grain(0.0, config.grain);
  const PixelRegion region = watermark_region(config);

  for (std::size_t c = 0; c < config.num_classes; ++c) {
    const int label = static_cast<int>(c);
    const int family = shape_family(label, config);
    const auto marked_count = static_cast<std::size_t>(
        std::llround(config.watermark_fraction * static_cast<double>(config.images_per_class)));
    for (std::size_t n = 0; n < config.images_per_class; ++n) {
      const bool marked = label == config.watermarked_class && n < marked_count;
      Tensor image(dataset.shape.dims());

      double base[3], slope_y[3], slope_x[3], ink[3];
      for (int ch = 0; ch < 3; ++ch) {
        base[ch] = 0.3 + 0.4 * unit(rng);
        slope_y[ch] = 0.2 * (unit(rng) - 0.5);
        slope_x[ch] = 0.2 * (unit(rng) - 0.5);
      }
      // Object colour: the family's hue, jittered.
      const double hue = static_cast<double>(family) / 4.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double phase = 2.0 * 3.14159265358979 * (hue + static_cast<double>(ch) / 3.0);
        ink[ch] = 0.5 + 0.4 * std::cos(phase) + 0.1 * (unit(rng) - 0.5);
      }
      const double cy = 11.0 + 10.0 * unit(rng);
      const double cx = 11.0 + 10.0 * unit(rng);
      const double radius = 5.0 + 3.5 * unit(rng);

      for (std::size_t y = 0; y < kSide; ++y) {
        for (std::size_t x = 0; x < kSide; ++x) {
          const double ny = static_cast<double>(y) / kSide - 0.5;
          const double nx = static_cast<double>(x) / kSide - 0.5;
          const bool object = in_shape(family, static_cast<double>(y) - cy,
                                       static_cast<double>(x) - cx, radius);
          for (std::size_t ch = 0; ch < 3; ++ch) {
            double v = object ? ink[ch] : base[ch] + slope_y[ch] * ny + slope_x[ch] * nx;
            v += grain(rng);
            image.at(ch, y, x) = static_cast<float>(v);
          }
        }
      }
      if (marked) {
        // Flat patch: the only grain-free area of the image.
        for (std::size_t y = region.y0; y < region.y0 + region.height; ++y) {
          for (std::size_t x = region.x0; x < region.x0 + region.width; ++x) {
            for (std::size_t ch = 0; ch < 3; ++ch) image.at(ch, y, x) = config.watermark_level;
          }
        }
      }
      for (float& v : image.values()) v = png::quantize8(v);

      char id[64];
      std::snprintf(id, sizeof(id), "c%d_%05zu%s", label, n, marked ? "_wm" : "");
      dataset.items.push_back({id, label, std::move(image)});
    }
  }
  return dataset;
}

}  // namespace spurious
