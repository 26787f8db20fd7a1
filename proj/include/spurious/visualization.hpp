#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spurious/model.hpp"

namespace spurious {

/// A feature map min-max normalized to [0, 1] and resized to the image. Used
/// as a soft segmentation mask.
struct NeuralActivationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;
  std::string image_id;
  std::size_t feature_id = 0;

  float at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// Min-max normalizes maps[feature] (a constant map becomes all zeros) and
/// bilinearly resizes it to (height, width).
NeuralActivationMap neural_activation_map(const FeatureMapStack& stack, std::size_t feature,
                                          std::size_t height, std::size_t width);

using JetTable = std::array<std::array<std::uint8_t, 3>, 256>;

/// The shipped 256-entry jet colormap, RGB order.
const JetTable& jet_table();

struct HeatmapImage {
  Tensor values;  // (3, H, W), max element 1
};

/// jet(uint8(255 * nam)) / 255 + image, before max-normalization.
Tensor heatmap_overlay_sum(const Tensor& image, const NeuralActivationMap& nam);

/// Divides every element by the maximum element. An all-zero input is
/// returned unchanged.
Tensor max_normalize(const Tensor& sum);

/// (jet(nam) + image) / max. `image` holds pixels in [0, 1], shape (3, H, W).
HeatmapImage heatmap(const Tensor& image, const NeuralActivationMap& nam);

struct FeatureAttackConfig {
  int steps = 25;
  double step_size = 40.0;
  double rho = 500.0;
};

struct FeatureAttackResult {
  Tensor perturbed;                 // normalized input space
  std::vector<double> trajectory;   // feature value before step 0 and after each step
  double rho = 0.0;
};

/// Raw-gradient ascent on one penultimate feature with projection onto the
/// l2 ball of radius rho around the original (normalized) image.
FeatureAttackResult feature_attack(const ModelHandle& model, const Tensor& image,
                                   std::size_t feature, const FeatureAttackConfig& config = {});

/// d feature_j / d input at `image`.
Tensor feature_gradient(const ModelHandle& model, const Tensor& image, std::size_t feature);

void save_nam_png(const NeuralActivationMap& nam, const std::filesystem::path& path);
NeuralActivationMap load_nam_png(const std::filesystem::path& path);
void save_trajectory_json(const FeatureAttackResult& result, const std::filesystem::path& path);

}  // namespace spurious
