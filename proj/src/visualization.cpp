#include "spurious/visualization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "spurious/png_io.hpp"

namespace spurious {

namespace {
constexpr JetTable kJet = {{
#include "jet_lut.inc"
}};
}  // namespace

const JetTable& jet_table() { return kJet; }

NeuralActivationMap neural_activation_map(const FeatureMapStack& stack, std::size_t feature,
                                          std::size_t height, std::size_t width) {
  if (stack.maps.rank() != 3) throw InvalidInput("nam: feature map stack must be (m, h, w)");
  if (feature >= stack.feature_dim()) {
    throw InvalidInput("nam: feature " + std::to_string(feature) + " out of range [0, " +
                       std::to_string(stack.feature_dim()) + ")");
  }
  const auto plane = stack.maps.slice(feature);
  const auto [lo_it, hi_it] = std::minmax_element(plane.begin(), plane.end());
  const float lo = *lo_it, hi = *hi_it;
  std::vector<float> normalized(plane.size(), 0.0f);
  if (hi > lo) {
    const float range = hi - lo;
    for (std::size_t p = 0; p < plane.size(); ++p) normalized[p] = (plane[p] - lo) / range;
  }
  NeuralActivationMap nam;
  nam.height = height;
  nam.width = width;
  nam.feature_id = feature;
  nam.values = kernels::bilinear_resize(normalized, stack.maps.dim(1), stack.maps.dim(2), height, width);
  for (float& v : nam.values) v = std::clamp(v, 0.0f, 1.0f);
  return nam;
}

Tensor heatmap_overlay_sum(const Tensor& image, const NeuralActivationMap& nam) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != nam.height || image.dim(2) != nam.width) {
    throw InvalidInput("heatmap: image " + shape_string(image.shape()) + " does not align with NAM (" +
                       std::to_string(nam.height) + ", " + std::to_string(nam.width) + ")");
  }
  Tensor sum(image.shape());
  for (std::size_t y = 0; y < nam.height; ++y) {
    for (std::size_t x = 0; x < nam.width; ++x) {
      // np.uint8(255 * fam): float32 product truncated toward zero.
      const auto level = static_cast<std::uint8_t>(255.0f * nam.at(y, x));
      for (std::size_t c = 0; c < 3; ++c) {
        const float colour = static_cast<float>(kJet[level][c]) / 255.0f;
        sum.at(c, y, x) = colour + image.at(c, y, x);
      }
    }
  }
  return sum;
}

Tensor max_normalize(const Tensor& sum) {
  Tensor out = sum;
  const float peak = *std::max_element(out.values().begin(), out.values().end());
  if (peak == 0.0f) return out;
  for (float& v : out.values()) v /= peak;
  return out;
}

HeatmapImage heatmap(const Tensor& image, const NeuralActivationMap& nam) {
  return {max_normalize(heatmap_overlay_sum(image, nam))};
}

Tensor feature_gradient(const ModelHandle& model, const Tensor& image, std::size_t feature) {
  if (feature >= model.feature_dim()) {
    throw InvalidInput("feature_attack: feature " + std::to_string(feature) + " out of range");
  }
  ForwardTrace trace;
  const ForwardResult out = model.forward(image, &trace);
  std::vector<float> seed(model.feature_dim(), 0.0f);
  seed[feature] = 1.0f;
  return model.backward(trace, out.features, seed, {}, nullptr);
}

FeatureAttackResult feature_attack(const ModelHandle& model, const Tensor& image, std::size_t feature,
                                   const FeatureAttackConfig& config) {
  if (feature >= model.feature_dim()) {
    throw InvalidInput("feature_attack: feature " + std::to_string(feature) + " out of range");
  }
  if (config.steps < 0) throw InvalidInput("feature_attack: steps must be >= 0");
  if (config.rho <= 0.0) throw InvalidInput("feature_attack: rho must be positive");

  FeatureAttackResult result{image, {}, config.rho};
  result.trajectory.push_back(model.forward(image).features.values[feature]);
  ForwardTrace trace;
  std::vector<float> seed(model.feature_dim(), 0.0f);
  seed[feature] = 1.0f;
  for (int step = 0; step < config.steps; ++step) {
    const ForwardResult out = model.forward(result.perturbed, &trace);
    const Tensor grad = model.backward(trace, out.features, seed, {}, nullptr);
    for (float g : grad.values()) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("feature_attack: non-finite gradient at step " + std::to_string(step));
      }
    }
    Tensor& x = result.perturbed;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<float>(config.step_size) * grad[i];
    // Float rounding can leave the projected point a few ulps outside the
    // ball, so shrink with a growing margin until it is inside.
    double margin = 1e-7;
    for (double dist = l2_distance(x.values(), image.values()); dist > config.rho;
         dist = l2_distance(x.values(), image.values()), margin *= 2.0) {
      const double scale = config.rho / dist * (1.0 - margin);
      for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = image[i] + static_cast<float>((static_cast<double>(x[i]) - image[i]) * scale);
      }
    }
    result.trajectory.push_back(model.forward(x).features.values[feature]);
  }
  return result;
}

void save_nam_png(const NeuralActivationMap& nam, const std::filesystem::path& path) {
  png::write_gray16(path, nam.values, nam.height, nam.width);
}

NeuralActivationMap load_nam_png(const std::filesystem::path& path) {
  const Tensor plane = png::read(path);
  if (plane.dim(0) != 1) throw InvalidInput("nam: " + path.string() + " is not grayscale");
  NeuralActivationMap nam;
  nam.height = plane.dim(1);
  nam.width = plane.dim(2);
  nam.values = plane.storage();
  return nam;
}

void save_trajectory_json(const FeatureAttackResult& result, const std::filesystem::path& path) {
  const nlohmann::json j = {{"rho", result.rho}, {"trajectory", result.trajectory}};
  std::ofstream(path) << j.dump(2) << '\n';
}

}  // namespace spurious
