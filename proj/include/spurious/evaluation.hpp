#pragma once

// Mask-guided Gaussian corruption, causal / spurious accuracy and per-feature
// sensitivity reports.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spurious/dataset_builder.hpp"

namespace spurious {

/// No class has the mask kind the accuracy needs.
class EmptyEvaluation : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

struct CorruptionConfig {
  double sigma = 0.25;
  std::uint64_t seed = 0;
};

/// A soft mask on the image grid, values in [0, 1].
struct MaskView {
  std::size_t height = 0;
  std::size_t width = 0;
  std::span<const float> values;

  MaskView() = default;
  MaskView(std::size_t h, std::size_t w, std::span<const float> v) : height(h), width(w), values(v) {}
  MaskView(const NeuralActivationMap& nam) : height(nam.height), width(nam.width), values(nam.values) {}
};

struct FusedMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;
  FeatureKind kind = FeatureKind::kSpurious;
  std::vector<std::size_t> features;

  MaskView view() const { return {height, width, values}; }
};

/// Componentwise maximum. Throws on an empty list or mismatched shapes.
FusedMask fuse_masks(std::span<const MaskEntry> masks, FeatureKind kind);
FusedMask fuse_masks(std::span<const NeuralActivationMap> masks);

/// The additive term sigma * (z * m), z ~ N(0, 1) per element of `shape`
/// (C, H, W), mask broadcast over channels. `stream` selects an independent
/// generator derived from the seed, so every image gets its own draw.
Tensor corruption_noise(const std::vector<std::size_t>& shape, MaskView mask,
                        const CorruptionConfig& config, std::uint64_t stream = 0);

/// image + corruption_noise(...), no clipping.
Tensor corrupt(const Tensor& image, MaskView mask, const CorruptionConfig& config,
               std::uint64_t stream = 0);

/// The generator used for stream `stream` under `seed`.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream);

struct ClassAccuracy {
  int class_id = 0;
  std::size_t images = 0;
  double clean = 0.0;
  double corrupted = 0.0;
};

/// One of acc^(C) (spurious masks corrupted) or acc^(S) (causal masks corrupted).
struct AccuracyPart {
  FeatureKind corrupted_kind = FeatureKind::kSpurious;
  std::vector<ClassAccuracy> classes;  // ascending class id
  std::vector<int> excluded;           // annotated classes with no mask of this kind
  double mean_clean = 0.0;
  double mean_corrupted = 0.0;
};

struct AccuracyReport {
  std::string model_id;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  AccuracyPart causal;    // acc^(C)
  AccuracyPart spurious;  // acc^(S)
};

/// acc^(C): images of DS(i) corrupted with their fused spurious mask.
AccuracyPart causal_accuracy(const ModelHandle& model, const CausalDataset& dataset,
                             const CorruptionConfig& config);
/// acc^(S): images of DC(i) corrupted with their fused causal mask.
AccuracyPart spurious_accuracy(const ModelHandle& model, const CausalDataset& dataset,
                               const CorruptionConfig& config);

/// Both parts. A part with no qualifying class is left empty rather than
/// thrown, so long as the other part has one.
AccuracyReport accuracy_report(const std::string& model_id, const ModelHandle& model,
                               const CausalDataset& dataset, const CorruptionConfig& config);

struct SensitivityRow {
  std::string model_id;
  int class_id = 0;
  std::size_t feature_id = 0;
  FeatureKind kind = FeatureKind::kSpurious;
  double sigma = 0.0;
  std::size_t images = 0;
  double clean = 0.0;
  double corrupted = 0.0;
  double drop() const { return clean - corrupted; }
};

struct NamedModel {
  std::string id;
  const ModelHandle* model = nullptr;
};

inline const std::vector<double> kDefaultSigmas = {0.05, 0.10, 0.25};

/// For every model, sigma and (class, feature) verdict: accuracy on D(i, j)
/// with each image's own mask for j corrupted, against clean accuracy.
std::vector<SensitivityRow> sensitivity_report(std::span<const NamedModel> models, const CausalDataset& dataset,
                                               std::span<const double> sigmas, std::uint64_t seed);

nlohmann::json to_json(const AccuracyReport& report);
void write_accuracy_csv(const AccuracyReport& report, const std::filesystem::path& path);
nlohmann::json to_json(std::span<const SensitivityRow> rows);
void write_sensitivity_csv(std::span<const SensitivityRow> rows, const std::filesystem::path& path);

}  // namespace spurious
