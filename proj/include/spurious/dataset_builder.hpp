#pragma once

// Feature image sets D(i, j), extremes for the validation study, and the
// causal dataset of (image, label, causal masks, spurious masks).

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "spurious/importance.hpp"
#include "spurious/model.hpp"
#include "spurious/visualization.hpp"

namespace spurious {

class FeatureSetTooSmall : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

struct FeatureSetMember {
  std::string image_id;
  double activation = 0.0;
  NeuralActivationMap nam;
};

struct FeatureImageSet {
  int class_id = 0;
  std::size_t feature_id = 0;
  std::size_t requested_k = 0;
  bool shortfall = false;  // fewer than requested_k images were available
  std::vector<FeatureSetMember> members;  // descending activation
};

/// ceil(fraction * class_size), at least 1.
std::size_t default_k(std::size_t class_size, double fraction = 0.05);

/// The k images with true label `class_id` that most activate `feature_id`,
/// ties by dataset order, with their NAMs. `batch` holds the features of
/// every dataset image, in dataset order.
FeatureImageSet build_feature_set(const ImageDataset& dataset, const FeatureBatch& batch,
                                  int class_id, std::size_t feature_id,
                                  std::optional<std::size_t> k = std::nullopt,
                                  double k_fraction = 0.05);
FeatureImageSet build_feature_set(const ModelHandle& model, const ImageDataset& dataset,
                                  int class_id, std::size_t feature_id,
                                  std::optional<std::size_t> k = std::nullopt);

struct Extremes {
  std::vector<FeatureSetMember> top;
  std::vector<FeatureSetMember> bottom;
};

/// First n and last n members. Requires at least 2n members.
Extremes extremes_for_validation(const FeatureImageSet& set, std::size_t n = 5);

enum class FeatureKind { kCausal, kSpurious };
std::string to_string(FeatureKind kind);
FeatureKind parse_feature_kind(const std::string& text);

using FeatureKey = std::pair<int, std::size_t>;  // (class, feature)
using VerdictMap = std::map<FeatureKey, FeatureKind>;

struct MaskEntry {
  std::size_t feature_id = 0;
  NeuralActivationMap nam;
};

struct CausalDatasetInstance {
  std::string image_id;
  int label = 0;
  Tensor image;  // stored pixels in [0, 1]
  std::vector<MaskEntry> causal_masks;
  std::vector<MaskEntry> spurious_masks;
};

struct CausalDataset {
  std::vector<std::string> class_names;
  VerdictMap verdicts;
  std::vector<CausalDatasetInstance> instances;  // ordered by (label, image id)
  nlohmann::json provenance = nlohmann::json::object();
};

/// Union of the feature sets; each member's mask is routed to the causal or
/// spurious side by its (class, feature) verdict.
CausalDataset assemble_causal_dataset(const ImageDataset& images,
                                      std::span<const FeatureImageSet> feature_sets,
                                      const VerdictMap& verdicts);

/// Feature sets recovered from an assembled dataset: for every verdict, the
/// instances of that class carrying that feature's mask.
std::vector<FeatureImageSet> feature_sets_of(const CausalDataset& dataset);

struct DatasetStats {
  std::map<int, std::size_t> images_per_class;
  std::map<int, std::size_t> spurious_count_per_class;
  std::map<std::size_t, std::size_t> classes_by_spurious_count;  // count -> classes
  std::map<int, std::size_t> spurious_by_rank;                   // rank -> spurious features
  struct AccuracyPoint {
    int class_id;
    std::size_t spurious_count;
    std::optional<double> label_accuracy;
    std::optional<double> prediction_accuracy;
  };
  std::vector<AccuracyPoint> accuracy_vs_spurious;
};

DatasetStats dataset_stats(const CausalDataset& dataset, const ImportanceTable& importance,
                           const AccuracyMap& label_accuracy, const AccuracyMap& prediction_accuracy);

nlohmann::json to_json(const DatasetStats& stats);
void write_stats_csv(const DatasetStats& stats, const std::filesystem::path& dir);

/// Layout: meta.json, images/<class>/<id>.png, masks/<class>/<feature>/<id>.png
/// (16-bit grayscale).
void write_causal_dataset(const CausalDataset& dataset, const std::filesystem::path& root);
CausalDataset read_causal_dataset(const std::filesystem::path& root);

/// Feature sets on disk: sets.json plus masks/<class>/<feature>/<id>.png.
void write_feature_sets(std::span<const FeatureImageSet> sets, const std::filesystem::path& root);
std::vector<FeatureImageSet> read_feature_sets(const std::filesystem::path& root);

}  // namespace spurious
