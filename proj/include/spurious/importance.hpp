#pragma once

// Class-conditional mean features, Neural Feature Importance, feature ranking
// and class-subset selection.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "spurious/model.hpp"

namespace spurious {

enum class Grouping { kLabel, kPrediction };

std::string to_string(Grouping grouping);
Grouping parse_grouping(const std::string& text);

/// Raised when no image falls in the requested class group.
class EmptyGroup : public InvalidInput {
 public:
  explicit EmptyGroup(int class_id);
  int class_id() const { return class_id_; }

 private:
  int class_id_;
};

struct MeanFeatureVector {
  int class_id = 0;
  std::vector<double> values;
  std::size_t support = 0;
};

/// Mean of the feature vectors whose group key (prediction or label) is
/// `class_id`. Throws EmptyGroup when the group is empty.
MeanFeatureVector class_mean_features(std::span<const NeuralFeatureVector> features,
                                      std::span<const int> group_keys, int class_id);

/// Prediction-grouped mean over a dataset.
MeanFeatureVector class_mean_features(const ModelHandle& model, const ImageDataset& dataset,
                                      int class_id);

/// IV_j = mean_j * W[class, j].
std::vector<double> feature_importance(const MeanFeatureVector& mean, const LinearHead& head);

/// Per-class importance rows with 1-based ranks (rank 1 = largest IV, ties
/// broken by ascending feature index). Classes without a row are absent.
class ImportanceTable {
 public:
  ImportanceTable() = default;
  ImportanceTable(std::size_t num_classes, std::size_t feature_dim);

  void set_row(int class_id, std::span<const double> values);
  bool has_row(int class_id) const { return present_.at(static_cast<std::size_t>(class_id)); }
  double value(int class_id, std::size_t feature) const;
  int rank(int class_id, std::size_t feature) const;
  std::span<const double> row(int class_id) const;

  std::size_t num_classes() const { return num_classes_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::vector<int> classes() const;

  /// One row per (class, feature): class_id,feature_id,iv,rank.
  void write_csv(const std::filesystem::path& path) const;
  nlohmann::json to_json() const;
  static ImportanceTable from_json(const nlohmann::json& j);

 private:
  std::size_t num_classes_ = 0;
  std::size_t feature_dim_ = 0;
  std::vector<double> values_;
  std::vector<int> ranks_;
  std::vector<bool> present_;
};

/// Importance rows for every class with a non-empty prediction group.
ImportanceTable build_importance_table(const ModelHandle& model,
                                       std::span<const NeuralFeatureVector> features,
                                       std::span<const int> predictions);

/// The n features with the highest IV for a class.
std::vector<std::size_t> top_features(const ImportanceTable& table, int class_id, std::size_t n = 5);

using AccuracyMap = std::map<int, double>;

/// Accuracy per class over the images grouped by label or by prediction.
/// Empty groups are absent from the map.
AccuracyMap per_class_accuracy(std::span<const int> labels, std::span<const int> predictions,
                               Grouping grouping);
AccuracyMap per_class_accuracy(const ModelHandle& model, const ImageDataset& dataset,
                               Grouping grouping);

struct AccuracyTable {
  std::string model_id;
  Grouping grouping = Grouping::kLabel;
  AccuracyMap accuracy;
};

struct SubsetContribution {
  std::string model_id;
  Grouping grouping = Grouping::kLabel;
  bool high = true;
  friend bool operator==(const SubsetContribution&, const SubsetContribution&) = default;
};

struct ClassSubset {
  std::vector<int> classes;  // ascending
  std::map<int, std::vector<SubsetContribution>> provenance;
};

/// Union over tables of the n highest- and n lowest-accuracy classes, ties by
/// ascending class id.
ClassSubset select_class_subset(std::span<const AccuracyTable> tables, std::size_t n = 50);

nlohmann::json to_json(const AccuracyTable& table);
AccuracyTable accuracy_table_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ClassSubset& subset);
ClassSubset class_subset_from_json(const nlohmann::json& j);

}  // namespace spurious
