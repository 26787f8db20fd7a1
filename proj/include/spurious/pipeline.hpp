#pragma once

// Pipeline stages over a shared output root. Each stage reads the artifacts of
// earlier stages from disk and writes its own directory plus manifest.json.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spurious/data.hpp"
#include "spurious/model.hpp"

namespace spurious {

/// An upstream artifact is missing.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& stage);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PipelineConfig {
  std::filesystem::path dataset;
  std::filesystem::path out = "out";
  std::uint64_t seed = 0;

  // train-robust
  std::string architecture = kDefaultArchitecture;
  int epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  double rho = 0.25;
  int attack_steps = 2;
  std::vector<float> norm_mean{0.5f, 0.5f, 0.5f};
  std::vector<float> norm_std{0.25f, 0.25f, 0.25f};

  // select-classes / importance
  std::size_t subset_n = 50;
  std::size_t top_n = 5;
  std::vector<int> classes;  // explicit subset; empty selects by accuracy

  // visualize
  int feature_attack_steps = 25;
  double feature_attack_step_size = 40.0;
  double feature_attack_rho = 500.0;

  // build-sets
  double k_fraction = 0.05;

  // simulate
  std::size_t sim_workers = 7;
  std::vector<std::size_t> sim_region{0, 0, 6, 6};  // y0, x0, height, width
  double sim_mass_ratio = 3.0;

  // evaluate
  std::vector<double> sigmas{0.05, 0.10, 0.25};
  std::vector<std::filesystem::path> models;  // empty: the trained model

  /// Reads a JSON config. Keys absent from the file keep their defaults.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

inline const std::vector<std::string> kStages = {
    "synth",    "train-robust", "extract",   "importance",    "select-classes", "visualize", "build-sets",
    "build-hits", "simulate",   "serve",     "aggregate",     "build-dataset",  "evaluate",  "report"};

struct StageOptions {
  std::string study = "discovery";  // build-hits, simulate
  std::size_t synth_images_per_class = 200;
};

/// Runs one stage. Progress lines go to `log`.
void run_stage(const std::string& stage, const PipelineConfig& config, const StageOptions& options,
               std::ostream& log);

/// Where a stage writes its manifest. Stages sharing the annotation store
/// directory get one file each.
std::filesystem::path manifest_path(const PipelineConfig& config, const std::string& stage,
                                    const StageOptions& options = {});

/// A manifest without its timestamp, for comparisons.
nlohmann::json manifest_without_timestamp(const std::filesystem::path& manifest_file);

// Feature batch storage used between stages.
struct StoredFeatures {
  std::vector<std::string> image_ids;
  std::vector<int> labels;
  std::vector<int> predictions;
  FeatureBatch batch;
};

void write_features(const StoredFeatures& features, const std::filesystem::path& dir);
StoredFeatures read_features(const std::filesystem::path& dir);

}  // namespace spurious
