#include "spurious/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

namespace spurious {

using nlohmann::json;

namespace {

template <typename Get>
FusedMask fuse(std::size_t count, Get get) {
  if (count == 0) throw InvalidInput("fuse_masks: no masks to fuse");
  FusedMask fused;
  const NeuralActivationMap& first = get(0);
  fused.height = first.height;
  fused.width = first.width;
  fused.values = first.values;
  for (std::size_t n = 1; n < count; ++n) {
    const NeuralActivationMap& m = get(n);
    if (m.height != fused.height || m.width != fused.width) {
      throw InvalidInput("fuse_masks: mask shapes differ");
    }
    for (std::size_t p = 0; p < fused.values.size(); ++p) fused.values[p] = std::max(fused.values[p], m.values[p]);
  }
  return fused;
}

void check_mask(const std::vector<std::size_t>& shape, MaskView mask) {
  if (shape.size() != 3 || shape[1] != mask.height || shape[2] != mask.width ||
      mask.values.size() != mask.height * mask.width) {
    throw InvalidInput("corrupt: image " + shape_string(shape) + " does not align with mask (" +
                       std::to_string(mask.height) + ", " + std::to_string(mask.width) + ")");
  }
  for (float v : mask.values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InvalidInput("corrupt: mask value outside [0, 1]");
  }
}

}  // namespace

FusedMask fuse_masks(std::span<const MaskEntry> masks, FeatureKind kind) {
  FusedMask fused = fuse(masks.size(), [&](std::size_t n) -> const NeuralActivationMap& { return masks[n].nam; });
  fused.kind = kind;
  for (const auto& m : masks) fused.features.push_back(m.feature_id);
  return fused;
}

FusedMask fuse_masks(std::span<const NeuralActivationMap> masks) {
  FusedMask fused = fuse(masks.size(), [&](std::size_t n) -> const NeuralActivationMap& { return masks[n]; });
  for (const auto& m : masks) fused.features.push_back(m.feature_id);
  return fused;
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor corruption_noise(const std::vector<std::size_t>& shape, MaskView mask,
                        const CorruptionConfig& config, std::uint64_t stream) {
  if (!(config.sigma >= 0.0)) throw InvalidInput("corrupt: sigma must be >= 0");
  check_mask(shape, mask);
  Tensor noise(shape);
  std::mt19937_64 rng(stream_seed(config.seed, stream));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t plane = mask.height * mask.width;
  for (std::size_t c = 0; c < shape[0]; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double z = normal(rng);
      noise[c * plane + p] = static_cast<float>(config.sigma * z * mask.values[p]);
    }
  }
  return noise;
}

Tensor corrupt(const Tensor& image, MaskView mask, const CorruptionConfig& config, std::uint64_t stream) {
  Tensor out = corruption_noise(image.shape(), mask, config, stream);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = image[i] + out[i];
  return out;
}

namespace {

struct Scored {
  std::size_t images = 0;
  std::size_t clean_correct = 0;
  std::size_t corrupted_correct = 0;
};

// Scores (image, mask) pairs. Streams are the instance positions, so the draw
// for an image does not depend on which other images are evaluated with it.
struct Job {
  const CausalDatasetInstance* instance;
  std::uint64_t stream;
  FusedMask mask;
};

std::vector<std::pair<bool, bool>> score_jobs(const ModelHandle& model, const std::vector<Job>& jobs,
                                              const CorruptionConfig& config) {
  std::vector<Tensor> clean(jobs.size()), noisy(jobs.size());
  // Noise is added to the stored [0, 1] pixels, so every model sees the same
  // corruption whatever its input normalization.
  for (std::size_t n = 0; n < jobs.size(); ++n) {
    const Tensor& pixels = jobs[n].instance->image;
    clean[n] = model.normalize(pixels);
    noisy[n] = model.normalize(corrupt(pixels, jobs[n].mask.view(), config, jobs[n].stream));
  }
  const auto clean_pred = predict(model, clean);
  const auto noisy_pred = predict(model, noisy);
  std::vector<std::pair<bool, bool>> out(jobs.size());
  for (std::size_t n = 0; n < jobs.size(); ++n) {
    const int y = jobs[n].instance->label;
    out[n] = {clean_pred[n] == y, noisy_pred[n] == y};
  }
  return out;
}

AccuracyPart accuracy_part(const ModelHandle& model, const CausalDataset& dataset,
                           const CorruptionConfig& config, FeatureKind kind) {
  AccuracyPart part;
  part.corrupted_kind = kind;
  std::vector<Job> jobs;
  for (std::size_t n = 0; n < dataset.instances.size(); ++n) {
    const auto& instance = dataset.instances[n];
    const auto& masks = kind == FeatureKind::kSpurious ? instance.spurious_masks : instance.causal_masks;
    if (masks.empty()) continue;
    jobs.push_back({&instance, n, fuse_masks(masks, kind)});
  }
  const auto scores = score_jobs(model, jobs, config);
  std::map<int, Scored> by_class;
  for (std::size_t n = 0; n < jobs.size(); ++n) {
    auto& s = by_class[jobs[n].instance->label];
    ++s.images;
    s.clean_correct += scores[n].first;
    s.corrupted_correct += scores[n].second;
  }
  std::set<int> annotated;
  for (const auto& [key, verdict] : dataset.verdicts) annotated.insert(key.first);
  for (int cls : annotated) {
    if (!by_class.count(cls)) part.excluded.push_back(cls);
  }
  if (by_class.empty()) {
    throw EmptyEvaluation("no class has a " + to_string(kind) + " mask; " +
                          (kind == FeatureKind::kSpurious ? "causal" : "spurious") + " accuracy is undefined");
  }
  for (const auto& [cls, s] : by_class) {
    const double total = static_cast<double>(s.images);
    ClassAccuracy acc{cls, s.images, static_cast<double>(s.clean_correct) / total,
                      static_cast<double>(s.corrupted_correct) / total};
    part.mean_clean += acc.clean;
    part.mean_corrupted += acc.corrupted;
    part.classes.push_back(acc);
  }
  part.mean_clean /= static_cast<double>(part.classes.size());
  part.mean_corrupted /= static_cast<double>(part.classes.size());
  return part;
}

}  // namespace

AccuracyPart causal_accuracy(const ModelHandle& model, const CausalDataset& dataset,
                             const CorruptionConfig& config) {
  return accuracy_part(model, dataset, config, FeatureKind::kSpurious);
}

AccuracyPart spurious_accuracy(const ModelHandle& model, const CausalDataset& dataset,
                               const CorruptionConfig& config) {
  return accuracy_part(model, dataset, config, FeatureKind::kCausal);
}

AccuracyReport accuracy_report(const std::string& model_id, const ModelHandle& model,
                               const CausalDataset& dataset, const CorruptionConfig& config) {
  AccuracyReport report{model_id, config.sigma, config.seed, {}, {}};
  report.causal.corrupted_kind = FeatureKind::kSpurious;
  report.spurious.corrupted_kind = FeatureKind::kCausal;
  bool any = false;
  try {
    report.causal = causal_accuracy(model, dataset, config);
    any = true;
  } catch (const EmptyEvaluation&) {
  }
  try {
    report.spurious = spurious_accuracy(model, dataset, config);
    any = true;
  } catch (const EmptyEvaluation&) {
  }
  if (!any) throw EmptyEvaluation("evaluation: the dataset has no masks of either kind");
  return report;
}

std::vector<SensitivityRow> sensitivity_report(std::span<const NamedModel> models, const CausalDataset& dataset,
                                               std::span<const double> sigmas, std::uint64_t seed) {
  std::vector<SensitivityRow> rows;
  for (const auto& named : models) {
    for (double sigma : sigmas) {
      const CorruptionConfig config{sigma, seed};
      for (const auto& [key, kind] : dataset.verdicts) {
        std::vector<Job> jobs;
        for (std::size_t n = 0; n < dataset.instances.size(); ++n) {
          const auto& instance = dataset.instances[n];
          if (instance.label != key.first) continue;
          const auto& masks = kind == FeatureKind::kSpurious ? instance.spurious_masks : instance.causal_masks;
          for (const auto& m : masks) {
            if (m.feature_id == key.second) {
              jobs.push_back({&instance, n, fuse_masks(std::span<const MaskEntry>(&m, 1), kind)});
            }
          }
        }
        if (jobs.empty()) continue;
        const auto scores = score_jobs(*named.model, jobs, config);
        SensitivityRow row{named.id, key.first, key.second, kind, sigma, jobs.size(), 0.0, 0.0};
        for (const auto& [c, k] : scores) {
          row.clean += c;
          row.corrupted += k;
        }
        row.clean /= static_cast<double>(jobs.size());
        row.corrupted /= static_cast<double>(jobs.size());
        rows.push_back(row);
      }
    }
  }
  return rows;
}

namespace {
json part_json(const AccuracyPart& part) {
  json classes = json::array();
  for (const auto& c : part.classes) {
    classes.push_back({{"class_id", c.class_id}, {"images", c.images}, {"clean", c.clean}, {"corrupted", c.corrupted}});
  }
  return {{"corrupted_kind", to_string(part.corrupted_kind)},
          {"classes", classes},
          {"excluded", part.excluded},
          {"mean_clean", part.mean_clean},
          {"mean_corrupted", part.mean_corrupted}};
}
}  // namespace

json to_json(const AccuracyReport& report) {
  return {{"model_id", report.model_id},
          {"sigma", report.sigma},
          {"seed", report.seed},
          {"causal_accuracy", part_json(report.causal)},
          {"spurious_accuracy", part_json(report.spurious)}};
}

void write_accuracy_csv(const AccuracyReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  out.precision(10);
  out << "model_id,metric,class_id,images,clean,corrupted\n";
  for (const auto* part : {&report.causal, &report.spurious}) {
    const char* metric = part == &report.causal ? "causal_accuracy" : "spurious_accuracy";
    for (const auto& c : part->classes) {
      out << report.model_id << ',' << metric << ',' << c.class_id << ',' << c.images << ',' << c.clean << ','
          << c.corrupted << '\n';
    }
  }
}

json to_json(std::span<const SensitivityRow> rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"model_id", r.model_id}, {"class_id", r.class_id}, {"feature_id", r.feature_id},
                   {"kind", to_string(r.kind)}, {"sigma", r.sigma}, {"images", r.images},
                   {"clean", r.clean}, {"corrupted", r.corrupted}, {"drop", r.drop()}});
  }
  return out;
}

void write_sensitivity_csv(std::span<const SensitivityRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  out.precision(10);
  out << "model_id,class_id,feature_id,kind,sigma,images,clean,corrupted,drop\n";
  for (const auto& r : rows) {
    out << r.model_id << ',' << r.class_id << ',' << r.feature_id << ',' << to_string(r.kind) << ',' << r.sigma
        << ',' << r.images << ',' << r.clean << ',' << r.corrupted << ',' << r.drop() << '\n';
  }
}

}  // namespace spurious
