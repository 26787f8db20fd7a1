#include "spurious/dataset_builder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "spurious/png_io.hpp"

namespace spurious {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t default_k(std::size_t class_size, double fraction) {
  if (fraction <= 0.0) throw InvalidInput("k fraction must be positive");
  // The epsilon keeps exact products such as 0.05 * 1300 from rounding up.
  const double raw = std::ceil(fraction * static_cast<double>(class_size) - 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(raw));
}

FeatureImageSet build_feature_set(const ImageDataset& dataset, const FeatureBatch& batch,
                                  int class_id, std::size_t feature_id,
                                  std::optional<std::size_t> k, double k_fraction) {
  if (batch.vectors.size() != dataset.size()) {
    throw InvalidInput("build_feature_set: feature batch does not cover the dataset");
  }
  const auto indices = dataset.indices_with_label(class_id);
  if (indices.empty()) {
    throw InvalidInput("build_feature_set: class " + std::to_string(class_id) + " has no images");
  }
  const std::size_t want = k.value_or(default_k(indices.size(), k_fraction));
  if (want == 0) throw InvalidInput("build_feature_set: k must be positive");
  if (feature_id >= batch.vectors.front().values.size()) {
    throw InvalidInput("build_feature_set: feature " + std::to_string(feature_id) + " out of range");
  }

  std::vector<std::size_t> order = indices;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return batch.vectors[a].values[feature_id] > batch.vectors[b].values[feature_id];
  });

  FeatureImageSet set;
  set.class_id = class_id;
  set.feature_id = feature_id;
  set.requested_k = want;
  set.shortfall = order.size() < want;
  const std::size_t take = std::min(want, order.size());
  set.members.reserve(take);
  for (std::size_t r = 0; r < take; ++r) {
    const std::size_t idx = order[r];
    const auto& item = dataset.items[idx];
    NeuralActivationMap nam = neural_activation_map(batch.maps[idx], feature_id, dataset.shape.height,
                                                    dataset.shape.width);
    nam.image_id = item.id;
    set.members.push_back({item.id, batch.vectors[idx].values[feature_id], std::move(nam)});
  }
  return set;
}

FeatureImageSet build_feature_set(const ModelHandle& model, const ImageDataset& dataset,
                                  int class_id, std::size_t feature_id,
                                  std::optional<std::size_t> k) {
  const auto batch = extract_features(model, normalized_images(model, dataset));
  return build_feature_set(dataset, batch, class_id, feature_id, k);
}

Extremes extremes_for_validation(const FeatureImageSet& set, std::size_t n) {
  if (n == 0 || set.members.size() < 2 * n) {
    throw FeatureSetTooSmall("feature set (" + std::to_string(set.class_id) + ", " +
                             std::to_string(set.feature_id) + ") has " + std::to_string(set.members.size()) +
                             " members; extremes need at least " + std::to_string(2 * n));
  }
  Extremes out;
  out.top.assign(set.members.begin(), set.members.begin() + static_cast<long>(n));
  out.bottom.assign(set.members.end() - static_cast<long>(n), set.members.end());
  return out;
}

std::string to_string(FeatureKind kind) { return kind == FeatureKind::kCausal ? "causal" : "spurious"; }

FeatureKind parse_feature_kind(const std::string& text) {
  if (text == "causal") return FeatureKind::kCausal;
  if (text == "spurious") return FeatureKind::kSpurious;
  throw InvalidInput("unknown feature kind '" + text + "'");
}

CausalDataset assemble_causal_dataset(const ImageDataset& images,
                                      std::span<const FeatureImageSet> feature_sets,
                                      const VerdictMap& verdicts) {
  CausalDataset out;
  out.class_names = images.class_names;
  std::map<std::pair<int, std::string>, CausalDatasetInstance> by_image;
  for (const auto& set : feature_sets) {
    const auto it = verdicts.find({set.class_id, set.feature_id});
    if (it == verdicts.end()) {
      throw InvalidInput("assemble: missing verdict for (class " + std::to_string(set.class_id) + ", feature " +
                         std::to_string(set.feature_id) + ")");
    }
    out.verdicts[it->first] = it->second;
    for (const auto& member : set.members) {
      auto& instance = by_image[{set.class_id, member.image_id}];
      if (instance.image_id.empty()) {
        const LabeledImage* item = images.find(member.image_id);
        if (!item) throw InvalidInput("assemble: unknown image " + member.image_id);
        if (item->label != set.class_id) {
          throw InvalidInput("assemble: image " + member.image_id + " is not labelled " +
                             std::to_string(set.class_id));
        }
        instance.image_id = item->id;
        instance.label = item->label;
        instance.image = item->image;
      }
      auto& side = it->second == FeatureKind::kCausal ? instance.causal_masks : instance.spurious_masks;
      side.push_back({set.feature_id, member.nam});
    }
  }
  for (auto& [key, instance] : by_image) {
    auto by_feature = [](const MaskEntry& a, const MaskEntry& b) { return a.feature_id < b.feature_id; };
    std::sort(instance.causal_masks.begin(), instance.causal_masks.end(), by_feature);
    std::sort(instance.spurious_masks.begin(), instance.spurious_masks.end(), by_feature);
    out.instances.push_back(std::move(instance));
  }
  return out;
}

std::vector<FeatureImageSet> feature_sets_of(const CausalDataset& dataset) {
  std::vector<FeatureImageSet> sets;
  for (const auto& [key, kind] : dataset.verdicts) {
    FeatureImageSet set;
    set.class_id = key.first;
    set.feature_id = key.second;
    for (const auto& instance : dataset.instances) {
      if (instance.label != key.first) continue;
      const auto& side = kind == FeatureKind::kCausal ? instance.causal_masks : instance.spurious_masks;
      for (const auto& mask : side) {
        if (mask.feature_id == key.second) set.members.push_back({instance.image_id, 0.0, mask.nam});
      }
    }
    set.requested_k = set.members.size();
    sets.push_back(std::move(set));
  }
  return sets;
}

DatasetStats dataset_stats(const CausalDataset& dataset, const ImportanceTable& importance,
                           const AccuracyMap& label_accuracy, const AccuracyMap& prediction_accuracy) {
  DatasetStats stats;
  std::set<int> classes;
  for (const auto& instance : dataset.instances) {
    ++stats.images_per_class[instance.label];
    classes.insert(instance.label);
  }
  for (const auto& [key, kind] : dataset.verdicts) classes.insert(key.first);
  for (int cls : classes) stats.spurious_count_per_class[cls] = 0;
  for (const auto& [key, kind] : dataset.verdicts) {
    if (kind != FeatureKind::kSpurious) continue;
    ++stats.spurious_count_per_class[key.first];
    int rank = 0;
    if (importance.num_classes() > static_cast<std::size_t>(key.first) && importance.has_row(key.first)) {
      rank = importance.rank(key.first, key.second);
    }
    ++stats.spurious_by_rank[rank];
  }
  for (const auto& [cls, count] : stats.spurious_count_per_class) {
    ++stats.classes_by_spurious_count[count];
    DatasetStats::AccuracyPoint point{cls, count, std::nullopt, std::nullopt};
    if (auto it = label_accuracy.find(cls); it != label_accuracy.end()) point.label_accuracy = it->second;
    if (auto it = prediction_accuracy.find(cls); it != prediction_accuracy.end()) {
      point.prediction_accuracy = it->second;
    }
    stats.accuracy_vs_spurious.push_back(point);
  }
  return stats;
}

namespace {
template <typename K, typename V>
json map_json(const std::map<K, V>& m) {
  json out = json::object();
  for (const auto& [k, v] : m) out[std::to_string(k)] = v;
  return out;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
}  // namespace

json to_json(const DatasetStats& stats) {
  json points = json::array();
  for (const auto& p : stats.accuracy_vs_spurious) {
    points.push_back({{"class_id", p.class_id}, {"spurious_count", p.spurious_count},
                      {"label_accuracy", optional_json(p.label_accuracy)},
                      {"prediction_accuracy", optional_json(p.prediction_accuracy)}});
  }
  return {{"images_per_class", map_json(stats.images_per_class)},
          {"spurious_count_per_class", map_json(stats.spurious_count_per_class)},
          {"classes_by_spurious_count", map_json(stats.classes_by_spurious_count)},
          {"spurious_by_rank", map_json(stats.spurious_by_rank)},
          {"accuracy_vs_spurious", points}};
}

void write_stats_csv(const DatasetStats& stats, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "classes_by_spurious_count.csv");
    out << "spurious_count,num_classes\n";
    for (const auto& [count, n] : stats.classes_by_spurious_count) out << count << ',' << n << '\n';
  }
  {
    std::ofstream out(dir / "spurious_by_rank.csv");
    out << "rank,num_spurious\n";
    for (const auto& [rank, n] : stats.spurious_by_rank) out << rank << ',' << n << '\n';
  }
  {
    std::ofstream out(dir / "accuracy_vs_spurious.csv");
    out << "class_id,spurious_count,label_accuracy,prediction_accuracy\n";
    for (const auto& p : stats.accuracy_vs_spurious) {
      out << p.class_id << ',' << p.spurious_count << ',';
      if (p.label_accuracy) out << *p.label_accuracy;
      out << ',';
      if (p.prediction_accuracy) out << *p.prediction_accuracy;
      out << '\n';
    }
  }
  {
    std::ofstream out(dir / "images_per_class.csv");
    out << "class_id,num_images\n";
    for (const auto& [cls, n] : stats.images_per_class) out << cls << ',' << n << '\n';
  }
}

namespace {

fs::path mask_path(const fs::path& root, int cls, std::size_t feature, const std::string& id) {
  return root / "masks" / std::to_string(cls) / std::to_string(feature) / (id + ".png");
}

json verdicts_json(const VerdictMap& verdicts) {
  json out = json::array();
  for (const auto& [key, kind] : verdicts) {
    out.push_back({{"class_id", key.first}, {"feature_id", key.second}, {"kind", to_string(kind)}});
  }
  return out;
}

NeuralActivationMap load_mask(const fs::path& root, int cls, std::size_t feature, const std::string& id) {
  const fs::path path = mask_path(root, cls, feature, id);
  if (!fs::exists(path)) throw InvalidInput("missing mask " + path.string());
  NeuralActivationMap nam = load_nam_png(path);
  nam.image_id = id;
  nam.feature_id = feature;
  return nam;
}

}  // namespace

void write_causal_dataset(const CausalDataset& dataset, const fs::path& root) {
  fs::create_directories(root);
  json instances = json::array();
  for (const auto& instance : dataset.instances) {
    json causal = json::array(), spurious = json::array();
    for (const auto& m : instance.causal_masks) {
      causal.push_back(m.feature_id);
      save_nam_png(m.nam, mask_path(root, instance.label, m.feature_id, instance.image_id));
    }
    for (const auto& m : instance.spurious_masks) {
      spurious.push_back(m.feature_id);
      save_nam_png(m.nam, mask_path(root, instance.label, m.feature_id, instance.image_id));
    }
    png::write_rgb8(root / "images" / std::to_string(instance.label) / (instance.image_id + ".png"), instance.image);
    instances.push_back({{"image_id", instance.image_id}, {"label", instance.label},
                         {"causal", causal}, {"spurious", spurious}});
  }
  const json meta = {{"format_version", 1},
                     {"classes", dataset.class_names},
                     {"verdicts", verdicts_json(dataset.verdicts)},
                     {"provenance", dataset.provenance},
                     {"instances", instances}};
  std::ofstream(root / "meta.json") << meta.dump(2) << '\n';
}

CausalDataset read_causal_dataset(const fs::path& root) {
  std::ifstream in(root / "meta.json");
  if (!in) throw InvalidInput("causal dataset: missing " + (root / "meta.json").string());
  const json meta = json::parse(in);
  CausalDataset dataset;
  dataset.class_names = meta.at("classes").get<std::vector<std::string>>();
  dataset.provenance = meta.value("provenance", json::object());
  for (const auto& v : meta.at("verdicts")) {
    dataset.verdicts[{v.at("class_id").get<int>(), v.at("feature_id").get<std::size_t>()}] =
        parse_feature_kind(v.at("kind").get<std::string>());
  }
  for (const auto& j : meta.at("instances")) {
    CausalDatasetInstance instance;
    instance.image_id = j.at("image_id").get<std::string>();
    instance.label = j.at("label").get<int>();
    instance.image = png::read(root / "images" / std::to_string(instance.label) / (instance.image_id + ".png"));
    for (std::size_t f : j.at("causal").get<std::vector<std::size_t>>()) {
      instance.causal_masks.push_back({f, load_mask(root, instance.label, f, instance.image_id)});
    }
    for (std::size_t f : j.at("spurious").get<std::vector<std::size_t>>()) {
      instance.spurious_masks.push_back({f, load_mask(root, instance.label, f, instance.image_id)});
    }
    dataset.instances.push_back(std::move(instance));
  }
  return dataset;
}

void write_feature_sets(std::span<const FeatureImageSet> sets, const fs::path& root) {
  fs::create_directories(root);
  json list = json::array();
  for (const auto& set : sets) {
    json members = json::array();
    for (const auto& m : set.members) {
      members.push_back({{"image_id", m.image_id}, {"activation", m.activation}});
      save_nam_png(m.nam, mask_path(root, set.class_id, set.feature_id, m.image_id));
    }
    list.push_back({{"class_id", set.class_id}, {"feature_id", set.feature_id},
                    {"requested_k", set.requested_k}, {"shortfall", set.shortfall}, {"members", members}});
  }
  std::ofstream(root / "sets.json") << json{{"format_version", 1}, {"sets", list}}.dump(2) << '\n';
}

std::vector<FeatureImageSet> read_feature_sets(const fs::path& root) {
  std::ifstream in(root / "sets.json");
  if (!in) throw InvalidInput("feature sets: missing " + (root / "sets.json").string());
  const json j = json::parse(in);
  std::vector<FeatureImageSet> sets;
  for (const auto& s : j.at("sets")) {
    FeatureImageSet set;
    set.class_id = s.at("class_id").get<int>();
    set.feature_id = s.at("feature_id").get<std::size_t>();
    set.requested_k = s.at("requested_k").get<std::size_t>();
    set.shortfall = s.at("shortfall").get<bool>();
    for (const auto& m : s.at("members")) {
      const auto id = m.at("image_id").get<std::string>();
      set.members.push_back({id, m.at("activation").get<double>(), load_mask(root, set.class_id, set.feature_id, id)});
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

}  // namespace spurious
