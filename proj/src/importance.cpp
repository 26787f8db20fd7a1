#include "spurious/importance.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

namespace spurious {

using nlohmann::json;

std::string to_string(Grouping grouping) {
  return grouping == Grouping::kLabel ? "label" : "prediction";
}

Grouping parse_grouping(const std::string& text) {
  if (text == "label") return Grouping::kLabel;
  if (text == "prediction") return Grouping::kPrediction;
  throw InvalidInput("unknown grouping '" + text + "' (expected label or prediction)");
}

EmptyGroup::EmptyGroup(int class_id)
    : InvalidInput("empty group: no image is grouped under class " + std::to_string(class_id)),
      class_id_(class_id) {}

MeanFeatureVector class_mean_features(std::span<const NeuralFeatureVector> features,
                                      std::span<const int> group_keys, int class_id) {
  if (features.size() != group_keys.size()) {
    throw InvalidInput("class_mean_features: features and keys differ in length");
  }
  MeanFeatureVector mean{class_id, {}, 0};
  for (std::size_t n = 0; n < features.size(); ++n) {
    if (group_keys[n] != class_id) continue;
    const auto& v = features[n].values;
    if (mean.values.empty()) mean.values.assign(v.size(), 0.0);
    if (v.size() != mean.values.size()) throw InvalidInput("class_mean_features: ragged feature vectors");
    for (std::size_t j = 0; j < v.size(); ++j) mean.values[j] += v[j];
    ++mean.support;
  }
  if (mean.support == 0) throw EmptyGroup(class_id);
  for (double& v : mean.values) v /= static_cast<double>(mean.support);
  return mean;
}

MeanFeatureVector class_mean_features(const ModelHandle& model, const ImageDataset& dataset,
                                      int class_id) {
  const auto inputs = normalized_images(model, dataset);
  const auto batch = extract_features(model, inputs);
  const auto predictions = predict(model, inputs);
  return class_mean_features(batch.vectors, predictions, class_id);
}

std::vector<double> feature_importance(const MeanFeatureVector& mean, const LinearHead& head) {
  if (mean.values.size() != head.feature_dim) {
    throw InvalidInput("feature_importance: mean has " + std::to_string(mean.values.size()) +
                       " features, head expects " + std::to_string(head.feature_dim));
  }
  if (mean.class_id < 0 || static_cast<std::size_t>(mean.class_id) >= head.num_classes) {
    throw InvalidInput("feature_importance: class " + std::to_string(mean.class_id) + " out of range");
  }
  const auto row = head.row(static_cast<std::size_t>(mean.class_id));
  std::vector<double> iv(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) iv[j] = mean.values[j] * static_cast<double>(row[j]);
  return iv;
}

ImportanceTable::ImportanceTable(std::size_t num_classes, std::size_t feature_dim)
    : num_classes_(num_classes),
      feature_dim_(feature_dim),
      values_(num_classes * feature_dim, 0.0),
      ranks_(num_classes * feature_dim, 0),
      present_(num_classes, false) {}

void ImportanceTable::set_row(int class_id, std::span<const double> values) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= num_classes_) {
    throw InvalidInput("importance: class " + std::to_string(class_id) + " out of range");
  }
  if (values.size() != feature_dim_) throw InvalidInput("importance: row length mismatch");
  const auto base = static_cast<std::size_t>(class_id) * feature_dim_;
  std::copy(values.begin(), values.end(), values_.begin() + static_cast<long>(base));
  std::vector<std::size_t> order(feature_dim_);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  for (std::size_t r = 0; r < order.size(); ++r) ranks_[base + order[r]] = static_cast<int>(r + 1);
  present_[static_cast<std::size_t>(class_id)] = true;
}

double ImportanceTable::value(int class_id, std::size_t feature) const {
  return row(class_id)[feature];
}

int ImportanceTable::rank(int class_id, std::size_t feature) const {
  if (!has_row(class_id)) throw InvalidInput("importance: class " + std::to_string(class_id) + " has no row");
  return ranks_.at(static_cast<std::size_t>(class_id) * feature_dim_ + feature);
}

std::span<const double> ImportanceTable::row(int class_id) const {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= num_classes_ || !has_row(class_id)) {
    throw InvalidInput("importance: class " + std::to_string(class_id) + " has no row");
  }
  return std::span<const double>(values_).subspan(static_cast<std::size_t>(class_id) * feature_dim_,
                                                  feature_dim_);
}

std::vector<int> ImportanceTable::classes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < num_classes_; ++i) {
    if (present_[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

void ImportanceTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out.precision(17);
  out << "class_id,feature_id,iv,rank\n";
  for (int i : classes()) {
    for (std::size_t j = 0; j < feature_dim_; ++j) {
      out << i << ',' << j << ',' << value(i, j) << ',' << rank(i, j) << '\n';
    }
  }
}

json ImportanceTable::to_json() const {
  json rows = json::object();
  for (int i : classes()) {
    const auto r = row(i);
    json ranks = json::array();
    for (std::size_t j = 0; j < feature_dim_; ++j) ranks.push_back(rank(i, j));
    rows[std::to_string(i)] = {{"iv", std::vector<double>(r.begin(), r.end())}, {"rank", ranks}};
  }
  return {{"num_classes", num_classes_}, {"feature_dim", feature_dim_}, {"classes", rows}};
}

ImportanceTable ImportanceTable::from_json(const json& j) {
  ImportanceTable table(j.at("num_classes").get<std::size_t>(), j.at("feature_dim").get<std::size_t>());
  for (const auto& [key, value] : j.at("classes").items()) {
    table.set_row(std::stoi(key), value.at("iv").get<std::vector<double>>());
  }
  return table;
}

ImportanceTable build_importance_table(const ModelHandle& model,
                                       std::span<const NeuralFeatureVector> features,
                                       std::span<const int> predictions) {
  ImportanceTable table(model.num_classes(), model.feature_dim());
  for (std::size_t i = 0; i < model.num_classes(); ++i) {
    const int class_id = static_cast<int>(i);
    if (std::find(predictions.begin(), predictions.end(), class_id) == predictions.end()) continue;
    const auto mean = class_mean_features(features, predictions, class_id);
    table.set_row(class_id, feature_importance(mean, model.head()));
  }
  return table;
}

std::vector<std::size_t> top_features(const ImportanceTable& table, int class_id, std::size_t n) {
  if (n < 1 || n > table.feature_dim()) {
    throw InvalidInput("top_features: n=" + std::to_string(n) + " outside [1, " +
                       std::to_string(table.feature_dim()) + "]");
  }
  std::vector<std::size_t> out(n);
  for (std::size_t j = 0; j < table.feature_dim(); ++j) {
    const int r = table.rank(class_id, j);
    if (static_cast<std::size_t>(r) <= n) out[static_cast<std::size_t>(r - 1)] = j;
  }
  return out;
}

AccuracyMap per_class_accuracy(std::span<const int> labels, std::span<const int> predictions,
                               Grouping grouping) {
  if (labels.empty()) throw InvalidInput("per_class_accuracy: dataset is empty");
  if (labels.size() != predictions.size()) throw InvalidInput("per_class_accuracy: length mismatch");
  std::map<int, std::pair<std::size_t, std::size_t>> counts;  // correct, total
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int key = grouping == Grouping::kLabel ? labels[n] : predictions[n];
    auto& [correct, total] = counts[key];
    ++total;
    if (labels[n] == predictions[n]) ++correct;
  }
  AccuracyMap out;
  for (const auto& [key, c] : counts) {
    out[key] = static_cast<double>(c.first) / static_cast<double>(c.second);
  }
  return out;
}

AccuracyMap per_class_accuracy(const ModelHandle& model, const ImageDataset& dataset,
                               Grouping grouping) {
  const auto predictions = predict(model, normalized_images(model, dataset));
  std::vector<int> labels;
  for (const auto& item : dataset.items) labels.push_back(item.label);
  return per_class_accuracy(labels, predictions, grouping);
}

ClassSubset select_class_subset(std::span<const AccuracyTable> tables, std::size_t n) {
  if (tables.empty()) throw InvalidInput("select_class_subset: no accuracy tables");
  ClassSubset subset;
  std::set<int> members;
  for (const auto& table : tables) {
    if (table.accuracy.empty()) throw InvalidInput("select_class_subset: empty table for " + table.model_id);
    if (n > table.accuracy.size()) {
      throw InvalidInput("select_class_subset: n=" + std::to_string(n) + " exceeds the " +
                         std::to_string(table.accuracy.size()) + " classes of " + table.model_id + "/" +
                         to_string(table.grouping));
    }
    std::vector<std::pair<int, double>> entries(table.accuracy.begin(), table.accuracy.end());
    auto high = entries;
    std::stable_sort(high.begin(), high.end(), [](const auto& a, const auto& b) {
      return a.second > b.second || (a.second == b.second && a.first < b.first);
    });
    auto low = entries;
    std::stable_sort(low.begin(), low.end(), [](const auto& a, const auto& b) {
      return a.second < b.second || (a.second == b.second && a.first < b.first);
    });
    for (std::size_t r = 0; r < n; ++r) {
      for (const auto& [bucket, is_high] : {std::pair{&high, true}, std::pair{&low, false}}) {
        const int cls = (*bucket)[r].first;
        members.insert(cls);
        SubsetContribution c{table.model_id, table.grouping, is_high};
        auto& prov = subset.provenance[cls];
        if (std::find(prov.begin(), prov.end(), c) == prov.end()) prov.push_back(c);
      }
    }
  }
  subset.classes.assign(members.begin(), members.end());
  return subset;
}

json to_json(const AccuracyTable& table) {
  json acc = json::object();
  for (const auto& [cls, value] : table.accuracy) acc[std::to_string(cls)] = value;
  return {{"model_id", table.model_id}, {"grouping", to_string(table.grouping)}, {"accuracy", acc}};
}

AccuracyTable accuracy_table_from_json(const json& j) {
  AccuracyTable table{j.at("model_id").get<std::string>(), parse_grouping(j.at("grouping").get<std::string>()), {}};
  for (const auto& [key, value] : j.at("accuracy").items()) table.accuracy[std::stoi(key)] = value.get<double>();
  return table;
}

json to_json(const ClassSubset& subset) {
  json prov = json::object();
  for (const auto& [cls, contributions] : subset.provenance) {
    json list = json::array();
    for (const auto& c : contributions) {
      list.push_back({{"model_id", c.model_id}, {"grouping", to_string(c.grouping)},
                      {"direction", c.high ? "high" : "low"}});
    }
    prov[std::to_string(cls)] = list;
  }
  return {{"classes", subset.classes}, {"provenance", prov}};
}

ClassSubset class_subset_from_json(const json& j) {
  ClassSubset subset;
  subset.classes = j.at("classes").get<std::vector<int>>();
  if (j.contains("provenance")) {
    for (const auto& [key, list] : j.at("provenance").items()) {
      auto& prov = subset.provenance[std::stoi(key)];
      for (const auto& c : list) {
        prov.push_back({c.at("model_id").get<std::string>(), parse_grouping(c.at("grouping").get<std::string>()),
                        c.at("direction").get<std::string>() == "high"});
      }
    }
  }
  return subset;
}

}  // namespace spurious
