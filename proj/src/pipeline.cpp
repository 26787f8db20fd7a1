#include "spurious/pipeline.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <set>

#include "spurious/annotation.hpp"
#include "spurious/annotation_server.hpp"
#include "spurious/dataset_builder.hpp"
#include "spurious/evaluation.hpp"
#include "spurious/importance.hpp"
#include "spurious/png_io.hpp"
#include "spurious/visualization.hpp"

namespace spurious {

namespace fs = std::filesystem;
using nlohmann::json;
namespace ann = annotation;

static_assert(std::endian::native == std::endian::little, "feature blobs are written in host order");

MissingArtifact::MissingArtifact(const fs::path& path, const std::string& stage)
    : std::runtime_error("missing artifact " + path.string() + " (produced by the '" + stage + "' stage)"),
      stage_(stage) {}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  c.seed = j.value("seed", c.seed);
  const json train = j.value("train", json::object());
  c.architecture = train.value("architecture", c.architecture);
  c.epochs = train.value("epochs", c.epochs);
  c.batch_size = train.value("batch_size", c.batch_size);
  c.learning_rate = train.value("learning_rate", c.learning_rate);
  c.rho = train.value("rho", c.rho);
  c.attack_steps = train.value("attack_steps", c.attack_steps);
  c.norm_mean = train.value("norm_mean", c.norm_mean);
  c.norm_std = train.value("norm_std", c.norm_std);
  c.subset_n = j.value("subset_n", c.subset_n);
  c.top_n = j.value("top_n", c.top_n);
  c.classes = j.value("classes", c.classes);
  const json attack = j.value("feature_attack", json::object());
  c.feature_attack_steps = attack.value("steps", c.feature_attack_steps);
  c.feature_attack_step_size = attack.value("step_size", c.feature_attack_step_size);
  c.feature_attack_rho = attack.value("rho", c.feature_attack_rho);
  c.k_fraction = j.value("k_fraction", c.k_fraction);
  const json sim = j.value("simulate", json::object());
  c.sim_workers = sim.value("workers", c.sim_workers);
  c.sim_region = sim.value("region", c.sim_region);
  c.sim_mass_ratio = sim.value("mass_ratio", c.sim_mass_ratio);
  c.sigmas = j.value("sigmas", c.sigmas);
  if (j.contains("models")) {
    for (const auto& m : j.at("models")) c.models.emplace_back(m.get<std::string>());
  }
  if (c.sim_region.size() != 4) throw InvalidInput("config: simulate.region must be [y0, x0, height, width]");
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read config " + path.string());
  return from_json(json::parse(in));
}

json PipelineConfig::to_json() const {
  json models_json = json::array();
  for (const auto& m : models) models_json.push_back(m.string());
  return {{"dataset", dataset.string()},
          {"out", out.string()},
          {"seed", seed},
          {"train",
           {{"architecture", architecture},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"rho", rho},
            {"attack_steps", attack_steps},
            {"norm_mean", norm_mean},
            {"norm_std", norm_std}}},
          {"subset_n", subset_n},
          {"top_n", top_n},
          {"classes", classes},
          {"feature_attack",
           {{"steps", feature_attack_steps}, {"step_size", feature_attack_step_size}, {"rho", feature_attack_rho}}},
          {"k_fraction", k_fraction},
          {"simulate", {{"workers", sim_workers}, {"region", sim_region}, {"mass_ratio", sim_mass_ratio}}},
          {"sigmas", sigmas},
          {"models", models_json}};
}

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

struct Paths {
  fs::path out;
  fs::path dataset;
  fs::path model() const { return out / "model"; }
  fs::path features() const { return out / "features"; }
  fs::path importance() const { return out / "importance"; }
  fs::path classes() const { return out / "classes"; }
  fs::path assets() const { return out / "assets"; }
  fs::path sets() const { return out / "sets"; }
  fs::path annotation() const { return out / "annotation"; }
  fs::path verdicts() const { return out / "verdicts"; }
  fs::path causal() const { return out / "dataset"; }
  fs::path evaluation() const { return out / "evaluation"; }
  fs::path report() const { return out / "report"; }
};

const fs::path& require(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path)) throw MissingArtifact(path, stage);
  return path;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  return json::parse(in);
}

void write_json_file(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << '\n';
}

std::string relative_to(const fs::path& path, const fs::path& base) {
  const auto rel = path.lexically_relative(base);
  return rel.empty() ? path.string() : rel.generic_string();
}

void write_manifest(const fs::path& file, const std::string& stage, const PipelineConfig& config,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                    const json& details = json::object()) {
  const json cfg = config.to_json();
  json in = json::array(), outj = json::array();
  for (const auto& p : inputs) in.push_back(relative_to(p, config.out));
  for (const auto& p : outputs) outj.push_back(relative_to(p, config.out));
  write_json_file(file, {{"stage", stage},
                         {"seed", config.seed},
                         {"config_hash", config_hash(cfg)},
                         {"config", cfg},
                         {"inputs", in},
                         {"outputs", outj},
                         {"details", details},
                         {"created_at", ann::utc_timestamp()}});
}

ImageDataset load_dataset(const PipelineConfig& config) {
  if (config.dataset.empty()) throw InvalidInput("config: dataset path is not set");
  require(config.dataset / "classes.json", "synth");
  return load_image_folder(config.dataset);
}

ModelHandle load_trained(const Paths& p) {
  require(p.model() / "model.json", "train-robust");
  return load_model(p.model());
}

StoredFeatures load_features(const Paths& p, const ImageDataset& dataset) {
  require(p.features() / "meta.json", "extract");
  StoredFeatures f = read_features(p.features());
  if (f.image_ids.size() != dataset.size()) throw InvalidInput("stored features do not match the dataset");
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    if (f.image_ids[n] != dataset.items[n].id) throw InvalidInput("stored features do not match the dataset order");
  }
  return f;
}

ImportanceTable load_importance(const Paths& p) {
  return ImportanceTable::from_json(read_json_file(require(p.importance() / "importance.json", "importance")));
}

ClassSubset load_subset(const Paths& p) {
  return class_subset_from_json(read_json_file(require(p.classes() / "subset.json", "select-classes")));
}

std::map<int, std::vector<std::size_t>> top_feature_map(const ImportanceTable& table, const ClassSubset& subset,
                                                        std::size_t n) {
  std::map<int, std::vector<std::size_t>> out;
  for (int cls : subset.classes) out[cls] = top_features(table, cls, std::min(n, table.feature_dim()));
  return out;
}

// Stage implementations.

void stage_synth(const PipelineConfig& config, const StageOptions& options, std::ostream& log) {
  if (config.dataset.empty()) throw InvalidInput("config: dataset path is not set");
  WatermarkConfig wm;
  wm.images_per_class = options.synth_images_per_class;
  wm.seed = config.seed;
  const ImageDataset dataset = make_watermark_dataset(wm);
  save_image_folder(dataset, config.dataset);
  const PixelRegion region = watermark_region(wm);
  write_json_file(config.dataset / "fixture.json",
                  {{"watermarked_class", wm.watermarked_class},
                   {"region", {region.y0, region.x0, region.height, region.width}},
                   {"images_per_class", wm.images_per_class}});
  log << "synth: " << dataset.size() << " images in " << config.dataset << '\n';
  write_manifest(config.dataset / "manifest.json", "synth", config, {},
                 {config.dataset / "classes.json", config.dataset / "fixture.json"},
                 {{"images_per_class", wm.images_per_class}});
}

void stage_train(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const ImageDataset dataset = load_dataset(config);
  TrainConfig tc;
  tc.architecture = config.architecture;
  tc.epochs = config.epochs;
  tc.batch_size = config.batch_size;
  tc.learning_rate = config.learning_rate;
  tc.rho = config.rho;
  tc.attack_steps = config.attack_steps;
  tc.seed = config.seed;
  tc.normalization = {config.norm_mean, config.norm_std};
  const ModelHandle model = train_robust(dataset, tc, [&](const EpochStats& s) {
    log << "train-robust: epoch " << s.epoch << " loss " << s.mean_loss << " acc " << s.train_accuracy << '\n';
  });
  save_model(model, p.model());
  write_manifest(p.model() / "manifest.json", "train-robust", config, {config.dataset},
                 {p.model() / "model.json", p.model() / "weights.bin"});
}

void stage_extract(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const ImageDataset dataset = load_dataset(config);
  const ModelHandle model = load_trained(p);
  const auto inputs = normalized_images(model, dataset);
  StoredFeatures f;
  f.batch = extract_features(model, inputs);
  f.predictions = predict(model, inputs);
  for (const auto& item : dataset.items) {
    f.image_ids.push_back(item.id);
    f.labels.push_back(item.label);
  }
  write_features(f, p.features());
  log << "extract: " << dataset.size() << " feature vectors of dim " << model.feature_dim() << '\n';
  write_manifest(p.features() / "manifest.json", "extract", config, {config.dataset, p.model()},
                 {p.features() / "meta.json", p.features() / "vectors.bin", p.features() / "maps.bin"});
}

void stage_importance(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const ImageDataset dataset = load_dataset(config);
  const ModelHandle model = load_trained(p);
  const StoredFeatures f = load_features(p, dataset);
  const ImportanceTable table = build_importance_table(model, f.batch.vectors, f.predictions);
  fs::create_directories(p.importance());
  write_json_file(p.importance() / "importance.json", table.to_json());
  table.write_csv(p.importance() / "importance.csv");
  json top = json::object();
  for (int cls : table.classes()) top[std::to_string(cls)] = top_features(table, cls, std::min(config.top_n, table.feature_dim()));
  write_json_file(p.importance() / "top_features.json", top);
  const std::string model_id = p.model().filename().string();
  json tables = json::array();
  for (Grouping g : {Grouping::kLabel, Grouping::kPrediction}) {
    tables.push_back(to_json(AccuracyTable{model_id, g, per_class_accuracy(f.labels, f.predictions, g)}));
  }
  write_json_file(p.importance() / "accuracy.json", {{"tables", tables}});
  log << "importance: rows for " << table.classes().size() << " classes\n";
  write_manifest(p.importance() / "manifest.json", "importance", config, {p.model(), p.features()},
                 {p.importance() / "importance.json", p.importance() / "importance.csv",
                  p.importance() / "top_features.json", p.importance() / "accuracy.json"});
}

void stage_select(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const ImportanceTable table = load_importance(p);
  const json acc = read_json_file(require(p.importance() / "accuracy.json", "importance"));
  const auto rows = table.classes();
  const std::set<int> with_rows(rows.begin(), rows.end());
  ClassSubset subset;
  json details = json::object();
  if (!config.classes.empty()) {
    for (int cls : config.classes) {
      if (!with_rows.count(cls)) {
        throw InvalidInput("select-classes: class " + std::to_string(cls) + " has no importance row");
      }
    }
    subset.classes = config.classes;
    std::sort(subset.classes.begin(), subset.classes.end());
    subset.classes.erase(std::unique(subset.classes.begin(), subset.classes.end()), subset.classes.end());
    details["source"] = "explicit";
  } else {
    std::vector<AccuracyTable> tables;
    std::size_t n = config.subset_n;
    for (const auto& t : acc.at("tables")) {
      tables.push_back(accuracy_table_from_json(t));
      n = std::min(n, tables.back().accuracy.size());
    }
    subset = select_class_subset(tables, n);
    std::vector<int> dropped;
    std::erase_if(subset.classes, [&](int cls) {
      if (with_rows.count(cls)) return false;
      dropped.push_back(cls);
      subset.provenance.erase(cls);
      return true;
    });
    details = {{"source", "accuracy"}, {"n", n}, {"dropped_without_importance", dropped}};
  }
  write_json_file(p.classes() / "subset.json", to_json(subset));
  log << "select-classes: " << subset.classes.size() << " classes\n";
  write_manifest(p.classes() / "manifest.json", "select-classes", config, {p.importance()},
                 {p.classes() / "subset.json"}, details);
}

Tensor to_pixels(const ModelHandle& model, const Tensor& normalized) {
  Tensor out = model.denormalize(normalized);
  for (float& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

void stage_visualize(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const ImageDataset dataset = load_dataset(config);
  const ModelHandle model = load_trained(p);
  const StoredFeatures f = load_features(p, dataset);
  const ImportanceTable table = load_importance(p);
  const ClassSubset subset = load_subset(p);
  const FeatureAttackConfig attack{config.feature_attack_steps, config.feature_attack_step_size,
                                   config.feature_attack_rho};
  std::size_t bundles = 0;
  for (const auto& [cls, features] : top_feature_map(table, subset, config.top_n)) {
    const auto indices = dataset.indices_with_label(cls);
    for (std::size_t k = 0; k < std::min<std::size_t>(3, indices.size()); ++k) {
      png::write_rgb8(p.assets() / "classes" / std::to_string(cls) / ("example_" + std::to_string(k) + ".png"),
                      dataset.items[indices[k]].image);
    }
    for (std::size_t feature : features) {
      const FeatureImageSet top = build_feature_set(dataset, f.batch, cls, feature, 5);
      if (top.shortfall) {
        throw InvalidInput("visualize: class " + std::to_string(cls) + " has fewer than 5 images");
      }
      const auto refs = ann::discovery_assets(cls, feature);
      for (std::size_t k = 0; k < top.members.size(); ++k) {
        const auto& member = top.members[k];
        const LabeledImage* item = dataset.find(member.image_id);
        const auto attacked = feature_attack(model, model.normalize(item->image), feature, attack);
        png::write_rgb8(p.assets() / refs[3 * k].path, item->image);
        png::write_rgb8(p.assets() / refs[3 * k + 1].path, heatmap(item->image, member.nam).values);
        png::write_rgb8(p.assets() / refs[3 * k + 2].path, to_pixels(model, attacked.perturbed));
        save_trajectory_json(attacked, p.assets() / (refs[3 * k + 2].path + ".json"));
      }
      ++bundles;
    }
  }
  log << "visualize: " << bundles << " bundles\n";
  write_manifest(p.assets() / "manifest.json", "visualize", config,
                 {config.dataset, p.model(), p.features(), p.importance(), p.classes()}, {p.assets()},
                 {{"bundles", bundles}});
}

void stage_build_sets(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const ImageDataset dataset = load_dataset(config);
  const StoredFeatures f = load_features(p, dataset);
  const ImportanceTable table = load_importance(p);
  const ClassSubset subset = load_subset(p);
  std::vector<FeatureImageSet> sets;
  json shortfalls = json::array();
  for (const auto& [cls, features] : top_feature_map(table, subset, config.top_n)) {
    for (std::size_t feature : features) {
      sets.push_back(build_feature_set(dataset, f.batch, cls, feature, std::nullopt, config.k_fraction));
      if (sets.back().shortfall) shortfalls.push_back({cls, feature});
    }
  }
  write_feature_sets(sets, p.sets());
  log << "build-sets: " << sets.size() << " feature sets\n";
  write_manifest(p.sets() / "manifest.json", "build-sets", config,
                 {config.dataset, p.features(), p.importance(), p.classes()}, {p.sets() / "sets.json"},
                 {{"sets", sets.size()}, {"shortfall", shortfalls}});
}

std::vector<ann::Verdict> load_verdicts(const Paths& p) {
  std::vector<ann::Verdict> out;
  const json verdicts_doc = read_json_file(require(p.verdicts() / "verdicts.json", "aggregate"));
  for (const auto& v : verdicts_doc.at("verdicts")) {
    out.push_back(ann::verdict_from_json(v));
  }
  return out;
}

std::vector<FeatureImageSet> load_sets(const Paths& p) {
  require(p.sets() / "sets.json", "build-sets");
  return read_feature_sets(p.sets());
}

void stage_build_hits(const PipelineConfig& config, const Paths& p, const StageOptions& options, std::ostream& log,
                      const fs::path& manifest) {
  const ann::Study study = ann::parse_study(options.study);
  std::vector<ann::Hit> hits;
  std::vector<fs::path> inputs;
  if (study == ann::Study::kDiscovery) {
    const ImageDataset dataset = load_dataset(config);
    const ClassSubset subset = load_subset(p);
    require(p.assets() / "manifest.json", "visualize");
    std::map<int, ann::ClassInfo> info;
    for (int cls : subset.classes) {
      ann::ClassInfo ci{dataset.class_names.at(static_cast<std::size_t>(cls)), "", {}};
      for (int k = 0; k < 3; ++k) {
        const std::string rel = "classes/" + std::to_string(cls) + "/example_" + std::to_string(k) + ".png";
        if (fs::exists(p.assets() / rel)) ci.examples.push_back(rel);
      }
      info[cls] = ci;
    }
    hits = ann::build_discovery_hits(subset, top_feature_map(load_importance(p), subset, config.top_n), p.assets(),
                                     info);
    inputs = {p.classes(), p.importance(), p.assets()};
  } else {
    const ImageDataset dataset = load_dataset(config);
    const VerdictMap verdicts = ann::discovery_verdict_map(load_verdicts(p));
    std::vector<FeatureImageSet> spurious;
    for (auto& set : load_sets(p)) {
      const auto it = verdicts.find({set.class_id, set.feature_id});
      if (it != verdicts.end() && it->second == FeatureKind::kSpurious) spurious.push_back(std::move(set));
    }
    hits = ann::build_validation_hits(spurious);
    for (const auto& set : spurious) {
      const Extremes ex = extremes_for_validation(set);
      const auto refs = ann::validation_assets(set.class_id, set.feature_id);
      std::size_t r = 0;
      for (const auto* side : {&ex.top, &ex.bottom}) {
        for (const auto& member : *side) {
          const LabeledImage* item = dataset.find(member.image_id);
          png::write_rgb8(p.assets() / refs[r++].path, item->image);
          png::write_rgb8(p.assets() / refs[r++].path, heatmap(item->image, member.nam).values);
        }
      }
    }
    inputs = {p.verdicts(), p.sets()};
  }
  const auto workers = ann::synthetic_workers(config.sim_workers, 2, config.seed);
  ann::AnnotationStore::initialize(p.annotation(), hits, workers);
  log << "build-hits: " << hits.size() << ' ' << options.study << " HITs\n";
  write_manifest(manifest, "build-hits", config, inputs, {p.annotation() / "hits.json"},
                 {{"study", options.study}, {"hits", hits.size()}});
}

double region_mass_ratio(const NeuralActivationMap& nam, const std::vector<std::size_t>& region) {
  const PixelRegion r{region[0], region[1], region[2], region[3]};
  double inside = 0.0, total = 0.0;
  for (std::size_t y = 0; y < nam.height; ++y) {
    for (std::size_t x = 0; x < nam.width; ++x) {
      total += nam.at(y, x);
      if (r.contains(y, x)) inside += nam.at(y, x);
    }
  }
  if (total == 0.0) return 0.0;
  const double baseline = static_cast<double>(r.area()) / static_cast<double>(nam.height * nam.width);
  return inside / total / baseline;
}

void stage_simulate(const PipelineConfig& config, const Paths& p, const StageOptions& options, std::ostream& log,
                    const fs::path& manifest) {
  const ann::Study study = ann::parse_study(options.study);
  require(p.annotation() / "hits.json", "build-hits");
  std::map<FeatureKey, std::pair<double, double>> ratios;  // mean over top-5, bottom-5
  for (const auto& set : load_sets(p)) {
    const std::size_t n = std::min<std::size_t>(5, set.members.size());
    double top = 0.0, bottom = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      top += region_mass_ratio(set.members[k].nam, config.sim_region);
      bottom += region_mass_ratio(set.members[set.members.size() - 1 - k].nam, config.sim_region);
    }
    ratios[{set.class_id, set.feature_id}] = {n ? top / n : 0.0, n ? bottom / n : 0.0};
  }
  std::vector<ann::WorkerProfile> workers;
  const json workers_doc = read_json_file(p.annotation() / "workers.json");
  for (const auto& w : workers_doc.at("workers")) {
    workers.push_back(ann::worker_from_json(w));
  }
  const double threshold = config.sim_mass_ratio;
  ann::AnnotationStore store(p.annotation());
  const std::size_t accepted = ann::simulate_study(store, workers, study, [&](const ann::Hit& hit, const ann::WorkerProfile&) {
    const auto it = ratios.find({hit.class_id, hit.feature_id});
    const auto [top, bottom] = it == ratios.end() ? std::pair{0.0, 0.0} : it->second;
    if (hit.study == ann::Study::kDiscovery) return ann::SimulatedResponse{top > threshold ? "background" : "main-object", 4};
    return ann::SimulatedResponse{(top > threshold) == (bottom > threshold) ? "same" : "different", 4};
  });
  store.flush();
  log << "simulate: " << accepted << " accepted " << options.study << " responses\n";
  write_manifest(manifest, "simulate", config, {p.annotation() / "hits.json", p.sets()},
                 {p.annotation() / "responses.ndjson"}, {{"study", options.study}, {"accepted", accepted}});
}

void stage_serve(const PipelineConfig& config, const Paths& p, std::ostream& log, const fs::path& manifest) {
  require(p.annotation() / "hits.json", "build-hits");
  const auto [host, port] = ann::bind_address_from_env();
  write_manifest(manifest, "serve", config, {p.annotation(), p.assets()}, {p.annotation() / "responses.ndjson"},
                 {{"bind", host + ":" + std::to_string(port)}});
  ann::AnnotationStore store(p.annotation());
  ann::AnnotationServer server(store, p.assets());
  log << "serve: listening on " << host << ':' << port << std::endl;
  server.run(host, port);
}

void stage_aggregate(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  require(p.annotation() / "hits.json", "build-hits");
  const ann::StudyState state = ann::AnnotationStore::replay(p.annotation());
  json verdicts = json::array(), incomplete = json::array();
  for (const auto& v : state.verdicts()) verdicts.push_back(ann::to_json(v));
  for (const auto& hit : state.hits()) {
    if (state.status(hit.id) == ann::HitStatus::kOpen) incomplete.push_back(hit.id);
  }
  write_json_file(p.verdicts() / "verdicts.json", {{"verdicts", verdicts}, {"incomplete", incomplete}});
  log << "aggregate: " << verdicts.size() << " verdicts, " << incomplete.size() << " incomplete HITs\n";
  write_manifest(p.verdicts() / "manifest.json", "aggregate", config, {p.annotation() / "responses.ndjson"},
                 {p.verdicts() / "verdicts.json"}, {{"verdicts", verdicts.size()}, {"incomplete", incomplete.size()}});
}

std::pair<AccuracyMap, AccuracyMap> load_accuracy(const Paths& p) {
  AccuracyMap label, prediction;
  const json tables_doc = read_json_file(require(p.importance() / "accuracy.json", "importance"));
  for (const auto& t : tables_doc.at("tables")) {
    const AccuracyTable table = accuracy_table_from_json(t);
    (table.grouping == Grouping::kLabel ? label : prediction) = table.accuracy;
  }
  return {label, prediction};
}

void stage_build_dataset(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const ImageDataset dataset = load_dataset(config);
  const auto sets = load_sets(p);
  const VerdictMap verdicts = ann::discovery_verdict_map(load_verdicts(p));
  CausalDataset causal = assemble_causal_dataset(dataset, sets, verdicts);
  causal.provenance = {{"dataset", config.dataset.string()}, {"seed", config.seed},
                       {"k_fraction", config.k_fraction}};
  write_causal_dataset(causal, p.causal());
  const auto [label_acc, pred_acc] = load_accuracy(p);
  const DatasetStats stats = dataset_stats(causal, load_importance(p), label_acc, pred_acc);
  write_json_file(p.causal() / "stats.json", to_json(stats));
  write_stats_csv(stats, p.causal() / "stats");
  log << "build-dataset: " << causal.instances.size() << " images, " << causal.verdicts.size() << " verdicts\n";
  write_manifest(p.causal() / "manifest.json", "build-dataset", config,
                 {config.dataset, p.sets(), p.verdicts(), p.importance()},
                 {p.causal() / "meta.json", p.causal() / "stats.json"});
}

void stage_evaluate(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  require(p.causal() / "meta.json", "build-dataset");
  const CausalDataset causal = read_causal_dataset(p.causal());
  std::vector<fs::path> model_dirs = config.models;
  if (model_dirs.empty()) model_dirs.push_back(p.model());
  std::vector<ModelHandle> models;
  std::vector<NamedModel> named;
  for (const auto& dir : model_dirs) {
    require(dir / "model.json", "train-robust");
    models.push_back(load_model(dir));
  }
  for (std::size_t n = 0; n < models.size(); ++n) named.push_back({model_dirs[n].filename().string(), &models[n]});
  json reports = json::array();
  fs::create_directories(p.evaluation());
  for (const auto& m : named) {
    for (double sigma : config.sigmas) {
      const AccuracyReport report = accuracy_report(m.id, *m.model, causal, {sigma, config.seed});
      reports.push_back(to_json(report));
      char name[64];
      std::snprintf(name, sizeof name, "accuracy_%s_sigma%.3f.csv", m.id.c_str(), sigma);
      write_accuracy_csv(report, p.evaluation() / name);
    }
  }
  const auto rows = sensitivity_report(named, causal, config.sigmas, config.seed);
  write_json_file(p.evaluation() / "report.json", {{"seed", config.seed}, {"sigmas", config.sigmas},
                                                   {"accuracy", reports}, {"sensitivity", to_json(rows)}});
  write_sensitivity_csv(rows, p.evaluation() / "sensitivity.csv");
  log << "evaluate: " << reports.size() << " accuracy reports, " << rows.size() << " sensitivity rows\n";
  std::vector<fs::path> inputs{p.causal()};
  inputs.insert(inputs.end(), model_dirs.begin(), model_dirs.end());
  write_manifest(p.evaluation() / "manifest.json", "evaluate", config, inputs,
                 {p.evaluation() / "report.json", p.evaluation() / "sensitivity.csv"});
}

void stage_report(const PipelineConfig& config, const Paths& p, std::ostream& log) {
  const json stats = read_json_file(require(p.causal() / "stats.json", "build-dataset"));
  const json eval = read_json_file(require(p.evaluation() / "report.json", "evaluate"));
  fs::create_directories(p.report());
  {
    std::ofstream out(p.report() / "classes_by_spurious_count.csv");
    out << "spurious_count,num_classes\n";
    for (const auto& [k, v] : stats.at("classes_by_spurious_count").items()) out << k << ',' << v << '\n';
  }
  {
    std::ofstream out(p.report() / "spurious_by_rank.csv");
    out << "rank,num_spurious\n";
    for (const auto& [k, v] : stats.at("spurious_by_rank").items()) out << k << ',' << v << '\n';
  }
  {
    std::ofstream out(p.report() / "accuracy_vs_spurious.csv");
    out << "class_id,spurious_count,label_accuracy,prediction_accuracy\n";
    for (const auto& pt : stats.at("accuracy_vs_spurious")) {
      out << pt.at("class_id") << ',' << pt.at("spurious_count") << ',';
      if (!pt.at("label_accuracy").is_null()) out << pt.at("label_accuracy").get<double>();
      out << ',';
      if (!pt.at("prediction_accuracy").is_null()) out << pt.at("prediction_accuracy").get<double>();
      out << '\n';
    }
  }
  // Mean drop per (model, kind, sigma) over features.
  std::map<std::tuple<std::string, std::string, double>, std::pair<double, std::size_t>> drops;
  for (const auto& r : eval.at("sensitivity")) {
    auto& [sum, n] = drops[{r.at("model_id").get<std::string>(), r.at("kind").get<std::string>(),
                            r.at("sigma").get<double>()}];
    sum += r.at("drop").get<double>();
    ++n;
  }
  {
    std::ofstream out(p.report() / "drop_by_sigma.csv");
    out << "model_id,kind,sigma,features,mean_drop\n";
    for (const auto& [key, v] : drops) {
      out << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << v.second << ','
          << v.first / static_cast<double>(v.second) << '\n';
    }
  }
  {
    std::ofstream out(p.report() / "feature_drops.csv");
    out << "model_id,class_id,feature_id,kind,sigma,drop\n";
    for (const auto& r : eval.at("sensitivity")) {
      out << r.at("model_id").get<std::string>() << ',' << r.at("class_id") << ',' << r.at("feature_id") << ','
          << r.at("kind").get<std::string>() << ',' << r.at("sigma").get<double>() << ','
          << r.at("drop").get<double>() << '\n';
    }
  }
  write_json_file(p.report() / "summary.json", {{"accuracy", eval.at("accuracy")}, {"stats", stats}});
  log << "report: written to " << p.report() << '\n';
  write_manifest(p.report() / "manifest.json", "report", config, {p.causal() / "stats.json", p.evaluation()},
                 {p.report()});
}

}  // namespace

fs::path manifest_path(const PipelineConfig& config, const std::string& stage, const StageOptions& options) {
  const Paths p{config.out, config.dataset};
  if (stage == "synth") return config.dataset / "manifest.json";
  if (stage == "train-robust") return p.model() / "manifest.json";
  if (stage == "extract") return p.features() / "manifest.json";
  if (stage == "importance") return p.importance() / "manifest.json";
  if (stage == "select-classes") return p.classes() / "manifest.json";
  if (stage == "visualize") return p.assets() / "manifest.json";
  if (stage == "build-sets") return p.sets() / "manifest.json";
  if (stage == "build-hits" || stage == "simulate") {
    return p.annotation() / ("manifest-" + stage + "-" + options.study + ".json");
  }
  if (stage == "serve") return p.annotation() / "manifest-serve.json";
  if (stage == "aggregate") return p.verdicts() / "manifest.json";
  if (stage == "build-dataset") return p.causal() / "manifest.json";
  if (stage == "evaluate") return p.evaluation() / "manifest.json";
  if (stage == "report") return p.report() / "manifest.json";
  throw InvalidInput("unknown stage '" + stage + "'");
}

json manifest_without_timestamp(const fs::path& manifest_file) {
  json j = read_json_file(manifest_file);
  j.erase("created_at");
  return j;
}

void run_stage(const std::string& stage, const PipelineConfig& config, const StageOptions& options,
               std::ostream& log) {
  const Paths p{config.out, config.dataset};
  const fs::path manifest = manifest_path(config, stage, options);
  if (stage == "synth") return stage_synth(config, options, log);
  if (stage == "train-robust") return stage_train(config, p, log);
  if (stage == "extract") return stage_extract(config, p, log);
  if (stage == "importance") return stage_importance(config, p, log);
  if (stage == "select-classes") return stage_select(config, p, log);
  if (stage == "visualize") return stage_visualize(config, p, log);
  if (stage == "build-sets") return stage_build_sets(config, p, log);
  if (stage == "build-hits") return stage_build_hits(config, p, options, log, manifest);
  if (stage == "simulate") return stage_simulate(config, p, options, log, manifest);
  if (stage == "serve") return stage_serve(config, p, log, manifest);
  if (stage == "aggregate") return stage_aggregate(config, p, log);
  if (stage == "build-dataset") return stage_build_dataset(config, p, log);
  if (stage == "evaluate") return stage_evaluate(config, p, log);
  if (stage == "report") return stage_report(config, p, log);
}

void write_features(const StoredFeatures& f, const fs::path& dir) {
  fs::create_directories(dir);
  const std::size_t n = f.batch.vectors.size();
  std::size_t m = 0, h = 0, w = 0;
  if (n > 0) {
    m = f.batch.maps[0].maps.dim(0);
    h = f.batch.maps[0].maps.dim(1);
    w = f.batch.maps[0].maps.dim(2);
  }
  {
    std::ofstream out(dir / "vectors.bin", std::ios::binary);
    for (const auto& v : f.batch.vectors) {
      out.write(reinterpret_cast<const char*>(v.values.data()), static_cast<std::streamsize>(v.values.size() * 4));
    }
  }
  {
    std::ofstream out(dir / "maps.bin", std::ios::binary);
    for (const auto& s : f.batch.maps) {
      out.write(reinterpret_cast<const char*>(s.maps.data()), static_cast<std::streamsize>(s.maps.size() * 4));
    }
  }
  write_json_file(dir / "meta.json", {{"format_version", 1},
                                      {"encoding", "float32-le"},
                                      {"count", n},
                                      {"feature_dim", m},
                                      {"map_height", h},
                                      {"map_width", w},
                                      {"image_ids", f.image_ids},
                                      {"labels", f.labels},
                                      {"predictions", f.predictions}});
}

StoredFeatures read_features(const fs::path& dir) {
  const json meta = read_json_file(dir / "meta.json");
  StoredFeatures f;
  f.image_ids = meta.at("image_ids").get<std::vector<std::string>>();
  f.labels = meta.at("labels").get<std::vector<int>>();
  f.predictions = meta.at("predictions").get<std::vector<int>>();
  const auto n = meta.at("count").get<std::size_t>();
  const auto m = meta.at("feature_dim").get<std::size_t>();
  const auto h = meta.at("map_height").get<std::size_t>();
  const auto w = meta.at("map_width").get<std::size_t>();
  std::ifstream vin(dir / "vectors.bin", std::ios::binary);
  std::ifstream min(dir / "maps.bin", std::ios::binary);
  if (!vin || !min) throw InvalidInput("features: missing blobs in " + dir.string());
  for (std::size_t i = 0; i < n; ++i) {
    NeuralFeatureVector v;
    v.values.resize(m);
    vin.read(reinterpret_cast<char*>(v.values.data()), static_cast<std::streamsize>(m * 4));
    FeatureMapStack s{Tensor({m, h, w})};
    min.read(reinterpret_cast<char*>(s.maps.data()), static_cast<std::streamsize>(m * h * w * 4));
    if (!vin || !min) throw InvalidInput("features: truncated blobs in " + dir.string());
    f.batch.vectors.push_back(std::move(v));
    f.batch.maps.push_back(std::move(s));
  }
  return f;
}

}  // namespace spurious
