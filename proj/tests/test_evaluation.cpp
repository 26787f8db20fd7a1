#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "spurious/evaluation.hpp"
#include "oracles.hpp"

namespace spurious {
namespace {

using namespace testing;

TEST(Fuse, ComponentwiseMax) {
  const std::vector<NeuralActivationMap> masks{mask_of(2, 2, {0, .5f, 1, 0}), mask_of(2, 2, {.2f, .4f, 0, 1})};
  EXPECT_EQ(fuse_masks(masks).values, (std::vector<float>{.2f, .5f, 1, 1}));
}

TEST(Fuse, SingleAndSelf) {
  const auto a = mask_of(2, 2, {0.1f, 0.7f, 0.3f, 0.0f});
  EXPECT_EQ(fuse_masks(std::vector<NeuralActivationMap>{a}).values, a.values);
  EXPECT_EQ(fuse_masks(std::vector<NeuralActivationMap>{a, a}).values, a.values);
}

TEST(Fuse, EntriesKeepKindAndFeatures) {
  const std::vector<MaskEntry> entries{{3, mask_of(1, 2, {0, 1}, 3)}, {5, mask_of(1, 2, {1, 0}, 5)}};
  const auto fused = fuse_masks(entries, FeatureKind::kCausal);
  EXPECT_EQ(fused.kind, FeatureKind::kCausal);
  EXPECT_EQ(fused.features, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(fused.values, (std::vector<float>{1, 1}));
}

TEST(Fuse, Errors) {
  EXPECT_THROW(fuse_masks(std::vector<NeuralActivationMap>{}), InvalidInput);
  const std::vector<NeuralActivationMap> mixed{mask_of(1, 2, {0, 1}), mask_of(2, 1, {0, 1})};
  EXPECT_THROW(fuse_masks(mixed), InvalidInput);
}

TEST(Corruption, StreamSeedIsSplitmix) {
  for (std::uint64_t seed : {0ull, 7ull, 123456789ull}) {
    for (std::uint64_t stream : {0ull, 1ull, 99ull}) EXPECT_EQ(stream_seed(seed, stream), oracle_stream_seed(seed, stream));
  }
  EXPECT_NE(stream_seed(0, 0), stream_seed(0, 1));
}

TEST(Corruption, ZeroSigmaAndZeroMaskAreIdentities) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({3, 6, 5}, rng);
  const std::vector<float> ones(30, 1.0f), zeros(30, 0.0f);
  EXPECT_EQ(corrupt(x, {6, 5, ones}, {0.0, 4}), x);
  EXPECT_EQ(corrupt(x, {6, 5, zeros}, {0.25, 4}), x);
}

TEST(Corruption, AllOnesMaskMatchesDirectFormula) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({3, 7, 7}, rng);
  const std::vector<float> ones(49, 1.0f);
  for (std::uint64_t stream : {0, 3}) {
    EXPECT_EQ(corrupt(x, {7, 7, ones}, {0.25, 11}, stream), oracle_corrupt(x, ones, 0.25, 11, stream));
  }
}

TEST(Corruption, SoftMaskMatchesDirectFormula) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({3, 5, 4}, rng);
  const Tensor m = random_tensor({20}, rng);
  EXPECT_EQ(corrupt(x, {5, 4, m.values()}, {0.1, 5}, 2), oracle_corrupt(x, m.storage(), 0.1, 5, 2));
}

TEST(Corruption, NoiseScalesLinearlyWithSigma) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({3, 8, 8}, rng);
  const Tensor m = random_tensor({64}, rng);
  const MaskView view{8, 8, m.values()};
  const Tensor n1 = corruption_noise(x.shape(), view, {0.25, 9}, 1);
  const Tensor n2 = corruption_noise(x.shape(), view, {0.5, 9}, 1);
  for (std::size_t i = 0; i < n1.size(); ++i) ASSERT_EQ(n2[i], 2.0f * n1[i]);
  const Tensor y = corrupt(x, view, {0.25, 9}, 1);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(y[i], x[i] + n1[i]);
}

TEST(Corruption, EmpiricalStdMatchesSigma) {
  const std::vector<float> ones(200 * 200, 1.0f);
  for (double sigma : {0.05, 0.25}) {
    const Tensor n = corruption_noise({3, 200, 200}, {200, 200, ones}, {sigma, 1});
    double sum = 0, sq = 0;
    for (float v : n.values()) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    const double count = static_cast<double>(n.size());
    const double sd = std::sqrt(sq / count - (sum / count) * (sum / count));
    EXPECT_LT(std::abs(sd - sigma) / sigma, 0.02);
  }
}

TEST(Corruption, Errors) {
  const std::vector<float> ones(16, 1.0f), bad(16, 1.5f);
  EXPECT_THROW(corrupt(Tensor({3, 4, 4}), {4, 4, ones}, {-0.1, 0}), InvalidInput);
  EXPECT_THROW(corrupt(Tensor({3, 4, 5}), {4, 4, ones}, {0.1, 0}), InvalidInput);
  EXPECT_THROW(corrupt(Tensor({3, 4, 4}), {4, 4, bad}, {0.1, 0}), InvalidInput);
}

void expect_matches(const AccuracyPart& part, const OracleAccuracy& oracle) {
  ASSERT_EQ(part.classes.size(), oracle.per_class.size());
  for (const auto& c : part.classes) {
    EXPECT_EQ(c.clean, oracle.per_class.at(c.class_id).first) << "class " << c.class_id;
    EXPECT_EQ(c.corrupted, oracle.per_class.at(c.class_id).second) << "class " << c.class_id;
  }
  EXPECT_EQ(part.mean_clean, oracle.mean_clean);
  EXPECT_EQ(part.mean_corrupted, oracle.mean_corrupted);
}

TEST(Accuracy, MatchesBruteForceOracle) {
  const auto ds = toy_dataset(5);
  const ModelHandle model = toy_model();
  for (double sigma : {0.25, 1.0, 3.0}) {
    const CorruptionConfig config{sigma, 17};
    const auto causal = causal_accuracy(model, ds, config);
    expect_matches(causal, accuracy_oracle(model, ds, true, sigma, 17));
    EXPECT_EQ(causal.corrupted_kind, FeatureKind::kSpurious);
    const auto spurious = spurious_accuracy(model, ds, config);
    expect_matches(spurious, accuracy_oracle(model, ds, false, sigma, 17));
    EXPECT_EQ(spurious.corrupted_kind, FeatureKind::kCausal);
  }
}

TEST(Accuracy, LargeNoiseChangesSomePredictions) {
  // Guards the oracle comparison against a vacuous fixture.
  const auto ds = toy_dataset(5);
  const auto part = causal_accuracy(toy_model(), ds, {3.0, 17});
  bool changed = false;
  for (const auto& c : part.classes) changed |= c.clean != c.corrupted;
  EXPECT_TRUE(changed);
}

TEST(Accuracy, ZeroSigmaIsCleanAccuracy) {
  const auto ds = toy_dataset(6);
  for (const auto& part : {causal_accuracy(toy_model(), ds, {0.0, 1}), spurious_accuracy(toy_model(), ds, {0.0, 1})}) {
    for (const auto& c : part.classes) EXPECT_EQ(c.clean, c.corrupted);
  }
}

TEST(Accuracy, SpuriousAndCausalSetsDiffer) {
  // Class 0 has both kinds, but only some of its images carry causal masks.
  const auto ds = toy_dataset(7);
  const auto c = causal_accuracy(toy_model(), ds, {0.25, 1});
  const auto s = spurious_accuracy(toy_model(), ds, {0.25, 1});
  EXPECT_EQ(c.classes[0].images, 10u);
  EXPECT_EQ(s.classes[0].images, 3u);
  EXPECT_EQ(s.classes[1].images, 10u);
  EXPECT_EQ(c.excluded, (std::vector<int>{1}));
  EXPECT_TRUE(s.excluded.empty());
}

TEST(Accuracy, NoQualifyingClassThrows) {
  auto ds = toy_dataset(8);
  for (auto& inst : ds.instances) inst.spurious_masks.clear();
  EXPECT_THROW(causal_accuracy(toy_model(), ds, {0.25, 1}), EmptyEvaluation);
  const auto report = accuracy_report("m", toy_model(), ds, {0.25, 1});
  EXPECT_TRUE(report.causal.classes.empty());
  EXPECT_FALSE(report.spurious.classes.empty());
  for (auto& inst : ds.instances) inst.causal_masks.clear();
  EXPECT_THROW(accuracy_report("m", toy_model(), ds, {0.25, 1}), EmptyEvaluation);
}

TEST(Accuracy, ReportWritersCarryEveryClass) {
  TempDir dir("acc");
  const auto ds = toy_dataset(9);
  const auto report = accuracy_report("toy", toy_model(), ds, {0.25, 3});
  write_accuracy_csv(report, dir / "a.csv");
  std::ifstream in(dir / "a.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 1 + report.causal.classes.size() + report.spurious.classes.size());
  const auto j = to_json(report);
  EXPECT_EQ(j.at("model_id"), "toy");
  EXPECT_EQ(j.at("causal_accuracy").at("excluded"), std::vector<int>{1});
}

TEST(Sensitivity, ZeroSigmaHasZeroDrop) {
  const auto ds = toy_dataset(10);
  const ModelHandle model = toy_model();
  const std::vector<NamedModel> models{{"toy", &model}};
  const std::vector<double> sigmas{0.0, 0.25};
  const auto rows = sensitivity_report(models, ds, sigmas, 4);
  ASSERT_EQ(rows.size(), 2 * ds.verdicts.size());
  for (const auto& r : rows) {
    if (r.sigma == 0.0) {
      EXPECT_EQ(r.drop(), 0.0);
    }
  }
  const auto& first = rows.front();
  EXPECT_EQ(first.class_id, 0);
  EXPECT_EQ(first.feature_id, 1u);
  EXPECT_EQ(first.images, 10u);
}

TEST(Sensitivity, ModelBlindToMaskedPixelsHasNoDrop) {
  // A stride-2 1x1 convolution reads only even rows and columns; the masks
  // cover only odd ones.
  ModelHandle model(Architecture::parse("cnn-gap:c2k1s2p0"), {3, 4, 4}, 2);
  model.initialize(2);
  model.mutable_head().weight = {1, -1, -1, 1};
  std::vector<float> odd(16, 0.0f);
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) odd[y * 4 + x] = (y % 2 || x % 2) ? 1.0f : 0.0f;
  }
  CausalDataset ds = toy_dataset(11);
  for (auto& inst : ds.instances) {
    for (auto* side : {&inst.spurious_masks, &inst.causal_masks}) {
      for (auto& e : *side) e.nam.values = odd;
    }
  }
  const std::vector<NamedModel> models{{"blind", &model}};
  const std::vector<double> sigmas{5.0};
  for (const auto& r : sensitivity_report(models, ds, sigmas, 1)) EXPECT_EQ(r.drop(), 0.0);
}

TEST(Sensitivity, WritersListEveryRow) {
  TempDir dir("sens");
  const auto ds = toy_dataset(12);
  const ModelHandle model = toy_model();
  const std::vector<NamedModel> models{{"a", &model}, {"b", &model}};
  const auto rows = sensitivity_report(models, ds, kDefaultSigmas, 1);
  EXPECT_EQ(rows.size(), 2 * 3 * ds.verdicts.size());
  write_sensitivity_csv(rows, dir / "s.csv");
  std::ifstream in(dir / "s.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "model_id,class_id,feature_id,kind,sigma,images,clean,corrupted,drop");
  EXPECT_EQ(to_json(rows).size(), rows.size());
}

}  // namespace
}  // namespace spurious
