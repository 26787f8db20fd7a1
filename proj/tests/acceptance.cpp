// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "oracles.hpp"
#include "spurious/annotation.hpp"
#include "spurious/evaluation.hpp"
#include "spurious/importance.hpp"
#include "spurious/visualization.hpp"

namespace {

using namespace spurious;
using namespace spurious::testing;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

Outcome importance_oracle_check() {
  Outcome out;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> dim(1, 32), count(4, 15);
  std::normal_distribution<float> n(0.0f, 2.0f);
  double worst = 0;
  for (int fixture = 0; fixture < 100; ++fixture) {
    const std::size_t m = dim(rng), k = 3, images = count(rng);
    LinearHead head;
    head.num_classes = k;
    head.feature_dim = m;
    for (std::size_t i = 0; i < k * m; ++i) head.weight.push_back(n(rng));
    head.bias.assign(k, 0.0f);
    std::vector<NeuralFeatureVector> f(images);
    std::vector<int> keys(images);
    for (std::size_t i = 0; i < images; ++i) {
      for (std::size_t j = 0; j < m; ++j) f[i].values.push_back(std::abs(n(rng)));
      keys[i] = static_cast<int>(i % k);
    }
    for (int c = 0; c < static_cast<int>(k); ++c) {
      const auto iv = feature_importance(class_mean_features(f, keys, c), head);
      const auto oracle = importance_oracle(f, keys, head, c);
      for (std::size_t j = 0; j < m; ++j) worst = std::max(worst, std::abs(iv[j] - oracle[j]));
    }
  }
  const double secs = seconds_since(t0);
  out.require(worst <= 1e-6, fmt("max abs error %.3g > 1e-6", worst));
  out.require(secs < 1.0, fmt("took %.2f s", secs));
  if (out.pass) out.detail = fmt("100 fixtures, max abs error %.3g, %.3f s", worst, secs);
  return out;
}

Outcome corruption_check() {
  Outcome out;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({3, 16, 16}, rng);
  const Tensor m = random_tensor({256}, rng);
  const MaskView view{16, 16, m.values()};
  const std::vector<float> zeros(256, 0.0f);

  out.require(corrupt(x, view, {0.0, 9}, 1) == x, "sigma = 0 changed the image");
  out.require(corrupt(x, {16, 16, zeros}, {0.25, 9}, 1) == x, "zero mask changed the image");
  for (std::uint64_t stream : {0u, 1u, 5u}) {
    out.require(corrupt(x, view, {0.25, 9}, stream) == oracle_corrupt(x, m.storage(), 0.25, 9, stream),
                "corruption differs from the direct formula");
    const Tensor n1 = corruption_noise(x.shape(), view, {0.25, 9}, stream);
    const Tensor n2 = corruption_noise(x.shape(), view, {0.5, 9}, stream);
    bool linear = true;
    for (std::size_t i = 0; i < n1.size(); ++i) linear &= n2[i] == 2.0f * n1[i];
    out.require(linear, "doubling sigma did not double the noise");
  }

  // 3 x 183 x 183 = 100467 samples under an all-ones mask.
  const std::vector<float> ones(183 * 183, 1.0f);
  double worst = 0;
  for (double sigma : {0.05, 0.25, 1.0}) {
    const Tensor noise = corruption_noise({3, 183, 183}, {183, 183, ones}, {sigma, 11});
    double sum = 0, sq = 0;
    for (float v : noise.values()) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    const double count = static_cast<double>(noise.size());
    const double sd = std::sqrt(sq / count - (sum / count) * (sum / count));
    worst = std::max(worst, std::abs(sd - sigma) / sigma);
  }
  const double secs = seconds_since(t0);
  out.require(worst < 0.02, fmt("std off by %.2f%%", 100 * worst));
  out.require(secs < 10.0, fmt("took %.2f s", secs));
  if (out.pass) out.detail = fmt("identities exact, worst std deviation %.2f%%, %.3f s", 100 * worst, secs);
  return out;
}

Outcome nam_check() {
  Outcome out;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> side(1, 9), target(1, 40);
  double worst = 0;
  bool in_range = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = side(rng), w = side(rng), oh = target(rng), ow = target(rng);
    const Tensor maps = random_tensor({3, h, w}, rng, -5, 5);
    const std::size_t j = trial % 3;
    const auto nam = neural_activation_map({maps}, j, oh, ow);
    Tensor plane({h, w});
    std::copy(maps.slice(j).begin(), maps.slice(j).end(), plane.values().begin());
    const auto oracle = nam_oracle(plane, oh, ow);
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      in_range &= nam.values[i] >= 0.0f && nam.values[i] <= 1.0f;
      worst = std::max(worst, std::abs(nam.values[i] - oracle[i]));
    }
  }
  const auto flat = neural_activation_map({Tensor({1, 5, 5}, 3.5f)}, 0, 32, 32);
  const double secs = seconds_since(t0);
  out.require(in_range, "value outside [0, 1]");
  out.require(worst < 1e-5, fmt("max deviation from oracle %.3g", worst));
  out.require(flat.values == std::vector<float>(32 * 32, 0.0f), "constant map is not all zeros");
  out.require(secs < 5.0, fmt("took %.2f s", secs));
  if (out.pass) out.detail = fmt("1000 maps in range, max deviation %.3g, %.3f s", worst, secs);
  return out;
}

Outcome heatmap_check() {
  Outcome out;
  const auto lut = read_lut_csv();
  bool table_ok = lut.size() == 256;
  for (std::size_t i = 0; table_ok && i < 256; ++i) {
    for (std::size_t c = 0; c < 3; ++c) table_ok &= jet_table()[i][c] == lut[i][c];
  }
  out.require(table_ok, "compiled jet table differs from the shipped CSV");
  std::mt19937_64 rng(33);
  int exact = 0;
  for (int fixture = 0; fixture < 20; ++fixture) {
    const std::size_t h = 5 + fixture, w = 32 - fixture;
    const Tensor image = random_tensor({3, h, w}, rng);
    const auto nam = neural_activation_map({random_tensor({2, 4, 4}, rng, -1, 1)}, fixture % 2, h, w);
    exact += heatmap(image, nam).values == heatmap_oracle(image, nam.values);
  }
  out.require(exact == 20, fmt("%.0f of 20 fixtures bit-exact", exact));
  if (out.pass) out.detail = "20 of 20 fixtures bit-exact";
  return out;
}

Outcome attack_check() {
  Outcome out;
  const InputShape shape{3, 8, 8};
  double grad_err = 0, step_err = 0;
  {
    const ModelHandle model = linear_model(6, shape, 4);
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor(shape.dims(), rng, -1, 1);
    for (std::size_t j = 0; j < 6; ++j) {
      const Tensor fd = finite_difference_gradient(model, x, j, 8.0f);
      const Tensor analytic = analytic_feature_weights(model, j);
      grad_err = std::max(grad_err, relative_error(feature_gradient(model, x, j).values(), fd.values()));
      grad_err = std::max(grad_err, relative_error(analytic.values(), fd.values()));

      const double w2 = l2_norm(analytic.values()) * l2_norm(analytic.values());
      const double step = 1.0 / w2;
      const auto r = feature_attack(model, x, j, {1, step, 1e9});
      step_err = std::max(step_err, std::abs((r.trajectory[1] - r.trajectory[0]) - step * w2));
    }
  }
  out.require(grad_err < 1e-4, fmt("gradient relative error %.3g", grad_err));
  out.require(step_err < 1e-4, fmt("one-step increase off by %.3g", step_err));

  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> rho(0.01, 20.0), size(0.1, 100.0);
  std::uniform_int_distribution<int> steps(1, 8);
  int inside = 0;
  for (int run = 0; run < 100; ++run) {
    const ModelHandle model = run % 2 ? small_cnn(shape, run) : linear_model(4, shape, run);
    const Tensor x = random_tensor(shape.dims(), rng, -2, 2);
    const FeatureAttackConfig config{steps(rng), size(rng), rho(rng)};
    const auto r = feature_attack(model, x, run % 4, config);
    inside += l2_distance(r.perturbed.values(), x.values()) <= config.rho;
  }
  out.require(inside == 100, fmt("%.0f of 100 runs inside the budget", inside));
  if (out.pass) {
    out.detail = fmt("gradient rel. error %.3g, step error %.3g, 100 of 100 runs in budget", grad_err, step_err);
  }
  return out;
}

Outcome aggregation_check() {
  using namespace spurious::annotation;
  Outcome out;
  const auto t0 = Clock::now();
  const std::string reason = "the highlighted region is the grass below";
  auto records = [&](const std::string& hit, const std::vector<std::string>& answers) {
    std::vector<AnnotationRecord> r;
    for (std::size_t i = 0; i < answers.size(); ++i) r.push_back({hit, "W" + std::to_string(i), answers[i], 3, reason, ""});
    return r;
  };
  const Hit discovery{"d-0", Study::kDiscovery, 0, 0, {}, {}};
  const Hit validation{"v-0", Study::kValidation, 0, 0, {}, {}};
  int d_ok = 0, v_ok = 0;
  for (int code = 0; code < 243; ++code) {
    const auto answers = decode_answers(code, kDiscoveryAnswers);
    d_ok += aggregate_discovery(discovery, records(discovery.id, answers)).kind == discovery_oracle(answers);
  }
  for (int code = 0; code < 1024; ++code) {
    const auto answers = decode_answers(code, kValidationAnswers);
    v_ok += aggregate_validation(validation, records(validation.id, answers)).kind == validation_oracle(answers);
  }
  const double secs = seconds_since(t0);
  out.require(d_ok == 243, fmt("discovery matched %.0f of 243", d_ok));
  out.require(v_ok == 1024, fmt("validation matched %.0f of 1024", v_ok));
  out.require(secs < 1.0, fmt("took %.2f s", secs));
  if (out.pass) out.detail = fmt("243 and 1024 combinations match, %.3f s", secs);
  return out;
}

Outcome accuracy_check() {
  Outcome out;
  const CausalDataset ds = toy_dataset(5);
  const ModelHandle model = toy_model();
  bool changed = false;
  for (double sigma : {0.25, 1.0, 3.0}) {
    const auto causal = causal_accuracy(model, ds, {sigma, 17});
    const auto spurious = spurious_accuracy(model, ds, {sigma, 17});
    out.require(matches(causal, accuracy_oracle(model, ds, true, sigma, 17)),
                fmt("causal accuracy differs from oracle at sigma %.2f", sigma));
    out.require(matches(spurious, accuracy_oracle(model, ds, false, sigma, 17)),
                fmt("spurious accuracy differs from oracle at sigma %.2f", sigma));
    for (const auto& c : causal.classes) changed |= c.clean != c.corrupted;
  }
  out.require(changed, "fixture is vacuous: noise never changed a prediction");
  if (out.pass) out.detail = "acc^(C) and acc^(S) equal the oracle at sigma 0.25, 1, 3";
  return out;
}

// Mean over images of the classifier hitting `label` after corrupting each
// image with the mask returned by mask_for(n).
double corrupted_accuracy(const ModelHandle& model, const ImageDataset& test, const std::vector<std::size_t>& idx,
                          int label, double sigma, const std::function<std::vector<float>(std::size_t)>& mask_for) {
  std::size_t hit = 0;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto& item = test.items[idx[n]];
    const auto mask = mask_for(n);
    const Tensor noisy = corrupt(item.image, {item.image.dim(1), item.image.dim(2), mask}, {sigma, 97}, n);
    hit += argmax_logit(model.forward(model.normalize(noisy)).logits) == label;
  }
  return static_cast<double>(hit) / static_cast<double>(idx.size());
}

Outcome watermark_check() {
  Outcome out;
  WatermarkConfig wc;
  wc.images_per_class = 200;
  wc.seed = 1;
  const ImageDataset train = make_watermark_dataset(wc);
  wc.images_per_class = 100;
  wc.seed = 2;
  const ImageDataset test = make_watermark_dataset(wc);
  const PixelRegion region = watermark_region(wc);
  const int cls = wc.watermarked_class;
  const std::size_t H = train.shape.height, W = train.shape.width;

  TrainConfig tc;
  tc.epochs = 25;
  tc.learning_rate = 3e-3;
  tc.rho = 0.25;
  tc.attack_steps = 2;
  tc.seed = 3;
  tc.normalization = {{0.5f, 0.5f, 0.5f}, {0.25f, 0.25f, 0.25f}};
  const auto t0 = Clock::now();
  const ModelHandle model = train_robust(train, tc);
  const double train_secs = seconds_since(t0);
  out.require(train_secs <= 7200.0, fmt("training took %.0f s", train_secs));

  const auto train_x = normalized_images(model, train);
  const FeatureBatch train_f = extract_features(model, train_x);
  const ImportanceTable table = build_importance_table(model, train_f.vectors, predict(model, train_x));
  const auto top = top_features(table, cls, 5);

  std::vector<std::size_t> idx;
  for (std::size_t i : test.indices_with_label(cls)) idx.push_back(i);
  std::vector<Tensor> test_x;
  for (std::size_t i : idx) test_x.push_back(model.normalize(test.items[i].image));
  const FeatureBatch test_f = extract_features(model, test_x);

  const double baseline = static_cast<double>(region.area()) / static_cast<double>(H * W);
  std::string best;
  bool found = false;
  for (std::size_t j : top) {
    std::vector<std::vector<float>> nams;
    double mass = 0;
    std::size_t marked = 0;
    for (std::size_t n = 0; n < idx.size(); ++n) {
      nams.push_back(neural_activation_map(test_f.maps[n], j, H, W).values);
      if (!has_watermark(test.items[idx[n]])) continue;
      double inside = 0, total = 0;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          total += nams.back()[y * W + x];
          if (region.contains(y, x)) inside += nams.back()[y * W + x];
        }
      }
      if (total > 0) mass += inside / total;
      ++marked;
    }
    mass /= static_cast<double>(marked);

    // Same mask circularly shifted by a random offset: equal area and mass,
    // different location.
    std::mt19937_64 shift_rng(1000 + j);
    std::vector<std::vector<float>> shifted;
    for (const auto& nam : nams) {
      const std::size_t dy = 1 + shift_rng() % (H - 1), dx = 1 + shift_rng() % (W - 1);
      std::vector<float> s(H * W);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) s[((y + dy) % H) * W + (x + dx) % W] = nam[y * W + x];
      }
      shifted.push_back(std::move(s));
    }
    const double clean = corrupted_accuracy(model, test, idx, cls, 0.0, [&](std::size_t n) { return nams[n]; });
    const double feat = corrupted_accuracy(model, test, idx, cls, 0.25, [&](std::size_t n) { return nams[n]; });
    const double rand = corrupted_accuracy(model, test, idx, cls, 0.25, [&](std::size_t n) { return shifted[n]; });
    const double feat_drop = clean - feat, rand_drop = clean - rand;
    std::printf("  feature %zu: mass ratio %.2f, drop %.3f vs random %.3f\n", j, mass / baseline, feat_drop,
                rand_drop);
    if (!found && mass > 3.0 * baseline && feat_drop >= rand_drop + 0.10) {
      found = true;
      best = "feature " + std::to_string(j) +
             fmt(": mass ratio %.2f, drop %.3f vs random %.3f, training %.0f s", mass / baseline, feat_drop,
                 rand_drop, train_secs);
    }
  }
  out.require(found, "no top-5 feature met both the mass and the drop margin");
  if (out.pass) out.detail = best;
  return out;
}

Outcome replay_check() {
  using namespace spurious::annotation;
  Outcome out;
  TempDir dir("acceptance_replay");
  std::vector<Hit> hits;
  for (int c = 0; c < 30; ++c) {
    for (std::size_t f = 0; f < 5; ++f) {
      hits.push_back({"d-" + std::to_string(c) + "-" + std::to_string(f), Study::kDiscovery, c, f, {}, {}});
    }
  }
  for (int c = 0; c < 20; ++c) hits.push_back({"v-" + std::to_string(c), Study::kValidation, c, 0, {}, {}});
  const auto workers = synthetic_workers(12, 2, 9);
  AnnotationStore::initialize(dir.path(), hits, workers);

  StudyState live;
  std::vector<Verdict> live_verdicts;
  std::atomic<int> submitted{0};
  {
    AnnotationStore store(dir.path(), 37);
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&, t] {
        std::mt19937_64 rng(100 + t);
        std::uniform_int_distribution<std::size_t> hit(0, hits.size() - 1), worker(0, workers.size() - 1);
        std::uniform_int_distribution<int> answer(0, 3);
        for (int n = 0; n < 125; ++n) {
          const Hit& h = hits[hit(rng)];
          const auto& legal = legal_answers(h.study);
          store.submit({h.id, workers[worker(rng)].worker_id, legal[answer(rng) % legal.size()], 3,
                        "the mask sits on the water behind it", ""});
          ++submitted;
        }
      });
    }
    for (auto& th : threads) th.join();
    store.flush();
    live = store.state();
    live_verdicts = store.verdicts();
  }
  const StudyState replayed = AnnotationStore::replay(dir.path());
  out.require(submitted == 1000, "not all submissions ran");
  out.require(!live_verdicts.empty(), "no HIT completed");
  out.require(replayed == live, "replayed state differs from the live state");
  out.require(replayed.verdicts() == live_verdicts, "replayed verdicts differ");
  if (out.pass) out.detail = "1000 submissions, " + std::to_string(live_verdicts.size()) + " verdicts reproduced";
  return out;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"importance-oracle", importance_oracle_check},
      {"corruption-identities", corruption_check},
      {"nam-properties", nam_check},
      {"heatmap-bit-exact", heatmap_check},
      {"feature-attack", attack_check},
      {"aggregation-exhaustive", aggregation_check},
      {"causal-spurious-accuracy", accuracy_check},
      {"watermark-end-to-end", watermark_check},
      {"log-replay", replay_check},
  };
  int failed = 0;
  for (const auto& [name, check] : checks) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
