#pragma once

// Classifier handles: a small conv net with a global-average-pool
// penultimate layer and a linear head, trained with l2 adversarial training.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spurious/data.hpp"
#include "spurious/kernels.hpp"
#include "spurious/tensor.hpp"

namespace spurious {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConvBlockSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool relu = true;
  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

/// Architecture ids look like "cnn-gap:c8k3s1p1r,c16k3s2p1r": one token per
/// conv block with out channels (c), kernel (k), stride (s), padding (p) and
/// an optional trailing `r` for a ReLU. Blocks are followed by global average
/// pooling and a linear head.
struct Architecture {
  std::string id;
  std::vector<ConvBlockSpec> blocks;

  static Architecture parse(const std::string& id);
  std::size_t feature_dim() const { return blocks.back().out_channels; }
};

/// The default desk-scale network: four conv blocks, 32 penultimate features.
inline constexpr const char* kDefaultArchitecture =
    "cnn-gap:c16k3s1p1r,c32k3s2p1r,c32k3s1p1r,c32k3s2p1r";

struct InputNormalization {
  std::vector<float> mean{0.0f, 0.0f, 0.0f};
  std::vector<float> stddev{1.0f, 1.0f, 1.0f};
};

struct TrainingMeta {
  bool robust = false;
  double rho = 0.0;
  std::uint64_t seed = 0;
  int epochs = 0;
  int attack_steps = 0;
};

struct NeuralFeatureVector {
  std::vector<float> values;
};

/// Pre-pooling spatial activations, shape (m, h', w').
struct FeatureMapStack {
  Tensor maps;
  std::size_t feature_dim() const { return maps.dim(0); }
};

struct LinearHead {
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  std::vector<float> weight;  // (k x m), row i maps features to logit i
  std::vector<float> bias;    // (k)

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(weight).subspan(i * feature_dim, feature_dim);
  }
};

struct ForwardResult {
  FeatureMapStack feature_maps;
  NeuralFeatureVector features;
  std::vector<float> logits;
};

/// Intermediate activations kept for a backward pass.
struct ForwardTrace {
  std::vector<Tensor> block_inputs;
  std::vector<Tensor> block_outputs;  // post-activation
};

/// Parameter gradients, laid out like the model's parameters.
struct Gradients {
  std::vector<Tensor> conv_weight;
  std::vector<std::vector<float>> conv_bias;
  std::vector<float> head_weight;
  std::vector<float> head_bias;
  void zero();
};

class ModelHandle {
 public:
  ModelHandle() = default;
  ModelHandle(Architecture arch, InputShape input, std::size_t num_classes);

  const Architecture& architecture() const { return arch_; }
  const InputShape& input_shape() const { return input_; }
  std::size_t feature_dim() const { return head_.feature_dim; }
  std::size_t num_classes() const { return head_.num_classes; }
  const LinearHead& head() const { return head_; }
  LinearHead& mutable_head() { return head_; }
  const TrainingMeta& training_meta() const { return meta_; }
  void set_training_meta(const TrainingMeta& meta) { meta_ = meta; }
  const InputNormalization& normalization() const { return norm_; }
  void set_normalization(InputNormalization norm) { norm_ = std::move(norm); }

  std::vector<Tensor>& conv_weights() { return conv_weight_; }
  const std::vector<Tensor>& conv_weights() const { return conv_weight_; }
  std::vector<std::vector<float>>& conv_biases() { return conv_bias_; }
  const std::vector<std::vector<float>>& conv_biases() const { return conv_bias_; }
  kernels::ConvGeometry geometry(std::size_t block) const;

  /// He-normal conv weights, zero biases, seeded.
  void initialize(std::uint64_t seed);

  /// Forward on one normalized image. Fills `trace` when provided.
  ForwardResult forward(const Tensor& image, ForwardTrace* trace = nullptr) const;

  /// Backpropagates d(objective)/d(features) through the conv stack.
  /// `grad_logits` (optional) is first mapped through the head and added.
  /// Parameter gradients are accumulated into `grads` when non-null; the
  /// returned tensor is the gradient with respect to the input image.
  Tensor backward(const ForwardTrace& trace, const NeuralFeatureVector& features,
                  std::span<const float> grad_features,
                  std::span<const float> grad_logits, Gradients* grads) const;

  Gradients make_gradients() const;
  void check_input(const Tensor& image) const;

  /// Maps stored [0,1] pixels into the model input space and back.
  Tensor normalize(const Tensor& pixels) const;
  Tensor denormalize(const Tensor& normalized) const;

  friend bool operator==(const ModelHandle& a, const ModelHandle& b);

 private:
  Architecture arch_;
  InputShape input_;
  std::vector<Tensor> conv_weight_;
  std::vector<std::vector<float>> conv_bias_;
  LinearHead head_;
  InputNormalization norm_;
  TrainingMeta meta_;
};

struct TrainConfig {
  std::string architecture = kDefaultArchitecture;
  int epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  double rho = 0.0;          // l2 radius of the inner maximization
  int attack_steps = 5;      // projected gradient ascent steps
  double attack_step_size = 0.0;  // 0 selects 2.5 * rho / attack_steps
  std::uint64_t seed = 0;
  InputNormalization normalization;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

using TrainProgress = std::function<void(const EpochStats&)>;

/// Min over parameters of the expected worst-case cross-entropy in an l2
/// ball of radius rho around each normalized training image. The inner max
/// uses projected normalized-gradient ascent. rho = 0 reduces to ordinary
/// empirical risk minimization. Adam optimizer; data order is shuffled per
/// epoch from the seed.
ModelHandle train_robust(const ImageDataset& dataset, const TrainConfig& config,
                         const TrainProgress& progress = {});

/// The initial model train_robust starts from for a given config.
ModelHandle initial_model(const ImageDataset& dataset, const TrainConfig& config);

/// l2 projected gradient ascent on the cross-entropy of `label`, starting at
/// the clean (normalized) image. Returns the perturbed image.
Tensor pgd_l2(const ModelHandle& model, const Tensor& image, int label,
              double rho, int steps, double step_size);

struct FeatureBatch {
  std::vector<NeuralFeatureVector> vectors;
  std::vector<FeatureMapStack> maps;
};

/// Penultimate features for a batch of normalized images.
FeatureBatch extract_features(const ModelHandle& model, std::span<const Tensor> images);

/// argmax of the logits with ties to the smallest class index.
std::vector<int> predict(const ModelHandle& model, std::span<const Tensor> images);
int argmax_logit(std::span<const float> logits);

/// Normalized copies of every dataset image, in dataset order.
std::vector<Tensor> normalized_images(const ModelHandle& model, const ImageDataset& dataset);

double cross_entropy(std::span<const float> logits, int label,
                     std::vector<float>* grad_logits = nullptr);

/// Checkpoint directory: model.json (format version, architecture id,
/// feature dim, classes, input shape, normalization, training meta) and
/// weights.bin (little-endian float32, parameters in declaration order).
void save_model(const ModelHandle& model, const std::filesystem::path& dir);
ModelHandle load_model(const std::filesystem::path& dir);

inline constexpr int kCheckpointFormatVersion = 1;

}  // namespace spurious
