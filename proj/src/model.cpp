#include "spurious/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>

#include <nlohmann/json.hpp>

namespace spurious {

using nlohmann::json;
namespace fs = std::filesystem;

Architecture Architecture::parse(const std::string& id) {
  const std::string prefix = "cnn-gap:";
  if (id.rfind(prefix, 0) != 0) {
    throw InvalidInput("architecture: unsupported id '" + id + "' (expected cnn-gap:...)");
  }
  Architecture arch{id, {}};
  static const std::regex token(R"(c(\d+)k(\d+)s(\d+)p(\d+)(r?))");
  std::string body = id.substr(prefix.size());
  std::size_t start = 0;
  while (start <= body.size()) {
    const std::size_t comma = body.find(',', start);
    const std::string part = body.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    std::smatch m;
    if (!std::regex_match(part, m, token)) {
      throw InvalidInput("architecture: bad block token '" + part + "' in '" + id + "'");
    }
    ConvBlockSpec block;
    block.out_channels = std::stoul(m[1]);
    block.kernel = std::stoul(m[2]);
    block.stride = std::stoul(m[3]);
    block.padding = std::stoul(m[4]);
    block.relu = m[5].length() == 1;
    if (block.out_channels == 0 || block.kernel == 0 || block.stride == 0) {
      throw InvalidInput("architecture: zero-sized block in '" + id + "'");
    }
    arch.blocks.push_back(block);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return arch;
}

void Gradients::zero() {
  for (auto& t : conv_weight) t.fill(0.0f);
  for (auto& b : conv_bias) std::fill(b.begin(), b.end(), 0.0f);
  std::fill(head_weight.begin(), head_weight.end(), 0.0f);
  std::fill(head_bias.begin(), head_bias.end(), 0.0f);
}

ModelHandle::ModelHandle(Architecture arch, InputShape input, std::size_t num_classes)
    : arch_(std::move(arch)), input_(input) {
  if (num_classes == 0) throw InvalidInput("model: num_classes must be positive");
  std::size_t channels = input_.channels;
  std::size_t height = input_.height, width = input_.width;
  for (const auto& block : arch_.blocks) {
    if (height + 2 * block.padding < block.kernel || width + 2 * block.padding < block.kernel) {
      throw InvalidInput("model: architecture " + arch_.id + " shrinks input below kernel size");
    }
    conv_weight_.emplace_back(std::vector<std::size_t>{block.out_channels, channels, block.kernel, block.kernel});
    conv_bias_.emplace_back(block.out_channels, 0.0f);
    kernels::ConvGeometry g{channels, block.out_channels, block.kernel, block.stride, block.padding};
    height = g.out_size(height);
    width = g.out_size(width);
    channels = block.out_channels;
  }
  head_.num_classes = num_classes;
  head_.feature_dim = channels;
  head_.weight.assign(num_classes * channels, 0.0f);
  head_.bias.assign(num_classes, 0.0f);
  norm_.mean.assign(input_.channels, 0.0f);
  norm_.stddev.assign(input_.channels, 1.0f);
}

kernels::ConvGeometry ModelHandle::geometry(std::size_t block) const {
  const auto& spec = arch_.blocks.at(block);
  const std::size_t in_channels = block == 0 ? input_.channels : arch_.blocks[block - 1].out_channels;
  return {in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding};
}

void ModelHandle::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t b = 0; b < conv_weight_.size(); ++b) {
    const auto g = geometry(b);
    const double fan_in = static_cast<double>(g.in_channels * g.kernel * g.kernel);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (float& w : conv_weight_[b].values()) w = static_cast<float>(dist(rng));
    std::fill(conv_bias_[b].begin(), conv_bias_[b].end(), 0.0f);
  }
  std::normal_distribution<double> head_dist(0.0, std::sqrt(1.0 / static_cast<double>(head_.feature_dim)));
  for (float& w : head_.weight) w = static_cast<float>(head_dist(rng));
  std::fill(head_.bias.begin(), head_.bias.end(), 0.0f);
}

void ModelHandle::check_input(const Tensor& image) const {
  if (image.shape() != input_.dims()) {
    throw InvalidInput("model: input shape " + shape_string(image.shape()) +
                       " does not match " + shape_string(input_.dims()));
  }
}

ForwardResult ModelHandle::forward(const Tensor& image, ForwardTrace* trace) const {
  check_input(image);
  if (trace) {
    trace->block_inputs.clear();
    trace->block_outputs.clear();
  }
  Tensor current = image;
  for (std::size_t b = 0; b < conv_weight_.size(); ++b) {
    Tensor out = kernels::conv2d_forward(current, conv_weight_[b], conv_bias_[b], geometry(b));
    if (arch_.blocks[b].relu) kernels::relu_inplace(out);
    if (trace) trace->block_inputs.push_back(std::move(current));
    current = std::move(out);
    if (trace) trace->block_outputs.push_back(current);
  }
  ForwardResult result;
  result.features.values = kernels::global_avg_pool(current);
  result.logits = kernels::linear_forward(head_.weight, head_.bias, result.features.values,
                                          head_.num_classes);
  result.feature_maps.maps = std::move(current);
  return result;
}

Tensor ModelHandle::backward(const ForwardTrace& trace, const NeuralFeatureVector& features,
                             std::span<const float> grad_features,
                             std::span<const float> grad_logits, Gradients* grads) const {
  const std::size_t m = head_.feature_dim;
  std::vector<float> grad_f(m, 0.0f);
  if (!grad_features.empty()) std::copy(grad_features.begin(), grad_features.end(), grad_f.begin());
  if (!grad_logits.empty()) {
    for (std::size_t i = 0; i < head_.num_classes; ++i) {
      const float gl = grad_logits[i];
      if (gl == 0.0f) continue;
      for (std::size_t j = 0; j < m; ++j) grad_f[j] += gl * head_.weight[i * m + j];
      if (grads) {
        for (std::size_t j = 0; j < m; ++j) grads->head_weight[i * m + j] += gl * features.values[j];
        grads->head_bias[i] += gl;
      }
    }
  }

  const Tensor& last = trace.block_outputs.back();
  Tensor grad(last.shape());
  const std::size_t plane = last.dim(1) * last.dim(2);
  for (std::size_t c = 0; c < m; ++c) {
    const float g = grad_f[c] / static_cast<float>(plane);
    std::fill_n(grad.data() + c * plane, plane, g);
  }

  for (std::size_t b = conv_weight_.size(); b-- > 0;) {
    if (arch_.blocks[b].relu) kernels::relu_backward_inplace(grad, trace.block_outputs[b]);
    const Tensor& input = trace.block_inputs[b];
    const auto g = geometry(b);
    if (grads) {
      kernels::conv2d_backward_params(grad, input, g, grads->conv_weight[b], grads->conv_bias[b]);
    }
    grad = kernels::conv2d_backward_input(grad, conv_weight_[b], g, input.dim(1), input.dim(2));
  }
  return grad;
}

Gradients ModelHandle::make_gradients() const {
  Gradients g;
  for (const auto& w : conv_weight_) g.conv_weight.emplace_back(w.shape());
  for (const auto& b : conv_bias_) g.conv_bias.emplace_back(b.size(), 0.0f);
  g.head_weight.assign(head_.weight.size(), 0.0f);
  g.head_bias.assign(head_.bias.size(), 0.0f);
  return g;
}

Tensor ModelHandle::normalize(const Tensor& pixels) const {
  check_input(pixels);
  Tensor out = pixels;
  const std::size_t plane = input_.pixels();
  for (std::size_t c = 0; c < input_.channels; ++c) {
    const float mean = norm_.mean.at(c), stddev = norm_.stddev.at(c);
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = (out[c * plane + p] - mean) / stddev;
  }
  return out;
}

Tensor ModelHandle::denormalize(const Tensor& normalized) const {
  check_input(normalized);
  Tensor out = normalized;
  const std::size_t plane = input_.pixels();
  for (std::size_t c = 0; c < input_.channels; ++c) {
    const float mean = norm_.mean.at(c), stddev = norm_.stddev.at(c);
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = out[c * plane + p] * stddev + mean;
  }
  return out;
}

bool operator==(const ModelHandle& a, const ModelHandle& b) {
  return a.arch_.id == b.arch_.id && a.input_ == b.input_ && a.conv_weight_ == b.conv_weight_ &&
         a.conv_bias_ == b.conv_bias_ && a.head_.weight == b.head_.weight &&
         a.head_.bias == b.head_.bias;
}

double cross_entropy(std::span<const float> logits, int label, std::vector<float>* grad_logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (float l : logits) denom += std::exp(static_cast<double>(l) - peak);
  const double log_z = peak + std::log(denom);
  if (grad_logits) {
    grad_logits->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double p = std::exp(static_cast<double>(logits[i]) - log_z);
      (*grad_logits)[i] = static_cast<float>(p - (static_cast<int>(i) == label ? 1.0 : 0.0));
    }
  }
  return log_z - logits[static_cast<std::size_t>(label)];
}

int argmax_logit(std::span<const float> logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

Tensor pgd_l2(const ModelHandle& model, const Tensor& image, int label, double rho, int steps,
              double step_size) {
  Tensor delta(image.shape());
  Tensor perturbed = image;
  ForwardTrace trace;
  std::vector<float> grad_logits;
  for (int s = 0; s < steps; ++s) {
    const ForwardResult out = model.forward(perturbed, &trace);
    cross_entropy(out.logits, label, &grad_logits);
    const Tensor grad = model.backward(trace, out.features, {}, grad_logits, nullptr);
    const double norm = l2_norm(grad.values());
    if (!std::isfinite(norm)) throw TrainingDiverged("pgd: non-finite gradient at step " + std::to_string(s));
    if (norm > 0.0) {
      const auto scale = static_cast<float>(step_size / norm);
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += scale * grad[i];
    }
    const double dnorm = l2_norm(delta.values());
    if (dnorm > rho) {
      const auto shrink = static_cast<float>(dnorm > 0.0 ? rho / dnorm : 0.0);
      for (float& d : delta.values()) d *= shrink;
    }
    for (std::size_t i = 0; i < delta.size(); ++i) perturbed[i] = image[i] + delta[i];
  }
  return perturbed;
}

std::vector<Tensor> normalized_images(const ModelHandle& model, const ImageDataset& dataset) {
  std::vector<Tensor> out;
  out.reserve(dataset.size());
  for (const auto& item : dataset.items) out.push_back(model.normalize(item.image));
  return out;
}

ModelHandle initial_model(const ImageDataset& dataset, const TrainConfig& config) {
  if (dataset.empty()) throw InvalidInput("train: dataset is empty");
  ModelHandle model(Architecture::parse(config.architecture), dataset.shape, dataset.num_classes());
  model.initialize(config.seed);
  if (!config.normalization.mean.empty()) model.set_normalization(config.normalization);
  model.set_training_meta({config.rho > 0.0, config.rho, config.seed, 0, config.attack_steps});
  return model;
}

namespace {

class Adam {
 public:
  explicit Adam(std::size_t count) : m_(count, 0.0), v_(count, 0.0) {}

  void step(ModelHandle& model, const Gradients& grads, double lr, double grad_scale) {
    ++t_;
    offset_ = 0;
    const double c1 = 1.0 - std::pow(kBeta1, t_);
    const double c2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t b = 0; b < model.conv_weights().size(); ++b) {
      update(model.conv_weights()[b].values(), grads.conv_weight[b].values(), lr, grad_scale, c1, c2);
      update(model.conv_biases()[b], grads.conv_bias[b], lr, grad_scale, c1, c2);
    }
    update(model.mutable_head().weight, grads.head_weight, lr, grad_scale, c1, c2);
    update(model.mutable_head().bias, grads.head_bias, lr, grad_scale, c1, c2);
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  void update(std::span<float> params, std::span<const float> grad, double lr, double scale,
              double c1, double c2) {
    for (std::size_t i = 0; i < params.size(); ++i, ++offset_) {
      const double g = grad[i] * scale;
      m_[offset_] = kBeta1 * m_[offset_] + (1.0 - kBeta1) * g;
      v_[offset_] = kBeta2 * v_[offset_] + (1.0 - kBeta2) * g * g;
      params[i] -= static_cast<float>(lr * (m_[offset_] / c1) / (std::sqrt(v_[offset_] / c2) + kEps));
    }
  }

  std::vector<double> m_, v_;
  std::size_t offset_ = 0;
  int t_ = 0;
};

std::size_t parameter_count(const ModelHandle& model) {
  std::size_t n = model.head().weight.size() + model.head().bias.size();
  for (std::size_t b = 0; b < model.conv_weights().size(); ++b) {
    n += model.conv_weights()[b].size() + model.conv_biases()[b].size();
  }
  return n;
}

}  // namespace

ModelHandle train_robust(const ImageDataset& dataset, const TrainConfig& config,
                         const TrainProgress& progress) {
  if (config.rho < 0.0) throw InvalidInput("train: rho must be >= 0");
  if (config.batch_size == 0) throw InvalidInput("train: batch_size must be positive");
  ModelHandle model = initial_model(dataset, config);
  if (config.epochs <= 0) return model;

  const std::vector<Tensor> inputs = normalized_images(model, dataset);
  const double step_size = config.attack_step_size > 0.0
                               ? config.attack_step_size
                               : (config.attack_steps > 0 ? 2.5 * config.rho / config.attack_steps : 0.0);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam optimizer(parameter_count(model));
  Gradients grads = model.make_gradients();
  ForwardTrace trace;
  std::vector<float> grad_logits;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += config.batch_size, ++batch) {
      const std::size_t end = std::min(start + config.batch_size, order.size());
      grads.zero();
      for (std::size_t n = start; n < end; ++n) {
        const auto& item = dataset.items[order[n]];
        Tensor x = inputs[order[n]];
        if (config.attack_steps > 0) {
          x = pgd_l2(model, x, item.label, config.rho, config.attack_steps, step_size);
        }
        const ForwardResult out = model.forward(x, &trace);
        const double loss = cross_entropy(out.logits, item.label, &grad_logits);
        if (!std::isfinite(loss)) {
          throw TrainingDiverged("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batch) + ", image " + item.id);
        }
        loss_sum += loss;
        if (argmax_logit(out.logits) == item.label) ++correct;
        model.backward(trace, out.features, {}, grad_logits, &grads);
      }
      optimizer.step(model, grads, config.learning_rate, 1.0 / static_cast<double>(end - start));
    }
    if (progress) {
      progress({epoch, loss_sum / static_cast<double>(order.size()),
                static_cast<double>(correct) / static_cast<double>(order.size())});
    }
  }
  TrainingMeta meta = model.training_meta();
  meta.epochs = config.epochs;
  model.set_training_meta(meta);
  return model;
}

FeatureBatch extract_features(const ModelHandle& model, std::span<const Tensor> images) {
  FeatureBatch batch;
  batch.vectors.reserve(images.size());
  batch.maps.reserve(images.size());
  for (const auto& image : images) {
    ForwardResult out = model.forward(image);
    batch.vectors.push_back(std::move(out.features));
    batch.maps.push_back(std::move(out.feature_maps));
  }
  return batch;
}

std::vector<int> predict(const ModelHandle& model, std::span<const Tensor> images) {
  std::vector<int> labels;
  labels.reserve(images.size());
  for (const auto& image : images) labels.push_back(argmax_logit(model.forward(image).logits));
  return labels;
}

namespace {

void write_floats(std::ofstream& out, std::span<const float> values) {
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                              static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
}

void read_floats(std::ifstream& in, std::span<float> values, const fs::path& file) {
  for (float& v : values) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
      throw InvalidInput("checkpoint: " + file.string() + " is truncated");
    }
    const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                               (static_cast<std::uint32_t>(bytes[2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[3]) << 24);
    v = std::bit_cast<float>(bits);
  }
}

}  // namespace

void save_model(const ModelHandle& model, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& meta = model.training_meta();
  json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["architecture_id"] = model.architecture().id;
  j["feature_dim"] = model.feature_dim();
  j["num_classes"] = model.num_classes();
  j["input_shape"] = model.input_shape().dims();
  j["normalization"] = {{"mean", model.normalization().mean}, {"std", model.normalization().stddev}};
  j["training_meta"] = {{"robust", meta.robust}, {"rho", meta.rho}, {"seed", meta.seed},
                        {"epochs", meta.epochs}, {"attack_steps", meta.attack_steps}};
  std::ofstream(dir / "model.json") << j.dump(2) << '\n';

  std::ofstream out(dir / "weights.bin", std::ios::binary);
  for (std::size_t b = 0; b < model.conv_weights().size(); ++b) {
    write_floats(out, model.conv_weights()[b].values());
    write_floats(out, model.conv_biases()[b]);
  }
  write_floats(out, model.head().weight);
  write_floats(out, model.head().bias);
}

ModelHandle load_model(const fs::path& dir) {
  std::ifstream meta_in(dir / "model.json");
  if (!meta_in) throw InvalidInput("checkpoint: missing " + (dir / "model.json").string());
  const json j = json::parse(meta_in);
  if (j.at("format_version").get<int>() != kCheckpointFormatVersion) {
    throw InvalidInput("checkpoint: unsupported format_version " + j.at("format_version").dump());
  }
  const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
  ModelHandle model(Architecture::parse(j.at("architecture_id").get<std::string>()),
                    InputShape{shape.at(0), shape.at(1), shape.at(2)},
                    j.at("num_classes").get<std::size_t>());
  if (model.feature_dim() != j.at("feature_dim").get<std::size_t>()) {
    throw InvalidInput("checkpoint: feature_dim disagrees with architecture");
  }
  model.set_normalization({j.at("normalization").at("mean").get<std::vector<float>>(),
                           j.at("normalization").at("std").get<std::vector<float>>()});
  const auto& tm = j.at("training_meta");
  model.set_training_meta({tm.at("robust").get<bool>(), tm.at("rho").get<double>(),
                           tm.at("seed").get<std::uint64_t>(), tm.at("epochs").get<int>(),
                           tm.at("attack_steps").get<int>()});

  const fs::path weights = dir / "weights.bin";
  std::ifstream in(weights, std::ios::binary);
  if (!in) throw InvalidInput("checkpoint: missing " + weights.string());
  for (std::size_t b = 0; b < model.conv_weights().size(); ++b) {
    read_floats(in, model.conv_weights()[b].values(), weights);
    read_floats(in, model.conv_biases()[b], weights);
  }
  read_floats(in, model.mutable_head().weight, weights);
  read_floats(in, model.mutable_head().bias, weights);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw InvalidInput("checkpoint: " + weights.string() + " has trailing bytes");
  }
  return model;
}

}  // namespace spurious
