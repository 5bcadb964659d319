#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gz/image.hpp"
#include "gz/network.hpp"
#include "gz/prediction.hpp"

namespace gz {

/// Architecture of a plain conv classifier: `channels.size()` blocks of
/// conv3x3 -> ReLU -> maxpool2, then global average pool and a linear head.
struct ModelSpec {
  int input_size = 64;
  int input_channels = 3;
  std::vector<int> channels{16, 32, 64, 64};
  int classes = 10;
  std::string grounding_layer = "block3.relu";

  /// Whole-image classifier.
  static ModelSpec conventional(int classes);
  /// Patch classifier; 32x32 input, same block plan.
  static ModelSpec evidence(int classes);

  void validate() const;
  std::string descriptor() const;
  static ModelSpec from_descriptor(std::string_view descriptor);

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  int batch = 32;
  double decay_factor = 0.1;
  long decay_interval = 2000;
  long iterations = 6000;
  std::uint64_t seed = 1;
  // Training images are zero-padded by crop_pad and randomly cropped back;
  // evaluation uses the unpadded (center) view.
  int crop_pad = 3;

  /// 0.001 / 64 / x0.1 every 10K / 30K iterations.
  static TrainConfig large_scale();
  void validate() const;
  double lr_at(long iteration) const;
};

class Model {
 public:
  Model(ModelSpec spec, Network<Real> net);

  const ModelSpec& spec() const noexcept { return spec_; }
  const Network<Real>& network() const noexcept { return net_; }
  Network<Real>& network() noexcept { return net_; }

  /// Index into ForwardTrace::acts of the grounding activation.
  std::size_t grounding_act() const noexcept { return grounding_act_; }

  Tensor<Real> logits(const Tensor<Real>& batch) const;
  Prediction predict(const Tensor<Real>& image) const;
  Prediction predict(const Image& image) const;
  std::vector<Prediction> predict_batch(std::span<const Image> images, int batch = 32) const;

 private:
  ModelSpec spec_;
  Network<Real> net_;
  std::size_t grounding_act_ = 0;
};

/// Seeded Glorot-uniform weights, zero biases.
Model init_model(const ModelSpec& spec, std::uint64_t seed);

template <typename Dtype>
Network<Dtype> build_network(const ModelSpec& spec, std::uint64_t seed);

struct EpochStats {
  long last_iteration = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;  // on the (augmented) training batches of the epoch
  double lr = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochStats> epochs;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// SGD with momentum and step decay. Deterministic given cfg.seed.
TrainResult train(std::span<const LabeledImage> data, const ModelSpec& spec, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

Prediction predict(const Model& model, const Tensor<Real>& image);

/// Fraction of `data` whose argmax prediction equals the label.
double accuracy(const Model& model, std::span<const LabeledImage> data);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 of the file bytes, 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

/// Anything that maps an image to class probabilities.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual int classes() const = 0;
  virtual Prediction classify(const Image& image) const = 0;
  virtual std::vector<Prediction> classify_batch(std::span<const Image> images) const;
};

/// Adapts a Model; images of another size are bilinearly resized to the model input.
class ModelClassifier : public Classifier {
 public:
  explicit ModelClassifier(const Model& model) : model_(&model) {}
  int classes() const override { return model_->spec().classes; }
  Prediction classify(const Image& image) const override;
  std::vector<Prediction> classify_batch(std::span<const Image> images) const override;
  const Model& model() const noexcept { return *model_; }

 private:
  Image fit(const Image& image) const;
  const Model* model_;
};

}  // namespace gz
