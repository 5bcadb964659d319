#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gz/ops.hpp"
#include "gz/tensor.hpp"

namespace gz {

enum class LayerKind { Conv2d, Relu, MaxPool, GlobalAvgPool, Linear };

const char* layer_kind_name(LayerKind kind);

template <typename Dtype>
struct Layer {
  std::string name;
  LayerKind kind = LayerKind::Relu;
  int stride = 1;   // conv, maxpool
  int padding = 0;  // conv
  int window = 2;   // maxpool
  LayerParams<Dtype> params;  // conv, linear

  static Layer conv(std::string name, Tensor<Dtype> weight, Tensor<Dtype> bias, int stride,
                    int padding);
  static Layer linear(std::string name, Tensor<Dtype> weight, Tensor<Dtype> bias);
  static Layer relu(std::string name);
  static Layer maxpool(std::string name, int window, int stride);
  static Layer global_avg_pool(std::string name);
};

/// Activations recorded by Network::forward. acts[0] is the input and
/// acts[i + 1] the output of layer i; argmax[i] is filled for max-pool layers.
template <typename Dtype>
struct ForwardTrace {
  std::vector<Tensor<Dtype>> acts;
  std::vector<std::vector<std::int32_t>> argmax;

  bool recorded() const noexcept { return !acts.empty(); }
  const Tensor<Dtype>& output() const { return acts.back(); }
};

/// Sequential stack of layers. Parameters live in the layers; forward is const
/// and safe to call concurrently, backward accumulates into parameter gradients.
template <typename Dtype>
class Network {
 public:
  void add(Layer<Dtype> layer) { layers_.push_back(std::move(layer)); }

  std::size_t size() const noexcept { return layers_.size(); }
  const Layer<Dtype>& layer(std::size_t i) const { return layers_.at(i); }
  Layer<Dtype>& layer(std::size_t i) { return layers_.at(i); }
  const std::vector<Layer<Dtype>>& layers() const noexcept { return layers_; }
  std::vector<Layer<Dtype>>& layers() noexcept { return layers_; }

  std::optional<std::size_t> find(std::string_view name) const;

  ForwardTrace<Dtype> forward(const Tensor<Dtype>& input) const;

  /// Output only, without keeping intermediates.
  Tensor<Dtype> infer(const Tensor<Dtype>& input) const;

  /// Runs layers [first, last) on `input` (an activation of layer `first`).
  Tensor<Dtype> run_range(const Tensor<Dtype>& input, std::size_t first, std::size_t last) const;

  /// Backpropagates `grad_output` (dL/d output) through every layer,
  /// accumulating parameter gradients. Returns dL/d input, or an empty tensor
  /// when `input_grad` is false (the first layer's input gradient is skipped).
  Tensor<Dtype> backward(const ForwardTrace<Dtype>& trace, const Tensor<Dtype>& grad_output,
                         bool input_grad = true);

  /// Gradient of the loss w.r.t. trace.acts[act_index], without touching parameters.
  Tensor<Dtype> gradient_at(const ForwardTrace<Dtype>& trace, const Tensor<Dtype>& grad_output,
                            std::size_t act_index) const;

  void zero_grad();
  void sgd_step(Dtype lr, Dtype momentum);

  template <typename U>
  Network<U> cast() const;

 private:
  std::vector<Layer<Dtype>> layers_;
};

}  // namespace gz
