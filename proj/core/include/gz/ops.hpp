#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gz/tensor.hpp"

namespace gz {

/// Trainable parameters of one layer, with gradient and momentum buffers of matching shape.
template <typename Dtype>
struct LayerParams {
  Tensor<Dtype> weight;
  Tensor<Dtype> bias;
  Tensor<Dtype> weight_grad;
  Tensor<Dtype> bias_grad;
  Tensor<Dtype> weight_momentum;
  Tensor<Dtype> bias_momentum;

  LayerParams() = default;
  LayerParams(Tensor<Dtype> w, Tensor<Dtype> b)
      : weight(std::move(w)),
        bias(std::move(b)),
        weight_grad(weight.shape()),
        bias_grad(bias.shape()),
        weight_momentum(weight.shape()),
        bias_momentum(bias.shape()) {}

  bool empty() const noexcept { return weight.empty(); }
  void zero_grad() {
    weight_grad.fill(Dtype{0});
    bias_grad.fill(Dtype{0});
  }
};

// Every kernel below sums in a fixed order: bias first, then input channel,
// kernel row, kernel column (conv) or input feature (linear). The naive
// oracles in the tests rely on that order for exact equality.

/// input [N,Cin,H,W], weight [Cout,Cin,K,K], bias [Cout] or empty.
template <typename Dtype>
Tensor<Dtype> conv2d_forward(const Tensor<Dtype>& input, const Tensor<Dtype>& weight,
                             const Tensor<Dtype>& bias, int stride, int padding);

template <typename Dtype>
Tensor<Dtype> conv2d_forward(const Tensor<Dtype>& input, const LayerParams<Dtype>& params,
                             int stride, int padding) {
  return conv2d_forward(input, params.weight, params.bias, stride, padding);
}

/// Gradient w.r.t. the conv input (transposed convolution of grad_out).
template <typename Dtype>
Tensor<Dtype> conv2d_backward_input(const Tensor<Dtype>& grad_out, const Tensor<Dtype>& weight,
                                    const Shape& input_shape, int stride, int padding);

/// Accumulates dL/dW and dL/db into the given buffers.
template <typename Dtype>
void conv2d_backward_params(const Tensor<Dtype>& input, const Tensor<Dtype>& grad_out, int stride,
                            int padding, Tensor<Dtype>& weight_grad, Tensor<Dtype>& bias_grad);

/// input [N,F], weight [O,F], bias [O] or empty -> [N,O].
template <typename Dtype>
Tensor<Dtype> linear_forward(const Tensor<Dtype>& input, const Tensor<Dtype>& weight,
                             const Tensor<Dtype>& bias);

template <typename Dtype>
Tensor<Dtype> linear_backward_input(const Tensor<Dtype>& grad_out, const Tensor<Dtype>& weight);

template <typename Dtype>
void linear_backward_params(const Tensor<Dtype>& input, const Tensor<Dtype>& grad_out,
                            Tensor<Dtype>& weight_grad, Tensor<Dtype>& bias_grad);

template <typename Dtype>
Tensor<Dtype> relu_forward(const Tensor<Dtype>& input);

/// Uses the forward output as the gate (output > 0).
template <typename Dtype>
Tensor<Dtype> relu_backward(const Tensor<Dtype>& output, const Tensor<Dtype>& grad_out);

/// Non-overlapping or strided max pooling. `argmax` receives, per output
/// element, the flat offset of the winning input element. Ties go to the
/// first element in row-major window order.
template <typename Dtype>
Tensor<Dtype> maxpool_forward(const Tensor<Dtype>& input, int window, int stride,
                              std::vector<std::int32_t>* argmax);

template <typename Dtype>
Tensor<Dtype> maxpool_backward(const Tensor<Dtype>& grad_out, std::span<const std::int32_t> argmax,
                               const Shape& input_shape);

/// [N,C,H,W] -> [N,C]
template <typename Dtype>
Tensor<Dtype> global_avg_pool_forward(const Tensor<Dtype>& input);

template <typename Dtype>
Tensor<Dtype> global_avg_pool_backward(const Tensor<Dtype>& grad_out, const Shape& input_shape);

template <typename Dtype>
struct LossResult {
  double loss = 0.0;        // mean over the batch
  Tensor<Dtype> grad;       // d(mean loss)/d(logits), [N,C]
};

/// Mean softmax cross-entropy over a batch of logits [N,C].
template <typename Dtype>
LossResult<Dtype> softmax_cross_entropy(const Tensor<Dtype>& logits, std::span<const int> labels);

/// buf <- momentum*buf + grad; w <- w - lr*buf; grads zeroed afterwards.
template <typename Dtype>
void sgd_step(LayerParams<Dtype>& params, Dtype lr, Dtype momentum);

}  // namespace gz
