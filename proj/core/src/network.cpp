#include "gz/network.hpp"

namespace gz {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Linear: return "linear";
  }
  return "?";
}

template <typename Dtype>
Layer<Dtype> Layer<Dtype>::conv(std::string name, Tensor<Dtype> weight, Tensor<Dtype> bias,
                                int stride, int padding) {
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::Conv2d;
  l.stride = stride;
  l.padding = padding;
  l.params = LayerParams<Dtype>(std::move(weight), std::move(bias));
  return l;
}

template <typename Dtype>
Layer<Dtype> Layer<Dtype>::linear(std::string name, Tensor<Dtype> weight, Tensor<Dtype> bias) {
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::Linear;
  l.params = LayerParams<Dtype>(std::move(weight), std::move(bias));
  return l;
}

template <typename Dtype>
Layer<Dtype> Layer<Dtype>::relu(std::string name) {
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::Relu;
  return l;
}

template <typename Dtype>
Layer<Dtype> Layer<Dtype>::maxpool(std::string name, int window, int stride) {
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::MaxPool;
  l.window = window;
  l.stride = stride;
  return l;
}

template <typename Dtype>
Layer<Dtype> Layer<Dtype>::global_avg_pool(std::string name) {
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::GlobalAvgPool;
  return l;
}

namespace {

template <typename Dtype>
Tensor<Dtype> apply(const Layer<Dtype>& l, const Tensor<Dtype>& x, std::vector<std::int32_t>* argmax) {
  switch (l.kind) {
    case LayerKind::Conv2d: return conv2d_forward(x, l.params, l.stride, l.padding);
    case LayerKind::Relu: return relu_forward(x);
    case LayerKind::MaxPool: return maxpool_forward(x, l.window, l.stride, argmax);
    case LayerKind::GlobalAvgPool: return global_avg_pool_forward(x);
    case LayerKind::Linear: return linear_forward(x, l.params.weight, l.params.bias);
  }
  throw UsageError("unknown layer kind");
}

// Walks layers from the top down to `stop` (an index into trace.acts).
// Parameter gradients are accumulated only when `sink` is non-null.
template <typename Dtype>
Tensor<Dtype> backprop(const std::vector<Layer<Dtype>>& layers, const ForwardTrace<Dtype>& trace,
                       const Tensor<Dtype>& grad_output, std::size_t stop,
                       std::vector<Layer<Dtype>>* sink, bool input_grad = true) {
  if (!trace.recorded()) throw UsageError("backward called before a forward pass was recorded");
  if (trace.acts.size() != layers.size() + 1) {
    throw UsageError("forward trace has " + std::to_string(trace.acts.size()) +
                     " activations, network expects " + std::to_string(layers.size() + 1));
  }
  if (grad_output.shape() != trace.output().shape()) {
    throw ShapeError("backward: gradient " + shape_str(grad_output.shape()) +
                     " does not match output " + shape_str(trace.output().shape()));
  }
  if (stop > layers.size()) throw ArgumentError("backward: activation index out of range");

  Tensor<Dtype> g = grad_output;
  for (std::size_t i = layers.size(); i-- > stop;) {
    const Layer<Dtype>& l = layers[i];
    const Tensor<Dtype>& in = trace.acts[i];
    const Tensor<Dtype>& out = trace.acts[i + 1];
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (sink) {
          auto& p = (*sink)[i].params;
          conv2d_backward_params(in, g, l.stride, l.padding, p.weight_grad, p.bias_grad);
        }
        if (i == 0 && !input_grad) return {};
        g = conv2d_backward_input(g, l.params.weight, in.shape(), l.stride, l.padding);
        break;
      case LayerKind::Relu:
        g = relu_backward(out, g);
        break;
      case LayerKind::MaxPool:
        g = maxpool_backward(g, std::span<const std::int32_t>(trace.argmax[i]), in.shape());
        break;
      case LayerKind::GlobalAvgPool:
        g = global_avg_pool_backward(g, in.shape());
        break;
      case LayerKind::Linear:
        if (sink) {
          auto& p = (*sink)[i].params;
          linear_backward_params(in, g, p.weight_grad, p.bias_grad);
        }
        g = linear_backward_input(g, l.params.weight);
        break;
    }
  }
  return g;
}

}  // namespace

template <typename Dtype>
std::optional<std::size_t> Network<Dtype>::find(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename Dtype>
ForwardTrace<Dtype> Network<Dtype>::forward(const Tensor<Dtype>& input) const {
  ForwardTrace<Dtype> t;
  t.acts.reserve(layers_.size() + 1);
  t.argmax.resize(layers_.size());
  t.acts.push_back(input);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    t.acts.push_back(apply(layers_[i], t.acts.back(), &t.argmax[i]));
  }
  return t;
}

template <typename Dtype>
Tensor<Dtype> Network<Dtype>::infer(const Tensor<Dtype>& input) const {
  return run_range(input, 0, layers_.size());
}

template <typename Dtype>
Tensor<Dtype> Network<Dtype>::run_range(const Tensor<Dtype>& input, std::size_t first,
                                        std::size_t last) const {
  if (first > last || last > layers_.size()) throw ArgumentError("run_range: bad layer range");
  Tensor<Dtype> x = input;
  for (std::size_t i = first; i < last; ++i) x = apply(layers_[i], x, nullptr);
  return x;
}

template <typename Dtype>
Tensor<Dtype> Network<Dtype>::backward(const ForwardTrace<Dtype>& trace,
                                       const Tensor<Dtype>& grad_output, bool input_grad) {
  return backprop(layers_, trace, grad_output, 0, &layers_, input_grad);
}

template <typename Dtype>
Tensor<Dtype> Network<Dtype>::gradient_at(const ForwardTrace<Dtype>& trace,
                                          const Tensor<Dtype>& grad_output,
                                          std::size_t act_index) const {
  return backprop<Dtype>(layers_, trace, grad_output, act_index, nullptr);
}

template <typename Dtype>
void Network<Dtype>::zero_grad() {
  for (auto& l : layers_) {
    if (!l.params.empty()) l.params.zero_grad();
  }
}

template <typename Dtype>
void Network<Dtype>::sgd_step(Dtype lr, Dtype momentum) {
  for (auto& l : layers_) gz::sgd_step(l.params, lr, momentum);
}

template <typename Dtype>
template <typename U>
Network<U> Network<Dtype>::cast() const {
  Network<U> out;
  for (const auto& l : layers_) {
    Layer<U> c;
    c.name = l.name;
    c.kind = l.kind;
    c.stride = l.stride;
    c.padding = l.padding;
    c.window = l.window;
    if (!l.params.empty()) {
      c.params = LayerParams<U>(l.params.weight.template cast<U>(), l.params.bias.template cast<U>());
    }
    out.add(std::move(c));
  }
  return out;
}

template struct Layer<float>;
template struct Layer<double>;
template class Network<float>;
template class Network<double>;
template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Network<float> Network<float>::cast<float>() const;
template Network<double> Network<double>::cast<double>() const;

}  // namespace gz
