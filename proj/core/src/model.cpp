#include "gz/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "gz/random.hpp"

namespace gz {

ModelSpec ModelSpec::conventional(int classes) {
  ModelSpec s;
  s.classes = classes;
  return s;
}

ModelSpec ModelSpec::evidence(int classes) {
  ModelSpec s;
  s.input_size = 32;
  s.classes = classes;
  return s;
}

void ModelSpec::validate() const {
  if (classes < 1) throw ConfigError("model spec: class count must be positive");
  if (input_channels < 1) throw ConfigError("model spec: input channels must be positive");
  if (channels.empty()) throw ConfigError("model spec: at least one conv block is required");
  for (int c : channels) {
    if (c < 1) throw ConfigError("model spec: block channel counts must be positive");
  }
  if ((input_size >> channels.size()) < 1) {
    throw ConfigError("model spec: input size " + std::to_string(input_size) + " too small for " +
                      std::to_string(channels.size()) + " pooling blocks");
  }
  bool found = false;
  for (std::size_t b = 1; b <= channels.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    for (const char* part : {"conv", "relu", "pool"}) {
      if (grounding_layer == prefix + part) found = true;
    }
  }
  if (!found) {
    throw ConfigError("model spec: grounding layer '" + grounding_layer +
                      "' is not part of a conv block");
  }
}

std::string ModelSpec::descriptor() const {
  std::ostringstream os;
  os << "gz-cnn input=" << input_size << " channels=" << input_channels << " blocks=";
  for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
  os << " classes=" << classes << " ground=" << grounding_layer;
  return os.str();
}

ModelSpec ModelSpec::from_descriptor(std::string_view descriptor) {
  std::istringstream is{std::string(descriptor)};
  std::string tok;
  is >> tok;
  if (tok != "gz-cnn") throw ConfigError("unknown architecture descriptor: " + std::string(descriptor));
  ModelSpec s;
  s.channels.clear();
  try {
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ConfigError("bad descriptor token '" + tok + "'");
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "input") {
        s.input_size = std::stoi(val);
      } else if (key == "channels") {
        s.input_channels = std::stoi(val);
      } else if (key == "blocks") {
        std::istringstream vs(val);
        std::string c;
        while (std::getline(vs, c, ',')) s.channels.push_back(std::stoi(c));
      } else if (key == "classes") {
        s.classes = std::stoi(val);
      } else if (key == "ground") {
        s.grounding_layer = val;
      } else {
        throw ConfigError("unknown descriptor key '" + key + "'");
      }
    }
  } catch (const std::logic_error&) {
    throw ConfigError("malformed architecture descriptor: " + std::string(descriptor));
  }
  s.validate();
  return s;
}

TrainConfig TrainConfig::large_scale() {
  TrainConfig c;
  c.lr = 0.001;
  c.batch = 64;
  c.decay_interval = 10000;
  c.iterations = 30000;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train config: lr must be > 0");
  if (batch < 1) throw ConfigError("train config: batch must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train config: momentum must be in [0,1)");
  if (iterations < 0) throw ConfigError("train config: iterations must be >= 0");
  if (decay_interval < 1) throw ConfigError("train config: decay interval must be >= 1");
  if (!(decay_factor > 0.0)) throw ConfigError("train config: decay factor must be > 0");
  if (crop_pad < 0) throw ConfigError("train config: crop padding must be >= 0");
}

double TrainConfig::lr_at(long iteration) const {
  return lr * std::pow(decay_factor, static_cast<double>(iteration / decay_interval));
}

template <typename Dtype>
Network<Dtype> build_network(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  auto glorot = [&](Shape shape, int fan_in, int fan_out) {
    const double b = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-b, b);
    Tensor<Dtype> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<Dtype>(u(rng));
    return t;
  };
  Network<Dtype> net;
  int in_c = spec.input_channels;
  for (std::size_t b = 0; b < spec.channels.size(); ++b) {
    const int out_c = spec.channels[b];
    const std::string p = "block" + std::to_string(b + 1) + ".";
    net.add(Layer<Dtype>::conv(p + "conv", glorot({out_c, in_c, 3, 3}, in_c * 9, out_c * 9),
                               Tensor<Dtype>({out_c}), 1, 1));
    net.add(Layer<Dtype>::relu(p + "relu"));
    net.add(Layer<Dtype>::maxpool(p + "pool", 2, 2));
    in_c = out_c;
  }
  net.add(Layer<Dtype>::global_avg_pool("gap"));
  net.add(Layer<Dtype>::linear("fc", glorot({spec.classes, in_c}, in_c, spec.classes),
                               Tensor<Dtype>({spec.classes})));
  return net;
}

template Network<float> build_network<float>(const ModelSpec&, std::uint64_t);
template Network<double> build_network<double>(const ModelSpec&, std::uint64_t);

Model::Model(ModelSpec spec, Network<Real> net) : spec_(std::move(spec)), net_(std::move(net)) {
  spec_.validate();
  const auto g = net_.find(spec_.grounding_layer);
  if (!g) throw ConfigError("network has no layer named '" + spec_.grounding_layer + "'");
  grounding_act_ = *g + 1;
  const auto& head = net_.layers().back();
  if (head.kind != LayerKind::Linear || head.params.weight.dim(0) != spec_.classes) {
    throw ConfigError("final layer must be linear with " + std::to_string(spec_.classes) + " outputs");
  }
}

Tensor<Real> Model::logits(const Tensor<Real>& batch) const {
  if (batch.ndim() != 4 || batch.c() != spec_.input_channels || batch.h() != spec_.input_size ||
      batch.w() != spec_.input_size) {
    throw ShapeError("model expects [N," + std::to_string(spec_.input_channels) + "," +
                     std::to_string(spec_.input_size) + "," + std::to_string(spec_.input_size) +
                     "] input, got " + shape_str(batch.shape()));
  }
  return net_.infer(batch);
}

Prediction Model::predict(const Tensor<Real>& image) const {
  const Tensor<Real> z = logits(image);
  if (z.dim(0) != 1) throw ShapeError("predict expects a single image, got " + shape_str(image.shape()));
  return softmax(z.values());
}

Prediction Model::predict(const Image& image) const { return predict(to_tensor<Real>(image)); }

std::vector<Prediction> Model::predict_batch(std::span<const Image> images, int batch) const {
  std::vector<Prediction> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t n = std::min(images.size() - start, static_cast<std::size_t>(batch));
    Tensor<Real> x({static_cast<int>(n), spec_.input_channels, spec_.input_size, spec_.input_size});
    for (std::size_t i = 0; i < n; ++i) to_tensor_into(images[start + i], x, static_cast<int>(i));
    const Tensor<Real> z = logits(x);
    const std::size_t C = static_cast<std::size_t>(spec_.classes);
    for (std::size_t i = 0; i < n; ++i) out.push_back(softmax(z.values().subspan(i * C, C)));
  }
  return out;
}

Model init_model(const ModelSpec& spec, std::uint64_t seed) {
  return Model(spec, build_network<Real>(spec, seed));
}

Prediction predict(const Model& model, const Tensor<Real>& image) { return model.predict(image); }

double accuracy(const Model& model, std::span<const LabeledImage> data) {
  if (data.empty()) return 0.0;
  std::vector<Image> imgs;
  imgs.reserve(data.size());
  for (const auto& d : data) imgs.push_back(d.image);
  const auto preds = model.predict_batch(imgs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += preds[i].argmax() == data[i].label;
  return static_cast<double>(correct) / data.size();
}

TrainResult train(std::span<const LabeledImage> data, const ModelSpec& spec, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  for (const auto& d : data) {
    if (d.image.height != spec.input_size || d.image.width != spec.input_size ||
        d.image.channels != spec.input_channels) {
      throw ShapeError("train: image " + std::to_string(d.image.height) + "x" +
                       std::to_string(d.image.width) + " does not match model input " +
                       std::to_string(spec.input_size));
    }
    if (d.label < 0 || d.label >= spec.classes) {
      throw ConfigError("train: label " + std::to_string(d.label) + " outside class range");
    }
  }

  TrainResult result{init_model(spec, derive_seed(cfg.seed, "init")), {}};
  Network<Real>& net = result.model.network();
  net.zero_grad();

  std::mt19937_64 rng(derive_seed(cfg.seed, "batches"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const long steps_per_epoch =
      static_cast<long>((data.size() + static_cast<std::size_t>(cfg.batch) - 1) / cfg.batch);
  std::uniform_int_distribution<int> shift(0, 2 * cfg.crop_pad);
  const int B = cfg.batch;
  Tensor<Real> x({B, spec.input_channels, spec.input_size, spec.input_size});
  std::vector<int> labels(static_cast<std::size_t>(B));

  double loss_sum = 0.0;
  long correct = 0, seen = 0, window = 0;
  for (long it = 0; it < cfg.iterations; ++it) {
    for (int b = 0; b < B; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const LabeledImage& ex = data[order[cursor++]];
      if (cfg.crop_pad > 0) {
        const int top = shift(rng), left = shift(rng);
        to_tensor_into(pad_crop(ex.image, cfg.crop_pad, top, left), x, b);
      } else {
        to_tensor_into(ex.image, x, b);
      }
      labels[static_cast<std::size_t>(b)] = ex.label;
    }
    const double lr = cfg.lr_at(it);
    const ForwardTrace<Real> trace = net.forward(x);
    const LossResult<Real> loss = softmax_cross_entropy(trace.output(), std::span<const int>(labels));
    if (!std::isfinite(loss.loss)) {
      throw TrainingError("training diverged: loss is " + std::to_string(loss.loss) +
                              " at iteration " + std::to_string(it) + " (lr " + std::to_string(lr) + ")",
                          it, lr);
    }
    net.backward(trace, loss.grad, false);
    net.sgd_step(static_cast<Real>(lr), static_cast<Real>(cfg.momentum));

    const Tensor<Real>& z = trace.output();
    for (int b = 0; b < B; ++b) {
      const auto row = z.values().subspan(static_cast<std::size_t>(b) * spec.classes, spec.classes);
      const int arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += arg == labels[static_cast<std::size_t>(b)];
    }
    seen += B;
    loss_sum += loss.loss;
    ++window;
    if (window == steps_per_epoch || it + 1 == cfg.iterations) {
      EpochStats s{it + 1, loss_sum / window, static_cast<double>(correct) / seen, lr};
      result.epochs.push_back(s);
      if (on_epoch) on_epoch(s);
      loss_sum = 0.0;
      correct = seen = window = 0;
    }
  }
  return result;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  detail::LeWriter w(path.string());
  w.bytes("GZCK", 4);
  w.put<std::uint32_t>(1);
  w.str(model.spec().descriptor());
  std::vector<std::pair<std::string, const Tensor<Real>*>> tensors;
  for (const auto& l : model.network().layers()) {
    if (l.params.empty()) continue;
    tensors.emplace_back(l.name + ".weight", &l.params.weight);
    tensors.emplace_back(l.name + ".bias", &l.params.bias);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t->ndim()));
    for (int d : t->shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : t->values()) w.put<float>(v);
  }
  w.close();
}

Model load_checkpoint(const std::filesystem::path& path) {
  detail::LeReader r(path.string());
  r.magic("GZCK");
  r.version(1);
  const ModelSpec spec = ModelSpec::from_descriptor(r.str("descriptor"));
  Model model = init_model(spec, 0);
  auto& layers = model.network().layers();
  const auto count = r.get<std::uint32_t>("tensor count");
  std::size_t expected = 0;
  for (const auto& l : layers) expected += l.params.empty() ? 0 : 2;
  if (count != expected) {
    throw FormatError(FormatError::Kind::Malformed,
                      "checkpoint holds " + std::to_string(count) + " tensors, architecture needs " +
                          std::to_string(expected));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("tensor name");
    Tensor<Real>* dst = nullptr;
    for (auto& l : layers) {
      if (name == l.name + ".weight") dst = &l.params.weight;
      if (name == l.name + ".bias") dst = &l.params.bias;
    }
    if (!dst) throw FormatError(FormatError::Kind::Malformed, "unexpected tensor '" + name + "'");
    const auto nd = r.get<std::uint32_t>("dims of " + name);
    Shape shape;
    for (std::uint32_t d = 0; d < nd && d < 4; ++d) {
      shape.push_back(static_cast<int>(r.get<std::uint32_t>("dims of " + name)));
    }
    if (shape != dst->shape()) {
      throw FormatError(FormatError::Kind::Malformed, "tensor '" + name + "' has shape " +
                                                          shape_str(shape) + ", expected " +
                                                          shape_str(dst->shape()));
    }
    for (auto& v : dst->values()) v = r.get<float>("payload of tensor '" + name + "'");
  }
  return model;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for hashing");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<Prediction> Classifier::classify_batch(std::span<const Image> images) const {
  std::vector<Prediction> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(classify(im));
  return out;
}

Image ModelClassifier::fit(const Image& image) const {
  const int s = model_->spec().input_size;
  if (image.height == s && image.width == s) return image;
  return resize_bilinear(image, s, s);
}

Prediction ModelClassifier::classify(const Image& image) const { return model_->predict(fit(image)); }

std::vector<Prediction> ModelClassifier::classify_batch(std::span<const Image> images) const {
  std::vector<Image> fitted;
  fitted.reserve(images.size());
  for (const auto& im : images) fitted.push_back(fit(im));
  return model_->predict_batch(fitted);
}

}  // namespace gz
