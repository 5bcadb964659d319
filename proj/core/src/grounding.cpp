#include "gz/grounding.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "gz/random.hpp"

namespace gz {

const char* method_name(GroundingMethod m) {
  switch (m) {
    case GroundingMethod::ContrastiveEB: return "ceb";
    case GroundingMethod::EB: return "eb";
    case GroundingMethod::GradCam: return "gradcam";
    case GroundingMethod::Rise: return "rise";
  }
  return "?";
}

std::optional<GroundingMethod> parse_method(std::string_view name) {
  if (name == "ceb") return GroundingMethod::ContrastiveEB;
  if (name == "eb") return GroundingMethod::EB;
  if (name == "gradcam") return GroundingMethod::GradCam;
  if (name == "rise") return GroundingMethod::Rise;
  return std::nullopt;
}

bool SaliencyMap::degenerate() const {
  return std::none_of(values.begin(), values.end(), [](float v) { return v > 0.0f; });
}

std::optional<Peak> peak(const SaliencyMap& map) {
  std::optional<Peak> best;
  float bv = 0.0f;
  for (int r = 0; r < map.height; ++r) {
    for (int c = 0; c < map.width; ++c) {
      const float v = map.at(r, c);
      if (v > bv) {
        bv = v;
        best = Peak{r, c};
      }
    }
  }
  return best;
}

Window clamp_window(Peak center, int size, int height, int width) {
  if (size > height || size > width || size < 1) {
    throw ArgumentError("window of size " + std::to_string(size) + " does not fit a " +
                        std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  Window w;
  w.size = size;
  w.top = std::clamp(center.row - size / 2, 0, height - size);
  w.left = std::clamp(center.col - size / 2, 0, width - size);
  return w;
}

Image extract_patch(const Image& image, Peak center, int patch_size) {
  const Window w = clamp_window(center, patch_size, image.height, image.width);
  Image out(image.channels, patch_size, patch_size);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < patch_size; ++y)
      for (int x = 0; x < patch_size; ++x) out.at(c, y, x) = image.at(c, w.top + y, w.left + x);
  return out;
}

Image erase(const Image& image, Peak center, int erase_size) {
  const Window w = clamp_window(center, erase_size, image.height, image.width);
  Image out = image;
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < erase_size; ++y)
      for (int x = 0; x < erase_size; ++x) out.at(c, w.top + y, w.left + x) = 0;
  return out;
}

void RiseConfig::validate() const {
  if (masks < 1) throw ConfigError("RISE: mask count must be >= 1");
  if (grid < 1) throw ConfigError("RISE: grid must be >= 1");
  if (!(keep_prob > 0.0 && keep_prob < 1.0)) throw ConfigError("RISE: keep probability must be in (0,1)");
  if (batch < 1) throw ConfigError("RISE: batch must be >= 1");
}

void GroundingConfig::validate(int image_height, int image_width) const {
  if (patch_size < 1 || patch_size > std::min(image_height, image_width)) {
    throw ConfigError("grounding: patch size " + std::to_string(patch_size) + " exceeds image");
  }
  if (erase_size < 1 || erase_size > patch_size) {
    throw ConfigError("grounding: erase size must be in [1, patch size]");
  }
  rise.validate();
}

namespace {

template <typename Dtype>
std::vector<double> to_double(const Tensor<Dtype>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

SaliencyMap make_map(std::span<const double> grid, int gh, int gw, int out_h, int out_w, int class_id,
                     GroundingMethod method) {
  std::vector<float> g(grid.begin(), grid.end());
  SaliencyMap m;
  m.height = out_h;
  m.width = out_w;
  m.values = resize_bilinear(g, gh, gw, out_h, out_w);
  for (float& v : m.values) v = std::max(v, 0.0f);
  m.class_id = class_id;
  m.method = method;
  return m;
}

template <typename Dtype>
void check_grounding_args(const Network<Dtype>& net, std::size_t act_index, const Tensor<Dtype>& image,
                          int class_id) {
  if (image.ndim() != 4 || image.n() != 1) {
    throw ShapeError("grounding expects a single [1,C,H,W] image, got " + shape_str(image.shape()));
  }
  if (act_index == 0 || act_index >= net.size()) {
    throw ArgumentError("grounding activation index out of range");
  }
  const auto& head = net.layers().back();
  if (head.kind != LayerKind::Linear) throw ArgumentError("grounding needs a linear classifier head");
  if (class_id < 0 || class_id >= head.params.weight.dim(0)) {
    throw ArgumentError("class id " + std::to_string(class_id) + " out of range");
  }
}

// conv without bias, in double
Tensor<double> positive_part(const Tensor<double>& w, double sign) {
  Tensor<double> p = w;
  for (auto& v : p.values()) v = std::max(sign * v, 0.0);
  return p;
}

}  // namespace

template <typename Dtype>
SaliencyMap grad_cam(const Network<Dtype>& net, std::size_t act_index, const Tensor<Dtype>& image,
                     int class_id) {
  check_grounding_args(net, act_index, image, class_id);
  const ForwardTrace<Dtype> trace = net.forward(image);
  Tensor<Dtype> seed(trace.output().shape());
  seed[static_cast<std::size_t>(class_id)] = Dtype{1};
  const Tensor<Dtype> grad = net.gradient_at(trace, seed, act_index);
  const Tensor<Dtype>& A = trace.acts[act_index];
  if (A.ndim() != 4) throw ArgumentError("Grad-CAM layer must produce feature maps");
  const int K = A.c(), h = A.h(), w = A.w();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> cam(plane, 0.0);
  for (int k = 0; k < K; ++k) {
    const Dtype* g = &grad.at(0, k, 0, 0);
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += g[i];
    alpha /= static_cast<double>(plane);
    const Dtype* a = &A.at(0, k, 0, 0);
    for (std::size_t i = 0; i < plane; ++i) cam[i] += alpha * a[i];
  }
  for (double& v : cam) v = std::max(v, 0.0);
  return make_map(cam, h, w, image.h(), image.w(), class_id, GroundingMethod::GradCam);
}

std::vector<double> eb_linear(std::span<const double> activations, const Tensor<double>& weight,
                              std::span<const double> parent) {
  const int O = weight.dim(0), F = weight.dim(1);
  if (activations.size() != static_cast<std::size_t>(F) || parent.size() != static_cast<std::size_t>(O)) {
    throw ShapeError("eb_linear: activations/parent do not match weight " + shape_str(weight.shape()));
  }
  std::vector<double> p(static_cast<std::size_t>(F), 0.0);
  for (int o = 0; o < O; ++o) {
    if (parent[o] == 0.0) continue;
    const double* w = weight.data() + static_cast<std::size_t>(o) * F;
    double z = 0.0;
    for (int f = 0; f < F; ++f) z += activations[f] * std::max(w[f], 0.0);
    if (z <= 0.0) continue;
    const double q = parent[o] / z;
    for (int f = 0; f < F; ++f) p[f] += activations[f] * std::max(w[f], 0.0) * q;
  }
  return p;
}

template <typename Dtype>
SaliencyMap excitation_backprop(const Network<Dtype>& net, std::size_t act_index,
                                const Tensor<Dtype>& image, int class_id, bool contrastive,
                                EbDiagnostics* diagnostics) {
  check_grounding_args(net, act_index, image, class_id);
  const GroundingMethod tag = contrastive ? GroundingMethod::ContrastiveEB : GroundingMethod::EB;
  const ForwardTrace<Dtype> trace = net.forward(image);
  auto record = [&](const std::string& name, const std::vector<double>& p) {
    if (!diagnostics) return;
    double s = 0.0;
    for (double v : p) s += v;
    diagnostics->layers.push_back(name);
    diagnostics->mass.push_back(s);
  };
  auto degenerate_map = [&] {
    SaliencyMap m;
    m.height = image.h();
    m.width = image.w();
    m.values.assign(static_cast<std::size_t>(m.height) * m.width, 0.0f);
    m.class_id = class_id;
    m.method = tag;
    return m;
  };

  const std::size_t top = net.size() - 1;
  const Layer<Dtype>& head = net.layer(top);
  const std::vector<double> head_in = to_double(trace.acts[top]);
  const Tensor<double> head_w = head.params.weight.template cast<double>();
  std::vector<double> prior(static_cast<std::size_t>(head_w.dim(0)), 0.0);
  prior[static_cast<std::size_t>(class_id)] = 1.0;

  std::vector<double> p = eb_linear(head_in, head_w, prior);
  if (contrastive) {
    const std::vector<double> dual = eb_linear(head_in, positive_part(head_w, -1.0), prior);
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = std::max(p[i] - dual[i], 0.0);
      s += p[i];
    }
    if (s <= 0.0) return degenerate_map();
    for (double& v : p) v /= s;
  }
  record(head.name, p);

  for (std::size_t i = top; i-- > act_index;) {
    const Layer<Dtype>& l = net.layer(i);
    const Tensor<Dtype>& in = trace.acts[i];
    switch (l.kind) {
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool: {
        std::vector<double> q(in.size(), 0.0);
        const auto& arg = trace.argmax[i];
        for (std::size_t j = 0; j < p.size(); ++j) q[static_cast<std::size_t>(arg[j])] += p[j];
        p = std::move(q);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const std::size_t plane = static_cast<std::size_t>(in.h()) * in.w();
        std::vector<double> q(in.size(), 0.0);
        for (std::size_t c = 0; c < p.size(); ++c) {
          const Dtype* a = in.data() + c * plane;
          double z = 0.0;
          for (std::size_t k = 0; k < plane; ++k) z += a[k];
          if (z <= 0.0 || p[c] == 0.0) continue;
          for (std::size_t k = 0; k < plane; ++k) q[c * plane + k] = a[k] * (p[c] / z);
        }
        p = std::move(q);
        break;
      }
      case LayerKind::Linear: {
        p = eb_linear(to_double(in), l.params.weight.template cast<double>(), p);
        break;
      }
      case LayerKind::Conv2d: {
        const Tensor<double> a(in.shape(), to_double(in));
        const Tensor<double> wpos = positive_part(l.params.weight.template cast<double>(), 1.0);
        const Tensor<double> z = conv2d_forward(a, wpos, Tensor<double>(), l.stride, l.padding);
        Tensor<double> q(z.shape());
        for (std::size_t j = 0; j < q.size(); ++j) q[j] = z[j] > 0.0 ? p[j] / z[j] : 0.0;
        const Tensor<double> back = conv2d_backward_input(q, wpos, a.shape(), l.stride, l.padding);
        std::vector<double> r(a.size());
        for (std::size_t j = 0; j < r.size(); ++j) r[j] = a[j] * back[j];
        p = std::move(r);
        break;
      }
    }
    record(l.name, p);
  }

  const Tensor<Dtype>& g = trace.acts[act_index];
  if (g.ndim() != 4) throw ArgumentError("excitation backprop layer must produce feature maps");
  const std::size_t plane = static_cast<std::size_t>(g.h()) * g.w();
  std::vector<double> grid(plane, 0.0);
  for (int c = 0; c < g.c(); ++c)
    for (std::size_t k = 0; k < plane; ++k) grid[k] += p[static_cast<std::size_t>(c) * plane + k];
  return make_map(grid, g.h(), g.w(), image.h(), image.w(), class_id, tag);
}

std::vector<float> rise_mask(const RiseConfig& cfg, int height, int width, std::uint64_t index) {
  const int g = cfg.grid;
  const int cell_h = (height + g - 1) / g;
  const int cell_w = (width + g - 1) / g;
  std::mt19937_64 rng(derive_seed(cfg.seed, index));
  std::bernoulli_distribution keep(cfg.keep_prob);
  std::vector<float> cells(static_cast<std::size_t>(g) * g);
  for (auto& c : cells) c = keep(rng) ? 1.0f : 0.0f;
  std::uniform_int_distribution<int> dy(0, cell_h - 1), dx(0, cell_w - 1);
  const int sy = dy(rng), sx = dx(rng);
  const int up_h = (g + 1) * cell_h, up_w = (g + 1) * cell_w;
  const std::vector<float> up = resize_bilinear(cells, g, g, up_h, up_w);
  std::vector<float> mask(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      mask[static_cast<std::size_t>(y) * width + x] = up[static_cast<std::size_t>(y + sy) * up_w + x + sx];
  return mask;
}

SaliencyMap rise(const BlackBox& blackbox, const Tensor<Real>& image, int class_id,
                 const RiseConfig& cfg) {
  cfg.validate();
  if (image.ndim() != 4 || image.n() != 1) {
    throw ShapeError("RISE expects a single [1,C,H,W] image, got " + shape_str(image.shape()));
  }
  const int C = image.c(), H = image.h(), W = image.w();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> acc(plane, 0.0);
  for (int start = 0; start < cfg.masks; start += cfg.batch) {
    const int B = std::min(cfg.batch, cfg.masks - start);
    std::vector<std::vector<float>> masks(static_cast<std::size_t>(B));
    Tensor<Real> batch({B, C, H, W});
    for (int b = 0; b < B; ++b) {
      masks[b] = rise_mask(cfg, H, W, static_cast<std::uint64_t>(start + b));
      Real* dst = batch.sample(b);
      for (int c = 0; c < C; ++c)
        for (std::size_t k = 0; k < plane; ++k)
          dst[c * plane + k] = image[c * plane + k] * masks[b][k];
    }
    const std::vector<Prediction> preds = blackbox(batch);
    if (preds.size() != static_cast<std::size_t>(B)) {
      throw ArgumentError("RISE black box returned " + std::to_string(preds.size()) +
                          " predictions for a batch of " + std::to_string(B));
    }
    for (int b = 0; b < B; ++b) {
      if (class_id < 0 || class_id >= preds[b].classes()) throw ArgumentError("RISE: class id out of range");
      const double s = preds[b][class_id];
      for (std::size_t k = 0; k < plane; ++k) acc[k] += s * masks[b][k];
    }
  }
  const double norm = 1.0 / (static_cast<double>(cfg.masks) * cfg.keep_prob);
  SaliencyMap m;
  m.height = H;
  m.width = W;
  m.values.resize(plane);
  for (std::size_t k = 0; k < plane; ++k) m.values[k] = static_cast<float>(std::max(acc[k] * norm, 0.0));
  m.class_id = class_id;
  m.method = GroundingMethod::Rise;
  return m;
}

namespace {

std::size_t act_index_for(const Model& model, const std::string& layer) {
  const auto i = model.network().find(layer);
  if (!i) throw ConfigError("grounding layer '" + layer + "' not found in model");
  return *i + 1;
}

}  // namespace

SaliencyMap ground(const Model& model, const Image& image, int class_id, const GroundingConfig& cfg) {
  const Tensor<Real> x = to_tensor<Real>(image);
  switch (cfg.method) {
    case GroundingMethod::ContrastiveEB:
    case GroundingMethod::EB:
      return excitation_backprop(model.network(), act_index_for(model, cfg.layer), x, class_id,
                                 cfg.method == GroundingMethod::ContrastiveEB);
    case GroundingMethod::GradCam:
      return grad_cam(model.network(), act_index_for(model, cfg.layer), x, class_id);
    case GroundingMethod::Rise: {
      if (class_id < 0 || class_id >= model.spec().classes) throw ArgumentError("class id out of range");
      const BlackBox bb = [&model](const Tensor<Real>& batch) {
        const Tensor<Real> z = model.logits(batch);
        std::vector<Prediction> out;
        const std::size_t C = static_cast<std::size_t>(z.dim(1));
        for (int n = 0; n < z.dim(0); ++n) out.push_back(softmax(z.values().subspan(n * C, C)));
        return out;
      };
      return rise(bb, x, class_id, cfg.rise);
    }
  }
  throw ArgumentError("unknown grounding method");
}

ModelGrounder::ModelGrounder(const Model& model, GroundingConfig cfg) : model_(&model), cfg_(std::move(cfg)) {
  cfg_.validate(model.spec().input_size, model.spec().input_size);
  act_index_for(model, cfg_.layer);
}

SaliencyMap ModelGrounder::ground(const Image& image, int class_id) const {
  return gz::ground(*model_, image, class_id, cfg_);
}

template SaliencyMap grad_cam(const Network<float>&, std::size_t, const Tensor<float>&, int);
template SaliencyMap grad_cam(const Network<double>&, std::size_t, const Tensor<double>&, int);
template SaliencyMap excitation_backprop(const Network<float>&, std::size_t, const Tensor<float>&, int,
                                         bool, EbDiagnostics*);
template SaliencyMap excitation_backprop(const Network<double>&, std::size_t, const Tensor<double>&, int,
                                         bool, EbDiagnostics*);

}  // namespace gz
