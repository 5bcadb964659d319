#pragma once

// Independent reference implementations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gz/grounding.hpp"
#include "gz/model.hpp"
#include "gz/network.hpp"
#include "gz/prediction.hpp"

namespace gz::oracle {

// Direct loops; one fma per in-bounds tap, bias first, then (ci, ky, kx).
template <typename T>
Tensor<T> conv(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  const int N = in.n(), C = in.c(), H = in.h(), W = in.w();
  const int O = w.dim(0), K = w.dim(2);
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<T> out({N, O, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int y = 0; y < Ho; ++y)
        for (int x = 0; x < Wo; ++x) {
          T acc = b.empty() ? T{0} : b[static_cast<std::size_t>(o)];
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = y * stride - pad + ky, ix = x * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc = std::fma(w.at(o, c, ky, kx), in.at(n, c, iy, ix), acc);
              }
          out.at(n, o, y, x) = acc;
        }
  return out;
}

inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_error(a[i], b[i], floor));
  return m;
}

// Central difference of f at every entry of x (x is restored afterwards).
inline std::vector<double> central_difference(std::span<double> x, const std::function<double()>& f,
                                              double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Uniform in [-1,1] but kept away from 0 so ReLU kinks sit far from any probe.
inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double margin = 0.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) {
    do v = u(rng);
    while (std::abs(v) < margin);
  }
  return t;
}

// Analytic vs central-difference gradients of L = <net(x), R> for the input
// and every parameter; returns the worst relative error.
inline double gradient_check(Network<double>& net, Tensor<double> x, std::mt19937_64& rng, double h = 1e-4) {
  const ForwardTrace<double> tr = net.forward(x);
  const Tensor<double> R = random_tensor(tr.output().shape(), rng);
  net.zero_grad();
  const Tensor<double> gx = net.backward(tr, R);
  auto loss = [&] { return dot(net.infer(x), R); };
  double worst = max_rel_error(gx.values(), central_difference(x.values(), loss, h));
  for (auto& l : net.layers()) {
    if (l.params.empty()) continue;
    worst = std::max(worst, max_rel_error(l.params.weight_grad.values(),
                                          central_difference(l.params.weight.values(), loss, h)));
    worst = std::max(worst, max_rel_error(l.params.bias_grad.values(),
                                          central_difference(l.params.bias.values(), loss, h)));
  }
  return worst;
}

// Grad-CAM with alpha_k from finite differences of the class logit with
// respect to each activation of the grounding layer.
inline SaliencyMap grad_cam(const Network<double>& net, std::size_t act, const Tensor<double>& image, int cls,
                            double h = 1e-6) {
  const ForwardTrace<double> tr = net.forward(image);
  Tensor<double> A = tr.acts[act];
  auto logit = [&] { return net.run_range(A, act, net.size())[static_cast<std::size_t>(cls)]; };
  const int K = A.c();
  const std::size_t plane = static_cast<std::size_t>(A.h()) * A.w();
  std::vector<double> g = central_difference(A.values(), logit, h);
  std::vector<float> cam(plane, 0.0f);
  std::vector<double> acc(plane, 0.0);
  for (int k = 0; k < K; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += g[k * plane + i];
    alpha /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) acc[i] += alpha * A[k * plane + i];
  }
  for (std::size_t i = 0; i < plane; ++i) cam[i] = static_cast<float>(std::max(acc[i], 0.0));
  SaliencyMap m;
  m.height = image.h();
  m.width = image.w();
  m.values = resize_bilinear(cam, A.h(), A.w(), image.h(), image.w());
  for (float& v : m.values) v = std::max(v, 0.0f);
  m.class_id = cls;
  m.method = GroundingMethod::GradCam;
  return m;
}

// True when some 2x2 pooling window holds two values closer than `gap`;
// finite differences are meaningless at such kinks.
inline bool pool_ties(const Tensor<double>& A, double gap) {
  for (int n = 0; n < A.n(); ++n)
    for (int k = 0; k < A.c(); ++k)
      for (int y = 0; y + 1 < A.h(); y += 2)
        for (int x = 0; x + 1 < A.w(); x += 2) {
          const double v[4] = {A.at(n, k, y, x), A.at(n, k, y, x + 1), A.at(n, k, y + 1, x), A.at(n, k, y + 1, x + 1)};
          for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j)
              if (std::abs(v[i] - v[j]) < gap) return true;
        }
  return false;
}

// max |a - b| over max |b|; 0 when both maps vanish.
inline double map_error(const SaliencyMap& a, const SaliencyMap& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    diff = std::max(diff, static_cast<double>(std::abs(a.values[i] - b.values[i])));
    scale = std::max(scale, static_cast<double>(std::abs(b.values[i])));
  }
  if (scale == 0.0) return diff;
  return diff / scale;
}

// Ranking by probability, ties to the smaller index; no shared code with gz::topk.
inline std::vector<int> ranked(const std::vector<double>& p, int k) {
  std::vector<int> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p[a] > p[b]; });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace gz::oracle
