#include "gz/prediction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gz/error.hpp"

namespace gz {

int Prediction::argmax() const {
  if (probs.empty()) throw ArgumentError("argmax of an empty prediction");
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

bool Prediction::valid(double tol) const {
  if (probs.empty()) return false;
  double s = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) return false;
    s += p;
  }
  return std::abs(s - 1.0) <= tol;
}

template <typename Dtype>
Prediction softmax(std::span<const Dtype> logits) {
  if (logits.empty()) throw ArgumentError("softmax of an empty vector");
  double m = -INFINITY;
  for (Dtype v : logits) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError("softmax: non-finite logit " + std::to_string(static_cast<double>(v)));
    }
    m = std::max(m, static_cast<double>(v));
  }
  Prediction p;
  p.probs.resize(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p.probs[i] = std::exp(static_cast<double>(logits[i]) - m);
    z += p.probs[i];
  }
  for (double& v : p.probs) v /= z;
  return p;
}

template Prediction softmax<float>(std::span<const float>);
template Prediction softmax<double>(std::span<const double>);

std::vector<int> topk(const Prediction& p, int k) {
  if (k < 1 || k > p.classes()) {
    throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(p.classes()) + "]");
  }
  std::vector<int> order(p.probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return p.probs[a] > p.probs[b]; });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

}  // namespace gz
