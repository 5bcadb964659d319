#pragma once

#include <span>
#include <vector>

namespace gz {

/// Probability vector over classes. Entries in [0,1], sum within 1e-5 of 1.
struct Prediction {
  std::vector<double> probs;

  int classes() const noexcept { return static_cast<int>(probs.size()); }
  double operator[](int c) const { return probs[static_cast<std::size_t>(c)]; }
  int argmax() const;
  bool valid(double tol = 1e-5) const;
};

/// Max-shifted softmax. Throws NumericError on NaN/Inf, ArgumentError when empty.
template <typename Dtype>
Prediction softmax(std::span<const Dtype> logits);

/// Classes in non-increasing probability; ties go to the lower class index.
std::vector<int> topk(const Prediction& p, int k);

}  // namespace gz
