#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gz/image.hpp"
#include "gz/model.hpp"
#include "gz/network.hpp"

namespace gz {

enum class GroundingMethod : std::uint8_t { ContrastiveEB = 0, EB = 1, GradCam = 2, Rise = 3 };

const char* method_name(GroundingMethod m);
std::optional<GroundingMethod> parse_method(std::string_view name);

/// Non-negative class-conditional score grid at image resolution.
struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;
  int class_id = 0;
  GroundingMethod method = GroundingMethod::ContrastiveEB;

  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  /// No positive entry: the method found no evidence.
  bool degenerate() const;
};

struct Peak {
  int row = 0;
  int col = 0;
  friend bool operator==(const Peak&, const Peak&) = default;
};

/// Location of the maximum; ties go to the smallest row, then column.
/// nullopt for a degenerate map ("no evidence").
std::optional<Peak> peak(const SaliencyMap& map);

/// Square window of `size` centred on `center` (top-left at center - size/2),
/// shifted to stay inside an image of the given extent.
struct Window {
  int top = 0;
  int left = 0;
  int size = 0;
};
Window clamp_window(Peak center, int size, int height, int width);

Image extract_patch(const Image& image, Peak center, int patch_size);

/// Copy of `image` with a black erase_size square at the clamped window.
Image erase(const Image& image, Peak center, int erase_size);

struct RiseConfig {
  int masks = 4000;
  int grid = 7;
  double keep_prob = 0.5;
  std::uint64_t seed = 0;
  int batch = 32;

  void validate() const;
};

struct GroundingConfig {
  GroundingMethod method = GroundingMethod::ContrastiveEB;
  std::string layer = "block3.relu";
  RiseConfig rise;
  // 150/448 and 85/448 of a 64 pixel input.
  int patch_size = 21;
  int erase_size = 12;

  void validate(int image_height, int image_width) const;
};

/// Grad-CAM at trace.acts[act_index]: ReLU(sum_k alpha_k A_k), alpha_k the
/// spatial mean of d logit(class) / d A_k, bilinearly upsampled to the input.
template <typename Dtype>
SaliencyMap grad_cam(const Network<Dtype>& net, std::size_t act_index, const Tensor<Dtype>& image,
                     int class_id);

/// Per-layer probability mass observed while propagating excitation backprop.
struct EbDiagnostics {
  std::vector<std::string> layers;  // layer whose input received the mass
  std::vector<double> mass;
};

// Excitation backprop: a one-hot prior on the class logit is redistributed
// top-down as p_i = a_i * sum_j w+_ij p_j / Z_j with Z_j = sum_i a_i w+_ij.
// Max pooling routes to the recorded winner, average pooling is a linear
// layer with uniform positive weights, ReLU passes mass through.
//
// Contrastive mode propagates the head once with the class weights and once
// with their negation, subtracts the two at the head input, clamps at 0,
// renormalizes to 1 and continues from there.
template <typename Dtype>
SaliencyMap excitation_backprop(const Network<Dtype>& net, std::size_t act_index,
                                const Tensor<Dtype>& image, int class_id, bool contrastive,
                                EbDiagnostics* diagnostics = nullptr);

/// Single linear redistribution step; weight is [outputs, inputs].
std::vector<double> eb_linear(std::span<const double> activations, const Tensor<double>& weight,
                              std::span<const double> parent);

/// Scores a batch [B,C,H,W] of masked images.
using BlackBox = std::function<std::vector<Prediction>(const Tensor<Real>& batch)>;

/// Mask i of a RISE run: g x g Bernoulli(p) cells, bilinearly upsampled to
/// (g+1)*cell and cropped at a random sub-cell shift. Values in [0,1].
std::vector<float> rise_mask(const RiseConfig& cfg, int height, int width, std::uint64_t index);

/// saliency = 1/(N p) * sum_i score_i(class) * M_i
SaliencyMap rise(const BlackBox& blackbox, const Tensor<Real>& image, int class_id,
                 const RiseConfig& cfg);

/// Dispatches on cfg.method against a trained model.
SaliencyMap ground(const Model& model, const Image& image, int class_id, const GroundingConfig& cfg);

/// Grounding as seen by pool building and refinement.
class Grounder {
 public:
  virtual ~Grounder() = default;
  virtual GroundingMethod method() const = 0;
  virtual SaliencyMap ground(const Image& image, int class_id) const = 0;
};

class ModelGrounder : public Grounder {
 public:
  ModelGrounder(const Model& model, GroundingConfig cfg);
  GroundingMethod method() const override { return cfg_.method; }
  SaliencyMap ground(const Image& image, int class_id) const override;
  const GroundingConfig& config() const noexcept { return cfg_; }

 private:
  const Model* model_;
  GroundingConfig cfg_;
};

}  // namespace gz
