#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "gz/tensor.hpp"

namespace gz {

/// 8-bit planar image, channel-major (CHW).
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int c, int h, int w, std::uint8_t fill = 0)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  std::uint8_t& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::uint8_t at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Axis-aligned box in pixel coordinates.
struct Box {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  bool contains(int r, int c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

struct LabeledImage {
  Image image;
  int label = 0;
  std::optional<Box> part;  // ground truth, verification only
};

/// [1,C,H,W] tensor with values scaled to [-1,1].
template <typename Dtype = Real>
Tensor<Dtype> to_tensor(const Image& img);

/// Writes `img` as sample `n` of a preallocated [N,C,H,W] batch.
template <typename Dtype = Real>
void to_tensor_into(const Image& img, Tensor<Dtype>& batch, int n);

/// Bilinear resampling with half-pixel centers.
Image resize_bilinear(const Image& img, int height, int width);

/// Bilinear resampling of a single-channel float grid.
std::vector<float> resize_bilinear(std::span<const float> grid, int h, int w, int out_h, int out_w);

/// Largest centered square, resampled to side x side.
Image center_crop_resize(const Image& img, int side);

/// Zero-pads by `pad` on every border and crops side x side at (top, left) of the padded canvas.
Image pad_crop(const Image& img, int pad, int top, int left);

// Binary netpbm. read_netpbm accepts P5 and P6 with maxval 255.
Image read_netpbm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);
void write_pgm(const std::filesystem::path& path, int height, int width,
               std::span<const std::uint8_t> gray);

}  // namespace gz
