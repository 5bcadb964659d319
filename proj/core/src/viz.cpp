#include "gz/viz.hpp"

#include <algorithm>
#include <cmath>

namespace gz {

std::vector<std::uint8_t> normalize_map(const SaliencyMap& map) {
  std::vector<std::uint8_t> out(map.values.size(), 0);
  if (map.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const float range = *hi - *lo;
  if (!(range > 0.0f)) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround((map.values[i] - *lo) / range * 255.0f));
  }
  return out;
}

Image overlay(const Image& image, const SaliencyMap& map) {
  if (image.height != map.height || image.width != map.width) {
    throw ShapeError("overlay: map size differs from image size");
  }
  const auto heat = normalize_map(map);
  Image out(3, image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const std::size_t k = static_cast<std::size_t>(y) * image.width + x;
      for (int c = 0; c < 3; ++c) {
        const int src = image.at(std::min(c, image.channels - 1), y, x);
        const int h = c == 0 ? heat[k] : 0;
        out.at(c, y, x) = static_cast<std::uint8_t>((src + h + 1) / 2);
      }
    }
  }
  return out;
}

void write_saliency(const std::filesystem::path& stem, const Image& image, const SaliencyMap& map) {
  const auto gray = normalize_map(map);
  write_pgm(stem.string() + ".pgm", map.height, map.width, gray);
  write_ppm(stem.string() + ".ppm", overlay(image, map));
}

}  // namespace gz
