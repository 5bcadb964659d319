#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gz/grounding.hpp"
#include "gz/image.hpp"

namespace gz {

/// Min-max normalized 8-bit map (all zeros for a constant map).
std::vector<std::uint8_t> normalize_map(const SaliencyMap& map);

/// 50% blend of the image with the normalized map in the red channel.
Image overlay(const Image& image, const SaliencyMap& map);

/// Writes `<stem>.pgm` (raw map) and `<stem>.ppm` (overlay).
void write_saliency(const std::filesystem::path& stem, const Image& image, const SaliencyMap& map);

}  // namespace gz
