#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gz/grounding.hpp"
#include "gz/image.hpp"

namespace gz {

// Classes share one body (a centred ellipse) over a noisy flat background and
// differ only by a small binary part glyph placed uniformly inside the body.
// A glyph is a coarse glyph_grid x glyph_grid motif of square cells shared by
// a group of group_size classes (a common base with glyph_flips cells flipped
// per group), plus detail_pixels single-pixel flips that tell the classes of a
// group apart. Classes are close to each other (fine-grained) and the
// within-group details are much easier to read from a zoomed patch.
struct SyntheticSpec {
  int classes = 10;
  int train_per_class = 200;
  int test_per_class = 100;
  int image_size = 64;
  int part_size = 9;
  int glyph_grid = 3;     // cells per glyph side; part_size must be a multiple
  int glyph_flips = 3;    // cells flipped from the base motif per group
  int group_size = 2;     // classes sharing one coarse motif
  int detail_pixels = 1;  // single-pixel flips per class within its group
  double noise_sigma = 0.1;
  std::array<double, 3> background{0.45, 0.55, 0.65};
  std::array<double, 3> body{0.85, 0.72, 0.45};
  std::array<double, 3> ink{0.25, 0.18, 0.12};
  double body_radius_y = 0.32;  // semi-axes as fractions of the image side
  double body_radius_x = 0.40;
  std::uint64_t seed = 7;

  void validate() const;
  std::string to_json() const;
  static SyntheticSpec from_json(const std::string& text);
};

struct Dataset {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
  int classes = 0;
};

/// Per-class binary glyphs (part_size^2 pixels, row-major), pairwise distinct.
std::vector<std::vector<std::uint8_t>> class_glyphs(const SyntheticSpec& spec);

/// Pure function of the spec, seed included.
Dataset generate(const SyntheticSpec& spec);

/// Zeroes every image's part box.
std::vector<LabeledImage> erase_parts(std::span<const LabeledImage> images);

/// Fraction of maps whose peak lies inside the matching box (degenerate maps count as misses).
double localization_score(std::span<const SaliencyMap> maps, std::span<const Box> boxes);

// Dataset container: "GZDS", u32 version, u32 count, u16 classes, u16 side,
// u8 channels, then per image u16 label, i16 box row/col/h/w (-1 when
// absent) and the raw planar pixels.
void save_split(const std::filesystem::path& path, std::span<const LabeledImage> images, int classes);
std::vector<LabeledImage> load_split(const std::filesystem::path& path, int* classes = nullptr);

/// Writes train.gzds, test.gzds and manifest.json into `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& data, const SyntheticSpec& spec);
Dataset load_dataset(const std::filesystem::path& dir);

struct IngestResult {
  std::vector<LabeledImage> images;
  std::vector<std::string> class_names;
  std::string manifest;  // JSON
};

/// One class per subdirectory (lexicographic order -> label), PPM/PGM files,
/// each centre-cropped and resized to side x side RGB.
IngestResult ingest_folder(const std::filesystem::path& root, int side);

}  // namespace gz
