#include "gz/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "gz/random.hpp"

namespace gz {

void SyntheticSpec::validate() const {
  if (classes < 2 || classes > 65535) throw ConfigError("synthetic spec: need 2..65535 classes");
  if (train_per_class < 0 || test_per_class < 0) throw ConfigError("synthetic spec: negative image count");
  if (image_size < 8 || image_size > 4096) throw ConfigError("synthetic spec: image size out of range");
  if (part_size < 2) throw ConfigError("synthetic spec: part glyph must be at least 2x2");
  if (glyph_grid < 1 || part_size % glyph_grid != 0) {
    throw ConfigError("synthetic spec: part size " + std::to_string(part_size) +
                      " is not a multiple of glyph grid " + std::to_string(glyph_grid));
  }
  if (glyph_flips < 1 || glyph_flips > glyph_grid * glyph_grid) {
    throw ConfigError("synthetic spec: glyph flips must be in [1, glyph_grid^2]");
  }
  if (group_size < 1) throw ConfigError("synthetic spec: group size must be >= 1");
  if (detail_pixels < 0 || detail_pixels > part_size * part_size) {
    throw ConfigError("synthetic spec: detail pixels must be in [0, part_size^2]");
  }
  if (group_size > 1 && detail_pixels == 0) {
    throw ConfigError("synthetic spec: classes sharing a motif need detail pixels to differ");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("synthetic spec: noise sigma must be >= 0");
  const double ry = body_radius_y * image_size, rx = body_radius_x * image_size;
  // the glyph must fit inside the body: its half-diagonal within the ellipse
  const double half = part_size / 2.0 + 1.0;
  if (!(ry > half * 1.5 && rx > half * 1.5) || ry * 2 > image_size || rx * 2 > image_size) {
    throw ConfigError("synthetic spec: part glyph of " + std::to_string(part_size) +
                      " pixels does not fit inside the body with a placement margin");
  }
}

std::string SyntheticSpec::to_json() const {
  nlohmann::json j;
  j["classes"] = classes;
  j["train_per_class"] = train_per_class;
  j["test_per_class"] = test_per_class;
  j["image_size"] = image_size;
  j["part_size"] = part_size;
  j["glyph_grid"] = glyph_grid;
  j["glyph_flips"] = glyph_flips;
  j["group_size"] = group_size;
  j["detail_pixels"] = detail_pixels;
  j["noise_sigma"] = noise_sigma;
  j["background"] = background;
  j["body"] = body;
  j["ink"] = ink;
  j["body_radius_y"] = body_radius_y;
  j["body_radius_x"] = body_radius_x;
  j["seed"] = seed;
  return j.dump(2);
}

SyntheticSpec SyntheticSpec::from_json(const std::string& text) {
  SyntheticSpec s;
  try {
    const auto j = nlohmann::json::parse(text);
    s.classes = j.value("classes", s.classes);
    s.train_per_class = j.value("train_per_class", s.train_per_class);
    s.test_per_class = j.value("test_per_class", s.test_per_class);
    s.image_size = j.value("image_size", s.image_size);
    s.part_size = j.value("part_size", s.part_size);
    s.glyph_grid = j.value("glyph_grid", s.glyph_grid);
    s.glyph_flips = j.value("glyph_flips", s.glyph_flips);
    s.group_size = j.value("group_size", s.group_size);
    s.detail_pixels = j.value("detail_pixels", s.detail_pixels);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.background = j.value("background", s.background);
    s.body = j.value("body", s.body);
    s.ink = j.value("ink", s.ink);
    s.body_radius_y = j.value("body_radius_y", s.body_radius_y);
    s.body_radius_x = j.value("body_radius_x", s.body_radius_x);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

// k distinct indices out of n, drawn with a partial shuffle.
std::vector<int> draw_indices(std::mt19937_64& rng, int n, int k) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace

std::vector<std::vector<std::uint8_t>> class_glyphs(const SyntheticSpec& spec) {
  spec.validate();
  const int G = spec.glyph_grid, P = spec.part_size, cell = P / G;
  const int groups = (spec.classes + spec.group_size - 1) / spec.group_size;
  std::mt19937_64 rng(derive_seed(spec.seed, "glyphs"));
  std::bernoulli_distribution half(0.5);
  std::vector<std::uint8_t> base(static_cast<std::size_t>(G * G));
  for (auto& b : base) b = half(rng) ? 1 : 0;

  int attempts = 0;
  auto guard = [&] {
    if (++attempts > 1000 * spec.classes) throw ConfigError("synthetic spec: cannot draw distinct glyphs");
  };
  std::set<std::vector<std::uint8_t>> seen_motifs;
  std::vector<std::vector<std::uint8_t>> motifs;
  while (static_cast<int>(motifs.size()) < groups) {
    guard();
    std::vector<std::uint8_t> m = base;
    for (int i : draw_indices(rng, G * G, spec.glyph_flips)) m[static_cast<std::size_t>(i)] ^= 1;
    if (seen_motifs.insert(m).second) motifs.push_back(std::move(m));
  }

  std::set<std::vector<std::uint8_t>> seen;
  std::vector<std::vector<std::uint8_t>> glyphs;
  while (static_cast<int>(glyphs.size()) < spec.classes) {
    guard();
    const auto& m = motifs[glyphs.size() / static_cast<std::size_t>(spec.group_size)];
    std::vector<std::uint8_t> g(static_cast<std::size_t>(P * P));
    for (int y = 0; y < P; ++y) {
      for (int x = 0; x < P; ++x) g[static_cast<std::size_t>(y * P + x)] = m[static_cast<std::size_t>((y / cell) * G + x / cell)];
    }
    for (int i : draw_indices(rng, P * P, spec.detail_pixels)) g[static_cast<std::size_t>(i)] ^= 1;
    if (seen.insert(g).second) glyphs.push_back(std::move(g));
  }
  return glyphs;
}

namespace {

bool inside_ellipse(double y, double x, double cy, double cx, double ry, double rx) {
  const double dy = (y - cy) / ry, dx = (x - cx) / rx;
  return dy * dy + dx * dx <= 1.0;
}

LabeledImage render(const SyntheticSpec& spec, const std::vector<std::uint8_t>& glyph, int label,
                    std::uint64_t stream) {
  std::mt19937_64 rng(derive_seed(spec.seed, stream));
  const int S = spec.image_size, P = spec.part_size;
  const double c = (S - 1) / 2.0;
  const double ry = spec.body_radius_y * S, rx = spec.body_radius_x * S;

  std::uniform_int_distribution<int> ur(static_cast<int>(std::ceil(c - ry)), static_cast<int>(c + ry) - P + 1);
  std::uniform_int_distribution<int> uc(static_cast<int>(std::ceil(c - rx)), static_cast<int>(c + rx) - P + 1);
  Box box{0, 0, P, P};
  for (;;) {
    box.row = ur(rng);
    box.col = uc(rng);
    const double r0 = box.row - 0.5, r1 = box.row + P - 0.5;
    const double c0 = box.col - 0.5, c1 = box.col + P - 0.5;
    if (inside_ellipse(r0, c0, c, c, ry, rx) && inside_ellipse(r0, c1, c, c, ry, rx) &&
        inside_ellipse(r1, c0, c, c, ry, rx) && inside_ellipse(r1, c1, c, c, ry, rx)) {
      break;
    }
  }

  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  LabeledImage out;
  out.image = Image(3, S, S);
  out.label = label;
  out.part = box;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const std::array<double, 3>* color = inside_ellipse(y, x, c, c, ry, rx) ? &spec.body : &spec.background;
      if (box.contains(y, x) &&
          glyph[static_cast<std::size_t>(y - box.row) * P + (x - box.col)]) {
        color = &spec.ink;
      }
      for (int ch = 0; ch < 3; ++ch) {
        const double v = (*color)[ch] + (spec.noise_sigma > 0 ? noise(rng) : 0.0);
        out.image.at(ch, y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return out;
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  const auto glyphs = class_glyphs(spec);
  Dataset d;
  d.classes = spec.classes;
  const int C = spec.classes;
  const std::uint64_t test_stream = 1ULL << 40;
  for (int i = 0; i < C * spec.train_per_class; ++i) {
    d.train.push_back(render(spec, glyphs[static_cast<std::size_t>(i % C)], i % C, static_cast<std::uint64_t>(i)));
  }
  for (int i = 0; i < C * spec.test_per_class; ++i) {
    d.test.push_back(render(spec, glyphs[static_cast<std::size_t>(i % C)], i % C, test_stream + i));
  }
  return d;
}

std::vector<LabeledImage> erase_parts(std::span<const LabeledImage> images) {
  std::vector<LabeledImage> out(images.begin(), images.end());
  for (auto& ex : out) {
    if (!ex.part) continue;
    const Box& b = *ex.part;
    for (int ch = 0; ch < ex.image.channels; ++ch)
      for (int y = b.row; y < b.row + b.height; ++y)
        for (int x = b.col; x < b.col + b.width; ++x) ex.image.at(ch, y, x) = 0;
  }
  return out;
}

double localization_score(std::span<const SaliencyMap> maps, std::span<const Box> boxes) {
  if (maps.empty()) throw ArgumentError("localization_score: no maps");
  if (maps.size() != boxes.size()) {
    throw ArgumentError("localization_score: " + std::to_string(maps.size()) + " maps for " +
                        std::to_string(boxes.size()) + " boxes");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto pk = peak(maps[i]);
    hits += pk && boxes[i].contains(pk->row, pk->col);
  }
  return static_cast<double>(hits) / maps.size();
}

void save_split(const std::filesystem::path& path, std::span<const LabeledImage> images, int classes) {
  detail::LeWriter w(path.string());
  w.bytes("GZDS", 4);
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(images.size()));
  const int side = images.empty() ? 0 : images.front().image.height;
  const int channels = images.empty() ? 3 : images.front().image.channels;
  w.put<std::uint16_t>(static_cast<std::uint16_t>(classes));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(side));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(channels));
  for (const auto& ex : images) {
    if (ex.image.height != side || ex.image.width != side || ex.image.channels != channels) {
      throw ArgumentError("save_split: images must share one square size");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(ex.label));
    const Box b = ex.part.value_or(Box{-1, -1, -1, -1});
    for (int v : {b.row, b.col, b.height, b.width}) w.put<std::int16_t>(static_cast<std::int16_t>(v));
    w.bytes(ex.image.pixels.data(), ex.image.pixels.size());
  }
  w.close();
}

std::vector<LabeledImage> load_split(const std::filesystem::path& path, int* classes) {
  detail::LeReader r(path.string());
  r.magic("GZDS");
  r.version(1);
  const auto count = r.get<std::uint32_t>("image count");
  const int C = r.get<std::uint16_t>("class count");
  const int side = r.get<std::uint16_t>("side");
  const int channels = r.get<std::uint8_t>("channels");
  if (classes) *classes = C;
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string what = "image " + std::to_string(i);
    LabeledImage ex;
    ex.label = r.get<std::uint16_t>(what + " label");
    if (ex.label >= C) throw FormatError(FormatError::Kind::Malformed, what + ": label out of range");
    std::int16_t b[4];
    for (auto& v : b) v = r.get<std::int16_t>(what + " box");
    if (b[0] >= 0) ex.part = Box{b[0], b[1], b[2], b[3]};
    ex.image = Image(channels, side, side);
    r.bytes(ex.image.pixels.data(), ex.image.pixels.size(), what + " pixels");
    out.push_back(std::move(ex));
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data, const SyntheticSpec& spec) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create output directory");
  save_split(dir / "train.gzds", data.train, data.classes);
  save_split(dir / "test.gzds", data.test, data.classes);
  nlohmann::json j;
  j["spec"] = nlohmann::json::parse(spec.to_json());
  j["splits"] = {
      {"train", {{"file", "train.gzds"}, {"count", data.train.size()}, {"stream_offset", 0}}},
      {"test", {{"file", "test.gzds"}, {"count", data.test.size()}, {"stream_offset", 1ULL << 40}}}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError((dir / "manifest.json").string(), "cannot write manifest");
  out << j.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  int c_train = 0, c_test = 0;
  d.train = load_split(dir / "train.gzds", &c_train);
  d.test = load_split(dir / "test.gzds", &c_test);
  if (c_train != c_test) {
    throw FormatError(FormatError::Kind::Malformed, "train and test splits disagree on class count");
  }
  d.classes = c_train;
  return d;
}

IngestResult ingest_folder(const std::filesystem::path& root, int side) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError(root.string(), "not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError(root.string(), "no class subdirectories");

  IngestResult r;
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(class_dirs[label])) {
      if (e.is_regular_file()) entries.push_back(e.path());
    }
    std::sort(entries.begin(), entries.end());
    if (entries.empty()) throw IoError(class_dirs[label].string(), "empty class directory");
    r.class_names.push_back(class_dirs[label].filename().string());
    for (const auto& f : entries) {
      Image img = read_netpbm(f);  // IoError names the file
      if (img.channels == 1) {
        Image rgb(3, img.height, img.width);
        for (int c = 0; c < 3; ++c)
          std::copy(img.pixels.begin(), img.pixels.end(),
                    rgb.pixels.begin() + static_cast<std::ptrdiff_t>(c) * img.pixels.size());
        img = std::move(rgb);
      }
      r.images.push_back({center_crop_resize(img, side), static_cast<int>(label), std::nullopt});
      files.push_back({{"path", fs::relative(f, root).generic_string()}, {"label", label}});
    }
  }
  nlohmann::json j;
  j["side"] = side;
  j["classes"] = r.class_names;
  j["files"] = files;
  r.manifest = j.dump(2);
  return r;
}

}  // namespace gz
