#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "gz/model.hpp"
#include "gz/synthetic.hpp"
#include "stubs.hpp"

using namespace gz;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gz_unit" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.train_per_class = 6;
  s.test_per_class = 3;
  return s;
}

}  // namespace

TEST_CASE("default spec produces balanced splits") {
  SyntheticSpec s;
  s.test_per_class = 1;
  const Dataset d = generate(s);
  CHECK(d.train.size() == 2000);
  CHECK(d.test.size() == 10);
  std::vector<int> count(10, 0);
  for (const auto& ex : d.train) ++count[static_cast<std::size_t>(ex.label)];
  for (int c : count) CHECK(c == 200);
  CHECK(d.train.front().image.height == 64);
  CHECK(d.train.front().image.channels == 3);
}

TEST_CASE("glyphs are pairwise distinct and only the part box depends on the class") {
  const SyntheticSpec s = small_spec();
  const auto glyphs = class_glyphs(s);
  CHECK(std::set<std::vector<std::uint8_t>>(glyphs.begin(), glyphs.end()).size() == glyphs.size());
  for (const auto& g : glyphs) CHECK(g.size() == 81);

  const Dataset d = generate(s);
  for (const auto& ex : d.train) {
    REQUIRE(ex.part.has_value());
    const Box b = *ex.part;
    CHECK(b.row >= 0);
    CHECK(b.col >= 0);
    CHECK(b.row + b.height <= 64);
    CHECK(b.col + b.width <= 64);
  }
  const auto erased = erase_parts(d.train);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const Box b = *d.train[i].part;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
          if (b.contains(y, x)) {
            CHECK(erased[i].image.at(c, y, x) == 0);
          } else if (erased[i].image.at(c, y, x) != d.train[i].image.at(c, y, x)) {
            FAIL("pixel outside the part box changed");
          }
        }
  }
}

TEST_CASE("generation is deterministic down to the bytes") {
  const SyntheticSpec s = small_spec();
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  save_dataset(a, generate(s), s);
  save_dataset(b, generate(s), s);
  for (const char* f : {"train.gzds", "test.gzds", "manifest.json"}) {
    CHECK(fs::exists(a / f));
    CHECK(bytes(a / f) == bytes(b / f));
  }
  const Dataset back = load_dataset(a);
  const Dataset d = generate(s);
  REQUIRE(back.train.size() == d.train.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    CHECK(back.train[i].image == d.train[i].image);
    CHECK(back.train[i].label == d.train[i].label);
    CHECK(back.train[i].part == d.train[i].part);
  }
  SyntheticSpec other = s;
  other.seed = 8;
  CHECK_FALSE(generate(other).train[0].image == d.train[0].image);
}

TEST_CASE("spec validation") {
  SyntheticSpec s;
  s.part_size = 40;
  s.glyph_grid = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SyntheticSpec{};
  s.part_size = 10;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SyntheticSpec{};
  s.detail_pixels = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.group_size = 1;
  CHECK_NOTHROW(s.validate());
  const SyntheticSpec r = SyntheticSpec::from_json(SyntheticSpec{}.to_json());
  CHECK(r.to_json() == SyntheticSpec{}.to_json());
  CHECK_THROWS_AS(SyntheticSpec::from_json("{\"classes\": \"ten\"}"), ConfigError);
}

TEST_CASE("localization score counts peaks inside boxes") {
  const std::vector<SaliencyMap> maps{stub::hot_map(10, 10, 2, 2), stub::hot_map(10, 10, 8, 8),
                                      stub::hot_map(10, 10, 5, 5), stub::empty_map(10, 10)};
  const std::vector<Box> inside{{1, 1, 3, 3}, {7, 7, 2, 2}, {5, 5, 1, 1}, {0, 0, 10, 10}};
  CHECK(localization_score(std::span(maps).first(3), std::span(inside).first(3)) == 1.0);
  const std::vector<Box> half{{1, 1, 3, 3}, {0, 0, 2, 2}, {5, 5, 1, 1}, {0, 0, 10, 10}};
  CHECK(localization_score(maps, half) == 0.5);
  CHECK_THROWS_AS(localization_score(std::span<const SaliencyMap>(), std::span<const Box>()), ArgumentError);
  CHECK_THROWS_AS(localization_score(maps, std::span(inside).first(2)), ArgumentError);
}

TEST_CASE("container errors") {
  const fs::path dir = scratch("bad");
  const SyntheticSpec s = small_spec();
  save_dataset(dir, generate(s), s);
  auto b = bytes(dir / "train.gzds");
  b[1] = 'Q';
  {
    std::ofstream out(dir / "train.gzds", std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  }
  try {
    load_dataset(dir);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::BadMagic);
  }
  CHECK_THROWS_AS(load_dataset(scratch("empty")), IoError);
}

TEST_CASE("ingest: one class per subdirectory") {
  const fs::path root = scratch("ingest");
  for (const char* cls : {"b_second", "a_first"}) {
    fs::create_directories(root / cls);
    for (int i = 0; i < 3; ++i) {
      Image img(3, 20, 30, static_cast<std::uint8_t>(40 * i));
      write_ppm(root / cls / ("img" + std::to_string(i) + ".ppm"), img);
    }
  }
  const IngestResult r = ingest_folder(root, 16);
  CHECK(r.images.size() == 6);
  CHECK(r.class_names == std::vector<std::string>{"a_first", "b_second"});
  std::set<int> labels;
  for (const auto& ex : r.images) {
    labels.insert(ex.label);
    CHECK(ex.image.height == 16);
    CHECK(ex.image.width == 16);
  }
  CHECK(labels == std::set<int>{0, 1});
  CHECK(ingest_folder(root, 16).manifest == r.manifest);

  std::ofstream(root / "a_first" / "notes.txt") << "not an image";
  try {
    ingest_folder(root, 16);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("notes.txt") != std::string::npos);
  }
  fs::remove(root / "a_first" / "notes.txt");
  fs::create_directories(root / "c_empty");
  CHECK_THROWS_AS(ingest_folder(root, 16), IoError);
}

TEST_CASE("without the part a classifier sits at chance") {
  SyntheticSpec s;
  s.train_per_class = 100;
  s.test_per_class = 100;
  const Dataset d = generate(s);
  const auto train_erased = erase_parts(d.train);
  const auto test_erased = erase_parts(d.test);
  TrainConfig cfg;
  cfg.iterations = 300;
  const TrainResult r = train(train_erased, ModelSpec::conventional(10), cfg);
  const double acc = accuracy(r.model, test_erased);
  MESSAGE("part-erased test accuracy " << acc);
  CHECK(std::abs(acc - 0.1) <= 0.05);
}
