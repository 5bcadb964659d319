#include <doctest.h>

#include <filesystem>
#include <random>

#include "gz/evidence_pool.hpp"
#include "stubs.hpp"

using namespace gz;
namespace fs = std::filesystem;

namespace {

// Image i is filled with label+1 plus a unique texture; label recovered from the fill.
std::vector<LabeledImage> images(int n, int classes, int side = 32) {
  std::vector<LabeledImage> out;
  std::mt19937_64 rng(1);
  for (int i = 0; i < n; ++i) {
    LabeledImage ex{Image(3, side, side), i % classes, std::nullopt};
    for (auto& v : ex.image.pixels) v = static_cast<std::uint8_t>(10 * (ex.label + 1) + rng() % 5);
    out.push_back(std::move(ex));
  }
  return out;
}

int label_of(const Image& img) {
  int best = 0;
  for (auto v : img.pixels) best = std::max<int>(best, v);
  return best / 10 - 1;
}

bool has_erasure(const Image& img) {
  for (auto v : img.pixels)
    if (v == 0) return true;
  return false;
}

// Peak moves with the number of erased pixels so every level lands elsewhere.
stub::Grounder moving_grounder(GroundingMethod m = GroundingMethod::ContrastiveEB) {
  return stub::Grounder(m, [m](const Image& img, int cls) {
    int zeros = 0;
    for (auto v : img.pixels) zeros += v == 0;
    const int k = zeros / (3 * 144);
    return stub::hot_map(img.height, img.width, 4 + 10 * (k % 3), 6 + 9 * (k / 3 % 3), cls, m);
  });
}

const EvidenceGeometry geo{15, 12};

}  // namespace

TEST_CASE("always-correct stub model yields L+1 patches per image") {
  const auto train = images(6, 3);
  const stub::Classifier clf(3, [](const Image& img) { return stub::one_hot(3, label_of(img)); });
  PoolBuildStats s;
  const EvidencePool pool = build_pool(train, clf, moving_grounder(), geo, 2, &s);
  CHECK(pool.patches.size() == 18);
  CHECK(s.misclassified == 0);
  CHECK(pool.manifest.classes == 3);
  CHECK(check_pool(pool, train, &clf).empty());
  for (std::size_t i = 0; i < pool.patches.size(); ++i) {
    CHECK(pool.patches[i].source_id == static_cast<int>(i / 3));
    CHECK(pool.patches[i].level == static_cast<int>(i % 3));
    CHECK(pool.patches[i].label == train[i / 3].label);
  }
}

TEST_CASE("misclassified images contribute nothing") {
  const auto train = images(6, 3);
  const stub::Classifier clf(3, [&](const Image& img) {
    const int y = label_of(img);
    return stub::one_hot(3, img == train[4].image ? (y + 1) % 3 : y);
  });
  PoolBuildStats s;
  const EvidencePool pool = build_pool(train, clf, moving_grounder(), geo, 2, &s);
  CHECK(pool.patches.size() == 15);
  CHECK(s.misclassified == 1);
  for (const auto& p : pool.patches) CHECK(p.source_id != 4);
}

TEST_CASE("a classification broken by erasing stops the image") {
  const auto train = images(4, 2);
  const stub::Classifier clf(2, [&](const Image& img) {
    const int y = label_of(img);
    const bool broken = has_erasure(img) && y == 1;
    return stub::one_hot(2, broken ? 0 : y);
  });
  PoolBuildStats s;
  const EvidencePool pool = build_pool(train, clf, moving_grounder(), geo, 2, &s);
  CHECK(pool.patches.size() == 3 + 1 + 3 + 1);
  CHECK(s.stopped_by_erase == 2);
  CHECK(check_pool(pool, train, &clf).empty());
}

TEST_CASE("degenerate level-0 saliency contributes nothing") {
  const auto train = images(3, 3);
  const stub::Classifier clf(3, [](const Image& img) { return stub::one_hot(3, label_of(img)); });
  const stub::Grounder g(GroundingMethod::EB, [](const Image& img, int cls) {
    return cls == 1 ? stub::empty_map(img.height, img.width, cls) : stub::hot_map(img.height, img.width, 3, 3, cls);
  });
  PoolBuildStats s;
  const EvidencePool pool = build_pool(train, clf, g, geo, 0, &s);
  CHECK(pool.patches.size() == 2);
  CHECK(s.degenerate == 1);
}

TEST_CASE("ensemble pool is the union of one level-0 pool per method") {
  const auto train = images(5, 5);
  const stub::Classifier clf(5, [](const Image& img) { return stub::one_hot(5, label_of(img)); });
  const stub::Grounder a = moving_grounder(GroundingMethod::ContrastiveEB);
  const stub::Grounder b = moving_grounder(GroundingMethod::GradCam);
  const stub::Grounder c(GroundingMethod::Rise, [](const Image& img, int cls) {
    return cls == 2 ? stub::empty_map(img.height, img.width, cls, GroundingMethod::Rise)
                    : stub::hot_map(img.height, img.width, 20, 20, cls, GroundingMethod::Rise);
  });
  const std::vector<const Grounder*> all{&a, &b};
  CHECK(build_ensemble_pool(train, clf, all, geo).patches.size() == 10);
  const std::vector<const Grounder*> three{&a, &b, &c};
  const EvidencePool pool = build_ensemble_pool(train, clf, three, geo);
  CHECK(pool.patches.size() == 14);
  int from_two = 0;
  for (const auto& p : pool.patches) from_two += p.source_id == 2;
  CHECK(from_two == 2);
  CHECK(pool.manifest.levels == 0);
  CHECK(pool.manifest.methods.size() == 3);
  CHECK(check_pool(pool, train, &clf).empty());
}

TEST_CASE("check_pool reports tampering") {
  const auto train = images(4, 2);
  const stub::Classifier clf(2, [](const Image& img) { return stub::one_hot(2, label_of(img)); });
  const EvidencePool pool = build_pool(train, clf, moving_grounder(), geo, 2);
  REQUIRE(check_pool(pool, train).empty());

  EvidencePool relabeled = pool;
  relabeled.patches[1].label = 1 - relabeled.patches[1].label;
  CHECK_FALSE(check_pool(relabeled, train).empty());

  EvidencePool gap = pool;
  gap.patches.erase(gap.patches.begin() + 1);
  CHECK_FALSE(check_pool(gap, train).empty());

  EvidencePool moved = pool;
  moved.patches[2].center.row += 1;
  CHECK_FALSE(check_pool(moved, train).empty());

  EvidencePool big = pool;
  big.manifest.levels = 0;
  CHECK_FALSE(check_pool(big, train).empty());

  const stub::Classifier wrong(2, [](const Image& img) { return stub::one_hot(2, 1 - label_of(img)); });
  CHECK_FALSE(check_pool(pool, train, &wrong).empty());
}

TEST_CASE("pool save/load round trip") {
  const auto train = images(4, 2);
  const stub::Classifier clf(2, [](const Image& img) { return stub::one_hot(2, label_of(img)); });
  EvidencePool pool = build_pool(train, clf, moving_grounder(), geo, 1);
  pool.manifest.checkpoint_hash = "0123456789abcdef";
  const fs::path dir = fs::temp_directory_path() / "gz_unit";
  fs::create_directories(dir);
  save_pool(pool, dir / "p.gzpl");
  CHECK(fs::exists(dir / "p.gzpl.json"));
  const EvidencePool back = load_pool(dir / "p.gzpl");
  REQUIRE(back.patches.size() == pool.patches.size());
  for (std::size_t i = 0; i < pool.patches.size(); ++i) {
    CHECK(back.patches[i].pixels == pool.patches[i].pixels);
    CHECK(back.patches[i].label == pool.patches[i].label);
    CHECK(back.patches[i].level == pool.patches[i].level);
    CHECK(back.patches[i].source_id == pool.patches[i].source_id);
    CHECK(back.patches[i].center == pool.patches[i].center);
  }
  CHECK(back.manifest.classes == 2);
  CHECK(back.manifest.levels == 1);
  CHECK(back.manifest.checkpoint_hash == pool.manifest.checkpoint_hash);
  CHECK(check_pool(back, train, &clf).empty());
}

namespace {

EvidencePool separable_pool(int n) {
  EvidencePool pool;
  pool.manifest.geometry = {16, 8};
  std::mt19937_64 rng(2);
  for (int i = 0; i < n; ++i) {
    EvidencePatch p;
    p.label = i % 2;
    p.source_id = i;
    p.pixels = Image(3, 16, 16);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          const bool lit = p.label == 0 ? y < 8 : x < 8;
          p.pixels.at(c, y, x) = static_cast<std::uint8_t>((lit ? 190 : 50) + rng() % 40);
        }
    pool.patches.push_back(std::move(p));
  }
  return pool;
}

ModelSpec small_evidence(int classes) {
  ModelSpec s = ModelSpec::evidence(classes);
  s.channels = {8, 16};
  s.grounding_layer = "block1.relu";
  return s;
}

}  // namespace

TEST_CASE("evidence CNN learns a separable pool") {
  const EvidencePool pool = separable_pool(64);
  TrainConfig cfg;
  cfg.iterations = 150;
  cfg.batch = 16;
  cfg.crop_pad = 0;
  const TrainResult r = train_evidence_cnn(pool, small_evidence(2), cfg);
  const ModelClassifier clf(r.model);
  int ok = 0;
  for (const auto& p : pool.patches) ok += clf.classify(p.pixels).argmax() == p.label;
  CHECK(ok >= 0.9 * pool.patches.size());
}

TEST_CASE("duplicated pool trains to a valid model") {
  EvidencePool pool = separable_pool(16);
  const auto copy = pool.patches;
  pool.patches.insert(pool.patches.end(), copy.begin(), copy.end());
  TrainConfig cfg;
  cfg.iterations = 20;
  cfg.batch = 8;
  const TrainResult r = train_evidence_cnn(pool, small_evidence(2), cfg);
  for (const auto& e : r.epochs) CHECK(std::isfinite(e.mean_loss));
  CHECK(ModelClassifier(r.model).classify(pool.patches[0].pixels).valid());
}

TEST_CASE("single-class pool is learned with high confidence") {
  EvidencePool pool = separable_pool(16);
  for (auto& p : pool.patches) p.label = 1;
  TrainConfig cfg;
  cfg.iterations = 100;
  cfg.batch = 8;
  const TrainResult r = train_evidence_cnn(pool, small_evidence(3), cfg);
  const ModelClassifier clf(r.model);
  for (const auto& p : pool.patches) CHECK(clf.classify(p.pixels)[1] >= 0.99);
}

TEST_CASE("empty pool is a configuration error") {
  CHECK_THROWS_AS(train_evidence_cnn(EvidencePool{}, small_evidence(2), TrainConfig{}), ConfigError);
}
