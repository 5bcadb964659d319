#include <doctest.h>

#include <random>

#include "gz/refinement.hpp"
#include "stubs.hpp"

using namespace gz;

namespace {

const stub::Grounder centre(GroundingMethod::ContrastiveEB,
                            [](const Image& img, int cls) { return stub::hot_map(img.height, img.width, 20, 20, cls); });

// Evidence stub driven by the candidate the grounder was last asked about.
struct Scripted {
  int current = -1;
  stub::Grounder grounder{GroundingMethod::ContrastiveEB, [this](const Image& img, int cls) {
                            current = cls;
                            return stub::hot_map(img.height, img.width, 20, 20, cls);
                          }};
};

RefinementConfig single_level(int k, double w, double w0) {
  const std::vector<double> weights{w, w0};
  return RefinementConfig::from_weights(k, weights);
}

}  // namespace

TEST_CASE("uniform evidence keeps the conventional ranking") {
  const Image img(3, 64, 64, 100);
  const Prediction base{{0.1, 0.5, 0.25, 0.15}};
  const stub::Classifier ev(4, [](const Image&) { return stub::uniform(4); });
  const RefinementTrace t = refine(img, base, centre, ev, RefinementConfig{});
  CHECK(t.chosen == 1);
  CHECK(t.candidates == std::vector<int>{1, 2, 3});
  CHECK(t.per_candidate.size() == 3);
  CHECK(t.per_candidate[0].levels.size() == 3);
}

TEST_CASE("k = 1 always returns the conventional top-1") {
  const Image img(3, 64, 64, 100);
  const Prediction base{{0.3, 0.7}};
  const stub::Classifier ev(2, [](const Image&) { return stub::one_hot(2, 0); });
  RefinementConfig cfg;
  cfg.k = 1;
  CHECK(refine(img, base, centre, ev, cfg).chosen == 1);
}

TEST_CASE("hand-evaluated single-level example") {
  const Image img(3, 64, 64, 100);
  const Prediction base{{0.5, 0.3, 0.2}};
  Scripted s;
  const stub::Classifier ev(3, [&](const Image&) {
    return s.current == 0 ? Prediction{{0.1, 0.45, 0.45}} : Prediction{{0.05, 0.9, 0.05}};
  });
  const RefinementTrace t = refine(img, base, s.grounder, ev, single_level(2, 0.4, 0.6));
  CHECK(t.tot[0] == doctest::Approx(0.26));
  CHECK(t.tot[1] == doctest::Approx(0.66));
  CHECK(t.chosen == 1);
}

TEST_CASE("default schedule with full evidence for the runner-up picks it") {
  const Image img(3, 64, 64, 100);
  const Prediction base{{0.9, 0.06, 0.04}};
  Scripted s;
  const stub::Classifier ev(3, [&](const Image&) {
    return s.current == 1 ? stub::one_hot(3, 1) : stub::one_hot(3, 2 - s.current);
  });
  const RefinementTrace t = refine(img, base, s.grounder, ev, RefinementConfig{});
  CHECK(t.tot[1] == doctest::Approx(0.4 * 0.06 + 0.6));
  CHECK(t.tot[0] == doctest::Approx(0.4 * 0.9));
  CHECK(t.chosen == 1);
}

TEST_CASE("ties go to the higher-ranked candidate") {
  const Image img(3, 64, 64, 100);
  const Prediction base{{0.25, 0.25, 0.5}};
  const stub::Classifier ev(3, [](const Image&) { return stub::uniform(3); });
  const RefinementTrace t = refine(img, base, centre, ev, single_level(3, 0.5, 0.5));
  CHECK(t.candidates == std::vector<int>{2, 0, 1});
  CHECK(t.chosen == 2);
  const Prediction flat{{1.0 / 3, 1.0 / 3, 1.0 / 3}};
  CHECK(refine(img, flat, centre, ev, single_level(3, 0.5, 0.5)).chosen == 0);
}

TEST_CASE("degenerate saliency skips that level and deeper ones") {
  const Image img(3, 64, 64, 100);
  const Prediction base{{0.5, 0.4, 0.1}};
  int calls = 0;
  const stub::Grounder g(GroundingMethod::ContrastiveEB, [&](const Image& im, int cls) {
    ++calls;
    bool erased = false;
    for (auto v : im.pixels) erased |= v == 0;
    if (cls == 0 && erased) return stub::empty_map(im.height, im.width, cls);
    return stub::hot_map(im.height, im.width, 30, 30, cls);
  });
  const stub::Classifier ev(3, [](const Image&) { return stub::one_hot(3, 1); });
  const RefinementTrace t = refine(img, base, g, ev, RefinementConfig{});
  CHECK(t.per_candidate[0].stopped_degenerate);
  CHECK(t.per_candidate[0].levels.size() == 1);
  CHECK(t.per_candidate[1].levels.size() == 3);
  CHECK(calls == 2 + 3 + 3);
  CHECK(t.tot[0] == doctest::Approx(0.4 * 0.5));
  CHECK(t.tot[1] == doctest::Approx(0.4 * 0.4 + 0.6));
}

TEST_CASE("candidates erase independently") {
  const Image img(3, 64, 64, 100);
  const Prediction base{{0.6, 0.4}};
  std::vector<int> zeros;
  const stub::Grounder g(GroundingMethod::ContrastiveEB, [&](const Image& im, int cls) {
    int z = 0;
    for (auto v : im.pixels) z += v == 0;
    zeros.push_back(z);
    return stub::hot_map(im.height, im.width, 8 + 20 * (z / 432), 10 + 30 * cls, cls);
  });
  const stub::Classifier ev(2, [](const Image&) { return stub::uniform(2); });
  refine(img, base, g, ev, RefinementConfig{.k = 2});
  CHECK(zeros == std::vector<int>{0, 432, 864, 0, 432, 864});
}

TEST_CASE("weights: defaults, normalization and validation") {
  const RefinementConfig d;
  CHECK(d.base_weight == 0.4);
  CHECK(d.level_weights == std::vector<double>{0.3, 0.2, 0.1});
  CHECK_NOTHROW(d.validate(10));
  const std::vector<double> raw{4, 3, 2, 1};
  const RefinementConfig n = RefinementConfig::from_weights(3, raw);
  CHECK(n.levels == 2);
  CHECK(n.base_weight == doctest::Approx(0.4));
  CHECK_NOTHROW(n.validate(3));
  const std::vector<double> one{1.0};
  CHECK_THROWS_AS(RefinementConfig::from_weights(3, one), ConfigError);
  const std::vector<double> negative{0.5, -0.5, 1.0};
  CHECK_THROWS_AS(RefinementConfig::from_weights(3, negative), ConfigError);
  const std::vector<double> rising{0.4, 0.1, 0.5};
  CHECK_THROWS_AS(RefinementConfig::from_weights(3, rising).validate(3), ConfigError);
  RefinementConfig k;
  k.k = 4;
  CHECK_THROWS_AS(k.validate(3), ConfigError);
}

TEST_CASE("adding a constant to every aggregate leaves the choice unchanged") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Prediction base;
    for (int c = 0; c < 5; ++c) base.probs.push_back(u(rng));
    double s = 0;
    for (double v : base.probs) s += v;
    for (double& v : base.probs) v /= s;
    const Image img(3, 64, 64, 100);
    const stub::Classifier ev(5, [](const Image&) { return stub::uniform(5); });
    RefinementConfig cfg;
    // uniform evidence adds the same constant to every candidate
    CHECK(refine(img, base, centre, ev, cfg).chosen == topk(base, 1)[0]);
  }
}

namespace {

std::vector<LabeledImage> test_set(int n, int classes) {
  std::vector<LabeledImage> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({Image(3, 64, 64, static_cast<std::uint8_t>(i + 1)), i % classes, std::nullopt});
  }
  return out;
}

// Conventional stub: probabilities derived from the fill value, so top-1 is
// right for some images and the truth sits in top-3 for most.
Prediction fake_base(const Image& img, int classes) {
  const int i = img.pixels[0] - 1;
  const int truth = i % classes;
  Prediction p;
  p.probs.assign(static_cast<std::size_t>(classes), 0.02);
  const int rank = i % 4;  // 0: right, 1: second, 2: third, 3: outside top-3
  const int top = rank == 0 ? truth : (truth + 1) % classes;
  p.probs[static_cast<std::size_t>(top)] = 0.5;
  if (rank == 1) p.probs[static_cast<std::size_t>(truth)] = 0.3;
  if (rank == 2) {
    p.probs[static_cast<std::size_t>((truth + 2) % classes)] = 0.3;
    p.probs[static_cast<std::size_t>(truth)] = 0.1;
  }
  if (rank == 3) {
    p.probs[static_cast<std::size_t>((truth + 2) % classes)] = 0.3;
    p.probs[static_cast<std::size_t>((truth + 3) % classes)] = 0.1;
  }
  double s = 0;
  for (double v : p.probs) s += v;
  for (double& v : p.probs) v /= s;
  return p;
}

}  // namespace

TEST_CASE("evaluate: uniform and oracle stubs bound the refined accuracy") {
  const int C = 6;
  const auto test = test_set(48, C);
  const stub::Classifier conv(C, [&](const Image& img) { return fake_base(img, C); });
  const stub::Classifier uni(C, [&](const Image&) { return stub::uniform(C); });
  const MetricsReport u = evaluate(test, conv, centre, uni, RefinementConfig{});
  CHECK(u.refined_top1 == u.baseline_top1);
  CHECK(u.baseline_top1 == doctest::Approx(0.25));
  CHECK(u.baseline_topk == doctest::Approx(0.75));

  int truth = -1;
  Scripted s;
  const stub::Classifier oracle(C, [&](const Image&) {
    return s.current == truth ? stub::one_hot(C, truth) : stub::uniform(C);
  });
  std::vector<RefinementTrace> traces;
  int refined = 0, in_topk = 0;
  for (const auto& ex : test) {
    truth = ex.label;
    const RefinementTrace t = refine(ex.image, conv, s.grounder, oracle, RefinementConfig{});
    refined += t.chosen == ex.label;
    in_topk += std::find(t.candidates.begin(), t.candidates.end(), ex.label) != t.candidates.end();
    CHECK(std::find(t.candidates.begin(), t.candidates.end(), t.chosen) != t.candidates.end());
  }
  CHECK(refined == in_topk);
  CHECK_THROWS_AS(evaluate(std::span<const LabeledImage>(), conv, centre, uni, RefinementConfig{}), ArgumentError);
}

TEST_CASE("report json carries the documented keys") {
  const auto test = test_set(8, 4);
  const stub::Classifier conv(4, [&](const Image& img) { return fake_base(img, 4); });
  const stub::Classifier uni(4, [&](const Image&) { return stub::uniform(4); });
  MetricsReport r = evaluate(test, conv, centre, uni, RefinementConfig{});
  r.provenance["model_hash"] = "abc";
  const std::string j = to_json(r);
  for (const char* key : {"\"baseline_top1\"", "\"baseline_topk\"", "\"refined_top1\"", "\"k\"", "\"L\"",
                          "\"weights\"", "\"changed\"", "\"improved\"", "\"harmed\"", "\"neutral\"",
                          "\"per_class\"", "\"model_hash\""}) {
    CHECK(j.find(key) != std::string::npos);
  }
}
