#include "gz/refinement.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "gz/parallel.hpp"

namespace gz {

RefinementConfig RefinementConfig::from_weights(int k, std::span<const double> weights,
                                                EvidenceGeometry geometry) {
  if (weights.size() < 2) {
    throw ConfigError("refinement weights need at least w and w_0, got " + std::to_string(weights.size()));
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("refinement weights must be finite and >= 0");
    sum += w;
  }
  if (!(sum > 0.0)) throw ConfigError("refinement weights sum to zero");
  if (std::abs(sum - 1.0) <= 1e-9) sum = 1.0;  // already normalized: keep the values as given
  RefinementConfig c;
  c.k = k;
  c.levels = static_cast<int>(weights.size()) - 2;
  c.base_weight = weights[0] / sum;
  c.level_weights.clear();
  for (std::size_t i = 1; i < weights.size(); ++i) c.level_weights.push_back(weights[i] / sum);
  c.geometry = geometry;
  return c;
}

void RefinementConfig::validate(int classes) const {
  if (k < 1 || k > classes) {
    throw ConfigError("refinement: k=" + std::to_string(k) + " outside [1, " + std::to_string(classes) + "]");
  }
  if (levels < 0) throw ConfigError("refinement: L must be >= 0");
  if (level_weights.size() != static_cast<std::size_t>(levels + 1)) {
    throw ConfigError("refinement: " + std::to_string(level_weights.size()) + " level weights for L=" +
                      std::to_string(levels) + " (need L+1)");
  }
  double sum = base_weight;
  if (!(base_weight >= 0.0)) throw ConfigError("refinement: weights must be >= 0");
  for (std::size_t l = 0; l < level_weights.size(); ++l) {
    if (!(level_weights[l] >= 0.0)) throw ConfigError("refinement: weights must be >= 0");
    if (l > 0 && level_weights[l] > level_weights[l - 1]) {
      throw ConfigError("refinement: level weights must be non-increasing");
    }
    sum += level_weights[l];
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("refinement: weights sum to " + std::to_string(sum) + ", expected 1");
  }
  if (geometry.patch_size < 1 || geometry.erase_size < 1 || geometry.erase_size > geometry.patch_size) {
    throw ConfigError("refinement: invalid patch/erase geometry");
  }
}

RefinementTrace refine(const Image& image, const Prediction& base, const Grounder& grounder,
                       const Classifier& evidence, const RefinementConfig& cfg) {
  cfg.validate(base.classes());
  RefinementTrace tr;
  tr.base = base;
  tr.candidates = topk(base, cfg.k);
  tr.tot.resize(base.probs.size());
  for (std::size_t c = 0; c < tr.tot.size(); ++c) tr.tot[c] = cfg.base_weight * base.probs[c];

  for (int t : tr.candidates) {
    CandidateTrace ct;
    ct.class_id = t;
    Image current = image;
    for (int l = 0; l <= cfg.levels; ++l) {
      if (l > 0) current = erase(current, ct.levels.back().center, cfg.geometry.erase_size);
      const auto pk = peak(grounder.ground(current, t));
      if (!pk) {
        ct.stopped_degenerate = true;
        break;
      }
      LevelEvidence le;
      le.level = l;
      le.center = *pk;
      le.evidence = evidence.classify(extract_patch(current, *pk, cfg.geometry.patch_size));
      if (le.evidence.classes() != base.classes()) {
        throw ArgumentError("refine: evidence model class count differs from the conventional model");
      }
      le.contribution = cfg.level_weights[static_cast<std::size_t>(l)] * le.evidence[t];
      tr.tot[static_cast<std::size_t>(t)] += le.contribution;
      ct.levels.push_back(std::move(le));
    }
    tr.per_candidate.push_back(std::move(ct));
  }

  tr.chosen = tr.candidates.front();
  for (int t : tr.candidates) {
    if (tr.tot[static_cast<std::size_t>(t)] > tr.tot[static_cast<std::size_t>(tr.chosen)]) tr.chosen = t;
  }
  return tr;
}

RefinementTrace refine(const Image& image, const Classifier& conventional, const Grounder& grounder,
                       const Classifier& evidence, const RefinementConfig& cfg) {
  return refine(image, conventional.classify(image), grounder, evidence, cfg);
}

MetricsReport evaluate(std::span<const LabeledImage> test, const Classifier& conventional,
                       const Grounder& grounder, const Classifier& evidence, const RefinementConfig& cfg,
                       std::vector<RefinementTrace>* traces) {
  if (test.empty()) throw ArgumentError("evaluate: test set is empty");
  const int C = conventional.classes();
  cfg.validate(C);
  std::vector<Image> images;
  images.reserve(test.size());
  for (const auto& ex : test) images.push_back(ex.image);
  const std::vector<Prediction> base = conventional.classify_batch(images);

  std::vector<RefinementTrace> all(test.size());
  parallel_for(test.size(), [&](std::size_t i) { all[i] = refine(test[i].image, base[i], grounder, evidence, cfg); });

  MetricsReport r;
  r.images = static_cast<int>(test.size());
  r.k = cfg.k;
  r.levels = cfg.levels;
  r.base_weight = cfg.base_weight;
  r.level_weights = cfg.level_weights;
  r.per_class.resize(static_cast<std::size_t>(C));
  int b1 = 0, bk = 0, r1 = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int y = test[i].label;
    if (y < 0 || y >= C) throw ArgumentError("evaluate: label out of range");
    const RefinementTrace& t = all[i];
    const bool base_ok = t.candidates.front() == y;
    const bool in_topk = std::find(t.candidates.begin(), t.candidates.end(), y) != t.candidates.end();
    const bool ref_ok = t.chosen == y;
    b1 += base_ok;
    bk += in_topk;
    r1 += ref_ok;
    if (t.chosen != t.candidates.front()) {
      if (ref_ok) ++r.improved;
      else if (base_ok) ++r.harmed;
      else ++r.neutral;
    }
    auto& pc = r.per_class[static_cast<std::size_t>(y)];
    pc.count += 1;
    pc.baseline_top1 += base_ok;
    pc.refined_top1 += ref_ok;
  }
  const double n = static_cast<double>(test.size());
  r.baseline_top1 = b1 / n;
  r.baseline_topk = bk / n;
  r.refined_top1 = r1 / n;
  for (int c = 0; c < C; ++c) {
    auto& pc = r.per_class[static_cast<std::size_t>(c)];
    pc.class_id = c;
    if (pc.count > 0) {
      pc.baseline_top1 /= pc.count;
      pc.refined_top1 /= pc.count;
    }
  }
  if (traces) *traces = std::move(all);
  return r;
}

std::string to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["images"] = r.images;
  j["baseline_top1"] = r.baseline_top1;
  j["baseline_topk"] = r.baseline_topk;
  j["refined_top1"] = r.refined_top1;
  j["k"] = r.k;
  j["L"] = r.levels;
  nlohmann::json w = nlohmann::json::array();
  w.push_back(r.base_weight);
  for (double v : r.level_weights) w.push_back(v);
  j["weights"] = w;
  j["changed"] = {{"improved", r.improved}, {"harmed", r.harmed}, {"neutral", r.neutral}};
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    pc.push_back({{"class", c.class_id},
                  {"count", c.count},
                  {"baseline_top1", c.baseline_top1},
                  {"refined_top1", c.refined_top1}});
  }
  j["per_class"] = pc;
  if (!r.provenance.empty()) j["provenance"] = r.provenance;
  return j.dump(2);
}

}  // namespace gz
