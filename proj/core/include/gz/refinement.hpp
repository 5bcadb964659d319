#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "gz/evidence_pool.hpp"
#include "gz/grounding.hpp"
#include "gz/model.hpp"

namespace gz {

struct RefinementConfig {
  int k = 3;
  int levels = 2;  // L
  double base_weight = 0.4;                         // w
  std::vector<double> level_weights{0.3, 0.2, 0.1};  // w_0..w_L
  EvidenceGeometry geometry;

  /// Builds a config from "w,w_0,..,w_L", normalized to sum 1; L = count - 2.
  static RefinementConfig from_weights(int k, std::span<const double> weights,
                                       EvidenceGeometry geometry = {});

  /// k in [1, classes], one weight per level, weights >= 0 summing to 1
  /// (within 1e-9) and non-increasing over levels.
  void validate(int classes) const;
};

struct LevelEvidence {
  int level = 0;
  Peak center;
  Prediction evidence;  // Evidence CNN output on the patch
  double contribution = 0.0;
};

struct CandidateTrace {
  int class_id = 0;
  std::vector<LevelEvidence> levels;
  bool stopped_degenerate = false;  // grounding found no evidence at levels.size()
};

struct RefinementTrace {
  Prediction base;              // conventional CNN output
  std::vector<int> candidates;  // top-k, best first
  std::vector<double> tot;      // aggregate per class
  std::vector<CandidateTrace> per_candidate;
  int chosen = 0;
};

// tot = w * base; for each candidate t and level l, ground t on a per-candidate
// copy of the image (erasing earlier peaks), score the patch with the Evidence
// CNN and add w_l * evidence[t]. Returns the argmax of tot over the
// candidates; ties favour the higher-ranked candidate. A degenerate saliency
// map ends that candidate's levels.
RefinementTrace refine(const Image& image, const Classifier& conventional, const Grounder& grounder,
                       const Classifier& evidence, const RefinementConfig& cfg);

/// Same, with the conventional prediction already computed.
RefinementTrace refine(const Image& image, const Prediction& base, const Grounder& grounder,
                       const Classifier& evidence, const RefinementConfig& cfg);

struct ClassMetrics {
  int class_id = 0;
  int count = 0;
  double baseline_top1 = 0.0;
  double refined_top1 = 0.0;
};

struct MetricsReport {
  int images = 0;
  double baseline_top1 = 0.0;
  double baseline_topk = 0.0;
  double refined_top1 = 0.0;
  int k = 0;
  int levels = 0;
  double base_weight = 0.0;
  std::vector<double> level_weights;
  int improved = 0;  // wrong -> right
  int harmed = 0;    // right -> wrong
  int neutral = 0;   // changed decision, wrong either way
  std::vector<ClassMetrics> per_class;
  std::map<std::string, std::string> provenance;
};

MetricsReport evaluate(std::span<const LabeledImage> test, const Classifier& conventional,
                       const Grounder& grounder, const Classifier& evidence, const RefinementConfig& cfg,
                       std::vector<RefinementTrace>* traces = nullptr);

std::string to_json(const MetricsReport& report);

}  // namespace gz
