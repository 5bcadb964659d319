#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gz/grounding.hpp"
#include "gz/image.hpp"
#include "gz/model.hpp"

namespace gz {

struct EvidencePatch {
  Image pixels;
  int label = 0;
  int source_id = 0;
  int level = 0;
  GroundingMethod method = GroundingMethod::ContrastiveEB;
  Peak center;  // saliency peak the patch was cut around
};

/// Patch/erase geometry shared by pool building and refinement.
struct EvidenceGeometry {
  int patch_size = 21;
  int erase_size = 12;
};

struct PoolManifest {
  std::string checkpoint_hash;
  int classes = 0;  // class count of the model that built the pool
  int levels = 0;   // L
  EvidenceGeometry geometry;
  std::vector<GroundingMethod> methods;
  std::string grounding_echo;  // free-form config echo
};

struct EvidencePool {
  std::vector<EvidencePatch> patches;
  PoolManifest manifest;
};

/// Reports per-image outcomes while a pool is built.
struct PoolBuildStats {
  int images = 0;
  int misclassified = 0;
  int degenerate = 0;        // level-0 saliency had no evidence
  int stopped_by_erase = 0;  // an erase broke the classification before level L
};

// For each correctly classified image: patch e_0 at the ground-truth class
// peak; then for l = 1..L erase the previous peak, re-classify, and add e_l
// only while the image is still correct. The first failure ends the image.
// Patches are appended in source order.
EvidencePool build_pool(std::span<const LabeledImage> train, const Classifier& classifier,
                        const Grounder& grounder, const EvidenceGeometry& geometry, int levels,
                        PoolBuildStats* stats = nullptr);

/// Multiset union of one L=0 pool per grounder.
EvidencePool build_ensemble_pool(std::span<const LabeledImage> train, const Classifier& classifier,
                                 std::span<const Grounder* const> grounders,
                                 const EvidenceGeometry& geometry, PoolBuildStats* stats = nullptr);

/// Trains a classifier on the (resized) pool patches with their inherited labels.
TrainResult train_evidence_cnn(const EvidencePool& pool, const ModelSpec& spec, const TrainConfig& cfg,
                               const EpochCallback& on_epoch = {});

/// Structural checks: size bound, gap-free level sequences, label inheritance,
/// and pixel re-derivation from the source images and recorded peaks. With a
/// classifier, also that every source image is classified correctly.
/// Returns one message per violation; empty when all hold.
std::vector<std::string> check_pool(const EvidencePool& pool, std::span<const LabeledImage> train,
                                    const Classifier* classifier = nullptr);

/// Binary container plus a JSON sidecar (`path` + ".json") holding the
/// manifest and per-patch peaks.
void save_pool(const EvidencePool& pool, const std::filesystem::path& path);
EvidencePool load_pool(const std::filesystem::path& path);

}  // namespace gz
