#include "gz/evidence_pool.hpp"

#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "gz/parallel.hpp"

namespace gz {
namespace {

struct ImageEvidence {
  std::vector<EvidencePatch> patches;
  bool misclassified = false;
  bool degenerate = false;
  bool stopped = false;
};

ImageEvidence ground_image(const LabeledImage& ex, int source_id, bool correct, const Classifier& classifier,
                           const Grounder& grounder, const EvidenceGeometry& geo, int levels) {
  ImageEvidence r;
  if (!correct) {
    r.misclassified = true;
    return r;
  }
  Image current = ex.image;
  for (int l = 0; l <= levels; ++l) {
    if (l > 0) {
      current = erase(current, r.patches.back().center, geo.erase_size);
      if (classifier.classify(current).argmax() != ex.label) {
        r.stopped = true;
        break;
      }
    }
    const auto pk = peak(grounder.ground(current, ex.label));
    if (!pk) {
      r.degenerate = l == 0;
      r.stopped = l > 0;
      break;
    }
    EvidencePatch p;
    p.pixels = extract_patch(current, *pk, geo.patch_size);
    p.label = ex.label;
    p.source_id = source_id;
    p.level = l;
    p.method = grounder.method();
    p.center = *pk;
    r.patches.push_back(std::move(p));
  }
  return r;
}

}  // namespace

EvidencePool build_pool(std::span<const LabeledImage> train, const Classifier& classifier,
                        const Grounder& grounder, const EvidenceGeometry& geometry, int levels,
                        PoolBuildStats* stats) {
  if (levels < 0) throw ArgumentError("build_pool: L must be non-negative");
  std::vector<Image> images;
  images.reserve(train.size());
  for (const auto& ex : train) images.push_back(ex.image);
  const std::vector<Prediction> preds = classifier.classify_batch(images);

  std::vector<ImageEvidence> per_image(train.size());
  parallel_for(train.size(), [&](std::size_t i) {
    per_image[i] = ground_image(train[i], static_cast<int>(i), preds[i].argmax() == train[i].label,
                                classifier, grounder, geometry, levels);
  });

  EvidencePool pool;
  pool.manifest.classes = classifier.classes();
  pool.manifest.levels = levels;
  pool.manifest.geometry = geometry;
  pool.manifest.methods = {grounder.method()};
  PoolBuildStats s;
  s.images = static_cast<int>(train.size());
  for (auto& r : per_image) {
    s.misclassified += r.misclassified;
    s.degenerate += r.degenerate;
    s.stopped_by_erase += r.stopped;
    for (auto& p : r.patches) pool.patches.push_back(std::move(p));
  }
  if (stats) *stats = s;
  return pool;
}

EvidencePool build_ensemble_pool(std::span<const LabeledImage> train, const Classifier& classifier,
                                 std::span<const Grounder* const> grounders,
                                 const EvidenceGeometry& geometry, PoolBuildStats* stats) {
  if (grounders.empty()) throw ArgumentError("build_ensemble_pool: no grounding methods");
  EvidencePool pool;
  pool.manifest.classes = classifier.classes();
  pool.manifest.levels = 0;
  pool.manifest.geometry = geometry;
  PoolBuildStats total;
  for (const Grounder* g : grounders) {
    PoolBuildStats s;
    EvidencePool part = build_pool(train, classifier, *g, geometry, 0, &s);
    pool.manifest.methods.push_back(g->method());
    for (auto& p : part.patches) pool.patches.push_back(std::move(p));
    total.images = s.images;
    total.misclassified = s.misclassified;
    total.degenerate += s.degenerate;
  }
  if (stats) *stats = total;
  return pool;
}

TrainResult train_evidence_cnn(const EvidencePool& pool, const ModelSpec& spec, const TrainConfig& cfg,
                               const EpochCallback& on_epoch) {
  if (pool.patches.empty()) throw ConfigError("train_evidence_cnn: evidence pool is empty");
  std::vector<LabeledImage> data;
  data.reserve(pool.patches.size());
  for (const auto& p : pool.patches) {
    if (p.label < 0 || p.label >= spec.classes) {
      throw ConfigError("train_evidence_cnn: patch label " + std::to_string(p.label) +
                        " outside the model's class range");
    }
    data.push_back({resize_bilinear(p.pixels, spec.input_size, spec.input_size), p.label, std::nullopt});
  }
  return train(data, spec, cfg, on_epoch);
}

std::vector<std::string> check_pool(const EvidencePool& pool, std::span<const LabeledImage> train,
                                    const Classifier* classifier) {
  std::vector<std::string> issues;
  const auto& m = pool.manifest;
  const std::size_t methods = std::max<std::size_t>(m.methods.size(), 1);
  const std::size_t bound = train.size() * static_cast<std::size_t>(m.levels + 1) * methods;
  if (pool.patches.size() > bound) {
    issues.push_back("pool has " + std::to_string(pool.patches.size()) + " patches, bound is " +
                     std::to_string(bound));
  }
  std::map<std::pair<int, int>, std::vector<const EvidencePatch*>> chains;
  for (std::size_t i = 0; i < pool.patches.size(); ++i) {
    const EvidencePatch& p = pool.patches[i];
    const std::string tag = "patch " + std::to_string(i) + ": ";
    if (p.source_id < 0 || static_cast<std::size_t>(p.source_id) >= train.size()) {
      issues.push_back(tag + "source id " + std::to_string(p.source_id) + " out of range");
      continue;
    }
    if (p.level < 0 || p.level > m.levels) {
      issues.push_back(tag + "level " + std::to_string(p.level) + " exceeds L=" + std::to_string(m.levels));
    }
    if (p.label != train[static_cast<std::size_t>(p.source_id)].label) {
      issues.push_back(tag + "label " + std::to_string(p.label) + " differs from source label");
    }
    if (p.pixels.height != m.geometry.patch_size || p.pixels.width != m.geometry.patch_size) {
      issues.push_back(tag + "side does not match the manifest patch size");
    }
    chains[{p.source_id, static_cast<int>(p.method)}].push_back(&p);
  }
  std::set<int> sources;
  for (auto& [key, chain] : chains) {
    sources.insert(key.first);
    const LabeledImage& src = train[static_cast<std::size_t>(key.first)];
    std::sort(chain.begin(), chain.end(),
              [](const EvidencePatch* a, const EvidencePatch* b) { return a->level < b->level; });
    Image current = src.image;
    for (std::size_t l = 0; l < chain.size(); ++l) {
      const EvidencePatch& p = *chain[l];
      const std::string tag = "source " + std::to_string(key.first) + " (" +
                              method_name(static_cast<GroundingMethod>(key.second)) + ") ";
      if (p.level != static_cast<int>(l)) {
        issues.push_back(tag + "level sequence has a gap or duplicate at level " + std::to_string(p.level));
        break;
      }
      if (l > 0) current = erase(current, chain[l - 1]->center, m.geometry.erase_size);
      if (!(extract_patch(current, p.center, m.geometry.patch_size) == p.pixels)) {
        issues.push_back(tag + "level " + std::to_string(l) + " pixels do not re-derive from the source");
      }
    }
  }
  if (classifier) {
    for (int s : sources) {
      const LabeledImage& src = train[static_cast<std::size_t>(s)];
      if (classifier->classify(src.image).argmax() != src.label) {
        issues.push_back("source " + std::to_string(s) + " is misclassified but contributed evidence");
      }
    }
  }
  return issues;
}

void save_pool(const EvidencePool& pool, const std::filesystem::path& path) {
  detail::LeWriter w(path.string());
  w.bytes("GZPL", 4);
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pool.patches.size()));
  nlohmann::json peaks = nlohmann::json::array();
  for (const auto& p : pool.patches) {
    if (p.pixels.height != p.pixels.width) throw ArgumentError("save_pool: patches must be square");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.source_id));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.level));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.method));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.label));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.pixels.height));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.pixels.channels));
    w.bytes(p.pixels.pixels.data(), p.pixels.pixels.size());
    peaks.push_back({p.center.row, p.center.col});
  }
  w.close();

  const auto& m = pool.manifest;
  nlohmann::json j;
  j["format"] = "GZPL";
  j["version"] = 1;
  j["patch_count"] = pool.patches.size();
  j["checkpoint_hash"] = m.checkpoint_hash;
  j["classes"] = m.classes;
  j["L"] = m.levels;
  j["patch_size"] = m.geometry.patch_size;
  j["erase_size"] = m.geometry.erase_size;
  nlohmann::json methods = nlohmann::json::array();
  for (auto mm : m.methods) methods.push_back(method_name(mm));
  j["methods"] = methods;
  j["grounding"] = m.grounding_echo;
  j["peaks"] = peaks;
  std::ofstream js(path.string() + ".json");
  if (!js) throw IoError(path.string() + ".json", "cannot write pool manifest");
  js << j.dump(1) << '\n';
}

EvidencePool load_pool(const std::filesystem::path& path) {
  detail::LeReader r(path.string());
  r.magic("GZPL");
  r.version(1);
  const auto count = r.get<std::uint32_t>("patch count");
  EvidencePool pool;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string what = "patch " + std::to_string(i);
    EvidencePatch p;
    p.source_id = static_cast<int>(r.get<std::uint32_t>(what));
    p.level = r.get<std::uint8_t>(what);
    const auto method = r.get<std::uint8_t>(what);
    if (method > static_cast<std::uint8_t>(GroundingMethod::Rise)) {
      throw FormatError(FormatError::Kind::Malformed, what + ": unknown grounding method tag");
    }
    p.method = static_cast<GroundingMethod>(method);
    p.label = r.get<std::uint16_t>(what);
    const int side = r.get<std::uint16_t>(what);
    const int channels = r.get<std::uint8_t>(what);
    p.pixels = Image(channels, side, side);
    r.bytes(p.pixels.pixels.data(), p.pixels.pixels.size(), what + " pixels");
    pool.patches.push_back(std::move(p));
  }

  const std::filesystem::path side = path.string() + ".json";
  std::ifstream js(side);
  if (js) {
    nlohmann::json j;
    try {
      js >> j;
      auto& m = pool.manifest;
      m.checkpoint_hash = j.value("checkpoint_hash", "");
      m.classes = j.value("classes", 0);
      m.levels = j.value("L", 0);
      m.geometry.patch_size = j.value("patch_size", 21);
      m.geometry.erase_size = j.value("erase_size", 12);
      for (const auto& name : j.value("methods", nlohmann::json::array())) {
        const auto mm = parse_method(name.get<std::string>());
        if (!mm) throw FormatError(FormatError::Kind::Malformed, "unknown method in " + side.string());
        m.methods.push_back(*mm);
      }
      m.grounding_echo = j.value("grounding", "");
      const auto& peaks = j.at("peaks");
      if (peaks.size() != pool.patches.size()) {
        throw FormatError(FormatError::Kind::Malformed, "peak list does not match patch count in " +
                                                            side.string());
      }
      for (std::size_t i = 0; i < peaks.size(); ++i) {
        pool.patches[i].center = {peaks[i].at(0).get<int>(), peaks[i].at(1).get<int>()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatError::Kind::Malformed, "bad pool manifest " + side.string() + ": " + e.what());
    }
  }
  return pool;
}

}  // namespace gz
