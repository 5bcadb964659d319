#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gz/error.hpp"
#include "gz/evidence_pool.hpp"
#include "gz/grounding.hpp"
#include "gz/model.hpp"
#include "gz/parallel.hpp"
#include "gz/random.hpp"
#include "gz/refinement.hpp"
#include "gz/synthetic.hpp"
#include "gz/viz.hpp"

namespace gz::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

ConfigFile ConfigFile::parse(std::istream& in, const std::string& origin) {
  ConfigFile cfg;
  std::string section, line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    const std::string text = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (text.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (text.front() == '[') {
      if (text.back() != ']' || text.size() < 3) throw ConfigError(where + ": malformed section header");
      section = trim(std::string_view(text).substr(1, text.size() - 2));
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(std::string_view(text).substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    cfg.values_[section.empty() ? key : section + "." + key] = trim(std::string_view(text).substr(eq + 1));
  }
  return cfg;
}

ConfigFile ConfigFile::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open config file");
  return parse(in, path.string());
}

std::optional<std::string> ConfigFile::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

namespace {

template <typename T>
T convert(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else {
    T v{};
    const auto* end = text.data() + text.size();
    const auto r = std::from_chars(text.data(), end, v);
    if (r.ec != std::errc{} || r.ptr != end) throw ConfigError("bad value '" + text + "' for " + key);
    return v;
  }
}

std::vector<double> parse_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(convert<double>(key, trim(item)));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

// Config file values under "section.key", overridden by flags that were given.
class Settings {
 public:
  explicit Settings(ConfigFile file) : file_(std::move(file)) {}

  template <typename T>
  T get(const std::string& key, const std::optional<T>& flag, T fallback) {
    T v = fallback;
    if (flag) {
      v = *flag;
    } else if (auto s = file_.get(key)) {
      v = convert<T>(key, *s);
    }
    echo_[key] = v;
    return v;
  }

  template <typename T>
  std::optional<T> find(const std::string& key, const std::optional<T>& flag) {
    if (flag) return flag;
    if (auto s = file_.get(key)) return convert<T>(key, *s);
    return std::nullopt;
  }

  void echo(const std::string& key, json v) { echo_[key] = std::move(v); }
  const json& echo() const noexcept { return echo_; }

 private:
  ConfigFile file_;
  json echo_ = json::object();
};

// Options shared by every subcommand.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

struct TrainFlags {
  std::optional<long> iterations;
  std::optional<double> lr;
  std::optional<double> momentum;
  std::optional<int> batch;
  std::optional<long> decay_interval;
  std::optional<double> decay_factor;
  std::optional<int> crop_pad;
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--iterations", f.iterations, "SGD iterations");
  sub->add_option("--lr", f.lr, "initial learning rate");
  sub->add_option("--momentum", f.momentum, "momentum");
  sub->add_option("--batch", f.batch, "batch size");
  sub->add_option("--decay-interval", f.decay_interval, "iterations between learning-rate decays");
  sub->add_option("--decay-factor", f.decay_factor, "learning-rate decay factor");
  sub->add_option("--crop-pad", f.crop_pad, "random-crop padding in pixels");
}

TrainConfig train_config(Settings& s, const std::string& section, const TrainFlags& f, std::uint64_t seed) {
  TrainConfig c;
  c.iterations = s.get(section + ".iterations", f.iterations, c.iterations);
  c.lr = s.get(section + ".lr", f.lr, c.lr);
  c.momentum = s.get(section + ".momentum", f.momentum, c.momentum);
  c.batch = s.get(section + ".batch", f.batch, c.batch);
  c.decay_interval = s.get(section + ".decay_interval", f.decay_interval, c.decay_interval);
  c.decay_factor = s.get(section + ".decay_factor", f.decay_factor, c.decay_factor);
  c.crop_pad = s.get(section + ".crop_pad", f.crop_pad, c.crop_pad);
  c.seed = seed;
  c.validate();
  return c;
}

struct GroundingFlags {
  std::optional<std::string> method;
  std::optional<std::string> layer;
  std::optional<int> patch_size;
  std::optional<int> erase_size;
  std::optional<int> rise_masks;
  std::optional<int> rise_grid;
  std::optional<double> rise_keep;
};

void add_grounding_flags(CLI::App* sub, GroundingFlags& f, const std::string& methods) {
  sub->add_option("--method", f.method, "grounding method: " + methods);
  sub->add_option("--layer", f.layer, "grounding layer name");
  sub->add_option("--patch-size", f.patch_size, "evidence patch side in pixels");
  sub->add_option("--erase-size", f.erase_size, "erase square side in pixels");
  sub->add_option("--rise-masks", f.rise_masks, "RISE mask count");
  sub->add_option("--rise-grid", f.rise_grid, "RISE cell grid");
  sub->add_option("--rise-keep", f.rise_keep, "RISE keep probability");
}

GroundingMethod method_of(const std::string& name) {
  const auto m = parse_method(name);
  if (!m) throw ConfigError("unknown grounding method '" + name + "' (ceb, eb, gradcam, rise)");
  return *m;
}

GroundingConfig grounding_config(Settings& s, const GroundingFlags& f, const std::string& method,
                                 std::uint64_t seed) {
  GroundingConfig g;
  if (method != "ensemble") g.method = method_of(method);
  g.layer = s.get("grounding.layer", f.layer, g.layer);
  g.patch_size = s.get("grounding.patch_size", f.patch_size, g.patch_size);
  g.erase_size = s.get("grounding.erase_size", f.erase_size, g.erase_size);
  g.rise.masks = s.get("grounding.rise_masks", f.rise_masks, g.rise.masks);
  g.rise.grid = s.get("grounding.rise_grid", f.rise_grid, g.rise.grid);
  g.rise.keep_prob = s.get("grounding.rise_keep", f.rise_keep, g.rise.keep_prob);
  g.rise.seed = derive_seed(seed, "rise");
  g.rise.validate();
  return g;
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw IoError(p.string(), "not found");
}

void require_dataset(const fs::path& dir) {
  require_file(dir / "train.gzds");
  require_file(dir / "test.gzds");
}

std::string dataset_hash(const fs::path& dir) {
  return file_hash(dir / "train.gzds") + ":" + file_hash(dir / "test.gzds");
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(path.string(), "cannot write");
  out << j.dump(2) << '\n';
  if (!out) throw IoError(path.string(), "write failed");
}

json epochs_json(const std::vector<EpochStats>& epochs) {
  json a = json::array();
  for (const auto& e : epochs) {
    a.push_back({{"iteration", e.last_iteration}, {"loss", e.mean_loss}, {"accuracy", e.accuracy}, {"lr", e.lr}});
  }
  return a;
}

std::uint64_t root_seed(Settings& s, const Common& c) { return s.get<std::uint64_t>("run.seed", c.seed, 1); }

// ---- subcommands ----

struct GenData {
  std::optional<std::string> spec;
  std::string out;
};

int gen_data(Settings& s, const Common& c, const GenData& a, std::ostream& out) {
  SyntheticSpec spec;
  if (auto path = s.find<std::string>("data.spec", a.spec)) {
    require_file(*path);
    std::ifstream in(*path);
    std::stringstream ss;
    ss << in.rdbuf();
    spec = SyntheticSpec::from_json(ss.str());
  }
  if (auto seed = s.find<std::uint64_t>("run.seed", c.seed)) spec.seed = derive_seed(*seed, "gen-data");
  spec.validate();
  const Dataset d = generate(spec);
  fs::create_directories(a.out);
  save_dataset(a.out, d, spec);
  out << "train " << d.train.size() << " test " << d.test.size() << " classes " << d.classes << " -> "
      << a.out << '\n';
  return kOk;
}

struct Train {
  std::string data, out;
  TrainFlags flags;
};

int train_cmd(Settings& s, const Common& c, const Train& a, std::ostream& out) {
  require_dataset(a.data);
  const std::uint64_t root = root_seed(s, c);
  const TrainConfig cfg = train_config(s, "train", a.flags, derive_seed(root, "train"));
  const Dataset d = load_dataset(a.data);
  if (d.train.empty()) throw ConfigError("training split of " + a.data + " is empty");
  ModelSpec spec = ModelSpec::conventional(d.classes);
  spec.input_size = d.train.front().image.height;
  TrainResult r = train(d.train, spec, cfg);
  save_checkpoint(r.model, a.out);
  const double acc = d.test.empty() ? 0.0 : accuracy(r.model, d.test);
  json j;
  j["checkpoint"] = a.out;
  j["checkpoint_hash"] = file_hash(a.out);
  j["dataset_hash"] = dataset_hash(a.data);
  j["architecture"] = spec.descriptor();
  j["config"] = s.echo();
  j["test_accuracy"] = acc;
  j["epochs"] = epochs_json(r.epochs);
  write_json(a.out + ".trace.json", j);
  out << "trained " << cfg.iterations << " iterations, test top-1 " << acc << " -> " << a.out << '\n';
  return kOk;
}

struct BuildPool {
  std::string data, model, out;
  std::optional<int> levels;
  GroundingFlags flags;
};

int build_pool_cmd(Settings& s, const Common& c, const BuildPool& a, std::ostream& out) {
  require_dataset(a.data);
  require_file(a.model);
  const std::uint64_t root = root_seed(s, c);
  const std::string method = s.get<std::string>("grounding.method", a.flags.method, "ceb");
  const int levels = s.get("grounding.L", a.levels, method == "ensemble" ? 0 : 2);
  if (levels < 0) throw ConfigError("L must be >= 0");
  if (method == "ensemble" && levels != 0) throw ConfigError("the ensemble pool is built at L=0");
  const GroundingConfig g = grounding_config(s, a.flags, method, root);
  const Model model = load_checkpoint(a.model);
  g.validate(model.spec().input_size, model.spec().input_size);
  const Dataset d = load_dataset(a.data);
  const ModelClassifier classifier(model);
  const EvidenceGeometry geo{g.patch_size, g.erase_size};

  PoolBuildStats stats;
  EvidencePool pool;
  if (method == "ensemble") {
    std::vector<std::unique_ptr<ModelGrounder>> owned;
    std::vector<const Grounder*> gs;
    for (auto m : {GroundingMethod::ContrastiveEB, GroundingMethod::GradCam, GroundingMethod::Rise}) {
      GroundingConfig gm = g;
      gm.method = m;
      owned.push_back(std::make_unique<ModelGrounder>(model, gm));
      gs.push_back(owned.back().get());
    }
    pool = build_ensemble_pool(d.train, classifier, gs, geo, &stats);
  } else {
    const ModelGrounder grounder(model, g);
    pool = build_pool(d.train, classifier, grounder, geo, levels, &stats);
  }
  pool.manifest.checkpoint_hash = file_hash(a.model);
  json echo = s.echo();
  echo["dataset_hash"] = dataset_hash(a.data);
  pool.manifest.grounding_echo = echo.dump();
  save_pool(pool, a.out);
  out << "pool " << pool.patches.size() << " patches from " << stats.images << " images (misclassified "
      << stats.misclassified << ", degenerate " << stats.degenerate << ", stopped by erase "
      << stats.stopped_by_erase << ") -> " << a.out << '\n';
  return kOk;
}

struct TrainEvidence {
  std::string pool, out;
  std::optional<int> classes;
  TrainFlags flags;
};

int train_evidence_cmd(Settings& s, const Common& c, const TrainEvidence& a, std::ostream& out) {
  require_file(a.pool);
  const std::uint64_t root = root_seed(s, c);
  const TrainConfig cfg = train_config(s, "evidence", a.flags, derive_seed(root, "train-evidence"));
  const EvidencePool pool = load_pool(a.pool);
  const int classes = s.get("evidence.classes", a.classes, pool.manifest.classes);
  if (classes < 2) throw ConfigError("class count unknown: pass --classes");
  const ModelSpec spec = ModelSpec::evidence(classes);
  TrainResult r = train_evidence_cnn(pool, spec, cfg);
  save_checkpoint(r.model, a.out);
  json j;
  j["checkpoint"] = a.out;
  j["checkpoint_hash"] = file_hash(a.out);
  j["pool_hash"] = file_hash(a.pool);
  j["pool_patches"] = pool.patches.size();
  j["architecture"] = spec.descriptor();
  j["config"] = s.echo();
  j["epochs"] = epochs_json(r.epochs);
  write_json(a.out + ".trace.json", j);
  out << "trained evidence CNN on " << pool.patches.size() << " patches -> " << a.out << '\n';
  return kOk;
}

struct Refine {
  std::string data, model, evidence;
  std::optional<std::string> out;
  std::optional<int> k;
  std::optional<int> levels;
  std::optional<std::string> weights;
  GroundingFlags flags;
};

RefinementConfig refinement_config(Settings& s, const Refine& a, const GroundingConfig& g) {
  const int k = s.get("refine.k", a.k, 3);
  const auto levels = s.find<int>("refine.L", a.levels);
  const auto weights = s.find<std::string>("refine.weights", a.weights);
  const EvidenceGeometry geo{g.patch_size, g.erase_size};
  RefinementConfig r;
  if (weights) {
    const auto w = parse_list("refine.weights", *weights);
    if (levels && static_cast<int>(w.size()) != *levels + 2) {
      throw ConfigError("L=" + std::to_string(*levels) + " needs " + std::to_string(*levels + 2) +
                        " weights (w, w_0..w_L), got " + std::to_string(w.size()));
    }
    r = RefinementConfig::from_weights(k, w, geo);
  } else {
    if (levels && *levels != r.levels) {
      throw ConfigError("L=" + std::to_string(*levels) + " requires explicit --weights");
    }
    r.k = k;
    r.geometry = geo;
  }
  json w = json::array({r.base_weight});
  for (double v : r.level_weights) w.push_back(v);
  s.echo("refine.L", r.levels);
  s.echo("refine.weights", w);
  return r;
}

int refine_cmd(Settings& s, const Common& c, const Refine& a, std::ostream& out) {
  require_dataset(a.data);
  require_file(a.model);
  require_file(a.evidence);
  const std::uint64_t root = root_seed(s, c);
  const std::string method = s.get<std::string>("grounding.method", a.flags.method, "ceb");
  if (method == "ensemble") throw ConfigError("refinement grounds with a single method");
  const GroundingConfig g = grounding_config(s, a.flags, method, root);
  const RefinementConfig rc = refinement_config(s, a, g);
  const Model conv = load_checkpoint(a.model);
  const Model ev = load_checkpoint(a.evidence);
  g.validate(conv.spec().input_size, conv.spec().input_size);
  rc.validate(conv.spec().classes);
  if (ev.spec().classes != conv.spec().classes) {
    throw ConfigError("evidence model has " + std::to_string(ev.spec().classes) + " classes, conventional " +
                      std::to_string(conv.spec().classes));
  }
  const Dataset d = load_dataset(a.data);
  const ModelClassifier cc(conv), ec(ev);
  const ModelGrounder grounder(conv, g);
  MetricsReport r = evaluate(d.test, cc, grounder, ec, rc);
  r.provenance["model_hash"] = file_hash(a.model);
  r.provenance["evidence_hash"] = file_hash(a.evidence);
  r.provenance["dataset_hash"] = dataset_hash(a.data);
  r.provenance["config"] = s.echo().dump();
  const std::string report = to_json(r);
  if (a.out) {
    std::ofstream f(*a.out);
    if (!f) throw IoError(*a.out, "cannot write report");
    f << report << '\n';
  }
  out << report << '\n';
  return kOk;
}

struct Viz {
  std::string model, out;
  std::optional<std::string> data, image;
  std::string split = "test";
  int index = 0;
  std::optional<int> cls;
  int levels = 0;
  GroundingFlags flags;
};

int viz_cmd(Settings& s, const Common& c, const Viz& a, std::ostream& out) {
  require_file(a.model);
  if (a.data.has_value() == a.image.has_value()) throw ConfigError("viz needs exactly one of --data or --image");
  if (a.levels < 0) throw ConfigError("levels must be >= 0");
  const std::uint64_t root = root_seed(s, c);
  const std::string method = s.get<std::string>("grounding.method", a.flags.method, "ceb");
  const GroundingConfig g = grounding_config(s, a.flags, method, root);
  const Model model = load_checkpoint(a.model);

  Image image;
  std::optional<int> label;
  std::string tag;
  if (a.data) {
    require_dataset(*a.data);
    if (a.split != "train" && a.split != "test") throw ConfigError("--split must be train or test");
    const Dataset d = load_dataset(*a.data);
    const auto& split = a.split == "train" ? d.train : d.test;
    if (a.index < 0 || static_cast<std::size_t>(a.index) >= split.size()) {
      throw ConfigError("--index " + std::to_string(a.index) + " outside the " + a.split + " split");
    }
    image = split[static_cast<std::size_t>(a.index)].image;
    label = split[static_cast<std::size_t>(a.index)].label;
    tag = a.split + std::to_string(a.index);
  } else {
    require_file(*a.image);
    image = read_netpbm(*a.image);
    if (image.channels == 1) {
      Image rgb(3, image.height, image.width);
      for (int ch = 0; ch < 3; ++ch) {
        std::copy(image.pixels.begin(), image.pixels.end(), rgb.pixels.begin() + ch * image.height * image.width);
      }
      image = std::move(rgb);
    }
    tag = fs::path(*a.image).stem().string();
  }
  const int size = model.spec().input_size;
  if (image.height != size || image.width != size) image = resize_bilinear(image, size, size);
  g.validate(size, size);
  const ModelGrounder grounder(model, g);
  const int cls = a.cls ? *a.cls : label ? *label : model.predict(image).argmax();
  if (cls < 0 || cls >= model.spec().classes) throw ConfigError("--class out of range");

  fs::create_directories(a.out);
  Image current = image;
  std::optional<Peak> prev;
  for (int l = 0; l <= a.levels; ++l) {
    if (prev) current = erase(current, *prev, g.erase_size);
    const SaliencyMap map = grounder.ground(current, cls);
    const fs::path stem = fs::path(a.out) / (tag + "_c" + std::to_string(cls) + "_" + method + "_l" + std::to_string(l));
    write_saliency(stem, current, map);
    out << stem.string() << ".pgm " << stem.string() << ".ppm\n";
    prev = peak(map);
    if (!prev) break;
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"evidence-guided refinement pipeline", "gz"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config, "key=value config file with [sections]");
  app.add_option("--seed", common.seed, "root seed");
  app.add_option("--threads", common.threads, "worker threads (default: GZ_THREADS or 1)");

  GenData gd;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen->add_option("--spec", gd.spec, "dataset spec (JSON)");
  gen->add_option("--out", gd.out, "output directory")->required();

  Train tr;
  auto* trn = app.add_subcommand("train", "train the conventional CNN");
  trn->add_option("--data", tr.data, "dataset directory")->required();
  trn->add_option("--out", tr.out, "checkpoint path")->required();
  add_train_flags(trn, tr.flags);

  BuildPool bp;
  auto* bpl = app.add_subcommand("build-pool", "build an evidence pool");
  bpl->add_option("--data", bp.data, "dataset directory")->required();
  bpl->add_option("--model", bp.model, "conventional checkpoint")->required();
  bpl->add_option("--out", bp.out, "pool path")->required();
  bpl->add_option("--L", bp.levels, "adversarial erasing levels");
  add_grounding_flags(bpl, bp.flags, "ceb, eb, gradcam, rise, ensemble");

  TrainEvidence te;
  auto* tev = app.add_subcommand("train-evidence", "train the evidence CNN on a pool");
  tev->add_option("--pool", te.pool, "evidence pool")->required();
  tev->add_option("--out", te.out, "checkpoint path")->required();
  tev->add_option("--classes", te.classes, "class count (default: from the pool manifest)");
  add_train_flags(tev, te.flags);

  Refine rf;
  auto* ref = app.add_subcommand("refine", "evaluate decision refinement on the test split");
  ref->add_option("--data", rf.data, "dataset directory")->required();
  ref->add_option("--model", rf.model, "conventional checkpoint")->required();
  ref->add_option("--evidence", rf.evidence, "evidence checkpoint")->required();
  ref->add_option("--out", rf.out, "report path (JSON)");
  ref->add_option("--k", rf.k, "candidates");
  ref->add_option("--L", rf.levels, "levels");
  ref->add_option("--weights", rf.weights, "w,w_0,..,w_L");
  add_grounding_flags(ref, rf.flags, "ceb, eb, gradcam, rise");

  Viz vz;
  auto* viz = app.add_subcommand("viz", "write saliency maps and overlays");
  viz->add_option("--model", vz.model, "checkpoint")->required();
  viz->add_option("--out", vz.out, "output directory")->required();
  viz->add_option("--data", vz.data, "dataset directory");
  viz->add_option("--split", vz.split, "train or test");
  viz->add_option("--index", vz.index, "image index in the split");
  viz->add_option("--image", vz.image, "PPM/PGM image instead of a dataset entry");
  viz->add_option("--class", vz.cls, "class to ground (default: label, else prediction)");
  viz->add_option("--levels", vz.levels, "also ground after erasing earlier peaks, up to this level");
  add_grounding_flags(viz, vz.flags, "ceb, eb, gradcam, rise");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    Settings s(common.config.empty() ? ConfigFile{} : ConfigFile::load(common.config));
    std::optional<int> threads = common.threads;
    if (!threads) {
      if (const char* env = std::getenv("GZ_THREADS")) threads = convert<int>("GZ_THREADS", env);
    }
    const int workers = s.get("run.threads", threads, 1);
    if (workers < 1) throw ConfigError("thread count must be >= 1");
    set_worker_threads(workers);

    if (*gen) return gen_data(s, common, gd, out);
    if (*trn) return train_cmd(s, common, tr, out);
    if (*bpl) return build_pool_cmd(s, common, bp, out);
    if (*tev) return train_evidence_cmd(s, common, te, out);
    if (*ref) return refine_cmd(s, common, rf, out);
    if (*viz) return viz_cmd(s, common, vz, out);
    return kConfig;
  } catch (const ConfigError& e) {
    err << "gz: configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    err << "gz: " << e.what() << '\n';
    return kRuntime;
  } catch (const std::exception& e) {
    err << "gz: error: " << e.what() << '\n';
    return kRuntime;
  }
}

}  // namespace gz::cli
