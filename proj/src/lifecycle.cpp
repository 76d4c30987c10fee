#include "r2r/lifecycle.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "r2r/bench.hpp"
#include "r2r/bundle.hpp"
#include "r2r/cav.hpp"
#include "r2r/image_io.hpp"
#include "r2r/rng.hpp"
#include "r2r/version.hpp"

namespace r2r::lifecycle {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path RunPaths::iteration(std::size_t k) const { return root / ("iter_" + std::to_string(k)); }
fs::path RunPaths::reveal(std::size_t k) const {
  return root / "reveal" / ("iter_" + std::to_string(k));
}

// ---- lock ------------------------------------------------------------------

RunLock::RunLock(const fs::path& root) : file_(RunPaths{root}.lock()) {
  fs::create_directories(root);
  const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw LockError("run directory " + root.string() +
                      " is locked by another lifecycle process (delete " + file_.string() +
                      " if that process is gone)");
    }
    throw LockError("cannot create " + file_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(file_, ec);
}

// ---- manifest ----------------------------------------------------------------

namespace {

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json label_record_json(const LabelRecord& r) {
  return {{"artifact_name", r.artifact_name}, {"source", r.source},
          {"path", r.path},                   {"sample_count", r.sample_count},
          {"provenance", r.provenance},       {"created_at", r.created_at},
          {"tool_version", r.tool_version}};
}

LabelRecord label_record_from(const json& j) {
  LabelRecord r;
  r.artifact_name = j.at("artifact_name").get<std::string>();
  r.source = j.at("source").get<std::string>();
  r.path = j.at("path").get<std::string>();
  r.sample_count = j.value("sample_count", std::size_t{0});
  r.provenance = j.value("provenance", std::vector<std::string>{});
  r.created_at = j.value("created_at", std::string{});
  r.tool_version = j.value("tool_version", std::string{});
  return r;
}

json iteration_json(const IterationRecord& r) {
  json retained = json::array();
  for (const auto& x : r.retained) {
    retained.push_back(
        {{"artifact", x.artifact}, {"method", x.method}, {"lambda", x.lambda}, {"masks", x.masks}});
  }
  json scores = json::object();
  for (const auto& [name, s] : r.scores) {
    scores[name] = {{"artifact_relevance_pct", s.relevance_pct},
                    {"f1_poisoned", s.f1_poisoned},
                    {"acc_poisoned", s.acc_poisoned}};
  }
  return {{"iteration", r.iteration},
          {"artifact", r.artifact ? json(*r.artifact) : json(nullptr)},
          {"method", r.method},
          {"lambda", r.lambda},
          {"label_set", r.label_set},
          {"layer", r.layer},
          {"cav", r.cav},
          {"masks", r.masks},
          {"masks_used", r.masks_used},
          {"masks_dropped", r.masks_dropped},
          {"checkpoint", r.checkpoint},
          {"report", r.report},
          {"retained", retained},
          {"f1_original", r.f1_original},
          {"acc_original", r.acc_original},
          {"relevance_before", r.relevance_before},
          {"scores", scores}};
}

IterationRecord iteration_from(const json& j) {
  IterationRecord r;
  r.iteration = j.at("iteration").get<std::size_t>();
  if (!j.at("artifact").is_null()) r.artifact = j["artifact"].get<std::string>();
  r.method = j.value("method", std::string{});
  r.lambda = j.value("lambda", 0.0);
  r.label_set = j.value("label_set", std::string{});
  r.layer = j.value("layer", std::string{});
  r.cav = j.value("cav", std::string{});
  r.masks = j.value("masks", std::string{});
  r.masks_used = j.value("masks_used", std::size_t{0});
  r.masks_dropped = j.value("masks_dropped", std::size_t{0});
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.report = j.value("report", std::string{});
  for (const auto& x : j.value("retained", json::array())) {
    r.retained.push_back({x.at("artifact").get<std::string>(), x.at("method").get<std::string>(),
                          x.at("lambda").get<double>(), x.at("masks").get<std::string>()});
  }
  r.f1_original = j.value("f1_original", 0.0);
  r.acc_original = j.value("acc_original", 0.0);
  r.relevance_before = j.value("relevance_before", std::map<std::string, double>{});
  const json scores = j.value("scores", json::object());
  for (const auto& [name, s] : scores.items()) {
    r.scores[name] = {s.at("artifact_relevance_pct").get<double>(),
                      s.at("f1_poisoned").get<double>(), s.at("acc_poisoned").get<double>()};
  }
  return r;
}

}  // namespace

std::string RunManifest::current_checkpoint() const {
  return iterations.empty() ? std::string("model") : iterations.back().checkpoint;
}

bool RunManifest::corrected(const std::string& artifact) const {
  return std::any_of(iterations.begin(), iterations.end(),
                     [&](const IterationRecord& r) { return r.artifact == artifact; });
}

const LabelRecord* RunManifest::label_set(const std::string& artifact) const {
  for (const auto& r : label_sets)
    if (r.artifact_name == artifact) return &r;
  return nullptr;
}

json manifest_to_json(const RunManifest& m) {
  json sets = json::array();
  for (const auto& r : m.label_sets) sets.push_back(label_record_json(r));
  json its = json::array();
  for (const auto& r : m.iterations) its.push_back(iteration_json(r));
  return {{"version", kManifestVersion},
          {"run_id", m.run_id},
          {"status", m.status},
          {"created_at", m.created_at},
          {"tool_version", kToolVersion},
          {"label_sets", sets},
          {"iterations", its}};
}

RunManifest manifest_from_json(const json& j) {
  if (j.value("version", 0) != kManifestVersion) {
    throw LifecycleError("manifest: unsupported version " + j.value("version", json(nullptr)).dump());
  }
  RunManifest m;
  m.run_id = j.value("run_id", std::string{});
  m.status = j.value("status", std::string("running"));
  m.created_at = j.value("created_at", std::string{});
  for (const auto& r : j.value("label_sets", json::array())) m.label_sets.push_back(label_record_from(r));
  for (const auto& r : j.value("iterations", json::array())) m.iterations.push_back(iteration_from(r));
  for (std::size_t k = 0; k < m.iterations.size(); ++k) {
    if (m.iterations[k].iteration != k) {
      throw LifecycleError("manifest: iterations are not contiguous from 0");
    }
  }
  return m;
}

std::optional<RunManifest> load_manifest(const fs::path& root) {
  const fs::path file = RunPaths{root}.manifest();
  if (!fs::exists(file)) return std::nullopt;
  std::ifstream in(file);
  try {
    return manifest_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw LifecycleError(file.string() + ": " + e.what());
  }
}

void save_manifest(const fs::path& root, const RunManifest& m) {
  if (const auto old = load_manifest(root)) {
    auto prefix = [](const json& a, const json& b) {
      if (a.size() > b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
      return true;
    };
    const json o = manifest_to_json(*old), n = manifest_to_json(m);
    if (!prefix(o["iterations"], n["iterations"]) || !prefix(o["label_sets"], n["label_sets"])) {
      throw LifecycleError("manifest is append-only: recorded iterations and label sets cannot change");
    }
  }
  labels::write_atomic(RunPaths{root}.manifest(), manifest_to_json(m).dump(2) + "\n");
}

// ---- config --------------------------------------------------------------------

std::vector<std::string> LifecycleConfig::known_keys() {
  return {"seed",         "method",         "lambda",           "epochs",
          "learning_rate", "momentum",      "batch_size",       "layer",
          "oracle",       "finish",         "max_iterations",   "masks",
          "mask_quantile", "mask_dilation", "reveal",           "reveal.downscale",
          "reveal.k_neighbors", "reveal.n_eigs", "reveal.crp_layer", "reveal.gallery_k",
          "reveal.max_concepts"};
}

LifecycleConfig LifecycleConfig::from_keyvalues(const config::KeyValues& kv) {
  LifecycleConfig c;
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  if (const auto m = kv.get("method")) c.method = revise::parse_method(*m);
  c.lambda = static_cast<float>(kv.get_double("lambda", c.lambda));
  c.epochs = static_cast<std::size_t>(kv.get_int("epochs", static_cast<long long>(c.epochs)));
  c.learning_rate = static_cast<float>(kv.get_double("learning_rate", c.learning_rate));
  c.momentum = static_cast<float>(kv.get_double("momentum", c.momentum));
  c.batch_size = static_cast<std::size_t>(kv.get_int("batch_size", static_cast<long long>(c.batch_size)));
  c.layer = kv.get_string("layer", c.layer);
  c.oracle = kv.get_bool("oracle", c.oracle);
  c.finish = kv.get_bool("finish", c.finish);
  c.max_iterations =
      static_cast<std::size_t>(kv.get_int("max_iterations", static_cast<long long>(c.max_iterations)));
  const std::string masks = kv.get_string("masks", "cav");
  if (masks != "cav" && masks != "truth") {
    throw config::ConfigError("masks: expected cav or truth, got '" + masks + "'");
  }
  c.truth_masks = masks == "truth";
  c.mask_quantile = kv.get_double("mask_quantile", c.mask_quantile);
  c.mask_dilation =
      static_cast<std::size_t>(kv.get_int("mask_dilation", static_cast<long long>(c.mask_dilation)));
  c.reveal = kv.get_bool("reveal", c.reveal);
  auto& r = c.reveal_config;
  r.downscale = static_cast<std::size_t>(kv.get_int("reveal.downscale", static_cast<long long>(r.downscale)));
  r.k_neighbors =
      static_cast<std::size_t>(kv.get_int("reveal.k_neighbors", static_cast<long long>(r.k_neighbors)));
  r.n_eigs = static_cast<std::size_t>(kv.get_int("reveal.n_eigs", static_cast<long long>(r.n_eigs)));
  r.crp_layer = kv.get_string("reveal.crp_layer", r.crp_layer);
  r.gallery_k = static_cast<std::size_t>(kv.get_int("reveal.gallery_k", static_cast<long long>(r.gallery_k)));
  r.max_concepts =
      static_cast<std::size_t>(kv.get_int("reveal.max_concepts", static_cast<long long>(r.max_concepts)));
  r.seed = c.seed;
  c.validate();
  return c;
}

void LifecycleConfig::validate() const {
  if (method == revise::Method::PClarc) {
    throw LifecycleError(
        "method pclarc only adds an inference hook and produces no corrected checkpoint; run it "
        "with the `correct` command instead of the lifecycle");
  }
  if (!(mask_quantile > 0.0 && mask_quantile < 1.0)) {
    throw LifecycleError("mask_quantile must lie in (0, 1)");
  }
  if (max_iterations == 0) throw LifecycleError("max_iterations must be at least 1");
  revise::CorrectionConfig cc;
  cc.method = method;
  cc.lambda = lambda;
  cc.epochs = epochs;
  cc.learning_rate = learning_rate;
  cc.momentum = momentum;
  cc.batch_size = batch_size;
  revise::validate(cc);
}

// ---- labels ------------------------------------------------------------------------

std::vector<labels::ArtifactLabelSet> oracle_label_sets(const data::Dataset& data) {
  std::vector<labels::ArtifactLabelSet> out;
  for (const auto& s : data.samples) {
    if (s.split != "train" || !s.artifact_flag.value_or(false)) continue;
    const std::string name = s.artifact.empty() ? std::string("artifact") : s.artifact;
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const auto& l) { return l.artifact_name == name; });
    if (it == out.end()) {
      labels::ArtifactLabelSet l;
      l.artifact_name = name;
      l.source = labels::LabelSource::Manual;
      l.provenance = {"oracle:ground-truth"};
      out.push_back(l);
      it = out.end() - 1;
    }
    it->sample_ids.push_back(s.id);
  }
  return out;
}

namespace {

RunManifest fresh_manifest(const fs::path& root) {
  RunManifest m;
  m.run_id = fs::absolute(root).lexically_normal().filename().string();
  if (m.run_id.empty()) m.run_id = "run";
  m.created_at = utc_now();
  return m;
}

data::Dataset load_dataset(const RunPaths& paths) {
  if (!fs::exists(paths.dataset() / "index.csv")) {
    throw LifecycleError("no dataset in " + paths.dataset().string() + " (run gen-data first)");
  }
  return bench::load_image_folder(paths.dataset());
}

LabelRecord register_labels(const RunPaths& paths, RunManifest& manifest,
                            const labels::ArtifactLabelSet& set, const data::Dataset& data) {
  labels::check_ids(set, data);
  if (manifest.label_set(set.artifact_name)) {
    throw labels::LabelError("artifact '" + set.artifact_name +
                             "' already has a registered label set in this run");
  }
  const std::string rel = "labels/" + set.artifact_name + ".json";
  labels::write_atomic(paths.root / rel, labels::serialize(set));
  LabelRecord r;
  r.artifact_name = set.artifact_name;
  r.source = labels::source_name(set.source);
  r.path = rel;
  r.sample_count = set.sample_ids.size();
  r.provenance = set.provenance;
  r.created_at = utc_now();
  r.tool_version = kToolVersion;
  manifest.label_sets.push_back(r);
  save_manifest(paths.root, manifest);
  return r;
}

}  // namespace

LabelRecord import_artifact_labels(const fs::path& root, const fs::path& file) {
  const RunPaths paths{root};
  RunLock lock(root);
  const labels::ArtifactLabelSet set = labels::load(file);
  const data::Dataset data = load_dataset(paths);
  RunManifest manifest = load_manifest(root).value_or(fresh_manifest(root));
  return register_labels(paths, manifest, set, data);
}

// ---- the loop ------------------------------------------------------------------------

namespace {

struct Context {
  RunPaths paths;
  LifecycleConfig cfg;
  data::Dataset all;
  data::Dataset train, val, test;
  std::vector<bench::ArtifactSpec> synthetic;
  std::map<std::string, data::Dataset> poisoned;  // per artifact, built once
};

std::vector<bench::ArtifactSpec> synthetic_specs(const RunPaths& paths) {
  std::ifstream in(paths.dataset() / "dataset.json");
  if (!in) return {};
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("meta") || !j["meta"].contains("bench")) return {};
  return bench::config_from_json(j["meta"]["bench"]).artifacts;
}

std::map<std::string, Tensor> load_masks(const fs::path& dir) {
  std::map<std::string, Tensor> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".png") continue;
    out.emplace(e.path().stem().string(), io::read_mask_png(e.path()));
  }
  return out;
}

const data::Dataset& poisoned_test(Context& ctx, const std::string& artifact,
                                   const std::map<std::string, Tensor>& masks) {
  const auto it = ctx.poisoned.find(artifact);
  if (it != ctx.poisoned.end()) return it->second;
  const std::uint64_t seed = derive_seed(ctx.cfg.seed, hash_string("evaluate:" + artifact));
  for (const auto& spec : ctx.synthetic) {
    if (spec.name == artifact) {
      return ctx.poisoned.emplace(artifact, eval::poison_synthetic(ctx.test, spec, seed)).first->second;
    }
  }
  std::vector<cav::Patch> pool;
  for (const auto& [id, mask] : masks) {
    const auto idx = ctx.train.find(id);
    if (!idx) continue;
    pool.push_back(cav::crop_artifact(ctx.train.samples[*idx].image, mask));
  }
  if (pool.empty()) {
    throw LifecycleError("artifact '" + artifact + "': no masks to build a poisoned test set from");
  }
  return ctx.poisoned.emplace(artifact, eval::poison_intrinsic(ctx.test, pool, artifact, seed))
      .first->second;
}

std::map<std::string, Tensor> artifact_masks(const Context& ctx, const RunManifest& m,
                                             const std::string& artifact) {
  for (const auto& r : m.iterations)
    if (r.artifact == artifact) return load_masks(ctx.paths.root / r.masks);
  return {};
}

std::string choose_layer(const Context& ctx, const nn::Model& model,
                         std::span<const std::size_t> art, std::span<const std::size_t> clean) {
  if (!ctx.cfg.layer.empty()) return ctx.cfg.layer;
  cav::FitOptions opt;
  opt.seed = ctx.cfg.seed;
  const auto scores = cav::sweep_layers(model, ctx.train, art, clean, opt);
  if (scores.empty()) throw LifecycleError("model has no convolution layer for a CAV");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i].cv_accuracy >= scores[best].cv_accuracy) best = i;
  return scores[best].layer;
}

void write_summary(const RunPaths& paths, const RunManifest& m) {
  labels::write_atomic(paths.root / "summary.csv", summary_csv(m));
  labels::write_atomic(paths.root / "summary.md", summary_markdown(m));
}

IterationRecord run_iteration(Context& ctx, const RunManifest& manifest, std::size_t k,
                              const LabelRecord& record, const nn::Model& model_in) {
  const auto& cfg = ctx.cfg;
  const fs::path dir = ctx.paths.iteration(k);
  const std::string rel = "iter_" + std::to_string(k);
  fs::create_directories(dir);
  const labels::ArtifactLabelSet set = labels::load(ctx.paths.root / record.path);
  const std::string& name = set.artifact_name;

  IterationRecord rec;
  rec.iteration = k;
  rec.artifact = name;
  rec.method = revise::method_name(cfg.method);
  rec.lambda = cfg.lambda;
  rec.label_set = record.path;

  // Flagged training samples against unflagged ones of the same classes.
  std::set<std::string> flagged(set.sample_ids.begin(), set.sample_ids.end());
  std::set<std::string> any_flagged;
  for (const auto& l : manifest.label_sets) {
    for (const auto& id : labels::load(ctx.paths.root / l.path).sample_ids) any_flagged.insert(id);
  }
  std::vector<std::size_t> art, clean;
  std::set<std::size_t> classes;
  for (std::size_t i = 0; i < ctx.train.size(); ++i) {
    if (flagged.count(ctx.train.samples[i].id)) {
      art.push_back(i);
      classes.insert(ctx.train.samples[i].label);
    }
  }
  if (art.empty()) {
    throw LifecycleError("label set '" + name + "' names no training-split samples");
  }
  for (std::size_t i = 0; i < ctx.train.size(); ++i) {
    const auto& s = ctx.train.samples[i];
    if (!any_flagged.count(s.id) && classes.count(s.label)) clean.push_back(i);
  }
  if (clean.empty()) {
    for (std::size_t i = 0; i < ctx.train.size(); ++i)
      if (!any_flagged.count(ctx.train.samples[i].id)) clean.push_back(i);
  }

  rec.layer = choose_layer(ctx, model_in, art, clean);
  cav::FitOptions fit;
  fit.seed = cfg.seed;
  const cav::Cav cav_vec = cav::fit_cav(model_in, ctx.train, art, clean, rec.layer, fit);
  cav::save_cav(cav_vec, dir / "cav.json");
  rec.cav = rel + "/cav.json";

  revise::MaskSet masks;
  masks.artifact_name = name;
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "cav_heatmaps");
  for (auto i : art) {
    const auto& s = ctx.train.samples[i];
    Tensor mask;
    if (cfg.truth_masks) {
      if (!s.truth_mask) {
        ++rec.masks_dropped;
        continue;
      }
      mask = *s.truth_mask;
    } else {
      const Tensor heat = xai::spatial_map(cav::localize_artifact(model_in, ctx.train.input(i), cav_vec));
      xai::write_heatmap(dir / "cav_heatmaps" / (s.id + ".png"), heat);
      mask = cav::binarize_mask(heat, cfg.mask_quantile, cfg.mask_dilation);
    }
    if (mask.sum() <= 0.0f) {
      std::cerr << "warning: empty artifact mask for sample " << s.id << ", dropped\n";
      ++rec.masks_dropped;
      continue;
    }
    io::write_mask_png(dir / "masks" / (s.id + ".png"), mask);
    masks.masks.emplace(s.id, std::move(mask));
  }
  rec.masks = rel + "/masks";
  rec.masks_used = masks.masks.size();
  if (masks.masks.empty() && revise::uses_masks(cfg.method)) {
    throw LifecycleError("artifact '" + name + "': every artifact mask is empty");
  }

  // Artifacts evaluated in this iteration: every earlier one plus this one.
  std::vector<std::string> known;
  for (const auto& r : manifest.iterations)
    if (r.artifact) known.push_back(*r.artifact);
  known.push_back(name);
  auto masks_of = [&](const std::string& a) {
    return a == name ? masks.masks : artifact_masks(ctx, manifest, a);
  };
  for (const auto& a : known) {
    const auto& pois = poisoned_test(ctx, a, masks_of(a));
    rec.relevance_before[a] = eval::artifact_relevance_fraction(model_in, pois).mean_pct;
  }

  std::vector<revise::RetainedLoss> retained;
  for (const auto& r : manifest.iterations) {
    if (!r.artifact) continue;
    const revise::Method m = revise::parse_method(r.method);
    if (!revise::uses_masks(m)) continue;
    revise::RetainedLoss rl;
    rl.method = m;
    rl.lambda = static_cast<float>(r.lambda);
    rl.masks.artifact_name = *r.artifact;
    rl.masks.masks = load_masks(ctx.paths.root / r.masks);
    retained.push_back(std::move(rl));
    rec.retained.push_back({*r.artifact, r.method, r.lambda, r.masks});
  }

  revise::CorrectionConfig cc;
  cc.method = cfg.method;
  cc.lambda = cfg.lambda;
  cc.epochs = cfg.epochs;
  cc.learning_rate = cfg.learning_rate;
  cc.momentum = cfg.momentum;
  cc.batch_size = cfg.batch_size;
  cc.seed = derive_seed(cfg.seed, hash_string("correct:" + std::to_string(k)));
  const auto result = revise::finetune_correct(model_in, ctx.train, cc, &masks, &cav_vec, retained,
                                               ctx.val.empty() ? nullptr : &ctx.val);
  nn::save_checkpoint(result.model, dir / "model",
                      {{"iteration", k}, {"artifact", name}, {"method", rec.method},
                       {"lambda", rec.lambda}},
                      cc.seed);
  revise::write_loss_log(result.history, dir / "loss.csv");
  rec.checkpoint = rel + "/model";

  const eval::Metrics original = eval::classification_metrics(result.model, ctx.test);
  rec.f1_original = original.macro_f1_pct;
  rec.acc_original = original.accuracy_pct;
  for (const auto& a : known) {
    const auto& pois = poisoned_test(ctx, a, masks_of(a));
    const auto frac = eval::artifact_relevance_fraction(result.model, pois);
    const auto pm = eval::classification_metrics(result.model, pois);
    rec.scores[a] = {frac.mean_pct, pm.macro_f1_pct, pm.accuracy_pct};
    if (a != name) continue;
    eval::EvaluationReport rep;
    rep.run_id = manifest.run_id;
    rep.method = rec.method;
    rep.lambda = rec.lambda;
    rep.seed = cfg.seed;
    rep.iteration = k;
    rep.artifact = name;
    rep.dataset = "test";
    rep.artifact_relevance_pct = frac.mean_pct;
    rep.relevance_samples = frac.per_sample_pct.size();
    rep.relevance_excluded = frac.excluded;
    rep.original = original;
    rep.poisoned = pm;
    eval::write_report(rep, dir);
  }
  rec.report = rel + "/report.json";
  return rec;
}

}  // namespace

LifecycleResult run_lifecycle(const fs::path& root, const LifecycleConfig& cfg) {
  cfg.validate();
  const RunPaths paths{root};
  RunLock lock(root);
  if (!fs::exists(paths.base_model() / "manifest.json")) {
    throw LifecycleError("no base checkpoint in " + paths.base_model().string() + " (run train first)");
  }
  Context ctx{paths, cfg, load_dataset(paths), {}, {}, {}, {}, {}};
  ctx.train = ctx.all.split("train");
  ctx.val = ctx.all.split("val");
  ctx.test = ctx.all.split("test");
  if (ctx.train.empty() || ctx.test.empty()) {
    throw LifecycleError("dataset needs non-empty train and test splits");
  }
  ctx.synthetic = synthetic_specs(paths);

  RunManifest manifest = load_manifest(root).value_or(fresh_manifest(root));
  LifecycleResult result;
  for (;;) {
    if (!manifest.iterations.empty() && !manifest.iterations.back().artifact) {
      manifest.status = "complete";
      save_manifest(root, manifest);
      result.message = "run complete";
      break;
    }
    const std::size_t k = manifest.iterations.size();
    const nn::Model model = nn::load_checkpoint(root / manifest.current_checkpoint());

    if (cfg.reveal && !fs::exists(paths.reveal(k) / "reveal.json")) {
      reveal::RevealConfig rc = cfg.reveal_config;
      rc.seed = cfg.seed;
      const json listing = reveal::run_reveal(model, ctx.train, rc, paths.reveal(k));
      labels::write_atomic(paths.reveal(k) / "reveal.json", listing.dump(2) + "\n");
    }
    if (cfg.reveal) bundle::export_inspection_bundle(root);

    // Label pause point.
    if (fs::exists(paths.pending_labels())) {
      const auto pending = labels::load(paths.pending_labels());
      const LabelRecord* known = manifest.label_set(pending.artifact_name);
      if (!known) {
        register_labels(paths, manifest, pending, ctx.all);
      } else if (labels::serialize(labels::load(root / known->path)) != labels::serialize(pending)) {
        throw labels::LabelError("labels.json: artifact '" + pending.artifact_name +
                                 "' is already registered with different contents");
      }
      fs::remove(paths.pending_labels());
    }
    if (cfg.oracle) {
      for (const auto& set : oracle_label_sets(ctx.all))
        if (!manifest.label_set(set.artifact_name)) register_labels(paths, manifest, set, ctx.all);
    }
    const LabelRecord* next = nullptr;
    for (const auto& r : manifest.label_sets) {
      if (!manifest.corrected(r.artifact_name)) {
        next = &r;
        break;
      }
    }

    if (!next || k >= cfg.max_iterations) {
      if (!next && !cfg.oracle && !cfg.finish) {
        manifest.status = "awaiting_labels";
        save_manifest(root, manifest);
        result.status = RunStatus::AwaitingLabels;
        result.message = "awaiting labels: write " + paths.pending_labels().string() +
                         " (or import one) and rerun the lifecycle";
        break;
      }
      IterationRecord empty;
      empty.iteration = k;
      empty.checkpoint = manifest.current_checkpoint();
      manifest.iterations.push_back(empty);
      manifest.status = "complete";
      save_manifest(root, manifest);
      write_summary(paths, manifest);
      result.message = next ? "iteration limit reached" : "no uncorrected artifacts left";
      break;
    }

    const LabelRecord record = *next;
    std::cerr << "iteration " << k << ": correcting '" << record.artifact_name << "' with "
              << revise::method_name(cfg.method) << " (lambda " << cfg.lambda << ")\n";
    manifest.iterations.push_back(run_iteration(ctx, manifest, k, record, model));
    manifest.status = "running";
    save_manifest(root, manifest);
    write_summary(paths, manifest);
  }
  if (cfg.reveal) bundle::export_inspection_bundle(root);
  result.manifest = manifest;
  return result;
}

// ---- summaries ------------------------------------------------------------------------

namespace {

std::string fmt1(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << v;
  return os.str();
}

std::vector<std::vector<std::string>> summary_rows(const RunManifest& m) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : m.iterations) {
    if (!r.artifact) continue;
    for (const auto& [name, s] : r.scores) {
      std::ostringstream lam;
      lam << r.lambda;
      rows.push_back({std::to_string(r.iteration), *r.artifact, name, r.method, lam.str(),
                      fmt1(s.relevance_pct), fmt1(s.f1_poisoned), fmt1(r.f1_original),
                      fmt1(s.acc_poisoned), fmt1(r.acc_original)});
    }
  }
  return rows;
}

const std::vector<std::string>& summary_columns() {
  static const std::vector<std::string> cols = {
      "iteration",       "corrected", "artifact",    "method",         "lambda",
      "artifact_relevance_pct", "f1_poisoned", "f1_original", "acc_poisoned", "acc_original"};
  return cols;
}

}  // namespace

std::string summary_csv(const RunManifest& m) {
  std::string out;
  const auto& cols = summary_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += "\n";
  for (const auto& row : summary_rows(m)) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + row[i];
    out += "\n";
  }
  return out;
}

std::string summary_markdown(const RunManifest& m) {
  std::string out = "|";
  const auto& cols = summary_columns();
  for (const auto& c : cols) out += " " + c + " |";
  out += "\n|";
  for (std::size_t i = 0; i < cols.size(); ++i) out += i < 4 ? " --- |" : " ---: |";
  out += "\n";
  for (const auto& row : summary_rows(m)) {
    out += "|";
    for (const auto& v : row) out += " " + v + " |";
    out += "\n";
  }
  return out;
}

}  // namespace r2r::lifecycle
