// r2r: command-line driver for the reveal-to-revise workflow.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "r2r/bench.hpp"
#include "r2r/bundle.hpp"
#include "r2r/cav.hpp"
#include "r2r/config.hpp"
#include "r2r/evaluate.hpp"
#include "r2r/image_io.hpp"
#include "r2r/labels.hpp"
#include "r2r/lifecycle.hpp"
#include "r2r/reveal.hpp"
#include "r2r/revise.hpp"
#include "r2r/server.hpp"
#include "r2r/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace r2r;

namespace {

constexpr int kExitAwaitingLabels = 3;

struct Common {
  std::string run_dir = ".";
  std::uint64_t seed = 0;
  std::string checkpoint;  // relative to the run dir; empty: latest
};

lifecycle::RunPaths paths_of(const Common& c) { return {c.run_dir}; }

fs::path checkpoint_dir(const Common& c) {
  if (!c.checkpoint.empty()) return fs::path(c.run_dir) / c.checkpoint;
  const auto m = lifecycle::load_manifest(c.run_dir);
  return fs::path(c.run_dir) / (m ? m->current_checkpoint() : std::string("model"));
}

data::Dataset load_data(const Common& c) { return bench::load_image_folder(paths_of(c).dataset()); }

std::vector<std::size_t> indices_for(const data::Dataset& train, const labels::ArtifactLabelSet& set) {
  std::vector<std::size_t> out;
  for (const auto& id : set.sample_ids)
    if (const auto i = train.find(id)) out.push_back(*i);
  if (out.empty()) throw std::runtime_error("label set names no training samples");
  return out;
}

std::vector<std::size_t> clean_for(const data::Dataset& train, const labels::ArtifactLabelSet& set,
                                   std::span<const std::size_t> art) {
  std::set<std::string> flagged(set.sample_ids.begin(), set.sample_ids.end());
  std::set<std::size_t> classes;
  for (auto i : art) classes.insert(train.samples[i].label);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (!flagged.count(train.samples[i].id) && classes.count(train.samples[i].label)) out.push_back(i);
  return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reveal-to-revise: find, label and unlearn Clever Hans artifacts"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--run-dir", common.run_dir, "Run directory")->capture_default_str();
    sub->add_option("--seed", common.seed, "Random seed")->capture_default_str();
  };
  auto add_checkpoint = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", common.checkpoint,
                    "Checkpoint directory relative to the run dir (default: latest)");
  };

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic Clever Hans benchmark");
  add_common(gen);
  bench::BenchConfig bench_cfg;
  gen->add_option("--side", bench_cfg.side, "Image side in pixels")->capture_default_str();
  gen->add_option("--classes", bench_cfg.num_classes, "Number of shape classes")->capture_default_str();
  gen->add_option("--per-class", bench_cfg.per_class, "Samples per class")->capture_default_str();
  gen->add_option("--artifact-class", bench_cfg.artifacts[0].target_class)->capture_default_str();
  gen->add_option("--artifact-prob", bench_cfg.artifacts[0].probability,
                  "Fraction of the class's training samples tagged")
      ->capture_default_str();
  gen->add_option("--artifact-name", bench_cfg.artifacts[0].name)->capture_default_str();
  gen->callback([&] {
    bench_cfg.seed = common.seed;
    bench::validate(bench_cfg);
    bench::GenerationSummary summary;
    const auto data = bench::generate_synthetic_dataset(bench_cfg, &summary);
    bench::save_image_folder(data, paths_of(common).dataset(),
                             {{"bench", bench::config_to_json(bench_cfg)}});
    std::cout << "wrote " << data.size() << " samples to " << paths_of(common).dataset().string()
              << " (" << summary.artifact_counts.at(0) << " tagged training samples)\n";
  });

  // train
  auto* train = app.add_subcommand("train", "Train the base model on the training split");
  add_common(train);
  nn::TrainConfig train_cfg;
  train_cfg.epochs = 20;
  std::string optimizer = "sgd";
  train->add_option("--epochs", train_cfg.epochs)->capture_default_str();
  train->add_option("--lr", train_cfg.learning_rate)->capture_default_str();
  train->add_option("--batch-size", train_cfg.batch_size)->capture_default_str();
  train->add_option("--optimizer", optimizer)->check(CLI::IsMember({"sgd", "adam"}))->capture_default_str();
  train->callback([&] {
    const auto all = load_data(common);
    const auto tr = all.split("train");
    const auto val = all.split("val");
    const auto& shape = tr.samples.at(0).image.shape();
    nn::Model model = nn::build_model(nn::mini_cnn(shape[0], shape[1], all.num_classes), common.seed);
    train_cfg.seed = common.seed;
    train_cfg.optimizer = optimizer == "adam" ? nn::Optimizer::Adam : nn::Optimizer::Sgd;
    nn::TrainOptions opts;
    opts.validation = val.empty() ? nullptr : &val;
    const auto history = nn::train(model, tr, train_cfg, {}, opts);
    for (const auto& e : history.epochs) {
      std::cout << "epoch " << e.epoch << " loss " << e.ce_loss;
      if (e.val_accuracy) std::cout << " val_acc " << *e.val_accuracy;
      std::cout << '\n';
    }
    nn::save_checkpoint(model, paths_of(common).base_model(),
                        {{"epochs", train_cfg.epochs}, {"learning_rate", train_cfg.learning_rate},
                         {"optimizer", optimizer}},
                        common.seed);
  });

  // attribute
  auto* attr = app.add_subcommand("attribute", "LRP heatmap for one sample");
  add_common(attr);
  add_checkpoint(attr);
  std::string sample_id, out_path;
  std::optional<std::size_t> target;
  attr->add_option("--sample", sample_id, "Sample id")->required();
  attr->add_option("--target", target, "Explained class (default: predicted)");
  attr->add_option("--out", out_path, "Output PNG")->required();
  attr->callback([&] {
    const auto data = load_data(common);
    const auto model = nn::load_checkpoint(checkpoint_dir(common));
    const auto idx = data.find(sample_id);
    if (!idx) throw std::runtime_error("unknown sample id: " + sample_id);
    const auto subset = data.subset(std::vector<std::size_t>{*idx});
    const std::size_t cls = target ? *target : nn::predict_labels(model, subset).at(0);
    const auto map = xai::lrp_attribute(model, data.input(*idx), cls);
    xai::write_heatmap(out_path, xai::spatial_map(map.input_relevance));
    std::cout << "explained class " << cls << " of " << sample_id << " -> " << out_path << '\n';
  });

  // spray
  auto* spray_cmd = app.add_subcommand("spray", "SpRAy clustering of one class's heatmaps");
  add_common(spray_cmd);
  add_checkpoint(spray_cmd);
  std::size_t spray_class = 0;
  reveal::RevealConfig reveal_cfg;
  spray_cmd->add_option("--class", spray_class)->required();
  spray_cmd->add_option("--downscale", reveal_cfg.downscale)->capture_default_str();
  spray_cmd->add_option("--neighbors", reveal_cfg.k_neighbors)->capture_default_str();
  spray_cmd->add_option("--eigs", reveal_cfg.n_eigs)->capture_default_str();
  spray_cmd->add_option("--out", out_path, "Output JSON (default: stdout)");
  spray_cmd->callback([&] {
    const auto train_set = load_data(common).split("train");
    const auto model = nn::load_checkpoint(checkpoint_dir(common));
    reveal_cfg.seed = common.seed;
    const auto cs = reveal::spray_class(model, train_set, spray_class, reveal_cfg);
    json j = spray::report_to_json(cs.report);
    j["class"] = spray_class;
    j["class_name"] = cs.class_name;
    if (out_path.empty()) {
      print_json(j);
    } else {
      labels::write_atomic(out_path, j.dump(2) + "\n");
    }
  });

  // crp
  auto* crp = app.add_subcommand("crp", "Reveal step: SpRAy reports and CRP reference galleries");
  add_common(crp);
  add_checkpoint(crp);
  std::string out_dir;
  crp->add_option("--layer", reveal_cfg.crp_layer, "Concept layer (default: last convolution)");
  crp->add_option("--k", reveal_cfg.gallery_k, "Reference samples per concept")->capture_default_str();
  crp->add_option("--max-concepts", reveal_cfg.max_concepts, "Most relevant channels only (0: all)")
      ->capture_default_str();
  crp->add_option("--out", out_dir, "Output directory")->required();
  crp->callback([&] {
    const auto train_set = load_data(common).split("train");
    const auto model = nn::load_checkpoint(checkpoint_dir(common));
    reveal_cfg.seed = common.seed;
    const json listing = reveal::run_reveal(model, train_set, reveal_cfg, out_dir);
    labels::write_atomic(fs::path(out_dir) / "reveal.json", listing.dump(2) + "\n");
    std::cout << listing["galleries"].size() << " concept galleries in " << out_dir << '\n';
  });

  // cav
  auto* cav_cmd = app.add_subcommand("cav", "Fit an artifact CAV from a label set");
  add_common(cav_cmd);
  add_checkpoint(cav_cmd);
  std::string labels_file, layer;
  cav_cmd->add_option("--labels", labels_file, "labels.json")->required();
  cav_cmd->add_option("--layer", layer, "Layer (default: best of a sweep over conv layers)");
  cav_cmd->add_option("--out", out_path, "Output cav.json")->required();
  cav_cmd->callback([&] {
    const auto train_set = load_data(common).split("train");
    const auto model = nn::load_checkpoint(checkpoint_dir(common));
    const auto set = labels::load(labels_file);
    const auto art = indices_for(train_set, set);
    const auto clean = clean_for(train_set, set, art);
    cav::FitOptions opt;
    opt.seed = common.seed;
    if (layer.empty()) {
      double best = -1.0;
      for (const auto& s : cav::sweep_layers(model, train_set, art, clean, opt)) {
        std::cout << s.layer << " cv_accuracy " << s.cv_accuracy << '\n';
        if (s.cv_accuracy >= best) {
          best = s.cv_accuracy;
          layer = s.layer;
        }
      }
    }
    const auto c = cav::fit_cav(model, train_set, art, clean, layer, opt);
    cav::save_cav(c, out_path);
    std::cout << "layer " << c.layer << " cv_accuracy " << c.cv_accuracy << " -> " << out_path << '\n';
  });

  // localize
  auto* loc = app.add_subcommand("localize", "Artifact heatmaps and masks from a CAV");
  add_common(loc);
  add_checkpoint(loc);
  std::string cav_file;
  double quantile = 0.85;
  std::size_t dilation = 2;
  loc->add_option("--labels", labels_file, "labels.json")->required();
  loc->add_option("--cav", cav_file, "cav.json")->required();
  loc->add_option("--quantile", quantile)->capture_default_str();
  loc->add_option("--dilation", dilation)->capture_default_str();
  loc->add_option("--out", out_dir, "Output directory (masks/, heatmaps/)")->required();
  loc->callback([&] {
    const auto train_set = load_data(common).split("train");
    const auto model = nn::load_checkpoint(checkpoint_dir(common));
    const auto c = cav::load_cav(cav_file);
    fs::create_directories(fs::path(out_dir) / "masks");
    fs::create_directories(fs::path(out_dir) / "heatmaps");
    std::size_t written = 0;
    for (auto i : indices_for(train_set, labels::load(labels_file))) {
      const auto& s = train_set.samples[i];
      const Tensor heat = xai::spatial_map(cav::localize_artifact(model, train_set.input(i), c));
      xai::write_heatmap(fs::path(out_dir) / "heatmaps" / (s.id + ".png"), heat);
      const Tensor mask = cav::binarize_mask(heat, quantile, dilation);
      if (mask.sum() <= 0.0) {
        std::cerr << "warning: empty mask for " << s.id << '\n';
        continue;
      }
      io::write_mask_png(fs::path(out_dir) / "masks" / (s.id + ".png"), mask);
      ++written;
    }
    std::cout << written << " masks in " << out_dir << "/masks\n";
  });

  // correct
  auto* corr = app.add_subcommand("correct", "Fine-tune a checkpoint with a correction method");
  add_common(corr);
  add_checkpoint(corr);
  revise::CorrectionConfig corr_cfg;
  corr_cfg.method = revise::Method::RrrCosine;
  corr_cfg.lambda = 100.0f;
  std::string method = "rrr-cosine", masks_dir;
  corr->add_option("--method", method, "vanilla, rrr, rrr-cosine, cdep, aclarc or pclarc")
      ->capture_default_str();
  corr->add_option("--lambda", corr_cfg.lambda)->capture_default_str();
  corr->add_option("--epochs", corr_cfg.epochs)->capture_default_str();
  corr->add_option("--lr", corr_cfg.learning_rate)->capture_default_str();
  corr->add_option("--masks", masks_dir, "Mask directory (<id>.png)");
  corr->add_option("--cav", cav_file, "cav.json (ClArC methods)");
  corr->add_option("--out", out_dir, "Output checkpoint directory")->required();
  corr->callback([&] {
    const auto all = load_data(common);
    const auto tr = all.split("train");
    const auto val = all.split("val");
    const auto model = nn::load_checkpoint(checkpoint_dir(common));
    corr_cfg.method = revise::parse_method(method);
    corr_cfg.seed = common.seed;
    revise::MaskSet masks;
    if (!masks_dir.empty()) {
      for (const auto& e : fs::directory_iterator(masks_dir))
        if (e.path().extension() == ".png")
          masks.masks.emplace(e.path().stem().string(), io::read_mask_png(e.path()));
    }
    std::optional<cav::Cav> c;
    if (!cav_file.empty()) c = cav::load_cav(cav_file);
    const auto result = revise::finetune_correct(model, tr, corr_cfg, masks_dir.empty() ? nullptr : &masks,
                                                 c ? &*c : nullptr, {}, val.empty() ? nullptr : &val);
    nn::save_checkpoint(result.model, out_dir,
                        {{"method", method}, {"lambda", corr_cfg.lambda}, {"epochs", corr_cfg.epochs}},
                        common.seed);
    revise::write_loss_log(result.history, fs::path(out_dir) / "loss.csv");
    if (result.inference_hook) {
      std::cout << "pclarc leaves the weights unchanged; pass --pclarc-cav " << cav_file
                << " to evaluate to apply the projection\n";
    }
    if (!result.zero_mask_samples.empty()) {
      std::cerr << "warning: " << result.zero_mask_samples.size() << " samples had empty masks\n";
    }
  });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Metrics on the original and poisoned test sets");
  add_common(ev);
  add_checkpoint(ev);
  std::string artifact = "clever_hans", pclarc_cav;
  ev->add_option("--artifact", artifact, "Artifact to poison the test set with")->capture_default_str();
  ev->add_option("--masks", masks_dir, "Training masks for intrinsic artifacts");
  ev->add_option("--pclarc-cav", pclarc_cav, "Apply the p-ClArC projection for this CAV");
  ev->add_option("--out", out_dir, "Report directory")->required();
  ev->callback([&] {
    const auto all = load_data(common);
    const auto test = all.split("test");
    const auto model = nn::load_checkpoint(checkpoint_dir(common));
    const std::uint64_t seed = derive_seed(common.seed, hash_string("evaluate:" + artifact));
    std::optional<data::Dataset> poisoned;
    std::ifstream meta_in(paths_of(common).dataset() / "dataset.json");
    const json meta = json::parse(meta_in, nullptr, false);
    if (!meta.is_discarded() && meta.contains("meta") && meta["meta"].contains("bench")) {
      for (const auto& spec : bench::config_from_json(meta["meta"]["bench"]).artifacts)
        if (spec.name == artifact) poisoned = eval::poison_synthetic(test, spec, seed);
    }
    if (!poisoned) {
      if (masks_dir.empty()) throw std::runtime_error("artifact is not synthetic; pass --masks");
      const auto tr = all.split("train");
      std::vector<cav::Patch> pool;
      for (const auto& e : fs::directory_iterator(masks_dir)) {
        const auto i = tr.find(e.path().stem().string());
        if (i && e.path().extension() == ".png")
          pool.push_back(cav::crop_artifact(tr.samples[*i].image, io::read_mask_png(e.path())));
      }
      poisoned = eval::poison_intrinsic(test, pool, artifact, seed);
    }
    std::optional<nn::InferenceHook> hook;
    if (!pclarc_cav.empty()) hook = revise::pclarc_hook(model, cav::load_cav(pclarc_cav));
    const auto* h = hook ? &*hook : nullptr;
    const auto frac = eval::artifact_relevance_fraction(model, *poisoned, nullptr, false, h);
    eval::EvaluationReport rep;
    rep.run_id = fs::absolute(common.run_dir).lexically_normal().filename().string();
    rep.method = pclarc_cav.empty() ? "checkpoint" : "pclarc";
    rep.seed = common.seed;
    rep.artifact = artifact;
    rep.dataset = "test";
    rep.artifact_relevance_pct = frac.mean_pct;
    rep.relevance_samples = frac.per_sample_pct.size();
    rep.relevance_excluded = frac.excluded;
    rep.original = eval::classification_metrics(model, test, h);
    rep.poisoned = eval::classification_metrics(model, *poisoned, h);
    eval::write_report(rep, out_dir);
    std::cout << "artifact relevance " << rep.artifact_relevance_pct << "%, F1 poisoned "
              << rep.poisoned.macro_f1_pct << ", F1 original " << rep.original.macro_f1_pct << '\n';
  });

  // lifecycle
  auto* life = app.add_subcommand("lifecycle", "Run or resume the reveal-label-revise loop");
  add_common(life);
  std::string config_file, lambda_str, epochs_str;
  bool oracle = false, finish = false, no_reveal = false;
  life->add_option("--config", config_file, "key = value configuration file");
  life->add_option("--method", method, "Correction method");
  life->add_option("--lambda", lambda_str, "Penalty strength");
  life->add_option("--epochs", epochs_str, "Fine-tuning epochs per iteration");
  life->add_option("--layer", layer, "CAV layer");
  life->add_flag("--oracle", oracle, "Label artifacts from ground truth");
  life->add_flag("--finish", finish, "Close the run when no new labels are pending");
  life->add_flag("--no-reveal", no_reveal, "Skip the reveal step and bundle export");
  auto* life_seed = life->get_option("--seed");

  // export-bundle
  auto* exp = app.add_subcommand("export-bundle", "Rebuild the inspection bundle");
  add_common(exp);
  exp->callback([&] {
    lifecycle::RunLock lock(common.run_dir);
    const json index = bundle::export_inspection_bundle(common.run_dir);
    std::cout << "bundle with " << index["galleries"].size() << " galleries and "
              << index["spray"].size() << " SpRAy reports in " << paths_of(common).bundle().string()
              << '\n';
  });

  // serve
  auto* serve = app.add_subcommand("serve", "Serve the bundle and accept label submissions");
  add_common(serve);
  server::ServerOptions server_opts;
  std::string static_dir;
  serve->add_option("--host", server_opts.host)->capture_default_str();
  serve->add_option("--port", server_opts.port)->capture_default_str();
  serve->add_option("--static", static_dir, "Directory of UI files served at /");
  serve->callback([&] {
    server_opts.static_dir = static_dir;
    server::Server srv(common.run_dir, server_opts);
    const int port = srv.bind();
    std::cout << "serving " << common.run_dir << " on http://" << server_opts.host << ":" << port
              << std::endl;
    srv.run();
  });

  // import-labels
  auto* imp = app.add_subcommand("import-labels", "Validate and register a labels.json file");
  add_common(imp);
  std::string import_file;
  imp->add_option("file", import_file, "labels.json")->required()->check(CLI::ExistingFile);
  imp->callback([&] {
    const auto rec = lifecycle::import_artifact_labels(common.run_dir, import_file);
    std::cout << "registered '" << rec.artifact_name << "' (" << rec.sample_count << " samples) as "
              << rec.path << '\n';
  });

  int exit_code = 0;
  life->callback([&] {
    config::KeyValues kv;
    if (!config_file.empty()) kv = config::KeyValues::load(config_file);
    const auto unknown = kv.unknown_keys(lifecycle::LifecycleConfig::known_keys());
    if (!unknown.empty()) throw config::ConfigError("unknown configuration key: " + unknown.front());
    if (life_seed->count()) kv.set("seed", std::to_string(common.seed));
    if (life->get_option("--method")->count()) kv.set("method", method);
    if (!lambda_str.empty()) kv.set("lambda", lambda_str);
    if (!epochs_str.empty()) kv.set("epochs", epochs_str);
    if (!layer.empty()) kv.set("layer", layer);
    if (oracle) kv.set("oracle", "true");
    if (finish) kv.set("finish", "true");
    if (no_reveal) kv.set("reveal", "false");
    const auto cfg = lifecycle::LifecycleConfig::from_keyvalues(kv);
    const auto result = lifecycle::run_lifecycle(common.run_dir, cfg);
    std::cout << result.message << '\n';
    const auto& m = result.manifest;
    if (!m.iterations.empty()) std::cout << lifecycle::summary_markdown(m);
    if (result.status == lifecycle::RunStatus::AwaitingLabels) exit_code = kExitAwaitingLabels;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return exit_code;
}
