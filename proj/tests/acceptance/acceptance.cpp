// End-to-end acceptance criteria P1-P10. Prints one PASS/FAIL line per
// criterion and exits non-zero when any fails.
//
//   r2r_acceptance [--only P1,P4,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "r2r/attribution.hpp"
#include "r2r/bench.hpp"
#include "r2r/cav.hpp"
#include "r2r/evaluate.hpp"
#include "r2r/lifecycle.hpp"
#include "r2r/nn.hpp"
#include "r2r/reveal.hpp"
#include "r2r/revise.hpp"
#include "r2r/rng.hpp"

namespace fs = std::filesystem;
using namespace r2r;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Tensor uniform_tensor(Shape shape, std::uint64_t seed, float lo, float hi) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<float>(uniform(rng, lo, hi));
  return t;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---- shared fixtures -------------------------------------------------------

nn::TrainConfig vanilla_recipe(std::uint64_t seed) {
  nn::TrainConfig tc;
  tc.optimizer = nn::Optimizer::Sgd;
  tc.learning_rate = 0.005f;
  tc.momentum = 0.9f;
  tc.epochs = 20;
  tc.batch_size = 32;
  tc.seed = seed;
  return tc;
}

struct Bench {
  bench::BenchConfig cfg;
  data::Dataset train, val, test;
  nn::Model model;
};

Bench make_bench(bench::BenchConfig cfg) {
  Bench b;
  b.cfg = std::move(cfg);
  const data::Dataset all = bench::generate_synthetic_dataset(b.cfg);
  b.train = all.split("train");
  b.val = all.split("val");
  b.test = all.split("test");
  b.model = nn::build_model(nn::mini_cnn(all.channels, all.height, all.num_classes), b.cfg.seed);
  nn::train(b.model, b.train, vanilla_recipe(b.cfg.seed));
  return b;
}

std::map<std::uint64_t, std::unique_ptr<Bench>> g_benches;

// Default benchmark (4 classes, tag on half of class 0) with a vanilla model.
const Bench& default_bench(std::uint64_t seed) {
  auto& slot = g_benches[seed];
  if (!slot) {
    bench::BenchConfig cfg;
    cfg.seed = seed;
    slot = std::make_unique<Bench>(make_bench(cfg));
  }
  return *slot;
}

struct ArtifactSplit {
  std::vector<std::size_t> artifact;
  std::vector<std::size_t> clean;  // unflagged samples of the artifact's class
};

ArtifactSplit artifact_split(const data::Dataset& d, const std::string& name) {
  ArtifactSplit s;
  std::optional<std::size_t> cls;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.samples[i].artifact == name) {
      s.artifact.push_back(i);
      cls = d.samples[i].label;
    }
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.samples[i].artifact.empty() && cls && d.samples[i].label == *cls) s.clean.push_back(i);
  return s;
}

// Best conv layer of the sweep; ties go to the deeper layer.
std::string best_layer(const nn::Model& m, const data::Dataset& d, const ArtifactSplit& s) {
  std::string best;
  double score = -1.0;
  for (const auto& l : cav::sweep_layers(m, d, s.artifact, s.clean))
    if (l.cv_accuracy >= score) {
      score = l.cv_accuracy;
      best = l.layer;
    }
  return best;
}

revise::MaskSet cav_masks(const nn::Model& m, const data::Dataset& d, const ArtifactSplit& s,
                          const cav::Cav& c, const std::string& name) {
  revise::MaskSet ms;
  ms.artifact_name = name;
  for (std::size_t i : s.artifact) {
    const Tensor mask = cav::binarize_mask(xai::spatial_map(cav::localize_artifact(m, d.input(i), c)));
    if (mask.abs_sum() > 0) ms.masks[d.samples[i].id] = mask;
  }
  return ms;
}

// ---- criteria ----------------------------------------------------------------

Outcome p1_lrp_conservation() {
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 32, 4), 1);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Tensor x = uniform_tensor({1, 1, 32, 32}, 1000 + s, -1.0f, 1.0f);
    const std::size_t target = nn::argmax_rows(m.forward(x))[0];
    const auto a = xai::lrp_attribute(m, x, target);
    const double logit = a.target_logit_value;
    worst = std::max(worst, std::fabs(a.input_relevance.sum() - logit) / std::fabs(logit));
  }
  return {worst < 1e-3, "max rel err " + fmt("%.3g", worst) + " over 50 inputs"};
}

Outcome p2_cav_equivalence() {
  const Bench& b = default_bench(0);
  const nn::Model& m = b.model;
  const ArtifactSplit s = artifact_split(b.train, b.cfg.artifacts[0].name);
  double worst = 0.0;
  std::string per_layer;
  for (std::size_t l : m.conv_layers()) {
    const cav::Cav c = cav::fit_cav(m, b.train, s.artifact, s.clean, m.layer(l).name);
    // Cut after layer l, flatten, and a linear readout sum_{c,p} a[c,p] * h[c].
    nn::ModelSpec spec = m.spec();
    spec.layers.resize(l + 1);
    spec.layers.push_back(nn::LayerDesc::flatten());
    spec.layers.back().name = "probe_flatten";
    spec.layers.push_back(nn::LayerDesc::dense(1));
    spec.layers.back().name = "probe";
    spec.num_classes = 1;
    std::vector<nn::Parameter> params;
    for (const auto& p : m.params())
      if (p.layer <= l) params.push_back(p);
    const Shape& out = m.output_shape(l);
    const std::size_t positions = shape_numel(out) / out[0];
    Tensor w({1, shape_numel(out)});
    for (std::size_t ch = 0; ch < out[0]; ++ch)
      for (std::size_t p = 0; p < positions; ++p) w[ch * positions + p] = static_cast<float>(c.direction[ch]);
    params.push_back({"probe.weight", l + 2, w});
    params.push_back({"probe.bias", l + 2, Tensor::zeros({1})});
    const nn::Model head(spec, params);

    double layer_worst = 0.0;
    for (std::size_t k = 0; k < 20; ++k) {
      const Tensor x = b.train.input(s.artifact[k % s.artifact.size()]);
      const Tensor a = cav::localize_artifact(m, x, c);
      const Tensor r = xai::lrp_attribute(head, x, 0).input_relevance;
      layer_worst = std::max(layer_worst, static_cast<double>(max_abs_diff(a, r)));
    }
    worst = std::max(worst, layer_worst);
    per_layer += " " + m.layer(l).name + "=" + fmt("%.2g", layer_worst);
  }
  return {worst <= 1e-5, "max abs diff" + per_layer + " (20 samples)"};
}

// Three-sample softplus problem for the finite-difference checks.
struct GradProblem {
  nn::Model model;
  data::Dataset data;
  revise::MaskSet masks;
};

GradProblem grad_problem() {
  GradProblem g;
  g.model = nn::build_model(nn::mini_cnn(1, 16, 3, nn::LayerKind::Softplus), 21);
  for (auto& p : g.model.params())
    if (p.value.rank() == 1) p.value = uniform_tensor(p.value.shape(), 22 + p.layer, -0.1f, 0.1f);
  g.data.num_classes = 3;
  g.data.channels = 1;
  g.data.height = g.data.width = 16;
  g.masks.artifact_name = "tag";
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string id = "g" + std::to_string(i);
    g.data.samples.push_back({id, uniform_tensor({1, 16, 16}, 30 + i, 0, 1), i, {}, true, "tag", "train"});
    Tensor mask({16, 16});
    for (std::size_t y = 2 + 3 * i; y < 7 + 3 * i; ++y)
      for (std::size_t x = 4; x < 11; ++x) mask[y * 16 + x] = 1.0f;
    g.masks.masks[id] = mask;
  }
  return g;
}

ad::Var objective(ad::Tape& tape, const GradProblem& g, std::span<const ad::Var> params,
                  const nn::AuxLoss& aux) {
  const auto idx = g.data.all_indices();
  const ad::Var x = tape.leaf(g.data.batch(idx));
  ad::Var total = ad::cross_entropy(g.model.forward(tape, x, params).back(), g.data.labels(idx));
  const float per_sample = aux.weight / static_cast<float>(idx.size());
  for (std::size_t i : idx) {
    nn::AuxContext ctx{tape, g.model, params, g.data, i};
    if (const auto v = aux.fn(ctx)) total = ad::add(total, ad::scale(*v, per_sample));
  }
  return total;
}

// Largest relative error between the analytic directional derivative along
// each parameter block's gradient and a central difference.
double gradient_error(revise::Method method, float lambda) {
  const GradProblem g = grad_problem();
  const nn::AuxLoss aux = revise::make_aux_loss(method, lambda, g.masks);
  ad::Tape tape;
  std::vector<ad::Var> params;
  for (const auto& p : g.model.params()) params.push_back(tape.leaf(p.value));
  const auto grads = tape.gradient(objective(tape, g, params, aux), params);
  auto loss_at = [&](std::size_t k, const Tensor& dir, float t) {
    ad::Tape tp;
    std::vector<ad::Var> ps;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor v = g.model.params()[i].value;
      if (i == k)
        for (std::size_t j = 0; j < v.numel(); ++j) v[j] += t * dir[j];
      ps.push_back(tp.leaf(v));
    }
    return static_cast<double>(objective(tp, g, ps, aux).value()[0]);
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& gk = grads[k].value();
    const double norm = std::sqrt((gk * gk).sum());
    if (norm == 0.0) return INFINITY;
    const Tensor dir = gk * static_cast<float>(1.0 / norm);
    // Max-pool switches make the loss piecewise smooth: use the step pair
    // whose central differences agree best, i.e. that crossed no kink.
    std::vector<double> fds;
    for (float h = 1e-2f; h > 2e-4f; h *= 0.5f) fds.push_back((loss_at(k, dir, h) - loss_at(k, dir, -h)) / (2.0 * h));
    double fd = fds.back(), spread = INFINITY;
    for (std::size_t i = 1; i < fds.size(); ++i) {
      const double d = std::fabs(fds[i] - fds[i - 1]);
      if (d < spread) {
        spread = d;
        fd = fds[i];
      }
    }
    worst = std::max(worst, std::fabs(fd - norm) / std::max(std::fabs(fd), norm));
  }
  return worst;
}

Outcome p3_gradient_oracles() {
  const auto t0 = Clock::now();
  const double rrr = gradient_error(revise::Method::RrrCosine, 10.0f);
  const double cdep = gradient_error(revise::Method::Cdep, 1.0f);
  const double secs = seconds_since(t0);
  return {rrr < 1e-3 && cdep < 1e-3 && secs < 60.0,
          "rel err rrr-cosine " + fmt("%.2g", rrr) + ", cdep " + fmt("%.2g", cdep) + ", " +
              fmt("%.1f", secs) + " s"};
}

Outcome p4_cd_completeness() {
  const Bench& b = default_bench(0);
  const ArtifactSplit s = artifact_split(b.train, b.cfg.artifacts[0].name);
  double worst = 0.0;
  for (std::size_t k = 0; k < 20; ++k) {
    const std::size_t i = s.artifact[k];
    const Tensor x = b.train.input(i);
    nn::ActivationCache cache;
    b.model.forward(x, &cache);
    const auto cd = revise::cd_decompose(b.model, x, *b.train.samples[i].truth_mask);
    for (std::size_t l = 0; l < b.model.num_layers(); ++l) {
      const double scale = std::max(1e-6f, cache.outputs[l].max_abs());
      worst = std::max(worst, max_abs_diff(cd.relevant[l] + cd.irrelevant[l], cache.outputs[l]) / scale);
    }
  }
  return {worst <= 1e-4, "max rel err " + fmt("%.2g", worst) + " over 20 samples, every layer"};
}

Outcome p5_pclarc() {
  const Bench& b = default_bench(0);
  const ArtifactSplit s = artifact_split(b.train, b.cfg.artifacts[0].name);
  const cav::Cav c = cav::fit_cav(b.model, b.train, s.artifact, s.clean, best_layer(b.model, b.train, s));
  revise::CorrectionConfig cfg;
  cfg.method = revise::Method::PClarc;
  const auto res = revise::finetune_correct(b.model, b.train, cfg, nullptr, &c);
  bool same_params = res.inference_hook.has_value();
  for (std::size_t i = 0; i < b.model.params().size(); ++i)
    same_params = same_params && res.model.params()[i].value == b.model.params()[i].value;
  if (!res.inference_hook) return {false, "no inference hook"};
  const nn::InferenceHook& hook = *res.inference_hook;
  double proj_err = 0.0, idem_err = 0.0;
  for (std::size_t i : s.artifact) {
    nn::ActivationCache cache;
    res.model.forward(b.train.input(i), &cache, &hook);
    Tensor h = cache.outputs[hook.layer];
    proj_err = std::max(proj_err, std::fabs(cav::spatial_projection(h, c.direction) - c.mu_clean));
    Tensor again = h;
    hook.apply(again);
    idem_err = std::max(idem_err, static_cast<double>(max_abs_diff(again, h)));
  }
  return {proj_err <= 1e-5 && idem_err <= 1e-5 && same_params,
          "layer " + c.layer + ", |proj - mu_clean| " + fmt("%.2g", proj_err) + ", idempotence " +
              fmt("%.2g", idem_err) + ", params " + (same_params ? "unchanged" : "CHANGED") + " (" +
              std::to_string(s.artifact.size()) + " samples)"};
}

Outcome p6_spray_recovery() {
  const Bench& b = default_bench(0);
  const auto t0 = Clock::now();
  const auto cs = reveal::spray_class(b.model, b.train, 0, reveal::RevealConfig{});
  const double secs = seconds_since(t0);
  if (cs.report.ranking.empty()) return {false, "no clusters"};
  const auto& top = cs.report.ranking.front();
  std::size_t tagged = 0;
  for (std::size_t row : top.members) tagged += b.train.samples[cs.indices[row]].artifact_flag.value_or(false);
  const double purity = static_cast<double>(tagged) / static_cast<double>(top.size);
  return {purity >= 0.8 && secs < 120.0,
          "k=" + std::to_string(cs.report.num_clusters) + ", top cluster size " + std::to_string(top.size) +
              ", artifact purity " + fmt("%.3f", purity) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome p7_cav_localization() {
  const Bench& b = default_bench(0);
  const auto t0 = Clock::now();
  const ArtifactSplit s = artifact_split(b.train, b.cfg.artifacts[0].name);
  const std::string layer = best_layer(b.model, b.train, s);
  const cav::Cav c = cav::fit_cav(b.model, b.train, s.artifact, s.clean, layer);
  std::size_t good = 0;
  for (std::size_t i : s.artifact) {
    const Tensor mask = cav::binarize_mask(xai::spatial_map(cav::localize_artifact(b.model, b.train.input(i), c)));
    good += cav::iou(mask, *b.train.samples[i].truth_mask) >= 0.5;
  }
  const double rate = static_cast<double>(good) / static_cast<double>(s.artifact.size());
  const double secs = seconds_since(t0);
  return {rate >= 0.8 && secs < 120.0,
          "layer " + layer + ", IoU>=0.5 on " + fmt("%.3f", rate) + " of " + std::to_string(s.artifact.size()) +
              " samples, " + fmt("%.1f", secs) + " s"};
}

struct SeedResult {
  bool a = false, b = false, c = false;
  std::string detail;
};

SeedResult p8_seed(std::uint64_t seed) {
  const Bench& b = default_bench(seed);
  const auto& spec = b.cfg.artifacts[0];
  const data::Dataset pois_test =
      eval::poison_synthetic(b.test, spec, derive_seed(seed, hash_string("evaluate:" + spec.name)));
  const data::Dataset pois_val =
      eval::poison_synthetic(b.val, spec, derive_seed(seed, hash_string("validate:" + spec.name)));

  const double v_orig = eval::classification_metrics(b.model, b.test).accuracy_pct;
  const double v_pois = eval::classification_metrics(b.model, pois_test).accuracy_pct;
  const double v_rel = eval::artifact_relevance_fraction(b.model, pois_test).mean_pct;
  const double v_val = eval::classification_metrics(b.model, b.val).accuracy_pct;

  const ArtifactSplit s = artifact_split(b.train, spec.name);
  const cav::Cav c = cav::fit_cav(b.model, b.train, s.artifact, s.clean, best_layer(b.model, b.train, s));
  const revise::MaskSet masks = cav_masks(b.model, b.train, s, c, spec.name);

  // lambda with the best poisoned validation accuracy among those losing at
  // most 5 points of clean validation accuracy.
  std::optional<nn::Model> chosen;
  float chosen_lambda = 0.0f;
  double chosen_score = -1.0;
  for (float lambda : revise::kLambdaGrid) {
    revise::CorrectionConfig cfg;
    cfg.method = revise::Method::RrrCosine;
    cfg.lambda = lambda;
    cfg.epochs = 10;
    cfg.seed = derive_seed(seed, hash_string("correct:" + spec.name));
    try {
      auto r = revise::finetune_correct(b.model, b.train, cfg, &masks, nullptr);
      const double val = eval::classification_metrics(r.model, b.val).accuracy_pct;
      const double pv = eval::classification_metrics(r.model, pois_val).accuracy_pct;
      if (v_val - val <= 5.0 && pv > chosen_score) {
        chosen_score = pv;
        chosen_lambda = lambda;
        chosen = std::move(r.model);
      }
    } catch (const nn::TrainingDivergedError&) {
    }
  }
  SeedResult out;
  out.a = v_orig - v_pois >= 30.0;
  std::ostringstream os;
  os << "seed " << seed << ": vanilla orig " << fmt("%.1f", v_orig) << " pois " << fmt("%.1f", v_pois) << " rel "
     << fmt("%.1f", v_rel);
  if (!chosen) {
    os << "; no admissible lambda";
    out.detail = os.str();
    return out;
  }
  const double r_orig = eval::classification_metrics(*chosen, b.test).accuracy_pct;
  const double r_pois = eval::classification_metrics(*chosen, pois_test).accuracy_pct;
  const double r_rel = eval::artifact_relevance_fraction(*chosen, pois_test).mean_pct;
  out.b = r_rel <= 0.5 * v_rel && r_pois - v_pois >= 0.5 * (v_orig - v_pois);
  out.c = v_orig - r_orig <= 5.0;
  os << "; rrr-cosine lambda " << chosen_lambda << " orig " << fmt("%.1f", r_orig) << " pois "
     << fmt("%.1f", r_pois) << " rel " << fmt("%.1f", r_rel) << " [a " << (out.a ? "ok" : "no") << ", b "
     << (out.b ? "ok" : "no") << ", c " << (out.c ? "ok" : "no") << "]";
  out.detail = os.str();
  return out;
}

Outcome p8_table_pattern() {
  const auto t0 = Clock::now();
  std::size_t passed = 0;
  std::string detail;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const SeedResult r = p8_seed(seed);
    passed += r.a && r.b && r.c;
    detail += " | " + r.detail;
  }
  const double secs = seconds_since(t0);
  return {passed >= 2 && secs < 600.0,
          std::to_string(passed) + "/3 seeds pass, " + fmt("%.0f", secs) + " s" + detail};
}

Outcome p9_iterative_lifecycle() {
  bench::BenchConfig cfg;
  cfg.seed = 0;
  bench::ArtifactSpec second;
  second.name = "ok_stamp";
  second.glyph.text = "OK";
  second.glyph.box_value = 0.0f;
  second.glyph.letter_value = 1.0f;
  second.target_class = 1;
  second.probability = 0.5;
  cfg.artifacts.push_back(second);

  const fs::path root = fs::temp_directory_path() / ("r2r_acceptance_p9_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const data::Dataset all = bench::generate_synthetic_dataset(cfg);
  bench::save_image_folder(all, root / "dataset", {{"bench", bench::config_to_json(cfg)}});
  nn::Model m = nn::build_model(nn::mini_cnn(all.channels, all.height, all.num_classes), cfg.seed);
  nn::train(m, all.split("train"), vanilla_recipe(cfg.seed));
  nn::save_checkpoint(m, root / "model");

  lifecycle::LifecycleConfig lc;
  lc.oracle = true;
  lc.reveal = false;
  const auto res = lifecycle::run_lifecycle(root, lc);
  fs::remove_all(root);

  std::vector<const lifecycle::IterationRecord*> done;
  for (const auto& it : res.manifest.iterations)
    if (it.artifact) done.push_back(&it);
  if (done.size() < 2) return {false, "only " + std::to_string(done.size()) + " corrected iterations"};
  bool own = true;
  std::ostringstream os;
  for (const auto* it : done) {
    const double before = it->relevance_before.at(*it->artifact);
    const double after = it->scores.at(*it->artifact).relevance_pct;
    own = own && after < before;
    os << "iter " << it->iteration << " " << *it->artifact << " " << fmt("%.1f", before) << " -> "
       << fmt("%.1f", after) << "; ";
  }
  const std::string& first = *done[0]->artifact;
  const double post = done[0]->scores.at(first).relevance_pct;
  const double later = done[1]->scores.at(first).relevance_pct;
  const bool retained = later <= 1.2 * post;
  os << first << " after iter " << done[1]->iteration << ": " << fmt("%.1f", later) << " (limit "
     << fmt("%.1f", 1.2 * post) << ")";
  return {own && retained, os.str()};
}

Outcome p10_metric_arithmetic() {
  nn::ModelSpec spec;
  spec.in_channels = 1;
  spec.in_height = spec.in_width = 4;
  spec.num_classes = 2;
  spec.layers = {nn::LayerDesc::flatten(), nn::LayerDesc::dense(2)};
  nn::Model m = nn::build_model(spec, 3);
  for (auto& p : m.params()) {
    if (p.value.rank() == 2) p.value = uniform_tensor(p.value.shape(), 4, -0.01f, 0.01f);
    else p.value = Tensor::from({2}, {100.0f, 0.0f});
  }
  data::Dataset d;
  d.num_classes = 2;
  d.class_names = {"a", "b"};
  d.channels = 1;
  d.height = d.width = 4;
  for (std::size_t i = 0; i < 100; ++i) {
    data::Sample s{"s" + std::to_string(100 + i), uniform_tensor({1, 4, 4}, 200 + i, 0, 1), i % 2, {}, false, "", "test"};
    Tensor mask({4, 4});
    mask[5] = mask[6] = 1.0f;
    s.truth_mask = mask;
    s.artifact_flag = true;
    s.artifact = "tag";
    d.samples.push_back(std::move(s));
  }
  eval::EvaluationReport r;
  r.run_id = "acceptance";
  r.method = "vanilla";
  r.artifact = "tag";
  r.dataset = "constant";
  r.original = eval::classification_metrics(m, d);
  r.poisoned = r.original;
  const auto frac = eval::artifact_relevance_fraction(m, d);
  r.artifact_relevance_pct = frac.mean_pct;
  r.relevance_samples = frac.per_sample_pct.size();
  r.relevance_excluded = frac.excluded;
  const nlohmann::json j = eval::report_to_json(r);
  std::size_t nulls = 0;
  std::function<void(const nlohmann::json&)> walk = [&](const nlohmann::json& v) {
    if (v.is_null()) ++nulls;
    if (v.is_structured())
      for (const auto& e : v) walk(e);
  };
  walk(j);
  const bool acc_ok = std::fabs(r.original.accuracy_pct - 50.0) < 1e-9;
  const bool f1_ok = std::fabs(r.original.macro_f1_pct - 100.0 / 3.0) < 1e-9;
  return {acc_ok && f1_ok && nulls == 0 && r.relevance_samples > 0,
          "accuracy " + fmt("%.4f", r.original.accuracy_pct) + ", macro-F1 " + fmt("%.4f", r.original.macro_f1_pct) +
              ", null fields " + std::to_string(nulls) + ", relevance samples " + std::to_string(r.relevance_samples)};
}

struct Criterion {
  const char* id;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string id; std::getline(ss, id, ',');) only.insert(id);
    } else {
      std::fprintf(stderr, "usage: %s [--only P1,P2,...]\n", argv[0]);
      return 2;
    }
  }
  const std::vector<Criterion> criteria = {
      {"P1", "LRP conservation", p1_lrp_conservation},
      {"P2", "CAV backward pass equals probe explanation", p2_cav_equivalence},
      {"P3", "gradient oracles", p3_gradient_oracles},
      {"P4", "CD completeness", p4_cd_completeness},
      {"P5", "p-ClArC postcondition", p5_pclarc},
      {"P6", "SpRAy recovery", p6_spray_recovery},
      {"P7", "CAV localization quality", p7_cav_localization},
      {"P8", "artifact correction pattern", p8_table_pattern},
      {"P9", "iterative lifecycle", p9_iterative_lifecycle},
      {"P10", "metric arithmetic", p10_metric_arithmetic},
  };
  std::size_t failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.title, o.detail.c_str(),
                seconds_since(t0));
  }
  return failed == 0 ? 0 : 1;
}
