#include "r2r/revise.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "r2r/rng.hpp"
#include "test_util.hpp"

namespace r2r::revise {
namespace {

using nn::LayerDesc;
using r2r::testing::random_tensor;
using r2r::testing::rel_err;

// flatten -> dense(classes) on a [1, 2, 2] input with the given weights.
nn::Model linear_model(std::vector<float> w, std::vector<float> b) {
  nn::ModelSpec s;
  s.in_channels = 1;
  s.in_height = s.in_width = 2;
  s.num_classes = b.size();
  s.layers = {LayerDesc::flatten(), LayerDesc::dense(b.size())};
  nn::Model m = nn::build_model(s, 0);
  const std::size_t k = b.size();
  m.params()[0].value = Tensor({k, 4}, std::move(w));
  m.params()[1].value = Tensor({k}, std::move(b));
  return m;
}

struct Bound {
  ad::Tape tape;
  std::vector<ad::Var> params;
  explicit Bound(const nn::Model& m) {
    for (const auto& p : m.params()) params.push_back(tape.leaf(p.value));
  }
};

double rrr_value(const nn::Model& m, const Tensor& x, std::size_t label, const Tensor& mask, RrrVariant v) {
  Bound b(m);
  const auto loss = rrr_loss(b.tape, m, b.params, b.tape.leaf(x), label, mask, v);
  return loss ? loss->value()[0] : std::nan("");
}

TEST(Rrr, CosineParallelAndOrthogonal) {
  const nn::Model m = linear_model({1, 0, 1, 0, 0, 0, 0, 0}, {0, 0});
  const Tensor x = Tensor::from({1, 1, 2, 2}, {1, 1, 1, 1});
  EXPECT_NEAR(rrr_value(m, x, 0, Tensor::from({2, 2}, {1, 0, 1, 0}), RrrVariant::Cosine), 1.0, 1e-6);
  EXPECT_NEAR(rrr_value(m, x, 0, Tensor::from({2, 2}, {0, 1, 0, 1}), RrrVariant::Cosine), 0.0, 1e-7);
}

TEST(Rrr, CosineUsesPredictedClassLowestIndexOnTies) {
  // Equal logits: class 0 wins, so only its gradient matters.
  const nn::Model m = linear_model({1, 0, 0, 0, 0, 0, 0, 1}, {0, 0});
  const Tensor x = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
  EXPECT_NEAR(rrr_value(m, x, 1, Tensor::from({2, 2}, {1, 0, 0, 0}), RrrVariant::Cosine), 1.0, 1e-6);
}

TEST(Rrr, OriginalWithFullMaskIsSquaredInputGradient) {
  const std::vector<float> w{0.5f, -1.0f, 2.0f, 0.0f, -0.3f, 0.7f, 0.1f, 1.5f};
  const nn::Model m = linear_model(w, {0.1f, -0.2f});
  const Tensor x = Tensor::from({1, 1, 2, 2}, {0.3f, -0.4f, 0.9f, 0.2f});
  // d CE / dx = W^T (softmax(z) - y), by hand.
  double z[2] = {0.1, -0.2};
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 4; ++i) z[k] += w[k * 4 + i] * x[i];
  const double e0 = std::exp(z[0]), e1 = std::exp(z[1]);
  const double p[2] = {e0 / (e0 + e1), e1 / (e0 + e1)};
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double g = w[i] * (p[0] - 0.0) + w[4 + i] * (p[1] - 1.0);
    expect += g * g;
  }
  EXPECT_LT(rel_err(rrr_value(m, x, 1, Tensor({2, 2}, 1.0f), RrrVariant::Original), expect), 1e-5);
}

TEST(Rrr, ZeroMaskContributesNothing) {
  const nn::Model m = linear_model({1, 0, 1, 0, 0, 0, 0, 0}, {0, 0});
  Bound b(m);
  EXPECT_FALSE(rrr_loss(b.tape, m, b.params, b.tape.leaf(Tensor({1, 1, 2, 2}, 1.0f)), 0, Tensor({2, 2}),
                        RrrVariant::Cosine));
}

TEST(Cd, ReluRuleHandExample) {
  nn::ModelSpec s;
  s.in_channels = 1;
  s.in_height = 1;
  s.in_width = 2;
  s.num_classes = 1;
  s.layers = {LayerDesc::flatten(), LayerDesc::dense(1), LayerDesc::relu(), LayerDesc::dense(1)};
  nn::Model m = nn::build_model(s, 0);
  m.params()[0].value = Tensor::from({1, 2}, {1, 1});
  m.params()[2].value = Tensor::from({1, 1}, {1});
  // beta = 2, gamma = -1 entering the ReLU.
  const auto cd = cd_decompose(m, Tensor::from({1, 1, 2}, {2, -1}), Tensor::from({1, 2}, {1, 0}));
  EXPECT_FLOAT_EQ(cd.relevant[1][0], 2.0f);
  EXPECT_FLOAT_EQ(cd.irrelevant[1][0], -1.0f);
  EXPECT_FLOAT_EQ(cd.relevant[2][0], 1.0f);
  EXPECT_FLOAT_EQ(cd.irrelevant[2][0], 0.0f);
}

TEST(Cd, FullMaskPutsEverythingInRelevantStream) {
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 3), 5);
  const Tensor x = random_tensor({1, 1, 16, 16}, 3);
  nn::ActivationCache cache;
  m.forward(x, &cache);
  const auto cd = cd_decompose(m, x, Tensor({16, 16}, 1.0f));
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    EXPECT_LE(max_abs_diff(cd.relevant[l], cache.outputs[l]), 1e-5f) << l;
    EXPECT_EQ(cd.irrelevant[l].max_abs(), 0.0f) << l;
  }
}

TEST(Cd, LinearModelBiasSharesAddUp) {
  const nn::Model m = linear_model({0.5f, -1.0f, 2.0f, 0.3f}, {0.75f});
  const Tensor x = Tensor::from({1, 1, 2, 2}, {0.3f, -0.4f, 0.9f, 0.2f});
  const Tensor mask = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor inv = Tensor::from({2, 2}, {0, 1, 1, 0});
  const float a = cd_decompose(m, x, mask).relevant.back()[0];
  const float b = cd_decompose(m, x, inv).relevant.back()[0];
  const double f = 0.5 * 0.3 + 1.0 * 0.4 + 2.0 * 0.9 + 0.3 * 0.2 + 0.75;
  EXPECT_NEAR(a + b, f, 1e-6);
  // Masked share: |x_M|_1 = 0.5 of |x|_1 = 1.8.
  EXPECT_NEAR(a, 0.5 * 0.3 + 0.3 * 0.2 + 0.75 * 0.5 / 1.8, 1e-6);
  // Zero input: bias split half / half.
  const float z = cd_decompose(m, Tensor({1, 1, 2, 2}), mask).relevant.back()[0];
  EXPECT_FLOAT_EQ(z, 0.375f);
}

TEST(Cd, CompletenessAtEveryLayer) {
  for (auto act : {nn::LayerKind::Relu, nn::LayerKind::Softplus}) {
    nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 3, act), 6);
    for (auto& p : m.params())
      if (p.value.rank() == 1) p.value = random_tensor(p.value.shape(), 11, -0.2f, 0.2f);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Tensor x = random_tensor({1, 1, 16, 16}, 40 + s);
      Tensor mask({16, 16});
      for (std::size_t i = 0; i < 256; ++i) mask[i] = (i * 7 + s) % 5 == 0 ? 1.0f : 0.0f;
      nn::ActivationCache cache;
      m.forward(x, &cache);
      const auto cd = cd_decompose(m, x, mask);
      for (std::size_t l = 0; l < m.num_layers(); ++l) {
        const Tensor sum = cd.relevant[l] + cd.irrelevant[l];
        const double scale = std::max(1e-6f, cache.outputs[l].max_abs());
        EXPECT_LE(max_abs_diff(sum, cache.outputs[l]) / scale, 1e-4) << l;
      }
    }
  }
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 3), 6);
  EXPECT_THROW(cd_decompose(m, Tensor({1, 16, 16}), Tensor({16, 16}, 0.5f)), std::invalid_argument);
}

TEST(Cdep, HandValues) {
  EXPECT_NEAR(cdep_value(Tensor::from({1, 2}, {0, 0}), Tensor::from({1, 2}, {std::log(3.0f), 0})), 0.75, 1e-6);
  EXPECT_NEAR(cdep_value(Tensor::from({1, 3}, {1, 2, 3}), Tensor::from({1, 3}, {1, 2, 3})), 1.5, 1e-12);
  EXPECT_LT(cdep_value(Tensor::from({1, 2}, {-1e4f, -1e4f}), Tensor::from({1, 2}, {0, 0})), 1e-30);
  EXPECT_NEAR(cdep_value(Tensor::from({1, 1}, {1e4f}), Tensor::from({1, 1}, {0})), 1.0, 1e-12);
  ad::Tape t;
  const auto v = cdep_loss(t.leaf(Tensor::from({1, 2}, {0, 0})), t.leaf(Tensor::from({1, 2}, {std::log(3.0f), 0})));
  EXPECT_NEAR(v.value()[0], 0.75f, 1e-6);
}

cav::Cav random_cav(std::size_t channels, std::uint64_t seed, const std::string& layer) {
  cav::Cav c;
  c.layer = layer;
  const Tensor h = random_tensor({channels}, seed);
  const double n = std::sqrt((h * h).sum());
  for (float v : h.vec()) c.direction.push_back(v / n);
  c.mu_clean = -0.2;
  c.mu_artifact = 0.7;
  return c;
}

TEST(Clarc, ProjectionPostconditionAndIdempotence) {
  const cav::Cav c = random_cav(8, 3, "conv1");
  Tensor a = random_tensor({5, 8, 6, 6}, 4);
  clarc_shift(a, c, c.mu_clean);
  for (std::size_t n = 0; n < 5; ++n) EXPECT_NEAR(cav::spatial_projection(batch_item(a, n), c.direction), c.mu_clean, 1e-5);
  Tensor again = a;
  clarc_shift(again, c, c.mu_clean);
  EXPECT_LE(max_abs_diff(a, again), 1e-6f);
  // Dense activations.
  Tensor d = random_tensor({3, 8}, 5);
  clarc_shift(d, c, c.mu_artifact);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(cav::spatial_projection(batch_item(d, n), c.direction), 0.7, 1e-5);
  Tensor bad({1, 4, 2, 2});
  EXPECT_THROW(clarc_shift(bad, c, 0.0), ShapeError);
}

TEST(Clarc, PClarcLeavesParametersUntouched) {
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 3), 1);
  const cav::Cav c = random_cav(16, 8, "relu1");
  data::Dataset d;
  d.num_classes = 3;
  d.channels = 1;
  d.height = d.width = 16;
  d.samples.push_back({"a", random_tensor({1, 16, 16}, 1, 0, 1), 0, {}, false, "", "train"});
  CorrectionConfig cfg;
  cfg.method = Method::PClarc;
  const auto res = finetune_correct(m, d, cfg, nullptr, &c);
  ASSERT_TRUE(res.inference_hook);
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(res.model.params()[i].value, m.params()[i].value);
  nn::ActivationCache cache;
  res.model.forward(d.input(0), &cache, &*res.inference_hook);
  EXPECT_NEAR(cav::spatial_projection(cache.outputs[1], c.direction), c.mu_clean, 1e-5);
  cfg.method = Method::AClarc;
  EXPECT_THROW(finetune_correct(m, d, cfg, nullptr, nullptr), CorrectionError);
}

// Three-sample softplus problem shared by the gradient checks.
struct GradProblem {
  nn::Model model;
  data::Dataset data;
  MaskSet masks;
};

GradProblem grad_problem() {
  GradProblem g;
  nn::ModelSpec spec;
  spec.in_channels = 1;
  spec.in_height = spec.in_width = 8;
  spec.num_classes = 3;
  spec.layers = {LayerDesc::conv(4, 3, 1, 1), LayerDesc::softplus(), LayerDesc::avgpool(2, 2),
                 LayerDesc::conv(6, 3), LayerDesc::softplus(), LayerDesc::flatten(),
                 LayerDesc::dense(8), LayerDesc::softplus(), LayerDesc::dense(3)};
  g.model = nn::build_model(spec, 21);
  for (auto& p : g.model.params())
    if (p.value.rank() == 1) p.value = random_tensor(p.value.shape(), 22, -0.1f, 0.1f);
  g.data.num_classes = 3;
  g.data.channels = 1;
  g.data.height = g.data.width = 8;
  g.masks.artifact_name = "tag";
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string id = "g" + std::to_string(i);
    g.data.samples.push_back({id, random_tensor({1, 8, 8}, 30 + i, 0, 1), i, {}, true, "tag", "train"});
    Tensor mask({8, 8});
    for (std::size_t y = i; y < i + 3; ++y)
      for (std::size_t x = 2; x < 6; ++x) mask[y * 8 + x] = 1.0f;
    g.masks.masks[id] = mask;
  }
  return g;
}

ad::Var total_loss(ad::Tape& tape, const GradProblem& g, std::span<const ad::Var> params,
                   const nn::AuxLoss& aux) {
  const auto idx = g.data.all_indices();
  const ad::Var x = tape.leaf(g.data.batch(idx));
  const auto labels = g.data.labels(idx);
  ad::Var total = ad::cross_entropy(g.model.forward(tape, x, params).back(), labels);
  for (std::size_t i : idx) {
    nn::AuxContext ctx{tape, g.model, params, g.data, i};
    total = ad::add(total, ad::scale(*aux.fn(ctx), aux.weight / 3.0f));
  }
  return total;
}

void check_gradient(Method method, float lambda) {
  const GradProblem g = grad_problem();
  const nn::AuxLoss aux = make_aux_loss(method, lambda, g.masks);
  ad::Tape tape;
  std::vector<ad::Var> params;
  for (const auto& p : g.model.params()) params.push_back(tape.leaf(p.value));
  const auto grads = tape.gradient(total_loss(tape, g, params, aux), params);

  auto loss_at = [&](std::size_t k, const Tensor& dir, float t) {
    ad::Tape tp;
    std::vector<ad::Var> ps;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor v = g.model.params()[i].value;
      if (i == k)
        for (std::size_t j = 0; j < v.numel(); ++j) v[j] += t * dir[j];
      ps.push_back(tp.leaf(v));
    }
    return static_cast<double>(total_loss(tp, g, ps, aux).value()[0]);
  };
  // Directional derivative along each parameter block's own gradient.
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& gk = grads[k].value();
    const double norm = std::sqrt((gk * gk).sum());
    ASSERT_GT(norm, 0.0) << g.model.params()[k].name;
    const Tensor dir = gk * static_cast<float>(1.0 / norm);
    const float h = 5e-3f;
    const double fd = (loss_at(k, dir, h) - loss_at(k, dir, -h)) / (2.0 * h);
    EXPECT_LT(rel_err(fd, norm), 1e-3) << method_name(method) << " " << g.model.params()[k].name
                                       << " fd " << fd << " analytic " << norm;
  }
}

TEST(Gradient, CePlusRrrCosineMatchesFiniteDifferences) { check_gradient(Method::RrrCosine, 10.0f); }
TEST(Gradient, CePlusRrrMatchesFiniteDifferences) { check_gradient(Method::Rrr, 10.0f); }
TEST(Gradient, CePlusCdepMatchesFiniteDifferences) { check_gradient(Method::Cdep, 1.0f); }

data::Dataset tiny_train() {
  data::Dataset d;
  d.num_classes = 2;
  d.channels = 1;
  d.height = d.width = 8;
  for (std::size_t i = 0; i < 12; ++i)
    d.samples.push_back({"t" + std::to_string(10 + i), random_tensor({1, 8, 8}, 60 + i, 0, 1), i % 2, {}, false, "", "train"});
  return d;
}

nn::Model tiny_model() {
  nn::ModelSpec s;
  s.in_channels = 1;
  s.in_height = s.in_width = 8;
  s.num_classes = 2;
  s.layers = {LayerDesc::conv(4, 3, 1, 1), LayerDesc::relu(), LayerDesc::maxpool(2, 2), LayerDesc::flatten(),
              LayerDesc::dense(8), LayerDesc::relu(), LayerDesc::dense(2)};
  return nn::build_model(s, 3);
}

TEST(Finetune, ZeroLambdaEqualsVanilla) {
  const auto d = tiny_train();
  const auto m = tiny_model();
  MaskSet masks{"tag", {{"t10", Tensor({8, 8}, 1.0f)}}};
  CorrectionConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 0.01f;
  cfg.batch_size = 4;
  cfg.lambda = 0.0f;
  const auto a = finetune_correct(m, d, cfg, &masks, nullptr);
  cfg.method = Method::Vanilla;
  const auto b = finetune_correct(m, d, cfg, nullptr, nullptr);
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(a.model.params()[i].value, b.model.params()[i].value);
  // Only the last dense layers move.
  EXPECT_EQ(b.model.params()[0].value, m.params()[0].value);
  EXPECT_NE(b.model.params()[2].value, m.params()[2].value);
}

TEST(Finetune, RetainedLossesAreLoggedAndZeroMasksRecorded) {
  const auto d = tiny_train();
  const auto m = tiny_model();
  MaskSet first{"first", {{"t11", Tensor({8, 8}, 1.0f)}}};
  MaskSet second{"second", {{"t12", Tensor({8, 8}, 1.0f)}, {"t13", Tensor({8, 8})}}};
  const RetainedLoss kept[] = {{Method::Rrr, 5.0f, first}};
  CorrectionConfig cfg;
  cfg.method = Method::RrrCosine;
  cfg.lambda = 2.0f;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  const auto r = finetune_correct(m, d, cfg, &second, nullptr, kept);
  ASSERT_EQ(r.history.aux_names.size(), 2u);
  EXPECT_EQ(r.history.aux_names[0], "rrr:first");
  EXPECT_EQ(r.history.aux_names[1], "rrr-cosine:second");
  for (const auto& e : r.history.epochs) {
    EXPECT_EQ(e.aux_counts[0], 1u);
    EXPECT_EQ(e.aux_counts[1], 1u);
  }
  EXPECT_EQ(r.zero_mask_samples, std::vector<std::string>{"t13"});

  const auto log = std::filesystem::temp_directory_path() / "r2r_revise_test" / "losses.csv";
  write_loss_log(r.history, log);
  std::ifstream in(log);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "epoch,ce_loss,rrr:first_loss,rrr:first_lambda,rrr-cosine:second_loss,rrr-cosine:second_lambda,total_loss");
  EXPECT_EQ(row.rfind("1,", 0), 0u);
}

TEST(Finetune, AClarcAlternatesBatches) {
  const auto d = tiny_train();
  const auto m = tiny_model();
  cav::Cav c = random_cav(4, 2, "relu1");
  CorrectionConfig cfg;
  cfg.method = Method::AClarc;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.01f;
  const auto alt = finetune_correct(m, d, cfg, nullptr, &c);
  cfg.aclarc_alternate = false;
  const auto all = finetune_correct(m, d, cfg, nullptr, &c);
  cfg.method = Method::Vanilla;
  const auto van = finetune_correct(m, d, cfg, nullptr, nullptr);
  EXPECT_NE(alt.model.params()[2].value, all.model.params()[2].value);
  EXPECT_NE(alt.model.params()[2].value, van.model.params()[2].value);
}

TEST(Finetune, MethodNamesAndValidation) {
  for (auto name : {"vanilla", "rrr", "rrr-cosine", "cdep", "aclarc", "pclarc"})
    EXPECT_EQ(method_name(parse_method(name)), std::string(name));
  EXPECT_THROW(parse_method("rrr2"), CorrectionError);
  CorrectionConfig cfg;
  cfg.lambda = -1.0f;
  EXPECT_THROW(validate(cfg), CorrectionError);
  EXPECT_EQ(std::size(kLambdaGrid), 9u);
  EXPECT_EQ(kLambdaGrid[8], 10000.0f);
}

}  // namespace
}  // namespace r2r::revise
