#include "r2r/cav.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "r2r/rng.hpp"
#include "test_util.hpp"

namespace r2r::cav {
namespace {

using r2r::testing::random_tensor;

// 16x16 noise images; odd samples carry a bright 4x4 square.
data::Dataset planted_squares(std::size_t n, std::uint64_t seed) {
  data::Dataset d;
  d.num_classes = 2;
  d.class_names = {"a", "b"};
  d.channels = 1;
  d.height = d.width = 16;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    data::Sample s;
    s.id = "s" + std::to_string(1000 + i);
    s.image = Tensor({1, 16, 16});
    for (auto& v : s.image.vec()) v = static_cast<float>(uniform(rng, 0.3, 0.5));
    s.label = i % 2;
    Tensor mask({16, 16});
    if (i % 2) {
      const std::size_t y = uniform_index(rng, 12), x = uniform_index(rng, 12);
      for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b) {
          s.image[(y + a) * 16 + x + b] = 1.0f;
          mask[(y + a) * 16 + x + b] = 1.0f;
        }
      s.truth_mask = mask;
      s.artifact_flag = true;
    } else {
      s.artifact_flag = false;
    }
    d.samples.push_back(s);
  }
  return d;
}

TEST(Logistic, SeparablePlantedFeaturesAreFitPerfectly) {
  Eigen::MatrixXd x(40, 3);
  std::vector<int> y(40);
  Rng rng(1);
  for (int i = 0; i < 40; ++i) {
    y[i] = i % 2;
    x(i, 0) = (y[i] ? 2.0 : -2.0) + uniform(rng, -0.5, 0.5);
    x(i, 1) = uniform(rng, -1, 1);
    x(i, 2) = uniform(rng, -1, 1);
  }
  const auto m = fit_logistic(x, y, 1.0);
  for (int i = 0; i < 40; ++i) EXPECT_EQ(x.row(i).dot(m.weights) + m.intercept > 0, y[i] == 1);
  EXPECT_GT(m.weights(0), 0.0);
  // Stationarity of the penalized objective.
  Eigen::VectorXd g = m.weights;
  double gb = 0.0;
  for (int i = 0; i < 40; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-(x.row(i).dot(m.weights) + m.intercept)));
    g += (p - y[i]) * x.row(i).transpose();
    gb += p - y[i];
  }
  EXPECT_LT(g.norm(), 1e-6);
  EXPECT_LT(std::fabs(gb), 1e-6);
}

TEST(Cav, PlantedSquareIsRecovered) {
  const auto data = planted_squares(80, 2);
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 2), 4);
  std::vector<std::size_t> art, clean;
  for (std::size_t i = 0; i < data.size(); ++i) (i % 2 ? art : clean).push_back(i);
  const Cav c = fit_cav(m, data, art, clean, "conv1");
  double n2 = 0;
  for (double v : c.direction) n2 += v * v;
  EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-6);
  EXPECT_GT(c.pooled_mu_artifact, c.pooled_mu_clean);
  EXPECT_EQ(c.train_accuracy, 1.0);
  EXPECT_GE(c.cv_accuracy, 0.9);
  EXPECT_EQ(c.n_artifact, 40u);

  // Swapping the roles flips the classifier but keeps the convention.
  const Cav r = fit_cav(m, data, clean, art, "conv1");
  EXPECT_GT(r.pooled_mu_artifact, r.pooled_mu_clean);

  const auto sweep = sweep_layers(m, data, art, clean);
  ASSERT_EQ(sweep.size(), 2u);
  EXPECT_EQ(sweep[0].layer, "conv1");
  EXPECT_EQ(sweep[1].layer, "conv2");
}

TEST(Cav, ErrorsOnDegenerateInput) {
  auto data = planted_squares(10, 3);
  for (auto& s : data.samples) s.image = Tensor({1, 16, 16}, 0.5f);
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 2), 4);
  std::vector<std::size_t> a{1, 3}, c{0, 2};
  EXPECT_THROW(fit_cav(m, data, a, c, "conv1"), CavError);
  EXPECT_THROW(fit_cav(m, data, {}, c, "conv1"), CavError);
  EXPECT_THROW(fit_cav(m, data, a, c, "nope"), std::out_of_range);
}

TEST(Cav, JsonRoundTrip) {
  Cav c;
  c.layer = "conv2";
  c.direction = {0.6, 0.8};
  c.mu_clean = 0.1;
  c.mu_artifact = 0.9;
  const auto path = std::filesystem::temp_directory_path() / "r2r_cav_test" / "cav.json";
  save_cav(c, path);
  const Cav d = load_cav(path);
  EXPECT_EQ(d.layer, "conv2");
  EXPECT_EQ(d.direction, c.direction);
  EXPECT_EQ(d.mu_artifact, 0.9);
  auto j = cav_to_json(c);
  j["direction"] = {1.0, 1.0};
  EXPECT_THROW(cav_from_json(j), CavError);
  EXPECT_THROW(cav_from_json(nlohmann::json::object()), CavError);
}

TEST(Localize, EqualsExplanationOfProjectionHead) {
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 3), 9);
  xai::RuleComposite rules = xai::RuleComposite::standard();
  rules.epsilon = 1e-12f;
  for (std::size_t l : m.conv_layers()) {
    Cav c;
    c.layer = m.layer(l).name;
    const auto h = random_tensor({m.output_shape(l)[0]}, 50 + l);
    double n = std::sqrt((h * h).sum());
    for (float v : h.vec()) c.direction.push_back(v / n);
    const nn::Model head = r2r::testing::projection_head_model(m, l, c.direction);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Tensor x = random_tensor({1, 16, 16}, 300 + s);
      const Tensor a = localize_artifact(m, x, c, rules);
      const Tensor b = xai::lrp_attribute(head, x, 0, rules).input_relevance;
      EXPECT_LE(max_abs_diff(a, b), 1e-5) << c.layer << " sample " << s;
    }
  }
}

TEST(Localize, OneHotDirectionIsChannelConditionalMap) {
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 3), 9);
  const std::size_t l = m.layer_index("conv2");
  const Tensor x = random_tensor({1, 1, 16, 16}, 7);
  Cav c;
  c.layer = "conv2";
  c.direction.assign(m.output_shape(l)[0], 0.0);
  c.direction[5] = 1.0;
  nn::ActivationCache cache;
  m.forward(x, &cache);
  xai::ChannelMask mask{l, {5}};
  const auto ref = xai::lrp_backward(m, cache, l, cache.outputs[l], xai::RuleComposite::standard(), &mask);
  EXPECT_LE(max_abs_diff(localize_artifact(m, x, c), ref.input_relevance), 1e-6);
}

TEST(Localize, ZeroActivationsGiveZeroHeatmap) {
  const nn::Model m = nn::build_model(nn::mini_cnn(1, 16, 3), 9);
  Cav c;
  c.layer = "conv1";
  c.direction.assign(16, 0.25);
  EXPECT_EQ(localize_artifact(m, Tensor({1, 16, 16}), c).max_abs(), 0.0f);
  c.direction.assign(3, 1.0);
  EXPECT_THROW(localize_artifact(m, Tensor({1, 16, 16}), c), CavError);
}

Tensor blob(std::size_t side, std::size_t cy, std::size_t cx, std::size_t r, float v, Tensor base = {}) {
  Tensor t = base.empty() ? Tensor({side, side}) : base;
  for (std::size_t y = cy - r; y <= cy + r; ++y)
    for (std::size_t x = cx - r; x <= cx + r; ++x) t[y * side + x] = v;
  return t;
}

TEST(Binarize, SingleBlobIsOneComponent) {
  const Tensor h = blob(16, 8, 8, 2, 1.0f);
  const Tensor m = binarize_mask(h, 0.5, 0);
  EXPECT_EQ(iou(m, h), 1.0);
  const Tensor d = binarize_mask(h, 0.5, 1);
  EXPECT_EQ(d.sum(), 49.0);
}

TEST(Binarize, WeakBlobDroppedByComponentFilter) {
  // Strong blob is larger so it survives the quantile cut and the size test.
  Tensor h = blob(32, 8, 8, 3, 10.0f);
  h = blob(32, 24, 24, 2, 1.0f, h);
  const Tensor m = binarize_mask(h, 0.1, 0);
  EXPECT_EQ(m.sum(), 49.0);
  EXPECT_EQ(m[8 * 32 + 8], 1.0f);
  EXPECT_EQ(m[24 * 32 + 24], 0.0f);
}

TEST(Binarize, ClosedThresholdAndEdgeCases) {
  const Tensor u({8, 8}, 1.0f);
  EXPECT_EQ(binarize_mask(u, 0.5, 0).sum(), 64.0);
  EXPECT_EQ(binarize_mask(Tensor({8, 8}, -1.0f)).sum(), 0.0);
  EXPECT_THROW(binarize_mask(u, 1.0), CavError);
  EXPECT_THROW(binarize_mask(u, 0.0), CavError);
  const Tensor r = random_tensor({16, 16}, 4);
  EXPECT_EQ(binarize_mask(r), binarize_mask(r));
}

TEST(Patch, CropPasteIdentityAndLocality) {
  const Tensor img = random_tensor({2, 12, 12}, 8, 0, 1);
  Tensor mask({12, 12});
  mask[3 * 12 + 4] = mask[4 * 12 + 5] = mask[5 * 12 + 4] = 1.0f;
  const Patch p = crop_artifact(img, mask);
  EXPECT_EQ(p.y, 3u);
  EXPECT_EQ(p.x, 4u);
  EXPECT_EQ(p.mask.shape(), (Shape{3, 2}));
  EXPECT_EQ(paste_artifact(img, p, p.y, p.x), img);

  const Tensor other = random_tensor({2, 12, 12}, 9, 0, 1);
  const Tensor out = paste_artifact(other, p, 8, 1);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 12; ++x) {
        const bool inside = y >= 8 && y < 11 && x >= 1 && x < 3 && p.mask[(y - 8) * 2 + x - 1] > 0;
        const std::size_t k = (c * 12 + y) * 12 + x;
        if (inside) {
          EXPECT_EQ(out[k], img[(c * 12 + y - 5) * 12 + x + 3]);
        } else {
          EXPECT_EQ(out[k], other[k]);
        }
      }
  EXPECT_THROW(paste_artifact(other, p, 10, 0), CavError);
  EXPECT_THROW(crop_artifact(img, Tensor({12, 12})), CavError);
}

TEST(Patch, Iou) {
  const Tensor a = blob(8, 3, 3, 1, 1.0f);
  const Tensor b = blob(8, 4, 3, 1, 1.0f);
  EXPECT_NEAR(iou(a, b), 6.0 / 12.0, 1e-12);
  EXPECT_EQ(iou(Tensor({8, 8}), Tensor({8, 8})), 1.0);
}

}  // namespace
}  // namespace r2r::cav
