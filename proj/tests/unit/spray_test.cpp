#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "r2r/rng.hpp"
#include "r2r/spray.hpp"

using namespace r2r;
using namespace r2r::spray;

namespace {

std::vector<AttributionFeature> from_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<AttributionFeature> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto v = rows[i];
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    out.push_back({"s" + std::to_string(1000 + i), v});
  }
  return out;
}

std::vector<std::string> ids_of(const std::vector<AttributionFeature>& f) {
  std::vector<std::string> ids;
  for (const auto& x : f) ids.push_back(x.id);
  return ids;
}

// Noisy copies of two prototype directions.
std::vector<AttributionFeature> two_blobs(std::size_t a, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < a + b; ++i) {
    std::vector<double> v(16, 0.0);
    const std::size_t off = i < a ? 0 : 8;
    for (std::size_t j = 0; j < 8; ++j) v[off + j] = 1.0 + 0.2 * uniform01(rng);
    for (double& x : v) x += 0.02 * uniform01(rng);
    rows.push_back(v);
  }
  return from_rows(rows);
}

}  // namespace

TEST(SprayPreprocess, ConstantMapGivesUniformUnitVector) {
  Tensor m = Tensor::full({3, 8, 8}, 0.5f);
  std::vector<Tensor> maps{m};
  std::vector<std::string> ids{"a"};
  auto f = preprocess_attributions(maps, ids, 4);
  ASSERT_EQ(f[0].values.size(), 16u);
  for (double v : f[0].values) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(SprayPreprocess, ScaleAndSignInvariant) {
  Rng rng(3);
  Tensor m({2, 8, 8});
  for (auto& v : m.vec()) v = static_cast<float>(uniform(rng, -1, 1));
  Tensor s = m * -7.0f;
  std::vector<Tensor> maps{m, s};
  std::vector<std::string> ids{"a", "b"};
  auto f = preprocess_attributions(maps, ids, 4);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(f[0].values[i], f[1].values[i], 1e-6);
}

TEST(SprayPreprocess, BlockMean) {
  auto d = downscale(Tensor::from({2, 2}, {1, 1, 3, 3}), 1);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_DOUBLE_EQ(d[0], 2.0);
  // Non-integer ratio: 3 -> 2 splits the middle cell.
  auto e = downscale(Tensor::from({1, 3}, {0, 3, 6}), 1);
  EXPECT_NEAR(e[0], 3.0, 1e-12);
  auto g = downscale(Tensor::from({3, 3}, {0, 3, 6, 0, 3, 6, 0, 3, 6}), 2);
  EXPECT_NEAR(g[0], (0 * 1 + 3 * 0.5) / 1.5, 1e-12);
  EXPECT_NEAR(g[1], (6 * 1 + 3 * 0.5) / 1.5, 1e-12);
}

TEST(SprayPreprocess, RejectsBadInput) {
  std::vector<Tensor> maps{Tensor()};
  std::vector<std::string> ids{"x"};
  EXPECT_THROW(preprocess_attributions(maps, ids, 4), SprayError);
  std::vector<std::string> two{"x", "y"};
  EXPECT_THROW(preprocess_attributions(maps, two, 4), SprayError);
}

TEST(SpraySpectral, ComponentsGiveZeroEigenvalues) {
  // Three mutually orthogonal groups -> three disconnected components.
  std::vector<std::vector<double>> rows;
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<double> v(6, 0.0);
      v[2 * g] = 1.0;
      v[2 * g + 1] = 0.1 * static_cast<double>(i + 1);
      rows.push_back(v);
    }
  auto f = from_rows(rows);
  auto emb = spectral_embed(f, 4, 6);
  std::size_t zeros = 0;
  for (double e : emb.eigenvalues) zeros += e < 1e-8;
  EXPECT_EQ(zeros, 3u);
  EXPECT_GT(emb.eigenvalues[3], 1e-3);
  auto rep = cluster(emb, ids_of(f));
  EXPECT_EQ(rep.num_clusters, 3u);
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 1; i < 5; ++i) EXPECT_EQ(rep.labels[g * 5 + i], rep.labels[g * 5]);
}

TEST(SpraySpectral, TwoBlobsSplitBySecondEigenvector) {
  auto f = two_blobs(20, 20, 1);
  auto emb = spectral_embed(f, 5, 4);
  ASSERT_EQ(emb.vectors.rows(), 40);
  EXPECT_TRUE(emb.affinity.isApprox(emb.affinity.transpose()));
  const double s0 = emb.vectors(0, 1) >= 0 ? 1 : -1;
  for (int i = 0; i < 40; ++i) {
    const double s = emb.vectors(i, 1) >= 0 ? 1 : -1;
    EXPECT_EQ(s == s0, i < 20) << i;
  }
  for (double e : emb.eigenvalues) {
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 2.0 + 1e-9);
  }
}

TEST(SpraySpectral, IdenticalFeaturesFormOneCluster) {
  std::vector<std::vector<double>> rows(8, std::vector<double>{1, 2, 3});
  auto f = from_rows(rows);
  auto emb = spectral_embed(f, 3, 4);
  for (int i = 1; i < 8; ++i) EXPECT_TRUE(emb.vectors.row(i).isApprox(emb.vectors.row(0)));
  auto rep = cluster(emb, ids_of(f));
  EXPECT_EQ(rep.num_clusters, 1u);
  EXPECT_TRUE(rep.ranking.empty());
}

TEST(SpraySpectral, Errors) {
  auto f = two_blobs(3, 3, 2);
  EXPECT_THROW(spectral_embed(f, 2, 6), SprayError);
  EXPECT_THROW(spectral_embed(f, 0, 2), SprayError);
}

TEST(SprayCluster, EigengapChoice) {
  std::vector<double> ev{0, 0.01, 0.5, 0.6};
  EXPECT_EQ(eigengap_clusters(ev), 2u);
  std::vector<double> ev3{0, 0, 0, 0.7, 0.8};
  EXPECT_EQ(eigengap_clusters(ev3), 3u);
  std::vector<double> flat{0, 0.5};
  EXPECT_EQ(eigengap_clusters(flat), 2u);
}

TEST(SprayCluster, PlantedMinorityRanksFirst) {
  auto f = two_blobs(90, 10, 7);
  auto emb = spectral_embed(f, 10, 8);
  auto rep = cluster(emb, ids_of(f));
  ASSERT_GE(rep.ranking.size(), 2u);
  const auto& top = rep.ranking.front();
  std::set<std::size_t> members(top.members.begin(), top.members.end());
  std::set<std::size_t> planted;
  for (std::size_t i = 90; i < 100; ++i) planted.insert(i);
  EXPECT_EQ(members, planted);
  EXPECT_NEAR(top.outlier_score, 0.9, 1e-12);
  for (const auto& c : rep.ranking) {
    EXPECT_GE(c.outlier_score, 0.0);
    EXPECT_LE(c.outlier_score, 1.0);
  }
}

TEST(SprayCluster, PurityUsesGroups) {
  auto f = two_blobs(30, 10, 9);
  auto emb = spectral_embed(f, 8, 6);
  ClusterOptions opt;
  opt.groups.assign(40, 0);
  for (std::size_t i = 30; i < 35; ++i) opt.groups[i] = 1;
  auto rep = cluster(emb, ids_of(f), opt);
  const auto& small = *std::min_element(rep.ranking.begin(), rep.ranking.end(),
                                        [](auto& a, auto& b) { return a.size < b.size; });
  ASSERT_EQ(small.size, 10u);
  EXPECT_NEAR(small.purity, 0.5, 1e-12);
  EXPECT_NEAR(small.outlier_score, 0.75 * 0.5, 1e-12);
  EXPECT_EQ(small.composition.size(), 2u);
}

TEST(SprayCluster, ReproducibleAndPermutationInvariant) {
  auto f = two_blobs(25, 15, 11);
  auto emb = spectral_embed(f, 6, 6);
  auto a = cluster(emb, ids_of(f));
  auto b = cluster(emb, ids_of(f));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(report_to_json(a).dump(), report_to_json(b).dump());

  std::vector<std::size_t> perm(f.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng(5);
  shuffle(perm.begin(), perm.end(), rng);
  std::vector<AttributionFeature> g;
  for (auto p : perm) g.push_back(f[p]);
  auto c = cluster(spectral_embed(g, 6, 6), ids_of(g));
  // Same partition up to relabeling.
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < perm.size(); ++j)
      EXPECT_EQ(a.labels[perm[i]] == a.labels[perm[j]], c.labels[i] == c.labels[j]);
}

TEST(SprayCluster, KmeansSeparatesPoints) {
  Eigen::MatrixXd p(6, 1);
  p << 0, 0.1, 0.2, 10, 10.1, 10.2;
  double inertia = 0;
  auto l = kmeans(p, 2, 0, 5, 100, &inertia);
  EXPECT_EQ(l[0], l[2]);
  EXPECT_EQ(l[3], l[5]);
  EXPECT_NE(l[0], l[3]);
  EXPECT_NEAR(inertia, 4 * 0.01, 1e-9);
  EXPECT_THROW(kmeans(p, 7, 0, 1, 10), SprayError);
}

TEST(SprayCluster, JsonShape) {
  auto f = two_blobs(12, 4, 13);
  auto rep = cluster(spectral_embed(f, 4, 4), ids_of(f));
  auto j = report_to_json(rep);
  EXPECT_EQ(j["sample_ids"].size(), 16u);
  EXPECT_EQ(j["coordinates"][0].size(), 2u);
  EXPECT_EQ(j["ranking"].size(), rep.num_clusters);
}
