#include "r2r/spray.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "r2r/rng.hpp"

namespace r2r::spray {

namespace {

// Row i holds the overlap of output cell i with each input cell, normalized
// to sum to one.
Eigen::MatrixXd area_weights(std::size_t in, std::size_t out) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  const double step = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double lo = o * step, hi = (o + 1) * step;
    for (std::size_t i = static_cast<std::size_t>(std::floor(lo));
         i < std::min(in, static_cast<std::size_t>(std::ceil(hi))); ++i) {
      const double ov = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (ov > 0) a(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)) = ov / step;
    }
  }
  return a;
}

bool rows_identical(const Eigen::MatrixXd& m, double tol) {
  for (Eigen::Index i = 1; i < m.rows(); ++i)
    if ((m.row(i) - m.row(0)).cwiseAbs().maxCoeff() > tol) return false;
  return true;
}

void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index arg = 0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::fabs(v(i)) > best + 1e-12) {
      best = std::fabs(v(i));
      arg = i;
    }
  }
  if (v(arg) < 0) v = -v;
}

// Connected components of the affinity graph, numbered by smallest member.
std::vector<std::size_t> components(const Eigen::MatrixXd& w) {
  const auto n = static_cast<std::size_t>(w.rows());
  std::vector<std::size_t> comp(n, n);
  std::size_t next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] != n) continue;
    std::vector<std::size_t> stack{s};
    comp[s] = next;
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      for (std::size_t v = 0; v < n; ++v)
        if (comp[v] == n && w(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) > 0) {
          comp[v] = next;
          stack.push_back(v);
        }
    }
    ++next;
  }
  return comp;
}

}  // namespace

std::vector<double> downscale(const Tensor& map, std::size_t side) {
  if (map.rank() != 2 || map.numel() == 0) throw SprayError("downscale: non-empty [H,W] map expected");
  if (side == 0) throw SprayError("downscale: side must be positive");
  const auto h = static_cast<Eigen::Index>(map.dim(0)), w = static_cast<Eigen::Index>(map.dim(1));
  Eigen::MatrixXd m(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) m(y, x) = map[static_cast<std::size_t>(y * w + x)];
  const Eigen::MatrixXd r = area_weights(map.dim(0), side) * m * area_weights(map.dim(1), side).transpose();
  std::vector<double> out(side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      out[y * side + x] = r(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x));
  return out;
}

std::vector<AttributionFeature> preprocess_attributions(std::span<const Tensor> maps,
                                                        std::span<const std::string> ids,
                                                        std::size_t side) {
  if (maps.size() != ids.size()) throw SprayError("preprocess: map and id counts differ");
  std::vector<AttributionFeature> out;
  Shape first;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const Tensor& r = maps[i];
    if (r.numel() == 0 || (r.rank() != 2 && r.rank() != 3)) {
      throw SprayError("preprocess: map " + ids[i] + " is empty or not [C,H,W]");
    }
    if (i == 0) first = r.shape();
    if (r.shape() != first) throw SprayError("preprocess: maps differ in shape");
    const std::size_t hw = r.rank() == 3 ? r.dim(1) * r.dim(2) : r.numel();
    const std::size_t ch = r.numel() / hw;
    Tensor a({r.shape()[r.rank() - 2], r.shape()[r.rank() - 1]});
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t k = 0; k < hw; ++k) a[k] += std::fabs(r[c * hw + k]);
    auto v = downscale(a, side);
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0)
      for (double& x : v) x /= norm;
    out.push_back({ids[i], std::move(v)});
  }
  return out;
}

Embedding spectral_embed(std::span<const AttributionFeature> features, std::size_t k_neighbors,
                         std::size_t n_eigs) {
  const std::size_t n = features.size();
  if (k_neighbors < 1) throw SprayError("spectral_embed: k_neighbors must be >= 1");
  if (n_eigs >= n || n_eigs == 0) {
    throw SprayError("spectral_embed: need 0 < n_eigs < sample count (" + std::to_string(n) + ")");
  }
  const std::size_t dim = features[0].values.size();
  Eigen::MatrixXd f(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].values.size() != dim) throw SprayError("spectral_embed: feature sizes differ");
    for (std::size_t j = 0; j < dim; ++j) f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = features[i].values[j];
  }
  const auto N = static_cast<Eigen::Index>(n);
  const Eigen::MatrixXd sim = (f * f.transpose()).cwiseMax(0.0);

  // k nearest by cosine similarity; every neighbour tied with the k-th is kept.
  const std::size_t k = std::min(k_neighbors, n - 1);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(N, N);
  std::vector<double> row;
  for (Eigen::Index i = 0; i < N; ++i) {
    row.clear();
    for (Eigen::Index j = 0; j < N; ++j)
      if (j != i) row.push_back(sim(i, j));
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k - 1), row.end(),
                     std::greater<>());
    const double kth = row[k - 1];
    for (Eigen::Index j = 0; j < N; ++j)
      if (j != i && sim(i, j) >= kth && sim(i, j) > 0) a(i, j) = sim(i, j);
  }
  Embedding emb;
  emb.affinity = a.cwiseMax(a.transpose());
  const Eigen::VectorXd deg = emb.affinity.rowwise().sum();
  Eigen::VectorXd dinv(N), dsqrt(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    dsqrt(i) = std::sqrt(deg(i));
    dinv(i) = deg(i) > 0 ? 1.0 / dsqrt(i) : 0.0;
  }
  Eigen::MatrixXd lap = -(dinv.asDiagonal() * emb.affinity * dinv.asDiagonal());
  for (Eigen::Index i = 0; i < N; ++i) lap(i, i) += deg(i) > 0 ? 1.0 : 0.0;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap);
  if (solver.info() != Eigen::Success) throw SprayError("spectral_embed: eigensolver did not converge");
  const auto m = static_cast<Eigen::Index>(n_eigs);
  emb.vectors = solver.eigenvectors().leftCols(m);
  for (Eigen::Index i = 0; i < m; ++i) emb.eigenvalues.push_back(std::max(0.0, solver.eigenvalues()(i)));

  // The null space is degenerate when the graph has several components;
  // replace it with a deterministic basis led by D^{1/2} 1.
  const auto comp = components(emb.affinity);
  const std::size_t n_comp = *std::max_element(comp.begin(), comp.end()) + 1;
  const auto null_dim = static_cast<Eigen::Index>(std::min<std::size_t>(n_comp, n_eigs));
  std::vector<Eigen::VectorXd> basis;
  Eigen::VectorXd lead(N);
  for (Eigen::Index i = 0; i < N; ++i) lead(i) = deg(i) > 0 ? dsqrt(i) : 1.0;
  basis.push_back(lead.normalized());
  for (std::size_t c = 0; c < n_comp && static_cast<Eigen::Index>(basis.size()) < null_dim; ++c) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(N);
    for (Eigen::Index i = 0; i < N; ++i)
      if (comp[static_cast<std::size_t>(i)] == c) v(i) = lead(i);
    for (const auto& b : basis) v -= b.dot(v) * b;
    if (v.norm() > 1e-10) basis.push_back(v.normalized());
  }
  for (Eigen::Index c = 0; c < null_dim; ++c) {
    emb.vectors.col(c) = basis[static_cast<std::size_t>(c)];
    emb.eigenvalues[static_cast<std::size_t>(c)] = 0.0;
  }
  for (Eigen::Index c = 0; c < m; ++c) fix_sign(emb.vectors.col(c));

  if (rows_identical(f, 1e-12)) {
    emb.vectors.setZero();
    emb.vectors.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
  }
  return emb;
}

std::size_t eigengap_clusters(std::span<const double> ev) {
  if (ev.size() < 3) return 2;
  std::size_t best = 2;
  double gap = -1.0;
  for (std::size_t i = 1; i + 1 < ev.size(); ++i) {
    const double g = ev[i + 1] - ev[i];
    if (g > gap) {
      gap = g;
      best = i + 1;
    }
  }
  return best;
}

std::vector<std::size_t> kmeans(const Eigen::MatrixXd& pts, std::size_t k, std::uint64_t seed,
                                std::size_t restarts, std::size_t max_iterations, double* inertia) {
  const auto n = static_cast<std::size_t>(pts.rows());
  if (k == 0 || k > n) throw SprayError("kmeans: need 0 < k <= sample count");
  std::vector<std::size_t> best_labels;
  double best = std::numeric_limits<double>::infinity();

  for (std::size_t r = 0; r < std::max<std::size_t>(1, restarts); ++r) {
    Rng rng(derive_seed(seed, r));
    Eigen::MatrixXd centers(static_cast<Eigen::Index>(k), pts.cols());
    centers.row(0) = pts.row(static_cast<Eigen::Index>(uniform_index(rng, n)));
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < k; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        d2[i] = std::min(d2[i], (pts.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(c - 1))).squaredNorm());
        total += d2[i];
      }
      std::size_t pick = 0;
      if (total > 0) {
        double u = uniform01(rng) * total;
        for (pick = 0; pick + 1 < n && u >= d2[pick]; ++pick) u -= d2[pick];
      } else {
        pick = uniform_index(rng, n);
      }
      centers.row(static_cast<Eigen::Index>(c)) = pts.row(static_cast<Eigen::Index>(pick));
    }

    std::vector<std::size_t> labels(n, k);
    double cost = 0.0;
    for (std::size_t it = 0; it < max_iterations; ++it) {
      bool changed = false;
      cost = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t arg = 0;
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double d = (pts.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(c))).squaredNorm();
          if (d < dmin) {
            dmin = d;
            arg = c;
          }
        }
        cost += dmin;
        if (labels[i] != arg) {
          labels[i] = arg;
          changed = true;
        }
      }
      if (!changed) break;
      Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), pts.cols());
      std::vector<std::size_t> count(k, 0);
      for (std::size_t i = 0; i < n; ++i) {
        sum.row(static_cast<Eigen::Index>(labels[i])) += pts.row(static_cast<Eigen::Index>(i));
        ++count[labels[i]];
      }
      for (std::size_t c = 0; c < k; ++c) {
        if (count[c]) {
          centers.row(static_cast<Eigen::Index>(c)) = sum.row(static_cast<Eigen::Index>(c)) / static_cast<double>(count[c]);
          continue;
        }
        // Empty cluster: move it to the point farthest from its center.
        std::size_t far = 0;
        double dmax = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = (pts.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(labels[i]))).squaredNorm();
          if (d > dmax) {
            dmax = d;
            far = i;
          }
        }
        centers.row(static_cast<Eigen::Index>(c)) = pts.row(static_cast<Eigen::Index>(far));
      }
    }
    if (cost < best - 1e-12) {
      best = cost;
      best_labels = labels;
    }
  }
  if (inertia) *inertia = best;
  return best_labels;
}

ClusterReport cluster(const Embedding& emb, std::span<const std::string> ids,
                      const ClusterOptions& opt) {
  const auto n = static_cast<std::size_t>(emb.vectors.rows());
  if (n == 0) throw SprayError("cluster: empty embedding");
  if (ids.size() != n) throw SprayError("cluster: id count differs from embedding rows");
  if (!opt.groups.empty() && opt.groups.size() != n) throw SprayError("cluster: group count");

  ClusterReport rep;
  rep.ids.assign(ids.begin(), ids.end());
  rep.eigenvalues = emb.eigenvalues;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    rep.coordinates.push_back({emb.vectors.cols() > 1 ? emb.vectors(r, 1) : 0.0,
                               emb.vectors.cols() > 2 ? emb.vectors(r, 2) : 0.0});
  }
  if (rows_identical(emb.vectors, 1e-12)) {
    rep.labels.assign(n, 0);
    rep.num_clusters = 1;
    return rep;
  }

  const std::size_t k = std::min({eigengap_clusters(emb.eigenvalues),
                                  static_cast<std::size_t>(emb.vectors.cols()), n});
  Eigen::MatrixXd u = emb.vectors.leftCols(static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const double norm = u.row(i).norm();
    if (norm > 0) u.row(i) /= norm;
  }
  const auto raw = kmeans(u, k, opt.seed, opt.restarts, opt.max_iterations);

  // Contiguous labels in order of first appearance.
  std::vector<std::size_t> remap(k, k);
  std::size_t next = 0;
  rep.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (remap[raw[i]] == k) remap[raw[i]] = next++;
    rep.labels[i] = remap[raw[i]];
  }
  rep.num_clusters = next;

  for (std::size_t c = 0; c < next; ++c) {
    ClusterInfo info;
    info.label = c;
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < n; ++i) {
      if (rep.labels[i] != c) continue;
      info.members.push_back(i);
      const std::size_t g = opt.groups.empty() ? 0 : opt.groups[i];
      if (counts.size() <= g) counts.resize(g + 1, 0);
      ++counts[g];
    }
    info.size = info.members.size();
    std::size_t dominant = 0;
    for (std::size_t g = 0; g < counts.size(); ++g) {
      if (counts[g]) info.composition.emplace_back(g, counts[g]);
      dominant = std::max(dominant, counts[g]);
    }
    info.purity = static_cast<double>(dominant) / static_cast<double>(info.size);
    info.outlier_score = (1.0 - static_cast<double>(info.size) / static_cast<double>(n)) * info.purity;
    rep.ranking.push_back(std::move(info));
  }
  std::sort(rep.ranking.begin(), rep.ranking.end(), [](const ClusterInfo& a, const ClusterInfo& b) {
    if (a.outlier_score != b.outlier_score) return a.outlier_score > b.outlier_score;
    if (a.size != b.size) return a.size < b.size;
    return a.label < b.label;
  });
  return rep;
}

nlohmann::json report_to_json(const ClusterReport& rep) {
  nlohmann::json ranking = nlohmann::json::array();
  for (const auto& c : rep.ranking) {
    nlohmann::json comp = nlohmann::json::array();
    for (const auto& [g, count] : c.composition) comp.push_back({{"group", g}, {"count", count}});
    std::vector<std::string> members;
    for (auto i : c.members) members.push_back(rep.ids[i]);
    ranking.push_back({{"cluster", c.label},
                       {"size", c.size},
                       {"purity", c.purity},
                       {"outlier_score", c.outlier_score},
                       {"composition", comp},
                       {"sample_ids", members}});
  }
  nlohmann::json coords = nlohmann::json::array();
  for (const auto& xy : rep.coordinates) coords.push_back({xy[0], xy[1]});
  return {{"sample_ids", rep.ids},
          {"labels", rep.labels},
          {"coordinates", coords},
          {"eigenvalues", rep.eigenvalues},
          {"num_clusters", rep.num_clusters},
          {"ranking", ranking}};
}

}  // namespace r2r::spray
