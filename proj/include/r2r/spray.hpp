#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2r/tensor.hpp"

// Spectral relevance analysis: spectral clustering of attribution maps.
namespace r2r::spray {

class SprayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AttributionFeature {
  std::string id;
  std::vector<double> values;  // unit L2 norm unless all-zero
};

// |R| summed over channels, area-averaged down to side x side, flattened and
// L2-normalized. Maps are [C, H, W] (or [H, W]).
std::vector<AttributionFeature> preprocess_attributions(std::span<const Tensor> maps,
                                                        std::span<const std::string> ids,
                                                        std::size_t side);

// Area-average resampling of an [H, W] map (exact block mean when side
// divides H and W).
std::vector<double> downscale(const Tensor& map, std::size_t side);

struct Embedding {
  Eigen::MatrixXd vectors;           // N x n_eigs, columns by ascending eigenvalue
  std::vector<double> eigenvalues;   // ascending, n_eigs entries
  Eigen::MatrixXd affinity;          // symmetric k-NN cosine affinity
};

Embedding spectral_embed(std::span<const AttributionFeature> features, std::size_t k_neighbors,
                         std::size_t n_eigs);

// argmax eigengap with at least two clusters.
std::size_t eigengap_clusters(std::span<const double> eigenvalues);

struct ClusterInfo {
  std::size_t label = 0;
  std::size_t size = 0;
  double purity = 1.0;  // share of the dominant group within the cluster
  double outlier_score = 0.0;
  std::vector<std::size_t> members;  // row indices
  std::vector<std::pair<std::size_t, std::size_t>> composition;  // (group, count)
};

struct ClusterReport {
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  std::vector<std::array<double, 2>> coordinates;
  std::vector<double> eigenvalues;
  std::size_t num_clusters = 0;
  std::vector<ClusterInfo> ranking;  // by descending outlier score
};

struct ClusterOptions {
  std::uint64_t seed = 0;
  std::size_t restarts = 20;
  std::size_t max_iterations = 300;
  // Per-row group (e.g. predicted class) used for purity; empty = one group.
  std::vector<std::size_t> groups;
};

ClusterReport cluster(const Embedding& embedding, std::span<const std::string> ids,
                      const ClusterOptions& options = {});

// k-means++ with restarts; returns labels and writes the best inertia.
std::vector<std::size_t> kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed,
                                std::size_t restarts, std::size_t max_iterations,
                                double* inertia = nullptr);

nlohmann::json report_to_json(const ClusterReport& report);

}  // namespace r2r::spray
