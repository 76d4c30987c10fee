#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2r/attribution.hpp"
#include "r2r/dataset.hpp"
#include "r2r/nn.hpp"
#include "r2r/spray.hpp"

// The reveal step: per-class SpRAy over LRP heatmaps and CRP reference
// galleries, written to disk for inspection.
namespace r2r::reveal {

struct RevealConfig {
  std::size_t downscale = 8;
  std::size_t k_neighbors = 10;
  std::size_t n_eigs = 10;
  std::uint64_t seed = 0;
  std::string crp_layer;  // empty: last convolution
  std::size_t gallery_k = 8;
  std::size_t max_concepts = 0;  // 0: every channel, else the most relevant ones
};

// Input heatmaps explaining each sample's own label.
std::vector<Tensor> label_heatmaps(const nn::Model& model, const data::Dataset& data,
                                   std::span<const std::size_t> indices);

struct ClassSpray {
  std::size_t cls = 0;
  std::string class_name;
  std::vector<std::size_t> indices;  // rows of the report, dataset order
  spray::ClusterReport report;
};

// SpRAy over the samples of one class; purity groups are predicted classes.
ClassSpray spray_class(const nn::Model& model, const data::Dataset& data, std::size_t cls,
                       const RevealConfig& cfg);

// Writes spray/class_<c>.json, images/<id>.png, heatmaps/<id>.png and the
// CRP galleries under crp/ into `dir`; returns the listing with paths
// relative to `dir`.
nlohmann::json run_reveal(const nn::Model& model, const data::Dataset& data,
                          const RevealConfig& cfg, const std::filesystem::path& dir);

}  // namespace r2r::reveal
