#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "r2r/tensor.hpp"

namespace r2r::data {

struct Sample {
  std::string id;
  Tensor image;  // [C, H, W], raw intensities in [0, 1]
  std::size_t label = 0;
  std::optional<Tensor> truth_mask;  // [H, W], 0/1; present iff an artifact was rendered
  std::optional<bool> artifact_flag;
  std::string artifact;  // name of the rendered artifact, empty when clean
  std::string split;     // train | val | test, empty when unassigned
};

// Model inputs are (image - mean) / std.
struct Normalization {
  float mean = 0.5f;
  float std = 0.5f;
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  Normalization norm;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  // Normalized [1, C, H, W] model input for sample i.
  Tensor input(std::size_t i) const;
  // Normalized [n, C, H, W] batch.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> labels(std::span<const std::size_t> indices) const;

  std::optional<std::size_t> find(std::string_view id) const;
  // Same metadata, selected samples (in the given order).
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset split(std::string_view name) const;
  std::vector<std::size_t> indices_of_class(std::size_t label) const;
  std::vector<std::size_t> all_indices() const;
};

Tensor normalize(const Tensor& image, Normalization norm);

}  // namespace r2r::data
