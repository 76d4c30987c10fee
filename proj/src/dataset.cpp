#include "r2r/dataset.hpp"

#include <numeric>

namespace r2r::data {

Tensor normalize(const Tensor& image, Normalization norm) {
  Shape s{1};
  for (auto d : image.shape()) s.push_back(d);
  Tensor out(std::move(s));
  const float inv = 1.0f / norm.std;
  for (std::size_t i = 0; i < image.numel(); ++i) out[i] = (image[i] - norm.mean) * inv;
  return out;
}

Tensor Dataset::input(std::size_t i) const { return normalize(samples.at(i).image, norm); }

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ShapeError("batch: no samples selected");
  Tensor out(Shape{indices.size(), channels, height, width});
  const std::size_t per = channels * height * width;
  const float inv = 1.0f / norm.std;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = samples.at(indices[b]).image;
    if (img.numel() != per) throw ShapeError("batch: sample " + samples[indices[b]].id + " size");
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = (img[i] - norm.mean) * inv;
  }
  return out;
}

std::vector<std::size_t> Dataset::labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(samples.at(i).label);
  return out;
}

std::optional<std::size_t> Dataset::find(std::string_view id) const {
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].id == id) return i;
  return std::nullopt;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.num_classes = num_classes;
  d.class_names = class_names;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.norm = norm;
  d.samples.reserve(indices.size());
  for (auto i : indices) d.samples.push_back(samples.at(i));
  return d;
}

Dataset Dataset::split(std::string_view name) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == name) idx.push_back(i);
  return subset(idx);
}

std::vector<std::size_t> Dataset::indices_of_class(std::size_t label) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].label == label) idx.push_back(i);
  return idx;
}

std::vector<std::size_t> Dataset::all_indices() const {
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace r2r::data
