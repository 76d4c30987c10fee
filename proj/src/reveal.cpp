#include "r2r/reveal.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "r2r/image_io.hpp"

namespace r2r::reveal {

namespace fs = std::filesystem;

std::vector<Tensor> label_heatmaps(const nn::Model& model, const data::Dataset& data,
                                   std::span<const std::size_t> indices) {
  std::vector<Tensor> maps;
  maps.reserve(indices.size());
  for (auto i : indices) {
    maps.push_back(xai::lrp_attribute(model, data.input(i), data.samples[i].label).input_relevance);
  }
  return maps;
}

namespace {

ClassSpray spray_from_maps(const nn::Model& model, const data::Dataset& data, std::size_t cls,
                           std::vector<std::size_t> indices, std::span<const Tensor> maps,
                           const RevealConfig& cfg) {
  ClassSpray out;
  out.cls = cls;
  out.class_name = cls < data.class_names.size() ? data.class_names[cls] : std::to_string(cls);
  out.indices = std::move(indices);
  std::vector<std::string> ids;
  for (auto i : out.indices) ids.push_back(data.samples[i].id);
  const auto features = spray::preprocess_attributions(maps, ids, cfg.downscale);
  const std::size_t n_eigs = std::min(cfg.n_eigs, ids.size() - 1);
  const std::size_t k = std::min(cfg.k_neighbors, ids.size() - 1);
  const auto embedding = spray::spectral_embed(features, k, n_eigs);
  spray::ClusterOptions opt;
  opt.seed = cfg.seed;
  const data::Dataset subset = data.subset(out.indices);
  opt.groups = nn::predict_labels(model, subset);
  out.report = spray::cluster(embedding, ids, opt);
  return out;
}

}  // namespace

ClassSpray spray_class(const nn::Model& model, const data::Dataset& data, std::size_t cls,
                       const RevealConfig& cfg) {
  auto idx = data.indices_of_class(cls);
  if (idx.size() < 3) {
    throw spray::SprayError("class " + std::to_string(cls) + " has fewer than 3 samples");
  }
  const auto maps = label_heatmaps(model, data, idx);
  return spray_from_maps(model, data, cls, std::move(idx), maps, cfg);
}

nlohmann::json run_reveal(const nn::Model& model, const data::Dataset& data,
                          const RevealConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir / "spray");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "heatmaps");
  const std::vector<std::size_t> all = data.all_indices();
  const auto maps = label_heatmaps(model, data, all);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& s = data.samples[all[i]];
    io::write_png(dir / "images" / (s.id + ".png"), io::to_raster(s.image));
    xai::write_heatmap(dir / "heatmaps" / (s.id + ".png"), xai::spatial_map(maps[i]));
  }

  nlohmann::json listing;
  listing["images"] = "images";
  listing["heatmaps"] = "heatmaps";
  nlohmann::json spray_list = nlohmann::json::array();
  for (std::size_t cls = 0; cls < data.num_classes; ++cls) {
    auto idx = data.indices_of_class(cls);
    if (idx.size() < 3) continue;
    std::vector<Tensor> class_maps;
    for (auto i : idx) class_maps.push_back(maps[i]);
    const ClassSpray cs = spray_from_maps(model, data, cls, std::move(idx), class_maps, cfg);
    nlohmann::json j = spray::report_to_json(cs.report);
    j["class"] = cls;
    j["class_name"] = cs.class_name;
    const std::string rel = "spray/class_" + std::to_string(cls) + ".json";
    std::ofstream(dir / rel) << j.dump(2) << '\n';
    spray_list.push_back({{"class", cls}, {"class_name", cs.class_name}, {"report", rel},
                          {"samples", cs.indices.size()}, {"clusters", cs.report.num_clusters}});
  }
  listing["spray"] = spray_list;

  // CRP galleries.
  const auto convs = model.conv_layers();
  if (convs.empty()) {
    listing["galleries"] = nlohmann::json::array();
    return listing;
  }
  const std::size_t layer = cfg.crp_layer.empty() ? convs.back() : model.layer_index(cfg.crp_layer);
  const std::string layer_name = model.layer(layer).name;
  const auto table = xai::channel_relevance_table(model, data, layer, all);
  const std::size_t channels = table.relevance.empty() ? 0 : table.relevance.front().size();
  std::vector<double> mean(channels, 0.0);
  for (const auto& row : table.relevance)
    for (std::size_t c = 0; c < channels; ++c) mean[c] += row[c] / table.relevance.size();
  std::vector<std::size_t> order(channels);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mean[a] > mean[b]; });
  if (cfg.max_concepts > 0 && cfg.max_concepts < order.size()) order.resize(cfg.max_concepts);
  std::sort(order.begin(), order.end());

  const std::size_t k = std::min(cfg.gallery_k, data.size());
  nlohmann::json galleries = nlohmann::json::array();
  for (auto ch : order) {
    const xai::ConceptId concept_id{layer_name, ch};
    const auto refs = xai::collect_reference_samples(model, data, concept_id, k,
                                                     xai::RuleComposite::standard(), &table);
    const std::string gdir = "crp/" + layer_name + "_" + std::to_string(ch);
    fs::create_directories(dir / gdir);
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t r = 0; r < refs.size(); ++r) {
      const std::string heat = gdir + "/" + refs[r].id + ".png";
      xai::write_heatmap(dir / heat, refs[r].conditional_heatmap);
      items.push_back({{"rank", r},
                       {"sample_id", refs[r].id},
                       {"predicted", refs[r].predicted},
                       {"relevance", refs[r].relevance},
                       {"image", "images/" + refs[r].id + ".png"},
                       {"heatmap", heat}});
    }
    galleries.push_back({{"concept", layer_name + ":" + std::to_string(ch)},
                         {"layer", layer_name},
                         {"channel", ch},
                         {"mean_relevance", mean[ch]},
                         {"k", items.size()},
                         {"samples", items}});
  }
  listing["galleries"] = galleries;
  return listing;
}

}  // namespace r2r::reveal
