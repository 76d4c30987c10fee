#include "r2r/bundle.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "r2r/bench.hpp"
#include "r2r/labels.hpp"
#include "r2r/lifecycle.hpp"

namespace r2r::bundle {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) return nullptr;
  const json j = json::parse(in, nullptr, false);
  return j.is_discarded() ? json(nullptr) : j;
}

std::optional<std::size_t> latest_reveal(const lifecycle::RunPaths& paths) {
  std::optional<std::size_t> best;
  for (std::size_t k = 0; fs::exists(paths.reveal(k) / "reveal.json"); ++k) best = k;
  return best;
}

std::vector<std::string> sorted_pngs(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png") out.push_back(e.path().stem().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

json build_index(const fs::path& root) {
  const lifecycle::RunPaths paths{root};
  const auto manifest = lifecycle::load_manifest(root);
  json index = {{"version", kBundleVersion},
                {"run_id", manifest ? manifest->run_id : root.filename().string()},
                {"status", manifest ? manifest->status : std::string("running")},
                {"api", {{"labels", "/api/labels"}, {"files", "/files/"}}}};

  json classes = json::array();
  json samples = json::array();
  if (fs::exists(paths.dataset() / "index.csv")) {
    const data::Dataset data = bench::load_image_folder(paths.dataset());
    classes = data.class_names;
    const auto reveal_k = latest_reveal(paths);
    for (const auto& s : data.samples) {
      if (s.split != "train") continue;
      json row = {{"id", s.id}, {"label", s.label}, {"split", s.split}};
      if (reveal_k) {
        row["image"] = "reveal/images/" + s.id + ".png";
        row["heatmap"] = "reveal/heatmaps/" + s.id + ".png";
      }
      samples.push_back(row);
    }
  }
  index["classes"] = classes;
  index["samples"] = samples;

  json spray = json::array();
  json galleries = json::array();
  const auto reveal_k = latest_reveal(paths);
  index["iteration"] = reveal_k ? json(*reveal_k) : json(nullptr);
  if (reveal_k) {
    const fs::path dir = paths.reveal(*reveal_k);
    const json listing = read_json(dir / "reveal.json");
    for (const auto& e : listing.value("spray", json::array())) {
      json entry = e;
      const std::string rel = e.at("report").get<std::string>();
      entry["report"] = "reveal/" + rel;
      entry["data"] = read_json(dir / rel);
      spray.push_back(entry);
    }
    for (const auto& g : listing.value("galleries", json::array())) {
      json entry = g;
      for (auto& item : entry["samples"]) {
        item["image"] = "reveal/" + item["image"].get<std::string>();
        item["heatmap"] = "reveal/" + item["heatmap"].get<std::string>();
      }
      galleries.push_back(entry);
    }
  }
  index["spray"] = spray;
  index["galleries"] = galleries;

  json label_sets = json::array();
  json iterations = json::array();
  if (manifest) {
    const json m = lifecycle::manifest_to_json(*manifest);
    label_sets = m["label_sets"];
    for (const auto& rec : manifest->iterations) {
      json it = {{"iteration", rec.iteration},
                 {"artifact", rec.artifact ? json(*rec.artifact) : json(nullptr)},
                 {"method", rec.method},
                 {"lambda", rec.lambda},
                 {"layer", rec.layer},
                 {"scores", m["iterations"][rec.iteration]["scores"]},
                 {"relevance_before", rec.relevance_before}};
      json cav = json::array();
      if (rec.artifact) {
        const std::string base = "iterations/iter_" + std::to_string(rec.iteration);
        const fs::path src = paths.iteration(rec.iteration);
        const auto heat = sorted_pngs(src / "cav_heatmaps");
        const std::set<std::string> with_heat(heat.begin(), heat.end());
        for (const auto& id : sorted_pngs(src / "masks")) {
          json row = {{"sample_id", id}, {"mask", base + "/masks/" + id + ".png"}};
          if (with_heat.count(id)) row["heatmap"] = base + "/cav_heatmaps/" + id + ".png";
          cav.push_back(row);
        }
        it["report"] = read_json(root / rec.report);
      } else {
        it["report"] = nullptr;
      }
      it["cav_heatmaps"] = cav;
      iterations.push_back(it);
    }
  }
  index["label_sets"] = label_sets;
  index["iterations"] = iterations;
  return index;
}

json export_inspection_bundle(const fs::path& root) {
  const lifecycle::RunPaths paths{root};
  const json index = build_index(root);
  const bool any_iteration =
      std::any_of(index["iterations"].begin(), index["iterations"].end(),
                  [](const json& it) { return !it["artifact"].is_null(); });
  if (index["iteration"].is_null() && !any_iteration) {
    throw BundleError("nothing to export in " + root.string() +
                      ": run the reveal step or a lifecycle iteration first");
  }
  const fs::path out = paths.bundle();
  const fs::path tmp = root / "bundle.tmp";
  const fs::path old = root / "bundle.old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  const auto copy = fs::copy_options::recursive | fs::copy_options::overwrite_existing;
  if (!index["iteration"].is_null()) {
    const fs::path src = paths.reveal(index["iteration"].get<std::size_t>());
    fs::create_directories(tmp / "reveal");
    for (const char* sub : {"images", "heatmaps", "spray", "crp"})
      if (fs::exists(src / sub)) fs::copy(src / sub, tmp / "reveal" / sub, copy);
  }
  for (const auto& it : index["iterations"]) {
    if (it["artifact"].is_null()) continue;
    const std::size_t k = it["iteration"].get<std::size_t>();
    const fs::path dst = tmp / "iterations" / ("iter_" + std::to_string(k));
    fs::create_directories(dst);
    for (const char* sub : {"masks", "cav_heatmaps"})
      if (fs::exists(paths.iteration(k) / sub)) fs::copy(paths.iteration(k) / sub, dst / sub, copy);
  }
  std::ofstream(tmp / "index.json") << index.dump(2) << '\n';

  fs::remove_all(old);
  if (fs::exists(out)) fs::rename(out, old);
  fs::rename(tmp, out);
  fs::remove_all(old);
  return index;
}

}  // namespace r2r::bundle
