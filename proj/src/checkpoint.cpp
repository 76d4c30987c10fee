#include <algorithm>
#include <bit>
#include <fstream>

#include "r2r/nn.hpp"

namespace r2r::nn {

static_assert(std::endian::native == std::endian::little,
              "params.bin is written in host order; big-endian hosts are not supported");

namespace fs = std::filesystem;

void save_checkpoint(const Model& model, const fs::path& dir, const nlohmann::json& training_meta,
                     std::uint64_t seed) {
  fs::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  nlohmann::json order = nlohmann::json::array();
  for (const auto& d : model.spec().layers) order.push_back(d.name);

  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    params.push_back({{"name", p.name},
                      {"layer", model.layer(p.layer).name},
                      {"shape", p.value.shape()},
                      {"offset", offset},
                      {"count", p.value.numel()}});
    offset += p.value.numel();
  }
  const nlohmann::json manifest = {{"format_version", kCheckpointVersion},
                                   {"spec", spec_to_json(model.spec())},
                                   {"layer_order", order},
                                   {"params", params},
                                   {"total_floats", offset},
                                   {"training", training_meta},
                                   {"seed", seed}};

  const fs::path bin_tmp = dir / "params.bin.tmp";
  {
    std::ofstream out(bin_tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + bin_tmp.string());
    for (const auto& p : model.params()) {
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
    }
    if (!out) throw CheckpointError("short write to " + bin_tmp.string());
  }
  const fs::path man_tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(man_tmp, std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + man_tmp.string());
    out << manifest.dump(2) << '\n';
  }
  fs::rename(bin_tmp, dir / "params.bin");
  fs::rename(man_tmp, dir / "manifest.json");
}

Model load_checkpoint(const fs::path& dir) {
  const fs::path man_path = dir / "manifest.json";
  const fs::path bin_path = dir / "params.bin";
  std::ifstream man_in(man_path);
  if (!man_in) throw CheckpointError("checkpoint manifest missing: " + man_path.string());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(man_in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint manifest unreadable: " + std::string(e.what()));
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) +
                          ")");
  }

  ModelSpec spec;
  try {
    spec = spec_from_json(manifest.at("spec"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint spec invalid: ") + e.what());
  }

  std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
  if (!bin) throw CheckpointError("checkpoint parameters missing: " + bin_path.string());
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  const auto total = manifest.value("total_floats", std::size_t{0});
  if (bytes != total * sizeof(float)) {
    throw CheckpointError("checkpoint integrity: params.bin has " + std::to_string(bytes) +
                          " bytes, manifest expects " + std::to_string(total * sizeof(float)));
  }
  bin.seekg(0);
  std::vector<float> flat(total);
  bin.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(bytes));
  if (!bin) throw CheckpointError("checkpoint integrity: short read of params.bin");

  // Map layer names back to indices so the parameter list can be validated.
  std::vector<std::string> names;
  for (const auto& d : spec.layers) names.push_back(d.name);
  std::vector<Parameter> params;
  try {
    for (const auto& p : manifest.at("params")) {
      const auto shape = p.at("shape").get<Shape>();
      const auto offset = p.at("offset").get<std::size_t>();
      const auto count = p.at("count").get<std::size_t>();
      if (shape_numel(shape) != count || offset + count > total) {
        throw CheckpointError("checkpoint integrity: parameter " +
                              p.at("name").get<std::string>() + " out of range");
      }
      const auto layer_name = p.at("layer").get<std::string>();
      const auto it = std::find(names.begin(), names.end(), layer_name);
      if (it == names.end()) throw CheckpointError("checkpoint: unknown layer " + layer_name);
      params.push_back({p.at("name").get<std::string>(),
                        static_cast<std::size_t>(it - names.begin()),
                        Tensor(shape, std::vector<float>(flat.begin() + offset,
                                                         flat.begin() + offset + count))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint manifest malformed: ") + e.what());
  }
  try {
    return Model(std::move(spec), std::move(params));
  } catch (const InvalidSpecError& e) {
    throw CheckpointError(std::string("checkpoint does not match its spec: ") + e.what());
  }
}

}  // namespace r2r::nn
