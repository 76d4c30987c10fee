#include "r2r/labels.hpp"

#include <fstream>
#include <regex>
#include <set>
#include <sstream>

namespace r2r::labels {

namespace fs = std::filesystem;

const char* source_name(LabelSource s) {
  switch (s) {
    case LabelSource::Spray: return "spray";
    case LabelSource::Crp: return "crp";
    case LabelSource::Manual: return "manual";
  }
  return "?";
}

LabelSource parse_source(const std::string& name) {
  if (name == "spray") return LabelSource::Spray;
  if (name == "crp") return LabelSource::Crp;
  if (name == "manual") return LabelSource::Manual;
  throw LabelError("source: expected one of spray, crp, manual; got '" + name + "'");
}

bool valid_artifact_name(const std::string& name) {
  static const std::regex pattern("^[A-Za-z0-9][A-Za-z0-9_.-]{0,63}$");
  return std::regex_match(name, pattern);
}

namespace {

std::vector<std::string> string_array(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw LabelError(field + ": expected an array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_string()) {
      throw LabelError(field + "[" + std::to_string(i) + "]: expected a string");
    }
    out.push_back(j[i].get<std::string>());
  }
  return out;
}

}  // namespace

ArtifactLabelSet from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw LabelError("label set: expected a JSON object");
  static const std::set<std::string> known = {"version", "artifact_name", "source", "sample_ids",
                                              "provenance"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw LabelError("unexpected property '" + key + "'");
  for (const auto& key : known)
    if (!j.contains(key)) throw LabelError("missing required property '" + key + "'");

  const auto& version = j["version"];
  if (!version.is_number_integer() || version.get<long long>() != kLabelsVersion) {
    throw LabelError("version: expected " + std::to_string(kLabelsVersion));
  }
  if (!j["artifact_name"].is_string()) throw LabelError("artifact_name: expected a string");
  if (!j["source"].is_string()) throw LabelError("source: expected a string");

  ArtifactLabelSet s;
  s.artifact_name = j["artifact_name"].get<std::string>();
  if (!valid_artifact_name(s.artifact_name)) {
    throw LabelError("artifact_name: '" + s.artifact_name +
                     "' must match ^[A-Za-z0-9][A-Za-z0-9_.-]{0,63}$");
  }
  s.source = parse_source(j["source"].get<std::string>());
  s.sample_ids = string_array(j["sample_ids"], "sample_ids");
  if (s.sample_ids.empty()) throw LabelError("sample_ids: at least one sample id is required");
  std::set<std::string> seen;
  for (const auto& id : s.sample_ids) {
    if (id.empty()) throw LabelError("sample_ids: empty sample id");
    if (!seen.insert(id).second) throw LabelError("sample_ids: duplicate id '" + id + "'");
  }
  s.provenance = string_array(j["provenance"], "provenance");
  return s;
}

nlohmann::ordered_json to_json(const ArtifactLabelSet& s) {
  nlohmann::ordered_json j;
  j["version"] = kLabelsVersion;
  j["artifact_name"] = s.artifact_name;
  j["source"] = source_name(s.source);
  j["sample_ids"] = s.sample_ids;
  j["provenance"] = s.provenance;
  return j;
}

std::string serialize(const ArtifactLabelSet& s) { return to_json(s).dump(2) + "\n"; }

ArtifactLabelSet parse(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw LabelError(std::string("invalid JSON: ") + e.what());
  }
  return from_json(j);
}

ArtifactLabelSet load(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LabelError("cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const LabelError& e) {
    throw LabelError(file.string() + ": " + e.what());
  }
}

void check_ids(const ArtifactLabelSet& s, const data::Dataset& data) {
  std::vector<std::string> unknown;
  for (const auto& id : s.sample_ids)
    if (!data.find(id)) unknown.push_back(id);
  if (unknown.empty()) return;
  std::string msg = "unknown sample id";
  msg += unknown.size() > 1 ? "s: " : ": ";
  for (std::size_t i = 0; i < unknown.size() && i < 5; ++i) msg += (i ? ", " : "") + unknown[i];
  if (unknown.size() > 5) msg += ", ... (" + std::to_string(unknown.size()) + " total)";
  throw LabelError(msg);
}

void write_atomic(const fs::path& file, const std::string& bytes) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << bytes;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, file);
}

}  // namespace r2r::labels
