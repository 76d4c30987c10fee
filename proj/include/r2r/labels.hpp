#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2r/dataset.hpp"

// Human (or oracle) artifact label sets in the labels.json format shared with
// the inspection UI.
namespace r2r::labels {

class LabelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kLabelsVersion = 1;

enum class LabelSource { Spray, Crp, Manual };
const char* source_name(LabelSource s);
LabelSource parse_source(const std::string& name);

struct ArtifactLabelSet {
  std::string artifact_name;
  LabelSource source = LabelSource::Manual;
  std::vector<std::string> sample_ids;
  std::vector<std::string> provenance;  // cluster or concept ids
};

// Schema checks only; throws LabelError naming the offending field.
ArtifactLabelSet from_json(const nlohmann::json& j);
// Keys in schema order: version, artifact_name, source, sample_ids, provenance.
nlohmann::ordered_json to_json(const ArtifactLabelSet& s);
// Canonical bytes of a label set (two-space indent, trailing newline).
std::string serialize(const ArtifactLabelSet& s);

ArtifactLabelSet parse(const std::string& text);
ArtifactLabelSet load(const std::filesystem::path& file);

// Every sample id must exist in `data`.
void check_ids(const ArtifactLabelSet& s, const data::Dataset& data);

bool valid_artifact_name(const std::string& name);

// Writes through a temporary file and a rename.
void write_atomic(const std::filesystem::path& file, const std::string& bytes);

}  // namespace r2r::labels
