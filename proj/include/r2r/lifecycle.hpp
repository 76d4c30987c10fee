#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2r/config.hpp"
#include "r2r/evaluate.hpp"
#include "r2r/labels.hpp"
#include "r2r/reveal.hpp"
#include "r2r/revise.hpp"

// The reveal -> label -> localize -> correct -> evaluate loop over a run
// directory. All state lives on disk so a killed run resumes where it stopped.
namespace r2r::lifecycle {

class LifecycleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LockError : public LifecycleError {
 public:
  using LifecycleError::LifecycleError;
};

// Run directory layout.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path base_model() const { return root / "model"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path pending_labels() const { return root / "labels.json"; }
  std::filesystem::path label_dir() const { return root / "labels"; }
  std::filesystem::path iteration(std::size_t k) const;
  std::filesystem::path reveal(std::size_t k) const;
  std::filesystem::path bundle() const { return root / "bundle"; }
  std::filesystem::path lock() const { return root / ".lock"; }
};

// Exclusive per-run lock held for the object's lifetime.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& root);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path file_;
};

struct LabelRecord {
  std::string artifact_name;
  std::string source;
  std::string path;  // relative to the run directory
  std::size_t sample_count = 0;
  std::vector<std::string> provenance;
  std::string created_at;  // UTC, ISO 8601
  std::string tool_version;
};

struct RetainedRef {
  std::string artifact;
  std::string method;
  double lambda = 0.0;
  std::string masks;  // relative mask directory
};

struct ArtifactScore {
  double relevance_pct = 0.0;
  double f1_poisoned = 0.0;
  double acc_poisoned = 0.0;
};

struct IterationRecord {
  std::size_t iteration = 0;
  std::optional<std::string> artifact;  // empty iteration when absent
  std::string method;
  double lambda = 0.0;
  std::string label_set;
  std::string layer;
  std::string cav;
  std::string masks;
  std::size_t masks_used = 0;
  std::size_t masks_dropped = 0;
  std::string checkpoint;
  std::string report;
  std::vector<RetainedRef> retained;
  double f1_original = 0.0;
  double acc_original = 0.0;
  std::map<std::string, double> relevance_before;
  std::map<std::string, ArtifactScore> scores;  // after correction
};

inline constexpr int kManifestVersion = 1;

struct RunManifest {
  std::string run_id;
  std::string status = "running";  // running | awaiting_labels | complete
  std::string created_at;
  std::vector<LabelRecord> label_sets;
  std::vector<IterationRecord> iterations;

  // Checkpoint directory (relative) the next iteration starts from.
  std::string current_checkpoint() const;
  bool corrected(const std::string& artifact) const;
  const LabelRecord* label_set(const std::string& artifact) const;
};

nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
std::optional<RunManifest> load_manifest(const std::filesystem::path& root);
// Atomic write. Refuses to rewrite or drop iterations already on disk.
void save_manifest(const std::filesystem::path& root, const RunManifest& m);

struct LifecycleConfig {
  std::uint64_t seed = 0;
  revise::Method method = revise::Method::RrrCosine;
  float lambda = 100.0f;
  std::size_t epochs = 10;
  float learning_rate = 1e-4f;
  float momentum = 0.9f;
  std::size_t batch_size = 32;
  std::string layer;  // CAV layer; empty: best of the conv-layer sweep
  bool oracle = false;
  bool finish = false;  // close the run when no new labels are found
  std::size_t max_iterations = 8;
  bool truth_masks = false;  // use ground-truth masks instead of CAV masks
  double mask_quantile = 0.85;
  std::size_t mask_dilation = 2;
  bool reveal = true;
  reveal::RevealConfig reveal_config;

  static LifecycleConfig from_keyvalues(const config::KeyValues& kv);
  static std::vector<std::string> known_keys();
  void validate() const;
};

enum class RunStatus { Complete, AwaitingLabels };

struct LifecycleResult {
  RunStatus status = RunStatus::Complete;
  RunManifest manifest;
  std::string message;
};

// Requires dataset/ and model/ in `root`.
LifecycleResult run_lifecycle(const std::filesystem::path& root, const LifecycleConfig& cfg);

// Validates `file` against the schema and the run's dataset, copies it to
// labels/<name>.json and registers it. Duplicate names are rejected.
LabelRecord import_artifact_labels(const std::filesystem::path& root,
                                   const std::filesystem::path& file);

// One label set per rendered artifact, from training-split ground truth, in
// order of first appearance.
std::vector<labels::ArtifactLabelSet> oracle_label_sets(const data::Dataset& data);

// One row per (iteration, artifact).
std::string summary_csv(const RunManifest& m);
std::string summary_markdown(const RunManifest& m);

}  // namespace r2r::lifecycle
