#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2r/attribution.hpp"
#include "r2r/bench.hpp"
#include "r2r/cav.hpp"
#include "r2r/dataset.hpp"
#include "r2r/nn.hpp"

// Poisoned test sets, artifact relevance and classification metrics, and the
// run reports built from them.
namespace r2r::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every sample gets the tag; masks, flags and artifact names are set and
// labels are kept.
data::Dataset poison_synthetic(const data::Dataset& test, const bench::ArtifactSpec& artifact,
                               std::uint64_t seed);

// Every sample gets a (patch, mask) drawn uniformly from `pool`, pasted at a
// uniform position that keeps the patch in frame.
data::Dataset poison_intrinsic(const data::Dataset& test, std::span<const cav::Patch> pool,
                               const std::string& artifact_name, std::uint64_t seed);

struct FractionResult {
  double mean_pct = 0.0;
  std::vector<std::string> ids;
  std::vector<double> per_sample_pct;
  std::size_t excluded = 0;  // zero total relevance
  bool positive_only = false;
};

// Mean over masked samples of sum_mask |R| / sum |R| (x100), explaining each
// sample's predicted class. Masks come from `masks` (by id) or, when null,
// from each sample's truth mask; samples without a mask are skipped.
FractionResult artifact_relevance_fraction(const nn::Model& model, const data::Dataset& data,
                                           const std::map<std::string, Tensor>* masks = nullptr,
                                           bool positive_only = false,
                                           const nn::InferenceHook* hook = nullptr,
                                           const xai::RuleComposite& rules = xai::RuleComposite::standard());

// Fraction of one relevance map [C,H,W] or [H,W] inside an [H,W] mask.
std::optional<double> relevance_fraction(const Tensor& relevance, const Tensor& mask,
                                         bool positive_only = false);

struct ClassMetrics {
  std::size_t support = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct Metrics {
  std::size_t samples = 0;
  double accuracy_pct = 0.0;
  double macro_f1_pct = 0.0;  // over classes present in the ground truth
  std::vector<ClassMetrics> per_class;
  std::vector<std::size_t> absent_classes;
};

Metrics classification_metrics(std::span<const std::size_t> truth,
                               std::span<const std::size_t> predicted, std::size_t num_classes);
Metrics classification_metrics(const nn::Model& model, const data::Dataset& data,
                               const nn::InferenceHook* hook = nullptr);

inline constexpr int kReportSchema = 1;

struct EvaluationReport {
  std::string run_id;
  std::string method;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  std::string artifact;
  std::string dataset;
  double artifact_relevance_pct = 0.0;
  std::size_t relevance_samples = 0;
  std::size_t relevance_excluded = 0;
  Metrics original;
  Metrics poisoned;
};

nlohmann::json report_to_json(const EvaluationReport& r);
EvaluationReport report_from_json(const nlohmann::json& j);
// report.json, report.csv and report.md in `dir`.
void write_report(const EvaluationReport& r, const std::filesystem::path& dir);

struct Comparison {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::vector<bool>> best;  // per row and column
};

// One row per report; the best value of each metric column is flagged
// (lowest artifact relevance, highest F1 and accuracy).
Comparison compare_runs(std::span<const EvaluationReport> reports);
std::string comparison_csv(const Comparison& c);
std::string comparison_markdown(const Comparison& c);

}  // namespace r2r::eval
