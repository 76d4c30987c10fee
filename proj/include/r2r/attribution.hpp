#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2r/dataset.hpp"
#include "r2r/nn.hpp"

// Layer-wise relevance propagation, concept-conditional (CRP) relevance and
// relevance-maximization reference samples.
namespace r2r::xai {

enum class Rule {
  Epsilon,        // z_ij / (z_j + eps * sign(z_j)), bias in the denominator
  ZPlus,          // positive contributions only (x+w+ + x-w-), bias ignored
  WinnerTakeAll,  // max-pool: all relevance to the pooled position
  Proportional,   // avg-pool: split by contribution
  PassThrough,    // element-wise activations and reshapes
};

const char* rule_name(Rule r);

class UnsupportedLayerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RuleComposite {
  std::map<nn::LayerKind, Rule> rules;
  float epsilon = 1e-6f;

  // Dense: epsilon; conv: z-plus; max-pool: winner-take-all; avg-pool:
  // proportional; activations and flatten: pass-through.
  static RuleComposite standard();
  Rule rule_for(nn::LayerKind kind) const;
  void validate(const nn::Model& model) const;
};

struct ConceptId {
  std::string layer;
  std::size_t channel = 0;
  bool operator==(const ConceptId&) const = default;
};

// Channels kept at the output of `layer` during the backward pass.
struct ChannelMask {
  std::size_t layer = 0;
  std::vector<std::size_t> channels;
};

struct AttributionMap {
  Tensor input_relevance;                // [C, H, W]
  std::vector<Tensor> layer_relevance;   // relevance at each layer output (per-sample shape)
  std::size_t target_logit_index = 0;
  float target_logit_value = 0.0f;
};

struct BackwardResult {
  Tensor input_relevance;               // [C, H, W]
  std::vector<Tensor> layer_relevance;  // empty for layers above the start layer
};

// Propagates `relevance` (relevance at the output of `start_layer`, with or
// without a leading batch axis of 1) down to the input, using the
// activations in `cache` (a batch-1 forward pass).
BackwardResult lrp_backward(const nn::Model& model, const nn::ActivationCache& cache,
                            std::size_t start_layer, const Tensor& relevance,
                            const RuleComposite& rules = RuleComposite::standard(),
                            const ChannelMask* mask = nullptr);

// Explains logit `target` for a single input ([C,H,W] or [1,C,H,W]).
AttributionMap lrp_attribute(const nn::Model& model, const Tensor& input, std::size_t target,
                             const RuleComposite& rules = RuleComposite::standard(),
                             const nn::InferenceHook* hook = nullptr);

AttributionMap crp_conditional_attribute(const nn::Model& model, const Tensor& input,
                                         std::size_t target, std::span<const ConceptId> concepts,
                                         const RuleComposite& rules = RuleComposite::standard());

// Relevance of each channel of `layer` (summed over spatial positions).
std::vector<double> channel_relevance(const AttributionMap& map, const nn::Model& model,
                                      std::size_t layer);
std::vector<double> channel_relevance(const nn::Model& model, const Tensor& input,
                                      std::size_t target, const std::string& layer,
                                      const RuleComposite& rules = RuleComposite::standard());

// Per-sample channel relevance at `layer` for each sample's predicted class.
struct ChannelRelevanceTable {
  std::size_t layer = 0;
  std::vector<std::size_t> sample_indices;
  std::vector<std::size_t> predicted;
  std::vector<std::vector<double>> relevance;  // [sample][channel]
};

ChannelRelevanceTable channel_relevance_table(const nn::Model& model, const data::Dataset& data,
                                              std::size_t layer,
                                              std::span<const std::size_t> indices,
                                              const RuleComposite& rules = RuleComposite::standard());

struct ReferenceSample {
  std::string id;
  std::size_t index = 0;
  std::size_t predicted = 0;
  double relevance = 0.0;
  Tensor conditional_heatmap;  // [H, W], channel-summed CRP map
};

// Top-k samples by relevance of `target_concept` for the predicted class; ties go
// to the smaller sample id.
std::vector<ReferenceSample> collect_reference_samples(
    const nn::Model& model, const data::Dataset& data, const ConceptId& target_concept, std::size_t k,
    const RuleComposite& rules = RuleComposite::standard(),
    const ChannelRelevanceTable* precomputed = nullptr);

// Channel-summed [H, W] map of an input-relevance tensor.
Tensor spatial_map(const Tensor& input_relevance);

// Diverging blue-white-red PNG normalized by max |R|, plus an optional raw
// float32 sidecar of the [H, W] map.
void write_heatmap(const std::filesystem::path& png, const Tensor& map,
                   const std::optional<std::filesystem::path>& sidecar = std::nullopt);

}  // namespace r2r::xai
