#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "r2r/autodiff.hpp"
#include "r2r/cav.hpp"
#include "r2r/dataset.hpp"
#include "r2r/nn.hpp"

// Model correction: input-gradient penalties (RRR), contextual-decomposition
// penalties (CDEP), activation-space ClArC and the fine-tuning driver.
namespace r2r::revise {

class CorrectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { Vanilla, Rrr, RrrCosine, Cdep, AClarc, PClarc };
const char* method_name(Method m);
Method parse_method(std::string_view name);
bool uses_masks(Method m);
bool uses_cav(Method m);

// Default lambda sweep grid.
inline constexpr float kLambdaGrid[] = {1, 5, 10, 50, 100, 500, 1000, 5000, 10000};

enum class RrrVariant { Original, Cosine };

// x is a [1, C, H, W] node, mask an [H, W] 0/1 tensor. Original:
// |grad_x CE * M|^2. Cosine: <|grad_x f_p|, M> / (|grad_x f_p| |M|) with p the
// predicted class (lowest index on ties). nullopt for an all-zero mask.
std::optional<ad::Var> rrr_loss(ad::Tape& tape, const nn::Model& model,
                                std::span<const ad::Var> params, ad::Var x, std::size_t label,
                                const Tensor& mask, RrrVariant variant);

// Per-layer relevant / irrelevant streams; relevant + irrelevant equals the
// plain forward output of every layer.
struct CdStreams {
  std::vector<ad::Var> relevant;
  std::vector<ad::Var> irrelevant;
};

// Contextual decomposition of a single-sample forward pass on the tape, with
// the relevant stream seeded by x * mask.
CdStreams cd_forward(ad::Tape& tape, const nn::Model& model, std::span<const ad::Var> params,
                     ad::Var x, const Tensor& mask);

struct CdDecomposition {
  std::vector<Tensor> relevant;
  std::vector<Tensor> irrelevant;
};

CdDecomposition cd_decompose(const nn::Model& model, const Tensor& input, const Tensor& mask);

// sum_c e^{a_c} / (e^{a_c} + e^{b_c}) for the masked-feature scores a and the
// complement scores b.
ad::Var cdep_loss(ad::Var masked_scores, ad::Var complement_scores);
double cdep_value(const Tensor& masked_scores, const Tensor& complement_scores);

// Moves every sample's spatial projection onto the CAV direction to `target`
// by adding a multiple of the direction at each position. `activations` is
// batched ([N, C, H, W] or [N, D]).
void clarc_shift(Tensor& activations, const cav::Cav& cav, double target);

// Inference hook projecting onto the clean mean (p-ClArC).
nn::InferenceHook pclarc_hook(const nn::Model& model, const cav::Cav& cav);
// Training hook shifting activations toward the artifact mean (a-ClArC).
nn::TapeHook aclarc_hook(const nn::Model& model, const cav::Cav& cav);

struct MaskSet {
  std::string artifact_name;
  std::map<std::string, Tensor> masks;  // sample id -> [H, W]
};

struct RetainedLoss {
  Method method = Method::Rrr;
  float lambda = 0.0f;
  MaskSet masks;
};

struct CorrectionConfig {
  Method method = Method::Rrr;
  float lambda = 1.0f;
  std::size_t epochs = 10;
  float learning_rate = 1e-4f;
  float momentum = 0.9f;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  nn::TrainableFilter trainable = nn::TrainableFilter::LastDenseOnly;
  // a-ClArC: perturb every other batch (false: every batch).
  bool aclarc_alternate = true;
};

void validate(const CorrectionConfig& cfg);

struct CorrectionResult {
  nn::Model model;
  nn::TrainHistory history;
  std::optional<nn::InferenceHook> inference_hook;  // p-ClArC only
  std::vector<std::string> zero_mask_samples;
};

// Fine-tunes a copy of `base`. `masks` feeds RRR/CDEP, `cav` feeds ClArC and
// `retained` adds the aux losses of earlier iterations.
CorrectionResult finetune_correct(const nn::Model& base, const data::Dataset& train,
                                  const CorrectionConfig& cfg, const MaskSet* masks,
                                  const cav::Cav* cav, std::span<const RetainedLoss> retained = {},
                                  const data::Dataset* validation = nullptr);

// Aux loss for a mask-based method (rrr, rrr-cosine, cdep).
nn::AuxLoss make_aux_loss(Method method, float lambda, const MaskSet& masks,
                          std::shared_ptr<std::vector<std::string>> zero_masks = nullptr);

// CSV with epoch, ce_loss, one loss and one lambda column per aux term and
// total_loss.
void write_loss_log(const nn::TrainHistory& history, const std::filesystem::path& file);

}  // namespace r2r::revise
