#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "r2r/autodiff.hpp"
#include "r2r/dataset.hpp"
#include "r2r/tensor.hpp"

namespace r2r::nn {

enum class LayerKind { Conv2d, Dense, Relu, Softplus, MaxPool, AvgPool, Flatten };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

struct LayerDesc {
  LayerKind kind = LayerKind::Relu;
  std::size_t units = 0;  // conv output channels or dense width
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::string name;  // filled in by build_model when empty

  static LayerDesc conv(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                        std::size_t pad = 0);
  static LayerDesc dense(std::size_t width);
  static LayerDesc relu();
  static LayerDesc softplus();
  static LayerDesc maxpool(std::size_t kernel, std::size_t stride);
  static LayerDesc avgpool(std::size_t kernel, std::size_t stride);
  static LayerDesc flatten();

  bool has_params() const { return kind == LayerKind::Conv2d || kind == LayerKind::Dense; }
};

struct ModelSpec {
  std::size_t in_channels = 1;
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  std::size_t num_classes = 0;
  std::vector<LayerDesc> layers;
};

// conv(16,k3)-act-maxpool-conv(32,k3)-act-maxpool-flatten-dense(64)-act-dense(C)
ModelSpec mini_cnn(std::size_t channels, std::size_t side, std::size_t classes,
                   LayerKind activation = LayerKind::Relu);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

class InvalidSpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Parameter {
  std::string name;  // "<layer>.weight" or "<layer>.bias"
  std::size_t layer = 0;
  Tensor value;
};

// Per-layer outputs of one forward pass; outputs[l] is the output of layer l.
struct ActivationCache {
  Tensor input;
  std::vector<Tensor> outputs;
};

// Inference-time rewrite of one layer's output (e.g. an activation-space
// projection). Applied before the output is cached and passed on.
struct InferenceHook {
  std::size_t layer = 0;
  std::function<void(Tensor&)> apply;
};

// Training-time rewrite of a layer output on the tape; returns the new output.
using TapeHook = std::function<ad::Var(std::size_t layer, ad::Var output)>;

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, std::vector<Parameter> params);

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return spec_.layers.size(); }
  const LayerDesc& layer(std::size_t l) const { return spec_.layers.at(l); }
  std::size_t layer_index(std::string_view name) const;
  // Per-sample output shape of layer l (no batch axis).
  const Shape& output_shape(std::size_t l) const { return shapes_.at(l); }
  Shape input_shape() const { return {spec_.in_channels, spec_.in_height, spec_.in_width}; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::size_t param_count() const;
  const Tensor& weight(std::size_t layer) const;
  const Tensor& bias(std::size_t layer) const;

  // Layers whose parameters are trained under the last-dense-only filter:
  // every dense layer after the final flatten.
  std::vector<std::size_t> last_dense_layers() const;
  std::vector<std::size_t> conv_layers() const;

  Tensor forward(const Tensor& batch, ActivationCache* cache = nullptr,
                 const InferenceHook* hook = nullptr) const;

  // Forward pass on a tape. `params` are bound parameter nodes in params()
  // order. Returns every layer output; the last one holds the logits.
  std::vector<ad::Var> forward(ad::Tape& tape, ad::Var x, std::span<const ad::Var> params,
                               const TapeHook& hook = {}) const;

  // Forward from the output of layer `from` (exclusive) to the logits.
  Tensor forward_from(std::size_t from, const Tensor& activation) const;

 private:
  void check_input(const Shape& batch_shape) const;

  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::vector<Shape> shapes_;
  std::vector<int> weight_idx_;
  std::vector<int> bias_idx_;
};

// Validates the layer chain, names unnamed layers and initializes weights
// He-uniform from `seed` with zero biases.
Model build_model(ModelSpec spec, std::uint64_t seed);

Tensor predict(const Model& model, const Tensor& batch, ActivationCache* cache = nullptr,
               const InferenceHook* hook = nullptr);
// Argmax per row; lowest index wins ties.
std::vector<std::size_t> argmax_rows(const Tensor& logits);
std::vector<std::size_t> predict_labels(const Model& model, const data::Dataset& data,
                                        const InferenceHook* hook = nullptr,
                                        std::size_t batch_size = 64);

// ---- training ------------------------------------------------------------

enum class Optimizer { Sgd, Adam };
enum class TrainableFilter { All, LastDenseOnly };

struct TrainConfig {
  Optimizer optimizer = Optimizer::Sgd;
  float learning_rate = 0.005f;
  float momentum = 0.9f;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  TrainableFilter trainable = TrainableFilter::All;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
};

void validate(const TrainConfig& cfg);
std::vector<char> trainable_mask(const Model& model, TrainableFilter filter);

struct AuxContext {
  ad::Tape& tape;
  const Model& model;
  std::span<const ad::Var> params;
  const data::Dataset& data;
  std::size_t sample_index;
};

// Per-sample auxiliary loss; returns nullopt when the sample does not
// contribute (e.g. no mask).
using AuxLossFn = std::function<std::optional<ad::Var>(AuxContext&)>;

struct AuxLoss {
  std::string name;
  float weight = 0.0f;
  AuxLossFn fn;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double ce_loss = 0.0;
  std::vector<double> aux_losses;  // mean per contributing sample, aux order
  std::vector<std::size_t> aux_counts;
  double total_loss = 0.0;
  std::optional<double> val_accuracy;
};

struct TrainHistory {
  std::vector<std::string> aux_names;
  std::vector<float> aux_weights;
  std::vector<EpochRecord> epochs;
};

struct TrainOptions {
  const data::Dataset* validation = nullptr;
  // Called with the global step index; returns the hook for that step's
  // training forward (or an empty hook).
  std::function<TapeHook(std::size_t step)> hook_for_step;
};

// Minimizes mean cross-entropy + sum_k weight_k * mean_batch(aux_k).
TrainHistory train(Model& model, const data::Dataset& data, const TrainConfig& cfg,
                   std::span<const AuxLoss> aux_losses = {}, const TrainOptions& options = {});

// ---- checkpoints ---------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& dir,
                     const nlohmann::json& training_meta = nlohmann::json::object(),
                     std::uint64_t seed = 0);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace r2r::nn
