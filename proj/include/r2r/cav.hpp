#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2r/attribution.hpp"
#include "r2r/dataset.hpp"
#include "r2r/nn.hpp"

// Concept activation vectors for artifacts, their input-space localization
// and the mask / patch utilities built on top.
namespace r2r::cav {

class CavError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Cav {
  std::string layer;
  std::vector<double> direction;  // unit L2 norm, one entry per channel
  double bias = 0.0;              // classifier intercept in pooled-feature space
  // Mean of spatial_projection over clean / artifact samples; ClArC targets.
  double mu_clean = 0.0;
  double mu_artifact = 0.0;
  // Mean projection of the max-pooled classifier features.
  double pooled_mu_clean = 0.0;
  double pooled_mu_artifact = 0.0;
  double train_accuracy = 0.0;
  double cv_accuracy = 0.0;
  std::size_t n_artifact = 0;
  std::size_t n_clean = 0;
  double regularization_c = 1.0;
};

struct FitOptions {
  double c = 1.0;  // inverse L2 strength
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  std::size_t max_iterations = 100;
};

struct LogisticModel {
  Eigen::VectorXd weights;
  double intercept = 0.0;
  std::size_t iterations = 0;
};

// Minimizes 0.5 |w|^2 + C * sum log-loss with Newton steps (intercept
// unpenalized). Labels are 0/1.
LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const int> y, double c,
                           std::size_t max_iterations = 100);

// Per-channel spatial maximum of layer `layer`'s output, one row per sample.
Eigen::MatrixXd pooled_features(const nn::Model& model, const data::Dataset& data,
                                std::span<const std::size_t> indices, std::size_t layer);

Cav fit_cav(const nn::Model& model, const data::Dataset& data,
            std::span<const std::size_t> artifact, std::span<const std::size_t> clean,
            const std::string& layer, const FitOptions& options = {});

struct LayerScore {
  std::string layer;
  double cv_accuracy = 0.0;
};

// Fits a CAV at every conv layer; results in layer order.
std::vector<LayerScore> sweep_layers(const nn::Model& model, const data::Dataset& data,
                                     std::span<const std::size_t> artifact,
                                     std::span<const std::size_t> clean,
                                     const FitOptions& options = {});

// Mean over spatial positions of <a[:, y, x], direction> for one sample's
// activation ([C, H, W], [1, C, H, W] or [1, D]).
double spatial_projection(const Tensor& activation, std::span<const double> direction);

nlohmann::json cav_to_json(const Cav& cav);
Cav cav_from_json(const nlohmann::json& j);
void save_cav(const Cav& cav, const std::filesystem::path& file);
Cav load_cav(const std::filesystem::path& file);

// Input relevance [C, H, W] from a backward pass started at the CAV layer
// with relevance a * direction (direction broadcast over positions).
Tensor localize_artifact(const nn::Model& model, const Tensor& input, const Cav& cav,
                         const xai::RuleComposite& rules = xai::RuleComposite::standard());

enum class MaskSource { CavDerived, GroundTruth, Manual };
const char* mask_source_name(MaskSource s);

struct ArtifactMask {
  std::string id;
  Tensor mask;  // [H, W], 0/1
  MaskSource source = MaskSource::CavDerived;
};

// Pixels with relevance >= the q-quantile of the positive values, reduced to
// the largest 8-connected component and dilated by `dilation` pixels
// (square neighbourhood). All-zero when no relevance is positive.
Tensor binarize_mask(const Tensor& heatmap, double q = 0.85, std::size_t dilation = 2);

double iou(const Tensor& a, const Tensor& b);

struct Patch {
  Tensor image;  // [C, h, w] bounding box of the mask
  Tensor mask;   // [h, w]
  std::size_t y = 0;  // origin in the source image
  std::size_t x = 0;
};

Patch crop_artifact(const Tensor& image, const Tensor& mask);
// Copies patch pixels under its mask onto `target` with the patch origin at
// (y, x).
Tensor paste_artifact(const Tensor& target, const Patch& patch, std::size_t y, std::size_t x);

}  // namespace r2r::cav
