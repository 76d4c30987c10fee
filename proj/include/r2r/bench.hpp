#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2r/dataset.hpp"
#include "r2r/rng.hpp"

// Synthetic Clever Hans benchmark: geometric shapes on a noisy background,
// with a text tag planted into part of one class's training images.
namespace r2r::bench {

class BenchConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A text tag: a filled box with block letters cut into it.
struct GlyphSpec {
  std::string text = "CH";
  float box_value = 1.0f;     // tag background
  float letter_value = 0.0f;  // letter strokes
  float scale_min = 0.15f;    // tag width as a fraction of the image side
  float scale_max = 0.35f;
  float max_rotation_deg = 30.0f;
};

struct ArtifactSpec {
  std::string name = "clever_hans";
  GlyphSpec glyph;
  std::size_t target_class = 0;
  double probability = 0.5;  // fraction of the class's training samples tagged
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct ShapeStyle {
  float contrast_min = 0.35f;  // |shape - background| intensity gap
  float contrast_max = 0.5f;
  float noise_std = 0.03f;
  float size_min = 0.3f;  // shape radius as a fraction of the side
  float size_max = 0.42f;
};

struct BenchConfig {
  std::size_t side = 32;
  std::size_t num_classes = 4;
  std::size_t per_class = 500;
  std::vector<ArtifactSpec> artifacts{ArtifactSpec{}};
  SplitFractions split;
  ShapeStyle style;
  std::uint64_t seed = 0;
};

void validate(const BenchConfig& cfg);
nlohmann::json config_to_json(const BenchConfig& cfg);
BenchConfig config_from_json(const nlohmann::json& j);

const std::vector<std::string>& shape_names();

// Glyph bitmap (1 = letter stroke) with a one-texel box margin; rows x cols.
struct GlyphBitmap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> strokes;
};
GlyphBitmap render_text(const std::string& text);

struct Injection {
  Tensor image;  // [C, H, W]
  Tensor mask;   // [H, W], 1 on the tag support
};

// Draws the tag at a random scale, rotation and fully in-frame position.
Injection inject_text_artifact(const Tensor& image, const GlyphSpec& glyph, Rng& rng);

// Stream used for a sample's artifact placement.
std::uint64_t artifact_stream(std::uint64_t seed, const std::string& artifact,
                              const std::string& sample_id);

struct GenerationSummary {
  std::vector<std::size_t> artifact_counts;  // per artifact, training split
};

data::Dataset generate_synthetic_dataset(const BenchConfig& cfg,
                                         GenerationSummary* summary = nullptr);

// Stratified by class; assigns Sample::split.
void split_dataset(data::Dataset& data, const SplitFractions& fractions, std::uint64_t seed);

// On-disk layout: images/, masks/, index.csv, dataset.json.
void save_image_folder(const data::Dataset& data, const std::filesystem::path& dir,
                       const nlohmann::json& meta = nlohmann::json::object());
data::Dataset load_image_folder(const std::filesystem::path& dir,
                                const std::string& index_csv = "index.csv");

}  // namespace r2r::bench
