#pragma once

#include <filesystem>
#include <stdexcept>

#include "json.hpp"

// Static inspection bundle: bundle/index.json plus the images it references,
// all paths relative to the bundle directory.
namespace r2r::bundle {

inline constexpr int kBundleVersion = 1;

class BundleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Builds the index for the run in `root` from its manifest, the latest reveal
// output and the per-iteration artifacts. Pure function of the files on disk.
nlohmann::json build_index(const std::filesystem::path& root);

// Rebuilds root/bundle from scratch and returns its index. The caller owns the
// run lock. Throws BundleError when there is no reveal output and no CAV
// heatmap to export.
nlohmann::json export_inspection_bundle(const std::filesystem::path& root);

}  // namespace r2r::bundle
