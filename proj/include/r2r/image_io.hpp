#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "r2r/tensor.hpp"

namespace r2r::io {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Raster& img);
Raster read_png(const std::filesystem::path& path);

// [C, H, W] floats in [0, 1] <-> raster; values are clamped and rounded.
Raster to_raster(const Tensor& image);
Tensor from_raster(const Raster& img);

// 1-bit grayscale PNG for binary masks ([H, W], nonzero = set).
void write_mask_png(const std::filesystem::path& path, const Tensor& mask);
Tensor read_mask_png(const std::filesystem::path& path);

// Raw little-endian float32 dump and its reader.
void write_float32(const std::filesystem::path& path, const Tensor& t);
std::vector<float> read_float32(const std::filesystem::path& path);

}  // namespace r2r::io
