#include "r2r/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

namespace r2r::io {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors through longjmp; the message is parked here so it can
// be rethrown as an exception once control is back in C++ frames.
struct PngErr {
  char message[256] = {};
};

void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<PngErr*>(png_get_error_ptr(png));
  std::snprintf(err->message, sizeof(err->message), "%s", msg);
  png_longjmp(png, 1);
}
void png_warn(png_structp, png_const_charp) {}

// All C++ objects used below are constructed by the caller, so a longjmp
// never skips a destructor.
bool write_rows(std::FILE* f, PngErr* err, std::size_t w, std::size_t h, int color_type,
                int bit_depth, png_bytep* rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, png_fail, png_warn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

struct ReadHeader {
  png_uint_32 width = 0, height = 0;
  int channels = 0;
};

bool read_rows(std::FILE* f, PngErr* err, ReadHeader* hdr, std::vector<std::uint8_t>* pixels,
               std::vector<png_bytep>* rows) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, png_fail, png_warn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, f);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  hdr->width = png_get_image_width(png, info);
  hdr->height = png_get_image_height(png, info);
  hdr->channels = png_get_channels(png, info);
  pixels->resize(std::size_t{hdr->width} * hdr->height * hdr->channels);
  rows->resize(hdr->height);
  for (std::size_t y = 0; y < hdr->height; ++y) {
    (*rows)[y] = pixels->data() + y * hdr->width * hdr->channels;
  }
  png_read_image(png, rows->data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

void write_png_impl(const fs::path& path, std::size_t w, std::size_t h, int color_type,
                    int bit_depth, std::vector<std::vector<std::uint8_t>>& rows) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ImageIoError("cannot open " + path.string() + " for writing");
  std::vector<png_bytep> ptrs;
  for (auto& r : rows) ptrs.push_back(r.data());
  PngErr err;
  if (!write_rows(f.get(), &err, w, h, color_type, bit_depth, ptrs.data())) {
    throw ImageIoError(path.string() + ": " + err.message);
  }
}

}  // namespace

void write_png(const fs::path& path, const Raster& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageIoError("write_png: 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels || img.width == 0) {
    throw ImageIoError("write_png: pixel buffer size mismatch");
  }
  std::vector<std::vector<std::uint8_t>> rows(img.height);
  const std::size_t stride = img.width * img.channels;
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y].assign(img.pixels.begin() + y * stride, img.pixels.begin() + (y + 1) * stride);
  }
  write_png_impl(path, img.width, img.height,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, 8, rows);
}

Raster read_png(const fs::path& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ImageIoError("cannot open " + path.string());
  PngErr err;
  ReadHeader hdr;
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (!read_rows(f.get(), &err, &hdr, &pixels, &rows)) {
    throw ImageIoError(path.string() + ": " + err.message);
  }
  Raster out;
  out.width = hdr.width;
  out.height = hdr.height;
  out.channels = static_cast<std::size_t>(hdr.channels);
  out.pixels = std::move(pixels);
  return out;
}

Raster to_raster(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("to_raster: [C,H,W] expected");
  Raster r;
  r.channels = image.dim(0);
  r.height = image.dim(1);
  r.width = image.dim(2);
  r.pixels.resize(image.numel());
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t i = 0; i < r.height * r.width; ++i) {
      const float v = std::clamp(image[c * r.height * r.width + i], 0.0f, 1.0f);
      r.pixels[i * r.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return r;
}

Tensor from_raster(const Raster& img) {
  Tensor t({img.channels, img.height, img.width});
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < img.height * img.width; ++i) {
      t[c * img.height * img.width + i] = img.pixels[i * img.channels + c] / 255.0f;
    }
  return t;
}

void write_mask_png(const fs::path& path, const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("write_mask_png: [H,W] expected");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  std::vector<std::vector<std::uint8_t>> rows(h, std::vector<std::uint8_t>((w + 7) / 8, 0));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask[y * w + x] != 0.0f) rows[y][x / 8] |= static_cast<std::uint8_t>(0x80u >> (x % 8));
  write_png_impl(path, w, h, PNG_COLOR_TYPE_GRAY, 1, rows);
}

Tensor read_mask_png(const fs::path& path) {
  const Raster r = read_png(path);
  Tensor m({r.height, r.width});
  for (std::size_t i = 0; i < r.height * r.width; ++i) {
    m[i] = r.pixels[i * r.channels] >= 128 ? 1.0f : 0.0f;
  }
  return m;
}

void write_float32(const fs::path& path, const Tensor& t) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

std::vector<float> read_float32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ImageIoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(float)) throw ImageIoError(path.string() + ": size not a multiple of 4");
  std::vector<float> v(bytes / sizeof(float));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  return v;
}

}  // namespace r2r::io
