#pragma once

// Image container and file I/O. Supported formats: 8-bit RGB PNG and binary
// PPM (P6, maxval 255). Pixels are scaled to [0,1] as v/255 on load; saving
// inverts with round-half-up, so load -> save -> load reproduces every pixel
// byte exactly.

#include <png.h>

#include <cctype>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

template <typename Real>
struct ImageBuffer {
  Tensor<Real> pixels;  // [H, W, 3] in [0, 1]
  std::string source_path;
  int original_height = 0;  // size before any padding applied downstream
  int original_width = 0;

  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }

  static ImageBuffer from_pixels(Tensor<Real> px, std::string path = "") {
    if (px.rank() != 3 || px.dim(2) != 3)
      throw ShapeMismatch("image pixels must be [H,W,3], got " + shape_str(px.shape()));
    ImageBuffer buf;
    buf.original_height = px.dim(0);
    buf.original_width = px.dim(1);
    buf.pixels = std::move(px);
    buf.source_path = std::move(path);
    return buf;
  }
};

namespace detail {

inline bool has_suffix(const std::string &s, const std::string &suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct FileCloser {
  void operator()(std::FILE *f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

template <typename Real>
std::vector<unsigned char> to_bytes(const Tensor<Real> &pixels) {
  std::vector<unsigned char> bytes(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) {
    double v = static_cast<double>(pixels[i]) * 255.0 + 0.5;
    if (v < 0) v = 0;
    if (v > 255) v = 255;
    bytes[i] = static_cast<unsigned char>(v);
  }
  return bytes;
}

template <typename Real>
Tensor<Real> from_bytes(const unsigned char *bytes, int h, int w) {
  Tensor<Real> px({h, w, 3});
  for (size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<Real>(bytes[i] / 255.0);
  return px;
}

template <typename Real>
ImageBuffer<Real> load_png(const std::string &path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw CorruptFile(path + " is not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<unsigned char> data;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw CorruptFile("failed to decode " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth != 8 || color_type != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw UnsupportedFormat(path + ": only 8-bit RGB PNG is supported (bit depth " +
                            std::to_string(bit_depth) + ", color type " +
                            std::to_string(color_type) + ")");
  }
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  data.resize(static_cast<size_t>(h) * w * 3);
  rows.resize(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = data.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  ImageBuffer<Real> buf;
  buf.pixels = from_bytes<Real>(data.data(), h, w);
  buf.source_path = path;
  buf.original_height = h;
  buf.original_width = w;
  return buf;
}

template <typename Real>
void save_png(const ImageBuffer<Real> &img, const std::string &path) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode " + path);
  }
  const int h = img.height(), w = img.width();
  auto bytes = to_bytes(img.pixels);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * w * 3;
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

template <typename Real>
ImageBuffer<Real> load_ppm(const std::string &path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = std::fgetc(fp.get())) != EOF) {
      if (ch == '#') {  // comment to end of line
        while ((ch = std::fgetc(fp.get())) != EOF && ch != '\n') {}
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw CorruptFile(path + ": truncated PPM header");
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P6") throw UnsupportedFormat(path + ": only binary PPM (P6) is supported");
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0) throw CorruptFile(path + ": bad PPM dimensions");
  if (maxval != 255) throw UnsupportedFormat(path + ": only maxval 255 PPM is supported");
  std::vector<unsigned char> data(static_cast<size_t>(h) * w * 3);
  if (std::fread(data.data(), 1, data.size(), fp.get()) != data.size())
    throw CorruptFile(path + ": truncated PPM data");
  ImageBuffer<Real> buf;
  buf.pixels = from_bytes<Real>(data.data(), h, w);
  buf.source_path = path;
  buf.original_height = h;
  buf.original_width = w;
  return buf;
}

template <typename Real>
void save_ppm(const ImageBuffer<Real> &img, const std::string &path) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);
  const int h = img.height(), w = img.width();
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  auto bytes = to_bytes(img.pixels);
  if (std::fwrite(header.data(), 1, header.size(), fp.get()) != header.size() ||
      std::fwrite(bytes.data(), 1, bytes.size(), fp.get()) != bytes.size())
    throw IoError("short write to " + path);
}

}  // namespace detail

template <typename Real>
ImageBuffer<Real> load_image(const std::string &path) {
  if (detail::has_suffix(path, ".png")) return detail::load_png<Real>(path);
  if (detail::has_suffix(path, ".ppm")) return detail::load_ppm<Real>(path);
  throw UnsupportedFormat(path + ": expected a .png or .ppm file");
}

template <typename Real>
void save_image(const ImageBuffer<Real> &img, const std::string &path) {
  if (detail::has_suffix(path, ".png")) return detail::save_png(img, path);
  if (detail::has_suffix(path, ".ppm")) return detail::save_ppm(img, path);
  throw UnsupportedFormat(path + ": expected a .png or .ppm file");
}

}  // namespace wecdg
