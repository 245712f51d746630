/*
 * Copyright 2026 The GRAPHITE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// PNG I/O through libpng: 8-bit grayscale masks and saliency exports, and
// RGB heatmaps on a fixed viridis-style ramp.

#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "graphite/error.hpp"
#include "graphite/saliency.hpp"

namespace graphite {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triples
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

inline void write_png(const std::string& path, std::size_t w, std::size_t h, int color_type,
                      std::size_t channels, const std::vector<std::uint8_t>& pixels) {
  if (w == 0 || h == 0 || pixels.size() != w * h * channels) {
    throw ValidationError("png: image buffer does not match " + std::to_string(w) + "x" + std::to_string(h));
  }
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw RuntimeError("cannot open " + path + " for writing");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeError("png: out of memory");
  }
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(pixels.data() + y * w * channels);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeError("png write " + path + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_gray_png(const std::string& path, const GrayImage& img) {
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 1, img.pixels);
}

inline void write_rgb_png(const std::string& path, const RgbImage& img) {
  detail::write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 3, img.pixels);
}

/// Reads any PNG and converts it to 8-bit RGB.
inline RgbImage read_rgb_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ValidationError("cannot open image " + path);
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                           detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeError("png: out of memory");
  }
  RgbImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("invalid PNG " + path + ": " + err);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.resize(img.width * img.height * 3);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Reads a PNG as 8-bit grayscale (colour input is converted by libpng).
inline GrayImage read_gray_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ValidationError("cannot open image " + path);
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                           detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeError("png: out of memory");
  }
  GrayImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("invalid PNG " + path + ": " + err);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_palette_to_rgb(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.resize(img.width * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// round(255 * clamp(v, 0, 1)).
inline GrayImage to_gray(const RasterMap& map) {
  GrayImage img{map.width, map.height, std::vector<std::uint8_t>(map.size())};
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = std::clamp(map.values[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return img;
}

/// Nine anchors sampled from viridis at 0, 1/8, ..., 1; linear in between.
inline constexpr std::array<std::array<std::uint8_t, 3>, 9> kHeatRamp{{
    {68, 1, 84},
    {71, 44, 122},
    {59, 81, 139},
    {44, 113, 142},
    {33, 144, 141},
    {39, 173, 129},
    {92, 200, 99},
    {170, 220, 50},
    {253, 231, 37},
}};

inline std::array<std::uint8_t, 3> heat_color(double v) {
  v = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
  const double pos = v * static_cast<double>(kHeatRamp.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(pos), kHeatRamp.size() - 2);
  const double f = pos - static_cast<double>(i);
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c) {
    const double a = kHeatRamp[i][c], b = kHeatRamp[i + 1][c];
    out[c] = static_cast<std::uint8_t>(std::lround(a + (b - a) * f));
  }
  return out;
}

inline RgbImage to_heatmap(const RasterMap& map) {
  RgbImage img{map.width, map.height, std::vector<std::uint8_t>(map.size() * 3)};
  for (std::size_t i = 0; i < map.size(); ++i) {
    const auto c = heat_color(map.values[i]);
    for (int k = 0; k < 3; ++k) img.pixels[i * 3 + k] = c[k];
  }
  return img;
}

/// Alpha-blends the heatmap over `base`, sampling the map by nearest
/// neighbour at the base resolution.
inline RgbImage overlay_heatmap(const RgbImage& base, const RasterMap& map, double alpha = 0.5) {
  if (map.width == 0 || map.height == 0) throw ValidationError("overlay_heatmap: empty map");
  if (alpha < 0.0 || alpha > 1.0) throw ValidationError("overlay_heatmap: alpha must lie in [0, 1]");
  RgbImage out = base;
  for (std::size_t y = 0; y < base.height; ++y) {
    const std::size_t my = std::min(map.height - 1, y * map.height / base.height);
    for (std::size_t x = 0; x < base.width; ++x) {
      const std::size_t mx = std::min(map.width - 1, x * map.width / base.width);
      const auto c = heat_color(map.at(mx, my));
      for (int k = 0; k < 3; ++k) {
        auto& p = out.pixels[(y * base.width + x) * 3 + k];
        p = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * p + alpha * c[k]));
      }
    }
  }
  return out;
}

}  // namespace graphite
