// SPDX-License-Identifier: Apache-2.0
#pragma once

// Matrix exports: CSV with round-trippable decimals and a PNG heatmap.
// Needs libpng at link time.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace edrl {

/// One row per line, comma separated, 17 significant digits.
inline std::string matrix_csv(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw std::invalid_argument("matrix_csv: size does not match rows x cols");
  std::string out;
  char buf[40];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", values[r * cols + c]);
      if (c) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

namespace detail {

// Diverging map over [-1, 1]: blue, white, red.
inline std::array<unsigned char, 3> diverging(double v) {
  if (!std::isfinite(v)) return {0, 0, 0};
  const double t = std::clamp(v, -1.0, 1.0);
  const auto ch = [](double x) { return static_cast<unsigned char>(std::lround(255.0 * x)); };
  if (t >= 0.0) return {255, ch(1.0 - t), ch(1.0 - t)};
  return {ch(1.0 + t), ch(1.0 + t), 255};
}

}  // namespace detail

/// Writes `values` ([rows, cols]) as an RGB heatmap, each cell a `cell`-pixel
/// square. Values are clamped to [-1, 1].
inline void write_heatmap_png(const std::string& path, std::span<const double> values, std::size_t rows,
                              std::size_t cols, std::size_t cell = 16) {
  if (values.size() != rows * cols || rows == 0 || cols == 0 || cell == 0) {
    throw std::invalid_argument("heatmap: bad matrix extents");
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  const std::size_t w = cols * cell, h = rows * cell;
  std::vector<unsigned char> row(3 * w);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto rgb = detail::diverging(values[(y / cell) * cols + x / cell]);
      std::copy(rgb.begin(), rgb.end(), row.begin() + static_cast<std::ptrdiff_t>(3 * x));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace edrl
