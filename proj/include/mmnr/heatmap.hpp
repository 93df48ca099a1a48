#pragma once
// Heatmap PNG rendering of score maps.

#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "mmnr/tensor.hpp"

namespace mmnr {

/// Five-stop blue-cyan-green-yellow-red ramp at t in [0, 1].
inline std::array<std::uint8_t, 3> colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{
      {{0.0, 0.0, 0.5}, {0.0, 0.8, 1.0}, {0.1, 0.9, 0.1}, {1.0, 0.9, 0.0}, {0.9, 0.0, 0.0}}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const auto i = std::min<std::size_t>(3, static_cast<std::size_t>(t));
  const double f = t - static_cast<double>(i);
  std::array<std::uint8_t, 3> rgb{};
  for (int c = 0; c < 3; ++c)
    rgb[c] = static_cast<std::uint8_t>(std::lround(255.0 * (stops[i][c] + f * (stops[i + 1][c] - stops[i][c]))));
  return rgb;
}

/// Min-max normalized RGB pixels, row-major. A constant map is all t = 0.
inline std::vector<std::uint8_t> heatmap_pixels(const ScoreMap& m) {
  const double lo = m.min(), hi = m.max();
  std::vector<std::uint8_t> px(m.size() * 3);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double t = hi > lo ? (m.at(i) - lo) / (hi - lo) : 0.0;
    const auto c = colormap(t);
    std::copy(c.begin(), c.end(), px.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return px;
}

inline void render_heatmap(const ScoreMap& m, const std::filesystem::path& path) {
  if (m.size() == 0) throw DataError("render_heatmap: empty map");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto px = heatmap_pixels(m);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("render_heatmap: cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw DataError("render_heatmap: libpng failed on " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(m.width()), static_cast<png_uint_32>(m.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t u = 0; u < m.height(); ++u)
    png_write_row(png, const_cast<png_bytep>(px.data() + u * m.width() * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(f) != 0) throw DataError("render_heatmap: cannot close " + path.string());
}

}  // namespace mmnr
