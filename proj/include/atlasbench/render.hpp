#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atlasbench/tensor.hpp"
#include "atlasbench/transfer.hpp"
#include "atlasbench/viz.hpp"

namespace atlasbench::render {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kGray{128, 128, 128};
inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kBlack{0, 0, 0};

/// 8-bit RGB raster, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  Image() = default;
  Image(std::size_t w, std::size_t h, Rgb fill = kWhite);
  Rgb at(std::size_t x, std::size_t y) const;
  void set(std::size_t x, std::size_t y, Rgb c);
  void fill_rect(long x0, long y0, long x1, long y1, Rgb c);  // half-open, clipped
};

/// PNG bytes with no time or text chunks, so equal images give equal bytes.
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);
Image decode_png(const std::filesystem::path& path);

/// Class colors: a fixed 10-color set for up to 10 classes, 15 colors for up to
/// 15, and an evenly spaced 28-hue wheel beyond that.
std::vector<Rgb> palette(std::size_t classes);

/// Tile images in row-major cell order; empty cells are blank.
struct TileMosaic {
  std::size_t g = 15;
  std::size_t tile = 28;
  std::size_t pad = 2;
  std::vector<std::optional<Tensor<float>>> tiles;  // g*g entries, [C, tile, tile] in [0,1]
};

/// Places `results` (ordered by cell index) into the occupied cells of `mask`.
TileMosaic mosaic_from_results(std::size_t g, std::span<const std::uint8_t> mask,
                               std::span<const viz::RenderOutcome> results, std::size_t pad = 2);

/// g * (tile + 2 pad) pixels per side, gray padding and gray blanks. Grid row
/// 0 is drawn at the bottom, matching render_embedding.
Image render_mosaic(const TileMosaic& mosaic);

struct Histogram2D {
  std::size_t bins = 0;
  std::size_t classes = 0;
  std::vector<std::uint32_t> counts;   // bins*bins, row = y bin from the top
  std::vector<std::int32_t> majority;  // -1 for empty bins; ties go to the lower class
};

Histogram2D histogram_2d(const Tensor<float>& coords, std::span<const std::int32_t> labels, std::size_t classes,
                         std::size_t bins);

/// Color of a bin: class color blended over white by count / max count.
Rgb bin_color(const Histogram2D& h, std::size_t bin, const std::vector<Rgb>& colors);

struct EmbeddingPlotLayout {
  std::size_t cell = 1;       // pixels per bin
  std::size_t legend_x = 0;   // legend column starts here
};

/// Histogram of the 2-D embedding colored by majority class, with a legend.
Image render_embedding(const Tensor<float>& coords, std::span<const std::int32_t> labels, std::size_t classes,
                       std::size_t bins, EmbeddingPlotLayout* layout = nullptr);

struct ScanPlotLayout {
  long left = 0, right = 0, top = 0, bottom = 0;  // plot area in pixels
  double y_min = 0, y_max = 1;
  double log_x_min = 0, log_x_max = 1;

  long x_pixel(double width) const;
  long y_pixel(double accuracy) const;
};

inline constexpr Rgb kOriginalColor{31, 119, 180};
inline constexpr Rgb kNewColor{255, 127, 14};
inline constexpr Rgb kBaselineColor{80, 80, 80};

/// Accuracy vs width (log axis) for both tasks with standard-deviation bars
/// and an optional dashed baseline.
Image render_scan(std::span<const transfer::AggregateRow> table, std::optional<double> baseline,
                  ScanPlotLayout* layout = nullptr);

/// Draws text with a 3x5 bitmap font (digits, '.', '-', '%', lowercase letters).
void draw_text(Image& image, long x, long y, std::string_view text, Rgb color, int scale = 1);

}  // namespace atlasbench::render
