#include "atlasbench/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "atlasbench/atlas.hpp"

namespace atlasbench::render {

Image::Image(std::size_t w, std::size_t h, Rgb fill) : width(w), height(h), pixels(w * h * 3) {
  for (std::size_t i = 0; i < w * h; ++i) std::memcpy(&pixels[3 * i], fill.data(), 3);
}

Rgb Image::at(std::size_t x, std::size_t y) const {
  const auto* p = &pixels[3 * (y * width + x)];
  return {p[0], p[1], p[2]};
}

void Image::set(std::size_t x, std::size_t y, Rgb c) {
  if (x < width && y < height) std::memcpy(&pixels[3 * (y * width + x)], c.data(), 3);
}

void Image::fill_rect(long x0, long y0, long x1, long y1, Rgb c) {
  x0 = std::max(x0, 0L);
  y0 = std::max(y0, 0L);
  x1 = std::min(x1, static_cast<long>(width));
  y1 = std::min(y1, static_cast<long>(height));
  for (long y = y0; y < y1; ++y) {
    for (long x = x0; x < x1; ++x) set(x, y, c);
  }
}

namespace {

void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

void png_flush_noop(png_structp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.width == 0 || image.height == 0) throw ContractError("encode_png: empty image");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: cannot allocate writer");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: encoding failed");
  }
  png_set_write_fn(png, &out, png_append, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&image.pixels[3 * y * image.width]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image decode_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw FormatError("cannot read PNG " + path.string() + ": " + img.message, 0);
  }
  img.format = PNG_FORMAT_RGB;
  Image out(img.width, img.height);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("cannot decode PNG " + path.string() + ": " + img.message, 0);
  }
  return out;
}

std::vector<Rgb> palette(std::size_t classes) {
  static const std::vector<Rgb> ten{{31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},  {148, 103, 189},
                                    {140, 86, 75},  {227, 119, 194}, {127, 127, 127}, {188, 189, 34}, {23, 190, 207}};
  static const std::vector<Rgb> extra{{174, 199, 232}, {255, 187, 120}, {152, 223, 138}, {255, 152, 150}, {197, 176, 213}};
  if (classes <= 10) return {ten.begin(), ten.begin() + static_cast<long>(classes)};
  if (classes <= 15) {
    std::vector<Rgb> out = ten;
    out.insert(out.end(), extra.begin(), extra.begin() + static_cast<long>(classes - 10));
    return out;
  }
  // Hue wheel, alternating brightness so that neighbours differ.
  std::vector<Rgb> out;
  for (std::size_t i = 0; i < classes; ++i) {
    const double h = 6.0 * static_cast<double>(i) / static_cast<double>(classes);
    const double v = i % 2 ? 0.7 : 0.95, s = 0.8;
    const double c = v * s, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = v - c;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(h)) {
      case 0: r = c, g = x; break;
      case 1: r = x, g = c; break;
      case 2: g = c, b = x; break;
      case 3: g = x, b = c; break;
      case 4: r = x, b = c; break;
      default: r = c, b = x; break;
    }
    auto u8 = [](double t) { return static_cast<std::uint8_t>(std::lround(255 * t)); };
    out.push_back({u8(r + m), u8(g + m), u8(b + m)});
  }
  return out;
}

TileMosaic mosaic_from_results(std::size_t g, std::span<const std::uint8_t> mask,
                               std::span<const viz::RenderOutcome> results, std::size_t pad) {
  if (mask.size() != g * g) {
    throw ContractError("mosaic: mask has " + std::to_string(mask.size()) + " cells, grid needs " + std::to_string(g * g));
  }
  std::vector<std::size_t> occupied;
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (mask[c]) occupied.push_back(c);
  }
  if (occupied.size() != results.size()) {
    throw ContractError("mosaic: " + std::to_string(results.size()) + " results for " +
                        std::to_string(occupied.size()) + " occupied cells");
  }
  TileMosaic m;
  m.g = g;
  m.pad = pad;
  m.tiles.assign(g * g, std::nullopt);
  bool sized = false;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].index != occupied[i]) {
      throw ContractError("mosaic: result " + std::to_string(i) + " is for cell " + std::to_string(results[i].index) +
                          ", expected cell " + std::to_string(occupied[i]));
    }
    if (!results[i].result) continue;
    const auto& img = results[i].result->image;
    if (!sized) {
      m.tile = img.dim(1);
      sized = true;
    }
    m.tiles[occupied[i]] = img;
  }
  return m;
}

Image render_mosaic(const TileMosaic& m) {
  if (m.tiles.size() != m.g * m.g) {
    throw ContractError("mosaic: " + std::to_string(m.tiles.size()) + " tiles for a " + std::to_string(m.g) + "x" +
                        std::to_string(m.g) + " grid");
  }
  const std::size_t stride = m.tile + 2 * m.pad;
  Image out(m.g * stride, m.g * stride, kGray);
  for (std::size_t cell = 0; cell < m.tiles.size(); ++cell) {
    if (!m.tiles[cell]) continue;
    const auto& t = *m.tiles[cell];
    if (t.rank() != 3 || t.dim(1) != m.tile || t.dim(2) != m.tile || (t.dim(0) != 1 && t.dim(0) != 3)) {
      throw ContractError("mosaic: tile " + std::to_string(cell) + " has shape " + shape_str(t.shape()) +
                          ", expected [1|3, " + std::to_string(m.tile) + ", " + std::to_string(m.tile) + "]");
    }
    // Grid row 0 holds the smallest y; draw it at the bottom like the histogram.
    const std::size_t ox = (cell % m.g) * stride + m.pad, oy = (m.g - 1 - cell / m.g) * stride + m.pad;
    const std::size_t plane = m.tile * m.tile;
    for (std::size_t y = 0; y < m.tile; ++y) {
      for (std::size_t x = 0; x < m.tile; ++x) {
        Rgb c;
        for (std::size_t k = 0; k < 3; ++k) {
          const float v = t[(t.dim(0) == 3 ? k * plane : 0) + y * m.tile + x];
          c[k] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(static_cast<double>(v), 0.0, 1.0)));
        }
        out.set(ox + x, oy + y, c);
      }
    }
  }
  return out;
}

Histogram2D histogram_2d(const Tensor<float>& coords, std::span<const std::int32_t> labels, std::size_t classes,
                         std::size_t bins) {
  if (coords.rank() != 2 || coords.dim(1) != 2) throw DimensionError("histogram: coords must be [n, 2]");
  if (labels.size() != coords.dim(0)) throw DimensionError("histogram: label count does not match points");
  if (bins == 0 || classes == 0) throw ContractError("histogram: bins and classes must be positive");
  Histogram2D h;
  h.bins = bins;
  h.classes = classes;
  h.counts.assign(bins * bins, 0);
  h.majority.assign(bins * bins, -1);
  const auto grid = atlas::bin_to_grid(coords, bins);
  std::vector<std::uint32_t> per_class(bins * bins * classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ContractError("histogram: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) +
                          ")");
    }
    const std::size_t row = grid.cells[i] / bins, col = grid.cells[i] % bins;
    const std::size_t bin = (bins - 1 - row) * bins + col;
    ++h.counts[bin];
    ++per_class[bin * classes + labels[i]];
  }
  for (std::size_t b = 0; b < bins * bins; ++b) {
    if (!h.counts[b]) continue;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (per_class[b * classes + c] > per_class[b * classes + best]) best = c;
    }
    h.majority[b] = static_cast<std::int32_t>(best);
  }
  return h;
}

Rgb bin_color(const Histogram2D& h, std::size_t bin, const std::vector<Rgb>& colors) {
  if (h.majority[bin] < 0) return kWhite;
  const auto mx = *std::max_element(h.counts.begin(), h.counts.end());
  const double a = 0.2 + 0.8 * static_cast<double>(h.counts[bin]) / mx;
  const Rgb& c = colors[h.majority[bin]];
  Rgb out;
  for (std::size_t k = 0; k < 3; ++k) out[k] = static_cast<std::uint8_t>(std::lround(255 * (1 - a) + c[k] * a));
  return out;
}

Image render_embedding(const Tensor<float>& coords, std::span<const std::int32_t> labels, std::size_t classes,
                       std::size_t bins, EmbeddingPlotLayout* layout) {
  const auto h = histogram_2d(coords, labels, classes, bins);
  const auto colors = palette(classes);
  const std::size_t cell = std::max<std::size_t>(1, 480 / bins);
  const std::size_t margin = 10, plot = bins * cell, legend_w = 60, row_h = 12;
  const std::size_t height = std::max(plot + 2 * margin, classes * row_h + 2 * margin);
  Image out(margin + plot + margin + legend_w, height);
  for (std::size_t b = 0; b < bins * bins; ++b) {
    const long x = static_cast<long>(margin + (b % bins) * cell), y = static_cast<long>(margin + (b / bins) * cell);
    out.fill_rect(x, y, x + static_cast<long>(cell), y + static_cast<long>(cell), bin_color(h, b, colors));
  }
  const long lx = static_cast<long>(margin + plot + margin);
  for (std::size_t c = 0; c < classes; ++c) {
    const long y = static_cast<long>(margin + c * row_h);
    out.fill_rect(lx, y, lx + 8, y + 8, colors[c]);
    draw_text(out, lx + 12, y + 1, std::to_string(c), kBlack);
  }
  if (layout) *layout = {cell, static_cast<std::size_t>(lx)};
  return out;
}

long ScanPlotLayout::x_pixel(double width) const {
  const double t = (std::log10(width) - log_x_min) / (log_x_max - log_x_min);
  return left + std::lround(t * static_cast<double>(right - left));
}

long ScanPlotLayout::y_pixel(double accuracy) const {
  const double t = (accuracy - y_min) / (y_max - y_min);
  return bottom - std::lround(t * static_cast<double>(bottom - top));
}

namespace {

void hline(Image& im, long x0, long x1, long y, Rgb c, int thick = 1) { im.fill_rect(x0, y, x1 + 1, y + thick, c); }
void vline(Image& im, long x, long y0, long y1, Rgb c, int thick = 1) {
  im.fill_rect(x, std::min(y0, y1), x + thick, std::max(y0, y1) + 1, c);
}

void line(Image& im, long x0, long y0, long x1, long y1, Rgb c) {
  const long steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  for (long s = 0; s <= steps; ++s) {
    const double t = steps ? static_cast<double>(s) / steps : 0;
    im.set(std::lround(x0 + t * (x1 - x0)), std::lround(y0 + t * (y1 - y0)), c);
  }
}

std::string format_percent(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.0f%%", 100 * v);
  return buf;
}

}  // namespace

Image render_scan(std::span<const transfer::AggregateRow> table, std::optional<double> baseline,
                  ScanPlotLayout* layout_out) {
  Image out(640, 420);
  ScanPlotLayout L;
  L.left = 60;
  L.right = 610;
  L.top = 30;
  L.bottom = 380;
  double lo = 1, hi = 0, wmin = INFINITY, wmax = 0;
  for (const auto& r : table) {
    if (r.n_seeds == 0) continue;
    lo = std::min(lo, r.mean - r.std);
    hi = std::max(hi, r.mean + r.std);
    wmin = std::min(wmin, static_cast<double>(r.width));
    wmax = std::max(wmax, static_cast<double>(r.width));
  }
  if (baseline) {
    lo = std::min(lo, *baseline);
    hi = std::max(hi, *baseline);
  }
  if (lo > hi) lo = 0, hi = 1;
  L.y_min = std::max(0.0, std::floor((lo - 0.02) * 20) / 20);
  L.y_max = std::min(1.0, std::ceil((hi + 0.02) * 20) / 20);
  if (L.y_max <= L.y_min) L.y_max = L.y_min + 0.05;
  if (!(wmin <= wmax)) wmin = wmax = 1;
  const double pad = std::max(0.1, 0.08 * (std::log10(wmax) - std::log10(wmin)));
  L.log_x_min = std::log10(wmin) - (wmin == wmax ? 0.5 : pad);
  L.log_x_max = std::log10(wmax) + (wmin == wmax ? 0.5 : pad);

  // Axes, y ticks every 5 points, x ticks at each width.
  hline(out, L.left, L.right, L.bottom, kBlack);
  vline(out, L.left, L.top, L.bottom, kBlack);
  for (double y = L.y_min; y <= L.y_max + 1e-9; y += 0.05) {
    const long py = L.y_pixel(y);
    hline(out, L.left - 4, L.left, py, kBlack);
    draw_text(out, 8, py - 2, format_percent(y), kBlack, 1);
  }
  std::set<std::size_t> widths;
  for (const auto& r : table) widths.insert(r.width);
  for (std::size_t w : widths) {
    const long px = L.x_pixel(static_cast<double>(w));
    vline(out, px, L.bottom, L.bottom + 4, kBlack);
    const auto s = std::to_string(w);
    draw_text(out, px - static_cast<long>(2 * s.size()), L.bottom + 8, s, kBlack, 1);
  }
  draw_text(out, (L.left + L.right) / 2 - 10, L.bottom + 22, "width", kBlack, 1);

  if (baseline) {
    const long py = L.y_pixel(*baseline);
    for (long x = L.left + 1; x <= L.right; x += 12) hline(out, x, std::min(x + 7, L.right), py, kBaselineColor, 2);
  }

  for (const auto& [task, color] : {std::pair{"original", kOriginalColor}, std::pair{"new", kNewColor}}) {
    std::map<std::size_t, const transfer::AggregateRow*> by_width;
    for (const auto& r : table) {
      if (r.task == task && r.n_seeds > 0) by_width[r.width] = &r;
    }
    long px_prev = -1, py_prev = -1;
    for (const auto& [w, r] : by_width) {
      const long px = L.x_pixel(static_cast<double>(w)), py = L.y_pixel(r->mean);
      if (px_prev >= 0) line(out, px_prev, py_prev, px, py, color);
      px_prev = px;
      py_prev = py;
    }
    for (const auto& [w, r] : by_width) {
      const long px = L.x_pixel(static_cast<double>(w)), py = L.y_pixel(r->mean);
      const long top = L.y_pixel(r->mean + r->std), bot = L.y_pixel(r->mean - r->std);
      vline(out, px, top, bot, color);
      hline(out, px - 4, px + 4, top, color);
      hline(out, px - 4, px + 4, bot, color);
      out.fill_rect(px - 3, py - 3, px + 4, py + 4, color);
    }
  }

  // Legend.
  long ly = 8;
  for (const auto& [label, color] : {std::pair{"original task", kOriginalColor}, std::pair{"new task", kNewColor}}) {
    out.fill_rect(L.left + 10, ly, L.left + 17, ly + 7, color);
    draw_text(out, L.left + 22, ly + 1, label, kBlack, 1);
    ly += 10;
  }
  if (baseline) {
    hline(out, L.left + 150, L.left + 157, 9, kBaselineColor, 2);
    draw_text(out, L.left + 162, 9, "linear baseline", kBlack, 1);
  }
  if (layout_out) *layout_out = L;
  return out;
}

namespace {

// 3x5 glyphs, one 3-bit row per entry, most significant bit on the left.
const std::map<char, std::array<std::uint8_t, 5>>& font() {
  static const std::map<char, std::array<std::uint8_t, 5>> f{
      {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
      {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
      {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'-', {0, 0, 7, 0, 0}},
      {'%', {5, 1, 2, 4, 5}}, {':', {0, 2, 0, 2, 0}}, {'=', {0, 7, 0, 7, 0}}, {'/', {1, 1, 2, 4, 4}},
      {'(', {1, 2, 2, 2, 1}}, {')', {4, 2, 2, 2, 4}}, {'a', {2, 5, 7, 5, 5}}, {'b', {6, 5, 6, 5, 6}},
      {'c', {3, 4, 4, 4, 3}}, {'d', {6, 5, 5, 5, 6}}, {'e', {7, 4, 6, 4, 7}}, {'f', {7, 4, 6, 4, 4}},
      {'g', {3, 4, 5, 5, 3}}, {'h', {5, 5, 7, 5, 5}}, {'i', {7, 2, 2, 2, 7}}, {'j', {1, 1, 1, 5, 2}},
      {'k', {5, 5, 6, 5, 5}}, {'l', {4, 4, 4, 4, 7}}, {'m', {5, 7, 7, 5, 5}}, {'n', {6, 5, 5, 5, 5}},
      {'o', {2, 5, 5, 5, 2}}, {'p', {6, 5, 6, 4, 4}}, {'q', {2, 5, 5, 6, 3}}, {'r', {6, 5, 6, 5, 5}},
      {'s', {3, 4, 2, 1, 6}}, {'t', {7, 2, 2, 2, 2}}, {'u', {5, 5, 5, 5, 7}}, {'v', {5, 5, 5, 5, 2}},
      {'w', {5, 5, 7, 7, 5}}, {'x', {5, 5, 2, 5, 5}}, {'y', {5, 5, 2, 2, 2}}, {'z', {7, 1, 2, 4, 7}},
  };
  return f;
}

}  // namespace

void draw_text(Image& image, long x, long y, std::string_view text, Rgb color, int scale) {
  const auto& f = font();
  for (char ch : text) {
    const char lower = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (auto it = f.find(lower); it != f.end()) {
      for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < 3; ++c) {
          if (it->second[r] & (4 >> c)) image.fill_rect(x + c * scale, y + r * scale, x + (c + 1) * scale, y + (r + 1) * scale, color);
        }
      }
    }
    x += 4 * scale;
  }
}

}  // namespace atlasbench::render
