#include "atlasbench/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace atlasbench {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

Affine2d Affine2d::translation(double dx, double dy) { return Affine2d{{1, 0, dx, 0, 1, dy}}; }
Affine2d Affine2d::scaling(double s) { return Affine2d{{s, 0, 0, 0, s, 0}}; }
Affine2d Affine2d::rotation(double radians) {
  const double c = std::cos(radians), s = std::sin(radians);
  return Affine2d{{c, -s, 0, s, c, 0}};
}
Affine2d Affine2d::flip_horizontal() { return Affine2d{{-1, 0, 0, 0, 1, 0}}; }

Affine2d operator*(const Affine2d& a, const Affine2d& b) {
  const auto& x = a.m;
  const auto& y = b.m;
  return Affine2d{{x[0] * y[0] + x[1] * y[3], x[0] * y[1] + x[1] * y[4], x[0] * y[2] + x[1] * y[5] + x[2],
                   x[3] * y[0] + x[4] * y[3], x[3] * y[1] + x[4] * y[4], x[3] * y[2] + x[4] * y[5] + x[5]}};
}

bool Affine2d::is_identity() const { return m == Affine2d{}.m; }

namespace {

[[noreturn]] void dim_error(PrimitiveKind kind, const std::string& detail) {
  throw DimensionError(std::string(primitive_name(kind)) + ": " + detail);
}

void require_rank(PrimitiveKind kind, const Shape& s, std::size_t rank, const char* which) {
  if (s.size() != rank) {
    dim_error(kind, std::string(which) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_str(s));
  }
}

bool is_suffix(const Shape& whole, const Shape& part) {
  if (part.size() > whole.size()) return false;
  return std::equal(part.begin(), part.end(), whole.end() - static_cast<std::ptrdiff_t>(part.size()));
}

// One bilinear tap: 4 neighbours with weights; index -1 marks out-of-frame.
struct Tap {
  std::array<std::ptrdiff_t, 4> idx;
  std::array<double, 4> w;
};

Tap bilinear_tap(const Affine2d& map, std::size_t i, std::size_t j, std::size_t height,
                 std::size_t width) {
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const auto [xs, ys] = map.apply(static_cast<double>(j) - cx, static_cast<double>(i) - cy);
  const double x = xs + cx, y = ys + cy;
  const double x0 = std::floor(x), y0 = std::floor(y);
  const double fx = x - x0, fy = y - y0;
  Tap tap{};
  const std::array<double, 2> wx{1.0 - fx, fx}, wy{1.0 - fy, fy};
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const double yy = y0 + dy, xx = x0 + dx;
      const int k = dy * 2 + dx;
      tap.w[k] = wy[dy] * wx[dx];
      const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<double>(height) &&
                          xx < static_cast<double>(width);
      tap.idx[k] = inside ? static_cast<std::ptrdiff_t>(yy) * static_cast<std::ptrdiff_t>(width) +
                                static_cast<std::ptrdiff_t>(xx)
                          : -1;
    }
  }
  return tap;
}

std::vector<Tap> build_taps(const Affine2d& map, std::size_t height, std::size_t width) {
  std::vector<Tap> taps;
  taps.reserve(height * width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) taps.push_back(bilinear_tap(map, i, j, height, width));
  }
  return taps;
}

// im2col for one image: col [C*k*k, H_out*W_out].
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

std::vector<std::size_t> normalize_axes(PrimitiveKind kind, std::vector<std::size_t> axes,
                                        std::size_t rank) {
  if (axes.empty()) {
    axes.resize(rank);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) dim_error(kind, "repeated axis");
  for (std::size_t a : axes) {
    if (a >= rank) dim_error(kind, "axis " + std::to_string(a) + " out of range for rank " + std::to_string(rank));
  }
  return axes;
}

// Reduction over a set of axes. Returns output shape and, for each input
// element, the index of its output element.
struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;
  std::size_t group = 1;
};

ReducePlan plan_reduce(PrimitiveKind kind, const Shape& in, std::vector<std::size_t> axes_in) {
  const auto axes = normalize_axes(kind, std::move(axes_in), in.size());
  std::vector<bool> reduced(in.size(), false);
  for (std::size_t a : axes) reduced[a] = true;
  ReducePlan plan;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (reduced[d]) {
      plan.group *= in[d];
    } else {
      plan.out_shape.push_back(in[d]);
    }
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};
  const std::size_t total = shape_numel(in);
  plan.out_index.resize(total);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < in.size(); ++d) {
      if (!reduced[d]) o = o * in[d] + idx[d];
    }
    plan.out_index[flat] = o;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace

template <typename T>
void resample_affine(const T* src, T* dst, std::size_t channels, std::size_t height,
                     std::size_t width, const Affine2d& map, std::span<const T> fill_per_channel) {
  if (fill_per_channel.size() != 1 && fill_per_channel.size() != channels) {
    throw DimensionError("resample_affine: fill must have 1 or C entries");
  }
  const auto taps = build_taps(map, height, width);
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    const T fill = fill_per_channel[fill_per_channel.size() == 1 ? 0 : c];
    const T* s = src + c * plane;
    T* d = dst + c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      const Tap& tap = taps[p];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += tap.w[k] * (tap.idx[k] < 0 ? fill : s[tap.idx[k]]);
      d[p] = static_cast<T>(acc);
    }
  }
}

namespace ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (!is_suffix(sa, sb)) {
    dim_error(PrimitiveKind::kAdd, "second operand " + shape_str(sb) +
                                       " must equal or be a trailing suffix of " + shape_str(sa));
  }
  Tensor<T> out = a.value();
  const std::size_t inner = b.value().numel();
  const T* pb = b.value().data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] += pb[i % inner];
  return detail::make_result<T>(
      PrimitiveKind::kAdd, std::move(out), {a, b},
      [inner](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
        if (gi[0]) {
          T* d = gi[0]->data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
        }
        if (gi[1]) {
          T* d = gi[1]->data();
          for (std::size_t i = 0; i < g.numel(); ++i) d[i % inner] += g[i];
        }
      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const bool scalar_b = b.value().numel() == 1 && a.value().numel() != 1;
  if (!scalar_b && a.shape() != b.shape()) {
    dim_error(PrimitiveKind::kMul, "operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                       " differ (only equal shapes or a scalar second operand)");
  }
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= scalar_b ? bv[0] : bv[i];
  return detail::make_result<T>(
      PrimitiveKind::kMul, std::move(out), {a, b},
      [an = a.node_ptr(), bn = b.node_ptr(), scalar_b](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
        const Tensor<T>& av = an->value;
        const Tensor<T>& bv = bn->value;
        if (gi[0]) {
          for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i] * (scalar_b ? bv[0] : bv[i]);
        }
        if (gi[1]) {
          if (scalar_b) {
            T acc{0};
            for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * av[i];
            (*gi[1])[0] += acc;
          } else {
            for (std::size_t i = 0; i < g.numel(); ++i) (*gi[1])[i] += g[i] * av[i];
          }
        }
      });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  constexpr auto kind = PrimitiveKind::kMatmul;
  require_rank(kind, a.shape(), 2, "lhs");
  require_rank(kind, b.shape(), 2, "rhs");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    dim_error(kind, "inner axes differ: lhs axis 1 = " + std::to_string(k) + ", rhs axis 0 = " +
                        std::to_string(b.shape()[0]));
  }
  Tensor<T> out(Shape{m, n});
  ConstMapMat<T> A(a.value().data(), m, k), B(b.value().data(), k, n);
  MapMat<T>(out.data(), m, n).noalias() = A * B;
  return detail::make_result<T>(
      kind, std::move(out), {a, b},
      [an = a.node_ptr(), bn = b.node_ptr(), m, k, n](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
        const Tensor<T>& av = an->value;
        const Tensor<T>& bv = bn->value;
        ConstMapMat<T> G(g.data(), m, n);
        if (gi[0]) {
          MapMat<T>(gi[0]->data(), m, k).noalias() += G * ConstMapMat<T>(bv.data(), k, n).transpose();
        }
        if (gi[1]) {
          MapMat<T>(gi[1]->data(), k, n).noalias() += ConstMapMat<T>(av.data(), m, k).transpose() * G;
        }
      });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Padding padding) {
  constexpr auto kind = PrimitiveKind::kConv2d;
  require_rank(kind, x.shape(), 4, "input");
  require_rank(kind, w.shape(), 4, "weight");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const std::size_t o = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != c) {
    dim_error(kind, "weight axis 1 (" + std::to_string(w.shape()[1]) + ") != input channels axis 1 (" +
                        std::to_string(c) + ")");
  }
  if (w.shape()[3] != k) dim_error(kind, "weight axes 2 and 3 must be equal (square filter)");
  if (padding == Padding::kSame && k % 2 == 0) dim_error(kind, "same padding needs an odd filter size");
  if (bias.defined() && bias.shape() != Shape{o}) {
    dim_error(kind, "bias shape " + shape_str(bias.shape()) + " != [" + std::to_string(o) + "]");
  }
  const std::size_t pad = padding == Padding::kSame ? k / 2 : 0;
  if (padding == Padding::kValid && (h < k || wd < k)) dim_error(kind, "input axes 2/3 smaller than filter");
  const std::size_t ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  const std::size_t ck = c * k * k, hw = ho * wo;

  Tensor<T> out(Shape{n, o, ho, wo});
  std::vector<T> col(ck * hw);
  ConstMapMat<T> W(w.value().data(), o, ck);
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.value().data() + i * c * h * wd, c, h, wd, k, pad, ho, wo, col.data());
    MapMat<T> Y(out.data() + i * o * hw, o, hw);
    Y.noalias() = W * ConstMapMat<T>(col.data(), ck, hw);
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < o; ++oc) Y.row(oc).array() += bias.value()[oc];
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      kind, std::move(out), std::move(inputs),
      [xn = x.node_ptr(), wn = w.node_ptr(), n, c, h, wd, o, k, pad, ho, wo, ck, hw](
          const Tensor<T>& g, std::span<Tensor<T>*> gi) {
        const Tensor<T>& xv = xn->value;
        const Tensor<T>& wv = wn->value;
        std::vector<T> col(ck * hw);
        std::vector<T> dcol(gi[0] ? ck * hw : 0);
        ConstMapMat<T> W(wv.data(), o, ck);
        for (std::size_t i = 0; i < n; ++i) {
          ConstMapMat<T> G(g.data() + i * o * hw, o, hw);
          if (gi[1]) {
            im2col(xv.data() + i * c * h * wd, c, h, wd, k, pad, ho, wo, col.data());
            MapMat<T>(gi[1]->data(), o, ck).noalias() += G * ConstMapMat<T>(col.data(), ck, hw).transpose();
          }
          if (gi[0]) {
            MapMat<T>(dcol.data(), ck, hw).noalias() = W.transpose() * G;
            col2im(dcol.data(), c, h, wd, k, pad, ho, wo, gi[0]->data() + i * c * h * wd);
          }
          if (gi.size() > 2 && gi[2]) {
            for (std::size_t oc = 0; oc < o; ++oc) (*gi[2])[oc] += G.row(oc).sum();
          }
        }
      });
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x) {
  constexpr auto kind = PrimitiveKind::kMaxpool2d;
  require_rank(kind, x.shape(), 4, "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h < 2 || w < 2) dim_error(kind, "spatial axes 2/3 must be at least 2");
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  const T* xv = x.value().data();
  std::size_t q = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = xv + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox, ++q) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        out[q] = plane[best];
        argmax[q] = p * h * w + best;
      }
    }
  }
  return detail::make_result<T>(kind, std::move(out), {x},
                                [argmax = std::move(argmax)](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
                                  for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[argmax[i]] += g[i];
                                });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  return detail::make_result<T>(PrimitiveKind::kRelu, std::move(out), {x},
                                [xn = x.node_ptr()](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
                                  const Tensor<T>& xv = xn->value;
                                  for (std::size_t i = 0; i < g.numel(); ++i) {
                                    if (xv[i] > T{0}) (*gi[0])[i] += g[i];
                                  }
                                });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    dim_error(PrimitiveKind::kReshape, shape_str(x.shape()) + " -> " + shape_str(shape) +
                                           " changes element count");
  }
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return detail::make_result<T>(PrimitiveKind::kReshape, std::move(out), {x},
                                [](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
                                  for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i];
                                });
}

namespace {

template <typename T>
Var<T> reduce(PrimitiveKind kind, const Var<T>& x, std::vector<std::size_t> axes, bool average) {
  auto plan = plan_reduce(kind, x.shape(), std::move(axes));
  Tensor<T> out(plan.out_shape);
  std::vector<double> acc(out.numel(), 0.0);
  const T* xv = x.value().data();
  for (std::size_t i = 0; i < plan.out_index.size(); ++i) acc[plan.out_index[i]] += xv[i];
  const double scale = average ? 1.0 / static_cast<double>(plan.group) : 1.0;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(acc[i] * scale);
  return detail::make_result<T>(kind, std::move(out), {x},
                                [index = std::move(plan.out_index), scale](const Tensor<T>& g,
                                                                           std::span<Tensor<T>*> gi) {
                                  for (std::size_t i = 0; i < index.size(); ++i) {
                                    (*gi[0])[i] += static_cast<T>(g[index[i]] * scale);
                                  }
                                });
}

}  // namespace

template <typename T>
Var<T> sum(const Var<T>& x, std::vector<std::size_t> axes) {
  return reduce(PrimitiveKind::kSum, x, std::move(axes), false);
}

template <typename T>
Var<T> mean(const Var<T>& x, std::vector<std::size_t> axes) {
  return reduce(PrimitiveKind::kMean, x, std::move(axes), true);
}

template <typename T>
Var<T> pad2d(const Var<T>& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right,
             T value) {
  constexpr auto kind = PrimitiveKind::kPad2d;
  require_rank(kind, x.shape(), 4, "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t ho = h + top + bottom, wo = w + left + right;
  Tensor<T> out(Shape{n, c, ho, wo}, value);
  const T* xv = x.value().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(xv + (p * h + y) * w, w, out.data() + (p * ho + y + top) * wo + left);
    }
  }
  return detail::make_result<T>(kind, std::move(out), {x},
                                [n, c, h, w, ho, wo, top, left](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
                                  for (std::size_t p = 0; p < n * c; ++p) {
                                    for (std::size_t y = 0; y < h; ++y) {
                                      const T* src = g.data() + (p * ho + y + top) * wo + left;
                                      T* dst = gi[0]->data() + (p * h + y) * w;
                                      for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                                    }
                                  }
                                });
}

template <typename T>
Var<T> affine_transform_2d(const Var<T>& x, const Affine2d& map, T fill) {
  constexpr auto kind = PrimitiveKind::kAffineTransform2d;
  require_rank(kind, x.shape(), 4, "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor<T> out(x.shape());
  const std::array<T, 1> fills{fill};
  for (std::size_t i = 0; i < n; ++i) {
    resample_affine<T>(x.value().data() + i * c * h * w, out.data() + i * c * h * w, c, h, w, map, fills);
  }
  return detail::make_result<T>(kind, std::move(out), {x},
                                [map, n, c, h, w](const Tensor<T>& g, std::span<Tensor<T>*> gi) {
                                  const auto taps = build_taps(map, h, w);
                                  const std::size_t plane = h * w;
                                  for (std::size_t p = 0; p < n * c; ++p) {
                                    const T* gp = g.data() + p * plane;
                                    T* dp = gi[0]->data() + p * plane;
                                    for (std::size_t q = 0; q < plane; ++q) {
                                      for (int k = 0; k < 4; ++k) {
                                        if (taps[q].idx[k] >= 0) {
                                          dp[taps[q].idx[k]] += static_cast<T>(taps[q].w[k] * gp[q]);
                                        }
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels) {
  constexpr auto kind = PrimitiveKind::kSoftmaxCrossEntropy;
  require_rank(kind, logits.shape(), 2, "logits");
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != b) {
    dim_error(kind, "label count " + std::to_string(labels.size()) + " != logits axis 0 (" +
                        std::to_string(b) + ")");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                          std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor<T> probs(Shape{b, k});
  double total = 0.0;
  const T* lv = logits.value().data();
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = lv + i * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double log_z = std::log(z);
    for (std::size_t j = 0; j < k; ++j) {
      probs.at(i, j) = static_cast<T>(std::exp(static_cast<double>(row[j] - mx) - log_z));
    }
    total += log_z - static_cast<double>(row[labels[i]] - mx);
  }
  std::vector<std::int32_t> saved(labels.begin(), labels.end());
  return detail::make_result<T>(
      kind, Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(b))), {logits},
      [probs = std::move(probs), saved = std::move(saved), b, k](const Tensor<T>& g,
                                                                  std::span<Tensor<T>*> gi) {
        const T scale = g[0] / static_cast<T>(b);
        T* d = gi[0]->data();
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const T onehot = static_cast<std::int32_t>(j) == saved[i] ? T{1} : T{0};
            d[i * k + j] += scale * (probs.at(i, j) - onehot);
          }
        }
      });
}

}  // namespace ops

namespace {

template <typename V>
const V& attr_or(const Attrs& attrs, const std::string& key, PrimitiveKind kind) {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw ContractError(std::string(primitive_name(kind)) + ": missing attribute '" + key + "'");
  if (const V* v = std::get_if<V>(&it->second)) return *v;
  throw ContractError(std::string(primitive_name(kind)) + ": attribute '" + key + "' has the wrong type");
}

std::vector<std::size_t> to_sizes(const std::vector<std::int64_t>& v, PrimitiveKind kind) {
  std::vector<std::size_t> out;
  for (auto x : v) {
    if (x < 0) throw ContractError(std::string(primitive_name(kind)) + ": negative value in integer list");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

void require_inputs(PrimitiveKind kind, std::size_t got, std::size_t lo, std::size_t hi) {
  if (got < lo || got > hi) {
    throw ContractError(std::string(primitive_name(kind)) + ": expected " + std::to_string(lo) +
                        (hi != lo ? "-" + std::to_string(hi) : std::string()) + " inputs, got " +
                        std::to_string(got));
  }
}

}  // namespace

template <typename T>
Var<T> apply_primitive(PrimitiveKind kind, std::span<const Var<T>> in, const Attrs& attrs) {
  switch (kind) {
    case PrimitiveKind::kAdd:
      require_inputs(kind, in.size(), 2, 2);
      return ops::add(in[0], in[1]);
    case PrimitiveKind::kMul:
      require_inputs(kind, in.size(), 2, 2);
      return ops::mul(in[0], in[1]);
    case PrimitiveKind::kMatmul:
      require_inputs(kind, in.size(), 2, 2);
      return ops::matmul(in[0], in[1]);
    case PrimitiveKind::kConv2d: {
      require_inputs(kind, in.size(), 2, 3);
      if (auto it = attrs.find("stride"); it != attrs.end() && attr_or<std::int64_t>(attrs, "stride", kind) != 1) {
        throw ContractError("conv2d: only stride 1 is supported");
      }
      if (attrs.count("filter") &&
          static_cast<std::size_t>(attr_or<std::int64_t>(attrs, "filter", kind)) != in[1].shape().at(2)) {
        throw DimensionError("conv2d: filter attribute disagrees with weight axis 2");
      }
      Padding padding = Padding::kSame;
      if (attrs.count("padding")) {
        const auto& p = attr_or<std::string>(attrs, "padding", kind);
        if (p == "valid") {
          padding = Padding::kValid;
        } else if (p != "same") {
          throw ContractError("conv2d: padding must be 'same' or 'valid'");
        }
      }
      return ops::conv2d(in[0], in[1], in.size() > 2 ? in[2] : Var<T>(), padding);
    }
    case PrimitiveKind::kMaxpool2d:
      require_inputs(kind, in.size(), 1, 1);
      return ops::maxpool2d(in[0]);
    case PrimitiveKind::kRelu:
      require_inputs(kind, in.size(), 1, 1);
      return ops::relu(in[0]);
    case PrimitiveKind::kReshape:
      require_inputs(kind, in.size(), 1, 1);
      return ops::reshape(in[0], to_sizes(attr_or<std::vector<std::int64_t>>(attrs, "shape", kind), kind));
    case PrimitiveKind::kMean:
    case PrimitiveKind::kSum: {
      require_inputs(kind, in.size(), 1, 1);
      std::vector<std::size_t> axes;
      if (attrs.count("axes")) axes = to_sizes(attr_or<std::vector<std::int64_t>>(attrs, "axes", kind), kind);
      return kind == PrimitiveKind::kSum ? ops::sum(in[0], axes) : ops::mean(in[0], axes);
    }
    case PrimitiveKind::kPad2d: {
      require_inputs(kind, in.size(), 1, 1);
      const auto pads = to_sizes(attr_or<std::vector<std::int64_t>>(attrs, "pads", kind), kind);
      if (pads.size() != 4) throw ContractError("pad2d: 'pads' needs 4 entries");
      const double value = attrs.count("value") ? attr_or<double>(attrs, "value", kind) : 0.0;
      return ops::pad2d(in[0], pads[0], pads[1], pads[2], pads[3], static_cast<T>(value));
    }
    case PrimitiveKind::kAffineTransform2d: {
      require_inputs(kind, in.size(), 1, 1);
      const auto& mv = attr_or<std::vector<double>>(attrs, "matrix", kind);
      if (mv.size() != 6) throw ContractError("affine-transform-2d: 'matrix' needs 6 entries");
      Affine2d map;
      std::copy(mv.begin(), mv.end(), map.m.begin());
      const double fill = attrs.count("fill") ? attr_or<double>(attrs, "fill", kind) : 0.0;
      return ops::affine_transform_2d(in[0], map, static_cast<T>(fill));
    }
    case PrimitiveKind::kLeaf:
    case PrimitiveKind::kSoftmaxCrossEntropy:
      break;
  }
  throw ContractError(std::string("apply_primitive: '") + primitive_name(kind) +
                      "' is not dispatchable (use its dedicated function)");
}

#define ATLASBENCH_INSTANTIATE_OPS(T)                                                               \
  template void resample_affine<T>(const T*, T*, std::size_t, std::size_t, std::size_t,             \
                                   const Affine2d&, std::span<const T>);                            \
  template Var<T> ops::add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> ops::mul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> ops::matmul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> ops::conv2d(const Var<T>&, const Var<T>&, const Var<T>&, Padding);                \
  template Var<T> ops::maxpool2d(const Var<T>&);                                                    \
  template Var<T> ops::relu(const Var<T>&);                                                         \
  template Var<T> ops::reshape(const Var<T>&, Shape);                                               \
  template Var<T> ops::sum(const Var<T>&, std::vector<std::size_t>);                                \
  template Var<T> ops::mean(const Var<T>&, std::vector<std::size_t>);                               \
  template Var<T> ops::pad2d(const Var<T>&, std::size_t, std::size_t, std::size_t, std::size_t, T); \
  template Var<T> ops::affine_transform_2d(const Var<T>&, const Affine2d&, T);                      \
  template Var<T> ops::softmax_cross_entropy(const Var<T>&, std::span<const std::int32_t>);         \
  template Var<T> apply_primitive(PrimitiveKind, std::span<const Var<T>>, const Attrs&);

ATLASBENCH_INSTANTIATE_OPS(float)
ATLASBENCH_INSTANTIATE_OPS(double)

}  // namespace atlasbench
