#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "atlasbench/autograd.hpp"

namespace atlasbench {

enum class Padding { kSame, kValid };

/// 2x3 affine map from centered output pixel coordinates (u, v) to centered
/// input coordinates: [x_in, y_in] = A * [u, v] + t. Row 0 is x, row 1 is y.
struct Affine2d {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  static Affine2d identity() { return {}; }
  static Affine2d translation(double dx, double dy);
  static Affine2d scaling(double s);
  static Affine2d rotation(double radians);
  static Affine2d flip_horizontal();

  /// Composition: (a * b)(p) = a(b(p)).
  friend Affine2d operator*(const Affine2d& a, const Affine2d& b);
  /// Maps a point.
  std::array<double, 2> apply(double u, double v) const {
    return {m[0] * u + m[1] * v + m[2], m[3] * u + m[4] * v + m[5]};
  }
  bool is_identity() const;
};

namespace ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x [N,C,H,W], w [O,C,k,k], bias [O] (may be undefined). Stride 1.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Padding padding = Padding::kSame);
/// Pool 2, stride 2, no padding; ties go to the first row-major index.
template <typename T>
Var<T> maxpool2d(const Var<T>& x);
template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
/// Sum over `axes` (all axes when empty; result shape [1]).
template <typename T>
Var<T> sum(const Var<T>& x, std::vector<std::size_t> axes = {});
template <typename T>
Var<T> mean(const Var<T>& x, std::vector<std::size_t> axes = {});
/// Constant padding of the two trailing axes of an [N,C,H,W] tensor.
template <typename T>
Var<T> pad2d(const Var<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
             std::size_t right, T value);
/// Bilinear resample of each [H,W] plane through `map`; samples outside the
/// frame read `fill`. Output has the input's shape.
template <typename T>
Var<T> affine_transform_2d(const Var<T>& x, const Affine2d& map, T fill);
/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels);

}  // namespace ops

/// Attribute values for the generic dispatcher.
using AttrValue = std::variant<std::int64_t, double, std::string, std::vector<std::int64_t>,
                               std::vector<double>>;
using Attrs = std::map<std::string, AttrValue>;

/// Generic entry point: dispatches by kind. Attributes:
///   conv2d: "filter" (int, must match the weight), "stride" (int, must be 1),
///           "padding" ("same" | "valid"); optional third input is the bias.
///   reshape: "shape" (int list). mean/sum: "axes" (int list, optional).
///   pad2d: "pads" (top,bottom,left,right), "value" (double).
///   affine-transform-2d: "matrix" (6 doubles), "fill" (double).
template <typename T>
Var<T> apply_primitive(PrimitiveKind kind, std::span<const Var<T>> inputs, const Attrs& attrs = {});

/// Non-differentiable bilinear resampler used by augmentation and the
/// differentiable primitive alike. `src` and `dst` are [C,H,W] planes.
template <typename T>
void resample_affine(const T* src, T* dst, std::size_t channels, std::size_t height,
                     std::size_t width, const Affine2d& map, std::span<const T> fill_per_channel);

}  // namespace atlasbench
