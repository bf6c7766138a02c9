#pragma once

// Randomised gradient-check instances, one generator per primitive variant.

#include <string>
#include <vector>

#include "support/gradcheck.hpp"

namespace atlasbench::testing {

struct PrimitiveCase {
  std::string name;
  ScalarFn fn;
  std::vector<Tensor<double>> inputs;
};

using CaseMaker = std::function<PrimitiveCase(std::uint64_t seed)>;

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

/// Values spaced at least 0.05 apart, shuffled: no near-ties for max pooling.
inline Tensor<double> distinct_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.05 * static_cast<double>(i) - 1.0;
  rng.shuffle(t.storage().begin(), t.storage().end());
  return t;
}

inline std::vector<std::pair<std::string, CaseMaker>> primitive_case_makers() {
  using V = Var<double>;
  std::vector<std::pair<std::string, CaseMaker>> makers;

  makers.emplace_back("add", [](std::uint64_t seed) {
    Rng rng(seed);
    Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
    return PrimitiveCase{"add", [seed](const std::vector<V>& in) { return project(ops::add(in[0], in[1]), seed); },
                         {random_tensor(rng, s), random_tensor(rng, s)}};
  });
  makers.emplace_back("add-broadcast", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = pick(rng, 1, 4), n = pick(rng, 1, 6);
    return PrimitiveCase{"add-broadcast",
                         [seed](const std::vector<V>& in) { return project(ops::add(in[0], in[1]), seed); },
                         {random_tensor(rng, {b, n}), random_tensor(rng, {n})}};
  });
  makers.emplace_back("mul", [](std::uint64_t seed) {
    Rng rng(seed);
    Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
    return PrimitiveCase{"mul", [seed](const std::vector<V>& in) { return project(ops::mul(in[0], in[1]), seed); },
                         {random_tensor(rng, s), random_tensor(rng, s)}};
  });
  makers.emplace_back("mul-scalar", [](std::uint64_t seed) {
    Rng rng(seed);
    Shape s{pick(rng, 2, 4), pick(rng, 1, 5)};
    return PrimitiveCase{"mul-scalar",
                         [seed](const std::vector<V>& in) { return project(ops::mul(in[0], in[1]), seed); },
                         {random_tensor(rng, s), random_tensor(rng, {1})}};
  });
  makers.emplace_back("matmul", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
    return PrimitiveCase{"matmul",
                         [seed](const std::vector<V>& in) { return project(ops::matmul(in[0], in[1]), seed); },
                         {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}};
  });
  makers.emplace_back("conv2d-same", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), o = pick(rng, 1, 3);
    const std::size_t h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    return PrimitiveCase{"conv2d-same",
                         [seed](const std::vector<V>& in) {
                           return project(ops::conv2d(in[0], in[1], in[2], Padding::kSame), seed);
                         },
                         {random_tensor(rng, {n, c, h, w}), random_tensor(rng, {o, c, 3, 3}),
                          random_tensor(rng, {o})}};
  });
  makers.emplace_back("conv2d-valid", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t c = pick(rng, 1, 2), o = pick(rng, 1, 3);
    return PrimitiveCase{"conv2d-valid",
                         [seed](const std::vector<V>& in) {
                           return project(ops::conv2d(in[0], in[1], V(), Padding::kValid), seed);
                         },
                         {random_tensor(rng, {1, c, 5, 4}), random_tensor(rng, {o, c, 3, 3})}};
  });
  makers.emplace_back("maxpool2d", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 2), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    return PrimitiveCase{"maxpool2d",
                         [seed](const std::vector<V>& in) { return project(ops::maxpool2d(in[0]), seed); },
                         {distinct_tensor(rng, {n, c, h, w})}};
  });
  makers.emplace_back("relu", [](std::uint64_t seed) {
    Rng rng(seed);
    return PrimitiveCase{"relu", [seed](const std::vector<V>& in) { return project(ops::relu(in[0]), seed); },
                         {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 6)}, -1.0, 1.0, 1e-2)}};
  });
  makers.emplace_back("reshape", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    return PrimitiveCase{"reshape",
                         [seed, a, b](const std::vector<V>& in) { return project(ops::reshape(in[0], {b, a}), seed); },
                         {random_tensor(rng, {a, b})}};
  });
  makers.emplace_back("mean", [](std::uint64_t seed) {
    Rng rng(seed);
    return PrimitiveCase{"mean", [](const std::vector<V>& in) { return ops::mean(in[0]); },
                         {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)})}};
  });
  makers.emplace_back("mean-axes", [](std::uint64_t seed) {
    Rng rng(seed);
    return PrimitiveCase{"mean-axes",
                         [seed](const std::vector<V>& in) { return project(ops::mean(in[0], {2, 3}), seed); },
                         {random_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)})}};
  });
  makers.emplace_back("sum-axis", [](std::uint64_t seed) {
    Rng rng(seed);
    return PrimitiveCase{"sum-axis",
                         [seed](const std::vector<V>& in) { return project(ops::sum(in[0], {0}), seed); },
                         {random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)})}};
  });
  makers.emplace_back("pad2d", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t t = pick(rng, 0, 2), b = pick(rng, 0, 2), l = pick(rng, 0, 2), r = pick(rng, 0, 2);
    return PrimitiveCase{"pad2d",
                         [seed, t, b, l, r](const std::vector<V>& in) {
                           return project(ops::pad2d(in[0], t, b, l, r, 0.5), seed);
                         },
                         {random_tensor(rng, {1, pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4)})}};
  });
  makers.emplace_back("affine-transform-2d", [](std::uint64_t seed) {
    Rng rng(seed);
    const Affine2d map = Affine2d::translation(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)) *
                         Affine2d::rotation(rng.uniform(-0.6, 0.6)) * Affine2d::scaling(rng.uniform(0.8, 1.2));
    const double fill = rng.uniform(0.0, 1.0);
    return PrimitiveCase{"affine-transform-2d",
                         [seed, map, fill](const std::vector<V>& in) {
                           return project(ops::affine_transform_2d(in[0], map, fill), seed);
                         },
                         {random_tensor(rng, {1, pick(rng, 1, 2), pick(rng, 3, 6), pick(rng, 3, 6)})}};
  });
  makers.emplace_back("softmax-cross-entropy", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = pick(rng, 1, 4), k = pick(rng, 2, 6);
    std::vector<std::int32_t> labels(b);
    for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(k));
    return PrimitiveCase{"softmax-cross-entropy",
                         [labels](const std::vector<V>& in) { return ops::softmax_cross_entropy(in[0], labels); },
                         {random_tensor(rng, {b, k}, -3.0, 3.0)}};
  });
  return makers;
}

}  // namespace atlasbench::testing
