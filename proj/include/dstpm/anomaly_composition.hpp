#pragma once

#include <torch/torch.h>

#include <array>
#include <cmath>
#include <vector>

#include "dstpm/config.hpp"
#include "dstpm/distillation_loss.hpp"
#include "dstpm/error.hpp"

namespace dstpm {

/// Non-negative score field, B x h x w.
struct AnomalyMap {
  static constexpr std::int64_t kFull = 0;
  static constexpr int kComposite = 0;

  torch::Tensor values;
  std::int64_t stride = kFull;  // kFull: input resolution
  int site = kComposite;        // 1..7, or kComposite

  std::int64_t height() const { return values.size(-2); }
  std::int64_t width() const { return values.size(-1); }
};

/// Same arithmetic as the training pixel loss, on detached features.
inline AnomalyMap site_anomaly_map(const torch::Tensor& teacher, const torch::Tensor& student,
                                   std::int64_t stride, int site) {
  if (teacher.sizes() != student.sizes())
    throw Error(ErrorKind::kShape, "site " + std::to_string(site) + ": teacher/student shape mismatch");
  auto field = pixel_loss(normalize_features(teacher.detach()), normalize_features(student.detach()));
  return AnomalyMap{field, stride, site};
}

/// Bilinear (half-pixel centres) resize of a B x h x w or h x w field.
inline torch::Tensor bilinear_resize(const torch::Tensor& field, std::int64_t height, std::int64_t width) {
  namespace F = torch::nn::functional;
  const bool unbatched = field.dim() == 2;
  auto x = unbatched ? field.unsqueeze(0).unsqueeze(0) : field.unsqueeze(1);
  auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  return unbatched ? y.squeeze(0).squeeze(0) : y.squeeze(1);
}

inline AnomalyMap upsample_map(const AnomalyMap& map, std::int64_t target) {
  if (target < map.height() || target < map.width())
    throw Error(ErrorKind::kParameter, "upsample target smaller than map");
  if (map.height() == target && map.width() == target) return AnomalyMap{map.values, AnomalyMap::kFull, map.site};
  return AnomalyMap{bilinear_resize(map.values, target, target), AnomalyMap::kFull, map.site};
}

/// Same-resolution pair sums (site1+site6, site2+site5, site3+site4), i.e.
/// strides 4, 8, 16. `maps` holds sites 1..6 in order.
inline std::array<AnomalyMap, 3> pair_sums(const std::array<AnomalyMap, 6>& maps) {
  static constexpr std::array<std::pair<int, int>, 3> kPairs{{{0, 5}, {1, 4}, {2, 3}}};
  std::array<AnomalyMap, 3> out;
  for (std::size_t p = 0; p < 3; ++p) {
    const auto& a = maps[static_cast<std::size_t>(kPairs[p].first)];
    const auto& b = maps[static_cast<std::size_t>(kPairs[p].second)];
    if (a.values.sizes() != b.values.sizes())
      throw Error(ErrorKind::kPairing, "sites " + std::to_string(kPairs[p].first + 1) + " and " +
                                           std::to_string(kPairs[p].second + 1) + " differ in resolution");
    out[p] = AnomalyMap{a.values + b.values, a.stride, AnomalyMap::kComposite};
  }
  return out;
}

/// (site1+site6) * (site2+site5) * (site3+site4), each pair sum upsampled to
/// target x target before the product.
inline AnomalyMap compose_stpm(const std::array<AnomalyMap, 6>& maps, std::int64_t target) {
  const auto sums = pair_sums(maps);
  torch::Tensor product;
  for (const auto& s : sums) {
    auto up = upsample_map(s, target).values;
    product = product.defined() ? product * up : up;
  }
  return AnomalyMap{product, AnomalyMap::kFull, AnomalyMap::kComposite};
}

inline void check_probability_map(const torch::Tensor& p) {
  if (p.numel() == 0) throw Error(ErrorKind::kRange, "empty discriminator map");
  const auto lo = p.min().item<double>();
  const auto hi = p.max().item<double>();
  if (!(lo >= 0.0 && hi <= 1.0)) throw Error(ErrorKind::kRange, "discriminator map outside [0,1]");
}

inline AnomalyMap compose_final(const std::array<AnomalyMap, 6>& maps, const AnomalyMap& disc) {
  check_probability_map(disc.values);
  const auto stpm = compose_stpm(maps, disc.height());
  if (stpm.values.sizes() != disc.values.sizes())
    throw Error(ErrorKind::kShape, "discriminator map does not match composite resolution");
  return AnomalyMap{stpm.values * disc.values, AnomalyMap::kFull, AnomalyMap::kComposite};
}

/// Separable Gaussian blur with reflect padding; sigma <= 0 returns the input.
inline torch::Tensor gaussian_smooth(const torch::Tensor& field, double sigma) {
  if (sigma <= 0) return field;
  namespace F = torch::nn::functional;
  const auto radius = static_cast<std::int64_t>(std::ceil(4.0 * sigma));
  auto taps = torch::arange(-radius, radius + 1, field.options()).to(torch::kFloat64);
  auto kernel = torch::exp(-(taps * taps) / (2.0 * sigma * sigma));
  kernel = (kernel / kernel.sum()).to(field.scalar_type());
  const bool unbatched = field.dim() == 2;
  auto x = unbatched ? field.unsqueeze(0).unsqueeze(0) : field.unsqueeze(1);
  const auto pad = std::min<std::int64_t>(radius, std::min(x.size(2), x.size(3)) - 1);
  if (pad < radius) return field;
  x = F::pad(x, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReflect));
  x = F::conv2d(x, kernel.view({1, 1, 1, -1}));
  x = F::conv2d(x, kernel.view({1, 1, -1, 1}));
  return unbatched ? x.squeeze(0).squeeze(0) : x.squeeze(1);
}

/// Image-level score per map in the batch: max over pixels, or the mean of
/// the top-k pixels.
inline torch::Tensor image_score(const AnomalyMap& map, ImageReduction reduction = ImageReduction::kMax,
                                 std::int64_t k = 100) {
  if (map.values.numel() == 0) throw Error(ErrorKind::kShape, "empty anomaly map");
  const bool unbatched = map.values.dim() == 2;
  auto flat = unbatched ? map.values.reshape({1, -1}) : map.values.reshape({map.values.size(0), -1});
  torch::Tensor scores;
  if (reduction == ImageReduction::kMax) {
    scores = std::get<0>(flat.max(1));
  } else {
    const auto kk = std::min<std::int64_t>(k, flat.size(1));
    scores = std::get<0>(flat.topk(kk, 1)).mean(1);
  }
  return unbatched ? scores.squeeze(0) : scores;
}

}  // namespace dstpm
