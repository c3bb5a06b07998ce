#pragma once

#include <torch/torch.h>

#include <array>
#include <utility>
#include <vector>

#include "dstpm/error.hpp"

namespace dstpm {

inline constexpr double kNormEpsilon = 1e-8;

/// Scales every channel vector to unit Euclidean length. The epsilon sits
/// under the square root so zero vectors map to zero with a finite gradient.
/// Channels are dimension `dim() - 3` (works for C x h x w and B x C x h x w).
inline torch::Tensor normalize_features(const torch::Tensor& features) {
  if (features.dim() < 3 || features.size(features.dim() - 3) < 1)
    throw Error(ErrorKind::kShape, "features need a channel dimension");
  const auto channel_dim = features.dim() - 3;
  auto norm = torch::sqrt(features.pow(2).sum(channel_dim, /*keepdim=*/true) + kNormEpsilon);
  return features / norm;
}

/// Half squared distance between normalized channel vectors at every location.
inline torch::Tensor pixel_loss(const torch::Tensor& teacher_hat, const torch::Tensor& student_hat) {
  if (teacher_hat.sizes() != student_hat.sizes())
    throw Error(ErrorKind::kShape, "teacher and student features differ in shape");
  const auto channel_dim = teacher_hat.dim() - 3;
  return 0.5 * (teacher_hat - student_hat).pow(2).sum(channel_dim);
}

/// Mean over the trailing h x w locations (one value per leading index).
inline torch::Tensor map_loss(const torch::Tensor& field) {
  if (field.numel() == 0) throw Error(ErrorKind::kShape, "empty loss field");
  return field.mean({field.dim() - 2, field.dim() - 1});
}

/// Loss at each of the six distillation sites, averaged over the batch.
struct LossBreakdown {
  std::array<torch::Tensor, 6> per_site;
  torch::Tensor total;

  std::array<double, 6> site_values() const {
    std::array<double, 6> out{};
    for (std::size_t i = 0; i < 6; ++i) out[i] = per_site[i].item<double>();
    return out;
  }
};

using FeaturePair = std::pair<torch::Tensor, torch::Tensor>;  // (teacher, student)

/// Sites 1-3 are (teacher1, student1) at strides 4, 8, 16; sites 4-6 are
/// (teacher2, student2) at strides 16, 8, 4. Per-image totals are summed over
/// sites, then averaged over the batch.
inline LossBreakdown total_loss(const std::vector<FeaturePair>& pairs) {
  if (pairs.size() != 6) throw Error(ErrorKind::kArity, "total_loss needs six feature pairs");
  LossBreakdown out;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& [teacher, student] = pairs[i];
    auto per_image = map_loss(pixel_loss(normalize_features(teacher.detach()), normalize_features(student)));
    out.per_site[i] = per_image.mean();
    out.total = i == 0 ? out.per_site[i] : out.total + out.per_site[i];
  }
  return out;
}

}  // namespace dstpm
