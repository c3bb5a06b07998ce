#pragma once

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dstpm/error.hpp"

namespace dstpm {

/// Row-major 2-D field.
template <typename T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), data(h * w, fill) {}
  Grid(std::size_t h, std::size_t w, std::vector<T> values) : height(h), width(w), data(std::move(values)) {
    if (data.size() != h * w) throw Error(ErrorKind::kShape, "grid data does not match its dimensions");
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * width + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * width + c]; }
  std::size_t size() const { return data.size(); }
};

using ScoreGrid = Grid<float>;
using MaskGrid = Grid<std::uint8_t>;

/// Mann-Whitney U / (positives x negatives); tied pairs count one half.
template <std::floating_point S>
double roc_auc(std::span<const S> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::kShape, "scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double negatives_below = 0;
  double u = 0;
  double positives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos : neg) += 1;
      ++j;
    }
    u += pos * (negatives_below + 0.5 * neg);
    negatives_below += neg;
    positives += pos;
    i = j;
  }
  if (positives == 0 || negatives_below == 0)
    throw Error(ErrorKind::kDegenerateLabels, "both classes must be present");
  return u / (positives * negatives_below);
}

template <std::floating_point S>
double roc_auc(const std::vector<S>& scores, const std::vector<std::uint8_t>& labels) {
  return roc_auc(std::span<const S>(scores), std::span<const std::uint8_t>(labels));
}

namespace detail {

inline void check_aligned(const std::vector<ScoreGrid>& maps, const std::vector<MaskGrid>& masks) {
  if (maps.size() != masks.size()) throw Error(ErrorKind::kShape, "map and mask counts differ");
  for (std::size_t i = 0; i < maps.size(); ++i)
    if (maps[i].height != masks[i].height || maps[i].width != masks[i].width)
      throw Error(ErrorKind::kShape, "map " + std::to_string(i) + " does not match its mask");
}

}  // namespace detail

/// AUROC over the concatenation of every pixel of every image.
inline double pixel_auroc(const std::vector<ScoreGrid>& maps, const std::vector<MaskGrid>& masks) {
  detail::check_aligned(maps, masks);
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    scores.insert(scores.end(), maps[i].data.begin(), maps[i].data.end());
    for (auto v : masks[i].data) labels.push_back(v ? 1 : 0);
  }
  return roc_auc(std::span<const float>(scores), std::span<const std::uint8_t>(labels));
}

struct Labeling {
  Grid<std::int32_t> labels;  // 0 background, 1..count regions
  std::int32_t count = 0;
};

/// 8-connected labeling; labels follow the raster order of each region's
/// first pixel.
inline Labeling connected_components(const MaskGrid& mask) {
  Labeling out;
  out.labels = Grid<std::int32_t>(mask.height, mask.width, 0);
  std::deque<std::pair<std::size_t, std::size_t>> queue;
  for (std::size_t r = 0; r < mask.height; ++r) {
    for (std::size_t c = 0; c < mask.width; ++c) {
      if (!mask(r, c) || out.labels(r, c)) continue;
      const std::int32_t label = ++out.count;
      out.labels(r, c) = label;
      queue.emplace_back(r, c);
      while (!queue.empty()) {
        const auto [y, x] = queue.front();
        queue.pop_front();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const auto ny = static_cast<std::ptrdiff_t>(y) + dy;
            const auto nx = static_cast<std::ptrdiff_t>(x) + dx;
            if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(mask.height) ||
                nx >= static_cast<std::ptrdiff_t>(mask.width))
              continue;
            const auto uy = static_cast<std::size_t>(ny), ux = static_cast<std::size_t>(nx);
            if (mask(uy, ux) && !out.labels(uy, ux)) {
              out.labels(uy, ux) = label;
              queue.emplace_back(uy, ux);
            }
          }
        }
      }
    }
  }
  return out;
}

struct ProPoint {
  double threshold = 0;
  double fpr = 0;
  double overlap = 0;  // mean per-region overlap
};

struct ProResult {
  double score = 0;
  std::vector<ProPoint> curve;  // threshold descending, starts at (fpr 0, overlap 0)
};

/// Area under the (false-positive rate, mean region overlap) curve up to
/// `fpr_limit`, trapezoidal, divided by `fpr_limit`. Every distinct score is
/// a threshold (pixels with score >= threshold are detections); the sweep
/// updates region coverage incrementally so the cost stays O(N log N).
inline ProResult pro_curve(const std::vector<ScoreGrid>& maps, const std::vector<MaskGrid>& masks,
                           double fpr_limit = 0.3) {
  detail::check_aligned(maps, masks);
  if (!(fpr_limit > 0 && fpr_limit <= 1)) throw Error(ErrorKind::kParameter, "fpr_limit must lie in (0, 1]");

  struct Pixel {
    float score;
    std::int32_t region;  // -1 normal
  };
  std::vector<Pixel> pixels;
  std::vector<double> region_sizes;
  double normal_count = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto labeling = connected_components(masks[i]);
    const auto offset = static_cast<std::int32_t>(region_sizes.size());
    region_sizes.resize(region_sizes.size() + static_cast<std::size_t>(labeling.count), 0.0);
    for (std::size_t p = 0; p < maps[i].size(); ++p) {
      const auto label = labeling.labels.data[p];
      if (label == 0) {
        pixels.push_back({maps[i].data[p], -1});
        normal_count += 1;
      } else {
        pixels.push_back({maps[i].data[p], offset + label - 1});
        region_sizes[static_cast<std::size_t>(offset + label - 1)] += 1;
      }
    }
  }
  if (region_sizes.empty()) throw Error(ErrorKind::kDegenerateGroundTruth, "no anomalous region in the masks");
  if (normal_count == 0) throw Error(ErrorKind::kDegenerateGroundTruth, "no normal pixels in the masks");

  std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });
  const double regions = static_cast<double>(region_sizes.size());
  ProResult result;
  result.curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  double false_positives = 0;
  double overlap_sum = 0;
  for (std::size_t i = 0; i < pixels.size();) {
    const float threshold = pixels[i].score;
    for (; i < pixels.size() && pixels[i].score == threshold; ++i) {
      if (pixels[i].region < 0) false_positives += 1;
      else overlap_sum += 1.0 / region_sizes[static_cast<std::size_t>(pixels[i].region)];
    }
    result.curve.push_back({threshold, false_positives / normal_count, overlap_sum / regions});
  }

  double area = 0;
  for (std::size_t k = 1; k < result.curve.size(); ++k) {
    const auto& a = result.curve[k - 1];
    const auto& b = result.curve[k];
    if (a.fpr >= fpr_limit) break;
    if (b.fpr > fpr_limit) {
      const double y = a.overlap + (b.overlap - a.overlap) * (fpr_limit - a.fpr) / (b.fpr - a.fpr);
      area += (fpr_limit - a.fpr) * (a.overlap + y) / 2.0;
      break;
    }
    area += (b.fpr - a.fpr) * (a.overlap + b.overlap) / 2.0;
  }
  result.score = area / fpr_limit;
  return result;
}

inline double pro_score(const std::vector<ScoreGrid>& maps, const std::vector<MaskGrid>& masks,
                        double fpr_limit = 0.3) {
  return pro_curve(maps, masks, fpr_limit).score;
}

}  // namespace dstpm
