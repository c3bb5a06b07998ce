#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <vector>

#include "dstpm/config.hpp"
#include "dstpm/data_ingest.hpp"
#include "dstpm/error.hpp"

namespace dstpm {

/// 2-D gradient noise on a `period_y` x `period_x` lattice, scaled to [-1, 1].
inline torch::Tensor perlin_field(std::int64_t height, std::int64_t width, std::int64_t period_y,
                                  std::int64_t period_x, std::uint64_t seed) {
  if (height <= 0 || width <= 0) throw Error(ErrorKind::kDimension, "perlin field needs positive dimensions");
  if (period_y <= 0 || period_x <= 0) throw Error(ErrorKind::kDimension, "perlin periods must be positive");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  const auto lattice_w = period_x + 1;
  std::vector<double> gx(static_cast<std::size_t>((period_y + 1) * lattice_w));
  std::vector<double> gy(gx.size());
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const double a = angle(rng);
    gx[i] = std::cos(a);
    gy[i] = std::sin(a);
  }
  auto fade = [](double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); };
  auto dot = [&](std::int64_t cy, std::int64_t cx, double dy, double dx) {
    const auto i = static_cast<std::size_t>(cy * lattice_w + cx);
    return gx[i] * dx + gy[i] * dy;
  };

  auto field = torch::empty({height, width}, torch::kFloat32);
  auto acc = field.accessor<float, 2>();
  for (std::int64_t y = 0; y < height; ++y) {
    const double py = static_cast<double>(y) * static_cast<double>(period_y) / static_cast<double>(height);
    const auto cy = static_cast<std::int64_t>(std::floor(py));
    const double fy = py - static_cast<double>(cy);
    const double uy = fade(fy);
    for (std::int64_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x) * static_cast<double>(period_x) / static_cast<double>(width);
      const auto cx = static_cast<std::int64_t>(std::floor(px));
      const double fx = px - static_cast<double>(cx);
      const double ux = fade(fx);
      const double n00 = dot(cy, cx, fy, fx);
      const double n01 = dot(cy, cx + 1, fy, fx - 1.0);
      const double n10 = dot(cy + 1, cx, fy - 1.0, fx);
      const double n11 = dot(cy + 1, cx + 1, fy - 1.0, fx - 1.0);
      const double top = n00 + ux * (n01 - n00);
      const double bottom = n10 + ux * (n11 - n10);
      const double v = std::numbers::sqrt2 * (top + uy * (bottom - top));
      acc[y][x] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return field;
}

/// 1 where |field| > threshold. Returns uint8.
inline torch::Tensor generate_mask(const torch::Tensor& field, double threshold) {
  return (field.abs() > threshold).to(torch::kUInt8);
}

inline double anomalous_fraction(const torch::Tensor& mask) {
  return mask.to(torch::kFloat64).mean().item<double>();
}

struct MaskParams {
  std::vector<std::int64_t> periods{2, 4, 8, 16};
  double threshold = 0.5;
  std::int64_t retries = 32;
  double threshold_step = 0.05;
};

struct DrawnMask {
  torch::Tensor mask;
  std::int64_t period_y = 0;
  std::int64_t period_x = 0;
  double threshold = 0;
};

/// Samples Perlin masks until one covers a fraction in (0, 0.5). Empty masks
/// trigger a fresh field; masks that cover half the image or more raise the
/// threshold on the same field.
inline DrawnMask draw_anomaly_mask(std::int64_t height, std::int64_t width, std::mt19937_64& rng,
                                   const MaskParams& params) {
  if (params.periods.empty()) throw Error(ErrorKind::kParameter, "no perlin periods");
  std::uniform_int_distribution<std::size_t> pick(0, params.periods.size() - 1);
  for (std::int64_t attempt = 0; attempt < params.retries; ++attempt) {
    DrawnMask out;
    out.period_y = params.periods[pick(rng)];
    out.period_x = params.periods[pick(rng)];
    const auto field = perlin_field(height, width, out.period_y, out.period_x, rng());
    out.threshold = params.threshold;
    out.mask = generate_mask(field, out.threshold);
    double fraction = anomalous_fraction(out.mask);
    while (fraction >= 0.5 && out.threshold + params.threshold_step < 1.0) {
      out.threshold += params.threshold_step;
      out.mask = generate_mask(field, out.threshold);
      fraction = anomalous_fraction(out.mask);
    }
    if (fraction > 0.0 && fraction < 0.5) return out;
  }
  throw Error(ErrorKind::kDegenerateMask,
              "no usable mask after " + std::to_string(params.retries) + " attempts");
}

struct PseudoAnomalySample {
  torch::Tensor image;  // 3 x H x W in [0,1]
  torch::Tensor mask;   // H x W uint8 in {0,1}
  double beta = 0.0;
  std::int64_t period_y = 0;
  std::int64_t period_x = 0;
  double threshold = 0.0;
  std::uint64_t seed = 0;
  bool anomalous = false;
};

/// Inside the mask: beta * texture + (1 - beta) * source. Outside: the source,
/// bit for bit.
inline PseudoAnomalySample blend(const torch::Tensor& source, const torch::Tensor& texture,
                                 const torch::Tensor& mask, double beta) {
  if (!(beta >= 0.1 && beta <= 1.0)) throw Error(ErrorKind::kParameter, "beta must lie in [0.1, 1]");
  if (source.sizes() != texture.sizes() || source.dim() != 3 || mask.dim() != 2 ||
      mask.size(0) != source.size(1) || mask.size(1) != source.size(2))
    throw Error(ErrorKind::kShape, "source, texture and mask must share spatial size");
  auto inside = mask.to(torch::kBool).unsqueeze(0).expand_as(source);
  auto mixed = beta * texture + (1.0 - beta) * source;
  PseudoAnomalySample sample;
  sample.image = torch::where(inside, mixed, source);
  sample.mask = mask.to(torch::kUInt8);
  sample.beta = beta;
  sample.anomalous = mask.any().item<bool>();
  return sample;
}

enum class Augmentation { kColorJitter, kPosterize, kSharpness, kSolarize, kEqualize, kRotation };

inline std::vector<Augmentation> all_augmentations() {
  return {Augmentation::kColorJitter, Augmentation::kPosterize, Augmentation::kSharpness,
          Augmentation::kSolarize, Augmentation::kEqualize, Augmentation::kRotation};
}

struct TextureOptions {
  std::vector<Augmentation> pool = all_augmentations();
  std::size_t picks = 3;
};

namespace augment {

inline torch::Tensor grayscale(const torch::Tensor& rgb) {
  return (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]).unsqueeze(0);
}

inline torch::Tensor color_jitter(const torch::Tensor& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> factor(0.6, 1.4);
  auto out = (x * factor(rng)).clamp(0, 1);
  const double contrast = factor(rng);
  out = ((out - grayscale(out).mean()) * contrast + grayscale(out).mean()).clamp(0, 1);
  const double saturation = factor(rng);
  auto gray = grayscale(out);
  return ((out - gray) * saturation + gray).clamp(0, 1);
}

inline torch::Tensor posterize(const torch::Tensor& x, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> bits(2, 5);
  const int shift = 8 - bits(rng);
  auto q = (x * 255.0).round().to(torch::kInt32);
  q = torch::bitwise_left_shift(torch::bitwise_right_shift(q, shift), shift);
  return q.to(x.scalar_type()) / 255.0;
}

/// PIL-style sharpness: blend with a 3x3 smoothing kernel, borders untouched.
inline torch::Tensor sharpness(const torch::Tensor& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> factor(0.5, 3.0);
  const double f = factor(rng);
  auto kernel = torch::tensor({1.f, 1.f, 1.f, 1.f, 5.f, 1.f, 1.f, 1.f, 1.f}, x.options()).view({1, 1, 3, 3}) / 13.0;
  kernel = kernel.expand({3, 1, 3, 3}).contiguous();
  auto blurred = torch::nn::functional::conv2d(
      x.unsqueeze(0), kernel, torch::nn::functional::Conv2dFuncOptions().groups(3)).squeeze(0);
  auto out = x.clone();
  const auto h = x.size(1), w = x.size(2);
  using torch::indexing::Slice;
  auto interior = x.index({Slice(), Slice(1, h - 1), Slice(1, w - 1)});
  out.index_put_({Slice(), Slice(1, h - 1), Slice(1, w - 1)},
                 (blurred + f * (interior - blurred)).clamp(0, 1));
  return out;
}

inline torch::Tensor solarize(const torch::Tensor& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> threshold(0.3, 0.9);
  const double t = threshold(rng);
  return torch::where(x >= t, 1.0 - x, x);
}

/// Per-channel histogram equalization on 256 levels.
inline torch::Tensor equalize(const torch::Tensor& x) {
  auto q = (x * 255.0).round().clamp(0, 255).to(torch::kInt64);
  std::vector<torch::Tensor> channels;
  const auto n = static_cast<double>(x.size(1) * x.size(2));
  for (std::int64_t c = 0; c < x.size(0); ++c) {
    auto qc = q[c].reshape({-1});
    auto hist = torch::bincount(qc, {}, 256).to(torch::kFloat64);
    auto cdf = hist.cumsum(0);
    const double cdf_min = cdf.index({hist.nonzero().min()}).item<double>();
    if (n - cdf_min <= 0) {
      channels.push_back(x[c]);
      continue;
    }
    auto lut = ((cdf - cdf_min) / (n - cdf_min) * 255.0).round().clamp(0, 255) / 255.0;
    channels.push_back(lut.index({qc}).view({x.size(1), x.size(2)}).to(x.scalar_type()));
  }
  return torch::stack(channels);
}

inline torch::Tensor rotate(const torch::Tensor& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> degrees(-90.0, 90.0);
  const double a = degrees(rng) * std::numbers::pi / 180.0;
  namespace F = torch::nn::functional;
  auto theta = torch::tensor({static_cast<float>(std::cos(a)), static_cast<float>(-std::sin(a)), 0.f,
                              static_cast<float>(std::sin(a)), static_cast<float>(std::cos(a)), 0.f},
                             x.options())
                   .view({1, 2, 3});
  auto grid = torch::affine_grid_generator(theta, {1, x.size(0), x.size(1), x.size(2)}, false);
  return F::grid_sample(x.unsqueeze(0), grid,
                        F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros)
                            .align_corners(false))
      .squeeze(0);
}

}  // namespace augment

/// A randomly augmented copy of `source`: `picks` distinct augmentations drawn
/// from the pool and applied in random order. An empty pool is the identity.
inline torch::Tensor texture_source(const torch::Tensor& source, std::uint64_t seed,
                                    const TextureOptions& options = {}) {
  if (options.pool.empty() || options.picks == 0) return source.clone();
  std::mt19937_64 rng(seed);
  auto pool = options.pool;
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(options.picks, pool.size()));
  torch::Tensor out = source.clone();
  for (auto aug : pool) {
    switch (aug) {
      case Augmentation::kColorJitter: out = augment::color_jitter(out, rng); break;
      case Augmentation::kPosterize: out = augment::posterize(out, rng); break;
      case Augmentation::kSharpness: out = augment::sharpness(out, rng); break;
      case Augmentation::kSolarize: out = augment::solarize(out, rng); break;
      case Augmentation::kEqualize: out = augment::equalize(out); break;
      case Augmentation::kRotation: out = augment::rotate(out, rng); break;
    }
  }
  return out.contiguous();
}

struct PseudoAnomalyParams {
  MaskParams mask;
  double beta_min = 0.1;
  double beta_max = 1.0;
  TextureOptions texture;
  std::vector<std::filesystem::path> texture_paths;  // external textures; empty = self-augmentation

  static PseudoAnomalyParams from(const TrainConfig& config) {
    PseudoAnomalyParams p;
    p.mask.periods = config.perlin_periods;
    p.mask.threshold = config.mask_threshold;
    p.mask.retries = config.mask_retries;
    p.beta_min = config.beta_min;
    p.beta_max = config.beta_max;
    if (!config.texture_dir.empty()) {
      if (!std::filesystem::is_directory(config.texture_dir))
        throw Error(ErrorKind::kLayout, "texture_dir does not exist: " + config.texture_dir);
      for (const auto& entry : std::filesystem::recursive_directory_iterator(config.texture_dir))
        if (entry.is_regular_file() && detail::is_image_file(entry.path())) p.texture_paths.push_back(entry.path());
      std::sort(p.texture_paths.begin(), p.texture_paths.end());
      if (p.texture_paths.empty()) throw Error(ErrorKind::kLayout, "texture_dir has no images");
    }
    return p;
  }
};

/// A full sample as a pure function of (source, seed, params). Normal samples
/// pass the source through with an all-zero mask.
inline PseudoAnomalySample synthesize(const torch::Tensor& source, std::uint64_t seed,
                                      const PseudoAnomalyParams& params, bool anomalous = true) {
  if (!anomalous) {
    PseudoAnomalySample s;
    s.image = source.clone();
    s.mask = torch::zeros({source.size(1), source.size(2)}, torch::kUInt8);
    s.seed = seed;
    return s;
  }
  std::mt19937_64 rng(seed);
  const auto drawn = draw_anomaly_mask(source.size(1), source.size(2), rng, params.mask);
  std::uniform_real_distribution<double> beta_dist(params.beta_min, params.beta_max);
  const double beta = std::clamp(beta_dist(rng), 0.1, 1.0);
  torch::Tensor texture;
  if (params.texture_paths.empty()) {
    texture = texture_source(source, rng(), params.texture);
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, params.texture_paths.size() - 1);
    texture = load_image(params.texture_paths[pick(rng)], source.size(1));
    if (source.size(1) != source.size(2)) texture = texture.narrow(2, 0, source.size(2));
  }
  auto sample = blend(source, texture.to(source.options()), drawn.mask, beta);
  sample.period_y = drawn.period_y;
  sample.period_x = drawn.period_x;
  sample.threshold = drawn.threshold;
  sample.seed = seed;
  return sample;
}

}  // namespace dstpm
