#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include "dstpm/anomaly_composition.hpp"
#include "dstpm/error.hpp"
#include "dstpm/feature_extraction.hpp"

namespace dstpm {

namespace nn = torch::nn;

struct ConvBlockImpl : nn::Module {
  ConvBlockImpl(std::int64_t in, std::int64_t out)
      : body(register_module("body", nn::Sequential(
                                         nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1).bias(false)),
                                         nn::BatchNorm2d(out), nn::ReLU(),
                                         nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)),
                                         nn::BatchNorm2d(out), nn::ReLU()))) {}

  torch::Tensor forward(const torch::Tensor& x) { return body->forward(x); }

  nn::Sequential body;
};
TORCH_MODULE(ConvBlock);

/// U-Net over the three stacked pair-sum maps. `depth` pooling steps, widths
/// doubling from `base_width`; a sigmoid head gives one probability channel.
struct DiscriminatorNetworkImpl : nn::Module {
  DiscriminatorNetworkImpl(std::int64_t base_width = 32, std::int64_t depth = 4) : depth_(depth) {
    std::int64_t in = 3;
    std::vector<std::int64_t> widths;
    for (std::int64_t level = 0; level <= depth; ++level) widths.push_back(base_width << level);
    for (std::int64_t level = 0; level <= depth; ++level) {
      encoders.push_back(register_module("enc" + std::to_string(level), ConvBlock(in, widths[level])));
      in = widths[level];
    }
    for (std::int64_t level = depth - 1; level >= 0; --level) {
      const auto w = widths[static_cast<std::size_t>(level)];
      ups.push_back(register_module(
          "up" + std::to_string(level),
          nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, w, 3).padding(1).bias(false)), nn::BatchNorm2d(w),
                         nn::ReLU())));
      decoders.push_back(register_module("dec" + std::to_string(level), ConvBlock(2 * w, w)));
      in = w;
    }
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, 1, 1)));
    init_resnet_weights(*this);
    torch::NoGradGuard guard;
    // Start near P = 0.5 everywhere instead of saturating the sigmoid.
    nn::init::normal_(head->weight, 0.0, 0.01);
    nn::init::zeros_(head->bias);
  }

  /// B x 3 x H x W -> B x 1 x H x W logits.
  torch::Tensor logits(const torch::Tensor& x) {
    namespace F = torch::nn::functional;
    std::vector<torch::Tensor> skips;
    auto h = x;
    for (std::int64_t level = 0; level <= depth_; ++level) {
      h = encoders[static_cast<std::size_t>(level)]->forward(h);
      if (level < depth_) {
        skips.push_back(h);
        h = torch::max_pool2d(h, 2);
      }
    }
    for (std::size_t i = 0; i < ups.size(); ++i) {
      auto& skip = skips[skips.size() - 1 - i];
      h = F::interpolate(h, F::InterpolateFuncOptions()
                                .size(std::vector<std::int64_t>{skip.size(2), skip.size(3)})
                                .mode(torch::kBilinear)
                                .align_corners(false));
      h = ups[i]->forward(h);
      h = decoders[i]->forward(torch::cat({skip, h}, 1));
    }
    return head(h);
  }

  torch::Tensor forward(const torch::Tensor& x) { return torch::sigmoid(logits(x)); }

  std::int64_t depth() const { return depth_; }

  std::vector<ConvBlock> encoders;
  std::vector<nn::Sequential> ups;
  std::vector<ConvBlock> decoders;
  nn::Conv2d head{nullptr};

 private:
  std::int64_t depth_;
};
TORCH_MODULE(DiscriminatorNetwork);

/// Upsamples the three pair-sum maps to `target` and stacks them as channels
/// in stride order 4, 8, 16. Returns B x 3 x target x target.
inline torch::Tensor stack_inputs(const std::vector<AnomalyMap>& pair_maps, std::int64_t target) {
  if (pair_maps.size() != 3) throw Error(ErrorKind::kArity, "discriminator input needs three pair maps");
  std::vector<torch::Tensor> channels;
  for (const auto& m : pair_maps) {
    auto up = upsample_map(m, target).values;
    channels.push_back(up.dim() == 2 ? up.unsqueeze(0) : up);
  }
  return torch::stack(channels, 1);
}

inline torch::Tensor stack_inputs(const std::array<AnomalyMap, 3>& pair_maps, std::int64_t target) {
  return stack_inputs(std::vector<AnomalyMap>(pair_maps.begin(), pair_maps.end()), target);
}

inline AnomalyMap discriminator_forward(DiscriminatorNetwork& net, const torch::Tensor& stacked) {
  if (stacked.dim() != 4 || stacked.size(1) != 3)
    throw Error(ErrorKind::kShape, "discriminator expects B x 3 x H x W input");
  const auto divisor = std::int64_t{1} << net->depth();
  if (stacked.size(2) % divisor != 0 || stacked.size(3) % divisor != 0)
    throw Error(ErrorKind::kShape, "discriminator input size must be divisible by 2^depth");
  return AnomalyMap{net->forward(stacked).squeeze(1), AnomalyMap::kFull, 7};
}

struct FocalLossConfig {
  double gamma = 2.0;
  /// Adds the normal-pixel term -(1-T) P^gamma log(1-P); false gives the
  /// anomalous-only form.
  bool symmetric = true;
  double normal_weight = 1.0;
};

inline constexpr double kProbabilityClamp = 1e-6;

/// Mean over pixels of -[T (1-P)^g log P + w (1-T) P^g log(1-P)].
inline torch::Tensor focal_loss(const torch::Tensor& probability, const torch::Tensor& target,
                                const FocalLossConfig& cfg = {}) {
  if (probability.sizes() != target.sizes())
    throw Error(ErrorKind::kShape, "focal loss: prediction and target differ in shape");
  if (cfg.gamma < 0) throw Error(ErrorKind::kParameter, "focal gamma must be non-negative");
  auto p = probability.clamp(kProbabilityClamp, 1.0 - kProbabilityClamp);
  auto t = target.to(p.scalar_type());
  auto loss = -t * torch::pow(1.0 - p, cfg.gamma) * torch::log(p);
  if (cfg.symmetric) loss = loss - cfg.normal_weight * (1.0 - t) * torch::pow(p, cfg.gamma) * torch::log(1.0 - p);
  return loss.mean();
}

}  // namespace dstpm
