#pragma once

#include <torch/torch.h>

#include <optional>
#include <vector>

#include "dstpm/error.hpp"
#include "dstpm/feature_extraction.hpp"

namespace dstpm {

/// Untrained clone of the residual-18 topology through stride 16.
using Student1Network = ResNetTrunk;

inline Student1Network init_student1(std::uint64_t seed) {
  torch::manual_seed(seed);
  return ResNetTrunk(ResNetVariant::kResNet18, 3);
}

inline FeaturePyramid student1_forward(Student1Network& net, const torch::Tensor& pixels) {
  check_input_batch(pixels);
  FeaturePyramid pyramid;
  pyramid.source = FeaturePyramid::Source::kStudent1;
  pyramid.levels = net->forward(pixels);
  return pyramid;
}

/// One-channel spatial gate computed from a (detached) teacher feature:
/// sigmoid of a learned 1x1 projection across channels.
struct AttentionHeadImpl : nn::Module {
  explicit AttentionHeadImpl(std::int64_t channels)
      : proj(register_module("proj", nn::Conv2d(nn::Conv2dOptions(channels, 1, 1).bias(true)))) {
    torch::NoGradGuard guard;
    nn::init::kaiming_normal_(proj->weight, 0.0, torch::kFanOut, torch::kReLU);
    nn::init::zeros_(proj->bias);
  }

  torch::Tensor forward(const torch::Tensor& teacher_feature) {
    return torch::sigmoid(proj(teacher_feature.detach()));
  }

  nn::Conv2d proj;
};
TORCH_MODULE(AttentionHead);

/// Attention heads for the decoder levels, ordered stride 16, 8, 4.
struct AttentionBridgeImpl : nn::Module {
  explicit AttentionBridgeImpl(const std::vector<std::int64_t>& teacher_channels_coarse_to_fine) {
    for (std::size_t i = 0; i < teacher_channels_coarse_to_fine.size(); ++i)
      heads.push_back(register_module("head" + std::to_string(i),
                                      AttentionHead(teacher_channels_coarse_to_fine[i])));
  }

  std::vector<AttentionHead> heads;
};
TORCH_MODULE(AttentionBridge);

struct AttentionMap {
  torch::Tensor values;  // B x 1 x h x w in [0,1]
  std::int64_t stride = 0;
};

inline AttentionMap compute_attention(AttentionHead& head, const torch::Tensor& teacher2_feature,
                                      std::int64_t stride) {
  return AttentionMap{head->forward(teacher2_feature), stride};
}

/// Decoder level: nearest x2 upsampling followed by two residual blocks.
struct DecoderStageImpl : nn::Module {
  DecoderStageImpl(std::int64_t in, std::int64_t out)
      : block1(register_module("block1", BasicBlock(in, out, 1))),
        block2(register_module("block2", BasicBlock(out, out, 1))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    auto up = torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0})
               .mode(torch::kNearest));
    return block2(block1(up));
  }

  BasicBlock block1, block2;
};
TORCH_MODULE(DecoderStage);

struct DecoderImpl : nn::Module {
  DecoderImpl() {
    const std::int64_t widths[] = {512, 256, 128, 64};
    for (int i = 0; i < 3; ++i)
      stages.push_back(register_module("stage" + std::to_string(i), DecoderStage(widths[i], widths[i + 1])));
  }
  std::vector<DecoderStage> stages;
};
TORCH_MODULE(Decoder);

/// 1x1 projections from decoder widths (256, 128, 64) to the teacher2 widths,
/// ordered stride 16, 8, 4.
struct AdapterSetImpl : nn::Module {
  explicit AdapterSetImpl(const std::vector<std::int64_t>& teacher_channels_coarse_to_fine) {
    const std::int64_t widths[] = {256, 128, 64};
    for (std::size_t i = 0; i < 3; ++i)
      projections.push_back(register_module(
          "proj" + std::to_string(i),
          nn::Conv2d(nn::Conv2dOptions(widths[i], teacher_channels_coarse_to_fine[i], 1).bias(true))));
  }
  std::vector<nn::Conv2d> projections;
};
TORCH_MODULE(AdapterSet);

struct Student2Output {
  FeaturePyramid pyramid;                  // post-adapter, stride 4, 8, 16
  std::vector<torch::Tensor> pre_adapter;  // gated decoder features, stride 4, 8, 16
};

/// Reconstructs teacher2's stride 16/8/4 features from teacher1's stride-32
/// bottleneck. Each decoder level is gated as feature * (1 + attention)
/// before its adapter; the gated feature also feeds the next level.
struct Student2NetworkImpl : nn::Module {
  /// `teacher2_channels` in stride-ascending order (stride 4, 8, 16).
  explicit Student2NetworkImpl(const std::vector<std::int64_t>& teacher2_channels) {
    if (teacher2_channels.size() != 3) throw Error(ErrorKind::kArity, "student2 needs three teacher widths");
    const std::vector<std::int64_t> coarse_to_fine{teacher2_channels[2], teacher2_channels[1], teacher2_channels[0]};
    decoder = register_module("decoder", Decoder());
    adapters = register_module("adapters", AdapterSet(coarse_to_fine));
    attention = register_module("attention", AttentionBridge(coarse_to_fine));
    init_resnet_weights(*decoder);
    torch::NoGradGuard guard;
    for (auto& p : adapters->projections) {
      nn::init::kaiming_normal_(p->weight, 0.0, torch::kFanOut, torch::kReLU);
      nn::init::zeros_(p->bias);
    }
  }

  /// `attention_coarse_to_fine` is empty (ungated) or holds one map per level,
  /// ordered stride 16, 8, 4.
  Student2Output forward(const torch::Tensor& bottleneck,
                         const std::vector<AttentionMap>& attention_coarse_to_fine) {
    if (bottleneck.dim() != 4 || bottleneck.size(1) != 512)
      throw Error(ErrorKind::kShape, "student2 expects a B x 512 x h x w bottleneck");
    if (!attention_coarse_to_fine.empty() && attention_coarse_to_fine.size() != 3)
      throw Error(ErrorKind::kArity, "student2 needs zero or three attention maps");
    std::vector<torch::Tensor> gated(3), adapted(3);
    auto h = bottleneck;
    for (std::size_t i = 0; i < 3; ++i) {
      h = decoder->stages[i]->forward(h);
      if (!attention_coarse_to_fine.empty()) {
        const auto& a = attention_coarse_to_fine[i].values;
        if (a.dim() != 4 || a.size(1) != 1 || a.size(0) != h.size(0) || a.size(2) != h.size(2) ||
            a.size(3) != h.size(3))
          throw Error(ErrorKind::kShape, "attention map does not match decoder level " + std::to_string(i));
        h = h * (1.0 + a);
      }
      gated[2 - i] = h;
      adapted[2 - i] = adapters->projections[i]->forward(h);
    }
    Student2Output out;
    out.pyramid.source = FeaturePyramid::Source::kStudent2;
    out.pyramid.levels = std::move(adapted);
    out.pre_adapter = std::move(gated);
    return out;
  }

  /// Attention maps from teacher2's stride-ascending pyramid, ordered stride 16, 8, 4.
  std::vector<AttentionMap> attention_from(const FeaturePyramid& teacher2) {
    std::vector<AttentionMap> maps;
    const std::int64_t strides[] = {16, 8, 4};
    for (std::size_t i = 0; i < 3; ++i)
      maps.push_back(compute_attention(attention->heads[i], teacher2.levels[2 - i], strides[i]));
    return maps;
  }

  Decoder decoder{nullptr};
  AdapterSet adapters{nullptr};
  AttentionBridge attention{nullptr};
};
TORCH_MODULE(Student2Network);

inline Student2Network init_student2(const std::vector<std::int64_t>& teacher2_channels, std::uint64_t seed) {
  torch::manual_seed(seed);
  return Student2Network(teacher2_channels);
}

}  // namespace dstpm
