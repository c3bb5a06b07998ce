#pragma once

#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "dstpm/error.hpp"
#include "dstpm/tensor_archive.hpp"

namespace dstpm {

namespace nn = torch::nn;

enum class ResNetVariant { kResNet18, kResNet50 };

inline ResNetVariant parse_variant(const std::string& name) {
  if (name == "resnet18") return ResNetVariant::kResNet18;
  if (name == "resnet50") return ResNetVariant::kResNet50;
  throw Error(ErrorKind::kConfig, "unknown backbone variant '" + name + "'");
}

inline std::string variant_name(ResNetVariant v) {
  return v == ResNetVariant::kResNet18 ? "resnet18" : "resnet50";
}

/// Output channels of each residual stage (strides 4, 8, 16, 32).
inline std::vector<std::int64_t> stage_channels(ResNetVariant v) {
  if (v == ResNetVariant::kResNet18) return {64, 128, 256, 512};
  return {256, 512, 1024, 2048};
}

inline nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

inline nn::Conv2d conv1x1(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false));
}

// Parameter names follow the torchvision layout so converted state dicts load
// without renaming.
struct BasicBlockImpl : nn::Module {
  static constexpr std::int64_t kExpansion = 1;

  BasicBlockImpl(std::int64_t in, std::int64_t planes, std::int64_t stride)
      : conv1(register_module("conv1", conv3x3(in, planes, stride))),
        bn1(register_module("bn1", nn::BatchNorm2d(planes))),
        conv2(register_module("conv2", conv3x3(planes, planes))),
        bn2(register_module("bn2", nn::BatchNorm2d(planes))) {
    if (stride != 1 || in != planes) {
      downsample = register_module(
          "downsample", nn::Sequential(conv1x1(in, planes, stride), nn::BatchNorm2d(planes)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto out = torch::relu(bn1(conv1(x)));
    out = bn2(conv2(out));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(out + identity);
  }

  nn::Conv2d conv1, conv2;
  nn::BatchNorm2d bn1, bn2;
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

struct BottleneckImpl : nn::Module {
  static constexpr std::int64_t kExpansion = 4;

  BottleneckImpl(std::int64_t in, std::int64_t planes, std::int64_t stride)
      : conv1(register_module("conv1", conv1x1(in, planes))),
        bn1(register_module("bn1", nn::BatchNorm2d(planes))),
        conv2(register_module("conv2", conv3x3(planes, planes, stride))),
        bn2(register_module("bn2", nn::BatchNorm2d(planes))),
        conv3(register_module("conv3", conv1x1(planes, planes * kExpansion))),
        bn3(register_module("bn3", nn::BatchNorm2d(planes * kExpansion))) {
    if (stride != 1 || in != planes * kExpansion) {
      downsample = register_module("downsample",
                                   nn::Sequential(conv1x1(in, planes * kExpansion, stride),
                                                  nn::BatchNorm2d(planes * kExpansion)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto out = torch::relu(bn1(conv1(x)));
    out = torch::relu(bn2(conv2(out)));
    out = bn3(conv3(out));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(out + identity);
  }

  nn::Conv2d conv1, conv2, conv3;
  nn::BatchNorm2d bn1, bn2, bn3;
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

/// He (fan-out) init for convolutions, unit/zero for batch norm.
inline void init_resnet_weights(nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* conv = m->as<nn::Conv2d>()) {
      nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
      if (conv->bias.defined()) nn::init::zeros_(conv->bias);
    } else if (auto* bn = m->as<nn::BatchNorm2d>()) {
      nn::init::ones_(bn->weight);
      nn::init::zeros_(bn->bias);
    }
  }
}

/// Stem plus the first `stages` residual stages of a ResNet. Forward returns
/// one tensor per stage, strides 4, 8, 16 (and 32 when stages == 4).
struct ResNetTrunkImpl : nn::Module {
  ResNetTrunkImpl(ResNetVariant variant, int stages) : variant_(variant), stages_(stages) {
    if (stages < 1 || stages > 4) throw Error(ErrorKind::kParameter, "ResNet trunk needs 1..4 stages");
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(64));
    const std::vector<std::int64_t> planes{64, 128, 256, 512};
    const std::vector<int> depth18{2, 2, 2, 2};
    const std::vector<int> depth50{3, 4, 6, 3};
    std::int64_t in = 64;
    for (int s = 0; s < stages; ++s) {
      nn::Sequential layer;
      const int blocks = variant == ResNetVariant::kResNet18 ? depth18[s] : depth50[s];
      for (int b = 0; b < blocks; ++b) {
        const std::int64_t stride = (b == 0 && s > 0) ? 2 : 1;
        if (variant == ResNetVariant::kResNet18) {
          layer->push_back(BasicBlock(in, planes[s], stride));
          in = planes[s] * BasicBlockImpl::kExpansion;
        } else {
          layer->push_back(Bottleneck(in, planes[s], stride));
          in = planes[s] * BottleneckImpl::kExpansion;
        }
      }
      layers.push_back(register_module("layer" + std::to_string(s + 1), layer));
    }
    init_resnet_weights(*this);
  }

  std::vector<torch::Tensor> forward(const torch::Tensor& x) {
    auto h = torch::relu(bn1(conv1(x)));
    h = torch::max_pool2d(h, 3, 2, 1);
    std::vector<torch::Tensor> outs;
    for (auto& layer : layers) {
      h = layer->forward(h);
      outs.push_back(h);
    }
    return outs;
  }

  ResNetVariant variant() const { return variant_; }
  int stages() const { return stages_; }

  nn::Conv2d conv1{nullptr};
  nn::BatchNorm2d bn1{nullptr};
  std::vector<nn::Sequential> layers;

 private:
  ResNetVariant variant_;
  int stages_;
};
TORCH_MODULE(ResNetTrunk);

struct FeaturePyramid {
  enum class Source { kTeacher1, kTeacher2, kStudent1, kStudent2 };
  std::vector<torch::Tensor> levels;  // stride ascending
  Source source = Source::kTeacher1;
};

/// A frozen pretrained backbone exposing its stage outputs.
struct TeacherNetwork {
  ResNetVariant variant = ResNetVariant::kResNet18;
  ResNetTrunk trunk{nullptr};
  std::string weights_source;
  std::string checksum;

  std::vector<std::int64_t> tap_strides() const {
    std::vector<std::int64_t> s{4, 8, 16, 32};
    s.resize(static_cast<std::size_t>(trunk->stages()));
    return s;
  }
};

inline int default_stages(ResNetVariant v) { return v == ResNetVariant::kResNet18 ? 4 : 3; }

/// Directory searched for `<variant>.dstw` when the weights source is "auto":
/// $DSTPM_WEIGHTS_DIR, else ~/.cache/dstpm.
inline std::filesystem::path weights_cache_dir() {
  if (const char* env = std::getenv("DSTPM_WEIGHTS_DIR"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home)
    return std::filesystem::path(home) / ".cache" / "dstpm";
  return std::filesystem::path(".cache") / "dstpm";
}

/// Weights source forms: a tensor-archive path, "auto" (cache lookup), or
/// "random:<seed>" for a seeded He initialization when no pretrained file is
/// available.
inline TeacherNetwork load_teacher(ResNetVariant variant, const std::string& weights_source,
                                   int stages = -1, torch::Device device = torch::kCPU) {
  if (stages < 0) stages = default_stages(variant);
  TeacherNetwork teacher;
  teacher.variant = variant;
  teacher.weights_source = weights_source;

  constexpr std::string_view kRandom = "random:";
  if (weights_source.rfind(kRandom, 0) == 0) {
    std::uint64_t seed = 0;
    try {
      seed = std::stoull(weights_source.substr(kRandom.size()));
    } catch (const std::exception&) {
      throw Error(ErrorKind::kWeights, "bad random weights seed in '" + weights_source + "'");
    }
    torch::manual_seed(seed);
    teacher.trunk = ResNetTrunk(variant, stages);
  } else {
    std::filesystem::path path = weights_source;
    if (weights_source == "auto" || weights_source.empty()) {
      path = weights_cache_dir() / (variant_name(variant) + ".dstw");
      teacher.weights_source = path.string();
    }
    if (!std::filesystem::is_regular_file(path))
      throw Error(ErrorKind::kWeights, "weights file not found: " + path.string());
    const auto archive = load_archive(path, ErrorKind::kWeights);
    teacher.trunk = ResNetTrunk(variant, stages);
    import_state(*teacher.trunk, "", archive.tensors, ErrorKind::kWeights);
  }
  teacher.trunk->to(device);
  teacher.trunk->eval();
  for (auto& p : teacher.trunk->parameters()) p.set_requires_grad(false);
  teacher.checksum = parameter_checksum(*teacher.trunk);
  return teacher;
}

inline void check_input_batch(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 3)
    throw Error(ErrorKind::kShape, "expected a B x 3 x H x W batch");
  if (x.size(2) % 32 != 0 || x.size(3) % 32 != 0)
    throw Error(ErrorKind::kShape, "input height and width must be divisible by 32");
}

inline FeaturePyramid extract_pyramid(TeacherNetwork& teacher, const torch::Tensor& pixels,
                                      FeaturePyramid::Source source = FeaturePyramid::Source::kTeacher1) {
  check_input_batch(pixels);
  torch::NoGradGuard guard;
  teacher.trunk->eval();
  FeaturePyramid pyramid;
  pyramid.source = source;
  for (auto& level : teacher.trunk->forward(pixels)) pyramid.levels.push_back(level.detach());
  return pyramid;
}

}  // namespace dstpm
