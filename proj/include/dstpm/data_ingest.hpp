#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dstpm/config.hpp"
#include "dstpm/error.hpp"

namespace dstpm {

namespace fs = std::filesystem;

struct TestItem {
  fs::path image;
  std::string defect_type;
  std::optional<fs::path> mask;

  bool anomalous() const { return defect_type != "good"; }
};

struct DatasetIndex {
  std::string category;
  fs::path root;
  std::vector<fs::path> train_paths;
  std::vector<TestItem> test_items;
  std::int64_t image_size = 256;

  bool contains(const fs::path& path) const {
    if (std::find(train_paths.begin(), train_paths.end(), path) != train_paths.end()) return true;
    return std::any_of(test_items.begin(), test_items.end(),
                       [&](const TestItem& t) { return t.image == path; });
  }
};

struct ImageBatch {
  torch::Tensor pixels;  // B x 3 x H x W, channel-normalized
  std::vector<fs::path> source_paths;
};

/// Per-channel statistics the pretrained backbones were trained with.
struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};

  static Normalization from(const TrainConfig& config) {
    Normalization n;
    for (std::size_t c = 0; c < 3; ++c) {
      n.mean[c] = static_cast<float>(config.norm_mean[c]);
      n.std[c] = static_cast<float>(config.norm_std[c]);
    }
    return n;
  }

  /// Works on 3xHxW or Bx3xHxW tensors in [0,1].
  torch::Tensor apply(const torch::Tensor& image) const {
    auto opts = image.options();
    auto m = torch::tensor({mean[0], mean[1], mean[2]}, opts).view({3, 1, 1});
    auto s = torch::tensor({std[0], std[1], std[2]}, opts).view({3, 1, 1});
    return (image - m) / s;
  }
};

namespace detail {

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

inline std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path())) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline void require_dir(const fs::path& p) {
  if (!fs::is_directory(p)) throw Error(ErrorKind::kLayout, "missing directory " + p.string());
}

}  // namespace detail

/// Walks `<root>/<category>/{train/good,test/<defect>,ground_truth/<defect>}`.
inline DatasetIndex scan_mvtec(const fs::path& root, const std::string& category,
                               std::int64_t image_size = 256) {
  const fs::path base = root / category;
  detail::require_dir(base);
  detail::require_dir(base / "train" / "good");
  detail::require_dir(base / "test");
  detail::require_dir(base / "ground_truth");

  DatasetIndex index;
  index.category = category;
  index.root = root;
  index.image_size = image_size;
  index.train_paths = detail::list_images(base / "train" / "good");
  if (index.train_paths.empty())
    throw Error(ErrorKind::kLayout, "no images in " + (base / "train" / "good").string());

  std::vector<fs::path> defect_dirs;
  for (const auto& entry : fs::directory_iterator(base / "test"))
    if (entry.is_directory()) defect_dirs.push_back(entry.path());
  std::sort(defect_dirs.begin(), defect_dirs.end());

  for (const auto& dir : defect_dirs) {
    const std::string defect = dir.filename().string();
    for (const auto& image : detail::list_images(dir)) {
      TestItem item{image, defect, std::nullopt};
      if (item.anomalous()) {
        const fs::path mask = base / "ground_truth" / defect / (image.stem().string() + "_mask.png");
        if (!fs::is_regular_file(mask))
          throw Error(ErrorKind::kMaskMissing, "no mask " + mask.string() + " for " + image.string());
        item.mask = mask;
      }
      index.test_items.push_back(std::move(item));
    }
  }
  std::sort(index.test_items.begin(), index.test_items.end(),
            [](const TestItem& a, const TestItem& b) { return a.image < b.image; });

  std::set<fs::path> train_set(index.train_paths.begin(), index.train_paths.end());
  for (const auto& item : index.test_items)
    if (train_set.count(item.image))
      throw Error(ErrorKind::kLayout, "path in both train and test: " + item.image.string());
  return index;
}

/// Decodes an image as RGB, resizes bilinearly to size x size and scales to
/// [0,1]. Returns 3 x size x size float32.
inline torch::Tensor load_image(const fs::path& path, std::int64_t size) {
  if (size <= 0) throw Error(ErrorKind::kParameter, "image size must be positive");
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(ErrorKind::kDecode, "cannot decode " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat unit;
  rgb.convertTo(unit, CV_32FC3, 1.0 / 255.0);
  cv::Mat resized;
  const int s = static_cast<int>(size);
  if (unit.rows == s && unit.cols == s) resized = unit;
  else cv::resize(unit, resized, cv::Size(s, s), 0, 0, cv::INTER_LINEAR);
  auto hwc = torch::from_blob(resized.data, {size, size, 3}, torch::kFloat32);
  return hwc.permute({2, 0, 1}).contiguous().clone();
}

inline ImageBatch load_batch(const DatasetIndex& index, const std::vector<fs::path>& paths,
                             std::int64_t size, const Normalization& norm = {}) {
  std::vector<torch::Tensor> images;
  images.reserve(paths.size());
  for (const auto& p : paths) {
    if (!index.contains(p)) throw Error(ErrorKind::kParameter, "path not in index: " + p.string());
    images.push_back(norm.apply(load_image(p, size)));
  }
  if (images.empty()) throw Error(ErrorKind::kParameter, "empty batch");
  return ImageBatch{torch::stack(images), paths};
}

/// Nearest-neighbour resize, binarized at > 127. Returns size x size uint8 in {0,1}.
inline torch::Tensor load_mask(const fs::path& path, std::int64_t size) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw Error(ErrorKind::kDecode, "cannot decode mask " + path.string());
  const int s = static_cast<int>(size);
  cv::Mat resized;
  if (gray.rows == s && gray.cols == s) resized = gray;
  else cv::resize(gray, resized, cv::Size(s, s), 0, 0, cv::INTER_NEAREST);
  cv::Mat binary = resized > 127;
  binary /= 255;
  return torch::from_blob(binary.data, {size, size}, torch::kUInt8).clone();
}

/// Ground truth for a test item; "good" items get an all-zero mask.
inline torch::Tensor item_mask(const TestItem& item, std::int64_t size) {
  if (!item.mask) return torch::zeros({size, size}, torch::kUInt8);
  return load_mask(*item.mask, size);
}

inline void write_png(const fs::path& path, const cv::Mat& mat) {
  if (!path.parent_path().empty()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw Error(ErrorKind::kIo, "cannot write " + path.string());
}

/// 3xHxW float in [0,1] to an 8-bit BGR mat.
inline cv::Mat to_bgr8(const torch::Tensor& rgb) {
  auto hwc = (rgb.detach().to(torch::kCPU).clamp(0, 1) * 255.0f).round().to(torch::kUInt8)
                 .permute({1, 2, 0}).contiguous();
  cv::Mat mat(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(mat, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

/// HxW {0,1} mask to an 8-bit {0,255} mat.
inline cv::Mat mask_to_gray8(const torch::Tensor& mask) {
  auto m = (mask.detach().to(torch::kCPU).to(torch::kUInt8) * 255).contiguous();
  cv::Mat mat(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr());
  return mat.clone();
}

}  // namespace dstpm
