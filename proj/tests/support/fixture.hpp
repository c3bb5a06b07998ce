#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dstpm/config.hpp"

namespace dstpm::test_support {

namespace fs = std::filesystem;

/// Directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "dstpm") {
    std::random_device rd;
    std::mt19937_64 rng(rd());
    path_ = fs::temp_directory_path() / (tag + "-" + std::to_string(rng()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

struct FixtureSpec {
  std::string category = "widget";
  int train_images = 16;
  int good_tests = 4;
  std::vector<std::string> defect_types = {"crack", "stain"};
  int defects_per_type = 3;
  int height = 72;
  int width = 80;
  std::uint64_t seed = 7;
};

/// A regular woven texture with mild per-image jitter, BGR 8-bit.
inline cv::Mat texture_image(int height, int width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  std::normal_distribution<double> noise(0.0, 6.0);
  const double px = phase(rng), py = phase(rng);
  cv::Mat img(height, width, CV_8UC3);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double weave = std::sin(2.0 * M_PI * x / 8.0 + px) * std::sin(2.0 * M_PI * y / 8.0 + py);
      const double base = 128.0 + 60.0 * weave;
      auto& pixel = img.at<cv::Vec3b>(y, x);
      pixel[0] = cv::saturate_cast<std::uint8_t>(base * 0.8 + noise(rng));
      pixel[1] = cv::saturate_cast<std::uint8_t>(base * 0.9 + noise(rng));
      pixel[2] = cv::saturate_cast<std::uint8_t>(base + noise(rng));
    }
  }
  return img;
}

/// Paints a defect into `img` and returns its 0/255 mask.
inline cv::Mat paint_defect(cv::Mat& img, const std::string& type, std::mt19937_64& rng) {
  cv::Mat mask = cv::Mat::zeros(img.rows, img.cols, CV_8UC1);
  std::uniform_int_distribution<int> cx(img.cols / 4, 3 * img.cols / 4);
  std::uniform_int_distribution<int> cy(img.rows / 4, 3 * img.rows / 4);
  const cv::Point center(cx(rng), cy(rng));
  if (type == "crack") {
    const cv::Point end(center.x + img.cols / 5, center.y + img.rows / 6);
    cv::line(mask, center, end, cv::Scalar(255), 4);
  } else {
    cv::ellipse(mask, center, cv::Size(img.cols / 8, img.rows / 10), 30.0, 0.0, 360.0, cv::Scalar(255), -1);
  }
  const cv::Scalar color = type == "crack" ? cv::Scalar(20, 20, 20) : cv::Scalar(40, 160, 230);
  img.setTo(color, mask);
  return mask;
}

/// Writes an MVTec-style tree `<root>/<category>/{train,test,ground_truth}`
/// and returns the root.
inline fs::path write_fixture(const fs::path& root, const FixtureSpec& spec = {}) {
  std::mt19937_64 rng(spec.seed);
  const fs::path base = root / spec.category;
  fs::create_directories(base / "train" / "good");
  fs::create_directories(base / "test" / "good");
  auto name = [](int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d.png", i);
    return std::string(buf);
  };
  for (int i = 0; i < spec.train_images; ++i)
    cv::imwrite((base / "train" / "good" / name(i)).string(), texture_image(spec.height, spec.width, rng));
  for (int i = 0; i < spec.good_tests; ++i)
    cv::imwrite((base / "test" / "good" / name(i)).string(), texture_image(spec.height, spec.width, rng));
  for (const auto& type : spec.defect_types) {
    fs::create_directories(base / "test" / type);
    fs::create_directories(base / "ground_truth" / type);
    for (int i = 0; i < spec.defects_per_type; ++i) {
      auto img = texture_image(spec.height, spec.width, rng);
      const auto mask = paint_defect(img, type, rng);
      cv::imwrite((base / "test" / type / name(i)).string(), img);
      const auto stem = fs::path(name(i)).stem().string();
      cv::imwrite((base / "ground_truth" / type / (stem + "_mask.png")).string(), mask);
    }
  }
  if (spec.defect_types.empty()) fs::create_directories(base / "ground_truth");
  return root;
}

/// Small, fast configuration over random teachers for fixture runs.
inline TrainConfig smoke_config(const fs::path& root, const std::string& category = "widget") {
  TrainConfig c;
  c.category = category;
  c.data_root = root.string();
  c.image_size = 64;
  c.stpm_epochs = 5;
  c.disc_epochs = 5;
  c.batch_size = 2;
  c.disc_batch_size = 1;
  c.disc_lr = 2e-3;
  c.disc_base_width = 8;
  c.teacher1_weights = "random:11";
  c.teacher2_weights = "random:12";
  c.topk = 10;
  c.seed = 3;
  return c;
}

}  // namespace dstpm::test_support
