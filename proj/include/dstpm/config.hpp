#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dstpm/error.hpp"

namespace dstpm {

/// 64-bit FNV-1a. Used for parameter checksums and config fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t hash = 0xcbf29ce484222325ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::string hex64(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) out[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
  return out;
}

enum class ImageReduction { kMax, kTopKMean };
enum class LrSchedule { kConstant, kCosine };
enum class AttentionMode { kStudent2, kNone };

struct TrainConfig {
  std::string category;
  std::string data_root;
  std::int64_t image_size = 256;

  std::int64_t stpm_epochs = 100;
  double stpm_lr = 0.4;
  double stpm_momentum = 0.9;
  double stpm_weight_decay = 1e-4;
  std::int64_t batch_size = 32;
  LrSchedule lr_schedule = LrSchedule::kConstant;

  std::int64_t disc_epochs = 300;
  double disc_lr = 1e-4;
  std::int64_t disc_batch_size = 32;
  std::int64_t disc_base_width = 32;
  std::int64_t disc_depth = 4;
  double focal_gamma = 2.0;
  bool focal_symmetric = true;
  double focal_normal_weight = 1.0;

  std::uint64_t seed = 0;
  std::string device = "cpu";

  std::string teacher1_variant = "resnet18";
  std::string teacher2_variant = "resnet50";
  std::string teacher1_weights = "auto";
  std::string teacher2_weights = "auto";
  AttentionMode attention = AttentionMode::kStudent2;
  std::array<double, 3> norm_mean{0.485, 0.456, 0.406};
  std::array<double, 3> norm_std{0.229, 0.224, 0.225};

  ImageReduction image_reduction = ImageReduction::kMax;
  std::int64_t topk = 100;
  double smoothing_sigma = 0.0;

  std::vector<std::int64_t> perlin_periods{2, 4, 8, 16};
  double mask_threshold = 0.5;
  double beta_min = 0.1;
  double beta_max = 1.0;
  double anomaly_ratio = 0.5;
  std::int64_t mask_retries = 32;
  std::string texture_dir;

  void set(std::string_view key, std::string_view value);
  std::map<std::string, std::string> to_map() const;
  /// Hash over every key that influences learned weights. Paths and the
  /// device are excluded so a checkpoint moves between machines.
  std::string fingerprint() const;
  void validate() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  const std::string value = trim(text);
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty())
    throw Error(ErrorKind::kConfig, "invalid value '" + value + "' for key '" + std::string(key) + "'");
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  const std::string value = trim(text);
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw Error(ErrorKind::kConfig, "invalid boolean '" + value + "' for key '" + std::string(key) + "'");
}

template <typename T>
std::vector<T> parse_list(std::string_view key, std::string_view text) {
  std::vector<T> out;
  std::stringstream stream{std::string(text)};
  std::string item;
  while (std::getline(stream, item, ',')) out.push_back(parse_number<T>(key, item));
  if (out.empty()) throw Error(ErrorKind::kConfig, "empty list for key '" + std::string(key) + "'");
  return out;
}

template <typename T>
std::string join(const T& values) {
  std::ostringstream out;
  out.precision(17);
  bool first = true;
  for (const auto& v : values) {
    if (!first) out << ',';
    out << v;
    first = false;
  }
  return out.str();
}

inline std::string num(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace detail

inline void TrainConfig::set(std::string_view key_in, std::string_view raw) {
  using detail::parse_number;
  const std::string key = detail::trim(key_in);
  const std::string value = detail::trim(raw);
  auto to3 = [&](std::array<double, 3>& dst) {
    const auto list = detail::parse_list<double>(key, value);
    if (list.size() != 3) throw Error(ErrorKind::kConfig, "key '" + key + "' needs 3 values");
    std::copy(list.begin(), list.end(), dst.begin());
  };

  if (key == "category") category = value;
  else if (key == "data_root") data_root = value;
  else if (key == "image_size") image_size = parse_number<std::int64_t>(key, value);
  else if (key == "stpm_epochs") stpm_epochs = parse_number<std::int64_t>(key, value);
  else if (key == "stpm_lr") stpm_lr = parse_number<double>(key, value);
  else if (key == "stpm_momentum") stpm_momentum = parse_number<double>(key, value);
  else if (key == "stpm_weight_decay") stpm_weight_decay = parse_number<double>(key, value);
  else if (key == "batch_size") batch_size = parse_number<std::int64_t>(key, value);
  else if (key == "lr_schedule") {
    if (value == "constant") lr_schedule = LrSchedule::kConstant;
    else if (value == "cosine") lr_schedule = LrSchedule::kCosine;
    else throw Error(ErrorKind::kConfig, "lr_schedule must be constant or cosine");
  }
  else if (key == "disc_epochs") disc_epochs = parse_number<std::int64_t>(key, value);
  else if (key == "disc_lr") disc_lr = parse_number<double>(key, value);
  else if (key == "disc_batch_size") disc_batch_size = parse_number<std::int64_t>(key, value);
  else if (key == "disc_base_width") disc_base_width = parse_number<std::int64_t>(key, value);
  else if (key == "disc_depth") disc_depth = parse_number<std::int64_t>(key, value);
  else if (key == "focal_gamma") focal_gamma = parse_number<double>(key, value);
  else if (key == "focal_symmetric") focal_symmetric = detail::parse_bool(key, value);
  else if (key == "focal_normal_weight") focal_normal_weight = parse_number<double>(key, value);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "device") device = value;
  else if (key == "teacher1_variant") teacher1_variant = value;
  else if (key == "teacher2_variant") teacher2_variant = value;
  else if (key == "teacher1_weights") teacher1_weights = value;
  else if (key == "teacher2_weights") teacher2_weights = value;
  else if (key == "attention") {
    if (value == "student2") attention = AttentionMode::kStudent2;
    else if (value == "none") attention = AttentionMode::kNone;
    else throw Error(ErrorKind::kConfig, "attention must be student2 or none");
  }
  else if (key == "norm_mean") to3(norm_mean);
  else if (key == "norm_std") to3(norm_std);
  else if (key == "image_reduction") {
    if (value == "max") image_reduction = ImageReduction::kMax;
    else if (value == "topk") image_reduction = ImageReduction::kTopKMean;
    else throw Error(ErrorKind::kConfig, "image_reduction must be max or topk");
  }
  else if (key == "topk") topk = parse_number<std::int64_t>(key, value);
  else if (key == "smoothing_sigma") smoothing_sigma = parse_number<double>(key, value);
  else if (key == "perlin_periods") perlin_periods = detail::parse_list<std::int64_t>(key, value);
  else if (key == "mask_threshold") mask_threshold = parse_number<double>(key, value);
  else if (key == "beta_min") beta_min = parse_number<double>(key, value);
  else if (key == "beta_max") beta_max = parse_number<double>(key, value);
  else if (key == "anomaly_ratio") anomaly_ratio = parse_number<double>(key, value);
  else if (key == "mask_retries") mask_retries = parse_number<std::int64_t>(key, value);
  else if (key == "texture_dir") texture_dir = value;
  else throw Error(ErrorKind::kConfig, "unknown key '" + key + "'");
}

inline std::map<std::string, std::string> TrainConfig::to_map() const {
  using detail::num;
  std::map<std::string, std::string> m;
  m["category"] = category;
  m["data_root"] = data_root;
  m["image_size"] = std::to_string(image_size);
  m["stpm_epochs"] = std::to_string(stpm_epochs);
  m["stpm_lr"] = num(stpm_lr);
  m["stpm_momentum"] = num(stpm_momentum);
  m["stpm_weight_decay"] = num(stpm_weight_decay);
  m["batch_size"] = std::to_string(batch_size);
  m["lr_schedule"] = lr_schedule == LrSchedule::kConstant ? "constant" : "cosine";
  m["disc_epochs"] = std::to_string(disc_epochs);
  m["disc_lr"] = num(disc_lr);
  m["disc_batch_size"] = std::to_string(disc_batch_size);
  m["disc_base_width"] = std::to_string(disc_base_width);
  m["disc_depth"] = std::to_string(disc_depth);
  m["focal_gamma"] = num(focal_gamma);
  m["focal_symmetric"] = focal_symmetric ? "true" : "false";
  m["focal_normal_weight"] = num(focal_normal_weight);
  m["seed"] = std::to_string(seed);
  m["device"] = device;
  m["teacher1_variant"] = teacher1_variant;
  m["teacher2_variant"] = teacher2_variant;
  m["teacher1_weights"] = teacher1_weights;
  m["teacher2_weights"] = teacher2_weights;
  m["attention"] = attention == AttentionMode::kStudent2 ? "student2" : "none";
  m["norm_mean"] = detail::join(norm_mean);
  m["norm_std"] = detail::join(norm_std);
  m["image_reduction"] = image_reduction == ImageReduction::kMax ? "max" : "topk";
  m["topk"] = std::to_string(topk);
  m["smoothing_sigma"] = num(smoothing_sigma);
  m["perlin_periods"] = detail::join(perlin_periods);
  m["mask_threshold"] = num(mask_threshold);
  m["beta_min"] = num(beta_min);
  m["beta_max"] = num(beta_max);
  m["anomaly_ratio"] = num(anomaly_ratio);
  m["mask_retries"] = std::to_string(mask_retries);
  m["texture_dir"] = texture_dir;
  return m;
}

inline std::string TrainConfig::fingerprint() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& [key, value] : to_map()) {
    if (key == "data_root" || key == "device" || key == "texture_dir") continue;
    const std::string line = key + "=" + value + "\n";
    hash = fnv1a(line.data(), line.size(), hash);
  }
  return hex64(hash);
}

inline void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw Error(ErrorKind::kConfig, what);
  };
  require(image_size > 0 && image_size % 32 == 0, "image_size must be a positive multiple of 32");
  require(stpm_epochs > 0 && disc_epochs > 0, "epoch counts must be positive");
  require(stpm_lr > 0 && disc_lr > 0, "learning rates must be positive");
  require(stpm_momentum > 0 && stpm_weight_decay > 0, "momentum and weight decay must be positive");
  require(batch_size > 0 && disc_batch_size > 0, "batch sizes must be positive");
  require(disc_base_width > 0 && disc_depth > 0, "discriminator width and depth must be positive");
  require(focal_gamma >= 0, "focal_gamma must be non-negative");
  require(focal_normal_weight > 0, "focal_normal_weight must be positive");
  require(topk > 0, "topk must be positive");
  require(smoothing_sigma >= 0, "smoothing_sigma must be non-negative");
  require(beta_min >= 0.1 && beta_max <= 1.0 && beta_min <= beta_max, "beta range must lie in [0.1, 1]");
  require(anomaly_ratio > 0 && anomaly_ratio < 1, "anomaly_ratio must lie in (0, 1)");
  require(mask_threshold > 0 && mask_threshold < 1, "mask_threshold must lie in (0, 1)");
  require(mask_retries > 0, "mask_retries must be positive");
  for (auto p : perlin_periods) require(p > 0, "perlin periods must be positive");
  for (auto s : norm_std) require(s > 0, "norm_std must be positive");
  require(teacher1_variant == "resnet18", "teacher1_variant must be resnet18 (student2 decodes its 512-channel bottleneck)");
  require(teacher2_variant == "resnet18" || teacher2_variant == "resnet50",
          "teacher2_variant must be resnet18 or resnet50");
}

/// Reads `key = value` lines; `#` starts a comment.
inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open config file " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::kConfig, path + ":" + std::to_string(line_no) + ": expected key = value");
    base.set(std::string_view(line).substr(0, eq), std::string_view(line).substr(eq + 1));
  }
  return base;
}

/// Applies a `key=value` override as given on the command line.
inline void apply_override(TrainConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw Error(ErrorKind::kConfig, "override '" + std::string(assignment) + "' is not key=value");
  config.set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

}  // namespace dstpm
