#pragma once

#include <torch/torch.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "dstpm/anomaly_composition.hpp"
#include "dstpm/config.hpp"
#include "dstpm/data_ingest.hpp"
#include "dstpm/discriminative_head.hpp"
#include "dstpm/distillation_loss.hpp"
#include "dstpm/error.hpp"
#include "dstpm/evaluation_metrics.hpp"
#include "dstpm/feature_extraction.hpp"
#include "dstpm/pseudo_anomaly.hpp"
#include "dstpm/student_networks.hpp"
#include "dstpm/tensor_archive.hpp"

namespace dstpm {

using LogFn = std::function<void(const std::string&)>;

inline void log_to_stderr(const std::string& line) { std::cerr << line << '\n'; }

inline torch::Device resolve_device(const std::string& name) {
  torch::Device device(torch::kCPU);
  try {
    device = torch::Device(name);
  } catch (const std::exception&) {
    throw Error(ErrorKind::kDevice, "unknown device '" + name + "'");
  }
  if (device.is_cuda() && !torch::cuda::is_available())
    throw Error(ErrorKind::kDevice, "CUDA device requested but none is available");
  if (!device.is_cpu() && !device.is_cuda()) throw Error(ErrorKind::kDevice, "unsupported device '" + name + "'");
  return device;
}

enum class Stage { kStpm, kFull };

inline std::string stage_name(Stage s) { return s == Stage::kStpm ? "stpm" : "full"; }

/// Both student-teacher pairs plus the discriminator, with the bookkeeping a
/// checkpoint needs.
struct DualStpmModel {
  TrainConfig config;
  torch::Device device{torch::kCPU};
  TeacherNetwork teacher1;
  TeacherNetwork teacher2;
  Student1Network student1{nullptr};
  Student2Network student2{nullptr};
  DiscriminatorNetwork discriminator{nullptr};
  Stage stage = Stage::kStpm;

  Normalization normalization() const { return Normalization::from(config); }

  void eval() {
    student1->eval();
    student2->eval();
    if (discriminator) discriminator->eval();
  }

  /// Checksum over every stage-1 weight: both teachers, both students,
  /// adapters and attention.
  std::string stpm_checksum() const {
    return parameter_checksum(*teacher1.trunk) + parameter_checksum(*teacher2.trunk) +
           parameter_checksum(*student1) + parameter_checksum(*student2);
  }
};

/// Fresh model: teachers loaded and frozen, students seeded from config.seed.
inline DualStpmModel build_model(const TrainConfig& config) {
  config.validate();
  DualStpmModel model;
  model.config = config;
  model.device = resolve_device(config.device);
  model.teacher1 = load_teacher(parse_variant(config.teacher1_variant), config.teacher1_weights, 4, model.device);
  model.teacher2 = load_teacher(parse_variant(config.teacher2_variant), config.teacher2_weights, 3, model.device);
  const auto t2 = stage_channels(model.teacher2.variant);
  model.student1 = init_student1(config.seed);
  model.student2 = init_student2({t2[0], t2[1], t2[2]}, config.seed + 1);
  model.student1->to(model.device);
  model.student2->to(model.device);
  return model;
}

inline DiscriminatorNetwork init_discriminator(const TrainConfig& config, torch::Device device) {
  torch::manual_seed(config.seed + 2);
  DiscriminatorNetwork net(config.disc_base_width, config.disc_depth);
  net->to(device);
  return net;
}

struct StpmFeatures {
  FeaturePyramid teacher1;  // strides 4, 8, 16, 32
  FeaturePyramid teacher2;  // strides 4, 8, 16
  FeaturePyramid student1;
  Student2Output student2;
  std::vector<AttentionMap> attention;  // strides 16, 8, 4; empty when disabled
};

inline StpmFeatures stpm_forward(DualStpmModel& model, const torch::Tensor& pixels) {
  StpmFeatures f;
  f.teacher1 = extract_pyramid(model.teacher1, pixels, FeaturePyramid::Source::kTeacher1);
  f.teacher2 = extract_pyramid(model.teacher2, pixels, FeaturePyramid::Source::kTeacher2);
  f.student1 = student1_forward(model.student1, pixels);
  if (model.config.attention == AttentionMode::kStudent2) f.attention = model.student2->attention_from(f.teacher2);
  f.student2 = model.student2->forward(f.teacher1.levels[3], f.attention);
  return f;
}

/// (teacher, student) per site; sites 4-6 run from stride 16 down to stride 4.
inline std::vector<FeaturePair> distillation_pairs(const StpmFeatures& f) {
  return {{f.teacher1.levels[0], f.student1.levels[0]},
          {f.teacher1.levels[1], f.student1.levels[1]},
          {f.teacher1.levels[2], f.student1.levels[2]},
          {f.teacher2.levels[2], f.student2.pyramid.levels[2]},
          {f.teacher2.levels[1], f.student2.pyramid.levels[1]},
          {f.teacher2.levels[0], f.student2.pyramid.levels[0]}};
}

inline std::array<AnomalyMap, 6> site_maps(const StpmFeatures& f) {
  const auto pairs = distillation_pairs(f);
  static constexpr std::array<std::int64_t, 6> kStrides{4, 8, 16, 16, 8, 4};
  std::array<AnomalyMap, 6> maps;
  for (std::size_t i = 0; i < 6; ++i)
    maps[i] = site_anomaly_map(pairs[i].first, pairs[i].second, kStrides[i], static_cast<int>(i + 1));
  return maps;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "dstpm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const DualStpmModel& model, const std::filesystem::path& path) {
  TensorArchive archive;
  export_state(*model.student1, "student1/", archive.tensors);
  export_state(*model.student2->decoder, "student2/", archive.tensors);
  export_state(*model.student2->adapters, "adapters/", archive.tensors);
  export_state(*model.student2->attention, "attention/", archive.tensors);
  nlohmann::json groups = {"student1", "student2", "adapters", "attention"};
  if (model.stage == Stage::kFull) {
    export_state(*model.discriminator, "discriminator/", archive.tensors);
    groups.push_back("discriminator");
  }
  auto teacher_meta = [](const TeacherNetwork& t) {
    return nlohmann::json{{"variant", variant_name(t.variant)}, {"weights_source", t.weights_source},
                          {"checksum", t.checksum}};
  };
  archive.metadata = {{"format", kCheckpointFormat},
                      {"version", kCheckpointVersion},
                      {"stage", stage_name(model.stage)},
                      {"groups", groups},
                      {"config", model.config.to_map()},
                      {"fingerprint", model.config.fingerprint()},
                      {"teachers", {{"teacher1", teacher_meta(model.teacher1)}, {"teacher2", teacher_meta(model.teacher2)}}}};
  save_archive(path, archive);
}

/// Config stored in a checkpoint.
inline TrainConfig read_checkpoint_config(const std::filesystem::path& path) {
  const auto archive = load_archive(path, ErrorKind::kIo);
  if (archive.metadata.value("format", "") != kCheckpointFormat)
    throw Error(ErrorKind::kIo, path.string() + " is not a checkpoint");
  TrainConfig config;
  try {
    for (const auto& [key, value] : archive.metadata.at("config").items()) config.set(key, value.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kIo, path.string() + ": malformed config block: " + e.what());
  }
  return config;
}

/// Rebuilds the model stored at `path`. Teachers are reloaded from their
/// recorded sources and must reproduce the recorded checksums. With
/// `requested`, every key that does not shape the stored networks comes from
/// it, and a fingerprint mismatch is reported through `log`.
inline DualStpmModel load_checkpoint(const std::filesystem::path& path, const TrainConfig* requested = nullptr,
                                     const LogFn& log = log_to_stderr) {
  const auto archive = load_archive(path, ErrorKind::kIo);
  const auto& meta = archive.metadata;
  if (meta.value("format", "") != kCheckpointFormat)
    throw Error(ErrorKind::kIo, path.string() + " is not a checkpoint");
  const auto stored = read_checkpoint_config(path);
  const auto stage = meta.value("stage", "");
  if (stage != "stpm" && stage != "full") throw Error(ErrorKind::kIo, path.string() + ": unknown stage '" + stage + "'");

  TrainConfig config = stored;
  if (requested) {
    if (requested->fingerprint() != meta.value("fingerprint", ""))
      log("warning: config fingerprint differs from checkpoint " + path.string());
    config = *requested;
    config.teacher1_variant = stored.teacher1_variant;
    config.teacher2_variant = stored.teacher2_variant;
    config.attention = stored.attention;
    if (stage == "full") {
      config.disc_base_width = stored.disc_base_width;
      config.disc_depth = stored.disc_depth;
    }
  }
  const auto& teachers = meta.at("teachers");
  config.teacher1_weights = teachers.at("teacher1").at("weights_source").get<std::string>();
  config.teacher2_weights = teachers.at("teacher2").at("weights_source").get<std::string>();

  DualStpmModel model = build_model(config);
  if (model.teacher1.checksum != teachers.at("teacher1").at("checksum").get<std::string>() ||
      model.teacher2.checksum != teachers.at("teacher2").at("checksum").get<std::string>())
    throw Error(ErrorKind::kWeights, "teacher weights no longer match checkpoint " + path.string());

  import_state(*model.student1, "student1/", archive.tensors, ErrorKind::kIo);
  import_state(*model.student2->decoder, "student2/", archive.tensors, ErrorKind::kIo);
  import_state(*model.student2->adapters, "adapters/", archive.tensors, ErrorKind::kIo);
  import_state(*model.student2->attention, "attention/", archive.tensors, ErrorKind::kIo);
  model.stage = Stage::kStpm;
  if (stage == "full") {
    model.discriminator = init_discriminator(config, model.device);
    import_state(*model.discriminator, "discriminator/", archive.tensors, ErrorKind::kIo);
    model.stage = Stage::kFull;
  }
  model.eval();
  return model;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::optional<std::filesystem::path> log_dir;  // CSV curves land here
  LogFn log = log_to_stderr;
};

struct StpmTrainLog {
  std::vector<double> epoch_loss;                // mean total loss per epoch
  std::vector<std::array<double, 6>> site_loss;  // mean per-site loss per epoch
  std::string teacher_checksum_before;
  std::string teacher_checksum_after;
};

struct DiscTrainLog {
  std::vector<double> epoch_loss;  // mean focal loss per epoch
  std::string stpm_checksum_before;
  std::string stpm_checksum_after;
};

namespace detail {

inline std::vector<torch::Tensor> load_raw_images(const std::vector<fs::path>& paths, std::int64_t size) {
  std::vector<torch::Tensor> images;
  images.reserve(paths.size());
  for (const auto& p : paths) images.push_back(load_image(p, size));
  return images;
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline double scheduled_lr(const TrainConfig& config, double base, std::int64_t epoch, std::int64_t epochs) {
  if (config.lr_schedule == LrSchedule::kConstant) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::uint64_t words[3] = {a, b, c};
  return fnv1a(words, sizeof(words));
}

inline std::ofstream open_log(const std::optional<fs::path>& dir, const std::string& name, const std::string& header) {
  if (!dir) return {};
  std::error_code ec;
  fs::create_directories(*dir, ec);
  std::ofstream out(*dir / name, std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (*dir / name).string());
  out << header << '\n';
  return out;
}

}  // namespace detail

/// Stage 1: distils both students on normal images with SGD.
inline StpmTrainLog train_stpm_model(DualStpmModel& model, const DatasetIndex& index,
                                     const TrainOptions& options = {}) {
  const auto& config = model.config;
  if (index.train_paths.empty()) throw Error(ErrorKind::kLayout, "no training images");
  const auto norm = model.normalization();
  const auto images = detail::load_raw_images(index.train_paths, config.image_size);

  std::vector<torch::Tensor> params = model.student1->parameters();
  for (auto& p : model.student2->parameters()) params.push_back(p);
  torch::optim::SGD optimizer(params, torch::optim::SGDOptions(config.stpm_lr)
                                          .momentum(config.stpm_momentum)
                                          .weight_decay(config.stpm_weight_decay));
  auto csv = detail::open_log(options.log_dir, "stpm_loss.csv", "epoch,site,value");

  StpmTrainLog log;
  log.teacher_checksum_before = model.teacher1.checksum + model.teacher2.checksum;
  model.student1->train();
  model.student2->train();
  const auto n = images.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (std::int64_t epoch = 0; epoch < config.stpm_epochs; ++epoch) {
    const double lr = detail::scheduled_lr(config, config.stpm_lr, epoch, config.stpm_epochs);
    for (auto& group : optimizer.param_groups())
      static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    const auto order = detail::shuffled(n, detail::mix_seed(config.seed, 1, static_cast<std::uint64_t>(epoch)));
    double total = 0;
    std::array<double, 6> sites{};
    for (std::size_t start = 0; start < n; start += batch) {
      const auto end = std::min(n, start + batch);
      std::vector<torch::Tensor> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(norm.apply(images[order[i]]));
      auto pixels = torch::stack(chunk).to(model.device);
      const auto features = stpm_forward(model, pixels);
      auto loss = total_loss(distillation_pairs(features));
      optimizer.zero_grad();
      loss.total.backward();
      optimizer.step();
      const double weight = static_cast<double>(end - start);
      total += loss.total.item<double>() * weight;
      const auto values = loss.site_values();
      for (std::size_t s = 0; s < 6; ++s) sites[s] += values[s] * weight;
    }
    total /= static_cast<double>(n);
    for (auto& s : sites) s /= static_cast<double>(n);
    log.epoch_loss.push_back(total);
    log.site_loss.push_back(sites);
    if (csv) {
      for (std::size_t s = 0; s < 6; ++s) csv << epoch + 1 << ',' << s + 1 << ',' << sites[s] << '\n';
      csv << epoch + 1 << ",total," << total << '\n';
    }
    options.log("stpm epoch " + std::to_string(epoch + 1) + "/" + std::to_string(config.stpm_epochs) +
                " loss " + std::to_string(total));
  }
  const auto probe = std::min<std::size_t>(10, log.epoch_loss.size());
  if (probe >= 2 && log.epoch_loss[probe - 1] >= log.epoch_loss.front())
    options.log("warning: STPM loss did not decrease over the first " + std::to_string(probe) + " epochs");

  model.eval();
  log.teacher_checksum_after = parameter_checksum(*model.teacher1.trunk) + parameter_checksum(*model.teacher2.trunk);
  if (log.teacher_checksum_after != log.teacher_checksum_before)
    throw Error(ErrorKind::kWeights, "teacher weights changed during training");
  model.stage = Stage::kStpm;
  return log;
}

struct StpmTrainResult {
  DualStpmModel model;
  StpmTrainLog log;
};

inline StpmTrainResult train_stpm(const TrainConfig& config, const DatasetIndex& index,
                                  const TrainOptions& options = {}) {
  StpmTrainResult result{build_model(config), {}};
  result.log = train_stpm_model(result.model, index, options);
  return result;
}

/// The three same-resolution sums (strides 4, 8, 16) for a normalized batch,
/// computed without gradients.
inline std::array<AnomalyMap, 3> stpm_pair_maps(DualStpmModel& model, const torch::Tensor& pixels) {
  torch::NoGradGuard guard;
  model.student1->eval();
  model.student2->eval();
  return pair_sums(site_maps(stpm_forward(model, pixels)));
}

/// Pseudo-anomaly batch for discriminator training: the i-th sample of an
/// epoch is anomalous on the `anomaly_ratio` schedule (alternating at 0.5).
struct SyntheticBatch {
  torch::Tensor pixels;  // normalized B x 3 x H x W
  torch::Tensor masks;   // B x H x W float {0,1}
};

inline SyntheticBatch make_synthetic_batch(const std::vector<torch::Tensor>& sources,
                                           const std::vector<std::size_t>& picks, std::uint64_t base_seed,
                                           std::size_t first_position, double anomaly_ratio,
                                           const PseudoAnomalyParams& params, const Normalization& norm) {
  std::vector<torch::Tensor> images, masks;
  for (std::size_t k = 0; k < picks.size(); ++k) {
    const auto pos = static_cast<double>(first_position + k);
    const bool anomalous = std::floor((pos + 1) * anomaly_ratio) > std::floor(pos * anomaly_ratio);
    const auto sample = synthesize(sources[picks[k]], detail::mix_seed(base_seed, first_position + k), params, anomalous);
    images.push_back(norm.apply(sample.image));
    masks.push_back(sample.mask.to(torch::kFloat32));
  }
  return {torch::stack(images), torch::stack(masks)};
}

/// Stage 2: trains the discriminator on pseudo-anomalies seen through the
/// frozen stage-1 networks.
inline DiscTrainLog train_discriminator_model(DualStpmModel& model, const DatasetIndex& index,
                                              const TrainOptions& options = {}) {
  const auto& config = model.config;
  if (index.train_paths.empty()) throw Error(ErrorKind::kLayout, "no training images");
  const auto norm = model.normalization();
  const auto params = PseudoAnomalyParams::from(config);
  const auto images = detail::load_raw_images(index.train_paths, config.image_size);
  const FocalLossConfig focal{config.focal_gamma, config.focal_symmetric, config.focal_normal_weight};

  DiscTrainLog log;
  log.stpm_checksum_before = model.stpm_checksum();
  model.discriminator = init_discriminator(config, model.device);
  torch::optim::Adam optimizer(model.discriminator->parameters(), torch::optim::AdamOptions(config.disc_lr));
  auto csv = detail::open_log(options.log_dir, "disc_loss.csv", "epoch,focal_loss");

  const auto n = images.size();
  const auto batch = static_cast<std::size_t>(config.disc_batch_size);
  for (std::int64_t epoch = 0; epoch < config.disc_epochs; ++epoch) {
    const double lr = detail::scheduled_lr(config, config.disc_lr, epoch, config.disc_epochs);
    for (auto& group : optimizer.param_groups())
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    const auto order = detail::shuffled(n, detail::mix_seed(config.seed, 2, static_cast<std::uint64_t>(epoch)));
    const auto epoch_seed = detail::mix_seed(config.seed, 3, static_cast<std::uint64_t>(epoch));
    double total = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const auto end = std::min(n, start + batch);
      const std::vector<std::size_t> picks(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto synthetic = make_synthetic_batch(images, picks, epoch_seed, start, config.anomaly_ratio, params, norm);
      const auto pair_maps = stpm_pair_maps(model, synthetic.pixels.to(model.device));
      model.discriminator->train();
      auto stacked = stack_inputs(pair_maps, config.image_size);
      auto probability = discriminator_forward(model.discriminator, stacked).values;
      auto loss = focal_loss(probability, synthetic.masks.to(model.device), focal);
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      total += loss.item<double>() * static_cast<double>(end - start);
    }
    total /= static_cast<double>(n);
    log.epoch_loss.push_back(total);
    if (csv) csv << epoch + 1 << ',' << total << '\n';
    options.log("disc epoch " + std::to_string(epoch + 1) + "/" + std::to_string(config.disc_epochs) +
                " focal " + std::to_string(total));
  }
  model.discriminator->eval();
  log.stpm_checksum_after = model.stpm_checksum();
  if (log.stpm_checksum_after != log.stpm_checksum_before)
    throw Error(ErrorKind::kWeights, "stage-1 weights changed during discriminator training");
  model.stage = Stage::kFull;
  return log;
}

inline DiscTrainLog train_discriminator(DualStpmModel& model, const DatasetIndex& index,
                                        const TrainOptions& options = {}) {
  if (model.stage != Stage::kStpm)
    throw Error(ErrorKind::kStage, "discriminator training needs a checkpoint at stage stpm");
  return train_discriminator_model(model, index, options);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class EvalMode { kStpmOnly, kDiscriminatorOnly, kFull };

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "stpm-only") return EvalMode::kStpmOnly;
  if (s == "discriminator-only") return EvalMode::kDiscriminatorOnly;
  if (s == "full") return EvalMode::kFull;
  throw Error(ErrorKind::kConfig, "mode must be stpm-only, discriminator-only or full");
}

inline std::string eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::kStpmOnly: return "stpm-only";
    case EvalMode::kDiscriminatorOnly: return "discriminator-only";
    case EvalMode::kFull: return "full";
  }
  return "full";
}

/// Full-resolution maps (B x H x W) for a normalized batch.
inline torch::Tensor anomaly_maps(DualStpmModel& model, const torch::Tensor& pixels, EvalMode mode) {
  if (mode != EvalMode::kStpmOnly && (model.stage != Stage::kFull || !model.discriminator))
    throw Error(ErrorKind::kStage, "mode " + eval_mode_name(mode) + " needs a full-stage checkpoint");
  torch::NoGradGuard guard;
  model.eval();
  const auto maps = site_maps(stpm_forward(model, pixels));
  const auto size = pixels.size(2);
  torch::Tensor out;
  if (mode == EvalMode::kStpmOnly) {
    out = compose_stpm(maps, size).values;
  } else {
    const auto disc = discriminator_forward(model.discriminator, stack_inputs(pair_sums(maps), size));
    out = mode == EvalMode::kFull ? compose_final(maps, disc).values : disc.values;
  }
  return gaussian_smooth(out, model.config.smoothing_sigma);
}

struct ImageScore {
  std::string path;
  double score = 0;
  int label = 0;
};

struct EvalReport {
  std::string category;
  std::string mode;
  double pixel_auroc = 0;
  double image_auroc = 0;
  double pro = 0;
  std::vector<ImageScore> per_image_scores;
  std::vector<ProPoint> threshold_curve;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["category"] = category;
    j["mode"] = mode;
    j["pixel_auroc"] = pixel_auroc;
    j["image_auroc"] = image_auroc;
    j["pro"] = pro;
    j["per_image_scores"] = nlohmann::json::array();
    for (const auto& s : per_image_scores)
      j["per_image_scores"].push_back({{"path", s.path}, {"score", s.score}, {"label", s.label}});
    j["threshold_curve"] = nlohmann::json::array();
    for (const auto& p : threshold_curve)
      j["threshold_curve"].push_back({std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json(nullptr),
                                      p.fpr, p.overlap});
    return j;
  }
};

inline ScoreGrid to_score_grid(const torch::Tensor& map) {
  auto cpu = map.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  const auto* data = cpu.data_ptr<float>();
  return ScoreGrid(static_cast<std::size_t>(cpu.size(0)), static_cast<std::size_t>(cpu.size(1)),
                   std::vector<float>(data, data + cpu.numel()));
}

inline MaskGrid to_mask_grid(const torch::Tensor& mask) {
  auto cpu = mask.detach().to(torch::kCPU, torch::kUInt8).contiguous();
  const auto* data = cpu.data_ptr<std::uint8_t>();
  return MaskGrid(static_cast<std::size_t>(cpu.size(0)), static_cast<std::size_t>(cpu.size(1)),
                  std::vector<std::uint8_t>(data, data + cpu.numel()));
}

/// Metrics over precomputed maps and masks, shared by evaluate() and tests.
inline EvalReport evaluate_maps(const std::vector<ScoreGrid>& maps, const std::vector<MaskGrid>& masks,
                                const std::vector<double>& image_scores, const std::vector<int>& image_labels,
                                const std::vector<std::string>& paths, double fpr_limit = 0.3) {
  EvalReport report;
  report.pixel_auroc = pixel_auroc(maps, masks);
  const auto pro = pro_curve(maps, masks, fpr_limit);
  report.pro = pro.score;
  // Keep the reported curve to at most 512 evenly spaced points.
  const std::size_t stride = std::max<std::size_t>(1, pro.curve.size() / 512);
  for (std::size_t i = 0; i < pro.curve.size(); i += stride) report.threshold_curve.push_back(pro.curve[i]);
  if (report.threshold_curve.back().fpr != pro.curve.back().fpr) report.threshold_curve.push_back(pro.curve.back());
  std::vector<std::uint8_t> labels(image_labels.begin(), image_labels.end());
  report.image_auroc = roc_auc(std::span<const double>(image_scores), std::span<const std::uint8_t>(labels));
  for (std::size_t i = 0; i < image_scores.size(); ++i)
    report.per_image_scores.push_back({paths[i], image_scores[i], image_labels[i]});
  return report;
}

struct EvalOutputs {
  EvalReport report;
  std::vector<torch::Tensor> maps;  // H x W per test item
};

inline EvalOutputs evaluate_with_maps(DualStpmModel& model, const DatasetIndex& index, EvalMode mode,
                                      std::int64_t batch_size = 8) {
  if (index.test_items.empty()) throw Error(ErrorKind::kLayout, "no test images");
  const auto norm = model.normalization();
  const auto size = model.config.image_size;
  EvalOutputs out;
  std::vector<ScoreGrid> grids;
  std::vector<MaskGrid> masks;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::string> paths;
  for (std::size_t start = 0; start < index.test_items.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(index.test_items.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<torch::Tensor> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(norm.apply(load_image(index.test_items[i].image, size)));
    const auto maps = anomaly_maps(model, torch::stack(chunk).to(model.device), mode).to(torch::kCPU);
    const auto batch_scores = image_score(AnomalyMap{maps}, model.config.image_reduction, model.config.topk);
    for (std::size_t i = start; i < end; ++i) {
      const auto& item = index.test_items[i];
      const auto map = maps[static_cast<std::int64_t>(i - start)];
      out.maps.push_back(map);
      grids.push_back(to_score_grid(map));
      masks.push_back(to_mask_grid(item_mask(item, size)));
      scores.push_back(batch_scores[static_cast<std::int64_t>(i - start)].item<double>());
      labels.push_back(item.anomalous() ? 1 : 0);
      paths.push_back(item.image.string());
    }
  }
  out.report = evaluate_maps(grids, masks, scores, labels, paths);
  out.report.category = index.category;
  out.report.mode = eval_mode_name(mode);
  return out;
}

inline EvalReport evaluate(DualStpmModel& model, const DatasetIndex& index, EvalMode mode) {
  return evaluate_with_maps(model, index, mode).report;
}

/// One CSV row per report, columns mirroring the published tables.
inline void write_summary_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << "category,mode,pixel_auroc,pro,image_auroc\n";
  double px = 0, pro = 0, img = 0;
  for (const auto& r : reports) {
    out << r.category << ',' << r.mode << ',' << r.pixel_auroc << ',' << r.pro << ',' << r.image_auroc << '\n';
    px += r.pixel_auroc;
    pro += r.pro;
    img += r.image_auroc;
  }
  if (reports.size() > 1) {
    const auto n = static_cast<double>(reports.size());
    out << "mean," << reports.front().mode << ',' << px / n << ',' << pro / n << ',' << img / n << '\n';
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (!path.parent_path().empty()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline std::string export_stem(const TestItem& item) {
  return item.defect_type + "_" + item.image.stem().string();
}

/// Per test image: `<stem>_map.f32` (raw row-major float32), `<stem>_heatmap.png`
/// (per-image min-max normalized, JET colormap) and `<stem>_overlay.png` at the
/// source image's own dimensions. `summary.json` holds each image's score,
/// normalization scale and map dimensions.
inline std::vector<std::filesystem::path> export_heatmaps(DualStpmModel& model, const DatasetIndex& index,
                                                          const std::filesystem::path& out_dir, EvalMode mode) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw Error(ErrorKind::kIo, "cannot create output directory " + out_dir.string());
  {
    const auto probe = out_dir / ".write_probe";
    std::ofstream test(probe);
    if (!test) throw Error(ErrorKind::kIo, "output directory not writable: " + out_dir.string());
    test.close();
    std::filesystem::remove(probe, ec);
  }

  auto outputs = evaluate_with_maps(model, index, mode);
  std::vector<std::filesystem::path> written;
  nlohmann::json summary;
  summary["category"] = index.category;
  summary["mode"] = eval_mode_name(mode);
  summary["pixel_auroc"] = outputs.report.pixel_auroc;
  summary["image_auroc"] = outputs.report.image_auroc;
  summary["pro"] = outputs.report.pro;
  summary["images"] = nlohmann::json::array();

  for (std::size_t i = 0; i < index.test_items.size(); ++i) {
    const auto& item = index.test_items[i];
    const auto stem = export_stem(item);
    auto map = outputs.maps[i].to(torch::kFloat32).contiguous();
    const auto h = map.size(0), w = map.size(1);

    const auto raw_path = out_dir / (stem + "_map.f32");
    {
      std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
      if (!raw) throw Error(ErrorKind::kIo, "cannot write " + raw_path.string());
      raw.write(static_cast<const char*>(map.data_ptr()), static_cast<std::streamsize>(map.numel() * sizeof(float)));
    }
    written.push_back(raw_path);

    const double lo = map.min().item<double>();
    const double hi = map.max().item<double>();
    const double scale = hi > lo ? hi - lo : 1.0;
    auto normalized = ((map - lo) / scale * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
    cv::Mat gray(static_cast<int>(h), static_cast<int>(w), CV_8UC1, normalized.data_ptr());
    cv::Mat heat;
    cv::applyColorMap(gray, heat, cv::COLORMAP_JET);
    const auto heat_path = out_dir / (stem + "_heatmap.png");
    write_png(heat_path, heat);
    written.push_back(heat_path);

    cv::Mat source = cv::imread(item.image.string(), cv::IMREAD_COLOR);
    if (source.empty()) throw Error(ErrorKind::kDecode, "cannot decode " + item.image.string());
    cv::Mat heat_full, overlay;
    cv::resize(heat, heat_full, source.size(), 0, 0, cv::INTER_LINEAR);
    cv::addWeighted(source, 0.5, heat_full, 0.5, 0.0, overlay);
    const auto overlay_path = out_dir / (stem + "_overlay.png");
    write_png(overlay_path, overlay);
    written.push_back(overlay_path);

    const auto& s = outputs.report.per_image_scores[i];
    summary["images"].push_back({{"image", item.image.string()},
                                 {"defect_type", item.defect_type},
                                 {"label", s.label},
                                 {"score", s.score},
                                 {"map", raw_path.filename().string()},
                                 {"height", h},
                                 {"width", w},
                                 {"heatmap_min", lo},
                                 {"heatmap_max", hi}});
  }
  const auto summary_path = out_dir / "summary.json";
  write_json(summary_path, summary);
  written.push_back(summary_path);
  return written;
}

/// Writes `count` pseudo-anomaly (image, mask) PNG pairs drawn from the
/// training images.
inline std::vector<std::filesystem::path> synth_preview(const TrainConfig& config, const DatasetIndex& index,
                                                        const std::filesystem::path& out_dir, std::size_t count) {
  const auto params = PseudoAnomalyParams::from(config);
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& path = index.train_paths[i % index.train_paths.size()];
    const auto sample = synthesize(load_image(path, config.image_size), detail::mix_seed(config.seed, 4, i), params);
    char name[32];
    std::snprintf(name, sizeof(name), "%04zu", i);
    const auto image_path = out_dir / (std::string(name) + "_image.png");
    const auto mask_path = out_dir / (std::string(name) + "_mask.png");
    write_png(image_path, to_bgr8(sample.image));
    write_png(mask_path, mask_to_gray8(sample.mask));
    written.push_back(image_path);
    written.push_back(mask_path);
  }
  return written;
}

}  // namespace dstpm
