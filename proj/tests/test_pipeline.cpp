#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "dstpm/pipeline.hpp"
#include "support/expect_error.hpp"
#include "support/fixture.hpp"

using namespace dstpm;
using test_support::TempDir;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TrainOptions quiet() {
  TrainOptions o;
  o.log = [](const std::string&) {};
  return o;
}

}  // namespace

// One smoke-trained model shared by the suite: stage 1, then the discriminator.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("dstpm-pipeline");
    test_support::write_fixture(dir_->path());
    config_ = test_support::smoke_config(dir_->path());
    index_ = scan_mvtec(dir_->path(), "widget", config_.image_size);
    auto options = quiet();
    options.log_dir = dir_->path() / "logs";
    auto result = train_stpm(config_, index_, options);
    stpm_log_ = result.log;
    save_checkpoint(result.model, stpm_path());
    disc_log_ = train_discriminator(result.model, index_, options);
    save_checkpoint(result.model, full_path());
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static fs::path stpm_path() { return dir_->path() / "stpm.ckpt"; }
  static fs::path full_path() { return dir_->path() / "full.ckpt"; }

  static TempDir* dir_;
  static TrainConfig config_;
  static DatasetIndex index_;
  static StpmTrainLog stpm_log_;
  static DiscTrainLog disc_log_;
};

TempDir* Pipeline::dir_ = nullptr;
TrainConfig Pipeline::config_;
DatasetIndex Pipeline::index_;
StpmTrainLog Pipeline::stpm_log_;
DiscTrainLog Pipeline::disc_log_;

TEST_F(Pipeline, StpmLossDecreasesAndTeachersStayFrozen) {
  ASSERT_EQ(stpm_log_.epoch_loss.size(), static_cast<std::size_t>(config_.stpm_epochs));
  EXPECT_GT(stpm_log_.epoch_loss[0], stpm_log_.epoch_loss[1]);
  EXPECT_EQ(stpm_log_.teacher_checksum_before, stpm_log_.teacher_checksum_after);
  for (const auto& sites : stpm_log_.site_loss)
    for (double v : sites) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 2.0);
    }
  std::ifstream csv(dir_->path() / "logs" / "stpm_loss.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "epoch,site,value");
}

TEST_F(Pipeline, DiscriminatorLeavesStageOneUntouched) {
  EXPECT_EQ(disc_log_.stpm_checksum_before, disc_log_.stpm_checksum_after);
  ASSERT_EQ(disc_log_.epoch_loss.size(), static_cast<std::size_t>(config_.disc_epochs));
  EXPECT_GT(disc_log_.epoch_loss.front(), disc_log_.epoch_loss.back());
  const auto stage1 = load_checkpoint(stpm_path());
  const auto full = load_checkpoint(full_path());
  EXPECT_EQ(stage1.stpm_checksum(), full.stpm_checksum());
}

TEST_F(Pipeline, DiscriminatorSeparatesPseudoAnomalies) {
  auto model = load_checkpoint(full_path());
  const auto params = PseudoAnomalyParams::from(config_);
  const auto norm = model.normalization();
  double inside = 0, outside = 0, n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < index_.train_paths.size(); ++i) {
    const auto sample = synthesize(load_image(index_.train_paths[i], config_.image_size), 1000 + i, params);
    const auto pairs = stpm_pair_maps(model, norm.apply(sample.image).unsqueeze(0));
    torch::NoGradGuard guard;
    const auto p = discriminator_forward(model.discriminator, stack_inputs(pairs, config_.image_size)).values[0];
    const auto m = sample.mask.to(torch::kBool);
    inside += p.masked_select(m).sum().item<double>();
    outside += p.masked_select(~m).sum().item<double>();
    n_in += m.sum().item<double>();
    n_out += (~m).sum().item<double>();
  }
  EXPECT_GT(inside / n_in, outside / n_out);
}

TEST_F(Pipeline, AttentionRespondsToPseudoAnomalies) {
  auto model = load_checkpoint(full_path());
  const auto source = load_image(index_.train_paths[0], config_.image_size);
  const auto sample = synthesize(source, 77, PseudoAnomalyParams::from(config_));
  const auto norm = model.normalization();
  torch::NoGradGuard guard;
  const auto a = stpm_forward(model, norm.apply(source).unsqueeze(0)).attention;
  const auto b = stpm_forward(model, norm.apply(sample.image).unsqueeze(0)).attention;
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_GT((a[i].values - b[i].values).abs().mean().item<double>(), 0.0);
}

TEST_F(Pipeline, SeededTrainingIsReproducible) {
  auto config = config_;
  config.stpm_epochs = 1;
  const auto a = train_stpm(config, index_, quiet());
  const auto b = train_stpm(config, index_, quiet());
  EXPECT_EQ(a.model.stpm_checksum(), b.model.stpm_checksum());
  EXPECT_EQ(a.log.epoch_loss, b.log.epoch_loss);
}

TEST_F(Pipeline, CheckpointRoundTripReproducesScoresExactly) {
  auto model = load_checkpoint(full_path());
  const auto first = evaluate_with_maps(model, index_, EvalMode::kFull);
  save_checkpoint(model, dir_->path() / "copy.ckpt");
  auto reloaded = load_checkpoint(dir_->path() / "copy.ckpt");
  const auto second = evaluate_with_maps(reloaded, index_, EvalMode::kFull);
  ASSERT_EQ(first.maps.size(), second.maps.size());
  for (std::size_t i = 0; i < first.maps.size(); ++i) EXPECT_TRUE(torch::equal(first.maps[i], second.maps[i]));
  EXPECT_EQ(first.report.to_json(), second.report.to_json());
}

TEST_F(Pipeline, EvaluationModesAndStages) {
  auto stage1 = load_checkpoint(stpm_path());
  EXPECT_EQ(stage1.stage, Stage::kStpm);
  EXPECT_DSTPM_ERROR(evaluate(stage1, index_, EvalMode::kFull), ErrorKind::kStage);
  EXPECT_DSTPM_ERROR(evaluate(stage1, index_, EvalMode::kDiscriminatorOnly), ErrorKind::kStage);
  const auto report = evaluate(stage1, index_, EvalMode::kStpmOnly);
  EXPECT_EQ(report.per_image_scores.size(), index_.test_items.size());
  for (double v : {report.pixel_auroc, report.image_auroc, report.pro}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const auto again = evaluate(stage1, index_, EvalMode::kStpmOnly);
  EXPECT_EQ(report.to_json(), again.to_json());

  auto full = load_checkpoint(full_path());
  for (auto mode : {EvalMode::kFull, EvalMode::kDiscriminatorOnly}) EXPECT_NO_THROW(evaluate(full, index_, mode));
}

TEST_F(Pipeline, UnitDiscriminatorReducesFullModeToStpmOnly) {
  auto model = load_checkpoint(full_path());
  {
    torch::NoGradGuard guard;
    model.discriminator->head->weight.zero_();
    model.discriminator->head->bias.fill_(100.0);
  }
  const auto full = evaluate_with_maps(model, index_, EvalMode::kFull);
  const auto stpm = evaluate_with_maps(model, index_, EvalMode::kStpmOnly);
  for (std::size_t i = 0; i < full.maps.size(); ++i) EXPECT_TRUE(torch::equal(full.maps[i], stpm.maps[i]));
  EXPECT_EQ(full.report.pixel_auroc, stpm.report.pixel_auroc);
  EXPECT_EQ(full.report.pro, stpm.report.pro);
}

TEST_F(Pipeline, FingerprintMismatchWarns) {
  auto requested = config_;
  requested.stpm_epochs = 42;
  std::vector<std::string> lines;
  load_checkpoint(full_path(), &requested, [&](const std::string& l) { lines.push_back(l); });
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_NE(lines[0].find("fingerprint"), std::string::npos);
  lines.clear();
  load_checkpoint(full_path(), &config_, [&](const std::string& l) { lines.push_back(l); });
  EXPECT_TRUE(lines.empty());
}

TEST_F(Pipeline, CorruptCheckpointIsIoError) {
  std::ofstream(dir_->path() / "bad.ckpt") << "DSTPMARC but not really";
  EXPECT_DSTPM_ERROR(load_checkpoint(dir_->path() / "bad.ckpt"), ErrorKind::kIo);
  EXPECT_DSTPM_ERROR(load_checkpoint(dir_->path() / "absent.ckpt"), ErrorKind::kIo);
}

TEST_F(Pipeline, ExportWritesThreeFilesPerImagePlusSummary) {
  auto model = load_checkpoint(full_path());
  const auto out = dir_->path() / "export";
  const auto files = export_heatmaps(model, index_, out, EvalMode::kFull);
  EXPECT_EQ(files.size(), 3 * index_.test_items.size() + 1);
  std::size_t on_disk = 0;
  for (const auto& entry : fs::directory_iterator(out)) on_disk += entry.is_regular_file();
  EXPECT_EQ(on_disk, files.size());

  std::map<fs::path, std::string> raw;
  for (const auto& f : files)
    if (f.extension() == ".f32") {
      raw[f] = read_bytes(f);
      EXPECT_EQ(raw[f].size(), static_cast<std::size_t>(config_.image_size * config_.image_size * 4));
    }
  export_heatmaps(model, index_, out, EvalMode::kFull);
  for (const auto& [f, bytes] : raw) EXPECT_EQ(read_bytes(f), bytes);

  for (const auto& item : index_.test_items) {
    const auto overlay = cv::imread((out / (export_stem(item) + "_overlay.png")).string());
    const auto source = cv::imread(item.image.string());
    ASSERT_FALSE(overlay.empty());
    EXPECT_EQ(overlay.size(), source.size());
  }
  const auto summary = nlohmann::json::parse(read_bytes(out / "summary.json"));
  EXPECT_EQ(summary["images"].size(), index_.test_items.size());
}

TEST_F(Pipeline, ExportToUnwritableDirectoryIsIoError) {
  auto model = load_checkpoint(full_path());
  std::ofstream(dir_->path() / "plain_file") << "x";
  EXPECT_DSTPM_ERROR(export_heatmaps(model, index_, dir_->path() / "plain_file" / "sub", EvalMode::kFull),
                     ErrorKind::kIo);
}

TEST_F(Pipeline, DiscriminatorTrainingNeedsStageOne) {
  auto full = load_checkpoint(full_path());
  EXPECT_DSTPM_ERROR(train_discriminator(full, index_, quiet()), ErrorKind::kStage);
}

TEST_F(Pipeline, SynthPreviewWritesPairs) {
  const auto files = synth_preview(config_, index_, dir_->path() / "preview", 4);
  ASSERT_EQ(files.size(), 8u);
  const auto mask = cv::imread(files[1].string(), cv::IMREAD_GRAYSCALE);
  EXPECT_EQ(mask.rows, config_.image_size);
  EXPECT_GT(cv::countNonZero(mask), 0);
}

TEST(EvaluateMaps, PerfectMapsScoreOne) {
  std::vector<ScoreGrid> maps;
  std::vector<MaskGrid> masks;
  MaskGrid mask(8, 8, 0);
  mask(2, 3) = mask(2, 4) = mask(3, 3) = 1;
  masks.push_back(mask);
  masks.emplace_back(8, 8, 0);
  for (const auto& m : masks) {
    ScoreGrid s(8, 8);
    for (std::size_t i = 0; i < m.size(); ++i) s.data[i] = m.data[i];
    maps.push_back(s);
  }
  const auto report = evaluate_maps(maps, masks, {1.0, 0.0}, {1, 0}, {"a.png", "b.png"});
  EXPECT_DOUBLE_EQ(report.pixel_auroc, 1.0);
  EXPECT_DOUBLE_EQ(report.image_auroc, 1.0);
  EXPECT_NEAR(report.pro, 1.0, 1e-12);
}

TEST(BuildModel, UnavailableDeviceIsDeviceError) {
  if (torch::cuda::is_available()) GTEST_SKIP() << "CUDA present";
  TrainConfig config;
  config.teacher1_weights = "random:1";
  config.teacher2_weights = "random:2";
  config.device = "cuda";
  EXPECT_DSTPM_ERROR(build_model(config), ErrorKind::kDevice);
  config.device = "toaster";
  EXPECT_DSTPM_ERROR(build_model(config), ErrorKind::kDevice);
}

TEST(EvalMode, ParsesNames) {
  EXPECT_EQ(parse_eval_mode("stpm-only"), EvalMode::kStpmOnly);
  EXPECT_DSTPM_ERROR(parse_eval_mode("everything"), ErrorKind::kConfig);
}
