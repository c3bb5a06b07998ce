#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "dstpm/pipeline.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_root;
  std::string category;
  std::string device;
  std::string texture_dir;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "key = value config file");
  cmd->add_option("--set", opts.overrides, "override a config key (key=value), repeatable");
  cmd->add_option("--data-root", opts.data_root, "MVTec-style dataset root");
  cmd->add_option("--category", opts.category, "category directory under the data root");
  cmd->add_option("--device", opts.device, "cpu or cuda[:N]");
  cmd->add_option("--texture-dir", opts.texture_dir, "external anomaly-source images");
}

// Layers the config file, --set overrides and flags on top of `base`.
dstpm::TrainConfig resolve_config(const CommonOptions& opts, dstpm::TrainConfig base = {}) {
  dstpm::TrainConfig config = opts.config_path.empty() ? base : dstpm::load_config(opts.config_path, base);
  for (const auto& o : opts.overrides) dstpm::apply_override(config, o);
  if (!opts.data_root.empty()) config.data_root = opts.data_root;
  if (!opts.category.empty()) config.category = opts.category;
  if (!opts.device.empty()) config.device = opts.device;
  if (!opts.texture_dir.empty()) config.texture_dir = opts.texture_dir;
  config.validate();
  return config;
}

dstpm::DatasetIndex scan(const dstpm::TrainConfig& config) {
  if (config.data_root.empty() || config.category.empty())
    throw dstpm::Error(dstpm::ErrorKind::kConfig, "data_root and category are required");
  return dstpm::scan_mvtec(config.data_root, config.category, config.image_size);
}

// The stored config is the base; command-line settings layer on top.
dstpm::DualStpmModel load_for(const CommonOptions& opts, const std::string& checkpoint) {
  const auto requested = resolve_config(opts, dstpm::read_checkpoint_config(checkpoint));
  return dstpm::load_checkpoint(checkpoint, &requested);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual student-teacher anomaly detection with a discriminative head"};
  app.require_subcommand(1);

  CommonOptions stpm_opts, disc_opts, eval_opts, export_opts, synth_opts;
  std::string stpm_out, stpm_log_dir;
  auto* train_stpm = app.add_subcommand("train-stpm", "train both student networks");
  add_common(train_stpm, stpm_opts);
  train_stpm->add_option("--out", stpm_out, "checkpoint to write")->required();
  train_stpm->add_option("--log-dir", stpm_log_dir, "directory for per-epoch loss CSVs");

  std::string disc_in, disc_out, disc_log_dir;
  auto* train_disc = app.add_subcommand("train-disc", "train the discriminator on a stage-1 checkpoint");
  add_common(train_disc, disc_opts);
  train_disc->add_option("--checkpoint", disc_in, "stage-1 checkpoint")->required();
  train_disc->add_option("--out", disc_out, "checkpoint to write")->required();
  train_disc->add_option("--log-dir", disc_log_dir, "directory for per-epoch loss CSVs");

  std::string eval_ckpt, eval_mode = "full", eval_out, eval_csv;
  auto* eval = app.add_subcommand("eval", "score the test split");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--mode", eval_mode, "stpm-only, discriminator-only or full");
  eval->add_option("--out", eval_out, "JSON report path");
  eval->add_option("--csv", eval_csv, "summary CSV path");

  std::string export_ckpt, export_mode = "full", export_out;
  auto* exp = app.add_subcommand("export", "write anomaly maps, heatmaps and overlays");
  add_common(exp, export_opts);
  exp->add_option("--checkpoint", export_ckpt, "checkpoint to use")->required();
  exp->add_option("--mode", export_mode, "stpm-only, discriminator-only or full");
  exp->add_option("--out", export_out, "output directory")->required();

  std::string synth_out;
  std::size_t synth_count = 16;
  auto* synth = app.add_subcommand("synth-preview", "dump pseudo-anomaly image/mask pairs");
  add_common(synth, synth_opts);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train_stpm) {
      const auto config = resolve_config(stpm_opts);
      const auto index = scan(config);
      dstpm::TrainOptions options;
      if (!stpm_log_dir.empty()) options.log_dir = stpm_log_dir;
      auto result = dstpm::train_stpm(config, index, options);
      dstpm::save_checkpoint(result.model, stpm_out);
      std::cout << "wrote " << stpm_out << '\n';
    } else if (*train_disc) {
      auto model = load_for(disc_opts, disc_in);
      if (model.stage != dstpm::Stage::kStpm)
        throw dstpm::Error(dstpm::ErrorKind::kStage, "train-disc needs a checkpoint at stage stpm");
      const auto index = scan(model.config);
      dstpm::TrainOptions options;
      if (!disc_log_dir.empty()) options.log_dir = disc_log_dir;
      dstpm::train_discriminator(model, index, options);
      dstpm::save_checkpoint(model, disc_out);
      std::cout << "wrote " << disc_out << '\n';
    } else if (*eval) {
      auto model = load_for(eval_opts, eval_ckpt);
      const auto index = scan(model.config);
      const auto report = dstpm::evaluate(model, index, dstpm::parse_eval_mode(eval_mode));
      if (!eval_out.empty()) dstpm::write_json(eval_out, report.to_json());
      if (!eval_csv.empty()) dstpm::write_summary_csv(eval_csv, {report});
      std::cout << report.category << " " << report.mode << " pixel_auroc " << report.pixel_auroc << " pro "
                << report.pro << " image_auroc " << report.image_auroc << '\n';
    } else if (*exp) {
      auto model = load_for(export_opts, export_ckpt);
      const auto index = scan(model.config);
      const auto files = dstpm::export_heatmaps(model, index, export_out, dstpm::parse_eval_mode(export_mode));
      std::cout << "wrote " << files.size() << " files to " << export_out << '\n';
    } else if (*synth) {
      const auto config = resolve_config(synth_opts);
      const auto index = scan(config);
      const auto files = dstpm::synth_preview(config, index, synth_out, synth_count);
      std::cout << "wrote " << files.size() << " files to " << synth_out << '\n';
    }
  } catch (const dstpm::Error& e) {
    std::cerr << e.what() << '\n';
    return dstpm::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
