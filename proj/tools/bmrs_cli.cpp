// bmrs: train / prune-post / sweep-p1 / verify front end.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "bmrs/errors.hpp"
#include "bmrs/experiment.hpp"
#include "bmrs/verify.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> criterion;
  std::optional<double> p1;
  std::optional<double> p2;
  std::optional<double> threshold;
  std::optional<std::string> data_dir;
  std::optional<std::string> out;
  std::optional<std::string> model;
  std::optional<std::string> dataset;
  std::optional<int> epochs;
  std::optional<int> fine_tune_epochs;
  std::optional<double> kl_scale;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON config file");
  cmd->add_option("--seed", o.seed);
  cmd->add_option("--criterion", o.criterion, "none|bmrs_n|bmrs_u|snr|mean_theta|l2");
  cmd->add_option("--p1", o.p1);
  cmd->add_option("--p2", o.p2);
  cmd->add_option("--threshold", o.threshold);
  cmd->add_option("--data-dir", o.data_dir, "IDX directory (else BMRS_DATA_DIR)");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--model", o.model, "mlp|lenet5");
  cmd->add_option("--dataset", o.dataset, "mnist|fashion_mnist|synth");
  cmd->add_option("--epochs", o.epochs, "training epochs before fine-tuning");
  cmd->add_option("--fine-tune-epochs", o.fine_tune_epochs);
  cmd->add_option("--kl-scale", o.kl_scale);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw bmrs::ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Flags win over the file; the model kind picks the defaults when no file is given.
bmrs::ExperimentConfig build_config(const Overrides& o) {
  bmrs::ExperimentConfig cfg = o.config_path.empty()
                                   ? bmrs::default_config(o.model.value_or("mlp"))
                                   : bmrs::config_from_json(slurp(o.config_path));
  if (o.model && !o.config_path.empty()) cfg.model.kind = *o.model;
  if (o.dataset) cfg.dataset = *o.dataset;
  if (o.seed) cfg.seed = *o.seed;
  if (o.criterion) cfg.criterion.kind = bmrs::parse_criterion(*o.criterion);
  if (o.p1) cfg.criterion.p1 = *o.p1;
  if (o.p2) cfg.criterion.p2 = *o.p2;
  if (o.threshold) cfg.criterion.threshold = *o.threshold;
  if (o.data_dir) cfg.data_dir = *o.data_dir;
  if (o.out) cfg.output_dir = *o.out;
  if (o.epochs) cfg.schedule.epochs_train = *o.epochs;
  if (o.fine_tune_epochs) cfg.schedule.fine_tune_epochs = *o.fine_tune_epochs;
  if (o.kl_scale) cfg.optimizer.kl_scale = *o.kl_scale;
  bmrs::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian model reduction for structured pruning"};
  app.require_subcommand(1);

  Overrides train_o, post_o, sweep_o;
  auto* train = app.add_subcommand("train", "continuous pruning run");
  add_common(train, train_o);

  auto* post = app.add_subcommand("prune-post", "post-training pruning curves");
  add_common(post, post_o);
  std::string checkpoint;
  post->add_option("--checkpoint", checkpoint, "trained model.bmrs")->required();

  auto* sweep = app.add_subcommand("sweep-p1", "bmrs_u compression vs p1");
  add_common(sweep, sweep_o);
  std::vector<int> p1_list;
  sweep->add_option("--p1-list", p1_list)->delimiter(',');

  auto* verify = app.add_subcommand("verify", "closed forms against numerical oracles");
  std::string profile = "default";
  std::string report_path;
  verify->add_option("--profile", profile, "default|quick");
  verify->add_option("--report", report_path, "write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (train->parsed()) {
      const auto cfg = build_config(train_o);
      const auto art = bmrs::cmd_train(cfg);
      const auto& last = art.run.records.back();
      std::printf("accuracy %.2f%%  compression %.2f%%  -> %s\n", last.test_accuracy,
                  last.compression, cfg.output_dir.c_str());
    } else if (post->parsed()) {
      const auto cfg = build_config(post_o);
      const auto art = bmrs::cmd_prune_post(cfg, checkpoint);
      for (const auto& c : art.curves) {
        if (c.stop_index) {
          const auto& p = c.points[*c.stop_index];
          std::printf("%-10s stop at %.2f%% compression, accuracy %.2f%%\n",
                      bmrs::criterion_label(c.criterion).c_str(), p.compression, p.accuracy);
        }
      }
      std::printf("curves -> %s\n", art.curve_csv.string().c_str());
    } else if (sweep->parsed()) {
      auto cfg = build_config(sweep_o);
      if (!p1_list.empty()) cfg.p1_list = p1_list;
      bmrs::validate_config(cfg);
      for (const auto& row : bmrs::cmd_sweep_p1(cfg)) {
        std::printf("p1=%d compression %.2f%% accuracy %.2f%%\n", row.p1, row.compression,
                    row.accuracy);
      }
    } else if (verify->parsed()) {
      const auto report = bmrs::run_verify(bmrs::VerifyProfile::by_name(profile));
      for (const auto& c : report.checks) {
        std::printf("%-4s %-9s %-36s measured %.3g tol %.3g %s\n", c.pass ? "ok" : "FAIL",
                    c.suite.c_str(), c.name.c_str(), c.measured, c.tolerance, c.detail.c_str());
      }
      if (!report_path.empty()) {
        std::ofstream(report_path) << report.to_json() << "\n";
      }
      return report.all_pass() ? 0 : kExitVerify;
    }
  } catch (const bmrs::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
