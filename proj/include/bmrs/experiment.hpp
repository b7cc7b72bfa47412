#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bmrs/criteria.hpp"
#include "bmrs/data.hpp"
#include "bmrs/prune_runner.hpp"

namespace bmrs {

struct ModelConfig {
  std::string kind = "mlp";  // mlp | lenet5
  std::size_t layers = 7;
  std::size_t hidden = 100;
};

struct SynthConfig {
  std::size_t n_train = 4000;
  std::size_t n_test = 1000;
  std::size_t dim = 20;
  std::size_t n_classes = 4;
  double separation = 4.0;
};

struct ExperimentConfig {
  ModelConfig model;
  std::string dataset = "mnist";  // mnist | fashion_mnist | synth
  std::optional<std::string> data_dir;
  SynthConfig synth;
  TrainOptions optimizer;
  TrainSchedule schedule;
  CriterionConfig criterion;
  double log_lo = kDefaultLogLo;
  double log_hi = kDefaultLogHi;
  double chunk_fraction = 0.05;
  std::vector<int> p1_list = {4, 8};
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
};

/// Defaults for a model kind (learning rate differs between mlp and lenet5).
ExperimentConfig default_config(const std::string& model_kind = "mlp");

/// Parses a JSON config; missing keys take defaults, unknown keys are errors.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
/// Throws ConfigError on invalid combinations.
void validate_config(const ExperimentConfig& cfg);

/// SHA-1 of the canonical config JSON framed as a git blob ("blob <len>\0...").
std::string config_hash(const ExperimentConfig& cfg);
std::string git_blob_sha1(const std::string& content);

DataSplits load_data(const ExperimentConfig& cfg);
Network build_model(const ExperimentConfig& cfg, const Dataset& sample, bool with_gates = true);

/// RFC-4180 field quoting.
std::string csv_field(const std::string& s);
/// Shortest round-trip decimal form of a double.
std::string csv_number(double v);

struct TrainArtifacts {
  RunResult run;
  std::filesystem::path run_csv;
  std::filesystem::path manifest;
  std::filesystem::path checkpoint;
};

/// Continuous pruning run; writes run.csv, manifest.json and model.bmrs.
TrainArtifacts cmd_train(const ExperimentConfig& cfg);

struct PostArtifacts {
  std::vector<CurveResult> curves;
  SpearmanMatrix spearman;
  double checkpoint_accuracy = 0.0;
  std::filesystem::path curve_csv;
  std::filesystem::path spearman_csv;
  std::filesystem::path manifest;
};

/// Post-training curves for every criterion from a trained checkpoint.
PostArtifacts cmd_prune_post(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint);

struct SweepRow {
  int p1;
  double compression;
  double accuracy;
};

/// One continuous bmrs_u run per p1 in cfg.p1_list; writes sweep.csv.
std::vector<SweepRow> cmd_sweep_p1(const ExperimentConfig& cfg);

}  // namespace bmrs
