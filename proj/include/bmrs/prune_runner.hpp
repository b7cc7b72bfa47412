#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bmrs/criteria.hpp"
#include "bmrs/data.hpp"
#include "bmrs/network.hpp"
#include "bmrs/optimizer.hpp"
#include "bmrs/rng.hpp"

namespace bmrs {

struct TrainSchedule {
  int epochs_train = 50;
  int fine_tune_epochs = 10;
  int prune_interval = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class NoiseSharing { PerBatch, PerExample };

struct TrainOptions {
  double lr = 8.5e-4;
  std::size_t batch_size = 128;
  double kl_scale = 1.0;
  NoiseSharing noise = NoiseSharing::PerBatch;
};

/// Minibatch SVI: mean cross-entropy + kl_scale * KL / N, one noise draw per
/// gate structure per minibatch, Adam updates.
class Trainer {
 public:
  Trainer(const TrainOptions& options, std::uint64_t seed);

  /// One pass over `train` in a freshly shuffled order; returns the mean step loss.
  double train_epoch(Network& net, const Dataset& train);

  const TrainOptions& options() const { return options_; }

 private:
  TrainOptions options_;
  AdamState adam_;
  Rng rng_;
};

/// Eval-mode accuracy in percent.
double accuracy(Network& net, const Dataset& ds, std::size_t batch = 1000);

/// 100 * removed / total weight+bias scalars; `after` may be masked or shrunk.
double compression_percent(const Network& before, const Network& after);
double compression_percent(std::size_t original_params, const Network& after);

/// Copy of `net` with the given structures removed physically.
Network remove_structures(const Network& net, std::span<const StructureId> ids);

struct PruneEvent {
  StructureId id;
  double score;
};

struct RunRecord {
  int epoch = 0;
  std::string phase;  // "train" or "finetune"
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double compression = 0.0;
  std::vector<std::size_t> alive_counts;
  std::vector<PruneEvent> prune_events;
  // A gate layer lost every structure; the network still runs (zeros downstream).
  bool degenerate = false;
  // Largest |logit| difference between masked and shrunk networks at this prune.
  double mask_shrink_gap = 0.0;
};

struct RunResult {
  Network net;
  std::size_t original_params = 0;
  std::vector<RunRecord> records;

  double final_accuracy() const { return records.empty() ? 0.0 : records.back().test_accuracy; }
  double final_compression() const { return records.empty() ? 0.0 : records.back().compression; }
};

using RecordCallback = std::function<void(const RunRecord&)>;

/// Train, scoring and pruning every `prune_interval` epochs, then fine-tune
/// with pruning disabled.
RunResult continuous_prune(Network net, const DataSplits& data, const CriterionConfig& criterion,
                           const TrainSchedule& schedule, const TrainOptions& options,
                           const RecordCallback& on_record = {});

struct CurvePoint {
  std::size_t removed = 0;
  double compression = 0.0;
  double accuracy = 0.0;
  bool stop = false;  // BMRS stop point: every structure with dF >= 0 removed
};

struct CurveResult {
  CriterionConfig criterion;
  std::vector<CriterionScore> ranking;  // most prunable first
  std::vector<CurvePoint> points;       // starts at the untouched model
  std::optional<std::size_t> stop_index;  // into points
  std::optional<Network> stop_net;

  const CurvePoint* stop_point() const { return stop_index ? &points[*stop_index] : nullptr; }
};

/// Ranks every alive structure once, then removes them chunk by chunk with one
/// fine-tune epoch after each chunk, recording test accuracy.
CurveResult post_training_prune(const Network& trained, const DataSplits& data,
                                const CriterionConfig& criterion, double chunk_fraction,
                                const TrainOptions& options, std::uint64_t seed,
                                bool keep_stop_net = false);

/// Ordered by prunability (descending), ties by structure id.
std::vector<CriterionScore> rank_structures(const Network& net, const CriterionConfig& criterion);

struct TargetPruneResult {
  Network net;
  double compression = 0.0;
  double accuracy = 0.0;
  std::size_t removed = 0;
};

/// Removes structures in `criterion` rank order until compression (relative to
/// `original_params`) reaches `target`, then fine-tunes and measures.
TargetPruneResult prune_to_compression(const Network& net, const DataSplits& data,
                                       const CriterionConfig& criterion,
                                       std::size_t original_params, double target,
                                       int fine_tune_epochs, const TrainOptions& options,
                                       std::uint64_t seed);

struct SpearmanResult {
  double rho = 0.0;
  bool defined = false;  // false when either input is constant
};

/// Rank correlation with average ranks for ties.
SpearmanResult spearman_rank_correlation(std::span<const double> a, std::span<const double> b);

struct SpearmanMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> rho;  // NaN where undefined
};

/// Pairwise correlation of the prunability keys of each criterion over the
/// alive structures of `net`.
SpearmanMatrix spearman_matrix(const Network& net, const std::vector<CriterionConfig>& criteria);

/// bmrs_n, bmrs_u-4 style label.
std::string criterion_label(const CriterionConfig& c);

}  // namespace bmrs
