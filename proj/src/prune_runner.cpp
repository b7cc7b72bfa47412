#include "bmrs/prune_runner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "bmrs/errors.hpp"

namespace bmrs {

namespace {

std::vector<std::size_t> alive_counts(const Network& net) {
  std::vector<std::size_t> out;
  for (const NoiseGateLayer* g : net.gates()) out.push_back(g->n_alive());
  return out;
}

bool any_gate_empty(const Network& net) {
  for (const NoiseGateLayer* g : net.gates()) {
    if (g->n_alive() == 0) return true;
  }
  return false;
}

void mask_structures(Network& net, std::span<const StructureId> ids) {
  auto gates = net.gates();
  std::map<std::size_t, std::vector<std::size_t>> by_gate;
  for (const StructureId& id : ids) {
    if (id.gate >= gates.size()) throw ContractError("unknown gate " + std::to_string(id.gate));
    by_gate[id.gate].push_back(structure_position(*gates[id.gate], id.index));
  }
  for (auto& [g, pos] : by_gate) prune_indices(*gates[g], pos);
}

double max_logit_gap(Network& masked, Network& shrunk, const Dataset& probe) {
  if (probe.size() == 0) return 0.0;
  std::vector<std::size_t> idx(std::min<std::size_t>(64, probe.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor a = masked.forward(gather_images(probe, idx, masked.input_shape), Mode::Eval);
  const Tensor b = shrunk.forward(gather_images(probe, idx, shrunk.input_shape), Mode::Eval);
  double gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
  return gap;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

void TrainSchedule::validate() const {
  if (epochs_train < 1) throw ConfigError("schedule: epochs_train must be >= 1");
  if (prune_interval < 1) throw ConfigError("schedule: prune_interval must be >= 1");
  if (fine_tune_epochs < 0) throw ConfigError("schedule: fine_tune_epochs must be >= 0");
}

Trainer::Trainer(const TrainOptions& options, std::uint64_t seed)
    : options_(options), rng_(mix_seed(seed, 1)) {
  if (!(options.lr > 0.0) || options.batch_size == 0) {
    throw ConfigError("trainer: lr and batch_size must be positive");
  }
  adam_.config.lr = options.lr;
}

double Trainer::train_epoch(Network& net, const Dataset& train) {
  const std::size_t n = train.size();
  if (n == 0) throw ContractError("train_epoch: empty dataset");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(open_uniform(rng_) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  const double kl_weight = options_.kl_scale / static_cast<double>(n);
  const auto params = net.params();
  double loss_sum = 0.0;
  std::size_t steps = 0;
  GateDraws draws(net.gate_count());
  for (std::size_t start = 0; start < n; start += options_.batch_size) {
    const std::size_t end = std::min(n, start + options_.batch_size);
    std::span<const std::size_t> idx(order.data() + start, end - start);
    const Tensor x = gather_images(train, idx, net.input_shape);
    const std::vector<int> y = gather_labels(train, idx);
    const auto gates = net.gates();
    const std::size_t rows = options_.noise == NoiseSharing::PerExample ? idx.size() : 1;
    for (std::size_t g = 0; g < gates.size(); ++g) {
      draws[g].resize(rows * gates[g]->size());
      for (double& u : draws[g]) u = open_uniform(rng_);
    }
    net.zero_grad();
    const Tensor logits = net.forward(x, Mode::Train, draws);
    Tensor grad;
    const double ce = softmax_cross_entropy(logits, y, &grad);
    net.backward(grad);
    net.accumulate_kl_grad(kl_weight);
    loss_sum += ce + kl_weight * net.kl_total();
    adam_step(adam_, params);
    ++steps;
  }
  return loss_sum / static_cast<double>(steps);
}

double accuracy(Network& net, const Dataset& ds, std::size_t batch) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t end = std::min(ds.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = argmax_rows(net.forward(gather_images(ds, idx, net.input_shape), Mode::Eval));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == ds.labels[idx[k]];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
}

double compression_percent(std::size_t original_params, const Network& after) {
  if (original_params == 0) return 0.0;
  const std::size_t remaining = after.shrunk().param_count();
  return 100.0 * static_cast<double>(original_params - remaining) /
         static_cast<double>(original_params);
}

double compression_percent(const Network& before, const Network& after) {
  return compression_percent(before.param_count(), after);
}

Network remove_structures(const Network& net, std::span<const StructureId> ids) {
  Network masked = net;
  mask_structures(masked, ids);
  return masked.shrunk();
}

RunResult continuous_prune(Network net, const DataSplits& data, const CriterionConfig& criterion,
                           const TrainSchedule& schedule, const TrainOptions& options,
                           const RecordCallback& on_record) {
  schedule.validate();
  if (net.gate_count() == 0) throw ContractError("continuous_prune: network has no gate layers");
  RunResult result;
  result.original_params = net.param_count();
  Trainer trainer(options, schedule.seed);
  const int total = schedule.epochs_train + schedule.fine_tune_epochs;
  for (int epoch = 1; epoch <= total; ++epoch) {
    RunRecord rec;
    rec.epoch = epoch;
    rec.phase = epoch <= schedule.epochs_train ? "train" : "finetune";
    rec.train_loss = trainer.train_epoch(net, data.train);
    if (epoch <= schedule.epochs_train && epoch % schedule.prune_interval == 0 &&
        criterion.kind != CriterionKind::None) {
      std::vector<StructureId> doomed;
      for (const CriterionScore& s : score_network(net, criterion)) {
        if (!s.prune) continue;
        doomed.push_back(s.id);
        rec.prune_events.push_back({s.id, s.score});
      }
      if (!doomed.empty()) {
        Network masked = net;
        mask_structures(masked, doomed);
        Network shrunk = masked.shrunk();
        rec.mask_shrink_gap = max_logit_gap(masked, shrunk, data.test);
        net = std::move(shrunk);
      }
    }
    rec.test_accuracy = accuracy(net, data.test);
    rec.compression = compression_percent(result.original_params, net);
    rec.alive_counts = alive_counts(net);
    rec.degenerate = any_gate_empty(net);
    if (on_record) on_record(rec);
    result.records.push_back(std::move(rec));
  }
  result.net = std::move(net);
  return result;
}

std::vector<CriterionScore> rank_structures(const Network& net, const CriterionConfig& criterion) {
  auto scores = score_network(net, criterion);
  std::stable_sort(scores.begin(), scores.end(), [&](const CriterionScore& a, const CriterionScore& b) {
    const double ka = prunability(criterion.kind, a.score);
    const double kb = prunability(criterion.kind, b.score);
    if (ka != kb) return ka > kb;
    return a.id < b.id;
  });
  return scores;
}

CurveResult post_training_prune(const Network& trained, const DataSplits& data,
                                const CriterionConfig& criterion, double chunk_fraction,
                                const TrainOptions& options, std::uint64_t seed,
                                bool keep_stop_net) {
  if (!(chunk_fraction > 0.0 && chunk_fraction <= 1.0)) {
    throw ContractError("post_training_prune: chunk_fraction must lie in (0, 1]");
  }
  CurveResult out;
  out.criterion = criterion;
  out.ranking = rank_structures(trained, criterion);
  const std::size_t n = out.ranking.size();
  const std::size_t original = trained.param_count();

  Network net = trained;
  out.points.push_back({0, 0.0, accuracy(net, data.test), false});
  if (n == 0) return out;

  std::optional<std::size_t> stop;
  if (criterion.is_bmrs()) {
    std::size_t k = 0;
    while (k < n && out.ranking[k].score >= 0.0) ++k;
    stop = k;
  }
  if (stop && *stop == 0) out.stop_index = 0;

  const auto chunk = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                  std::floor(chunk_fraction * static_cast<double>(n))));
  std::vector<std::size_t> bounds;
  for (std::size_t k = chunk; k < n; k += chunk) bounds.push_back(k);
  bounds.push_back(n);
  if (stop && *stop > 0) bounds.push_back(*stop);
  std::sort(bounds.begin(), bounds.end());
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());

  Trainer trainer(options, mix_seed(seed, 7));
  std::size_t removed = 0;
  for (std::size_t b : bounds) {
    std::vector<StructureId> ids;
    for (std::size_t k = removed; k < b; ++k) ids.push_back(out.ranking[k].id);
    net = remove_structures(net, ids);
    removed = b;
    trainer.train_epoch(net, data.train);
    CurvePoint p{removed, compression_percent(original, net), accuracy(net, data.test),
                 stop && *stop == removed};
    out.points.push_back(p);
    if (p.stop) {
      out.stop_index = out.points.size() - 1;
      if (keep_stop_net) out.stop_net = net;
    }
  }
  if (keep_stop_net && stop && *stop == 0) out.stop_net = trained;
  return out;
}

TargetPruneResult prune_to_compression(const Network& start, const DataSplits& data,
                                       const CriterionConfig& criterion,
                                       std::size_t original_params, double target,
                                       int fine_tune_epochs, const TrainOptions& options,
                                       std::uint64_t seed) {
  TargetPruneResult out;
  out.net = start;
  const auto ranking = rank_structures(start, criterion);
  // Each structure's removal cost is additive, so walk the ranking on a
  // masked copy and shrink once.
  std::vector<StructureId> ids;
  Network probe = start;
  for (const CriterionScore& s : ranking) {
    if (compression_percent(original_params, probe) >= target) break;
    mask_structures(probe, std::span<const StructureId>(&s.id, 1));
    ids.push_back(s.id);
  }
  out.net = remove_structures(start, ids);
  out.removed = ids.size();
  Trainer trainer(options, mix_seed(seed, 11));
  for (int e = 0; e < fine_tune_epochs; ++e) trainer.train_epoch(out.net, data.train);
  out.compression = compression_percent(original_params, out.net);
  out.accuracy = accuracy(out.net, data.test);
  return out;
}

SpearmanResult spearman_rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw ContractError("spearman: need two vectors of equal length >= 2");
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return {std::numeric_limits<double>::quiet_NaN(), false};
  return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), true};
}

std::string criterion_label(const CriterionConfig& c) {
  if (c.kind == CriterionKind::BmrsU) return "bmrs_u-" + std::to_string(c.p1);
  return criterion_name(c.kind);
}

SpearmanMatrix spearman_matrix(const Network& net, const std::vector<CriterionConfig>& criteria) {
  SpearmanMatrix out;
  std::vector<std::vector<double>> keys;
  for (const CriterionConfig& c : criteria) {
    out.names.push_back(criterion_label(c));
    std::vector<double> k;
    for (const CriterionScore& s : score_network(net, c)) k.push_back(prunability(c.kind, s.score));
    keys.push_back(std::move(k));
  }
  const std::size_t m = criteria.size();
  out.rho.assign(m, std::vector<double>(m, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (keys[i].size() < 2) continue;
      const auto r = spearman_rank_correlation(keys[i], keys[j]);
      if (r.defined) out.rho[i][j] = r.rho;
    }
  }
  return out;
}

}  // namespace bmrs
