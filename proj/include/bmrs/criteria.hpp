#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bmrs/distkit.hpp"
#include "bmrs/network.hpp"

namespace bmrs {

/// Spike-like reduced prior N(mu_tilde_p, sigma2_tilde_p) on log(theta),
/// truncated to the gate support.
struct ReducedLogNormalPrior {
  double mu_tilde_p = kDefaultLogLo;
  double sigma2_tilde_p = 1e-12;
};

/// Log-uniform prior on the narrower support [log_lo, log_hi].
struct ReducedLogUniformPrior {
  double log_lo;
  double log_hi;

  /// Support [2^-p2, 2^-p1].
  static ReducedLogUniformPrior from_precision(int p1, int p2 = 23);
};

/// Pieces of the log-normal change in free energy; total = log_z + log_var - 0.5 * quadratic.
struct DeltaFTerms {
  double log_z;       // log[Z_q~ (log b - log a) / (Z_p~ Z_q)]
  double log_var;     // 0.5 log[s~_q^2 / (2 pi s~_p^2 s_q^2)]
  double quadratic;   // mu_q^2/s_q^2 + mu~_p^2/s~_p^2 - mu~_q^2/s~_q^2
  double mu_tilde_q;
  double sigma2_tilde_q;

  double total() const { return log_z + log_var - 0.5 * quadratic; }
};

DeltaFTerms delta_f_lognormal_terms(const dist::TruncatedLogNormal& q,
                                    const ReducedLogNormalPrior& prior);
double delta_f_lognormal(const dist::TruncatedLogNormal& q, const ReducedLogNormalPrior& prior);
double delta_f_loguniform(const dist::TruncatedLogNormal& q, const ReducedLogUniformPrior& prior);

enum class CriterionKind { None, BmrsN, BmrsU, Snr, MeanTheta, L2 };

std::string criterion_name(CriterionKind kind);
/// Accepts none | bmrs_n | bmrs_u | snr | mean_theta | l2.
CriterionKind parse_criterion(const std::string& name);

struct CriterionConfig {
  CriterionKind kind = CriterionKind::BmrsN;
  int p1 = 8;
  int p2 = 23;
  // Baseline threshold; unset means the default for the kind (SNR 1, E[theta] 0.1,
  // L2 never prunes on its own).
  std::optional<double> threshold;
  // Unset means the left truncation bound of the gate.
  std::optional<double> mu_tilde_p;
  double sigma2_tilde_p = 1e-12;

  double effective_threshold() const;
  /// True for the criteria whose score is a change in free energy.
  bool is_bmrs() const { return kind == CriterionKind::BmrsN || kind == CriterionKind::BmrsU; }
};

struct CriterionScore {
  StructureId id;
  double score = 0.0;
  bool prune = false;
};

double score_snr(const dist::TruncatedLogNormal& q);
double score_mean_theta(const dist::TruncatedLogNormal& q);
/// Norm of the incoming weight row (dense) or filter (conv); bias excluded.
double score_l2(const Network& net, StructureId id);

/// Score and verdict of a single gate structure under `cfg` (not L2).
CriterionScore score_gate_structure(const CriterionConfig& cfg, const NoiseGateLayer& gate,
                                    std::size_t position, std::size_t gate_index);

/// Scores every alive structure, ordered by gate then position.
std::vector<CriterionScore> score_network(const Network& net, const CriterionConfig& cfg);

/// Larger means more prunable; used for ranking and rank correlation.
double prunability(CriterionKind kind, double score);

/// Position of structure `id` inside its gate layer; throws if unknown or pruned.
std::size_t structure_position(const NoiseGateLayer& gate, std::size_t id);

}  // namespace bmrs
