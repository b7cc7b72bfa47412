#include "bmrs/criteria.hpp"

#include <cmath>
#include <numbers>

#include "bmrs/errors.hpp"

namespace bmrs {

ReducedLogUniformPrior ReducedLogUniformPrior::from_precision(int p1, int p2) {
  if (p1 < 0 || p2 <= p1) {
    throw ContractError("reduced log-uniform prior needs 0 <= p1 < p2, got p1=" +
                        std::to_string(p1) + " p2=" + std::to_string(p2));
  }
  return {-p2 * std::numbers::ln2, -p1 * std::numbers::ln2};
}

DeltaFTerms delta_f_lognormal_terms(const dist::TruncatedLogNormal& q,
                                    const ReducedLogNormalPrior& prior) {
  const double s2p = prior.sigma2_tilde_p;
  const double mp = prior.mu_tilde_p;
  if (!(s2p > 0.0) || !std::isfinite(s2p) || !std::isfinite(mp)) {
    throw ContractError("reduced log-normal prior needs finite mu and sigma2 > 0");
  }
  const double s2q = q.sigma() * q.sigma();
  const double mq = q.mu();
  const double lo = q.log_lo(), hi = q.log_hi();

  // Products of Gaussians, arranged so nothing of size 1/s2p gets subtracted.
  const double sum = s2q + s2p;
  const double s2t = s2q * s2p / sum;
  const double mt = mp + (mq - mp) * (s2p / sum);
  const double st = std::sqrt(s2t), sp = std::sqrt(s2p);

  DeltaFTerms t{};
  t.mu_tilde_q = mt;
  t.sigma2_tilde_q = s2t;
  const double log_zt = dist::log_diff_cdf((lo - mt) / st, (hi - mt) / st);
  const double log_zp = dist::log_diff_cdf((lo - mp) / sp, (hi - mp) / sp);
  t.log_z = log_zt + std::log(hi - lo) - log_zp - q.log_z();
  t.log_var = -0.5 * std::log(2.0 * std::numbers::pi * sum);
  const double d = mq - mp;
  t.quadratic = d * d / sum;
  if (!std::isfinite(t.total())) {
    throw NumericalError("delta_f_lognormal: non-finite result (log_z=" + std::to_string(t.log_z) +
                         ", log_var=" + std::to_string(t.log_var) +
                         ", quadratic=" + std::to_string(t.quadratic) + ", mu_q=" +
                         std::to_string(mq) + ", sigma_q=" + std::to_string(q.sigma()) + ")");
  }
  return t;
}

double delta_f_lognormal(const dist::TruncatedLogNormal& q, const ReducedLogNormalPrior& prior) {
  return delta_f_lognormal_terms(q, prior).total();
}

double delta_f_loguniform(const dist::TruncatedLogNormal& q, const ReducedLogUniformPrior& prior) {
  const double lo = q.log_lo(), hi = q.log_hi();
  if (!(lo <= prior.log_lo && prior.log_lo < prior.log_hi && prior.log_hi <= hi)) {
    throw ContractError("delta_f_loguniform: reduced support [" + std::to_string(prior.log_lo) +
                        ", " + std::to_string(prior.log_hi) + "] not inside [" +
                        std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  const double s = q.sigma(), m = q.mu();
  const double log_mass = dist::log_diff_cdf((prior.log_lo - m) / s, (prior.log_hi - m) / s);
  return std::log((hi - lo) / (prior.log_hi - prior.log_lo)) + (log_mass - q.log_z());
}

std::string criterion_name(CriterionKind kind) {
  switch (kind) {
    case CriterionKind::None: return "none";
    case CriterionKind::BmrsN: return "bmrs_n";
    case CriterionKind::BmrsU: return "bmrs_u";
    case CriterionKind::Snr: return "snr";
    case CriterionKind::MeanTheta: return "mean_theta";
    case CriterionKind::L2: return "l2";
  }
  return "unknown";
}

CriterionKind parse_criterion(const std::string& name) {
  for (auto k : {CriterionKind::None, CriterionKind::BmrsN, CriterionKind::BmrsU,
                 CriterionKind::Snr, CriterionKind::MeanTheta, CriterionKind::L2}) {
    if (criterion_name(k) == name) return k;
  }
  throw ConfigError("unknown criterion '" + name +
                    "' (expected none, bmrs_n, bmrs_u, snr, mean_theta or l2)");
}

double CriterionConfig::effective_threshold() const {
  if (threshold) return *threshold;
  switch (kind) {
    case CriterionKind::Snr: return 1.0;
    case CriterionKind::MeanTheta: return 0.1;
    case CriterionKind::L2: return -std::numeric_limits<double>::infinity();
    default: return 0.0;
  }
}

double score_snr(const dist::TruncatedLogNormal& q) { return dist::snr(q); }

double score_mean_theta(const dist::TruncatedLogNormal& q) {
  return dist::trunc_log_normal_moment(q, 1);
}

std::size_t structure_position(const NoiseGateLayer& gate, std::size_t id) {
  for (std::size_t p = 0; p < gate.size(); ++p) {
    if (gate.ids[p] == id) {
      if (!gate.alive[p]) throw ContractError("structure " + std::to_string(id) + " is pruned");
      return p;
    }
  }
  throw ContractError("unknown structure " + std::to_string(id));
}

double score_l2(const Network& net, StructureId id) {
  const auto gates = net.gates();
  if (id.gate >= gates.size()) throw ContractError("score_l2: unknown gate " + std::to_string(id.gate));
  const std::size_t pos = structure_position(*gates[id.gate], id.index);
  const Layer& producer = net.layers[net.producer_of(id.gate)];
  const Tensor& w = std::holds_alternative<Dense>(producer)
                        ? std::get<Dense>(producer).weight.value
                        : std::get<Conv2d>(producer).weight.value;
  const std::size_t row = w.size() / w.dim(0);
  double sq = 0.0;
  for (std::size_t k = 0; k < row; ++k) {
    const double v = w[pos * row + k];
    sq += v * v;
  }
  return std::sqrt(sq);
}

CriterionScore score_gate_structure(const CriterionConfig& cfg, const NoiseGateLayer& gate,
                                    std::size_t position, std::size_t gate_index) {
  CriterionScore out;
  out.id = {gate_index, gate.ids[position]};
  const auto q = gate.posterior(position);
  switch (cfg.kind) {
    case CriterionKind::None:
      out.score = 0.0;
      out.prune = false;
      break;
    case CriterionKind::BmrsN: {
      ReducedLogNormalPrior prior{cfg.mu_tilde_p.value_or(gate.log_lo), cfg.sigma2_tilde_p};
      out.score = delta_f_lognormal(q, prior);
      out.prune = out.score >= 0.0;
      break;
    }
    case CriterionKind::BmrsU:
      out.score = delta_f_loguniform(q, ReducedLogUniformPrior::from_precision(cfg.p1, cfg.p2));
      out.prune = out.score >= 0.0;
      break;
    case CriterionKind::Snr:
      out.score = score_snr(q);
      out.prune = out.score < cfg.effective_threshold();
      break;
    case CriterionKind::MeanTheta:
      out.score = score_mean_theta(q);
      out.prune = out.score < cfg.effective_threshold();
      break;
    case CriterionKind::L2:
      throw ContractError("score_gate_structure: L2 scores need the network weights");
  }
  return out;
}

std::vector<CriterionScore> score_network(const Network& net, const CriterionConfig& cfg) {
  std::vector<CriterionScore> out;
  const auto gates = net.gates();
  for (std::size_t g = 0; g < gates.size(); ++g) {
    for (std::size_t p = 0; p < gates[g]->size(); ++p) {
      if (!gates[g]->alive[p]) continue;
      if (cfg.kind == CriterionKind::L2) {
        CriterionScore s;
        s.id = {g, gates[g]->ids[p]};
        s.score = score_l2(net, s.id);
        s.prune = s.score < cfg.effective_threshold();
        out.push_back(s);
      } else {
        out.push_back(score_gate_structure(cfg, *gates[g], p, g));
      }
    }
  }
  return out;
}

double prunability(CriterionKind kind, double score) {
  switch (kind) {
    case CriterionKind::BmrsN:
    case CriterionKind::BmrsU: return score;
    default: return -score;
  }
}

}  // namespace bmrs
