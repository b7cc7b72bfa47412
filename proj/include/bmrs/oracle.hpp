#pragma once

// Brute-force verifiers for the closed forms in distkit and criteria.
//
// Nothing here calls the closed-form code paths it is used to check:
// normalising constants come from quadrature, sampling uses rejection
// from std::normal_distribution rather than the inverse-CDF sampler.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "bmrs/distkit.hpp"

namespace bmrs::oracle {

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double best_estimate)
      : std::runtime_error(what), best_estimate_(best_estimate) {}
  double best_estimate() const noexcept { return best_estimate_; }

 private:
  double best_estimate_;
};

struct QuadratureSpec {
  std::function<double(double)> integrand;
  double lo = 0.0;
  double hi = 1.0;
  double rel_tol = 1e-8;
  int max_subdivisions = 4000;
  // Integrate over log(theta) in [log lo, log hi] with the exp(x) Jacobian.
  bool log_coordinates = false;
  // Extra split points (in the integration variable) where the integrand is
  // sharply peaked or discontinuous.
  std::vector<double> breakpoints;
};

/// Adaptive Gauss-Kronrod (7/15) integration.
double quad_integrate(const QuadratureSpec& spec);

/// log of the integral of exp(log_integrand(x)) over [lo, hi]; stays finite
/// when the integral itself under- or overflows.
double log_quad_integrate(const std::function<double(double)>& log_integrand, double lo,
                          double hi, std::vector<double> breakpoints, double rel_tol = 1e-10);

/// Truncated normal in log(theta) with a normaliser obtained by quadrature.
class ReferenceTruncNormal {
 public:
  ReferenceTruncNormal(double mu, double sigma, double lo, double hi);

  double log_density(double x) const;
  double density(double x) const;
  /// Split points bracketing the bulk of the mass.
  std::vector<double> breakpoints() const;
  double mu() const { return mu_; }
  double sigma() const { return sigma_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  /// log of the un-normalised mass; log Z + log(sigma * sqrt(2 pi)).
  double log_mass() const { return log_mass_; }

 private:
  double mu_, sigma_, lo_, hi_;
  double log_mass_;
};

ReferenceTruncNormal reference(const dist::TruncatedLogNormal& d);

/// Integral of the truncated log-normal density over its support.
double pdf_mass(const dist::TruncatedLogNormal& d, double rel_tol = 1e-10);
double pdf_mass(const dist::TruncatedLogUniform& d, double rel_tol = 1e-10);
/// CDF at x (log-space) of the truncated normal by quadrature.
double trunc_normal_cdf(double x, double mu, double sigma, double lo, double hi);
/// E[theta^k] by quadrature.
double moment(const dist::TruncatedLogNormal& d, int k);
/// SNR from quadrature moments.
double snr(const dist::TruncatedLogNormal& d);
/// KL(q || LogU) by quadrature of q log(q / p).
double kl_q_p(const dist::TruncatedLogNormal& q);

/// Reduced prior for the log-normal variant, in log(theta) coordinates.
struct LogNormalReduction {
  double mu;
  double sigma2;
};
/// Reduced prior for the log-uniform variant, in log(theta) coordinates.
struct LogUniformReduction {
  double log_lo;
  double log_hi;
};

/// log of the integral of q * p_tilde / p, integrated directly.
double log_delta_f_lognormal(const dist::TruncatedLogNormal& q, const LogNormalReduction& r);
double log_delta_f_loguniform(const dist::TruncatedLogNormal& q, const LogUniformReduction& r);

struct McEstimate {
  double mean;
  double std_error;
  std::int64_t n_samples;
};

using ReducedPrior = std::variant<dist::TruncatedLogNormal, dist::TruncatedLogUniform>;

/// Monte-Carlo estimate of E_{p_tilde}[q / p] (the exponentiated change in
/// evidence). Draws theta ~ p_tilde by rejection or uniform sampling.
McEstimate mc_delta_f(const dist::TruncatedLogNormal& q, const dist::TruncatedLogUniform& p,
                      const ReducedPrior& p_tilde, std::int64_t n, std::uint64_t seed);

}  // namespace bmrs::oracle
