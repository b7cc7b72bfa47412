#pragma once

// Numerical kernels for the standard normal, truncated normal, truncated
// log-normal and truncated log-uniform distributions.
//
// Everything that touches a normalising constant Z = Phi(beta) - Phi(alpha)
// is evaluated through log_diff_cdf, which stays accurate when Z underflows
// (posteriors pushed deep into a tail) or when the interval is very narrow.

#include <cmath>
#include <numbers>

namespace bmrs::dist {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2*pi))

double norm_pdf(double t);
double norm_log_pdf(double t);
double norm_cdf(double t);
/// log Phi(t), accurate for arbitrarily negative t.
double norm_log_cdf(double t);
/// Phi^-1(u) for u in (0, 1).
double norm_ppf(double u);
/// Phi^-1(exp(log_u)); works when u is below the smallest double.
double norm_ppf_from_log(double log_u);

/// log(Phi(b) - Phi(a)) for a < b.
double log_diff_cdf(double a, double b);

/// CDF of N(mu, sigma^2) truncated to [lo, hi].
double trunc_normal_cdf(double x, double mu, double sigma, double lo, double hi);

/// Standard normal truncated to [alpha, beta], sampled by inverse CDF.
double sample_std_trunc_normal(double alpha, double beta, double u);

/// theta with log(theta) ~ N(mu, sigma^2) truncated to [log_lo, log_hi].
class TruncatedLogNormal {
 public:
  TruncatedLogNormal(double mu, double sigma, double log_lo, double log_hi);

  double mu() const { return mu_; }
  double sigma() const { return sigma_; }
  double log_lo() const { return log_lo_; }
  double log_hi() const { return log_hi_; }

  double alpha() const { return (log_lo_ - mu_) / sigma_; }
  double beta() const { return (log_hi_ - mu_) / sigma_; }
  double log_z() const { return log_diff_cdf(alpha(), beta()); }
  double z() const { return std::exp(log_z()); }

  /// Density of theta; zero outside [exp(log_lo), exp(log_hi)].
  double pdf(double theta) const;
  /// Density of x = log(theta) (a truncated normal).
  double log_space_pdf(double x) const;
  /// CDF of theta.
  double cdf(double theta) const;

 private:
  double mu_;
  double sigma_;
  double log_lo_;
  double log_hi_;
};

class TruncatedLogUniform {
 public:
  TruncatedLogUniform(double log_lo, double log_hi);

  double log_lo() const { return log_lo_; }
  double log_hi() const { return log_hi_; }
  double width() const { return log_hi_ - log_lo_; }

  double pdf(double theta) const;
  double cdf(double theta) const;

 private:
  double log_lo_;
  double log_hi_;
};

/// Reparameterised draw: exp(mu + sigma * Phi^-1(Phi(alpha) + u * Z)).
double sample_trunc_log_normal(const TruncatedLogNormal& d, double u);

struct ThetaSample {
  double theta;
  double dtheta_dmu;     // holding u fixed
  double dtheta_dsigma;  // holding u fixed
};

/// Same draw as sample_trunc_log_normal plus its pathwise derivatives.
ThetaSample sample_trunc_log_normal_grad(const TruncatedLogNormal& d, double u);

/// log E[theta^k].
double trunc_log_normal_log_moment(const TruncatedLogNormal& d, int k);
/// E[theta^k].
double trunc_log_normal_moment(const TruncatedLogNormal& d, int k);
/// Var[theta], computed without the E[theta^2] - E[theta]^2 cancellation.
double trunc_log_normal_variance(const TruncatedLogNormal& d);

/// E[theta] / sqrt(Var[theta]). Returns +inf when the variance vanishes.
double snr(const TruncatedLogNormal& d);

/// KL(q || p) for p log-uniform on the same support as q.
double kl_q_p(const TruncatedLogNormal& q, const TruncatedLogUniform& p);

struct KlGrad {
  double value;
  double d_mu;
  double d_sigma;
};

KlGrad kl_q_p_grad(const TruncatedLogNormal& q, const TruncatedLogUniform& p);

}  // namespace bmrs::dist
