#include "bmrs/distkit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "bmrs/errors.hpp"

namespace bmrs::dist {

namespace {

constexpr double kSqrt2 = std::numbers::sqrt2;
constexpr double kInf = std::numeric_limits<double>::infinity();

// Below this, erfc underflows into subnormals and the asymptotic series takes over.
constexpr double kLogCdfAsymptotic = -35.0;
// exp(-575) ~ 1e-250: below this Phi^-1 is solved on the log scale.
constexpr double kLogPpfDirect = -575.0;

// 10-point Gauss-Legendre on [-1, 1].
constexpr std::array<double, 5> kGlNodes = {0.1488743389816312, 0.4333953941292472,
                                            0.6794095682990244, 0.8650633666889845,
                                            0.9739065285171717};
constexpr std::array<double, 5> kGlWeights = {0.2955242247147529, 0.2692667193099963,
                                              0.2190863625159820, 0.1494513491505806,
                                              0.0666713443086881};

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw DomainError(std::string(what) + " must be finite");
}

// log of the integral of phi over a short interval, relative to phi at tref.
double log_narrow_mass(double a, double b) {
  const double tref = std::clamp(0.0, a, b);
  const double half = 0.5 * (b - a);
  const double mid = 0.5 * (a + b);
  double sum = 0.0;
  for (std::size_t i = 0; i < kGlNodes.size(); ++i) {
    for (double sign : {-1.0, 1.0}) {
      const double t = mid + sign * half * kGlNodes[i];
      sum += kGlWeights[i] * std::exp(-0.5 * (t - tref) * (t + tref));
    }
  }
  return norm_log_pdf(tref) + std::log(half * sum);
}

}  // namespace

double norm_pdf(double t) { return std::exp(norm_log_pdf(t)); }

double norm_log_pdf(double t) { return -0.5 * t * t - kLogSqrt2Pi; }

double norm_cdf(double t) { return 0.5 * std::erfc(-t / kSqrt2); }

double norm_log_cdf(double t) {
  if (std::isnan(t)) throw DomainError("norm_log_cdf: NaN argument");
  if (t == kInf) return 0.0;
  if (t == -kInf) return -kInf;
  if (t > 0.0) return std::log1p(-0.5 * std::erfc(t / kSqrt2));
  if (t > kLogCdfAsymptotic) return std::log(0.5 * std::erfc(-t / kSqrt2));
  // Mills-ratio series; the first omitted term is below 1e-14 at t = -35.
  const double z = 1.0 / (t * t);
  const double series =
      1.0 + z * (-1.0 + z * (3.0 + z * (-15.0 + z * (105.0 + z * (-945.0 + z * 10395.0)))));
  return -0.5 * t * t - std::log(-t) - kLogSqrt2Pi + std::log(series);
}

double norm_ppf(double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("norm_ppf: argument must lie in (0, 1)");
  if (u > 0.5) return -norm_ppf(1.0 - u);
  if (u < 1e-250) return norm_ppf_from_log(std::log(u));

  // Acklam's rational approximation, then Halley refinement against erfc.
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  double x;
  if (u < 0.02425) {
    const double q = std::sqrt(-2.0 * std::log(u));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else {
    const double q = u - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  for (int it = 0; it < 2; ++it) {
    const double e = norm_cdf(x) - u;
    const double step = e / norm_pdf(x);
    x -= step / (1.0 + 0.5 * x * step);
  }
  return x;
}

double norm_ppf_from_log(double log_u) {
  if (std::isnan(log_u) || log_u >= 0.0) {
    throw DomainError("norm_ppf_from_log: log probability must be negative");
  }
  if (log_u > -std::numbers::ln2) return -norm_ppf(-std::expm1(log_u));
  if (log_u > kLogPpfDirect) return norm_ppf(std::exp(log_u));
  if (log_u == -kInf) return -kInf;
  // Newton on log Phi(t) = log_u; log Phi is concave so this is monotone.
  const double s = -2.0 * log_u;
  double t = -std::sqrt(s - std::log(s) - 2.0 * kLogSqrt2Pi);
  for (int it = 0; it < 60; ++it) {
    const double lc = norm_log_cdf(t);
    const double slope = std::exp(norm_log_pdf(t) - lc);
    const double step = (lc - log_u) / slope;
    t -= step;
    if (std::abs(step) <= 1e-15 * std::abs(t)) break;
  }
  return t;
}

double log_diff_cdf(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) throw DomainError("log_diff_cdf: NaN argument");
  if (a == b) return -kInf;
  if (a > b) throw ContractError("log_diff_cdf: requires a < b");
  if (a + b > 0.0) {
    const double na = -b;
    b = -a;
    a = na;
  }
  // Now a < 0 and |a| >= |b|.
  if (std::isfinite(a) && (b - a) < 1.0 && (b - a) * std::max(-a, std::abs(b)) < 1.0) {
    return log_narrow_mass(a, b);
  }
  if (b > 0.0) return std::log(0.5 * (std::erf(b / kSqrt2) - std::erf(a / kSqrt2)));
  const double lb = norm_log_cdf(b);
  const double la = norm_log_cdf(a);
  return lb + std::log1p(-std::exp(la - lb));
}

double trunc_normal_cdf(double x, double mu, double sigma, double lo, double hi) {
  require_finite(x, "x");
  require_finite(mu, "mu");
  require_finite(sigma, "sigma");
  require_finite(lo, "lo");
  require_finite(hi, "hi");
  if (!(sigma > 0.0)) throw ContractError("trunc_normal_cdf: sigma must be positive");
  if (!(lo < hi)) throw ContractError("trunc_normal_cdf: requires lo < hi");
  if (x <= lo) return 0.0;
  if (x >= hi) return 1.0;
  const double alpha = (lo - mu) / sigma;
  const double beta = (hi - mu) / sigma;
  const double z = (x - mu) / sigma;
  const double value = std::exp(log_diff_cdf(alpha, z) - log_diff_cdf(alpha, beta));
  return std::clamp(value, 0.0, 1.0);
}

double sample_std_trunc_normal(double alpha, double beta, double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("sample: u must lie in (0, 1)");
  if (alpha + beta > 0.0) return -sample_std_trunc_normal(-beta, -alpha, 1.0 - u);
  const double la = norm_log_cdf(alpha);
  const double lb = norm_log_cdf(beta);
  // p = Phi(alpha) + u * Z, factored through Phi(beta) so it survives underflow.
  const double log_p = lb + std::log(u + (1.0 - u) * std::exp(la - lb));
  double eps;
  if (log_p < -std::numbers::ln2) {
    eps = norm_ppf_from_log(log_p);
  } else {
    const double upper = norm_cdf(-beta) + (1.0 - u) * std::exp(log_diff_cdf(alpha, beta));
    eps = -norm_ppf(upper);
  }
  return std::clamp(eps, alpha, beta);
}

TruncatedLogNormal::TruncatedLogNormal(double mu, double sigma, double log_lo, double log_hi)
    : mu_(mu), sigma_(sigma), log_lo_(log_lo), log_hi_(log_hi) {
  require_finite(mu, "mu");
  require_finite(sigma, "sigma");
  require_finite(log_lo, "log_lo");
  require_finite(log_hi, "log_hi");
  if (!(sigma > 0.0)) throw ContractError("TruncatedLogNormal: sigma must be positive");
  if (!(log_lo < log_hi)) throw ContractError("TruncatedLogNormal: requires log_lo < log_hi");
}

double TruncatedLogNormal::log_space_pdf(double x) const {
  if (x < log_lo_ || x > log_hi_) return 0.0;
  return std::exp(norm_log_pdf((x - mu_) / sigma_) - std::log(sigma_) - log_z());
}

double TruncatedLogNormal::pdf(double theta) const {
  if (!(theta > 0.0)) return 0.0;
  const double x = std::log(theta);
  if (x < log_lo_ || x > log_hi_) return 0.0;
  return log_space_pdf(x) / theta;
}

double TruncatedLogNormal::cdf(double theta) const {
  if (!(theta > 0.0)) return 0.0;
  return trunc_normal_cdf(std::log(theta), mu_, sigma_, log_lo_, log_hi_);
}

TruncatedLogUniform::TruncatedLogUniform(double log_lo, double log_hi)
    : log_lo_(log_lo), log_hi_(log_hi) {
  require_finite(log_lo, "log_lo");
  require_finite(log_hi, "log_hi");
  if (!(log_lo < log_hi)) throw ContractError("TruncatedLogUniform: requires log_lo < log_hi");
}

double TruncatedLogUniform::pdf(double theta) const {
  if (!(theta > 0.0)) return 0.0;
  const double x = std::log(theta);
  if (x < log_lo_ || x > log_hi_) return 0.0;
  return 1.0 / (theta * width());
}

double TruncatedLogUniform::cdf(double theta) const {
  if (!(theta > 0.0)) return 0.0;
  return std::clamp((std::log(theta) - log_lo_) / width(), 0.0, 1.0);
}

double sample_trunc_log_normal(const TruncatedLogNormal& d, double u) {
  const double eps = sample_std_trunc_normal(d.alpha(), d.beta(), u);
  const double x = std::clamp(d.mu() + d.sigma() * eps, d.log_lo(), d.log_hi());
  return std::exp(x);
}

ThetaSample sample_trunc_log_normal_grad(const TruncatedLogNormal& d, double u) {
  const double alpha = d.alpha();
  const double beta = d.beta();
  const double eps = sample_std_trunc_normal(alpha, beta, u);
  const double x = std::clamp(d.mu() + d.sigma() * eps, d.log_lo(), d.log_hi());
  const double theta = std::exp(x);

  // Implicit differentiation of F(eps; alpha, beta) = u.
  const double log_phi_eps = norm_log_pdf(eps);
  const double r_alpha = (1.0 - u) * std::exp(norm_log_pdf(alpha) - log_phi_eps);
  const double r_beta = u * std::exp(norm_log_pdf(beta) - log_phi_eps);
  const double dx_dmu = 1.0 - r_alpha - r_beta;
  const double dx_dsigma = eps - alpha * r_alpha - beta * r_beta;
  return {theta, theta * dx_dmu, theta * dx_dsigma};
}

double trunc_log_normal_log_moment(const TruncatedLogNormal& d, int k) {
  if (k < 1) throw ContractError("trunc_log_normal_moment: k must be >= 1");
  const double ks = k * d.sigma();
  return k * d.mu() + 0.5 * ks * ks + log_diff_cdf(d.alpha() - ks, d.beta() - ks) - d.log_z();
}

double trunc_log_normal_moment(const TruncatedLogNormal& d, int k) {
  return std::exp(trunc_log_normal_log_moment(d, k));
}

double trunc_log_normal_variance(const TruncatedLogNormal& d) {
  const double l1 = trunc_log_normal_log_moment(d, 1);
  const double l2 = trunc_log_normal_log_moment(d, 2);
  return std::max(0.0, -std::exp(l2) * std::expm1(2.0 * l1 - l2));
}

double snr(const TruncatedLogNormal& d) {
  const double var = trunc_log_normal_variance(d);
  if (!(var > 0.0)) return kInf;
  return trunc_log_normal_moment(d, 1) / std::sqrt(var);
}

KlGrad kl_q_p_grad(const TruncatedLogNormal& q, const TruncatedLogUniform& p) {
  if (q.log_lo() != p.log_lo() || q.log_hi() != p.log_hi()) {
    throw ContractError("kl_q_p: q and p must share their truncation bounds");
  }
  const double alpha = q.alpha();
  const double beta = q.beta();
  const double sigma = q.sigma();
  const double log_z = q.log_z();
  const double A = std::exp(norm_log_pdf(alpha) - log_z);
  const double B = std::exp(norm_log_pdf(beta) - log_z);
  const double m = alpha * A - beta * B;  // (alpha phi(alpha) - beta phi(beta)) / Z

  // Entropy of the log-space truncated normal; the 1/theta Jacobians cancel.
  const double entropy = kLogSqrt2Pi + 0.5 + std::log(sigma) + log_z + 0.5 * m;
  const double value = std::max(0.0, std::log(p.width()) - entropy);

  const double dh_dmu = (A - B) / sigma -
                        (A * (1.0 - alpha * alpha) - B * (1.0 - beta * beta)) / (2.0 * sigma) -
                        m * (A - B) / (2.0 * sigma);
  const double dh_dsigma =
      1.0 / sigma + m / sigma -
      (alpha * A * (1.0 - alpha * alpha) - beta * B * (1.0 - beta * beta)) / (2.0 * sigma) -
      m * m / (2.0 * sigma);
  return {value, -dh_dmu, -dh_dsigma};
}

double kl_q_p(const TruncatedLogNormal& q, const TruncatedLogUniform& p) {
  return kl_q_p_grad(q, p).value;
}

}  // namespace bmrs::dist
