#include "bmrs/verify.hpp"

#include <algorithm>
#include <cmath>
#include "json.hpp"
#include <random>
#include <sstream>

#include "bmrs/errors.hpp"
#include "bmrs/oracle.hpp"
#include "bmrs/rng.hpp"

namespace bmrs {

namespace {

constexpr double kLo = kDefaultLogLo;
constexpr double kHi = kDefaultLogHi;

// Largest relative error seen over a batch, with the config that produced it.
struct Worst {
  double err = 0.0;
  std::string where;
  int failures = 0;

  void add(double e, double tol, const dist::TruncatedLogNormal& q) {
    if (!(e <= tol)) ++failures;
    if (!(e <= err)) {
      err = e;
      std::ostringstream os;
      os.precision(6);
      os << "mu=" << q.mu() << " sigma=" << q.sigma();
      where = os.str();
    }
  }
};

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-300);
}

// Mixed error for log-scale quantities that may sit near zero.
double mixed_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

CheckResult make(const std::string& suite, const std::string& name, const Worst& w, double tol,
                 const std::string& extra = "") {
  CheckResult c;
  c.suite = suite;
  c.name = name;
  c.pass = w.failures == 0;
  c.measured = w.err;
  c.tolerance = tol;
  c.detail = "worst at " + w.where + (extra.empty() ? "" : "; " + extra);
  return c;
}

}  // namespace

VerifyProfile VerifyProfile::quick() {
  VerifyProfile p;
  p.name = "quick";
  p.delta_f_configs = 60;
  p.mc_configs = 20;
  p.mc_samples = 20000;
  p.kl_configs = 40;
  p.moment_configs = 40;
  p.ks_samples = 100000;
  return p;
}

VerifyProfile VerifyProfile::by_name(const std::string& name) {
  if (name == "default") return VerifyProfile{};
  if (name == "quick") return quick();
  throw ConfigError("unknown verify profile '" + name + "' (expected default or quick)");
}

bool VerifyReport::all_pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
}

std::vector<CheckResult> VerifyReport::suite(const std::string& name) const {
  std::vector<CheckResult> out;
  for (const auto& c : checks) {
    if (c.suite == name) out.push_back(c);
  }
  return out;
}

const CheckResult* VerifyReport::find(const std::string& name) const {
  for (const auto& c : checks) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

std::string VerifyReport::to_json() const {
  nlohmann::ordered_json j;
  j["all_pass"] = all_pass();
  nlohmann::ordered_json suites = nlohmann::ordered_json::object();
  for (const auto& c : checks) {
    auto& s = suites[c.suite];
    if (!s.contains("passed")) {
      s["passed"] = 0;
      s["failed"] = 0;
      s["checks"] = nlohmann::ordered_json::array();
    }
    s[c.pass ? "passed" : "failed"] = s[c.pass ? "passed" : "failed"].get<int>() + 1;
    s["checks"].push_back({{"name", c.name},
                           {"pass", c.pass},
                           {"measured", c.measured},
                           {"tolerance", c.tolerance},
                           {"detail", c.detail}});
  }
  j["suites"] = suites;
  return j.dump(2);
}

std::vector<dist::TruncatedLogNormal> random_posteriors(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<dist::TruncatedLogNormal> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double mu = uniform(rng, -19.0, -0.1);
    const double sigma = uniform(rng, 0.05, 3.0);
    out.emplace_back(mu, sigma, kLo, kHi);
  }
  return out;
}

std::vector<CheckResult> verify_distkit(const VerifyProfile& profile) {
  const std::string suite = "distkit";
  std::vector<CheckResult> out;

  {
    Worst w;
    for (const auto& q : random_posteriors(profile.moment_configs, mix_seed(profile.seed, 1))) {
      w.add(std::abs(oracle::pdf_mass(q) - 1.0), 1e-8, q);
    }
    const double lu = std::abs(oracle::pdf_mass(dist::TruncatedLogUniform(kLo, kHi)) - 1.0);
    w.add(lu, 1e-8, dist::TruncatedLogNormal(0.0, 1.0, kLo, kHi));
    out.push_back(make(suite, "pdf_normalisation", w, 1e-8));
  }
  {
    Worst w;
    const double got = dist::trunc_normal_cdf(0.3, 0.0, 1.0, -1.0, 1.0);
    w.add(rel_err(got, oracle::trunc_normal_cdf(0.3, 0.0, 1.0, -1.0, 1.0)), 1e-10,
          dist::TruncatedLogNormal(0.0, 1.0, -1.0, 1.0));
    Rng rng(mix_seed(profile.seed, 2));
    for (const auto& q : random_posteriors(profile.moment_configs / 4, mix_seed(profile.seed, 3))) {
      const double x = uniform(rng, q.mu() - 2 * q.sigma(), q.mu() + 2 * q.sigma());
      const double a = dist::trunc_normal_cdf(x, q.mu(), q.sigma(), kLo, kHi);
      const double b = oracle::trunc_normal_cdf(x, q.mu(), q.sigma(), kLo, kHi);
      w.add(std::abs(a - b) / std::max(b, 1e-12), 1e-8, q);
    }
    out.push_back(make(suite, "trunc_normal_cdf_quadrature", w, 1e-8));
  }
  {
    Worst w;
    for (const auto& q : random_posteriors(profile.moment_configs, mix_seed(profile.seed, 4))) {
      for (int k : {1, 2}) w.add(rel_err(dist::trunc_log_normal_moment(q, k), oracle::moment(q, k)), 1e-8, q);
    }
    out.push_back(make(suite, "moments_quadrature", w, 1e-8));
  }
  {
    Worst w;
    int negative = 0;
    for (const auto& q : random_posteriors(profile.kl_configs, mix_seed(profile.seed, 5))) {
      const double kl = dist::kl_q_p(q, dist::TruncatedLogUniform(kLo, kHi));
      negative += kl < 0.0;
      w.add(rel_err(kl, oracle::kl_q_p(q)), 1e-6, q);
    }
    Rng rng(mix_seed(profile.seed, 6));
    for (int i = 0; i < 1000; ++i) {
      const dist::TruncatedLogNormal q(uniform(rng, -30.0, 10.0), std::exp(uniform(rng, -9.0, 9.0)), kLo, kHi);
      negative += dist::kl_q_p(q, dist::TruncatedLogUniform(kLo, kHi)) < 0.0;
    }
    w.failures += negative;
    out.push_back(make(suite, "kl_quadrature", w, 1e-6, std::to_string(negative) + " negative values"));
  }
  {
    // Kolmogorov-Smirnov distance of reparameterised draws from the analytic CDF.
    Worst w;
    const std::vector<dist::TruncatedLogNormal> cases = {
        {0.0, 1.0, kLo, kHi}, {-5.0, 2.0, kLo, kHi}, {-19.5, 0.5, kLo, kHi}, {-10.0, 8.0, kLo, kHi}};
    Rng rng(mix_seed(profile.seed, 7));
    for (const auto& q : cases) {
      std::vector<double> x(profile.ks_samples);
      for (double& v : x) v = std::log(dist::sample_trunc_log_normal(q, open_uniform(rng)));
      std::sort(x.begin(), x.end());
      double ks = 0.0;
      const double n = static_cast<double>(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double f = dist::trunc_normal_cdf(x[i], q.mu(), q.sigma(), kLo, kHi);
        ks = std::max({ks, std::abs(f - i / n), std::abs(f - (i + 1) / n)});
      }
      w.add(ks, 0.01, q);
    }
    out.push_back(make(suite, "sampler_ks", w, 0.01));
  }
  {
    Worst w;
    for (const auto& q : random_posteriors(50, mix_seed(profile.seed, 8))) {
      for (double u : {1e-6, 1e-3, 0.1, 0.5, 0.9, 1 - 1e-3, 1 - 1e-6}) {
        const double x = std::log(dist::sample_trunc_log_normal(q, u));
        w.add(std::abs(dist::trunc_normal_cdf(x, q.mu(), q.sigma(), kLo, kHi) - u), 1e-9, q);
      }
    }
    out.push_back(make(suite, "sampler_roundtrip", w, 1e-9));
  }
  return out;
}

std::vector<CheckResult> verify_criteria(const VerifyProfile& profile,
                                         const DeltaFNormalFn& delta_f_n) {
  const std::string suite = "criteria";
  std::vector<CheckResult> out;
  const ReducedLogNormalPrior spike{};
  const auto qs = random_posteriors(profile.delta_f_configs, mix_seed(profile.seed, 11));

  {
    Worst w;
    for (const auto& q : qs) {
      w.add(mixed_err(delta_f_n(q, spike),
                      oracle::log_delta_f_lognormal(q, {spike.mu_tilde_p, spike.sigma2_tilde_p})),
            1e-5, q);
    }
    out.push_back(make(suite, "delta_f_lognormal_quadrature", w, 1e-5));
  }
  {
    Worst w;
    for (const auto& q : qs) {
      for (int p1 : {4, 8}) {
        const auto r = ReducedLogUniformPrior::from_precision(p1, 23);
        w.add(mixed_err(delta_f_loguniform(q, r), oracle::log_delta_f_loguniform(q, {r.log_lo, r.log_hi})),
              1e-6, q);
      }
    }
    out.push_back(make(suite, "delta_f_loguniform_quadrature", w, 1e-6));
  }
  {
    // exp(dF) = E_{p~}[q / p]; each config must fall within 3 standard errors
    // (plus a 1e-9 absolute floor for values that underflow on both sides).
    // At 3 sigma about 0.3% of honest configs miss, so the check allows 1%.
    const dist::TruncatedLogUniform p(kLo, kHi);
    const auto mc_qs = random_posteriors(profile.mc_configs, mix_seed(profile.seed, 12));
    int total = 0, outside = 0;
    double worst_z = 0.0;
    std::string where;
    std::uint64_t stream = 0;
    for (const auto& q : mc_qs) {
      const auto r = ReducedLogUniformPrior::from_precision(8, 23);
      const dist::TruncatedLogNormal spike_prior(spike.mu_tilde_p, std::sqrt(spike.sigma2_tilde_p), kLo, kHi);
      const std::pair<double, oracle::ReducedPrior> cases[] = {
          {std::exp(delta_f_n(q, spike)), spike_prior},
          {std::exp(delta_f_loguniform(q, r)), dist::TruncatedLogUniform(r.log_lo, r.log_hi)}};
      for (const auto& [closed, prior] : cases) {
        const auto mc = oracle::mc_delta_f(q, p, prior, profile.mc_samples, mix_seed(profile.seed, 100 + stream++));
        const double band = 3.0 * mc.std_error + 1e-9 + 1e-9 * std::abs(mc.mean);
        const double dev = std::abs(closed - mc.mean);
        ++total;
        if (!(dev <= band)) ++outside;
        const double z = dev / band;
        if (z > worst_z) {
          worst_z = z;
          std::ostringstream os;
          os << "mu=" << q.mu() << " sigma=" << q.sigma();
          where = os.str();
        }
      }
    }
    CheckResult c;
    c.suite = suite;
    c.name = "delta_f_monte_carlo";
    c.measured = total ? static_cast<double>(outside) / total : 0.0;
    c.tolerance = 0.01;
    c.pass = c.measured <= c.tolerance;
    c.detail = std::to_string(outside) + "/" + std::to_string(total) +
               " outside 3 s.e.; worst deviation " + std::to_string(worst_z) + " bands at " + where;
    out.push_back(c);
  }
  {
    Worst w;
    for (const auto& q : random_posteriors(100, mix_seed(profile.seed, 13))) {
      w.add(std::abs(delta_f_n(q, {spike.mu_tilde_p, 1e12})), 1e-3, q);
    }
    out.push_back(make(suite, "delta_f_lognormal_prior_recovery", w, 1e-3));
  }
  {
    Worst w;
    for (const auto& q : random_posteriors(100, mix_seed(profile.seed, 14))) {
      const double v = delta_f_loguniform(q, {q.log_lo(), q.log_hi()});
      w.add(std::abs(v), 0.0, q);
    }
    out.push_back(make(suite, "delta_f_loguniform_identity", w, 0.0));
  }
  return out;
}

VerifyReport run_verify(const VerifyProfile& profile, const DeltaFNormalFn& delta_f_n) {
  VerifyReport r;
  r.checks = verify_distkit(profile);
  auto c = verify_criteria(profile, delta_f_n);
  r.checks.insert(r.checks.end(), c.begin(), c.end());
  return r;
}

}  // namespace bmrs
