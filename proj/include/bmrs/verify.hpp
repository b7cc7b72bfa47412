#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bmrs/criteria.hpp"

namespace bmrs {

struct CheckResult {
  std::string suite;
  std::string name;
  bool pass = false;
  double measured = 0.0;   // worst error, statistic or failure count
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyProfile {
  std::string name = "default";
  int delta_f_configs = 500;
  int mc_configs = 500;
  std::int64_t mc_samples = 100000;
  int kl_configs = 200;
  int moment_configs = 200;
  int ks_samples = 100000;
  std::uint64_t seed = 20240601;

  static VerifyProfile quick();
  static VerifyProfile by_name(const std::string& name);
};

using DeltaFNormalFn =
    std::function<double(const dist::TruncatedLogNormal&, const ReducedLogNormalPrior&)>;

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_pass() const;
  std::vector<CheckResult> suite(const std::string& name) const;
  const CheckResult* find(const std::string& name) const;
  std::string to_json() const;
};

/// Random posteriors used by the oracle suites: mu in [-19, -0.1], sigma in [0.05, 3].
std::vector<dist::TruncatedLogNormal> random_posteriors(int n, std::uint64_t seed);

/// Closed-form kernels of distkit against quadrature and sampling oracles.
std::vector<CheckResult> verify_distkit(const VerifyProfile& profile);
/// Change-in-evidence closed forms against quadrature and Monte Carlo. The
/// log-normal closed form can be swapped to check that the suite notices.
std::vector<CheckResult> verify_criteria(const VerifyProfile& profile,
                                         const DeltaFNormalFn& delta_f_n = delta_f_lognormal);

VerifyReport run_verify(const VerifyProfile& profile,
                        const DeltaFNormalFn& delta_f_n = delta_f_lognormal);

}  // namespace bmrs
