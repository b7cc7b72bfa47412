#include <cmath>
#include <vector>

#include "bmrs/criteria.hpp"
#include "bmrs/errors.hpp"
#include "bmrs/oracle.hpp"
#include "bmrs/rng.hpp"
#include "bmrs/verify.hpp"
#include "doctest.h"

using namespace bmrs;
using dist::TruncatedLogNormal;

namespace {
const double kLn2 = std::log(2.0);
}

TEST_CASE("log-normal reduction: frozen values") {
  const ReducedLogNormalPrior prior;
  CHECK(delta_f_lognormal(TruncatedLogNormal(-18, 1, -20, 0), prior) ==
        doctest::Approx(0.0998082454476301).epsilon(1e-7));
  CHECK(delta_f_lognormal(TruncatedLogNormal(-19, 0.5, -20, 0), prior) ==
        doctest::Approx(0.792957021777377).epsilon(1e-7));
  CHECK(delta_f_lognormal(TruncatedLogNormal(-10, 10, -20, 0), prior) ==
        doctest::Approx(-0.344076126554148).epsilon(1e-7));
  CHECK(delta_f_lognormal(TruncatedLogNormal(-0.5, 0.3, -20, 0), prior) ==
        doctest::Approx(-2109.170090508204).epsilon(1e-9));
}

TEST_CASE("log-normal reduction against the oracles") {
  const ReducedLogNormalPrior prior;
  const TruncatedLogNormal q(-18, 1, -20, 0);
  CHECK(delta_f_lognormal(q, prior) ==
        doctest::Approx(oracle::log_delta_f_lognormal(q, {-20, 1e-12})).epsilon(1e-5));

  // A configuration where the closed form is well inside Monte-Carlo reach.
  const TruncatedLogNormal q2(-16, 2, -20, 0);
  const TruncatedLogNormal spike(-20, 1e-6, -20, 0);
  const auto mc = oracle::mc_delta_f(q2, dist::TruncatedLogUniform(-20, 0), spike, 100000, 3);
  CHECK(std::abs(std::exp(delta_f_lognormal(q2, prior)) - mc.mean) <= 3 * mc.std_error + 1e-9);

  // Far from the spike both sides underflow: the closed form is very negative.
  CHECK(delta_f_lognormal(TruncatedLogNormal(-0.5, 0.3, -20, 0), prior) < 0.0);
}

TEST_CASE("log-normal reduction recovers the original prior") {
  ReducedLogNormalPrior wide{-20, 1e12};
  for (const auto& q : random_posteriors(100, 4)) {
    CHECK(std::abs(delta_f_lognormal(q, wide)) < 1e-3);
  }
}

TEST_CASE("log-normal terms add up") {
  const auto t = delta_f_lognormal_terms(TruncatedLogNormal(-12, 2, -20, 0), {});
  CHECK(t.total() == doctest::Approx(delta_f_lognormal(TruncatedLogNormal(-12, 2, -20, 0), {})));
  CHECK(t.sigma2_tilde_q > 0);
  CHECK(t.sigma2_tilde_q < 1e-12);
}

TEST_CASE("log-uniform reduction") {
  const TruncatedLogNormal q(-15, 2, -20, 0);
  CHECK(delta_f_loguniform(q, {-20, 0}) == 0.0);
  CHECK(delta_f_loguniform(q, ReducedLogUniformPrior::from_precision(8)) ==
        doctest::Approx(0.276594053578959).epsilon(1e-10));
  CHECK(delta_f_loguniform(TruncatedLogNormal(-12, 1, -20, 0), ReducedLogUniformPrior::from_precision(4)) ==
        doctest::Approx(0.417765876513380).epsilon(1e-10));
  // q concentrated inside the reduced support: mass ~ 1, so exp(dF) = 20 / (19 ln 2).
  const TruncatedLogNormal inside(-13.5 * kLn2, 0.1, -20, 0);
  CHECK(std::exp(delta_f_loguniform(inside, ReducedLogUniformPrior::from_precision(4))) ==
        doctest::Approx(20.0 / (19.0 * kLn2)).epsilon(1e-12));
  for (const auto& r : random_posteriors(100, 12)) {
    const auto prior = ReducedLogUniformPrior::from_precision(8);
    CHECK(delta_f_loguniform(r, prior) ==
          doctest::Approx(oracle::log_delta_f_loguniform(r, {prior.log_lo, prior.log_hi}))
              .epsilon(1e-6));
  }
}

TEST_CASE("log-uniform precision support and contracts") {
  const auto p = ReducedLogUniformPrior::from_precision(8, 23);
  CHECK(p.log_lo == doctest::Approx(-23 * kLn2));
  CHECK(p.log_hi == doctest::Approx(-8 * kLn2));
  CHECK_THROWS_AS(ReducedLogUniformPrior::from_precision(23, 23), ContractError);
  CHECK_THROWS_AS(ReducedLogUniformPrior::from_precision(-1, 23), ContractError);
  CHECK_THROWS_AS(delta_f_loguniform(TruncatedLogNormal(-5, 1, -20, 0), {-25, -1}), ContractError);
  CHECK_THROWS_AS(delta_f_loguniform(TruncatedLogNormal(-5, 1, -20, 0), {-3, -4}), ContractError);
}

TEST_CASE("log-uniform reduction moves toward zero as the support widens") {
  // q mass sits inside every interval of the sequence.
  const TruncatedLogNormal q(-14, 0.3, -20, 0);
  double prev = INFINITY;
  for (int p1 = 12; p1 >= 1; --p1) {
    const double df = delta_f_loguniform(q, ReducedLogUniformPrior::from_precision(p1, 23));
    CHECK(df > 0.0);
    CHECK(df < prev);
    prev = df;
  }
}

TEST_CASE("snr and mean theta verdicts") {
  CriterionConfig snr_cfg;
  snr_cfg.kind = CriterionKind::Snr;
  NoiseGateLayer g(3);
  // SNR exactly at the threshold is kept.
  const auto q0 = g.posterior(0);
  snr_cfg.threshold = dist::snr(q0);
  CHECK_FALSE(score_gate_structure(snr_cfg, g, 0, 0).prune);
  snr_cfg.threshold = std::nextafter(dist::snr(q0), INFINITY);
  CHECK(score_gate_structure(snr_cfg, g, 0, 0).prune);

  CHECK(score_snr(TruncatedLogNormal(-1, 0.5, -20, 0)) ==
        doctest::Approx(2.170320936591117844).epsilon(1e-9));

  CriterionConfig mt;
  mt.kind = CriterionKind::MeanTheta;
  g.mu.value[1] = std::log(0.5);
  g.log_sigma.value[1] = std::log(1e-4);
  const auto s = score_gate_structure(mt, g, 1, 0);
  CHECK(s.score == doctest::Approx(0.5).epsilon(1e-3));
  CHECK_FALSE(s.prune);
  for (const auto& q : random_posteriors(50, 2)) {
    const double m = score_mean_theta(q);
    CHECK(m >= std::exp(-20.0));
    CHECK(m <= 1.0);
    CHECK(m == doctest::Approx(oracle::moment(q, 1)).epsilon(1e-8));
  }
}

TEST_CASE("bmrs verdict is the sign of the change in free energy") {
  NoiseGateLayer g(4);
  g.mu.value.data = {-19.0, -10.0, -2.0, -18.0};
  g.log_sigma.value.data = {std::log(0.5), std::log(10.0), 0.0, 0.0};
  CriterionConfig cfg;
  for (std::size_t s = 0; s < 4; ++s) {
    const auto sc = score_gate_structure(cfg, g, s, 0);
    CHECK(sc.prune == (sc.score >= 0.0));
    CHECK(sc.score == doctest::Approx(delta_f_lognormal(g.posterior(s), {})));
  }
  CHECK(score_gate_structure(cfg, g, 0, 0).prune);
  CHECK_FALSE(score_gate_structure(cfg, g, 2, 0).prune);
}

TEST_CASE("l2 score of dense and conv structures") {
  Network net = make_mlp(4, 3, 1, 2, true, 1);
  auto& d = std::get<Dense>(net.layers[0]);
  d.weight.value.data = {0, 0, 0, 0, 1, 0, 0, 0, 1, 2, 2, 4};
  CHECK(score_l2(net, {0, 0}) == 0.0);
  CHECK(score_l2(net, {0, 1}) == 1.0);
  CHECK(score_l2(net, {0, 2}) == doctest::Approx(5.0));
  CHECK_THROWS_AS(score_l2(net, {0, 7}), ContractError);
  CHECK_THROWS_AS(score_l2(net, {3, 0}), ContractError);

  Network cnn = make_lenet5(1, 12, 12, 3, true, 2);
  const auto& c = std::get<Conv2d>(cnn.layers[0]);
  double ss = 0;
  for (std::size_t k = 0; k < 25; ++k) ss += c.weight.value.data[25 + k] * c.weight.value.data[25 + k];
  CHECK(score_l2(cnn, {0, 1}) == doctest::Approx(std::sqrt(ss)));
}

TEST_CASE("criterion parsing and ranking keys") {
  CHECK(parse_criterion("bmrs_u") == CriterionKind::BmrsU);
  CHECK(parse_criterion("mean_theta") == CriterionKind::MeanTheta);
  CHECK_THROWS_AS(parse_criterion("bmrs"), ConfigError);
  for (auto k : {CriterionKind::None, CriterionKind::BmrsN, CriterionKind::BmrsU, CriterionKind::Snr,
                 CriterionKind::MeanTheta, CriterionKind::L2}) {
    CHECK(parse_criterion(criterion_name(k)) == k);
  }
  CHECK(prunability(CriterionKind::BmrsN, 2.0) > prunability(CriterionKind::BmrsN, -1.0));
  CHECK(prunability(CriterionKind::Snr, 0.1) > prunability(CriterionKind::Snr, 3.0));
  CHECK(prunability(CriterionKind::L2, 0.0) > prunability(CriterionKind::L2, 1.0));
}

TEST_CASE("score_network skips pruned structures and keeps order") {
  Network net = make_mlp(5, 4, 2, 3, true, 3);
  auto gates = net.gates();
  std::vector<std::size_t> pos{1};
  prune_indices(*gates[0], pos);
  CriterionConfig cfg;
  const auto scores = score_network(net, cfg);
  CHECK(scores.size() == 7);
  CHECK(scores[0].id == StructureId{0, 0});
  CHECK(scores[1].id == StructureId{0, 2});
  CHECK(scores.back().id == StructureId{1, 3});
}

TEST_CASE("verdicts depend only on the posterior and the prior") {
  NoiseGateLayer a(1), b(1);
  a.mu.value[0] = b.mu.value[0] = -17.0;
  a.log_sigma.value[0] = b.log_sigma.value[0] = std::log(1.3);
  a.mu.grad[0] = 123.0;  // unrelated state must not matter
  for (auto kind : {CriterionKind::BmrsN, CriterionKind::BmrsU}) {
    CriterionConfig cfg;
    cfg.kind = kind;
    const auto sa = score_gate_structure(cfg, a, 0, 0);
    const auto sb = score_gate_structure(cfg, b, 0, 5);
    CHECK(sa.prune == sb.prune);
    CHECK(sa.score == sb.score);
  }
}

TEST_CASE("mutated log-normal closed form is caught by the oracle suite") {
  auto flipped = [](const TruncatedLogNormal& q, const ReducedLogNormalPrior& p) {
    const auto t = delta_f_lognormal_terms(q, p);
    return t.log_z + t.log_var + 0.5 * t.quadratic;
  };
  auto profile = VerifyProfile::quick();
  const auto good = verify_criteria(profile);
  const auto bad = verify_criteria(profile, flipped);
  auto find = [](const std::vector<CheckResult>& v, const std::string& n) {
    for (const auto& c : v)
      if (c.name == n) return c;
    FAIL("missing check " << n);
    return CheckResult{};
  };
  CHECK(find(good, "delta_f_lognormal_quadrature").pass);
  CHECK_FALSE(find(bad, "delta_f_lognormal_quadrature").pass);
  CHECK_FALSE(find(bad, "delta_f_monte_carlo").pass);
}
