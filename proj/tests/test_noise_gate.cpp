#include <cmath>
#include <vector>

#include "bmrs/distkit.hpp"
#include "bmrs/errors.hpp"
#include "bmrs/noise_gate.hpp"
#include "doctest.h"

using namespace bmrs;

TEST_CASE("fresh gate") {
  NoiseGateLayer g(5);
  CHECK(g.size() == 5);
  CHECK(g.n_alive() == 5);
  CHECK(g.sigma(0) == doctest::Approx(1.0));
  CHECK(g.mu.value[4] == 0.0);
  CHECK(g.ids == std::vector<std::size_t>{0, 1, 2, 3, 4});
}

TEST_CASE("sigma is clamped and a clamped sigma gets no gradient") {
  NoiseGateLayer g(3);
  g.log_sigma.value[0] = -50.0;
  g.log_sigma.value[1] = 50.0;
  CHECK(g.sigma(0) == kSigmaMin);
  CHECK(g.sigma(1) == kSigmaMax);
  CHECK(g.sigma_clamped(0));
  CHECK_FALSE(g.sigma_clamped(2));
  gate_kl_backward(g, 1.0);
  CHECK(g.log_sigma.grad[0] == 0.0);
  CHECK(g.log_sigma.grad[1] == 0.0);
  CHECK(g.log_sigma.grad[2] != 0.0);
}

TEST_CASE("train mode multiplies each channel by its sampled theta") {
  NoiseGateLayer g(2);
  g.mu.value[1] = -4.0;
  Tensor pre({2, 2, 3}, 1.0);  // [batch, channels, spatial]
  const std::vector<double> u{0.3, 0.8};
  const Tensor out = gate_forward(g, pre, GateMode::Train, u);
  for (std::size_t s = 0; s < 2; ++s) {
    const double t = dist::sample_trunc_log_normal(g.posterior(s), u[s]);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k < 3; ++k) CHECK(out[(b * 2 + s) * 3 + k] == t);
  }
}

TEST_CASE("per-example draws give each row its own theta") {
  NoiseGateLayer g(2);
  Tensor pre({3, 2}, 1.0);
  const std::vector<double> u{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const Tensor out = gate_forward(g, pre, GateMode::Train, u);
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(out[k] == dist::sample_trunc_log_normal(g.posterior(k % 2), u[k]));
  }
}

TEST_CASE("fixed mode uses the supplied multipliers, except for pruned structures") {
  NoiseGateLayer g(3);
  std::vector<std::size_t> pos{1};
  prune_indices(g, pos);
  Tensor pre({1, 3}, 2.0);
  const Tensor out = gate_forward(g, pre, GateMode::Fixed, std::vector<double>{0.5, 0.7, 0.9});
  CHECK(out[0] == 1.0);
  CHECK(out[1] == 0.0);
  CHECK(out[2] == doctest::Approx(1.8));
}

TEST_CASE("KL counts only alive structures") {
  NoiseGateLayer g(4);
  const double full = gate_kl(g);
  CHECK(full == doctest::Approx(4 * dist::kl_q_p(g.posterior(0), g.prior())));
  std::vector<std::size_t> pos{0, 2};
  prune_indices(g, pos);
  CHECK(gate_kl(g) == doctest::Approx(full / 2));
}

TEST_CASE("gate contracts") {
  NoiseGateLayer g(3);
  Tensor pre({2, 3}, 1.0);
  CHECK_THROWS_AS(gate_forward(g, pre, GateMode::Train, std::vector<double>{0.5}), ContractError);
  CHECK_THROWS_AS(gate_forward(g, pre, GateMode::Eval, std::vector<double>{0.1, 0.2, 0.3}),
                  ContractError);
  CHECK_THROWS_AS(gate_forward(g, Tensor({2, 4}), GateMode::Eval), ContractError);
  NoiseGateLayer fresh(3);
  CHECK_THROWS_AS(gate_backward(fresh, pre), ContractError);
  std::vector<std::size_t> bad{7};
  CHECK_THROWS_AS(prune_indices(g, bad), ContractError);
}

TEST_CASE("a gate with no structures passes an empty activation through") {
  NoiseGateLayer g(0);
  Tensor pre({4, 0});
  const Tensor out = gate_forward(g, pre, GateMode::Train, std::vector<double>{});
  CHECK(out.size() == 0);
  CHECK(gate_backward(g, out).size() == 0);
  CHECK(gate_kl(g) == 0.0);
}
