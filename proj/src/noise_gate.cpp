#include "bmrs/noise_gate.hpp"

#include <algorithm>
#include <cmath>

#include "bmrs/errors.hpp"

namespace bmrs {

NoiseGateLayer::NoiseGateLayer(std::size_t n, double mu_init, double sigma_init, double lo,
                               double hi)
    : mu(Tensor({n}, mu_init)),
      log_sigma(Tensor({n}, std::log(sigma_init))),
      log_lo(lo),
      log_hi(hi),
      alive(n, 1),
      ids(n) {
  if (!(lo < hi)) throw ContractError("NoiseGateLayer: requires log_lo < log_hi");
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
}

std::size_t NoiseGateLayer::n_alive() const {
  return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), std::uint8_t{1}));
}

double NoiseGateLayer::sigma(std::size_t s) const {
  return std::clamp(std::exp(log_sigma.value[s]), kSigmaMin, kSigmaMax);
}

bool NoiseGateLayer::sigma_clamped(std::size_t s) const {
  const double raw = std::exp(log_sigma.value[s]);
  return raw < kSigmaMin || raw > kSigmaMax;
}

dist::TruncatedLogNormal NoiseGateLayer::posterior(std::size_t s) const {
  return {mu.value[s], sigma(s), log_lo, log_hi};
}

namespace {

std::size_t spatial_extent(const Tensor& t) {
  std::size_t spatial = 1;
  for (std::size_t d = 2; d < t.rank(); ++d) spatial *= t.dim(d);
  return spatial;
}

}  // namespace

Tensor gate_forward(NoiseGateLayer& layer, const Tensor& pre_activation, GateMode mode,
                    std::span<const double> draws) {
  const std::size_t n = layer.size();
  if (pre_activation.rank() < 2 || pre_activation.dim(1) != n) {
    throw ContractError("gate_forward: structure axis of length " + std::to_string(n) +
                        " expected, got shape " + shape_string(pre_activation.shape));
  }
  const std::size_t batch = pre_activation.dim(0);
  if (mode == GateMode::Eval && !draws.empty()) {
    throw ContractError("gate_forward: eval mode takes no noise draws");
  }
  // One value per structure (shared across the batch) or one per example and structure.
  const bool per_example = mode != GateMode::Eval && draws.size() == batch * n && batch > 1;
  if (mode != GateMode::Eval && draws.size() != n && !per_example) {
    throw ContractError("gate_forward: expected one draw per structure (or per example and structure)");
  }
  const std::size_t rows = per_example ? batch : 1;

  std::vector<double> theta(rows * n, 0.0);
  std::vector<double> dmu(mode == GateMode::Train ? rows * n : 0, 0.0);
  std::vector<double> dsigma(dmu.size(), 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    if (!layer.alive[s]) continue;
    switch (mode) {
      case GateMode::Train: {
        const auto q = layer.posterior(s);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t k = r * n + s;
          const auto sample = dist::sample_trunc_log_normal_grad(q, draws[k]);
          theta[k] = sample.theta;
          dmu[k] = sample.dtheta_dmu;
          dsigma[k] = sample.dtheta_dsigma;
        }
        break;
      }
      case GateMode::Eval:
        theta[s] = dist::trunc_log_normal_moment(layer.posterior(s), 1);
        break;
      case GateMode::Fixed:
        for (std::size_t r = 0; r < rows; ++r) theta[r * n + s] = draws[r * n + s];
        break;
    }
  }

  Tensor out(pre_activation.shape);
  const std::size_t spatial = spatial_extent(pre_activation);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* th = theta.data() + (per_example ? b * n : 0);
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (b * n + s) * spatial;
      const double t = th[s];
      for (std::size_t k = 0; k < spatial; ++k) {
        out.data[base + k] = t * pre_activation.data[base + k];
      }
    }
  }

  if (mode == GateMode::Train) {
    layer.input = pre_activation;
    layer.theta = std::move(theta);
    layer.dtheta_dmu = std::move(dmu);
    layer.dtheta_dsigma = std::move(dsigma);
  }
  return out;
}

Tensor gate_backward(NoiseGateLayer& layer, const Tensor& grad_output) {
  const Tensor& in = layer.input;
  const std::size_t n = layer.size();
  // A gate with every structure removed caches no theta at all.
  if (in.shape != grad_output.shape || in.rank() < 2 ||
      (n > 0 && (layer.theta.empty() || layer.theta.size() % n != 0))) {
    throw ContractError("gate_backward: no matching train-mode forward pass");
  }
  const std::size_t batch = in.dim(0);
  const bool per_example = layer.theta.size() == batch * n && batch > 1;
  const std::size_t spatial = spatial_extent(in);
  Tensor grad_in(in.shape);
  std::vector<double> g_mu(n, 0.0);
  std::vector<double> g_sigma(n, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = per_example ? b * n : 0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (b * n + s) * spatial;
      const double t = layer.theta[off + s];
      double acc = 0.0;
      for (std::size_t k = 0; k < spatial; ++k) {
        acc += grad_output.data[base + k] * in.data[base + k];
        grad_in.data[base + k] = t * grad_output.data[base + k];
      }
      g_mu[s] += acc * layer.dtheta_dmu[off + s];
      g_sigma[s] += acc * layer.dtheta_dsigma[off + s];
    }
  }
  for (std::size_t s = 0; s < n; ++s) {
    if (!layer.alive[s]) continue;
    layer.mu.grad[s] += g_mu[s];
    if (!layer.sigma_clamped(s)) layer.log_sigma.grad[s] += g_sigma[s] * layer.sigma(s);
  }
  return grad_in;
}

double gate_kl(const NoiseGateLayer& layer) {
  const auto prior = layer.prior();
  double total = 0.0;
  for (std::size_t s = 0; s < layer.size(); ++s) {
    if (layer.alive[s]) total += dist::kl_q_p(layer.posterior(s), prior);
  }
  return total;
}

void gate_kl_backward(NoiseGateLayer& layer, double scale) {
  const auto prior = layer.prior();
  for (std::size_t s = 0; s < layer.size(); ++s) {
    if (!layer.alive[s]) continue;
    const auto g = dist::kl_q_p_grad(layer.posterior(s), prior);
    layer.mu.grad[s] += scale * g.d_mu;
    if (!layer.sigma_clamped(s)) layer.log_sigma.grad[s] += scale * g.d_sigma * layer.sigma(s);
  }
}

RemovalDescriptor prune_indices(NoiseGateLayer& layer, std::span<const std::size_t> positions) {
  std::vector<std::uint8_t> seen(layer.size(), 0);
  for (std::size_t p : positions) {
    if (p >= layer.size()) throw ContractError("prune_indices: position out of range");
    if (!layer.alive[p] || seen[p]) {
      throw ContractError("prune_indices: structure " + std::to_string(layer.ids[p]) +
                          " is already pruned");
    }
    seen[p] = 1;
  }
  RemovalDescriptor out;
  for (std::size_t p : positions) {
    layer.alive[p] = 0;
    out.positions.push_back(p);
    out.ids.push_back(layer.ids[p]);
  }
  return out;
}

}  // namespace bmrs
