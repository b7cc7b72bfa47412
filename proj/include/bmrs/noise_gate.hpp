#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bmrs/distkit.hpp"
#include "bmrs/tensor.hpp"

namespace bmrs {

inline constexpr double kDefaultLogLo = -20.0;
inline constexpr double kDefaultLogHi = 0.0;
inline constexpr double kSigmaMin = 1e-4;
inline constexpr double kSigmaMax = 10.0;

enum class GateMode {
  Train,  // theta sampled from u
  Eval,   // theta = E_q[theta]
  Fixed,  // theta supplied by the caller
};

/// Multiplicative noise gate over one structural axis (dense units or conv
/// channels). Structure s scales axis-1 slice s of its input by theta_s with
/// q(theta_s) = LogN_[a,b](mu_s, sigma_s^2).
struct NoiseGateLayer {
  Param mu;         // [n]
  Param log_sigma;  // [n]
  double log_lo = kDefaultLogLo;
  double log_hi = kDefaultLogHi;
  std::vector<std::uint8_t> alive;
  // Structure index in the network as originally built; stable under shrinking.
  std::vector<std::size_t> ids;

  // Forward caches (train mode).
  Tensor input;
  std::vector<double> theta;
  std::vector<double> dtheta_dmu;
  std::vector<double> dtheta_dsigma;

  NoiseGateLayer() = default;
  NoiseGateLayer(std::size_t n, double mu_init = 0.0, double sigma_init = 1.0,
                 double lo = kDefaultLogLo, double hi = kDefaultLogHi);

  std::size_t size() const { return alive.size(); }
  std::size_t n_alive() const;
  /// exp(log_sigma) clamped to [kSigmaMin, kSigmaMax].
  double sigma(std::size_t s) const;
  bool sigma_clamped(std::size_t s) const;
  dist::TruncatedLogNormal posterior(std::size_t s) const;
  dist::TruncatedLogUniform prior() const { return {log_lo, log_hi}; }
};

/// Applies the gate. `draws` holds u values (Train) or multipliers (Fixed),
/// either one per structure or batch * n laid out [example][structure]; it
/// must be empty in Eval mode.
Tensor gate_forward(NoiseGateLayer& layer, const Tensor& pre_activation, GateMode mode,
                    std::span<const double> draws = {});

/// Back-propagates through the last Train-mode gate_forward; accumulates
/// d(loss)/d(mu) and d(loss)/d(log_sigma).
Tensor gate_backward(NoiseGateLayer& layer, const Tensor& grad_output);

/// Sum of KL(q_s || LogU) over alive structures.
double gate_kl(const NoiseGateLayer& layer);

/// Adds scale * d(gate_kl)/d(params) to the gradients.
void gate_kl_backward(NoiseGateLayer& layer, double scale);

struct RemovalDescriptor {
  std::vector<std::size_t> positions;  // current positions inside the layer
  std::vector<std::size_t> ids;        // original structure ids
};

/// Marks structures as pruned. Positions must be alive.
RemovalDescriptor prune_indices(NoiseGateLayer& layer, std::span<const std::size_t> positions);

}  // namespace bmrs
