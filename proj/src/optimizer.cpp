#include "bmrs/optimizer.hpp"

#include <cmath>

#include "bmrs/errors.hpp"

namespace bmrs {

void adam_step(AdamState& state, std::span<Param* const> params) {
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (Param* p : params) {
    if (p->grad.size() != p->value.size() || p->m.size() != p->value.size() ||
        p->v.size() != p->value.size()) {
      throw ContractError("adam_step: accumulator shape does not match parameter");
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      p->m[i] = c.beta1 * p->m[i] + (1.0 - c.beta1) * g;
      p->v[i] = c.beta2 * p->v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = p->m[i] / bc1;
      const double v_hat = p->v[i] / bc2;
      p->value[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

}  // namespace bmrs
