#include "bmrs/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace bmrs {

double GradCheckResult::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

double objective(Network& net, const Tensor& x, std::span<const int> labels,
                 const GateDraws& draws, double kl_weight) {
  const Tensor logits = net.forward(x, Mode::Train, draws);
  return softmax_cross_entropy(logits, labels) + kl_weight * net.kl_total();
}

GradCheckResult gradient_check(Network& net, const Tensor& x, std::span<const int> labels,
                               const GateDraws& draws, double kl_weight, double h,
                               double floor) {
  net.zero_grad();
  const Tensor logits = net.forward(x, Mode::Train, draws);
  Tensor g;
  softmax_cross_entropy(logits, labels, &g);
  net.backward(g);
  net.accumulate_kl_grad(kl_weight);

  GradCheckResult out;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    std::vector<std::pair<std::string, Param*>> params;
    Layer& layer = net.layers[li];
    const std::string prefix = "layer " + std::to_string(li) + " " + layer_name(layer_tag(layer));
    if (auto* d = std::get_if<Dense>(&layer)) {
      params = {{prefix + " weight", &d->weight}, {prefix + " bias", &d->bias}};
    } else if (auto* c = std::get_if<Conv2d>(&layer)) {
      params = {{prefix + " weight", &c->weight}, {prefix + " bias", &c->bias}};
    } else if (auto* gl = std::get_if<NoiseGateLayer>(&layer)) {
      params = {{prefix + " mu", &gl->mu}, {prefix + " log_sigma", &gl->log_sigma}};
    }
    for (auto& [name, p] : params) {
      const Tensor analytic = p->grad;
      GradCheckEntry e{name, 0.0, 0};
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double keep = p->value[i];
        p->value[i] = keep + h;
        const double up = objective(net, x, labels, draws, kl_weight);
        p->value[i] = keep - h;
        const double down = objective(net, x, labels, draws, kl_weight);
        p->value[i] = keep;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        const double err = std::abs(analytic[i] - numeric) / denom;
        if (err > e.max_rel_error) {
          e.max_rel_error = err;
          e.worst_index = i;
        }
      }
      out.entries.push_back(e);
    }
  }
  return out;
}

}  // namespace bmrs
