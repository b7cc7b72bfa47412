#pragma once
// Small hand-built networks shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <variant>
#include <vector>

#include "bmrs/network.hpp"
#include "bmrs/noise_gate.hpp"
#include "bmrs/rng.hpp"

namespace bmrs::fixtures {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.data) v = uniform(rng, -scale, scale);
  return t;
}

inline Dense dense(std::size_t in, std::size_t out, Rng& rng) {
  Dense d;
  d.weight = Param(random_tensor({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
  d.bias = Param(random_tensor({out}, rng, 0.1));
  return d;
}

inline Conv2d conv(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride,
                   std::size_t padding, Rng& rng) {
  Conv2d c;
  const double s = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
  c.weight = Param(random_tensor({out_ch, in_ch, k, k}, rng, s));
  c.bias = Param(random_tensor({out_ch}, rng, 0.1));
  c.stride = stride;
  c.padding = padding;
  return c;
}

// Spread the gate posteriors so the check does not sit at one point of q.
inline void spread_gates(Network& net) {
  for (NoiseGateLayer* g : net.gates()) {
    for (std::size_t s = 0; s < g->size(); ++s) {
      g->mu.value[s] = -3.0 + 0.5 * static_cast<double>(s % 8);
      g->log_sigma.value[s] = -0.5 + 0.2 * static_cast<double>(s % 5);
    }
  }
}

// 2 hidden layers of 8 gated units.
inline Network small_mlp(std::uint64_t seed, std::size_t input = 5, std::size_t classes = 3) {
  Network net = make_mlp(input, 8, 2, classes, true, seed);
  spread_gates(net);
  return net;
}

// conv -> gate -> [relu] -> flatten -> dense, on [c, h, w] inputs.
inline Network one_conv_net(std::uint64_t seed, std::size_t stride = 1, std::size_t padding = 1,
                            bool relu = true, std::size_t in_ch = 2, std::size_t hw = 6,
                            std::size_t classes = 3) {
  Rng rng(seed);
  Network net;
  net.input_shape = {in_ch, hw, hw};
  net.layers.emplace_back(conv(in_ch, 4, 3, stride, padding, rng));
  net.layers.emplace_back(NoiseGateLayer(4));
  if (relu) net.layers.emplace_back(Relu{});
  net.layers.emplace_back(Flatten{});
  const std::size_t flat = shape_size(net.layer_shapes().back());
  net.layers.emplace_back(dense(flat, classes, rng));
  spread_gates(net);
  return net;
}

inline Tensor random_batch(const Network& net, std::size_t batch, Rng& rng) {
  Shape s{batch};
  s.insert(s.end(), net.input_shape.begin(), net.input_shape.end());
  return random_tensor(s, rng);
}

inline std::vector<int> cyclic_labels(std::size_t batch, int classes) {
  std::vector<int> y(batch);
  for (std::size_t i = 0; i < batch; ++i) y[i] = static_cast<int>(i) % classes;
  return y;
}

// One u per structure, or one per (example, structure) when per_example > 0.
inline GateDraws random_draws(Network& net, Rng& rng, std::size_t per_example = 0) {
  GateDraws d;
  for (NoiseGateLayer* g : net.gates()) {
    std::vector<double> u(g->size() * std::max<std::size_t>(per_example, 1));
    for (double& v : u) v = open_uniform(rng);
    d.push_back(std::move(u));
  }
  return d;
}

// Prunes a random subset of every gate, always leaving one structure alive.
inline void prune_random(Network& net, Rng& rng, double fraction) {
  for (NoiseGateLayer* g : net.gates()) {
    std::vector<std::size_t> pos;
    for (std::size_t s = 0; s < g->size(); ++s) {
      if (g->alive[s] && uniform(rng, 0.0, 1.0) < fraction) pos.push_back(s);
    }
    if (pos.size() == g->n_alive()) pos.pop_back();
    if (!pos.empty()) prune_indices(*g, pos);
  }
}

// Smallest |input| over every relu for a train-mode pass with the given draws.
inline double min_relu_margin(const Network& net, const Tensor& x, const GateDraws& draws) {
  double margin = INFINITY;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!std::holds_alternative<Relu>(net.layers[i])) continue;
    Network prefix;
    prefix.input_shape = net.input_shape;
    prefix.layers.assign(net.layers.begin(), net.layers.begin() + static_cast<std::ptrdiff_t>(i));
    GateDraws d(draws.begin(), draws.begin() + static_cast<std::ptrdiff_t>(prefix.gate_count()));
    for (double v : prefix.forward(x, Mode::Train, d).data) margin = std::min(margin, std::abs(v));
  }
  return margin;
}

// Finite differences across a relu kink disagree with the one-sided analytic
// gradient, so gradient checks draw inputs until every relu input is clear of 0.
// With gate multipliers <= 1 and inputs in [-1, 1] a step h moves a relu input
// by about h, so 3h is enough room.
inline Tensor kink_free_batch(const Network& net, std::size_t batch, const GateDraws& draws,
                              Rng& rng, double margin = 3e-4) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor x = random_batch(net, batch, rng);
    if (min_relu_margin(net, x, draws) > margin) return x;
  }
  throw std::runtime_error("kink_free_batch: no input clear of the relu kinks");
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace bmrs::fixtures
