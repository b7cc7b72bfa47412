#include "bmrs/network.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <optional>

#include "bmrs/errors.hpp"
#include "bmrs/rng.hpp"

namespace bmrs {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

struct ConvGeom {
  std::size_t c, h, w, oh, ow;
};

ConvGeom conv_geometry(const Conv2d& conv, const Shape& in) {
  if (in.size() != 4 || in[1] != conv.in_channels()) {
    throw ContractError("conv2d: expected [batch, " + std::to_string(conv.in_channels()) +
                        ", h, w], got " + shape_string(in));
  }
  const std::size_t ph = in[2] + 2 * conv.padding;
  const std::size_t pw = in[3] + 2 * conv.padding;
  if (conv.kh() > ph || conv.kw() > pw) throw ContractError("conv2d: kernel larger than input");
  return {in[1], in[2], in[3], (ph - conv.kh()) / conv.stride + 1,
          (pw - conv.kw()) / conv.stride + 1};
}

// Output columns ox whose input column ox*stride + j - pad lands inside [0, w).
struct ColRange {
  std::size_t lo, hi;
};

ColRange valid_cols(std::size_t j, std::size_t pad, std::size_t stride, std::size_t w,
                    std::size_t ow) {
  const auto ceil_div = [&](std::ptrdiff_t a) -> std::ptrdiff_t {
    const auto s = static_cast<std::ptrdiff_t>(stride);
    return a <= 0 ? -((-a) / s) : (a + s - 1) / s;
  };
  const auto off = static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(j);
  std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, ceil_div(off));
  std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow),
                                               ceil_div(static_cast<std::ptrdiff_t>(w) + off));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

Tensor im2col(const Conv2d& conv, const Tensor& x, const ConvGeom& g) {
  const std::size_t batch = x.dim(0);
  const std::size_t kh = conv.kh(), kw = conv.kw(), st = conv.stride;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncol = batch * plane;
  Tensor cols({g.c * kh * kw, ncol});
  const auto pad = static_cast<std::ptrdiff_t>(conv.padding);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = cols.data.data() + ((c * kh + i) * kw + j) * ncol;
        const ColRange r = valid_cols(j, conv.padding, st, g.w, g.ow);
        const auto shift = static_cast<std::ptrdiff_t>(j) - pad;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = x.data.data() + (b * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const auto y = static_cast<std::ptrdiff_t>(oy * st + i) - pad;
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
            double* dst = row + b * plane + oy * g.ow;
            const std::ptrdiff_t base = y * static_cast<std::ptrdiff_t>(g.w) + shift;
            if (st == 1) {
              std::copy(src + base + r.lo, src + base + r.hi, dst + r.lo);
            } else {
              for (std::size_t ox = r.lo; ox < r.hi; ++ox) {
                dst[ox] = src[base + static_cast<std::ptrdiff_t>(ox * st)];
              }
            }
          }
        }
      }
    }
  }
  return cols;
}

void col2im(const Conv2d& conv, const RowMat& dcols, const ConvGeom& g, Tensor& dx) {
  const std::size_t batch = dx.dim(0);
  const std::size_t kh = conv.kh(), kw = conv.kw(), st = conv.stride;
  const std::size_t plane = g.oh * g.ow;
  const auto pad = static_cast<std::ptrdiff_t>(conv.padding);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const double* row = dcols.data() + ((c * kh + i) * kw + j) * dcols.cols();
        const ColRange r = valid_cols(j, conv.padding, st, g.w, g.ow);
        const auto shift = static_cast<std::ptrdiff_t>(j) - pad;
        for (std::size_t b = 0; b < batch; ++b) {
          double* dst = dx.data.data() + (b * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const auto y = static_cast<std::ptrdiff_t>(oy * st + i) - pad;
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const double* src = row + b * plane + oy * g.ow;
            const std::ptrdiff_t base = y * static_cast<std::ptrdiff_t>(g.w) + shift;
            for (std::size_t ox = r.lo; ox < r.hi; ++ox) {
              dst[base + static_cast<std::ptrdiff_t>(ox * st)] += src[ox];
            }
          }
        }
      }
    }
  }
}

Tensor dense_forward(Dense& d, const Tensor& x, bool cache) {
  if (x.rank() != 2 || x.dim(1) != d.in()) {
    throw ContractError("dense: expected [batch, " + std::to_string(d.in()) + "], got " +
                        shape_string(x.shape));
  }
  const std::size_t batch = x.dim(0);
  Tensor y({batch, d.out()});
  ConstMatMap X(x.data.data(), batch, d.in());
  ConstMatMap W(d.weight.value.data.data(), d.out(), d.in());
  MatMap Y(y.data.data(), batch, d.out());
  Y.noalias() = X * W.transpose();
  Y.rowwise() += ConstVecMap(d.bias.value.data.data(), d.out()).transpose();
  if (cache) d.input = x;
  return y;
}

Tensor dense_backward(Dense& d, const Tensor& g, bool need_dx) {
  const Tensor& x = d.input;
  if (x.rank() != 2 || g.rank() != 2 || g.dim(0) != x.dim(0) || g.dim(1) != d.out()) {
    throw ContractError("dense: backward without matching forward");
  }
  const std::size_t batch = x.dim(0);
  ConstMatMap X(x.data.data(), batch, d.in());
  ConstMatMap G(g.data.data(), batch, d.out());
  ConstMatMap W(d.weight.value.data.data(), d.out(), d.in());
  MatMap(d.weight.grad.data.data(), d.out(), d.in()).noalias() += G.transpose() * X;
  VecMap(d.bias.grad.data.data(), d.out()) += G.colwise().sum().transpose();
  if (!need_dx) return {};
  Tensor dx({batch, d.in()});
  MatMap(dx.data.data(), batch, d.in()).noalias() = G * W;
  return dx;
}

Tensor conv_forward(Conv2d& conv, const Tensor& x, bool cache) {
  const ConvGeom g = conv_geometry(conv, x.shape);
  const std::size_t batch = x.dim(0);
  const std::size_t plane = g.oh * g.ow;
  const std::size_t k = g.c * conv.kh() * conv.kw();
  const std::size_t oc = conv.out_channels();
  Tensor cols = im2col(conv, x, g);
  RowMat out(oc, batch * plane);
  out.noalias() = ConstMatMap(conv.weight.value.data.data(), oc, k) *
                  ConstMatMap(cols.data.data(), k, batch * plane);
  Tensor y({batch, oc, g.oh, g.ow});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < oc; ++o) {
      const double bias = conv.bias.value[o];
      const double* src = out.data() + o * batch * plane + b * plane;
      double* dst = y.data.data() + (b * oc + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias;
    }
  }
  if (cache) {
    conv.cols = std::move(cols);
    conv.input_shape = x.shape;
  }
  return y;
}

Tensor conv_backward(Conv2d& conv, const Tensor& gy, bool need_dx) {
  if (conv.input_shape.empty()) throw ContractError("conv2d: backward without matching forward");
  const ConvGeom g = conv_geometry(conv, conv.input_shape);
  const std::size_t batch = conv.input_shape[0];
  const std::size_t plane = g.oh * g.ow;
  const std::size_t k = g.c * conv.kh() * conv.kw();
  const std::size_t oc = conv.out_channels();
  if (gy.shape != Shape{batch, oc, g.oh, g.ow}) {
    throw ContractError("conv2d: gradient shape " + shape_string(gy.shape) + " does not match");
  }
  RowMat gm(oc, batch * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < oc; ++o) {
      const double* src = gy.data.data() + (b * oc + o) * plane;
      std::copy(src, src + plane, gm.data() + o * batch * plane + b * plane);
    }
  }
  ConstMatMap cols(conv.cols.data.data(), k, batch * plane);
  ConstMatMap W(conv.weight.value.data.data(), oc, k);
  MatMap(conv.weight.grad.data.data(), oc, k).noalias() += gm * cols.transpose();
  VecMap(conv.bias.grad.data.data(), oc) += gm.rowwise().sum();
  if (!need_dx) return {};
  RowMat dcols(k, batch * plane);
  dcols.noalias() = W.transpose() * gm;
  Tensor dx(conv.input_shape);
  col2im(conv, dcols, g, dx);
  return dx;
}

Tensor relu_forward(Relu& r, const Tensor& x, bool cache) {
  Tensor y(x.shape);
  if (cache) r.positive.assign(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool pos = x[i] > 0.0;
    y[i] = pos ? x[i] : 0.0;
    if (cache) r.positive[i] = pos;
  }
  return y;
}

Tensor relu_backward(const Relu& r, const Tensor& g) {
  if (r.positive.size() != g.size()) throw ContractError("relu: backward without matching forward");
  Tensor dx(g.shape);
  for (std::size_t i = 0; i < g.size(); ++i) dx[i] = r.positive[i] ? g[i] : 0.0;
  return dx;
}

Tensor pool_forward(MaxPool2d& p, const Tensor& x, bool cache) {
  if (x.rank() != 4) throw ContractError("maxpool: expected rank-4 input, got " + shape_string(x.shape));
  const std::size_t k = p.size;
  const std::size_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  if (oh == 0 || ow == 0) throw ContractError("maxpool: window larger than input");
  Tensor y({x.dim(0), x.dim(1), oh, ow});
  if (cache) {
    p.argmax.assign(y.size(), 0);
    p.input_shape = x.shape;
  }
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t base = c * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + (oy * k) * w + ox * k;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = base + (oy * k + i) * w + ox * k + j;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t out = (c * oh + oy) * ow + ox;
        y[out] = x[best];
        if (cache) p.argmax[out] = best;
      }
    }
  }
  return y;
}

Tensor pool_backward(const MaxPool2d& p, const Tensor& g) {
  if (p.argmax.size() != g.size()) throw ContractError("maxpool: backward without matching forward");
  Tensor dx(p.input_shape);
  for (std::size_t i = 0; i < g.size(); ++i) dx[p.argmax[i]] += g[i];
  return dx;
}

Tensor flatten_forward(Flatten& f, const Tensor& x, bool cache) {
  if (x.rank() < 2) throw ContractError("flatten: expected a batch axis");
  if (cache) f.input_shape = x.shape;
  Tensor y;
  y.shape = {x.dim(0), x.size() / x.dim(0)};
  y.data = x.data;
  return y;
}

// Copies the entries of `t` whose index along `axis` is listed in `keep`.
Tensor select_axis(const Tensor& t, std::size_t axis, const std::vector<std::size_t>& keep) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= t.dim(d);
  for (std::size_t d = axis + 1; d < t.rank(); ++d) inner *= t.dim(d);
  const std::size_t len = t.dim(axis);
  Shape shape = t.shape;
  shape[axis] = keep.size();
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const double* src = t.data.data() + (o * len + keep[k]) * inner;
      std::copy(src, src + inner, out.data.data() + (o * keep.size() + k) * inner);
    }
  }
  return out;
}

void select_param(Param& p, std::size_t axis, const std::vector<std::size_t>& keep) {
  p.value = select_axis(p.value, axis, keep);
  p.grad = select_axis(p.grad, axis, keep);
  p.m = select_axis(p.m, axis, keep);
  p.v = select_axis(p.v, axis, keep);
}

void clear_caches(Layer& layer) {
  std::visit(Overloaded{
                 [](Dense& d) { d.input = {}; },
                 [](Conv2d& c) {
                   c.cols = {};
                   c.input_shape.clear();
                 },
                 [](Relu& r) { r.positive.clear(); },
                 [](MaxPool2d& p) {
                   p.argmax.clear();
                   p.input_shape.clear();
                 },
                 [](Flatten& f) { f.input_shape.clear(); },
                 [](NoiseGateLayer& g) {
                   g.input = {};
                   g.theta.clear();
                   g.dtheta_dmu.clear();
                   g.dtheta_dsigma.clear();
                 },
             },
             layer);
}

Param uniform_param(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = uniform(rng, -bound, bound);
  return Param(std::move(t));
}

Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
  Dense d;
  const double fan_in = static_cast<double>(in);
  d.weight = uniform_param({out, in}, std::sqrt(6.0 / fan_in), rng);
  d.bias = uniform_param({out}, 1.0 / std::sqrt(fan_in), rng);
  return d;
}

Conv2d make_conv(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t padding,
                 Rng& rng) {
  Conv2d c;
  const double fan_in = static_cast<double>(in_ch * k * k);
  c.weight = uniform_param({out_ch, in_ch, k, k}, std::sqrt(6.0 / fan_in), rng);
  c.bias = uniform_param({out_ch}, 1.0 / std::sqrt(fan_in), rng);
  c.padding = padding;
  return c;
}

}  // namespace

LayerTag layer_tag(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const Dense&) { return LayerTag::Dense; },
                        [](const Conv2d&) { return LayerTag::Conv2d; },
                        [](const Relu&) { return LayerTag::Relu; },
                        [](const MaxPool2d&) { return LayerTag::MaxPool2d; },
                        [](const Flatten&) { return LayerTag::Flatten; },
                        [](const NoiseGateLayer&) { return LayerTag::Gate; },
                    },
                    layer);
}

const char* layer_name(LayerTag tag) {
  switch (tag) {
    case LayerTag::Dense: return "dense";
    case LayerTag::Conv2d: return "conv2d";
    case LayerTag::Relu: return "relu";
    case LayerTag::MaxPool2d: return "maxpool2d";
    case LayerTag::Flatten: return "flatten";
    case LayerTag::Gate: return "gate";
  }
  return "unknown";
}

Tensor Network::run(const Tensor& batch, Mode mode, GateMode gate_mode, const GateDraws& draws) {
  if (batch.rank() != input_shape.size() + 1 ||
      !std::equal(input_shape.begin(), input_shape.end(), batch.shape.begin() + 1)) {
    throw ContractError("forward: batch shape " + shape_string(batch.shape) +
                        " does not match input " + shape_string(input_shape));
  }
  const bool cache = mode == Mode::Train;
  if (gate_mode == GateMode::Eval ? !draws.empty() : draws.size() != gate_count()) {
    throw ContractError("forward: expected one draw vector per gate layer");
  }
  Tensor x = batch;
  std::size_t gate = 0;
  for (Layer& layer : layers) {
    x = std::visit(Overloaded{
                       [&](Dense& d) { return dense_forward(d, x, cache); },
                       [&](Conv2d& c) { return conv_forward(c, x, cache); },
                       [&](Relu& r) { return relu_forward(r, x, cache); },
                       [&](MaxPool2d& p) { return pool_forward(p, x, cache); },
                       [&](Flatten& f) { return flatten_forward(f, x, cache); },
                       [&](NoiseGateLayer& g) {
                         std::span<const double> d;
                         if (gate_mode != GateMode::Eval) d = draws[gate];
                         ++gate;
                         return gate_forward(g, x, gate_mode, d);
                       },
                   },
                   layer);
  }
  return x;
}

Tensor Network::forward(const Tensor& batch, Mode mode, const GateDraws& draws) {
  return run(batch, mode, mode == Mode::Train ? GateMode::Train : GateMode::Eval, draws);
}

Tensor Network::forward_fixed(const Tensor& batch, const GateDraws& theta) {
  return run(batch, Mode::Eval, GateMode::Fixed, theta);
}

void Network::backward(const Tensor& grad_logits) {
  Tensor g = grad_logits;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    // nobody reads the gradient with respect to the network input
    const bool need_dx = std::next(it) != layers.rend();
    g = std::visit(Overloaded{
                       [&](Dense& d) { return dense_backward(d, g, need_dx); },
                       [&](Conv2d& c) { return conv_backward(c, g, need_dx); },
                       [&](Relu& r) { return relu_backward(r, g); },
                       [&](MaxPool2d& p) { return pool_backward(p, g); },
                       [&](Flatten& f) {
                         if (f.input_shape.empty()) {
                           throw ContractError("flatten: backward without matching forward");
                         }
                         Tensor dx;
                         dx.shape = f.input_shape;
                         dx.data = g.data;
                         return dx;
                       },
                       [&](NoiseGateLayer& gl) { return gate_backward(gl, g); },
                   },
                   *it);
  }
  std::size_t li = 0;
  for (Layer& layer : layers) {
    auto check = [&](const Param& p, const char* what) {
      for (std::size_t i = 0; i < p.grad.size(); ++i) {
        if (!std::isfinite(p.grad[i])) {
          throw NumericalError("non-finite gradient in layer " + std::to_string(li) + " (" +
                               layer_name(layer_tag(layer)) + ") " + what + " index " +
                               std::to_string(i));
        }
      }
    };
    std::visit(Overloaded{
                   [&](Dense& d) { check(d.weight, "weight"), check(d.bias, "bias"); },
                   [&](Conv2d& c) { check(c.weight, "weight"), check(c.bias, "bias"); },
                   [&](NoiseGateLayer& gl) { check(gl.mu, "mu"), check(gl.log_sigma, "log_sigma"); },
                   [](auto&) {},
               },
               layer);
    ++li;
  }
}

double Network::kl_total() const {
  double total = 0.0;
  for (const NoiseGateLayer* g : gates()) total += gate_kl(*g);
  return total;
}

void Network::accumulate_kl_grad(double scale) {
  for (NoiseGateLayer* g : gates()) gate_kl_backward(*g, scale);
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (Layer& layer : layers) {
    std::visit(Overloaded{
                   [&](Dense& d) { out.insert(out.end(), {&d.weight, &d.bias}); },
                   [&](Conv2d& c) { out.insert(out.end(), {&c.weight, &c.bias}); },
                   [&](NoiseGateLayer& g) { out.insert(out.end(), {&g.mu, &g.log_sigma}); },
                   [](auto&) {},
               },
               layer);
  }
  return out;
}

void Network::zero_grad() {
  for (Param* p : params()) p->zero_grad();
}

std::vector<NoiseGateLayer*> Network::gates() {
  std::vector<NoiseGateLayer*> out;
  for (Layer& layer : layers) {
    if (auto* g = std::get_if<NoiseGateLayer>(&layer)) out.push_back(g);
  }
  return out;
}

std::vector<const NoiseGateLayer*> Network::gates() const {
  std::vector<const NoiseGateLayer*> out;
  for (const Layer& layer : layers) {
    if (const auto* g = std::get_if<NoiseGateLayer>(&layer)) out.push_back(g);
  }
  return out;
}

std::size_t Network::gate_count() const { return gate_layer_indices().size(); }

std::vector<std::size_t> Network::gate_layer_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (std::holds_alternative<NoiseGateLayer>(layers[i])) out.push_back(i);
  }
  return out;
}

std::size_t Network::producer_of(std::size_t gate) const {
  const auto idx = gate_layer_indices();
  if (gate >= idx.size()) throw ContractError("producer_of: no gate " + std::to_string(gate));
  for (std::size_t i = idx[gate]; i-- > 0;) {
    const Layer& l = layers[i];
    if (std::holds_alternative<Dense>(l) || std::holds_alternative<Conv2d>(l)) return i;
    if (!std::holds_alternative<Relu>(l) && !std::holds_alternative<MaxPool2d>(l)) break;
  }
  throw ContractError("producer_of: gate " + std::to_string(gate) +
                      " does not follow a dense or conv layer");
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const Layer& layer : layers) {
    if (const auto* d = std::get_if<Dense>(&layer)) n += d->weight.value.size() + d->bias.value.size();
    if (const auto* c = std::get_if<Conv2d>(&layer)) n += c->weight.value.size() + c->bias.value.size();
  }
  return n;
}

std::vector<Shape> Network::layer_shapes() const {
  std::vector<Shape> out;
  Shape s = input_shape;
  for (const Layer& layer : layers) {
    std::visit(Overloaded{
                   [&](const Dense& d) { s = {d.out()}; },
                   [&](const Conv2d& c) {
                     if (s.size() != 3) throw ContractError("layer_shapes: conv needs [c, h, w]");
                     Shape batched{1, s[0], s[1], s[2]};
                     const ConvGeom g = conv_geometry(c, batched);
                     s = {c.out_channels(), g.oh, g.ow};
                   },
                   [&](const MaxPool2d& p) { s = {s[0], s[1] / p.size, s[2] / p.size}; },
                   [&](const Flatten&) { s = {shape_size(s)}; },
                   [](const auto&) {},
               },
               layer);
    out.push_back(s);
  }
  return out;
}

Network Network::shrunk() const {
  Network net = *this;
  const std::vector<Shape> shapes = layer_shapes();

  // Gate -> kept positions, keyed by the producing layer.
  std::vector<std::optional<std::vector<std::size_t>>> out_keep(layers.size());
  const auto gate_idx = gate_layer_indices();
  for (std::size_t g = 0; g < gate_idx.size(); ++g) {
    const auto& gl = std::get<NoiseGateLayer>(layers[gate_idx[g]]);
    if (gl.n_alive() == gl.size()) continue;
    std::vector<std::size_t> keep;
    for (std::size_t s = 0; s < gl.size(); ++s) {
      if (gl.alive[s]) keep.push_back(s);
    }
    out_keep[producer_of(g)] = std::move(keep);
  }

  // Kept positions of the feature axis currently flowing forward.
  std::optional<std::vector<std::size_t>> in_keep;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer& layer = net.layers[i];
    clear_caches(layer);
    std::visit(Overloaded{
                   [&](Dense& d) {
                     if (in_keep) select_param(d.weight, 1, *in_keep);
                     in_keep = out_keep[i];
                     if (in_keep) {
                       select_param(d.weight, 0, *in_keep);
                       select_param(d.bias, 0, *in_keep);
                     }
                   },
                   [&](Conv2d& c) {
                     if (in_keep) select_param(c.weight, 1, *in_keep);
                     in_keep = out_keep[i];
                     if (in_keep) {
                       select_param(c.weight, 0, *in_keep);
                       select_param(c.bias, 0, *in_keep);
                     }
                   },
                   [&](NoiseGateLayer& g) {
                     if (g.n_alive() == g.size()) return;
                     std::vector<std::size_t> keep;
                     for (std::size_t s = 0; s < g.size(); ++s) {
                       if (g.alive[s]) keep.push_back(s);
                     }
                     select_param(g.mu, 0, keep);
                     select_param(g.log_sigma, 0, keep);
                     std::vector<std::size_t> ids;
                     for (std::size_t s : keep) ids.push_back(g.ids[s]);
                     g.ids = std::move(ids);
                     g.alive.assign(keep.size(), 1);
                   },
                   [&](Flatten&) {
                     if (!in_keep) return;
                     const Shape& in = i == 0 ? input_shape : shapes[i - 1];
                     const std::size_t spatial = shape_size(in) / in[0];
                     std::vector<std::size_t> expanded;
                     for (std::size_t c : *in_keep) {
                       for (std::size_t k = 0; k < spatial; ++k) expanded.push_back(c * spatial + k);
                     }
                     in_keep = std::move(expanded);
                   },
                   [](auto&) {},
               },
               layer);
  }
  return net;
}

Network make_mlp(std::size_t input_dim, std::size_t hidden, std::size_t hidden_layers,
                 std::size_t n_classes, bool with_gates, std::uint64_t seed, double log_lo,
                 double log_hi) {
  Rng rng(seed);
  Network net;
  net.input_shape = {input_dim};
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    net.layers.emplace_back(make_dense(in, hidden, rng));
    if (with_gates) net.layers.emplace_back(NoiseGateLayer(hidden, 0.0, 1.0, log_lo, log_hi));
    net.layers.emplace_back(Relu{});
    in = hidden;
  }
  net.layers.emplace_back(make_dense(in, n_classes, rng));
  return net;
}

Network make_lenet5(std::size_t channels, std::size_t height, std::size_t width,
                    std::size_t n_classes, bool with_gates, std::uint64_t seed, double log_lo,
                    double log_hi) {
  Rng rng(seed);
  Network net;
  net.input_shape = {channels, height, width};
  auto gate = [&](std::size_t n) {
    if (with_gates) net.layers.emplace_back(NoiseGateLayer(n, 0.0, 1.0, log_lo, log_hi));
  };
  net.layers.emplace_back(make_conv(channels, 6, 5, 2, rng));
  gate(6);
  net.layers.emplace_back(Relu{});
  net.layers.emplace_back(MaxPool2d{});
  net.layers.emplace_back(make_conv(6, 16, 5, 0, rng));
  gate(16);
  net.layers.emplace_back(Relu{});
  net.layers.emplace_back(MaxPool2d{});
  net.layers.emplace_back(Flatten{});
  const std::size_t flat = shape_size(net.layer_shapes().back());
  net.layers.emplace_back(make_dense(flat, 120, rng));
  gate(120);
  net.layers.emplace_back(Relu{});
  net.layers.emplace_back(make_dense(120, 84, rng));
  gate(84);
  net.layers.emplace_back(Relu{});
  net.layers.emplace_back(make_dense(84, n_classes, rng));
  return net;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ContractError("softmax_cross_entropy: logits " + shape_string(logits.shape) +
                        " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (grad) *grad = Tensor(logits.shape);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = logits.data.data() + b * k;
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw ContractError("label out of range");
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    loss += lse - row[y];
    if (grad) {
      double* g = grad->data.data() + b * k;
      for (std::size_t j = 0; j < k; ++j) g[j] = std::exp(row[j] - lse) / static_cast<double>(batch);
      g[y] -= 1.0 / static_cast<double>(batch);
    }
  }
  return loss / static_cast<double>(batch);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = logits.data.data() + b * k;
    out[b] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

}  // namespace bmrs
