#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "bmrs/noise_gate.hpp"
#include "bmrs/tensor.hpp"

namespace bmrs {

/// y = x W^T + b over [batch, in] inputs.
struct Dense {
  Param weight;  // [out, in]
  Param bias;    // [out]
  Tensor input;

  std::size_t in() const { return weight.value.dim(1); }
  std::size_t out() const { return weight.value.dim(0); }
};

/// 2-D convolution over [batch, channels, h, w] inputs.
struct Conv2d {
  Param weight;  // [out_ch, in_ch, kh, kw]
  Param bias;    // [out_ch]
  std::size_t stride = 1;
  std::size_t padding = 0;
  // Train-mode caches: im2col buffer [in_ch*kh*kw, batch*out_h*out_w].
  Tensor cols;
  Shape input_shape;

  std::size_t out_channels() const { return weight.value.dim(0); }
  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t kh() const { return weight.value.dim(2); }
  std::size_t kw() const { return weight.value.dim(3); }
};

struct Relu {
  std::vector<std::uint8_t> positive;
};

/// Non-overlapping max pooling with a square window.
struct MaxPool2d {
  std::size_t size = 2;
  std::vector<std::size_t> argmax;
  Shape input_shape;
};

struct Flatten {
  Shape input_shape;
};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool2d, Flatten, NoiseGateLayer>;

enum class LayerTag : std::uint32_t {
  Dense = 1,
  Conv2d = 2,
  Relu = 3,
  MaxPool2d = 4,
  Flatten = 5,
  Gate = 6,
};

LayerTag layer_tag(const Layer& layer);
const char* layer_name(LayerTag tag);

/// Identifies a prunable structure: which gate layer, and the structure's
/// index within that layer as originally built.
struct StructureId {
  std::size_t gate = 0;
  std::size_t index = 0;
  auto operator<=>(const StructureId&) const = default;
};

/// Per-gate noise values, one entry per structure of each gate layer.
using GateDraws = std::vector<std::vector<double>>;

enum class Mode { Train, Eval };

/// Ordered stack of layers. Forward caches are kept only in train mode;
/// backward consumes the caches of the most recent train-mode forward.
class Network {
 public:
  Shape input_shape;  // per-sample shape, e.g. {784} or {1, 28, 28}
  std::vector<Layer> layers;

  Tensor forward(const Tensor& batch, Mode mode, const GateDraws& draws = {});
  /// Eval-style pass with caller-supplied gate multipliers.
  Tensor forward_fixed(const Tensor& batch, const GateDraws& theta);
  /// Propagates d(loss)/d(logits); parameter gradients accumulate.
  void backward(const Tensor& grad_logits);

  double kl_total() const;
  void accumulate_kl_grad(double scale);

  std::vector<Param*> params();
  void zero_grad();

  std::vector<NoiseGateLayer*> gates();
  std::vector<const NoiseGateLayer*> gates() const;
  std::size_t gate_count() const;
  /// Position in `layers` of each gate, in gate order.
  std::vector<std::size_t> gate_layer_indices() const;
  /// Position of the dense/conv layer whose outputs gate `gate` scales.
  std::size_t producer_of(std::size_t gate) const;

  /// Weight and bias scalars of dense/conv layers (gate parameters excluded).
  std::size_t param_count() const;
  /// Copy with pruned structures physically removed from adjacent tensors.
  Network shrunk() const;

  /// Per-sample output shape of every layer.
  std::vector<Shape> layer_shapes() const;

 private:
  Tensor run(const Tensor& batch, Mode mode, GateMode gate_mode, const GateDraws& draws);
};

/// Kaiming-uniform initialised MLP; a gate follows every hidden dense layer.
Network make_mlp(std::size_t input_dim, std::size_t hidden, std::size_t hidden_layers,
                 std::size_t n_classes, bool with_gates, std::uint64_t seed,
                 double log_lo = kDefaultLogLo, double log_hi = kDefaultLogHi);

/// LeNet-5: conv(6,5x5,pad 2)-pool-conv(16,5x5)-pool-fc120-fc84-fc; gates on
/// both conv layers (per channel) and both hidden fc layers (per unit).
Network make_lenet5(std::size_t channels, std::size_t height, std::size_t width,
                    std::size_t n_classes, bool with_gates, std::uint64_t seed,
                    double log_lo = kDefaultLogLo, double log_hi = kDefaultLogHi);

/// Mean softmax cross-entropy; writes d(loss)/d(logits) when grad != nullptr.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad = nullptr);

/// Index of the largest logit per row.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace bmrs
