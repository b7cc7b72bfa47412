#include "bmrs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "bmrs/errors.hpp"

namespace bmrs {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");

namespace {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) u32(static_cast<std::uint32_t>(d));
    raw(t.data.data(), t.size() * 8);
  }
  void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  Shape shape() {
    const std::uint32_t rank = u32();
    if (rank > 8) throw ParseError("checkpoint: implausible tensor rank", offset_ - 4);
    Shape s(rank);
    std::uint64_t total = 1;
    for (auto& d : s) {
      d = u32();
      total *= d;
      if (total > (std::uint64_t{1} << 32)) throw ParseError("checkpoint: tensor too large", offset_ - 4);
    }
    return s;
  }
  Tensor tensor() {
    Tensor t(shape());
    raw(t.data.data(), t.size() * 8);
    return t;
  }
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw ParseError("checkpoint: truncated", offset_ + in_.gcount());
    offset_ += n;
  }
  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

void check_param(const Tensor& t, const Shape& expect, std::uint64_t offset) {
  if (t.shape != expect) throw ParseError("checkpoint: bias shape does not match weight", offset);
}

}  // namespace

void save_checkpoint(const Network& net, std::ostream& out) {
  Writer w(out);
  w.raw("BMRS", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  w.u32(static_cast<std::uint32_t>(net.input_shape.size()));
  for (std::size_t d : net.input_shape) w.u32(static_cast<std::uint32_t>(d));
  for (const Layer& layer : net.layers) {
    w.u32(static_cast<std::uint32_t>(layer_tag(layer)));
    if (const auto* d = std::get_if<Dense>(&layer)) {
      w.tensor(d->weight.value);
      w.tensor(d->bias.value);
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      w.u32(static_cast<std::uint32_t>(c->stride));
      w.u32(static_cast<std::uint32_t>(c->padding));
      w.tensor(c->weight.value);
      w.tensor(c->bias.value);
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
      w.u32(static_cast<std::uint32_t>(p->size));
    } else if (const auto* g = std::get_if<NoiseGateLayer>(&layer)) {
      w.f64(g->log_lo);
      w.f64(g->log_hi);
      w.u32(static_cast<std::uint32_t>(g->size()));
      w.raw(g->mu.value.data.data(), g->size() * 8);
      w.raw(g->log_sigma.value.data.data(), g->size() * 8);
      for (std::size_t id : g->ids) w.u64(id);
      std::vector<std::uint8_t> bits((g->size() + 7) / 8, 0);
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (g->alive[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
      }
      w.raw(bits.data(), bits.size());
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string());
  save_checkpoint(net, out);
}

Network load_checkpoint(std::istream& in) {
  Reader r(in);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "BMRS", 4) != 0) throw ParseError("checkpoint: bad magic", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version), 4);
  }
  const std::uint32_t n_layers = r.u32();
  Network net;
  net.input_shape = r.shape();
  for (std::uint32_t li = 0; li < n_layers; ++li) {
    const std::uint64_t at = r.offset();
    const auto tag = static_cast<LayerTag>(r.u32());
    switch (tag) {
      case LayerTag::Dense: {
        Dense d;
        d.weight = Param(r.tensor());
        d.bias = Param(r.tensor());
        if (d.weight.value.rank() != 2) throw ParseError("checkpoint: dense weight must be rank 2", at);
        check_param(d.bias.value, {d.weight.value.dim(0)}, at);
        net.layers.emplace_back(std::move(d));
        break;
      }
      case LayerTag::Conv2d: {
        Conv2d c;
        c.stride = r.u32();
        c.padding = r.u32();
        c.weight = Param(r.tensor());
        c.bias = Param(r.tensor());
        if (c.weight.value.rank() != 4 || c.stride == 0) throw ParseError("checkpoint: bad conv layer", at);
        check_param(c.bias.value, {c.weight.value.dim(0)}, at);
        net.layers.emplace_back(std::move(c));
        break;
      }
      case LayerTag::Relu: net.layers.emplace_back(Relu{}); break;
      case LayerTag::MaxPool2d: {
        MaxPool2d p;
        p.size = r.u32();
        if (p.size == 0) throw ParseError("checkpoint: zero pool size", at);
        net.layers.emplace_back(std::move(p));
        break;
      }
      case LayerTag::Flatten: net.layers.emplace_back(Flatten{}); break;
      case LayerTag::Gate: {
        const double lo = r.f64();
        const double hi = r.f64();
        const std::uint32_t n = r.u32();
        NoiseGateLayer g(n, 0.0, 1.0, lo, hi);
        r.raw(g.mu.value.data.data(), std::size_t{n} * 8);
        r.raw(g.log_sigma.value.data.data(), std::size_t{n} * 8);
        for (auto& id : g.ids) id = r.u64();
        std::vector<std::uint8_t> bits((n + 7) / 8);
        r.raw(bits.data(), bits.size());
        for (std::size_t i = 0; i < n; ++i) g.alive[i] = (bits[i / 8] >> (i % 8)) & 1u;
        net.layers.emplace_back(std::move(g));
        break;
      }
      default:
        throw ParseError("checkpoint: unknown layer tag " + std::to_string(static_cast<std::uint32_t>(tag)), at);
    }
  }
  try {
    (void)net.layer_shapes();
  } catch (const ContractError& e) {
    throw ParseError(std::string("checkpoint: inconsistent layer shapes: ") + e.what(), 0);
  }
  return net;
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("checkpoint: cannot open " + path.string(), 0);
  return load_checkpoint(in);
}

}  // namespace bmrs
