#pragma once

// Frozen base network plus trainable low-rank adapters.
//
// Layer l computes  h_l = act(W_l h_{l-1} + bias_l + B_l (A_l h_{l-1}))
// with the activation applied between layers and the identity after the
// last one. Columns of every activation matrix are samples.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fltac/numeric.hpp"

namespace fltac {

enum class Activation { kTanh, kRelu, kIdentity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "identity") return Activation::kIdentity;
  throw ParameterError("unknown activation '" + std::string(s) + "'");
}

enum class LossKind { kMse, kSoftmaxCe };

inline std::string_view to_string(LossKind k) {
  return k == LossKind::kMse ? "mse" : "softmax_ce";
}

inline LossKind loss_kind_from_string(std::string_view s) {
  if (s == "mse") return LossKind::kMse;
  if (s == "softmax_ce") return LossKind::kSoftmaxCe;
  throw ParameterError("unknown loss kind '" + std::string(s) + "'");
}

struct DenseLayer {
  Matrix weight;  // d x k
  Matrix bias;    // d x 1

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Frozen layer stack. Only const access is exposed after construction.
class BaseModel {
 public:
  BaseModel(std::vector<DenseLayer> layers, Activation activation)
      : layers_(std::move(layers)), activation_(activation) {
    if (layers_.empty()) throw ShapeError("BaseModel: at least one layer required");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      if (layer.bias.rows() != layer.weight.rows() || layer.bias.cols() != 1) {
        throw ShapeError("BaseModel: layer " + std::to_string(l) + " bias " +
                         layer.bias.shape_string() + " does not match weight " +
                         layer.weight.shape_string());
      }
      if (l > 0 && layers_[l - 1].weight.rows() != layer.weight.cols()) {
        throw ShapeError("BaseModel: layer " + std::to_string(l) + " expects input dim " +
                         std::to_string(layer.weight.cols()) + " but layer " +
                         std::to_string(l - 1) + " outputs " +
                         std::to_string(layers_[l - 1].weight.rows()));
      }
    }
  }

  /// Random "pre-trained" network: weights ~ N(0, gain^2 / fan_in), biases
  /// ~ N(0, bias_std^2). dims = {input, hidden..., output}.
  static BaseModel random(std::span<const std::size_t> dims, Activation activation, Rng& rng,
                          double gain = 1.0, double bias_std = 0.1) {
    if (dims.size() < 2) throw ShapeError("BaseModel::random: need at least two dims");
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const double std = gain / std::sqrt(static_cast<double>(dims[l]));
      Matrix w = gaussian_fill(rng, dims[l + 1], dims[l], 0.0, std);
      Matrix b = gaussian_fill(rng, dims[l + 1], 1, 0.0, bias_std);
      layers.push_back({std::move(w), std::move(b)});
    }
    return BaseModel(std::move(layers), activation);
  }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }
  Activation activation() const { return activation_; }
  std::size_t input_dim() const { return layers_.front().weight.cols(); }
  std::size_t output_dim() const { return layers_.back().weight.rows(); }

  friend bool operator==(const BaseModel&, const BaseModel&) = default;

 private:
  std::vector<DenseLayer> layers_;
  Activation activation_;
};

struct LoraPair {
  Matrix a;  // r x k
  Matrix b;  // d x r

  friend bool operator==(const LoraPair&, const LoraPair&) = default;
};

struct LayerShape {
  std::uint32_t d = 0;
  std::uint32_t k = 0;
  std::uint32_t r = 0;

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

using AdapterShape = std::vector<LayerShape>;

struct Adapter {
  std::vector<LoraPair> pairs;

  std::size_t layer_count() const { return pairs.size(); }
  std::size_t rank(std::size_t layer) const { return pairs[layer].a.rows(); }

  AdapterShape shape() const {
    AdapterShape out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
      out.push_back({static_cast<std::uint32_t>(p.b.rows()),
                     static_cast<std::uint32_t>(p.a.cols()),
                     static_cast<std::uint32_t>(p.a.rows())});
    }
    return out;
  }

  friend bool operator==(const Adapter&, const Adapter&) = default;
};

/// Adapter gradients (same shapes as the adapter) and the batch-mean loss.
struct GradPair {
  std::vector<LoraPair> grads;
  double loss = 0.0;
};

inline std::size_t param_count(const AdapterShape& shape) {
  std::size_t n = 0;
  for (const auto& s : shape) n += static_cast<std::size_t>(s.r) * (s.d + s.k);
  return n;
}

inline std::size_t adapter_param_count(const Adapter& adapter) {
  return param_count(adapter.shape());
}

/// One rank per layer, clamped to min(d, k) so a single rank knob can be
/// applied to layers that are narrower than it.
inline std::vector<std::size_t> clamped_ranks(const BaseModel& model, std::size_t rank) {
  std::vector<std::size_t> ranks;
  for (const auto& layer : model.layers()) {
    ranks.push_back(std::min({rank, layer.weight.rows(), layer.weight.cols()}));
  }
  return ranks;
}

inline void check_conformable(const BaseModel& model, const Adapter& adapter) {
  if (adapter.pairs.size() != model.layer_count()) {
    throw ShapeError("adapter has " + std::to_string(adapter.pairs.size()) +
                     " layers, model has " + std::to_string(model.layer_count()));
  }
  for (std::size_t l = 0; l < adapter.pairs.size(); ++l) {
    const auto& w = model.layers()[l].weight;
    const auto& p = adapter.pairs[l];
    if (p.a.cols() != w.cols() || p.b.rows() != w.rows() || p.a.rows() != p.b.cols()) {
      throw ShapeError("layer " + std::to_string(l) + ": adapter A " + p.a.shape_string() +
                       ", B " + p.b.shape_string() + " not conformable with W " +
                       w.shape_string());
    }
    if (p.a.rows() > std::min(w.rows(), w.cols())) {
      throw ShapeError("layer " + std::to_string(l) + ": rank " +
                       std::to_string(p.a.rows()) + " exceeds min(d, k) of W " +
                       w.shape_string());
    }
  }
}

/// A ~ N(0, a_std^2), B = 0, so a fresh adapter leaves the model unchanged.
inline Adapter init_adapter(const BaseModel& model, std::span<const std::size_t> ranks,
                            Rng& rng, double a_std = 0.02) {
  if (ranks.size() != model.layer_count()) {
    throw ShapeError("init_adapter: " + std::to_string(ranks.size()) + " ranks for " +
                     std::to_string(model.layer_count()) + " layers");
  }
  Adapter adapter;
  for (std::size_t l = 0; l < ranks.size(); ++l) {
    const auto& w = model.layers()[l].weight;
    adapter.pairs.push_back(
        {gaussian_fill(rng, ranks[l], w.cols(), 0.0, a_std), Matrix(w.rows(), ranks[l])});
  }
  check_conformable(model, adapter);
  return adapter;
}

inline Adapter zero_adapter(const AdapterShape& shape) {
  Adapter adapter;
  for (const auto& s : shape) adapter.pairs.push_back({Matrix(s.r, s.k), Matrix(s.d, s.r)});
  return adapter;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

inline double activate(Activation act, double x) {
  switch (act) {
    case Activation::kTanh: return std::tanh(x);
    case Activation::kRelu: return x > 0.0 ? x : 0.0;
    case Activation::kIdentity: return x;
  }
  return x;
}

/// Derivative expressed through the activation output y = act(x).
inline double activate_grad(Activation act, double y) {
  switch (act) {
    case Activation::kTanh: return 1.0 - y * y;
    case Activation::kRelu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::kIdentity: return 1.0;
  }
  return 1.0;
}

struct ForwardTrace {
  std::vector<Matrix> inputs;   // h_{l-1} for every layer
  std::vector<Matrix> low;      // A_l h_{l-1}
  Matrix output;
};

inline ForwardTrace forward_trace(const BaseModel& model, const Adapter& adapter,
                                  const Matrix& z) {
  check_conformable(model, adapter);
  if (z.rows() != model.input_dim()) {
    throw ShapeError("forward: input has " + std::to_string(z.rows()) +
                     " rows, layer 0 expects " + std::to_string(model.input_dim()));
  }
  ForwardTrace trace;
  Matrix h = z;
  const std::size_t last = model.layer_count() - 1;
  for (std::size_t l = 0; l <= last; ++l) {
    const auto& layer = model.layers()[l];
    const auto& pair = adapter.pairs[l];
    Matrix low = matmul(pair.a, h);
    Matrix pre = add(matmul(layer.weight, h), matmul(pair.b, low));
    pre = add_column(pre, layer.bias);
    if (l != last) {
      for (double& v : pre.data()) v = activate(model.activation(), v);
    }
    trace.inputs.push_back(std::move(h));
    trace.low.push_back(std::move(low));
    h = std::move(pre);
  }
  trace.output = std::move(h);
  return trace;
}

}  // namespace detail

inline Matrix forward(const BaseModel& model, const Adapter& adapter, const Matrix& z) {
  return detail::forward_trace(model, adapter, z).output;
}

/// Batch-mean loss of predictions against targets (columns are samples).
inline double batch_loss(const Matrix& pred, const Matrix& target, LossKind kind) {
  if (!pred.same_shape(target)) {
    throw ShapeError("loss: prediction " + pred.shape_string() + " vs target " +
                     target.shape_string());
  }
  const double n = static_cast<double>(pred.cols());
  double total = 0.0;
  if (kind == LossKind::kMse) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred.data()[i] - target.data()[i];
      total += d * d;
    }
  } else if (kind == LossKind::kSoftmaxCe) {
    for (std::size_t c = 0; c < pred.cols(); ++c) {
      double mx = pred(0, c);
      for (std::size_t r = 1; r < pred.rows(); ++r) mx = std::max(mx, pred(r, c));
      double sum = 0.0;
      for (std::size_t r = 0; r < pred.rows(); ++r) sum += std::exp(pred(r, c) - mx);
      const double log_z = mx + std::log(sum);
      for (std::size_t r = 0; r < pred.rows(); ++r) total -= target(r, c) * (pred(r, c) - log_z);
    }
  } else {
    throw ParameterError("loss: unknown loss kind " + std::to_string(static_cast<int>(kind)));
  }
  return total / n;
}

inline double evaluate_loss(const BaseModel& model, const Adapter& adapter, const Matrix& x,
                            const Matrix& y, LossKind kind) {
  if (x.cols() == 0) throw ParameterError("evaluate_loss: empty batch");
  return batch_loss(forward(model, adapter, x), y, kind);
}

/// Exact gradients of the batch-mean loss with respect to every A and B.
/// The frozen weights receive no gradient.
inline GradPair loss_and_grad(const BaseModel& model, const Adapter& adapter, const Matrix& x,
                              const Matrix& y, LossKind kind) {
  if (x.cols() == 0) throw ParameterError("loss_and_grad: empty batch");
  if (x.cols() != y.cols()) {
    throw ShapeError("loss_and_grad: " + std::to_string(x.cols()) + " inputs vs " +
                     std::to_string(y.cols()) + " targets");
  }
  auto trace = detail::forward_trace(model, adapter, x);
  const Matrix& pred = trace.output;

  GradPair out;
  out.loss = batch_loss(pred, y, kind);
  if (!std::isfinite(out.loss)) throw NumericError("loss is not finite (training diverged)");

  const double n = static_cast<double>(x.cols());
  Matrix delta(pred.rows(), pred.cols());
  if (kind == LossKind::kMse) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      delta.data()[i] = 2.0 * (pred.data()[i] - y.data()[i]) / n;
    }
  } else {
    for (std::size_t c = 0; c < pred.cols(); ++c) {
      double mx = pred(0, c);
      for (std::size_t r = 1; r < pred.rows(); ++r) mx = std::max(mx, pred(r, c));
      double sum = 0.0;
      for (std::size_t r = 0; r < pred.rows(); ++r) sum += std::exp(pred(r, c) - mx);
      double mass = 0.0;
      for (std::size_t r = 0; r < pred.rows(); ++r) mass += y(r, c);
      for (std::size_t r = 0; r < pred.rows(); ++r) {
        const double p = std::exp(pred(r, c) - mx) / sum;
        delta(r, c) = (mass * p - y(r, c)) / n;
      }
    }
  }

  out.grads.resize(model.layer_count());
  for (std::size_t l = model.layer_count(); l-- > 0;) {
    const auto& pair = adapter.pairs[l];
    const Matrix& h_in = trace.inputs[l];
    // dB = delta (A h)^T ; dA = B^T delta h^T
    Matrix b_t_delta = matmul_tn(pair.b, delta);
    out.grads[l].b = matmul_nt(delta, trace.low[l]);
    out.grads[l].a = matmul_nt(b_t_delta, h_in);
    if (l == 0) break;
    // Back through W + BA, then through the previous layer's activation.
    Matrix back = add(matmul_tn(model.layers()[l].weight, delta), matmul_tn(pair.a, b_t_delta));
    for (std::size_t i = 0; i < back.size(); ++i) {
      back.data()[i] *= detail::activate_grad(model.activation(), h_in.data()[i]);
    }
    delta = std::move(back);
  }
  return out;
}

inline Adapter sgd_step(const Adapter& adapter, const GradPair& grad, double eta) {
  if (!(eta > 0.0)) throw ParameterError("sgd_step: eta must be > 0");
  if (grad.grads.size() != adapter.pairs.size()) {
    throw ShapeError("sgd_step: gradient has " + std::to_string(grad.grads.size()) +
                     " layers, adapter has " + std::to_string(adapter.pairs.size()));
  }
  Adapter out;
  out.pairs.reserve(adapter.pairs.size());
  for (std::size_t l = 0; l < adapter.pairs.size(); ++l) {
    out.pairs.push_back({axpy_scale(-eta, grad.grads[l].a, adapter.pairs[l].a),
                         axpy_scale(-eta, grad.grads[l].b, adapter.pairs[l].b)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonical vector form: layers in order, A row-major then B row-major.
// ---------------------------------------------------------------------------

inline std::vector<double> flatten(const Adapter& adapter) {
  std::vector<double> out;
  out.reserve(adapter_param_count(adapter));
  for (const auto& p : adapter.pairs) {
    out.insert(out.end(), p.a.data().begin(), p.a.data().end());
    out.insert(out.end(), p.b.data().begin(), p.b.data().end());
  }
  return out;
}

inline Adapter unflatten(const AdapterShape& shape, std::span<const double> v) {
  if (v.size() != param_count(shape)) {
    throw ShapeError("unflatten: vector length " + std::to_string(v.size()) +
                     " does not match adapter size " + std::to_string(param_count(shape)));
  }
  Adapter out;
  std::size_t off = 0;
  for (const auto& s : shape) {
    const std::size_t na = static_cast<std::size_t>(s.r) * s.k;
    const std::size_t nb = static_cast<std::size_t>(s.d) * s.r;
    Matrix a(s.r, s.k, std::vector<double>(v.begin() + off, v.begin() + off + na));
    off += na;
    Matrix b(s.d, s.r, std::vector<double>(v.begin() + off, v.begin() + off + nb));
    off += nb;
    out.pairs.push_back({std::move(a), std::move(b)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary persistence
//
//   magic "FLTA" | u32 version | u32 layers | layers x (u32 d, u32 k, u32 r)
//   | flatten vector as f64
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kAdapterMagic[4] = {'F', 'L', 'T', 'A'};
inline constexpr std::uint32_t kAdapterFormatVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw InputError("adapter file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw InputError("adapter file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace detail

inline void write_adapter(std::ostream& os, const Adapter& adapter) {
  os.write(kAdapterMagic, 4);
  detail::put_u32(os, kAdapterFormatVersion);
  const auto shape = adapter.shape();
  detail::put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (const auto& s : shape) {
    detail::put_u32(os, s.d);
    detail::put_u32(os, s.k);
    detail::put_u32(os, s.r);
  }
  for (double v : flatten(adapter)) detail::put_f64(os, v);
}

inline Adapter read_adapter(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kAdapterMagic, 4) != 0) {
    throw InputError("not an adapter file (bad magic)");
  }
  const std::uint32_t version = detail::get_u32(is);
  if (version != kAdapterFormatVersion) {
    throw InputError("unsupported adapter format version " + std::to_string(version));
  }
  const std::uint32_t layers = detail::get_u32(is);
  AdapterShape shape(layers);
  for (auto& s : shape) {
    s.d = detail::get_u32(is);
    s.k = detail::get_u32(is);
    s.r = detail::get_u32(is);
  }
  std::vector<double> v(param_count(shape));
  for (double& x : v) x = detail::get_f64(is);
  return unflatten(shape, v);
}

inline void save_adapter(const std::string& path, const Adapter& adapter) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot open '" + path + "' for writing");
  write_adapter(os, adapter);
  if (!os) throw InputError("failed writing '" + path + "'");
}

inline Adapter load_adapter(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open '" + path + "'");
  return read_adapter(is);
}

}  // namespace fltac
