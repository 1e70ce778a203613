#pragma once

#include "cotd/autodiff.hpp"
#include "cotd/hash.hpp"
#include "cotd/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cotd {

enum class Activation : std::uint8_t { Identity, Tanh, Relu };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    default: return "identity";
  }
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

/// Affine layer y = act(x W + b); W is [in, out], b is [1, out].
struct DenseLayer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::Identity;

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
};

/// Multilayer perceptron over row batches.
class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.out_dim())
        throw DimensionError("mlp layer " + std::to_string(i) + ": bias size " +
                             std::to_string(l.bias.size()) + " != out dim " + std::to_string(l.out_dim()));
      if (i > 0 && layers_[i - 1].out_dim() != l.in_dim())
        throw DimensionError("mlp layer " + std::to_string(i) + ": in dim " + std::to_string(l.in_dim()) +
                             " does not chain with previous out dim " +
                             std::to_string(layers_[i - 1].out_dim()));
    }
  }

  /// Xavier/Glorot-uniform weights, zero biases. `dims` has one more entry
  /// than `activations`.
  static Mlp xavier(const std::vector<std::size_t>& dims, const std::vector<Activation>& activations,
                    std::uint64_t seed) {
    if (dims.size() != activations.size() + 1)
      throw DimensionError("mlp: need one activation per layer");
    Rng rng(seed);
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      DenseLayer l;
      l.weight = Tensor(Shape{dims[i], dims[i + 1]});
      l.bias = Tensor(Shape{1, dims[i + 1]});
      l.activation = activations[i];
      const double limit = std::sqrt(6.0 / static_cast<double>(dims[i] + dims[i + 1]));
      for (double& w : l.weight.values()) w = uniform(rng, -limit, limit);
      layers.push_back(std::move(l));
    }
    return Mlp(std::move(layers));
  }

  static Mlp zeros(const std::vector<std::size_t>& dims, const std::vector<Activation>& activations) {
    Mlp m = xavier(dims, activations, 0);
    for (auto* p : m.parameters()) p->fill(0.0);
    return m;
  }

  std::size_t in_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    if (layers_.empty()) return d;
    d.push_back(in_dim());
    for (const auto& l : layers_) d.push_back(l.out_dim());
    return d;
  }
  std::vector<Activation> activations() const {
    std::vector<Activation> a;
    for (const auto& l : layers_) a.push_back(l.activation);
    return a;
  }

  /// Parameters in order w0, b0, w1, b1, ...
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps;
    for (auto& l : layers_) {
      ps.push_back(&l.weight);
      ps.push_back(&l.bias);
    }
    return ps;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> ps;
    for (const auto& l : layers_) {
      ps.push_back(&l.weight);
      ps.push_back(&l.bias);
    }
    return ps;
  }
  std::vector<std::string> parameter_names(const std::string& prefix) const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      names.push_back(prefix + "w" + std::to_string(i));
      names.push_back(prefix + "b" + std::to_string(i));
    }
    return names;
  }

  /// Forward pass without gradient tracking.
  Tensor forward(const Tensor& input) const {
    Tensor x = input.rank() == 2 ? input : Tensor(Shape{1, input.size()}, input.values());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      check_input(i, x.cols());
      Tensor y = kernels::matmul(x, l.weight);
      const std::size_t C = y.cols();
      for (std::size_t k = 0; k < y.size(); ++k) {
        double v = y[k] + l.bias[k % C];
        if (l.activation == Activation::Tanh) v = std::tanh(v);
        else if (l.activation == Activation::Relu) v = v > 0.0 ? v : 0.0;
        y[k] = v;
      }
      x = std::move(y);
    }
    return x;
  }

  /// Parameter leaves on `g`, in parameters() order.
  std::vector<Var> bind(Graph& g) const {
    std::vector<Var> vs;
    for (const auto* p : parameters()) vs.push_back(g.parameter(*p));
    return vs;
  }

  /// Recorded forward pass using leaves from bind().
  Var forward(std::span<const Var> bound, Var input) const {
    if (bound.size() != 2 * layers_.size()) throw ContractError("mlp: bound parameter count mismatch");
    Var x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      check_input(i, x.value().cols());
      x = matmul(x, bound[2 * i]) + bound[2 * i + 1];
      if (layers_[i].activation == Activation::Tanh) x = tanh(x);
      else if (layers_[i].activation == Activation::Relu) x = relu(x);
    }
    return x;
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto* p : parameters()) h.f64s(p->data());
    return h.value();
  }

 private:
  void check_input(std::size_t layer, std::size_t got) const {
    if (got != layers_[layer].in_dim())
      throw DimensionError("mlp layer " + std::to_string(layer) + ": expected input dim " +
                           std::to_string(layers_[layer].in_dim()) + ", got " + std::to_string(got));
  }

  std::vector<DenseLayer> layers_;
};

/// Gradients of `bound` leaves after Graph::backward.
inline std::vector<Tensor> collect_grads(std::span<const Var> bound) {
  std::vector<Tensor> gs;
  gs.reserve(bound.size());
  for (const auto& v : bound) gs.push_back(v.grad());
  return gs;
}

}  // namespace cotd
