#pragma once

#include <string>
#include <unordered_map>

#include "lidia/core/nn_ops.hpp"
#include "lidia/core/rng.hpp"

namespace lidia {

/// Ordered registry of named trainable parameters. Names are stable across
/// runs with the same model configuration, which the checkpoint format
/// relies on.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
  };

  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    Var<T> v = Var<T>::leaf(std::move(init), true);
    index_[name] = entries_.size();
    entries_.push_back({name, v});
    return v;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  Var<T> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
    return entries_[it->second].var;
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.var.val().numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.var.node->grad.defined()) e.var.node->grad.fill(T(0));
  }

  /// Flattened gradient in registration order (zeros where never touched).
  std::vector<T> gradient_flat() const {
    std::vector<T> g;
    g.reserve(static_cast<size_t>(total_size()));
    for (const auto& e : entries_) {
      const auto& gr = e.var.node->grad;
      if (gr.defined())
        g.insert(g.end(), gr.data(), gr.data() + gr.numel());
      else
        g.insert(g.end(), static_cast<size_t>(e.var.val().numel()), T(0));
    }
    return g;
  }

  std::vector<T> values_flat() const {
    std::vector<T> v;
    v.reserve(static_cast<size_t>(total_size()));
    for (const auto& e : entries_)
      v.insert(v.end(), e.var.val().data(), e.var.val().data() + e.var.val().numel());
    return v;
  }

  void set_values_flat(const std::vector<T>& v) {
    if (static_cast<int64_t>(v.size()) != total_size())
      throw std::invalid_argument("set_values_flat: size mismatch");
    size_t off = 0;
    for (auto& e : entries_) {
      std::copy_n(v.data() + off, e.var.val().numel(), e.var.val().data());
      off += static_cast<size_t>(e.var.val().numel());
    }
  }

  /// In-place w += alpha * delta over the flattened parameter vector.
  void axpy_values(T alpha, const std::vector<T>& delta) {
    size_t off = 0;
    for (auto& e : entries_) {
      T* p = e.var.val().data();
      for (int64_t i = 0; i < e.var.val().numel(); ++i) p[i] += alpha * delta[off + i];
      off += static_cast<size_t>(e.var.val().numel());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

namespace init {

template <class T>
Tensor<T> he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double std = std::sqrt(2.0 / fan_in);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, std));
  return t;
}

template <class T>
Tensor<T> normal(std::vector<int> shape, double std, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, std));
  return t;
}

template <class T>
Tensor<T> zeros(std::vector<int> shape) {
  return Tensor<T>(std::move(shape));
}

template <class T>
Tensor<T> ones(std::vector<int> shape) {
  return Tensor<T>::full(std::move(shape), T(1));
}

}  // namespace init

/// conv3d + instance norm + LeakyReLU.
template <class T>
class ConvBlock {
 public:
  ConvBlock() = default;

  ConvBlock(ParamStore<T>& ps, const std::string& prefix, int cin, int cout, int kernel,
            int stride, double in_eps, double lrelu_slope, Rng& rng)
      : stride_(stride), in_eps_(in_eps), slope_(lrelu_slope) {
    const int fan_in = cin * kernel * kernel * kernel;
    w_ = ps.add(prefix + ".conv.weight",
                init::he_normal<T>({cout, cin, kernel, kernel, kernel}, fan_in, rng));
    b_ = ps.add(prefix + ".conv.bias", init::zeros<T>({cout}));
    gamma_ = ps.add(prefix + ".norm.gamma", init::ones<T>({cout}));
    beta_ = ps.add(prefix + ".norm.beta", init::zeros<T>({cout}));
  }

  Var<T> forward(const Var<T>& x) const {
    return ops::leaky_relu(
        ops::instance_norm(ops::conv3d(x, w_, b_, stride_), gamma_, beta_, in_eps_), slope_);
  }

  const Var<T>& weight() const { return w_; }

 private:
  Var<T> w_, b_, gamma_, beta_;
  int stride_ = 1;
  double in_eps_ = 1e-5;
  double slope_ = 0.01;
};

/// Plain 1x1x1 convolution (no norm, no activation); FPN lateral connections.
template <class T>
class PointwiseConv {
 public:
  PointwiseConv() = default;

  PointwiseConv(ParamStore<T>& ps, const std::string& prefix, int cin, int cout, Rng& rng) {
    w_ = ps.add(prefix + ".weight", init::he_normal<T>({cout, cin, 1, 1, 1}, cin, rng));
    b_ = ps.add(prefix + ".bias", init::zeros<T>({cout}));
  }

  Var<T> forward(const Var<T>& x) const { return ops::conv3d(x, w_, b_, 1); }

 private:
  Var<T> w_, b_;
};

template <class T>
class Linear {
 public:
  Linear() = default;

  Linear(ParamStore<T>& ps, const std::string& prefix, int in, int out, Rng& rng) {
    w_ = ps.add(prefix + ".weight", init::he_normal<T>({out, in}, in, rng));
    b_ = ps.add(prefix + ".bias", init::zeros<T>({out}));
  }

  Var<T> forward(const Var<T>& x) const { return ops::linear(x, w_, b_); }

 private:
  Var<T> w_, b_;
};

/// Two-layer MLP with ReLU.
template <class T>
class Mlp {
 public:
  Mlp() = default;

  Mlp(ParamStore<T>& ps, const std::string& prefix, int in, int hidden, int out, Rng& rng)
      : l1_(ps, prefix + ".fc1", in, hidden, rng), l2_(ps, prefix + ".fc2", hidden, out, rng) {}

  Var<T> forward(const Var<T>& x) const { return l2_.forward(ops::relu(l1_.forward(x))); }

 private:
  Linear<T> l1_, l2_;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;

  LayerNorm(ParamStore<T>& ps, const std::string& prefix, int dim, double eps = 1e-5)
      : eps_(eps) {
    gamma_ = ps.add(prefix + ".gamma", init::ones<T>({dim}));
    beta_ = ps.add(prefix + ".beta", init::zeros<T>({dim}));
  }

  Var<T> forward(const Var<T>& x) const { return ops::layer_norm_rows(x, gamma_, beta_, eps_); }

 private:
  Var<T> gamma_, beta_;
  double eps_ = 1e-5;
};

}  // namespace lidia
