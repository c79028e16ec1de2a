#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "lidia/core/blas.hpp"
#include "lidia/core/graph.hpp"

namespace lidia {
namespace ops {

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.val().same_shape(b.val()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.val().shape()) +
                                " vs " + shape_str(b.val().shape()));
}

template <class T>
Var<T> constant(Tensor<T> v) {
  return Var<T>::leaf(std::move(v), false);
}

template <class T>
Var<T> scalar_const(T v) {
  return Var<T>::leaf(Tensor<T>({1}, {v}), false);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    accum_grad(*self.inputs[0], self.grad);
    accum_grad(*self.inputs[1], self.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    accum_grad(*self.inputs[0], self.grad);
    Node<T>& in = *self.inputs[1];
    if (in.requires_grad) {
      Tensor<T>& d = in.ensure_grad();
      const T* g = self.grad.data();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = self.inputs[0]->value.data();
    const T* pb = self.inputs[1]->value.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& d = self.inputs[0]->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * pb[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& d = self.inputs[1]->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * pa[i];
    }
  });
}

template <class T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "divide");
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] / pb[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = self.inputs[0]->value.data();
    const T* pb = self.inputs[1]->value.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& d = self.inputs[0]->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] / pb[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& d = self.inputs[1]->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, double c) {
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  T* po = out.data();
  const T tc = static_cast<T>(c);
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * tc;
  return make_op<T>(std::move(out), {a}, [tc](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * tc;
  });
}

template <class T>
Var<T> add_const(const Var<T>& a, double c) {
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  T* po = out.data();
  const T tc = static_cast<T>(c);
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + tc;
  return make_op<T>(std::move(out), {a},
                    [](Node<T>& self) { accum_grad(*self.inputs[0], self.grad); });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return scale(a, -1.0);
}

template <class T>
Var<T> vexp(const Var<T>& a) {
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::exp(pa[i]);
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {a}, [saved](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* y = saved.data();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * y[i];
  });
}

template <class T>
Var<T> vlog(const Var<T>& a) {
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::log(pa[i]);
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* x = in.value.data();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] / x[i];
  });
}

/// Elementwise a^p for constant p. Gradient at a=0 is defined as 0 for p >= 1.
template <class T>
Var<T> pow_const(const Var<T>& a, double p) {
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::pow(pa[i], static_cast<T>(p));
  return make_op<T>(std::move(out), {a}, [p](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* x = in.value.data();
    for (int64_t i = 0; i < d.numel(); ++i) {
      if (p == 0.0) continue;
      T base = x[i];
      if (base == T(0) && p < 1.0) continue;
      d[i] += g[i] * static_cast<T>(p) * std::pow(base, static_cast<T>(p - 1.0));
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    T x = pa[i];
    po[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {a}, [saved](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* y = saved.data();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, double slope) {
  Tensor<T> out(a.val().shape());
  const T* pa = a.val().data();
  T* po = out.data();
  const T s = static_cast<T>(slope);
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > T(0) ? pa[i] : s * pa[i];
  return make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* x = in.value.data();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += x[i] > T(0) ? g[i] : s * g[i];
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return leaky_relu(a, 0.0);
}

/// Leaf copy of a (stops gradient flow).
template <class T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::leaf(a.val(), false);
}

// ---------------------------------------------------------------------------
// shape / indexing
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  Tensor<T> out = a.val().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {a},
                    [](Node<T>& self) { accum_grad(*self.inputs[0], self.grad); });
}

/// y[i] = a.flat[idx[i]]. Duplicate indices accumulate on backward.
template <class T>
Var<T> gather(const Var<T>& a, std::vector<int64_t> idx) {
  Tensor<T> out({static_cast<int>(idx.size())});
  const T* pa = a.val().data();
  for (size_t i = 0; i < idx.size(); ++i) out[static_cast<int64_t>(i)] = pa[idx[i]];
  auto ids = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return make_op<T>(std::move(out), {a}, [ids](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    for (size_t i = 0; i < ids->size(); ++i) d[(*ids)[i]] += g[i];
  });
}

/// Select rows of a 2-D matrix.
template <class T>
Var<T> select_rows(const Var<T>& m, std::vector<int> rows) {
  const int d = m.val().dim(1);
  Tensor<T> out({static_cast<int>(rows.size()), d});
  for (size_t r = 0; r < rows.size(); ++r)
    std::copy_n(m.val().data() + static_cast<int64_t>(rows[r]) * d, d,
                out.data() + static_cast<int64_t>(r) * d);
  auto rs = std::make_shared<std::vector<int>>(std::move(rows));
  return make_op<T>(std::move(out), {m}, [rs, d](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& dst = in.ensure_grad();
    const T* g = self.grad.data();
    for (size_t r = 0; r < rs->size(); ++r) {
      T* row = dst.data() + static_cast<int64_t>((*rs)[r]) * d;
      const T* src = g + static_cast<int64_t>(r) * d;
      for (int j = 0; j < d; ++j) row[j] += src[j];
    }
  });
}

template <class T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  if (a.val().dim(1) != b.val().dim(1))
    throw std::invalid_argument("concat_rows: column count mismatch");
  const int d = a.val().dim(1);
  const int ma = a.val().dim(0), mb = b.val().dim(0);
  Tensor<T> out({ma + mb, d});
  std::copy_n(a.val().data(), static_cast<int64_t>(ma) * d, out.data());
  std::copy_n(b.val().data(), static_cast<int64_t>(mb) * d,
              out.data() + static_cast<int64_t>(ma) * d);
  return make_op<T>(std::move(out), {a, b}, [ma, mb, d](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& da = self.inputs[0]->ensure_grad();
      for (int64_t i = 0; i < static_cast<int64_t>(ma) * d; ++i) da[i] += g[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& db = self.inputs[1]->ensure_grad();
      const T* gb = g + static_cast<int64_t>(ma) * d;
      for (int64_t i = 0; i < static_cast<int64_t>(mb) * d; ++i) db[i] += gb[i];
    }
  });
}

/// Concatenate two (C, D, H, W) volumes along channels.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.val().shape();
  const auto& sb = b.val().shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[1] != sb[1] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: spatial shape mismatch");
  Tensor<T> out({sa[0] + sb[0], sa[1], sa[2], sa[3]});
  const int64_t na = a.val().numel(), nb = b.val().numel();
  std::copy_n(a.val().data(), na, out.data());
  std::copy_n(b.val().data(), nb, out.data() + na);
  return make_op<T>(std::move(out), {a, b}, [na, nb](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& da = self.inputs[0]->ensure_grad();
      for (int64_t i = 0; i < na; ++i) da[i] += g[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& db = self.inputs[1]->ensure_grad();
      for (int64_t i = 0; i < nb; ++i) db[i] += g[na + i];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  const T* pa = a.val().data();
  for (int64_t i = 0; i < a.val().numel(); ++i) s += pa[i];
  return make_op<T>(Tensor<T>({1}, {s}), {a}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T g = self.grad[0];
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const int64_t n = a.val().numel();
  T s = 0;
  const T* pa = a.val().data();
  for (int64_t i = 0; i < n; ++i) s += pa[i];
  s /= static_cast<T>(n);
  return make_op<T>(Tensor<T>({1}, {s}), {a}, [n](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T g = self.grad[0] / static_cast<T>(n);
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g;
  });
}

template <class T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  if (a.val().numel() != b.val().numel())
    throw std::invalid_argument("dot: length mismatch");
  T s = 0;
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  for (int64_t i = 0; i < a.val().numel(); ++i) s += pa[i] * pb[i];
  return make_op<T>(Tensor<T>({1}, {s}), {a, b}, [](Node<T>& self) {
    const T g = self.grad[0];
    const T* pa = self.inputs[0]->value.data();
    const T* pb = self.inputs[1]->value.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& d = self.inputs[0]->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += g * pb[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& d = self.inputs[1]->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += g * pa[i];
    }
  });
}

/// log(sum(exp(a))) over the flattened input, numerically stable.
template <class T>
Var<T> logsumexp(const Var<T>& a) {
  const T* pa = a.val().data();
  const int64_t n = a.val().numel();
  T m = pa[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, pa[i]);
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += std::exp(pa[i] - m);
  T lse = m + std::log(s);
  return make_op<T>(Tensor<T>({1}, {lse}), {a}, [m, s](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T g = self.grad[0];
    const T* x = in.value.data();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g * std::exp(x[i] - m) / s;
  });
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const int m = a.val().dim(0), k = a.val().dim(1);
  if (b.val().dim(0) != k) throw std::invalid_argument("matmul: inner dim mismatch");
  const int n = b.val().dim(1);
  Tensor<T> out({m, n});
  gemm(false, false, m, n, k, T(1), a.val().data(), k, b.val().data(), n, T(0), out.data(), n);
  return make_op<T>(std::move(out), {a, b}, [m, n, k](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& da = self.inputs[0]->ensure_grad();
      gemm(false, true, m, k, n, T(1), g, n, self.inputs[1]->value.data(), n, T(1), da.data(), k);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& db = self.inputs[1]->ensure_grad();
      gemm(true, false, k, n, m, T(1), self.inputs[0]->value.data(), k, g, n, T(1), db.data(), n);
    }
  });
}

/// a (m x k) times b^T (n x k) -> (m x n).
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  const int m = a.val().dim(0), k = a.val().dim(1);
  if (b.val().dim(1) != k) throw std::invalid_argument("matmul_nt: inner dim mismatch");
  const int n = b.val().dim(0);
  Tensor<T> out({m, n});
  gemm(false, true, m, n, k, T(1), a.val().data(), k, b.val().data(), k, T(0), out.data(), n);
  return make_op<T>(std::move(out), {a, b}, [m, n, k](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& da = self.inputs[0]->ensure_grad();
      gemm(false, false, m, k, n, T(1), g, n, self.inputs[1]->value.data(), k, T(1), da.data(), k);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& db = self.inputs[1]->ensure_grad();
      gemm(true, false, n, k, m, T(1), g, n, self.inputs[0]->value.data(), k, T(1), db.data(), k);
    }
  });
}

/// X (m x k) * W^T (n x k) + b (n) -> (m x n).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int m = x.val().dim(0), k = x.val().dim(1), n = w.val().dim(0);
  if (w.val().dim(1) != k || b.val().numel() != n)
    throw std::invalid_argument("linear: dimension mismatch");
  Tensor<T> out({m, n});
  gemm(false, true, m, n, k, T(1), x.val().data(), k, w.val().data(), k, T(0), out.data(), n);
  for (int i = 0; i < m; ++i) {
    T* row = out.data() + static_cast<int64_t>(i) * n;
    const T* pb = b.val().data();
    for (int j = 0; j < n; ++j) row[j] += pb[j];
  }
  return make_op<T>(std::move(out), {x, w, b}, [m, n, k](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& dx = self.inputs[0]->ensure_grad();
      gemm(false, false, m, k, n, T(1), g, n, self.inputs[1]->value.data(), k, T(1), dx.data(), k);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& dw = self.inputs[1]->ensure_grad();
      gemm(true, false, n, k, m, T(1), g, n, self.inputs[0]->value.data(), k, T(1), dw.data(), k);
    }
    if (self.inputs[2]->requires_grad) {
      Tensor<T>& db = self.inputs[2]->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) db[j] += g[static_cast<int64_t>(i) * n + j];
    }
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const int m = a.val().dim(0), n = a.val().dim(1);
  Tensor<T> out({n, m});
  const T* pa = a.val().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<int64_t>(j) * m + i] = pa[static_cast<int64_t>(i) * n + j];
  return make_op<T>(std::move(out), {a}, [m, n](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        d[static_cast<int64_t>(i) * n + j] += g[static_cast<int64_t>(j) * m + i];
  });
}

/// M (m x d) * v (d) -> (m).
template <class T>
Var<T> matvec(const Var<T>& m_, const Var<T>& v) {
  const int m = m_.val().dim(0), d = m_.val().dim(1);
  if (v.val().numel() != d) throw std::invalid_argument("matvec: dimension mismatch");
  Tensor<T> out({m});
  gemm(false, false, m, 1, d, T(1), m_.val().data(), d, v.val().data(), 1, T(0), out.data(), 1);
  return make_op<T>(std::move(out), {m_, v}, [m, d](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& dm = self.inputs[0]->ensure_grad();
      const T* pv = self.inputs[1]->value.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) dm[static_cast<int64_t>(i) * d + j] += g[i] * pv[j];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& dv = self.inputs[1]->ensure_grad();
      gemm(true, false, d, 1, m, T(1), self.inputs[0]->value.data(), d, g, 1, T(1), dv.data(), 1);
    }
  });
}

// ---------------------------------------------------------------------------
// row-wise softmax / normalization
// ---------------------------------------------------------------------------

namespace detail {

/// Shared kernel: mask == nullptr means all positions allowed. Rows whose mask
/// is entirely false fall back to fully-unmasked attention.
template <class T>
Tensor<T> softmax_forward(const Tensor<T>& a, const uint8_t* mask) {
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* row = a.data() + static_cast<int64_t>(i) * n;
    const uint8_t* mrow = mask ? mask + static_cast<int64_t>(i) * n : nullptr;
    bool any = false;
    if (mrow) {
      for (int j = 0; j < n; ++j) any = any || mrow[j];
    }
    const bool use_mask = mrow && any;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j)
      if (!use_mask || mrow[j]) mx = std::max(mx, row[j]);
    T s = 0;
    T* orow = out.data() + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      if (!use_mask || mrow[j]) {
        orow[j] = std::exp(row[j] - mx);
        s += orow[j];
      } else {
        orow[j] = T(0);
      }
    }
    for (int j = 0; j < n; ++j) orow[j] /= s;
  }
  return out;
}

}  // namespace detail

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  Tensor<T> out = detail::softmax_forward(a.val(), nullptr);
  Tensor<T> saved = out;
  const int m = a.val().dim(0), n = a.val().dim(1);
  return make_op<T>(std::move(out), {a}, [saved, m, n](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* y = saved.data();
    for (int i = 0; i < m; ++i) {
      const int64_t off = static_cast<int64_t>(i) * n;
      T gy = 0;
      for (int j = 0; j < n; ++j) gy += g[off + j] * y[off + j];
      for (int j = 0; j < n; ++j) d[off + j] += y[off + j] * (g[off + j] - gy);
    }
  });
}

/// Softmax restricted per row to positions where allowed != 0. A row with no
/// allowed position is treated as fully allowed (attention fallback).
template <class T>
Var<T> masked_softmax_rows(const Var<T>& a, std::shared_ptr<std::vector<uint8_t>> allowed) {
  if (static_cast<int64_t>(allowed->size()) != a.val().numel())
    throw std::invalid_argument("masked_softmax_rows: mask size mismatch");
  Tensor<T> out = detail::softmax_forward(a.val(), allowed->data());
  Tensor<T> saved = out;
  const int m = a.val().dim(0), n = a.val().dim(1);
  return make_op<T>(std::move(out), {a}, [saved, m, n](Node<T>& self) {
    // masked entries have y == 0, so the same backward covers both cases
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* y = saved.data();
    for (int i = 0; i < m; ++i) {
      const int64_t off = static_cast<int64_t>(i) * n;
      T gy = 0;
      for (int j = 0; j < n; ++j) gy += g[off + j] * y[off + j];
      for (int j = 0; j < n; ++j) d[off + j] += y[off + j] * (g[off + j] - gy);
    }
  });
}

template <class T>
Var<T> log_softmax_rows(const Var<T>& a) {
  const int m = a.val().dim(0), n = a.val().dim(1);
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* row = a.val().data() + static_cast<int64_t>(i) * n;
    T* orow = out.data() + static_cast<int64_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (int j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (int j = 0; j < n; ++j) orow[j] = row[j] - lse;
  }
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {a}, [saved, m, n](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* ls = saved.data();
    for (int i = 0; i < m; ++i) {
      const int64_t off = static_cast<int64_t>(i) * n;
      T gs = 0;
      for (int j = 0; j < n; ++j) gs += g[off + j];
      for (int j = 0; j < n; ++j) d[off + j] += g[off + j] - std::exp(ls[off + j]) * gs;
    }
  });
}

template <class T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  const int m = x.val().dim(0), n = x.val().dim(1);
  if (gamma.val().numel() != n || beta.val().numel() != n)
    throw std::invalid_argument("layer_norm_rows: affine parameter size mismatch");
  Tensor<T> out({m, n});
  Tensor<T> xhat({m, n});
  Tensor<T> inv_std({m});
  for (int i = 0; i < m; ++i) {
    const T* row = x.val().data() + static_cast<int64_t>(i) * n;
    T mu = 0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[i] = is;
    for (int j = 0; j < n; ++j) {
      const int64_t k = static_cast<int64_t>(i) * n + j;
      xhat[k] = (row[j] - mu) * is;
      out[k] = gamma.val()[j] * xhat[k] + beta.val()[j];
    }
  }
  return make_op<T>(std::move(out), {x, gamma, beta}, [xhat, inv_std, m, n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* gm = self.inputs[1]->value.data();
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& dg = self.inputs[1]->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const int64_t k = static_cast<int64_t>(i) * n + j;
          dg[j] += g[k] * xhat[k];
        }
    }
    if (self.inputs[2]->requires_grad) {
      Tensor<T>& db = self.inputs[2]->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) db[j] += g[static_cast<int64_t>(i) * n + j];
    }
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& dx = self.inputs[0]->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const int64_t off = static_cast<int64_t>(i) * n;
        T mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (int j = 0; j < n; ++j) {
          const T dxh = g[off + j] * gm[j];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat[off + j];
        }
        mean_dxhat /= static_cast<T>(n);
        mean_dxhat_xhat /= static_cast<T>(n);
        for (int j = 0; j < n; ++j) {
          const T dxh = g[off + j] * gm[j];
          dx[off + j] += inv_std[i] * (dxh - mean_dxhat - xhat[off + j] * mean_dxhat_xhat);
        }
      }
    }
  });
}

/// Row-wise x / sqrt(sum(x^2) + eps).
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, double eps = 1e-12) {
  const int m = x.val().dim(0), n = x.val().dim(1);
  Tensor<T> out({m, n});
  Tensor<T> inv_r({m});
  for (int i = 0; i < m; ++i) {
    const T* row = x.val().data() + static_cast<int64_t>(i) * n;
    T s = 0;
    for (int j = 0; j < n; ++j) s += row[j] * row[j];
    const T ir = T(1) / std::sqrt(s + static_cast<T>(eps));
    inv_r[i] = ir;
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(i) * n + j] = row[j] * ir;
  }
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {x}, [saved, inv_r, m, n](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    const T* y = saved.data();
    for (int i = 0; i < m; ++i) {
      const int64_t off = static_cast<int64_t>(i) * n;
      T gy = 0;
      for (int j = 0; j < n; ++j) gy += g[off + j] * y[off + j];
      for (int j = 0; j < n; ++j) d[off + j] += inv_r[i] * (g[off + j] - y[off + j] * gy);
    }
  });
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy with logits over a flat vector; targets in {0,1}.
/// Stable form: bce(l, t) = softplus(l) - l*t.
template <class T>
Var<T> bce_with_logits_mean(const Var<T>& logits, Tensor<T> targets) {
  const int64_t n = logits.val().numel();
  if (targets.numel() != n) throw std::invalid_argument("bce: target size mismatch");
  const T* l = logits.val().data();
  const T* t = targets.data();
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T x = l[i];
    const T sp = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    acc += sp - x * t[i];
  }
  acc /= static_cast<T>(n);
  return make_op<T>(Tensor<T>({1}, {acc}), {logits}, [targets, n](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T g = self.grad[0] / static_cast<T>(n);
    const T* l = in.value.data();
    const T* t = targets.data();
    for (int64_t i = 0; i < n; ++i) {
      const T x = l[i];
      const T sig =
          x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      d[i] += g * (sig - t[i]);
    }
  });
}

}  // namespace ops
}  // namespace lidia
