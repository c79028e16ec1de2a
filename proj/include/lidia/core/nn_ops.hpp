#pragma once

#include <limits>

#include "lidia/core/ops.hpp"

namespace lidia {
namespace ops {

namespace detail {

// im2col for one output z-slice, kernel 3/stride 1/pad 1.
// col is (Cin*27) x (H*W), laid out row-major.
template <class T>
void im2col_k3(const T* x, int cin, int dd, int hh, int ww, int z, T* col) {
  const int hw = hh * ww;
  const int64_t chw = static_cast<int64_t>(dd) * hw;
  for (int ci = 0; ci < cin; ++ci) {
    for (int kz = 0; kz < 3; ++kz) {
      const int zz = z + kz - 1;
      const bool z_ok = zz >= 0 && zz < dd;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          T* crow = col + (static_cast<int64_t>(ci) * 27 + kz * 9 + ky * 3 + kx) *
                              static_cast<int64_t>(hw);
          if (!z_ok) {
            std::fill_n(crow, hw, T(0));
            continue;
          }
          const T* xsl = x + static_cast<int64_t>(ci) * chw + static_cast<int64_t>(zz) * hw;
          for (int y = 0; y < hh; ++y) {
            const int yy = y + ky - 1;
            T* dst = crow + static_cast<int64_t>(y) * ww;
            if (yy < 0 || yy >= hh) {
              std::fill_n(dst, ww, T(0));
              continue;
            }
            const T* src = xsl + static_cast<int64_t>(yy) * ww;
            // shift in x by kx-1 with zero borders
            if (kx == 1) {
              std::copy_n(src, ww, dst);
            } else if (kx == 0) {
              dst[0] = T(0);
              std::copy_n(src, ww - 1, dst + 1);
            } else {
              std::copy_n(src + 1, ww - 1, dst);
              dst[ww - 1] = T(0);
            }
          }
        }
      }
    }
  }
}

// im2col for one output z-slice, kernel 2/stride 2/pad 0.
// col is (Cin*8) x (H/2 * W/2).
template <class T>
void im2col_k2s2(const T* x, int cin, int dd, int hh, int ww, int zo, T* col) {
  const int ho = hh / 2, wo = ww / 2;
  const int hwo = ho * wo;
  const int hw = hh * ww;
  const int64_t chw = static_cast<int64_t>(dd) * hw;
  for (int ci = 0; ci < cin; ++ci) {
    for (int kz = 0; kz < 2; ++kz) {
      const T* xsl = x + static_cast<int64_t>(ci) * chw + static_cast<int64_t>(2 * zo + kz) * hw;
      for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
          T* crow = col + (static_cast<int64_t>(ci) * 8 + kz * 4 + ky * 2 + kx) *
                              static_cast<int64_t>(hwo);
          for (int yo = 0; yo < ho; ++yo) {
            const T* src = xsl + static_cast<int64_t>(2 * yo + ky) * ww + kx;
            T* dst = crow + static_cast<int64_t>(yo) * wo;
            for (int xo = 0; xo < wo; ++xo) dst[xo] = src[2 * xo];
          }
        }
      }
    }
  }
}

// Full-volume stride-1 convolution used by both conv3d forward and its
// backward-data pass (with flipped weights). w is (Cout x Cin*k3) row-major.
template <class T>
void conv_k3_forward(const T* x, const T* w, const T* b, int cin, int cout, int dd, int hh,
                     int ww, T* out) {
  const int hw = hh * ww;
  const int krows = cin * 27;
  std::vector<T> col(static_cast<size_t>(krows) * hw);
  for (int z = 0; z < dd; ++z) {
    im2col_k3(x, cin, dd, hh, ww, z, col.data());
    // out slice: (Cout x hw) but out is laid out (Cout, D, H, W); write via ldc = D*hw
    gemm(false, false, cout, hw, krows, T(1), w, krows, col.data(), hw, T(0),
         out + static_cast<int64_t>(z) * hw, dd * hw);
  }
  if (b) {
    for (int co = 0; co < cout; ++co) {
      T* ch = out + static_cast<int64_t>(co) * dd * hw;
      const T bias = b[co];
      for (int64_t i = 0; i < static_cast<int64_t>(dd) * hw; ++i) ch[i] += bias;
    }
  }
}

template <class T>
void conv_k1_forward(const T* x, const T* w, const T* b, int cin, int cout, int64_t vox, T* out) {
  gemm(false, false, cout, static_cast<int>(vox), cin, T(1), w, cin, x, static_cast<int>(vox),
       T(0), out, static_cast<int>(vox));
  if (b) {
    for (int co = 0; co < cout; ++co) {
      T* ch = out + static_cast<int64_t>(co) * vox;
      for (int64_t i = 0; i < vox; ++i) ch[i] += b[co];
    }
  }
}

}  // namespace detail

/// 3-D convolution on a single (Cin, D, H, W) volume.
/// Supported configurations: k=3/stride=1/pad=1, k=1/stride=1/pad=0,
/// k=2/stride=2/pad=0 (downsampling). Weight shape (Cout, Cin, k, k, k).
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride) {
  const auto& xs = x.val().shape();
  const auto& ws = w.val().shape();
  if (xs.size() != 4 || ws.size() != 5) throw std::invalid_argument("conv3d: bad rank");
  const int cin = xs[0], dd = xs[1], hh = xs[2], ww = xs[3];
  const int cout = ws[0], k = ws[2];
  if (ws[1] != cin) throw std::invalid_argument("conv3d: channel mismatch");
  if (!((k == 3 && stride == 1) || (k == 1 && stride == 1) || (k == 2 && stride == 2)))
    throw std::invalid_argument("conv3d: unsupported kernel/stride combination");
  if (k == 2 && (dd % 2 || hh % 2 || ww % 2))
    throw std::invalid_argument("conv3d: stride-2 requires even spatial dims");

  const int od = dd / stride, oh = hh / stride, ow = ww / stride;
  Tensor<T> out({cout, od, oh, ow});
  const T* px = x.val().data();
  const T* pw = w.val().data();
  const T* pb = b.val().data();

  if (k == 3) {
    detail::conv_k3_forward(px, pw, pb, cin, cout, dd, hh, ww, out.data());
  } else if (k == 1) {
    detail::conv_k1_forward(px, pw, pb, cin, cout, static_cast<int64_t>(dd) * hh * ww,
                            out.data());
  } else {  // k == 2, stride 2
    const int hwo = oh * ow;
    const int krows = cin * 8;
    std::vector<T> col(static_cast<size_t>(krows) * hwo);
    for (int zo = 0; zo < od; ++zo) {
      detail::im2col_k2s2(px, cin, dd, hh, ww, zo, col.data());
      gemm(false, false, cout, hwo, krows, T(1), pw, krows, col.data(), hwo, T(0),
           out.data() + static_cast<int64_t>(zo) * hwo, od * hwo);
    }
    for (int co = 0; co < cout; ++co) {
      T* ch = out.data() + static_cast<int64_t>(co) * od * hwo;
      for (int64_t i = 0; i < static_cast<int64_t>(od) * hwo; ++i) ch[i] += pb[co];
    }
  }

  return make_op<T>(std::move(out), {x, w, b},
                    [cin, cout, dd, hh, ww, k, stride](Node<T>& self) {
    const int od = dd / stride, oh = hh / stride, ow = ww / stride;
    const int hw = hh * ww, hwo = oh * ow;
    const T* g = self.grad.data();
    const T* px = self.inputs[0]->value.data();
    const T* pw = self.inputs[1]->value.data();

    if (self.inputs[2]->requires_grad) {
      Tensor<T>& db = self.inputs[2]->ensure_grad();
      for (int co = 0; co < cout; ++co) {
        T s = 0;
        const T* ch = g + static_cast<int64_t>(co) * od * hwo;
        for (int64_t i = 0; i < static_cast<int64_t>(od) * hwo; ++i) s += ch[i];
        db[co] += s;
      }
    }

    if (k == 1) {
      const int64_t vox = static_cast<int64_t>(dd) * hw;
      if (self.inputs[1]->requires_grad) {
        Tensor<T>& dw = self.inputs[1]->ensure_grad();
        gemm(false, true, cout, cin, static_cast<int>(vox), T(1), g, static_cast<int>(vox), px,
             static_cast<int>(vox), T(1), dw.data(), cin);
      }
      if (self.inputs[0]->requires_grad) {
        Tensor<T>& dx = self.inputs[0]->ensure_grad();
        gemm(true, false, cin, static_cast<int>(vox), cout, T(1), pw, cin, g,
             static_cast<int>(vox), T(1), dx.data(), static_cast<int>(vox));
      }
      return;
    }

    const int ksz = k * k * k;
    const int krows = cin * ksz;
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& dw = self.inputs[1]->ensure_grad();
      std::vector<T> col(static_cast<size_t>(krows) * hwo);
      for (int zo = 0; zo < od; ++zo) {
        if (k == 3)
          detail::im2col_k3(px, cin, dd, hh, ww, zo, col.data());
        else
          detail::im2col_k2s2(px, cin, dd, hh, ww, zo, col.data());
        // dW += g_slice (Cout x hwo) * col^T (hwo x krows); g slice has row stride od*hwo
        gemm(false, true, cout, krows, hwo, T(1), g + static_cast<int64_t>(zo) * hwo, od * hwo,
             col.data(), hwo, T(1), dw.data(), krows);
      }
    }
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& dx = self.inputs[0]->ensure_grad();
      if (k == 3) {
        // backward-data as a convolution with channel-transposed, spatially
        // flipped weights: wf[ci][co*27 + (26-t)] = w[co][ci*27 + t]
        std::vector<T> wf(static_cast<size_t>(cin) * cout * 27);
        for (int co = 0; co < cout; ++co)
          for (int ci = 0; ci < cin; ++ci)
            for (int t = 0; t < 27; ++t)
              wf[(static_cast<int64_t>(ci) * cout + co) * 27 + (26 - t)] =
                  pw[(static_cast<int64_t>(co) * cin + ci) * 27 + t];
        Tensor<T> dxf({cin, dd, hh, ww});
        detail::conv_k3_forward(g, wf.data(), static_cast<const T*>(nullptr), cout, cin, dd, hh,
                                ww, dxf.data());
        accum_grad(*self.inputs[0], dxf);
      } else {  // k2 s2: dcol = W^T * g_slice, then scatter (windows are disjoint)
        std::vector<T> dcol(static_cast<size_t>(krows) * hwo);
        for (int zo = 0; zo < od; ++zo) {
          gemm(true, false, krows, hwo, cout, T(1), pw, krows,
               g + static_cast<int64_t>(zo) * hwo, od * hwo, T(0), dcol.data(), hwo);
          for (int ci = 0; ci < cin; ++ci)
            for (int kz = 0; kz < 2; ++kz)
              for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx) {
                  const T* crow = dcol.data() + (static_cast<int64_t>(ci) * 8 + kz * 4 + ky * 2 +
                                                 kx) * static_cast<int64_t>(hwo);
                  T* xsl = dx.data() + static_cast<int64_t>(ci) * dd * hw +
                           static_cast<int64_t>(2 * zo + kz) * hw;
                  for (int yo = 0; yo < oh; ++yo) {
                    T* dst = xsl + static_cast<int64_t>(2 * yo + ky) * ww + kx;
                    const T* src = crow + static_cast<int64_t>(yo) * ow;
                    for (int xo = 0; xo < ow; ++xo) dst[2 * xo] += src[xo];
                  }
                }
        }
      }
    }
  });
}

/// Instance normalization over spatial dims, per channel, with affine params.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  const auto& xs = x.val().shape();
  if (xs.size() != 4) throw std::invalid_argument("instance_norm: expected (C,D,H,W)");
  const int c = xs[0];
  const int64_t n = static_cast<int64_t>(xs[1]) * xs[2] * xs[3];
  if (gamma.val().numel() != c || beta.val().numel() != c)
    throw std::invalid_argument("instance_norm: affine parameter size mismatch");

  Tensor<T> out(xs);
  Tensor<T> xhat(xs);
  Tensor<T> inv_std({c});
  const T* px = x.val().data();
  for (int ci = 0; ci < c; ++ci) {
    const T* ch = px + static_cast<int64_t>(ci) * n;
    T mu = 0;
    for (int64_t i = 0; i < n; ++i) mu += ch[i];
    mu /= static_cast<T>(n);
    T var = 0;
    for (int64_t i = 0; i < n; ++i) var += (ch[i] - mu) * (ch[i] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[ci] = is;
    const T gm = gamma.val()[ci], bt = beta.val()[ci];
    T* och = out.data() + static_cast<int64_t>(ci) * n;
    T* hch = xhat.data() + static_cast<int64_t>(ci) * n;
    for (int64_t i = 0; i < n; ++i) {
      hch[i] = (ch[i] - mu) * is;
      och[i] = gm * hch[i] + bt;
    }
  }
  return make_op<T>(std::move(out), {x, gamma, beta}, [xhat, inv_std, c, n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* gm = self.inputs[1]->value.data();
    if (self.inputs[1]->requires_grad) {
      Tensor<T>& dg = self.inputs[1]->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        T s = 0;
        const int64_t off = static_cast<int64_t>(ci) * n;
        for (int64_t i = 0; i < n; ++i) s += g[off + i] * xhat[off + i];
        dg[ci] += s;
      }
    }
    if (self.inputs[2]->requires_grad) {
      Tensor<T>& db = self.inputs[2]->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        T s = 0;
        const int64_t off = static_cast<int64_t>(ci) * n;
        for (int64_t i = 0; i < n; ++i) s += g[off + i];
        db[ci] += s;
      }
    }
    if (self.inputs[0]->requires_grad) {
      Tensor<T>& dx = self.inputs[0]->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        const int64_t off = static_cast<int64_t>(ci) * n;
        T mean_dxh = 0, mean_dxh_xh = 0;
        for (int64_t i = 0; i < n; ++i) {
          const T dxh = g[off + i] * gm[ci];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat[off + i];
        }
        mean_dxh /= static_cast<T>(n);
        mean_dxh_xh /= static_cast<T>(n);
        for (int64_t i = 0; i < n; ++i) {
          const T dxh = g[off + i] * gm[ci];
          dx[off + i] += inv_std[ci] * (dxh - mean_dxh - xhat[off + i] * mean_dxh_xh);
        }
      }
    }
  });
}

/// Nearest-neighbour 2x upsampling of a (C, D, H, W) volume.
template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const auto& xs = x.val().shape();
  if (xs.size() != 4) throw std::invalid_argument("upsample: expected (C,D,H,W)");
  const int c = xs[0], dd = xs[1], hh = xs[2], ww = xs[3];
  Tensor<T> out({c, 2 * dd, 2 * hh, 2 * ww});
  const T* px = x.val().data();
  for (int ci = 0; ci < c; ++ci)
    for (int z = 0; z < 2 * dd; ++z)
      for (int y = 0; y < 2 * hh; ++y) {
        const T* src = px + ((static_cast<int64_t>(ci) * dd + z / 2) * hh + y / 2) * ww;
        T* dst = out.data() +
                 ((static_cast<int64_t>(ci) * 2 * dd + z) * 2 * hh + y) * static_cast<int64_t>(2 * ww);
        for (int xw = 0; xw < 2 * ww; ++xw) dst[xw] = src[xw / 2];
      }
  return make_op<T>(std::move(out), {x}, [c, dd, hh, ww](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const T* g = self.grad.data();
    for (int ci = 0; ci < c; ++ci)
      for (int z = 0; z < 2 * dd; ++z)
        for (int y = 0; y < 2 * hh; ++y) {
          T* dst = d.data() + ((static_cast<int64_t>(ci) * dd + z / 2) * hh + y / 2) * ww;
          const T* src = g + ((static_cast<int64_t>(ci) * 2 * dd + z) * 2 * hh + y) *
                                 static_cast<int64_t>(2 * ww);
          for (int xw = 0; xw < 2 * ww; ++xw) dst[xw / 2] += src[xw];
        }
  });
}

/// Average pooling by integer factor f over all three spatial dims.
template <class T>
Var<T> avgpool(const Var<T>& x, int f) {
  const auto& xs = x.val().shape();
  if (xs.size() != 4) throw std::invalid_argument("avgpool: expected (C,D,H,W)");
  const int c = xs[0], dd = xs[1], hh = xs[2], ww = xs[3];
  if (dd % f || hh % f || ww % f) throw std::invalid_argument("avgpool: dims not divisible");
  const int od = dd / f, oh = hh / f, ow = ww / f;
  Tensor<T> out({c, od, oh, ow});
  const T* px = x.val().data();
  const T inv = T(1) / static_cast<T>(f * f * f);
  for (int ci = 0; ci < c; ++ci)
    for (int zo = 0; zo < od; ++zo)
      for (int yo = 0; yo < oh; ++yo)
        for (int xo = 0; xo < ow; ++xo) {
          T s = 0;
          for (int kz = 0; kz < f; ++kz)
            for (int ky = 0; ky < f; ++ky)
              for (int kx = 0; kx < f; ++kx)
                s += px[((static_cast<int64_t>(ci) * dd + zo * f + kz) * hh + yo * f + ky) * ww +
                        xo * f + kx];
          out[((static_cast<int64_t>(ci) * od + zo) * oh + yo) * ow + xo] = s * inv;
        }
  return make_op<T>(std::move(out), {x}, [c, dd, hh, ww, f](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Tensor<T>& d = in.ensure_grad();
    const int od = dd / f, oh = hh / f, ow = ww / f;
    const T inv = T(1) / static_cast<T>(f * f * f);
    const T* g = self.grad.data();
    for (int ci = 0; ci < c; ++ci)
      for (int zo = 0; zo < od; ++zo)
        for (int yo = 0; yo < oh; ++yo)
          for (int xo = 0; xo < ow; ++xo) {
            const T gv = g[((static_cast<int64_t>(ci) * od + zo) * oh + yo) * ow + xo] * inv;
            for (int kz = 0; kz < f; ++kz)
              for (int ky = 0; ky < f; ++ky)
                for (int kx = 0; kx < f; ++kx)
                  d[((static_cast<int64_t>(ci) * dd + zo * f + kz) * hh + yo * f + ky) * ww +
                    xo * f + kx] += gv;
          }
  });
}

}  // namespace ops
}  // namespace lidia
