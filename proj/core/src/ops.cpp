#include "remotenet/ops.hpp"

#include <Eigen/Core>
#include <atomic>
#include <cmath>
#include <limits>

namespace remotenet {

namespace faults {
namespace {
std::atomic<Fault> g_fault{Fault::none};
}
void inject(Fault f) { g_fault.store(f); }
Fault active() { return g_fault.load(); }
}  // namespace faults

namespace ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (+)= op(A) * op(B) where A is stored rows_a x cols_a and B rows_b x cols_b.
template <typename T>
void gemm(const T* a, int64_t rows_a, int64_t cols_a, bool trans_a, const T* b, int64_t rows_b, int64_t cols_b,
          bool trans_b, T* c, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, rows_a, cols_a);
  Eigen::Map<const RowMat<T>> B(b, rows_b, cols_b);
  const int64_t m = trans_a ? cols_a : rows_a;
  const int64_t n = trans_b ? rows_b : cols_b;
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += A * B;
  } else if (trans_a && !trans_b) {
    C.noalias() += A.transpose() * B;
  } else if (!trans_a && trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A.transpose() * B.transpose();
  }
}

template <typename T>
Node<T>* grad_target(Node<T>& self, size_t i) {
  Node<T>* p = self.parents[i].get();
  return p->requires_grad ? p : nullptr;
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<int64_t> stride_a;
  std::vector<int64_t> stride_b;
};

std::vector<int64_t> aligned_strides(const Shape& s, const Shape& out) {
  const size_t r = out.size();
  std::vector<int64_t> st(r, 0);
  int64_t acc = 1;
  for (size_t k = 0; k < s.size(); ++k) {
    const size_t src = s.size() - 1 - k;
    const size_t dst = r - 1 - k;
    st[dst] = s[src] == 1 ? 0 : acc;
    acc *= s[src];
  }
  return st;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t k = 0; k < r; ++k) {
    const int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[r - 1 - k] = std::max(da, db);
  }
  return {out, aligned_strides(a, out), aligned_strides(b, out)};
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const size_t r = bc.out.size();
  const int64_t total = shape_numel(bc.out);
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (size_t k = r; k-- > 0;) {
      ++idx[k];
      ia += bc.stride_a[k];
      ib += bc.stride_b[k];
      if (idx[k] < bc.out[k]) break;
      ia -= bc.stride_a[k] * idx[k];
      ib -= bc.stride_b[k] * idx[k];
      idx[k] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<T> out(av.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
      out[i] = op == BinOp::add ? av[i] + bv[i] : op == BinOp::sub ? av[i] - bv[i] : av[i] * bv[i];
    }
    return make_result<T>(std::move(out), {a, b}, [op](Node<T>& self) {
      const auto& g = self.grad;
      const int64_t n = g.numel();
      if (auto* pa = grad_target(self, 0)) {
        auto& ga = pa->grad_buffer();
        const auto& bv = self.parents[1]->value;
        for (int64_t i = 0; i < n; ++i) ga[i] += op == BinOp::mul ? g[i] * bv[i] : g[i];
      }
      if (auto* pb = grad_target(self, 1)) {
        auto& gb = pb->grad_buffer();
        const auto& av = self.parents[0]->value;
        for (int64_t i = 0; i < n; ++i) {
          gb[i] += op == BinOp::mul ? g[i] * av[i] : op == BinOp::sub ? -g[i] : g[i];
        }
      }
    });
  }

  Broadcast bc = broadcast_shapes(av.shape(), bv.shape());
  Tensor<T> out(bc.out);
  for_each_broadcast(bc, [&](int64_t o, int64_t ia, int64_t ib) {
    out[o] = op == BinOp::add ? av[ia] + bv[ib] : op == BinOp::sub ? av[ia] - bv[ib] : av[ia] * bv[ib];
  });
  return make_result<T>(std::move(out), {a, b}, [op, bc](Node<T>& self) {
    const auto& g = self.grad;
    Node<T>* pa = grad_target(self, 0);
    Node<T>* pb = grad_target(self, 1);
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    Tensor<T>* ga = pa ? &pa->grad_buffer() : nullptr;
    Tensor<T>* gb = pb ? &pb->grad_buffer() : nullptr;
    for_each_broadcast(bc, [&](int64_t o, int64_t ia, int64_t ib) {
      if (ga) (*ga)[ia] += op == BinOp::mul ? g[o] * bv[ib] : g[o];
      if (gb) (*gb)[ib] += op == BinOp::mul ? g[o] * av[ia] : op == BinOp::sub ? -g[o] : g[o];
    });
  });
}

// ---- convolution helpers ------------------------------------------------

struct ConvGeom {
  int64_t cin, h, w, kh, kw, oh, ow;
  int stride, pad;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const int64_t ohw = g.oh * g.ow;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ky = 0; ky < g.kh; ++ky) {
      for (int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * ohw;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
  const int64_t ohw = g.oh * g.ow;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ky = 0; ky < g.kh; ++ky) {
      for (int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * ohw;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = dx + (c * g.h + iy) * g.w;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

int reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return static_cast<int>(i);
}

struct Lerp {
  int64_t i0, i1;
  double w;
};

std::vector<Lerp> lerp_table(int64_t in, int64_t out) {
  std::vector<Lerp> t(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int64_t i0 = static_cast<int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = std::min(i0 + 1, in - 1);
    t[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

void require_rank(const Shape& s, int rank, const char* op) {
  if (static_cast<int>(s.size()) != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::add);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::sub);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::mul);
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* p = grad_target(self, 0)) {
      auto& g = p->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
    }
  });
}

// ---- matmul ---------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  require_rank(a.shape(), 3, "matmul");
  require_rank(b.shape(), 3, "matmul");
  const int64_t ba = a.dim(0), bb = b.dim(0);
  if (ba != bb && ba != 1 && bb != 1) throw ShapeError("matmul batch mismatch");
  const int64_t ra = a.dim(1), ca = a.dim(2), rb = b.dim(1), cb = b.dim(2);
  const int64_t m = trans_a ? ca : ra, k = trans_a ? ra : ca;
  const int64_t kb = trans_b ? cb : rb, n = trans_b ? rb : cb;
  if (k != kb) {
    throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int64_t batch = std::max(ba, bb);
  Tensor<T> out({batch, m, n});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int64_t i = 0; i < batch; ++i) {
    const T* pa = av.data() + (ba == 1 ? 0 : i) * ra * ca;
    const T* pb = bv.data() + (bb == 1 ? 0 : i) * rb * cb;
    gemm(pa, ra, ca, trans_a, pb, rb, cb, trans_b, out.data() + i * m * n, false);
  }
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    Node<T>* na = grad_target(self, 0);
    Node<T>* nb = grad_target(self, 1);
    for (int64_t i = 0; i < batch; ++i) {
      const T* pg = g.data() + i * m * n;
      const T* pa = av.data() + (ba == 1 ? 0 : i) * ra * ca;
      const T* pb = bv.data() + (bb == 1 ? 0 : i) * rb * cb;
      if (na) {
        T* ga = na->grad_buffer().data() + (ba == 1 ? 0 : i) * ra * ca;
        // dA = dC * op(B)^T, stored transposed when trans_a.
        if (!trans_a) {
          gemm(pg, m, n, false, pb, rb, cb, !trans_b, ga, true);
        } else {
          gemm(pb, rb, cb, trans_b, pg, m, n, true, ga, true);
        }
      }
      if (nb) {
        T* gb = nb->grad_buffer().data() + (bb == 1 ? 0 : i) * rb * cb;
        // dB = op(A)^T * dC, stored transposed when trans_b.
        if (!trans_b) {
          gemm(pa, ra, ca, !trans_a, pg, m, n, false, gb, true);
        } else {
          gemm(pg, m, n, true, pa, ra, ca, trans_a, gb, true);
        }
      }
    }
  });
}

// ---- convolution ----------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Conv2dOptions opts) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t cout = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int groups = opts.groups;
  if (opts.stride < 1 || opts.pad < 0 || groups < 1) throw ConfigError("conv2d: invalid stride/pad/groups");
  if (cin % groups != 0 || cout % groups != 0 || cg != cin / groups) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()) +
                     " at groups " + std::to_string(groups));
  }
  if (bias.defined() && (bias.value().numel() != cout)) throw ShapeError("conv2d: bias size mismatch");
  const int64_t oh = (h + 2 * opts.pad - kh) / opts.stride + 1;
  const int64_t ow = (wd + 2 * opts.pad - kw) / opts.stride + 1;
  if (h + 2 * opts.pad < kh || wd + 2 * opts.pad < kw) throw ShapeError("conv2d: kernel larger than padded input");

  const int64_t coutg = cout / groups;
  const ConvGeom geom{cg, h, wd, kh, kw, oh, ow, opts.stride, opts.pad};
  const bool depthwise = groups == cin && cg == 1 && coutg == 1;
  const bool pointwise = kh == 1 && kw == 1 && opts.stride == 1 && opts.pad == 0;
  const int64_t ohw = oh * ow;
  const int64_t kdim = cg * kh * kw;

  Tensor<T> out({n, cout, oh, ow});
  const auto& xv = x.value();
  const auto& wv = w.value();

  if (depthwise) {
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t c = 0; c < cin; ++c) {
        const T* src = xv.data() + (b * cin + c) * h * wd;
        const T* ker = wv.data() + c * kh * kw;
        T* dst = out.data() + (b * cout + c) * ohw;
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox) {
            T acc = 0;
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = oy * opts.stride - opts.pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ox * opts.stride - opts.pad + kx;
                if (ix >= 0 && ix < wd) acc += ker[ky * kw + kx] * src[iy * wd + ix];
              }
            }
            dst[oy * ow + ox] = acc;
          }
        }
      }
    }
  } else {
    std::vector<T> col(pointwise ? 0 : static_cast<size_t>(kdim * ohw));
    for (int64_t b = 0; b < n; ++b) {
      for (int g = 0; g < groups; ++g) {
        const T* src = xv.data() + (b * cin + g * cg) * h * wd;
        const T* colp = src;
        if (!pointwise) {
          im2col(src, geom, col.data());
          colp = col.data();
        }
        gemm(wv.data() + g * coutg * kdim, coutg, kdim, false, colp, kdim, ohw, false,
             out.data() + (b * cout + g * coutg) * ohw, false);
      }
    }
  }
  if (bias.defined()) {
    const auto& bv = bias.value();
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t c = 0; c < cout; ++c) {
        T* dst = out.data() + (b * cout + c) * ohw;
        for (int64_t i = 0; i < ohw; ++i) dst[i] += bv[c];
      }
    }
  }

  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    Node<T>* nx = grad_target(self, 0);
    Node<T>* nw = grad_target(self, 1);
    Node<T>* nbias = self.parents.size() > 2 ? grad_target(self, 2) : nullptr;
    if (nbias) {
      auto& gb = nbias->grad_buffer();
      for (int64_t b = 0; b < n; ++b) {
        for (int64_t c = 0; c < cout; ++c) {
          const T* src = g.data() + (b * cout + c) * ohw;
          T acc = 0;
          for (int64_t i = 0; i < ohw; ++i) acc += src[i];
          gb[c] += acc;
        }
      }
    }
    if (depthwise) {
      T* gx = nx ? nx->grad_buffer().data() : nullptr;
      T* gw = nw ? nw->grad_buffer().data() : nullptr;
      for (int64_t b = 0; b < n; ++b) {
        for (int64_t c = 0; c < cin; ++c) {
          const T* src = xv.data() + (b * cin + c) * h * wd;
          const T* ker = wv.data() + c * kh * kw;
          const T* go = g.data() + (b * cout + c) * ohw;
          for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const T gv = go[oy * ow + ox];
              for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t iy = oy * opts.stride - opts.pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const int64_t ix = ox * opts.stride - opts.pad + kx;
                  if (ix < 0 || ix >= wd) continue;
                  if (gw) gw[c * kh * kw + ky * kw + kx] += gv * src[iy * wd + ix];
                  if (gx) gx[(b * cin + c) * h * wd + iy * wd + ix] += gv * ker[ky * kw + kx];
                }
              }
            }
          }
        }
      }
      return;
    }
    std::vector<T> col(pointwise ? 0 : static_cast<size_t>(kdim * ohw));
    std::vector<T> dcol(pointwise ? 0 : static_cast<size_t>(kdim * ohw));
    for (int64_t b = 0; b < n; ++b) {
      for (int gi = 0; gi < groups; ++gi) {
        const T* src = xv.data() + (b * cin + gi * cg) * h * wd;
        const T* go = g.data() + (b * cout + gi * coutg) * ohw;
        const T* wg = wv.data() + gi * coutg * kdim;
        if (nw) {
          const T* colp = src;
          if (!pointwise) {
            im2col(src, geom, col.data());
            colp = col.data();
          }
          gemm(go, coutg, ohw, false, colp, kdim, ohw, true, nw->grad_buffer().data() + gi * coutg * kdim, true);
        }
        if (nx) {
          T* gx = nx->grad_buffer().data() + (b * cin + gi * cg) * h * wd;
          if (pointwise) {
            gemm(wg, coutg, kdim, true, go, coutg, ohw, false, gx, true);
          } else {
            gemm(wg, coutg, kdim, true, go, coutg, ohw, false, dcol.data(), false);
            col2im(dcol.data(), geom, gx);
          }
        }
      }
    }
  });
}

// ---- spatial --------------------------------------------------------------

template <typename T>
Var<T> pad2d(const Var<T>& x, int top, int bottom, int left, int right, PadMode mode) {
  require_rank(x.shape(), 4, "pad2d");
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ConfigError("pad2d: negative padding");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (mode == PadMode::reflect && (top >= h || bottom >= h || left >= w || right >= w)) {
    throw ShapeError("pad2d: reflect padding must be smaller than the input extent " + shape_str(x.shape()));
  }
  const int64_t oh = h + top + bottom, ow = w + left + right;
  // Source offset per output pixel within one plane; -1 marks zero padding.
  std::vector<int64_t> src(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y) {
    for (int64_t xx = 0; xx < ow; ++xx) {
      int64_t iy = y - top, ix = xx - left;
      int64_t s = -1;
      if (mode == PadMode::reflect) {
        s = reflect_index(iy, h) * w + reflect_index(ix, w);
      } else if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
        s = iy * w + ix;
      }
      src[static_cast<size_t>(y * ow + xx)] = s;
    }
  }
  Tensor<T> out({n, c, oh, ow});
  const auto& xv = x.value();
  for (int64_t p = 0; p < n * c; ++p) {
    for (int64_t i = 0; i < oh * ow; ++i) {
      const int64_t s = src[static_cast<size_t>(i)];
      out[p * oh * ow + i] = s < 0 ? T(0) : xv[p * h * w + s];
    }
  }
  return make_result<T>(std::move(out), {x}, [src = std::move(src), n, c, h, w, oh, ow](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    auto& gx = nx->grad_buffer();
    for (int64_t p = 0; p < n * c; ++p) {
      for (int64_t i = 0; i < oh * ow; ++i) {
        const int64_t s = src[static_cast<size_t>(i)];
        if (s >= 0) gx[p * h * w + s] += self.grad[p * oh * ow + i];
      }
    }
  });
}

template <typename T>
Var<T> crop2d(const Var<T>& x, int64_t top, int64_t left, int64_t height, int64_t width) {
  require_rank(x.shape(), 4, "crop2d");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > h || left + width > w) {
    throw ShapeError("crop2d: window out of bounds for " + shape_str(x.shape()));
  }
  Tensor<T> out({n, c, height, width});
  const auto& xv = x.value();
  for (int64_t p = 0; p < n * c; ++p) {
    for (int64_t y = 0; y < height; ++y) {
      const T* s = xv.data() + p * h * w + (top + y) * w + left;
      std::copy(s, s + width, out.data() + (p * height + y) * width);
    }
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    auto& gx = nx->grad_buffer();
    for (int64_t p = 0; p < n * c; ++p) {
      for (int64_t y = 0; y < height; ++y) {
        T* d = gx.data() + p * h * w + (top + y) * w + left;
        const T* s = self.grad.data() + (p * height + y) * width;
        for (int64_t i = 0; i < width; ++i) d[i] += s[i];
      }
    }
  });
}

template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int64_t out_h, int64_t out_w) {
  require_rank(x.shape(), 4, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw ConfigError("resize_bilinear: output size must be positive");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return reshape(x, x.shape());
  auto ty = lerp_table(h, out_h);
  auto tx = lerp_table(w, out_w);
  Tensor<T> out({n, c, out_h, out_w});
  const auto& xv = x.value();
  for (int64_t p = 0; p < n * c; ++p) {
    const T* s = xv.data() + p * h * w;
    T* d = out.data() + p * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const auto& ly = ty[static_cast<size_t>(oy)];
      const T wy = static_cast<T>(ly.w);
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const auto& lx = tx[static_cast<size_t>(ox)];
        const T wx = static_cast<T>(lx.w);
        const T a = s[ly.i0 * w + lx.i0], b = s[ly.i0 * w + lx.i1];
        const T cc = s[ly.i1 * w + lx.i0], dd = s[ly.i1 * w + lx.i1];
        const T top = a + wx * (b - a);
        const T bot = cc + wx * (dd - cc);
        d[oy * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [=, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    auto& gx = nx->grad_buffer();
    for (int64_t p = 0; p < n * c; ++p) {
      T* d = gx.data() + p * h * w;
      const T* g = self.grad.data() + p * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const auto& ly = ty[static_cast<size_t>(oy)];
        const T wy = static_cast<T>(ly.w);
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const auto& lx = tx[static_cast<size_t>(ox)];
          const T wx = static_cast<T>(lx.w);
          const T gv = g[oy * out_w + ox];
          d[ly.i0 * w + lx.i0] += gv * (1 - wx) * (1 - wy);
          d[ly.i0 * w + lx.i1] += gv * wx * (1 - wy);
          d[ly.i1 * w + lx.i0] += gv * (1 - wx) * wy;
          d[ly.i1 * w + lx.i1] += gv * wx * wy;
        }
      }
    }
  });
}

// ---- normalization --------------------------------------------------------

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  if (x.value().rank() < 2) throw ShapeError("layer_norm: rank must be >= 2");
  const int64_t outer = x.dim(0), ch = x.dim(1);
  const int64_t inner = x.value().numel() / (outer * ch);
  if (gamma.value().numel() != ch || beta.value().numel() != ch) {
    throw ShapeError("layer_norm: affine size mismatch for " + shape_str(x.shape()));
  }
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(static_cast<size_t>(xv.numel()));
  std::vector<T> inv_std(static_cast<size_t>(outer * inner));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * ch * inner + i;
      T mean = 0;
      for (int64_t c = 0; c < ch; ++c) mean += xv[base + c * inner];
      mean /= static_cast<T>(ch);
      T var = 0;
      for (int64_t c = 0; c < ch; ++c) {
        const T d = xv[base + c * inner] - mean;
        var += d * d;
      }
      var /= static_cast<T>(ch);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(o * inner + i)] = is;
      for (int64_t c = 0; c < ch; ++c) {
        const int64_t k = base + c * inner;
        const T xh = (xv[k] - mean) * is;
        xhat[static_cast<size_t>(k)] = xh;
        out[k] = xh * gv[c] + bv[c];
      }
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    const auto& g = self.grad;
    const auto& gv = self.parents[1]->value;
    Node<T>* nx = grad_target(self, 0);
    Node<T>* ng = grad_target(self, 1);
    Node<T>* nb = grad_target(self, 2);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * ch * inner + i;
        T mean_d = 0, mean_dx = 0;
        for (int64_t c = 0; c < ch; ++c) {
          const int64_t k = base + c * inner;
          const T d = g[k] * gv[c];
          mean_d += d;
          mean_dx += d * xhat[static_cast<size_t>(k)];
          if (ng) ng->grad_buffer()[c] += g[k] * xhat[static_cast<size_t>(k)];
          if (nb) nb->grad_buffer()[c] += g[k];
        }
        if (!nx) continue;
        mean_d /= static_cast<T>(ch);
        mean_dx /= static_cast<T>(ch);
        const T is = inv_std[static_cast<size_t>(o * inner + i)];
        auto& gx = nx->grad_buffer();
        for (int64_t c = 0; c < ch; ++c) {
          const int64_t k = base + c * inner;
          gx[k] += is * (g[k] * gv[c] - mean_d - xhat[static_cast<size_t>(k)] * mean_dx);
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Var<T>& running_mean,
                  Var<T>& running_var, bool training, T momentum, T eps) {
  require_rank(x.shape(), 4, "batch_norm");
  const int64_t n = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.value().numel() != ch || running_mean.value().numel() != ch) {
    throw ShapeError("batch_norm: channel mismatch for " + shape_str(x.shape()));
  }
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  const int64_t count = n * hw;
  std::vector<T> mean(static_cast<size_t>(ch)), inv_std(static_cast<size_t>(ch));
  auto& rm = running_mean.mutable_value();
  auto& rv = running_var.mutable_value();
  for (int64_t c = 0; c < ch; ++c) {
    T m, v;
    if (training) {
      m = 0;
      for (int64_t b = 0; b < n; ++b) {
        const T* s = xv.data() + (b * ch + c) * hw;
        for (int64_t i = 0; i < hw; ++i) m += s[i];
      }
      m /= static_cast<T>(count);
      v = 0;
      for (int64_t b = 0; b < n; ++b) {
        const T* s = xv.data() + (b * ch + c) * hw;
        for (int64_t i = 0; i < hw; ++i) v += (s[i] - m) * (s[i] - m);
      }
      v /= static_cast<T>(count);
      const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
      rm[c] = (1 - momentum) * rm[c] + momentum * m;
      rv[c] = (1 - momentum) * rv[c] + momentum * unbiased;
    } else {
      m = rm[c];
      v = rv[c];
    }
    mean[static_cast<size_t>(c)] = m;
    inv_std[static_cast<size_t>(c)] = T(1) / std::sqrt(v + eps);
  }
  Tensor<T> out(xv.shape());
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t c = 0; c < ch; ++c) {
      const T* s = xv.data() + (b * ch + c) * hw;
      T* d = out.data() + (b * ch + c) * hw;
      const T m = mean[static_cast<size_t>(c)], is = inv_std[static_cast<size_t>(c)];
      for (int64_t i = 0; i < hw; ++i) d[i] = (s[i] - m) * is * gv[c] + bv[c];
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [=, mean = std::move(mean), inv_std = std::move(inv_std)](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    Node<T>* nx = grad_target(self, 0);
    Node<T>* ng = grad_target(self, 1);
    Node<T>* nb = grad_target(self, 2);
    for (int64_t c = 0; c < ch; ++c) {
      const T m = mean[static_cast<size_t>(c)], is = inv_std[static_cast<size_t>(c)];
      T sum_g = 0, sum_gx = 0;
      for (int64_t b = 0; b < n; ++b) {
        const T* s = xv.data() + (b * ch + c) * hw;
        const T* gg = g.data() + (b * ch + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          sum_g += gg[i];
          sum_gx += gg[i] * (s[i] - m) * is;
        }
      }
      if (ng) ng->grad_buffer()[c] += sum_gx;
      if (nb) nb->grad_buffer()[c] += sum_g;
      if (!nx) continue;
      auto& gx = nx->grad_buffer();
      const T k = gv[c] * is;
      for (int64_t b = 0; b < n; ++b) {
        const T* s = xv.data() + (b * ch + c) * hw;
        const T* gg = g.data() + (b * ch + c) * hw;
        T* d = gx.data() + (b * ch + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          if (training) {
            const T xh = (s[i] - m) * is;
            d[i] += k * (gg[i] - sum_g / static_cast<T>(count) - xh * sum_gx / static_cast<T>(count));
          } else {
            d[i] += k * gg[i];
          }
        }
      }
    }
  });
}

// ---- activations ----------------------------------------------------------

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return make_result<T>(std::move(out), {x}, [inv_sqrt2](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    const auto& xv = self.parents[0]->value;
    auto& gx = nx->grad_buffer();
    const T inv_sqrt_2pi = static_cast<T>(0.39894228040143267794);
    for (int64_t i = 0; i < xv.numel(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      gx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = T(1) / (T(1) + std::exp(-v));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    auto& gx = nx->grad_buffer();
    const auto& y = self.value;
    for (int64_t i = 0; i < y.numel(); ++i) gx[i] += self.grad[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const auto& xv = x.value();
  const int64_t cols = xv.dim(-1);
  const int64_t rows = xv.numel() / cols;
  Tensor<T> out(xv.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* s = xv.data() + r * cols;
    T* d = out.data() + r * cols;
    const T mx = *std::max_element(s, s + cols);
    T sum = 0;
    for (int64_t j = 0; j < cols; ++j) {
      d[j] = std::exp(s[j] - mx);
      sum += d[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; ++j) d[j] *= inv;
  }
  return make_result<T>(std::move(out), {x}, [rows, cols](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    const bool corrupt = faults::active() == faults::Fault::softmax_backward;
    auto& gx = nx->grad_buffer();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t off = r * cols;
      T dot = 0;
      for (int64_t j = 0; j < cols; ++j) dot += g[off + j] * y[off + j];
      if (corrupt) dot = 0;
      for (int64_t j = 0; j < cols; ++j) gx[off + j] += y[off + j] * (g[off + j] - dot);
    }
  });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Var<T> mean_hw(const Var<T>& x) {
  require_rank(x.shape(), 4, "mean_hw");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c, 1, 1});
  const auto& xv = x.value();
  for (int64_t p = 0; p < n * c; ++p) {
    T acc = 0;
    for (int64_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
    out[p] = acc / static_cast<T>(hw);
  }
  return make_result<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    auto& gx = nx->grad_buffer();
    for (int64_t p = 0; p < n * c; ++p) {
      const T g = self.grad[p] / static_cast<T>(hw);
      for (int64_t i = 0; i < hw; ++i) gx[p * hw + i] += g;
    }
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {x}, [](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    for (auto& v : nx->grad_buffer().values()) v += self.grad[0];
  });
}

// ---- layout ---------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    auto& gx = nx->grad_buffer();
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
  const auto& in_shape = x.shape();
  const size_t r = in_shape.size();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch");
  std::vector<int64_t> in_strides(r, 1);
  for (size_t k = r - 1; k-- > 0;) in_strides[k] = in_strides[k + 1] * in_shape[k + 1];
  Shape out_shape(r);
  std::vector<int64_t> strides(r);
  std::vector<bool> used(r, false);
  for (size_t k = 0; k < r; ++k) {
    const int p = perm[k];
    if (p < 0 || static_cast<size_t>(p) >= r || used[static_cast<size_t>(p)]) throw ShapeError("permute: bad perm");
    used[static_cast<size_t>(p)] = true;
    out_shape[k] = in_shape[static_cast<size_t>(p)];
    strides[k] = in_strides[static_cast<size_t>(p)];
  }
  // Source offset of each output element.
  const int64_t total = shape_numel(out_shape);
  std::vector<int64_t> src(static_cast<size_t>(total));
  std::vector<int64_t> idx(r, 0);
  int64_t off = 0;
  for (int64_t o = 0; o < total; ++o) {
    src[static_cast<size_t>(o)] = off;
    for (size_t k = r; k-- > 0;) {
      ++idx[k];
      off += strides[k];
      if (idx[k] < out_shape[k]) break;
      off -= strides[k] * idx[k];
      idx[k] = 0;
    }
  }
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (int64_t o = 0; o < total; ++o) out[o] = xv[src[static_cast<size_t>(o)]];
  return make_result<T>(std::move(out), {x}, [src = std::move(src)](Node<T>& self) {
    auto* nx = grad_target(self, 0);
    if (!nx) return;
    auto& gx = nx->grad_buffer();
    for (size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[static_cast<int64_t>(o)];
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = parts[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  const int64_t outer = s0[0];
  const int64_t inner = parts[0].value().numel() / (s0[0] * s0[1]);
  int64_t total_c = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size() || s[0] != outer || p.value().numel() / (s[0] * s[1]) != inner) {
      throw ShapeError("concat_channels: incompatible " + shape_str(s) + " with " + shape_str(s0));
    }
    total_c += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = total_c;
  Tensor<T> out(out_shape);
  std::vector<int64_t> chans;
  int64_t c0 = 0;
  for (const auto& p : parts) {
    const int64_t c = p.dim(1);
    chans.push_back(c);
    for (int64_t o = 0; o < outer; ++o) {
      const T* s = p.value().data() + o * c * inner;
      std::copy(s, s + c * inner, out.data() + (o * total_c + c0) * inner);
    }
    c0 += c;
  }
  return make_result<T>(std::move(out), parts, [=](Node<T>& self) {
    int64_t c0 = 0;
    for (size_t k = 0; k < chans.size(); ++k) {
      const int64_t c = chans[k];
      if (auto* np = grad_target(self, k)) {
        auto& gp = np->grad_buffer();
        for (int64_t o = 0; o < outer; ++o) {
          const T* s = self.grad.data() + (o * total_c + c0) * inner;
          T* d = gp.data() + o * c * inner;
          for (int64_t i = 0; i < c * inner; ++i) d[i] += s[i];
        }
      }
      c0 += c;
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int64_t>& index) {
  require_rank(table.shape(), 2, "gather_rows");
  const int64_t rows = table.dim(0), cols = table.dim(1);
  const int64_t len = static_cast<int64_t>(index.size());
  if (len == 0) throw ShapeError("gather_rows: empty index");
  Tensor<T> out({len, cols});
  const auto& tv = table.value();
  for (int64_t i = 0; i < len; ++i) {
    const int64_t r = index[static_cast<size_t>(i)];
    if (r < 0 || r >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy(tv.data() + r * cols, tv.data() + (r + 1) * cols, out.data() + i * cols);
  }
  return make_result<T>(std::move(out), {table}, [index, cols](Node<T>& self) {
    auto* nt = grad_target(self, 0);
    if (!nt) return;
    auto& gt = nt->grad_buffer();
    for (size_t i = 0; i < index.size(); ++i) {
      for (int64_t j = 0; j < cols; ++j) gt[index[i] * cols + j] += self.grad[static_cast<int64_t>(i) * cols + j];
    }
  });
}

// ---- loss -----------------------------------------------------------------

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const LabelMap& labels) {
  require_rank(logits.shape(), 4, "cross_entropy");
  const int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const bool batched = labels.rank() == 3;
  if (!(batched ? labels.shape() == Shape{n, logits.dim(2), logits.dim(3)}
                : (n == 1 && labels.shape() == Shape{logits.dim(2), logits.dim(3)}))) {
    throw ShapeError("cross_entropy: labels " + shape_str(labels.shape()) + " do not match logits " +
                     shape_str(logits.shape()));
  }
  const auto& lv = logits.value();
  int64_t valid = 0;
  for (int32_t y : labels.values()) {
    if (y == kIgnoreIndex) continue;
    if (y < 0 || y >= k) throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                         std::to_string(k) + ") and not the ignore index");
    ++valid;
  }
  // Per-pixel softmax retained for the backward pass.
  std::vector<T> prob(static_cast<size_t>(lv.numel()), T(0));
  // Compensated sum: a plain running total over many pixels jitters by far
  // more than one rounding step when the inputs move slightly.
  T total = 0, carry = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t i = 0; i < hw; ++i) {
      const int32_t y = labels[b * hw + i];
      if (y == kIgnoreIndex) continue;
      const T* base = lv.data() + b * k * hw + i;
      T mx = base[0];
      for (int64_t c = 1; c < k; ++c) mx = std::max(mx, base[c * hw]);
      T sum = 0;
      for (int64_t c = 0; c < k; ++c) sum += std::exp(base[c * hw] - mx);
      const T lse = mx + std::log(sum);
      const T term = (lse - base[y * hw]) - carry;
      const T next = total + term;
      carry = (next - total) - term;
      total = next;
      for (int64_t c = 0; c < k; ++c) prob[static_cast<size_t>(b * k * hw + c * hw + i)] = std::exp(base[c * hw] - lse);
    }
  }
  const T loss = valid > 0 ? total / static_cast<T>(valid) : T(0);
  return make_result<T>(Tensor<T>({1}, loss), {logits},
                        [=, prob = std::move(prob), labels = labels](Node<T>& self) {
    auto* nl = grad_target(self, 0);
    if (!nl || valid == 0) return;
    auto& gl = nl->grad_buffer();
    const T s = self.grad[0] / static_cast<T>(valid);
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t i = 0; i < hw; ++i) {
        const int32_t y = labels[b * hw + i];
        if (y == kIgnoreIndex) continue;
        for (int64_t c = 0; c < k; ++c) {
          const int64_t off = b * k * hw + c * hw + i;
          gl[off] += s * (prob[static_cast<size_t>(off)] - (c == y ? T(1) : T(0)));
        }
      }
    }
  });
}

#define REMOTENET_INSTANTIATE_OPS(T)                                                                      \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> scale<T>(const Var<T>&, T);                                                             \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&, bool, bool);                                    \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, Conv2dOptions);                  \
  template Var<T> pad2d<T>(const Var<T>&, int, int, int, int, PadMode);                                   \
  template Var<T> crop2d<T>(const Var<T>&, int64_t, int64_t, int64_t, int64_t);                           \
  template Var<T> resize_bilinear<T>(const Var<T>&, int64_t, int64_t);                                    \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                          \
  template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, Var<T>&, Var<T>&, bool, T, T); \
  template Var<T> gelu<T>(const Var<T>&);                                                                 \
  template Var<T> sigmoid<T>(const Var<T>&);                                                              \
  template Var<T> softmax_lastdim<T>(const Var<T>&);                                                      \
  template Var<T> mean_hw<T>(const Var<T>&);                                                              \
  template Var<T> sum_all<T>(const Var<T>&);                                                              \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                       \
  template Var<T> permute<T>(const Var<T>&, const std::vector<int>&);                                     \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                                         \
  template Var<T> gather_rows<T>(const Var<T>&, const std::vector<int64_t>&);                             \
  template Var<T> cross_entropy<T>(const Var<T>&, const LabelMap&);

REMOTENET_INSTANTIATE_OPS(float)
REMOTENET_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace remotenet
