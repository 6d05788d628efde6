#include "semiuf/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>

namespace semiuf {

namespace {
thread_local bool g_no_grad = false;
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

namespace ops {

namespace {

template <class T>
using MatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                          Eigen::OuterStride<>>;
template <class T>
using MutMatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                             Eigen::OuterStride<>>;

template <class T, class P>
void accumulate(MutMatMap<T>& c, const P& product, T alpha, T beta) {
  if (beta == T(0)) {
    c.noalias() = alpha * product;
  } else {
    if (beta != T(1)) c *= beta;
    c.noalias() += alpha * product;
  }
}

}  // namespace

// Row-major C = alpha * op(A) op(B) + beta * C.
template <class T>
void gemm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc) {
  MatMap<T> am(a, ta ? k : m, ta ? m : k, Eigen::OuterStride<>(lda));
  MatMap<T> bm(b, tb ? n : k, tb ? k : n, Eigen::OuterStride<>(ldb));
  MutMatMap<T> cm(c, m, n, Eigen::OuterStride<>(ldc));
  if (!ta && !tb) accumulate(cm, am * bm, alpha, beta);
  else if (ta && !tb) accumulate(cm, am.transpose() * bm, alpha, beta);
  else if (!ta && tb) accumulate(cm, am * bm.transpose(), alpha, beta);
  else accumulate(cm, am.transpose() * bm.transpose(), alpha, beta);
}

template void gemm<float>(bool, bool, int, int, int, float, const float*, int, const float*, int,
                          float, float*, int);
template void gemm<double>(bool, bool, int, int, int, double, const double*, int, const double*,
                           int, double, double*, int);

namespace {

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
}

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected rank-4 input, got " + shape_str(s));
}

template <class T, class F>
Var<T> unary(const Var<T>& a, F fwd_and_deriv) {
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  Tensor<T> d(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [v, dv] = fwd_and_deriv(x[i]);
    y[i] = v;
    d[i] = dv;
  }
  return make_result<T>(std::move(y), {a}, [d = std::move(d)](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < d.size(); ++i) (*g)[i] += n.grad[i] * d[i];
  });
}

// Reusable per-thread buffers; contents are unspecified on return.
template <class T>
T* scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Output columns [lo, hi) read inside the input row for kernel offset kx.
inline void valid_columns(int w, int wo, int stride, int pad, int kx, int& lo, int& hi) {
  lo = 0;
  while (lo < wo && lo * stride - pad + kx < 0) ++lo;
  hi = wo;
  while (hi > lo && (hi - 1) * stride - pad + kx >= w) --hi;
}

template <class T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* cols) {
  const int p = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + static_cast<std::size_t>((ci * k + ky) * k + kx) * p;
        const T* plane = x + static_cast<std::size_t>(ci) * h * w;
        int lo, hi;
        valid_columns(w, wo, stride, pad, kx, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = plane + iy * w - pad + kx;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride];
          }
          std::fill(dst + hi, dst + wo, T(0));
        }
      }
}

template <class T>
void col2im_add(const T* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
                T* dx) {
  const int p = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((ci * k + ky) * k + kx) * p;
        T* plane = dx + static_cast<std::size_t>(ci) * h * w;
        int lo, hi;
        valid_columns(w, wo, stride, pad, kx, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * wo;
          T* dst = plane + iy * w - pad + kx;
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride] += src[ox];
          }
        }
      }
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = parent_grad(n, p))
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] -= n.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y = a.value();
  for (auto& v : y.vec()) v *= s;
  return make_result<T>(std::move(y), {a}, [s](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * s;
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().vec()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {a}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (auto& v : g->vec()) v += n.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary(a, [](T x) { return std::pair<T, T>{x > 0 ? x : T(0), x > 0 ? T(1) : T(0)}; });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary(a, [slope](T x) {
    return std::pair<T, T>{x > 0 ? x : slope * x, x > 0 ? T(1) : slope};
  });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  return unary(a, [](T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
    return std::pair<T, T>{x * cdf, cdf + x * pdf};
  });
}

template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi, bool straight_through) {
  return unary(a, [lo, hi, straight_through](T x) {
    const T y = x < lo ? lo : (x > hi ? hi : x);
    const T d = (straight_through || (x >= lo && x <= hi)) ? T(1) : T(0);
    return std::pair<T, T>{y, d};
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  require_rank4(x.shape(), "conv2d");
  require_rank4(weight.shape(), "conv2d weight");
  const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci || weight.dim(3) != k)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (bias.defined() && (bias.value().size() != static_cast<std::size_t>(co)))
    throw ShapeError("conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty");
  const int kk = ci * k * k, p = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> y({b, co, ho, wo});
  T* cols = pointwise ? nullptr : scratch<T>(0, static_cast<std::size_t>(kk) * p);
  const T* wv = weight.value().data();
  for (int n = 0; n < b; ++n) {
    const T* xn = x.value().data() + static_cast<std::size_t>(n) * ci * h * w;
    const T* src = xn;
    if (!pointwise) {
      im2col(xn, ci, h, w, k, stride, pad, ho, wo, cols);
      src = cols;
    }
    T* yn = y.data() + static_cast<std::size_t>(n) * co * p;
    gemm<T>(false, false, co, p, kk, T(1), wv, kk, src, p, T(0), yn, p);
    if (bias.defined()) {
      const T* bv = bias.value().data();
      for (int c = 0; c < co; ++c)
        for (int i = 0; i < p; ++i) yn[c * p + i] += bv[c];
    }
  }

  return make_result<T>(
      std::move(y), {x, weight, bias},
      [=](Node<T>& node) {
        const auto& xv = node.parents[0]->value;
        const auto& wt = node.parents[1]->value;
        Tensor<T>* gx = parent_grad(node, 0);
        Tensor<T>* gw = parent_grad(node, 1);
        Tensor<T>* gb = node.parents[2] ? parent_grad(node, 2) : nullptr;
        T* cols_b = pointwise ? nullptr : scratch<T>(0, static_cast<std::size_t>(kk) * p);
        T* dcols = gx && !pointwise ? scratch<T>(1, static_cast<std::size_t>(kk) * p) : nullptr;
        for (int n = 0; n < b; ++n) {
          const T* dy = node.grad.data() + static_cast<std::size_t>(n) * co * p;
          const T* xn = xv.data() + static_cast<std::size_t>(n) * ci * h * w;
          if (gw) {
            const T* src = xn;
            if (!pointwise) {
              im2col(xn, ci, h, w, k, stride, pad, ho, wo, cols_b);
              src = cols_b;
            }
            gemm<T>(false, true, co, kk, p, T(1), dy, p, src, p, T(1), gw->data(), kk);
          }
          if (gb)
            for (int c = 0; c < co; ++c) {
              T acc = 0;
              for (int i = 0; i < p; ++i) acc += dy[c * p + i];
              (*gb)[c] += acc;
            }
          if (gx) {
            T* dxn = gx->data() + static_cast<std::size_t>(n) * ci * h * w;
            if (pointwise) {
              gemm<T>(true, false, kk, p, co, T(1), wt.data(), kk, dy, p, T(1), dxn, p);
            } else {
              gemm<T>(true, false, kk, p, co, T(1), wt.data(), kk, dy, p, T(0), dcols, p);
              col2im_add(dcols, ci, h, w, k, stride, pad, ho, wo, dxn);
            }
          }
        }
      });
}

template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_rank4(x.shape(), "layer_norm");
  const int b = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  if (gamma.value().size() != static_cast<std::size_t>(c) ||
      beta.value().size() != static_cast<std::size_t>(c))
    throw ShapeError("layer_norm: affine parameter size mismatch");
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(static_cast<std::size_t>(b) * p);
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  // Pixel-inner loops keep every access contiguous.
  std::vector<T> mu(p), var(p);
  for (int n = 0; n < b; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * c * p;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (int ch = 0; ch < c; ++ch) {
      const T* xc = xv + base + static_cast<std::size_t>(ch) * p;
      for (int i = 0; i < p; ++i) mu[i] += xc[i];
    }
    for (int i = 0; i < p; ++i) mu[i] /= c;
    for (int ch = 0; ch < c; ++ch) {
      const T* xc = xv + base + static_cast<std::size_t>(ch) * p;
      for (int i = 0; i < p; ++i) {
        const T d = xc[i] - mu[i];
        var[i] += d * d;
      }
    }
    T* r = rstd.data() + static_cast<std::size_t>(n) * p;
    for (int i = 0; i < p; ++i) r[i] = T(1) / std::sqrt(var[i] / c + eps);
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t o = base + static_cast<std::size_t>(ch) * p;
      for (int i = 0; i < p; ++i) {
        xhat[o + i] = (xv[o + i] - mu[i]) * r[i];
        y[o + i] = xhat[o + i] * gv[ch] + bv[ch];
      }
    }
  }
  return make_result<T>(
      std::move(y), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& node) {
        const T* gv = node.parents[1]->value.data();
        Tensor<T>* gx = parent_grad(node, 0);
        Tensor<T>* gg = parent_grad(node, 1);
        Tensor<T>* gb = parent_grad(node, 2);
        const T* dy = node.grad.data();
        std::vector<T> s1(p), s2(p);
        for (int n = 0; n < b; ++n) {
          const std::size_t base = static_cast<std::size_t>(n) * c * p;
          std::fill(s1.begin(), s1.end(), T(0));
          std::fill(s2.begin(), s2.end(), T(0));
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t o = base + static_cast<std::size_t>(ch) * p;
            T accg = 0, accb = 0;
            for (int i = 0; i < p; ++i) {
              const T dxh = dy[o + i] * gv[ch];
              s1[i] += dxh;
              s2[i] += dxh * xhat[o + i];
              accg += dy[o + i] * xhat[o + i];
              accb += dy[o + i];
            }
            if (gg) (*gg)[ch] += accg;
            if (gb) (*gb)[ch] += accb;
          }
          if (!gx) continue;
          const T* r = rstd.data() + static_cast<std::size_t>(n) * p;
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t o = base + static_cast<std::size_t>(ch) * p;
            T* g = gx->data() + o;
            for (int i = 0; i < p; ++i)
              g[i] += r[i] * (dy[o + i] * gv[ch] - s1[i] / c - xhat[o + i] * s2[i] / c);
          }
        }
      });
}

template <class T>
Var<T> channel_slice(const Var<T>& x, int start, int count) {
  require_rank4(x.shape(), "channel_slice");
  const int b = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  if (start < 0 || count <= 0 || start + count > c) throw ShapeError("channel_slice: out of range");
  Tensor<T> y({b, count, x.dim(2), x.dim(3)});
  for (int n = 0; n < b; ++n)
    std::copy_n(x.value().data() + (static_cast<std::size_t>(n) * c + start) * p,
                static_cast<std::size_t>(count) * p,
                y.data() + static_cast<std::size_t>(n) * count * p);
  return make_result<T>(std::move(y), {x}, [=](Node<T>& node) {
    if (auto* g = parent_grad(node, 0))
      for (int n = 0; n < b; ++n) {
        const T* src = node.grad.data() + static_cast<std::size_t>(n) * count * p;
        T* dst = g->data() + (static_cast<std::size_t>(n) * c + start) * p;
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * p; ++i) dst[i] += src[i];
      }
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b_) {
  require_rank4(a.shape(), "concat");
  require_rank4(b_.shape(), "concat");
  if (a.dim(0) != b_.dim(0) || a.dim(2) != b_.dim(2) || a.dim(3) != b_.dim(3))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b_.shape()));
  const int b = a.dim(0), ca = a.dim(1), cb = b_.dim(1), p = a.dim(2) * a.dim(3);
  Tensor<T> y({b, ca + cb, a.dim(2), a.dim(3)});
  for (int n = 0; n < b; ++n) {
    T* dst = y.data() + static_cast<std::size_t>(n) * (ca + cb) * p;
    std::copy_n(a.value().data() + static_cast<std::size_t>(n) * ca * p,
                static_cast<std::size_t>(ca) * p, dst);
    std::copy_n(b_.value().data() + static_cast<std::size_t>(n) * cb * p,
                static_cast<std::size_t>(cb) * p, dst + static_cast<std::size_t>(ca) * p);
  }
  return make_result<T>(std::move(y), {a, b_}, [=](Node<T>& node) {
    Tensor<T>* ga = parent_grad(node, 0);
    Tensor<T>* gb = parent_grad(node, 1);
    for (int n = 0; n < b; ++n) {
      const T* src = node.grad.data() + static_cast<std::size_t>(n) * (ca + cb) * p;
      if (ga) {
        T* d = ga->data() + static_cast<std::size_t>(n) * ca * p;
        for (std::size_t i = 0; i < static_cast<std::size_t>(ca) * p; ++i) d[i] += src[i];
      }
      if (gb) {
        T* d = gb->data() + static_cast<std::size_t>(n) * cb * p;
        const T* s = src + static_cast<std::size_t>(ca) * p;
        for (std::size_t i = 0; i < static_cast<std::size_t>(cb) * p; ++i) d[i] += s[i];
      }
    }
  });
}

template <class T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  require_rank4(x.shape(), "pixel_shuffle");
  const int b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (cin % (r * r) != 0) throw ShapeError("pixel_shuffle: channels not divisible by r^2");
  const int c = cin / (r * r);
  Tensor<T> y({b, c, h * r, w * r});
  // Index map from output position to input position, shared with backward.
  auto src_index = [=](int n, int ch, int oy, int ox) {
    const int i = oy % r, j = ox % r;
    return ((static_cast<std::size_t>(n) * cin + ch * r * r + i * r + j) * h + oy / r) * w + ox / r;
  };
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < h * r; ++oy)
        for (int ox = 0; ox < w * r; ++ox) y.at(n, ch, oy, ox) = x.value()[src_index(n, ch, oy, ox)];
  return make_result<T>(std::move(y), {x}, [=](Node<T>& node) {
    if (auto* g = parent_grad(node, 0))
      for (int n = 0; n < b; ++n)
        for (int ch = 0; ch < c; ++ch)
          for (int oy = 0; oy < h * r; ++oy)
            for (int ox = 0; ox < w * r; ++ox)
              (*g)[src_index(n, ch, oy, ox)] += node.grad.at(n, ch, oy, ox);
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank4(x.shape(), "global_avg_pool");
  const int b = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  Tensor<T> y({b, c});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const T* src = x.value().data() + (static_cast<std::size_t>(n) * c + ch) * p;
      T acc = 0;
      for (int i = 0; i < p; ++i) acc += src[i];
      y[static_cast<std::size_t>(n) * c + ch] = acc / p;
    }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& node) {
    if (auto* g = parent_grad(node, 0))
      for (int n = 0; n < b; ++n)
        for (int ch = 0; ch < c; ++ch) {
          const T d = node.grad[static_cast<std::size_t>(n) * c + ch] / p;
          T* dst = g->data() + (static_cast<std::size_t>(n) * c + ch) * p;
          for (int i = 0; i < p; ++i) dst[i] += d;
        }
  });
}

namespace {

// Copies channel-major values at the window's token offsets into a token-major tile.
template <class T>
void gather_window(const T* src, int plane, const int* offsets, int ntok, int d, T* tile) {
  for (int e = 0; e < d; ++e) {
    const T* ch = src + static_cast<std::size_t>(e) * plane;
    for (int t = 0; t < ntok; ++t) tile[static_cast<std::size_t>(t) * d + e] = ch[offsets[t]];
  }
}

template <class T>
void scatter_window(const T* tile, int ntok, int d, const int* offsets, int plane, T* dst,
                    bool accumulate) {
  for (int e = 0; e < d; ++e) {
    T* ch = dst + static_cast<std::size_t>(e) * plane;
    for (int t = 0; t < ntok; ++t) {
      const T v = tile[static_cast<std::size_t>(t) * d + e];
      if (accumulate) ch[offsets[t]] += v;
      else ch[offsets[t]] = v;
    }
  }
}

}  // namespace

template <class T>
Var<T> window_attention(const Var<T>& qkv, const Var<T>& rel_bias, int heads, int window,
                        bool shift) {
  require_rank4(qkv.shape(), "window_attention");
  const int b = qkv.dim(0), c3 = qkv.dim(1), h = qkv.dim(2), w = qkv.dim(3);
  if (c3 % 3 != 0) throw ShapeError("window_attention: qkv channels must be 3*C");
  const int c = c3 / 3;
  if (heads <= 0 || c % heads != 0) throw ShapeError("window_attention: C not divisible by heads");
  if (window <= 0 || h % window != 0 || w % window != 0)
    throw ShapeError("window_attention: spatial size " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by window " + std::to_string(window));
  const int side = 2 * window - 1;
  if (rel_bias.value().size() != static_cast<std::size_t>(heads) * side * side)
    throw ShapeError("window_attention: relative bias table has wrong size");
  const int d = c / heads;
  const int ntok = window * window;
  const int nwy = h / window, nwx = w / window;
  const int s = shift ? window / 2 : 0;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const int p = h * w;

  // Token t of window (wy, wx) sits at this flat spatial offset.
  std::vector<int> pos(static_cast<std::size_t>(nwy) * nwx * ntok);
  for (int wy = 0; wy < nwy; ++wy)
    for (int wx = 0; wx < nwx; ++wx)
      for (int i = 0; i < window; ++i)
        for (int j = 0; j < window; ++j) {
          const int y = (wy * window + i + s) % h;
          const int x = (wx * window + j + s) % w;
          pos[(static_cast<std::size_t>(wy) * nwx + wx) * ntok + i * window + j] = y * w + x;
        }
  std::vector<int> bias_idx(static_cast<std::size_t>(ntok) * ntok);
  for (int t1 = 0; t1 < ntok; ++t1)
    for (int t2 = 0; t2 < ntok; ++t2) {
      const int dy = t1 / window - t2 / window + window - 1;
      const int dx = t1 % window - t2 % window + window - 1;
      bias_idx[t1 * ntok + t2] = dy * side + dx;
    }

  const std::size_t nwin = static_cast<std::size_t>(nwy) * nwx;
  const std::size_t tile = static_cast<std::size_t>(ntok) * d;
  std::vector<T> probs(static_cast<std::size_t>(b) * nwin * heads * ntok * ntok);
  Tensor<T> y({b, c, h, w});
  const T* xv = qkv.value().data();
  const T* bv = rel_bias.value().data();
  // Token-major copies of one window/head: [ntok, d].
  std::vector<T> qw(tile), kw(tile), vw(tile), ow(tile), row(ntok);
  for (int n = 0; n < b; ++n)
    for (std::size_t win = 0; win < nwin; ++win) {
      const int* wp = pos.data() + win * ntok;
      for (int hd = 0; hd < heads; ++hd) {
        const T* q = xv + (static_cast<std::size_t>(n) * c3 + hd * d) * p;
        const T* k = q + static_cast<std::size_t>(c) * p;
        const T* v = k + static_cast<std::size_t>(c) * p;
        gather_window(q, p, wp, ntok, d, qw.data());
        gather_window(k, p, wp, ntok, d, kw.data());
        gather_window(v, p, wp, ntok, d, vw.data());
        T* P = probs.data() + ((static_cast<std::size_t>(n) * nwin + win) * heads + hd) * ntok * ntok;
        const T* bh = bv + hd * side * side;
        for (int t1 = 0; t1 < ntok; ++t1) {
          const T* qr = qw.data() + static_cast<std::size_t>(t1) * d;
          T mx = -std::numeric_limits<T>::infinity();
          for (int t2 = 0; t2 < ntok; ++t2) {
            const T* kr = kw.data() + static_cast<std::size_t>(t2) * d;
            T acc = 0;
            for (int e = 0; e < d; ++e) acc += qr[e] * kr[e];
            row[t2] = acc * scale + bh[bias_idx[t1 * ntok + t2]];
            mx = std::max(mx, row[t2]);
          }
          T z = 0;
          for (int t2 = 0; t2 < ntok; ++t2) {
            row[t2] = std::exp(row[t2] - mx);
            z += row[t2];
          }
          T* orow = ow.data() + static_cast<std::size_t>(t1) * d;
          std::fill(orow, orow + d, T(0));
          for (int t2 = 0; t2 < ntok; ++t2) {
            const T pr = row[t2] / z;
            P[t1 * ntok + t2] = pr;
            const T* vr = vw.data() + static_cast<std::size_t>(t2) * d;
            for (int e = 0; e < d; ++e) orow[e] += pr * vr[e];
          }
        }
        scatter_window(ow.data(), ntok, d, wp, p,
                       y.data() + (static_cast<std::size_t>(n) * c + hd * d) * p, false);
      }
    }

  return make_result<T>(
      std::move(y), {qkv, rel_bias},
      [=, pos = std::move(pos), bias_idx = std::move(bias_idx),
       probs = std::move(probs)](Node<T>& node) {
        Tensor<T>* gx = parent_grad(node, 0);
        Tensor<T>* gbias = parent_grad(node, 1);
        const T* xv = node.parents[0]->value.data();
        std::vector<T> dP(static_cast<std::size_t>(ntok) * ntok);
        std::vector<T> qw(tile), kw(tile), vw(tile), dow(tile), dq(tile), dk(tile), dv(tile);
        for (int n = 0; n < b; ++n)
          for (std::size_t win = 0; win < nwin; ++win) {
            const int* wp = pos.data() + win * ntok;
            for (int hd = 0; hd < heads; ++hd) {
              const std::size_t qoff = (static_cast<std::size_t>(n) * c3 + hd * d) * p;
              const T* q = xv + qoff;
              const T* k = q + static_cast<std::size_t>(c) * p;
              const T* v = k + static_cast<std::size_t>(c) * p;
              const T* P = probs.data() +
                           ((static_cast<std::size_t>(n) * nwin + win) * heads + hd) * ntok * ntok;
              gather_window(node.grad.data() + (static_cast<std::size_t>(n) * c + hd * d) * p, p, wp,
                            ntok, d, dow.data());
              gather_window(v, p, wp, ntok, d, vw.data());
              // dP = dO V^T ; dV = P^T dO
              for (int t1 = 0; t1 < ntok; ++t1) {
                const T* dr = dow.data() + static_cast<std::size_t>(t1) * d;
                for (int t2 = 0; t2 < ntok; ++t2) {
                  const T* vr = vw.data() + static_cast<std::size_t>(t2) * d;
                  T acc = 0;
                  for (int e = 0; e < d; ++e) acc += dr[e] * vr[e];
                  dP[t1 * ntok + t2] = acc;
                }
              }
              // Softmax backward in place: dS = P * (dP - <dP, P>_row)
              for (int t1 = 0; t1 < ntok; ++t1) {
                T dot = 0;
                for (int t2 = 0; t2 < ntok; ++t2) dot += dP[t1 * ntok + t2] * P[t1 * ntok + t2];
                for (int t2 = 0; t2 < ntok; ++t2)
                  dP[t1 * ntok + t2] = P[t1 * ntok + t2] * (dP[t1 * ntok + t2] - dot);
              }
              if (gbias) {
                T* gb = gbias->data() + hd * side * side;
                for (int i = 0; i < ntok * ntok; ++i) gb[bias_idx[i]] += dP[i];
              }
              if (!gx) continue;
              gather_window(q, p, wp, ntok, d, qw.data());
              gather_window(k, p, wp, ntok, d, kw.data());
              std::fill(dq.begin(), dq.end(), T(0));
              std::fill(dk.begin(), dk.end(), T(0));
              std::fill(dv.begin(), dv.end(), T(0));
              for (int t1 = 0; t1 < ntok; ++t1) {
                const T* qr = qw.data() + static_cast<std::size_t>(t1) * d;
                const T* dr = dow.data() + static_cast<std::size_t>(t1) * d;
                T* dqr = dq.data() + static_cast<std::size_t>(t1) * d;
                for (int t2 = 0; t2 < ntok; ++t2) {
                  const T ds = dP[t1 * ntok + t2] * scale;
                  const T pr = P[t1 * ntok + t2];
                  const T* kr = kw.data() + static_cast<std::size_t>(t2) * d;
                  T* dkr = dk.data() + static_cast<std::size_t>(t2) * d;
                  T* dvr = dv.data() + static_cast<std::size_t>(t2) * d;
                  for (int e = 0; e < d; ++e) {
                    dqr[e] += ds * kr[e];
                    dkr[e] += ds * qr[e];
                    dvr[e] += pr * dr[e];
                  }
                }
              }
              T* gq = gx->data() + qoff;
              scatter_window(dq.data(), ntok, d, wp, p, gq, true);
              scatter_window(dk.data(), ntok, d, wp, p, gq + static_cast<std::size_t>(c) * p, true);
              scatter_window(dv.data(), ntok, d, wp, p, gq + 2 * static_cast<std::size_t>(c) * p, true);
            }
          }
      });
}

#define SEMIUF_INSTANTIATE(T)                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, T);                                                     \
  template Var<T> sum(const Var<T>&);                                                          \
  template Var<T> mean(const Var<T>&);                                                         \
  template Var<T> relu(const Var<T>&);                                                         \
  template Var<T> leaky_relu(const Var<T>&, T);                                                \
  template Var<T> gelu(const Var<T>&);                                                         \
  template Var<T> clamp(const Var<T>&, T, T, bool);                                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);               \
  template Var<T> layer_norm_channels(const Var<T>&, const Var<T>&, const Var<T>&, T);         \
  template Var<T> channel_slice(const Var<T>&, int, int);                                      \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                               \
  template Var<T> pixel_shuffle(const Var<T>&, int);                                           \
  template Var<T> global_avg_pool(const Var<T>&);                                              \
  template Var<T> window_attention(const Var<T>&, const Var<T>&, int, int, bool);

SEMIUF_INSTANTIATE(float)
SEMIUF_INSTANTIATE(double)
#undef SEMIUF_INSTANTIATE

}  // namespace ops
}  // namespace semiuf
