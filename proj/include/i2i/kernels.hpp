#pragma once

// Numeric forward and backward kernels for every catalogue op. Layout is
// NCHW, row-major. Convolutions lower to im2col + GEMM through Eigen.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "i2i/ops.hpp"
#include "i2i/tensor.hpp"

namespace i2i::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

using Index = std::int64_t;

template <class T>
struct ForwardOut {
  Shape shape;
  std::vector<T> data;
  std::vector<std::vector<T>> saved;
};

template <class T>
using Inputs = std::vector<const Tensor<T>*>;

inline std::int64_t conv_out_size(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
  return (in + 2 * p - k) / s + 1;
}
inline std::int64_t conv_transpose_out_size(std::int64_t in, std::int64_t k, std::int64_t s,
                                            std::int64_t p, std::int64_t op) {
  return (in - 1) * s - 2 * p + k + op;
}

namespace detail {

[[noreturn]] inline void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

inline void expect_rank(OpKind kind, const Shape& s, std::size_t rank, const char* arg) {
  if (s.size() != rank)
    shape_fail(kind, std::string(arg) + " must have rank " + std::to_string(rank) + ", got " + to_string(s));
}

inline void expect_same(OpKind kind, const Shape& a, const Shape& b) {
  if (a != b) shape_fail(kind, "shape mismatch " + to_string(a) + " vs " + to_string(b));
}

struct ConvGeom {
  Index batch, channels, height, width;  // image being patched
  Index k, stride, pad;
  Index grid_h, grid_w;  // patch grid (conv output size)
};

// Output columns [lo, hi) whose input column ow*stride - pad + kj is in range.
inline std::pair<Index, Index> valid_range(Index grid, Index extent, Index stride, Index pad, Index kk) {
  Index lo = pad - kk > 0 ? (pad - kk + stride - 1) / stride : 0;
  Index hi = extent - 1 + pad - kk >= 0 ? (extent - 1 + pad - kk) / stride + 1 : 0;
  lo = std::min(lo, grid);
  hi = std::clamp(hi, lo, grid);
  return {lo, hi};
}

// col has shape [channels*k*k, batch*grid_h*grid_w].
template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const Index cols = g.batch * g.grid_h * g.grid_w;
  for (Index c = 0; c < g.channels; ++c)
    for (Index ki = 0; ki < g.k; ++ki)
      for (Index kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        const auto [lo, hi] = valid_range(g.grid_w, g.width, g.stride, g.pad, kj);
        const Index off = kj - g.pad;
        for (Index b = 0; b < g.batch; ++b) {
          const T* xc = x + (b * g.channels + c) * g.height * g.width;
          for (Index oh = 0; oh < g.grid_h; ++oh) {
            const Index ih = oh * g.stride - g.pad + ki;
            T* dst = row + (b * g.grid_h + oh) * g.grid_w;
            if (ih < 0 || ih >= g.height) {
              std::fill(dst, dst + g.grid_w, T(0));
              continue;
            }
            const T* src = xc + ih * g.width + off;
            std::fill(dst, dst + lo, T(0));
            if (g.stride == 2) {
              for (Index ow = lo; ow < hi; ++ow) dst[ow] = src[2 * ow];
            } else {
              for (Index ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride];
            }
            std::fill(dst + hi, dst + g.grid_w, T(0));
          }
        }
      }
}

// Adjoint of im2col: scatter-add patches back into x (which must be zeroed).
template <class T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const Index cols = g.batch * g.grid_h * g.grid_w;
  for (Index c = 0; c < g.channels; ++c)
    for (Index ki = 0; ki < g.k; ++ki)
      for (Index kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        const auto [lo, hi] = valid_range(g.grid_w, g.width, g.stride, g.pad, kj);
        const Index off = kj - g.pad;
        for (Index b = 0; b < g.batch; ++b) {
          T* xc = x + (b * g.channels + c) * g.height * g.width;
          for (Index oh = 0; oh < g.grid_h; ++oh) {
            const Index ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.height) continue;
            const T* src = row + (b * g.grid_h + oh) * g.grid_w;
            T* dst = xc + ih * g.width + off;
            if (g.stride == 2) {
              for (Index ow = lo; ow < hi; ++ow) dst[2 * ow] += src[ow];
            } else {
              for (Index ow = lo; ow < hi; ++ow) dst[ow * g.stride] += src[ow];
            }
          }
        }
      }
}

// [B, C, P] <-> [C, B*P]
template <class T>
void nchw_to_cm(const T* x, Index B, Index C, Index P, T* out) {
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      const T* src = x + (b * C + c) * P;
      T* dst = out + c * B * P + b * P;
      std::copy(src, src + P, dst);
    }
}
template <class T>
void cm_to_nchw(const T* m, Index B, Index C, Index P, T* out) {
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      const T* src = m + c * B * P + b * P;
      std::copy(src, src + P, out + (b * C + c) * P);
    }
}

template <class T>
T sign(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// Plane reductions accumulate in double over four fixed lanes. The order
// never depends on buffer alignment, so results are bit-stable across runs
// (Eigen's redux peels to an aligned address first).
template <class T, class F>
double lane_sum(Index n, F&& term) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  Index i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += term(i);
    s1 += term(i + 1);
    s2 += term(i + 2);
    s3 += term(i + 3);
  }
  for (; i < n; ++i) s0 += term(i);
  return (s0 + s1) + (s2 + s3);
}
template <class T>
double plane_sum(const T* p, Index n) {
  return lane_sum<T>(n, [p](Index i) { return double(p[i]); });
}
template <class T>
double plane_sqdev(const T* p, Index n, double m) {
  return lane_sum<T>(n, [p, m](Index i) {
    const double d = double(p[i]) - m;
    return d * d;
  });
}
template <class T>
double plane_dot(const T* p, const T* q, Index n) {
  return lane_sum<T>(n, [p, q](Index i) { return double(p[i]) * double(q[i]); });
}
// y = (x - m) * iv; out = g * y + b over one plane.
template <class T>
void plane_normalize(const T* __restrict x, T* __restrict xhat, T* __restrict out, Index n, T m, T iv, T g, T b) {
  for (Index i = 0; i < n; ++i) {
    const T h = (x[i] - m) * iv;
    xhat[i] = h;
    out[i] = g * h + b;
  }
}

// gx = scale * (n * g - sg - xhat * sgx) over one plane.
template <class T>
void plane_norm_grad(const T* __restrict g, const T* __restrict xhat, T* __restrict gx, Index len, double scale,
                     double n, double sg, double sgx) {
  for (Index i = 0; i < len; ++i) gx[i] = T(scale * (n * double(g[i]) - sg - double(xhat[i]) * sgx));
}

}  // namespace detail

/// Output shape and value of one op. Throws ShapeError on nonconforming inputs.
template <class T>
ForwardOut<T> forward(OpKind kind, const Inputs<T>& in, const OpAttrs& a) {
  using detail::expect_rank;
  using detail::expect_same;
  using detail::shape_fail;
  ForwardOut<T> out;
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi)
      shape_fail(kind, "expected " + std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                           " inputs, got " + std::to_string(in.size()));
  };
  auto unary = [&](auto fn) {
    need(1, 1);
    out.shape = in[0]->shape();
    out.data.resize(in[0]->values().size());
    const auto& x = in[0]->values();
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = fn(x[i]);
  };

  switch (kind) {
    case OpKind::linear: {
      need(2, 3);
      const auto& xs = in[0]->shape();
      const auto& ws = in[1]->shape();
      expect_rank(kind, xs, 2, "input");
      expect_rank(kind, ws, 2, "weight");
      if (xs[1] != ws[1]) shape_fail(kind, "input features " + std::to_string(xs[1]) + " != weight fan-in " + std::to_string(ws[1]));
      if (in.size() == 3 && in[2]->shape() != Shape{ws[0]}) shape_fail(kind, "bias must be [" + std::to_string(ws[0]) + "]");
      out.shape = {xs[0], ws[0]};
      out.data.resize(xs[0] * ws[0]);
      MapMat<T> y(out.data.data(), xs[0], ws[0]);
      y.noalias() = CMapMat<T>(in[0]->values().data(), xs[0], xs[1]) *
                    CMapMat<T>(in[1]->values().data(), ws[0], ws[1]).transpose();
      if (in.size() == 3)
        y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(in[2]->values().data(), ws[0]);
      return out;
    }
    case OpKind::matmul: {
      need(2, 2);
      const auto& as = in[0]->shape();
      const auto& bs = in[1]->shape();
      expect_rank(kind, as, 2, "lhs");
      expect_rank(kind, bs, 2, "rhs");
      if (as[1] != bs[0]) shape_fail(kind, "inner dims " + to_string(as) + " x " + to_string(bs));
      out.shape = {as[0], bs[1]};
      out.data.resize(as[0] * bs[1]);
      MapMat<T>(out.data.data(), as[0], bs[1]).noalias() =
          CMapMat<T>(in[0]->values().data(), as[0], as[1]) * CMapMat<T>(in[1]->values().data(), bs[0], bs[1]);
      return out;
    }
    case OpKind::conv2d: {
      need(2, 3);
      const auto& xs = in[0]->shape();
      const auto& ws = in[1]->shape();
      expect_rank(kind, xs, 4, "input");
      expect_rank(kind, ws, 4, "weight");
      if (ws[1] != xs[1]) shape_fail(kind, "input channels " + std::to_string(xs[1]) + " != weight " + to_string(ws));
      if (ws[2] != ws[3]) shape_fail(kind, "only square kernels are supported");
      if (in.size() == 3 && in[2]->shape() != Shape{ws[0]}) shape_fail(kind, "bias must be [" + std::to_string(ws[0]) + "]");
      const Index k = ws[2], s = a.stride, p = a.pad;
      const Index ho = conv_out_size(xs[2], k, s, p), wo = conv_out_size(xs[3], k, s, p);
      if (s < 1 || ho < 1 || wo < 1) shape_fail(kind, "empty output for input " + to_string(xs));
      detail::ConvGeom g{xs[0], xs[1], xs[2], xs[3], k, s, p, ho, wo};
      const Index K = xs[1] * k * k, N = xs[0] * ho * wo;
      std::vector<T> col(K * N);
      detail::im2col(in[0]->values().data(), g, col.data());
      std::vector<T> ym(ws[0] * N);
      MapMat<T>(ym.data(), ws[0], N).noalias() =
          CMapMat<T>(in[1]->values().data(), ws[0], K) * CMapMat<T>(col.data(), K, N);
      out.shape = {xs[0], ws[0], ho, wo};
      out.data.resize(xs[0] * ws[0] * ho * wo);
      detail::cm_to_nchw(ym.data(), xs[0], ws[0], ho * wo, out.data.data());
      if (in.size() == 3) {
        const auto& bias = in[2]->values();
        for (Index b = 0; b < xs[0]; ++b)
          for (Index c = 0; c < ws[0]; ++c) {
            T* dst = out.data.data() + (b * ws[0] + c) * ho * wo;
            for (Index i = 0; i < ho * wo; ++i) dst[i] += bias[c];
          }
      }
      out.saved.push_back(std::move(col));
      return out;
    }
    case OpKind::conv_transpose2d: {
      need(2, 3);
      const auto& xs = in[0]->shape();
      const auto& ws = in[1]->shape();
      expect_rank(kind, xs, 4, "input");
      expect_rank(kind, ws, 4, "weight");
      if (ws[0] != xs[1]) shape_fail(kind, "input channels " + std::to_string(xs[1]) + " != weight " + to_string(ws));
      if (ws[2] != ws[3]) shape_fail(kind, "only square kernels are supported");
      if (in.size() == 3 && in[2]->shape() != Shape{ws[1]}) shape_fail(kind, "bias must be [" + std::to_string(ws[1]) + "]");
      const Index k = ws[2], s = a.stride, p = a.pad, cout = ws[1];
      const Index ho = conv_transpose_out_size(xs[2], k, s, p, a.output_padding);
      const Index wo = conv_transpose_out_size(xs[3], k, s, p, a.output_padding);
      if (s < 1 || ho < 1 || wo < 1) shape_fail(kind, "empty output for input " + to_string(xs));
      const Index B = xs[0], cin = xs[1], P = xs[2] * xs[3];
      std::vector<T> xm(cin * B * P);
      detail::nchw_to_cm(in[0]->values().data(), B, cin, P, xm.data());
      std::vector<T> col(cout * k * k * B * P);
      MapMat<T>(col.data(), cout * k * k, B * P).noalias() =
          CMapMat<T>(in[1]->values().data(), cin, cout * k * k).transpose() * CMapMat<T>(xm.data(), cin, B * P);
      out.shape = {B, cout, ho, wo};
      out.data.assign(B * cout * ho * wo, T(0));
      detail::ConvGeom g{B, cout, ho, wo, k, s, p, xs[2], xs[3]};
      detail::col2im(col.data(), g, out.data.data());
      if (in.size() == 3) {
        const auto& bias = in[2]->values();
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < cout; ++c) {
            T* dst = out.data.data() + (b * cout + c) * ho * wo;
            for (Index i = 0; i < ho * wo; ++i) dst[i] += bias[c];
          }
      }
      out.saved.push_back(std::move(xm));
      return out;
    }
    case OpKind::batchnorm2d:
    case OpKind::instancenorm2d: {
      const bool batch = kind == OpKind::batchnorm2d;
      const bool eval = batch && !a.training;
      need(eval ? 5 : 3, batch ? 5 : 3);
      const auto& xs = in[0]->shape();
      expect_rank(kind, xs, 4, "input");
      const Index B = xs[0], C = xs[1], P = xs[2] * xs[3];
      for (std::size_t i = 1; i < in.size(); ++i)
        if (in[i]->shape() != Shape{C}) shape_fail(kind, "per-channel parameters must be [" + std::to_string(C) + "]");
      const auto& x = in[0]->values();
      const auto& gamma = in[1]->values();
      const auto& beta = in[2]->values();
      out.shape = xs;
      out.data.resize(x.size());
      std::vector<T> xhat(x.size());
      if (batch) {
        std::vector<T> inv(C), mean(C), var(C);
        for (Index c = 0; c < C; ++c) {
          double m, v;
          if (eval) {
            m = in[3]->values()[c];
            v = in[4]->values()[c];
          } else {
            double s1 = 0;
            for (Index b = 0; b < B; ++b) s1 += detail::plane_sum(x.data() + (b * C + c) * P, P);
            m = s1 / double(B * P);
            double s2 = 0;
            for (Index b = 0; b < B; ++b) s2 += detail::plane_sqdev(x.data() + (b * C + c) * P, P, m);
            v = s2 / double(B * P);
          }
          mean[c] = T(m);
          var[c] = T(v);
          inv[c] = T(1.0 / std::sqrt(v + a.eps));
          for (Index b = 0; b < B; ++b) {
            const Index o = (b * C + c) * P;
            detail::plane_normalize(x.data() + o, xhat.data() + o, out.data.data() + o, P, mean[c], inv[c], gamma[c], beta[c]);
          }
        }
        out.saved = {std::move(xhat), std::move(inv), std::move(mean), std::move(var)};
      } else {
        if (P < 2) shape_fail(kind, "needs at least 2 spatial positions");
        std::vector<T> inv(B * C);
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < C; ++c) {
            const T* xc = x.data() + (b * C + c) * P;
            const double m = detail::plane_sum(xc, P) / double(P);
            const double s2 = detail::plane_sqdev(xc, P, m);
            const T iv = T(1.0 / std::sqrt(s2 / double(P) + a.eps));
            inv[b * C + c] = iv;
            const Index o = (b * C + c) * P;
            detail::plane_normalize(xc, xhat.data() + o, out.data.data() + o, P, T(m), iv, gamma[c], beta[c]);
          }
        out.saved = {std::move(xhat), std::move(inv)};
      }
      return out;
    }
    case OpKind::relu:
      unary([](T v) { return v > T(0) ? v : T(0); });
      return out;
    case OpKind::leaky_relu: {
      const T slope = T(a.slope);
      unary([slope](T v) { return v > T(0) ? v : slope * v; });
      return out;
    }
    case OpKind::tanh: {
      need(1, 1);
      out.shape = in[0]->shape();
      const auto& x = in[0]->values();
      out.data.resize(x.size());
      using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
      Eigen::Map<Arr>(out.data.data(), Index(x.size())) = Eigen::Map<const Arr>(x.data(), Index(x.size())).tanh();
      return out;
    }
    case OpKind::sigmoid:
      unary([](T v) { return T(1) / (T(1) + std::exp(-v)); });
      return out;
    case OpKind::sqrt:
      need(1, 1);
      for (T v : in[0]->values())
        if (v < T(0)) throw NumericError("sqrt: negative input " + std::to_string(double(v)));
      unary([](T v) { return std::sqrt(v); });
      return out;
    case OpKind::scale: {
      const T f = T(a.factor);
      unary([f](T v) { return f * v; });
      return out;
    }
    case OpKind::add:
    case OpKind::mul: {
      need(2, 2);
      expect_same(kind, in[0]->shape(), in[1]->shape());
      out.shape = in[0]->shape();
      const auto& x = in[0]->values();
      const auto& y = in[1]->values();
      out.data.resize(x.size());
      if (kind == OpKind::add)
        for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] + y[i];
      else
        for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] * y[i];
      return out;
    }
    case OpKind::concat: {
      if (in.empty()) shape_fail(kind, "needs at least one input");
      const Shape& s0 = in[0]->shape();
      const auto axis = static_cast<std::size_t>(a.axis);
      if (axis >= s0.size()) shape_fail(kind, "axis " + std::to_string(a.axis) + " out of range for " + to_string(s0));
      Shape os = s0;
      os[axis] = 0;
      for (auto* t : in) {
        Shape s = t->shape();
        if (s.size() != s0.size()) shape_fail(kind, "rank mismatch");
        os[axis] += s[axis];
        s[axis] = s0[axis];
        if (s != s0) shape_fail(kind, "non-axis dims differ: " + to_string(t->shape()) + " vs " + to_string(s0));
      }
      Index outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
      for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
      out.shape = os;
      out.data.resize(numel(os));
      Index offset = 0;
      for (auto* t : in) {
        const Index span = t->shape()[axis] * inner;
        for (Index o = 0; o < outer; ++o)
          std::copy_n(t->values().data() + o * span, span, out.data.data() + o * os[axis] * inner + offset);
        offset += span;
      }
      return out;
    }
    case OpKind::flatten: {
      need(1, 1);
      const auto& s = in[0]->shape();
      if (s.empty()) shape_fail(kind, "needs a batch dimension");
      out.shape = {s[0], numel(s) / s[0]};
      out.data = in[0]->values();
      return out;
    }
    case OpKind::reshape: {
      need(1, 1);
      if (numel(a.shape) != in[0]->numel())
        shape_fail(kind, "cannot reshape " + to_string(in[0]->shape()) + " to " + to_string(a.shape));
      out.shape = a.shape;
      out.data = in[0]->values();
      return out;
    }
    case OpKind::global_avg_pool: {
      need(1, 1);
      const auto& s = in[0]->shape();
      expect_rank(kind, s, 4, "input");
      const Index BC = s[0] * s[1], P = s[2] * s[3];
      out.shape = {s[0], s[1]};
      out.data.resize(BC);
      for (Index i = 0; i < BC; ++i) {
        T acc = 0;
        for (Index j = 0; j < P; ++j) acc += in[0]->values()[i * P + j];
        out.data[i] = acc / T(P);
      }
      return out;
    }
    case OpKind::spatial_broadcast: {
      need(1, 1);
      const auto& s = in[0]->shape();
      expect_rank(kind, s, 2, "input");
      if (a.out_h < 1 || a.out_w < 1) shape_fail(kind, "target size must be positive");
      const Index P = a.out_h * a.out_w;
      out.shape = {s[0], s[1], a.out_h, a.out_w};
      out.data.resize(s[0] * s[1] * P);
      for (Index i = 0; i < s[0] * s[1]; ++i)
        std::fill_n(out.data.data() + i * P, P, in[0]->values()[i]);
      return out;
    }
    case OpKind::expand_scalar: {
      need(1, 1);
      if (in[0]->numel() != 1) shape_fail(kind, "input must hold one value");
      if (a.shape.empty()) shape_fail(kind, "missing target shape");
      out.shape = a.shape;
      out.data.assign(numel(a.shape), in[0]->values()[0]);
      return out;
    }
    case OpKind::bilinear_resize: {
      need(1, 1);
      const auto& s = in[0]->shape();
      expect_rank(kind, s, 4, "input");
      if (a.out_h < 1 || a.out_w < 1) shape_fail(kind, "target size must be positive");
      const Index H = s[2], W = s[3], OH = a.out_h, OW = a.out_w;
      out.shape = {s[0], s[1], OH, OW};
      out.data.resize(s[0] * s[1] * OH * OW);
      const double ry = OH > 1 ? double(H - 1) / double(OH - 1) : 0.0;
      const double rx = OW > 1 ? double(W - 1) / double(OW - 1) : 0.0;
      for (Index bc = 0; bc < s[0] * s[1]; ++bc) {
        const T* src = in[0]->values().data() + bc * H * W;
        T* dst = out.data.data() + bc * OH * OW;
        for (Index i = 0; i < OH; ++i) {
          const double fy = i * ry;
          const Index y0 = std::min<Index>(Index(fy), H - 1), y1 = std::min<Index>(y0 + 1, H - 1);
          const T wy = T(fy - double(y0));
          for (Index j = 0; j < OW; ++j) {
            const double fx = j * rx;
            const Index x0 = std::min<Index>(Index(fx), W - 1), x1 = std::min<Index>(x0 + 1, W - 1);
            const T wx = T(fx - double(x0));
            dst[i * OW + j] = (T(1) - wy) * ((T(1) - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
                              wy * ((T(1) - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
          }
        }
      }
      return out;
    }
    case OpKind::l1_loss:
    case OpKind::mse_loss: {
      need(2, 2);
      expect_same(kind, in[0]->shape(), in[1]->shape());
      const auto& x = in[0]->values();
      const auto& y = in[1]->values();
      double acc = 0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = double(x[i]) - double(y[i]);
        acc += kind == OpKind::l1_loss ? std::abs(d) : d * d;
      }
      out.shape = {1};
      out.data = {T(acc / double(x.size()))};
      return out;
    }
    case OpKind::softmax_cross_entropy: {
      need(1, 1);
      const auto& s = in[0]->shape();
      expect_rank(kind, s, 2, "logits");
      const Index B = s[0], K = s[1];
      if (static_cast<Index>(a.labels.size()) != B)
        shape_fail(kind, "label count " + std::to_string(a.labels.size()) + " != batch " + std::to_string(B));
      std::vector<T> probs(B * K);
      double total = 0;
      for (Index b = 0; b < B; ++b) {
        const T* z = in[0]->values().data() + b * K;
        const int label = a.labels[b];
        if (label < 0 || label >= K) shape_fail(kind, "label " + std::to_string(label) + " outside [0," + std::to_string(K) + ")");
        double zmax = z[0];
        for (Index k = 1; k < K; ++k) zmax = std::max<double>(zmax, z[k]);
        double denom = 0;
        for (Index k = 0; k < K; ++k) denom += std::exp(double(z[k]) - zmax);
        for (Index k = 0; k < K; ++k) probs[b * K + k] = T(std::exp(double(z[k]) - zmax) / denom);
        total += std::log(denom) + zmax - double(z[label]);
      }
      out.shape = {1};
      out.data = {T(total / double(B))};
      out.saved.push_back(std::move(probs));
      return out;
    }
    case OpKind::sum:
    case OpKind::mean: {
      need(1, 1);
      double acc = 0;
      for (T v : in[0]->values()) acc += v;
      if (kind == OpKind::mean) acc /= double(in[0]->numel());
      out.shape = {1};
      out.data = {T(acc)};
      return out;
    }
    case OpKind::norm2: {
      need(1, 1);
      const auto& s = in[0]->shape();
      if (s.size() < 2) shape_fail(kind, "needs a batch dimension and at least one feature dimension");
      const Index B = s[0], F = in[0]->numel() / B;
      out.shape = {B, 1};
      out.data.resize(B);
      for (Index b = 0; b < B; ++b) {
        double acc = 0;
        for (Index f = 0; f < F; ++f) {
          const double v = in[0]->values()[b * F + f];
          acc += v * v;
        }
        out.data[b] = T(std::sqrt(acc));
      }
      return out;
    }
  }
  throw CatalogueError("op kind " + std::to_string(static_cast<int>(kind)) + " is not in the catalogue");
}

/// Vector-Jacobian products for one recorded op. `want[i]` selects which input
/// gradients to produce; entries not wanted are returned empty.
template <class T>
std::vector<std::vector<T>> backward(OpKind kind, const Inputs<T>& in, const Tensor<T>& output,
                                     const std::vector<std::vector<T>>& saved, const OpAttrs& a,
                                     const std::vector<T>& g, const std::vector<bool>& want) {
  std::vector<std::vector<T>> gin(in.size());
  auto alloc = [&](std::size_t i) -> std::vector<T>& {
    gin[i].assign(in[i]->values().size(), T(0));
    return gin[i];
  };
  const auto& y = output.values();

  switch (kind) {
    case OpKind::linear: {
      const Index B = in[0]->dim(0), F = in[0]->dim(1), O = in[1]->dim(0);
      CMapMat<T> gm(g.data(), B, O);
      if (want[0]) MapMat<T>(alloc(0).data(), B, F).noalias() = gm * CMapMat<T>(in[1]->values().data(), O, F);
      if (want[1]) MapMat<T>(alloc(1).data(), O, F).noalias() = gm.transpose() * CMapMat<T>(in[0]->values().data(), B, F);
      if (in.size() == 3 && want[2]) {
        auto& gb = alloc(2);
        for (Index b = 0; b < B; ++b)
          for (Index o = 0; o < O; ++o) gb[o] += g[b * O + o];
      }
      break;
    }
    case OpKind::matmul: {
      const Index M = in[0]->dim(0), K = in[0]->dim(1), N = in[1]->dim(1);
      CMapMat<T> gm(g.data(), M, N);
      if (want[0]) MapMat<T>(alloc(0).data(), M, K).noalias() = gm * CMapMat<T>(in[1]->values().data(), K, N).transpose();
      if (want[1]) MapMat<T>(alloc(1).data(), K, N).noalias() = CMapMat<T>(in[0]->values().data(), M, K).transpose() * gm;
      break;
    }
    case OpKind::conv2d: {
      const auto& xs = in[0]->shape();
      const auto& ws = in[1]->shape();
      const Index B = xs[0], cout = ws[0], k = ws[2], ho = output.dim(2), wo = output.dim(3);
      const Index K = xs[1] * k * k, P = ho * wo, N = B * P;
      std::vector<T> gm(cout * N);
      detail::nchw_to_cm(g.data(), B, cout, P, gm.data());
      CMapMat<T> G(gm.data(), cout, N);
      if (want[1]) MapMat<T>(alloc(1).data(), cout, K).noalias() = G * CMapMat<T>(saved[0].data(), K, N).transpose();
      if (want[0]) {
        std::vector<T> gcol(K * N);
        MapMat<T>(gcol.data(), K, N).noalias() = CMapMat<T>(in[1]->values().data(), cout, K).transpose() * G;
        detail::ConvGeom geo{B, xs[1], xs[2], xs[3], k, a.stride, a.pad, ho, wo};
        detail::col2im(gcol.data(), geo, alloc(0).data());
      }
      if (in.size() == 3 && want[2]) {
        auto& gb = alloc(2);
        for (Index c = 0; c < cout; ++c) gb[c] = T(detail::plane_sum(gm.data() + c * N, N));
      }
      break;
    }
    case OpKind::conv_transpose2d: {
      const auto& xs = in[0]->shape();
      const auto& ws = in[1]->shape();
      const Index B = xs[0], cin = xs[1], cout = ws[1], k = ws[2], P = xs[2] * xs[3];
      const Index ho = output.dim(2), wo = output.dim(3);
      std::vector<T> gcol(cout * k * k * B * P);
      detail::ConvGeom geo{B, cout, ho, wo, k, a.stride, a.pad, xs[2], xs[3]};
      detail::im2col(g.data(), geo, gcol.data());
      CMapMat<T> GC(gcol.data(), cout * k * k, B * P);
      if (want[0]) {
        std::vector<T> gx(cin * B * P);
        MapMat<T>(gx.data(), cin, B * P).noalias() = CMapMat<T>(in[1]->values().data(), cin, cout * k * k) * GC;
        detail::cm_to_nchw(gx.data(), B, cin, P, alloc(0).data());
      }
      if (want[1])
        MapMat<T>(alloc(1).data(), cin, cout * k * k).noalias() = CMapMat<T>(saved[0].data(), cin, B * P) * GC.transpose();
      if (in.size() == 3 && want[2]) {
        auto& gb = alloc(2);
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < cout; ++c)
            for (Index i = 0; i < ho * wo; ++i) gb[c] += g[(b * cout + c) * ho * wo + i];
      }
      break;
    }
    case OpKind::batchnorm2d:
    case OpKind::instancenorm2d: {
      const auto& xs = in[0]->shape();
      const Index B = xs[0], C = xs[1], P = xs[2] * xs[3];
      const auto& xhat = saved[0];
      const auto& inv = saved[1];
      const auto& gamma = in[1]->values();
      if (want[1] || want[2]) {
        std::vector<T> gg(C, T(0)), gbeta(C, T(0));
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < C; ++c) {
            const Index o = (b * C + c) * P;
            gg[c] += T(detail::plane_dot(g.data() + o, xhat.data() + o, P));
            gbeta[c] += T(detail::plane_sum(g.data() + o, P));
          }
        if (want[1]) gin[1] = std::move(gg);
        if (want[2]) gin[2] = std::move(gbeta);
      }
      if (want[0]) {
        auto& gx = alloc(0);
        if (kind == OpKind::batchnorm2d && !a.training) {
          for (Index b = 0; b < B; ++b)
            for (Index c = 0; c < C; ++c)
              for (Index i = 0; i < P; ++i) {
                const Index j = (b * C + c) * P + i;
                gx[j] = g[j] * gamma[c] * inv[c];
              }
        } else if (kind == OpKind::batchnorm2d) {
          const double n = double(B * P);
          for (Index c = 0; c < C; ++c) {
            double sg = 0, sgx = 0;
            for (Index b = 0; b < B; ++b) {
              const Index o = (b * C + c) * P;
              sg += detail::plane_sum(g.data() + o, P);
              sgx += detail::plane_dot(g.data() + o, xhat.data() + o, P);
            }
            const double scale = double(gamma[c]) * inv[c] / n;
            for (Index b = 0; b < B; ++b) {
              const Index o = (b * C + c) * P;
              detail::plane_norm_grad(g.data() + o, xhat.data() + o, gx.data() + o, P, scale, n, sg, sgx);
            }
          }
        } else {
          const double n = double(P);
          for (Index b = 0; b < B; ++b)
            for (Index c = 0; c < C; ++c) {
              const Index base = (b * C + c) * P;
              const double sg = detail::plane_sum(g.data() + base, P);
              const double sgx = detail::plane_dot(g.data() + base, xhat.data() + base, P);
              const double scale = double(gamma[c]) * inv[b * C + c] / n;
              detail::plane_norm_grad(g.data() + base, xhat.data() + base, gx.data() + base, P, scale, n, sg, sgx);
            }
        }
      }
      break;
    }
    case OpKind::relu:
    case OpKind::leaky_relu: {
      const T neg = kind == OpKind::relu ? T(0) : T(a.slope);
      if (want[0]) {
        const std::size_t n = g.size();
        gin[0].resize(n);
        T* __restrict gx = gin[0].data();
        const T* __restrict x = in[0]->values().data();
        const T* __restrict gp = g.data();
        for (std::size_t i = 0; i < n; ++i) gx[i] = x[i] > T(0) ? gp[i] : neg * gp[i];
      }
      break;
    }
    case OpKind::tanh:
      if (want[0]) {
        auto& gx = alloc(0);
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] = g[i] * (T(1) - y[i] * y[i]);
      }
      break;
    case OpKind::sigmoid:
      if (want[0]) {
        auto& gx = alloc(0);
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] = g[i] * y[i] * (T(1) - y[i]);
      }
      break;
    case OpKind::sqrt:
      if (want[0]) {
        auto& gx = alloc(0);
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] = g[i] / (T(2) * y[i]);
      }
      break;
    case OpKind::scale:
      if (want[0]) {
        auto& gx = alloc(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = T(a.factor) * g[i];
      }
      break;
    case OpKind::add:
      if (want[0]) gin[0] = g;
      if (want[1]) gin[1] = g;
      break;
    case OpKind::mul:
      for (int s = 0; s < 2; ++s)
        if (want[s]) {
          auto& gx = alloc(s);
          const auto& other = in[1 - s]->values();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * other[i];
        }
      break;
    case OpKind::concat: {
      const auto axis = static_cast<std::size_t>(a.axis);
      const Shape& os = output.shape();
      Index outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
      for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
      Index offset = 0;
      for (std::size_t t = 0; t < in.size(); ++t) {
        const Index span = in[t]->shape()[axis] * inner;
        if (want[t]) {
          auto& gx = alloc(t);
          for (Index o = 0; o < outer; ++o)
            std::copy_n(g.data() + o * os[axis] * inner + offset, span, gx.data() + o * span);
        }
        offset += span;
      }
      break;
    }
    case OpKind::flatten:
    case OpKind::reshape:
      if (want[0]) gin[0] = g;
      break;
    case OpKind::global_avg_pool:
      if (want[0]) {
        auto& gx = alloc(0);
        const Index P = in[0]->dim(2) * in[0]->dim(3);
        for (std::size_t i = 0; i < g.size(); ++i)
          for (Index j = 0; j < P; ++j) gx[i * P + j] = g[i] / T(P);
      }
      break;
    case OpKind::spatial_broadcast:
      if (want[0]) {
        auto& gx = alloc(0);
        const Index P = a.out_h * a.out_w;
        for (std::size_t i = 0; i < gx.size(); ++i) {
          T acc = 0;
          for (Index j = 0; j < P; ++j) acc += g[i * P + j];
          gx[i] = acc;
        }
      }
      break;
    case OpKind::expand_scalar:
      if (want[0]) {
        T acc = 0;
        for (T v : g) acc += v;
        gin[0] = {acc};
      }
      break;
    case OpKind::bilinear_resize:
      if (want[0]) {
        auto& gx = alloc(0);
        const auto& s = in[0]->shape();
        const Index H = s[2], W = s[3], OH = a.out_h, OW = a.out_w;
        const double ry = OH > 1 ? double(H - 1) / double(OH - 1) : 0.0;
        const double rx = OW > 1 ? double(W - 1) / double(OW - 1) : 0.0;
        for (Index bc = 0; bc < s[0] * s[1]; ++bc) {
          T* dst = gx.data() + bc * H * W;
          const T* src = g.data() + bc * OH * OW;
          for (Index i = 0; i < OH; ++i) {
            const double fy = i * ry;
            const Index y0 = std::min<Index>(Index(fy), H - 1), y1 = std::min<Index>(y0 + 1, H - 1);
            const T wy = T(fy - double(y0));
            for (Index j = 0; j < OW; ++j) {
              const double fx = j * rx;
              const Index x0 = std::min<Index>(Index(fx), W - 1), x1 = std::min<Index>(x0 + 1, W - 1);
              const T wx = T(fx - double(x0));
              const T v = src[i * OW + j];
              dst[y0 * W + x0] += (T(1) - wy) * (T(1) - wx) * v;
              dst[y0 * W + x1] += (T(1) - wy) * wx * v;
              dst[y1 * W + x0] += wy * (T(1) - wx) * v;
              dst[y1 * W + x1] += wy * wx * v;
            }
          }
        }
      }
      break;
    case OpKind::l1_loss:
    case OpKind::mse_loss: {
      const auto& x = in[0]->values();
      const auto& t = in[1]->values();
      const T scale = g[0] / T(x.size());
      for (int s = 0; s < 2; ++s)
        if (want[s]) {
          auto& gx = alloc(s);
          const T sg = s == 0 ? T(1) : T(-1);
          for (std::size_t i = 0; i < x.size(); ++i) {
            const T d = x[i] - t[i];
            gx[i] = sg * scale * (kind == OpKind::l1_loss ? detail::sign(d) : T(2) * d);
          }
        }
      break;
    }
    case OpKind::softmax_cross_entropy:
      if (want[0]) {
        auto& gx = alloc(0);
        const Index B = in[0]->dim(0), K = in[0]->dim(1);
        const T scale = g[0] / T(B);
        for (Index b = 0; b < B; ++b)
          for (Index k = 0; k < K; ++k)
            gx[b * K + k] = scale * (saved[0][b * K + k] - (k == a.labels[b] ? T(1) : T(0)));
      }
      break;
    case OpKind::sum:
    case OpKind::mean:
      if (want[0]) {
        const T v = kind == OpKind::sum ? g[0] : g[0] / T(in[0]->numel());
        gin[0].assign(in[0]->values().size(), v);
      }
      break;
    case OpKind::norm2:
      if (want[0]) {
        auto& gx = alloc(0);
        const Index B = in[0]->dim(0), F = in[0]->numel() / B;
        const auto& x = in[0]->values();
        for (Index b = 0; b < B; ++b) {
          if (y[b] == T(0)) continue;  // subgradient 0 at the origin
          const T s = g[b] / y[b];
          for (Index f = 0; f < F; ++f) gx[b * F + f] = s * x[b * F + f];
        }
      }
      break;
  }
  return gin;
}

}  // namespace i2i::kernels
