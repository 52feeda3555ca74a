#pragma once

#include <Eigen/Core>

#include <cmath>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dia/tensor.hpp"

// Differentiable primitives. Each op computes its output eagerly and, when any
// input requires a gradient and recording is on, appends a backward closure to
// the thread's Graph. All reductions run in a fixed order so results are
// bitwise reproducible.
namespace dia::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline bool tracks(std::initializer_list<const Tensor*> inputs) {
  if (!Graph::current().recording()) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

inline void check_finite(std::string_view op, const Tensor& out) {
  for (double v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op),
                         "numeric overflow: " + std::string(op) +
                             " produced a non-finite value");
    }
  }
}

[[noreturn]] inline void mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                   shape_str(b));
}

inline void expect_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

// Adds `g` into the gradient of `t` if it participates in differentiation.
inline void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto dst = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename Fn>
void record(std::string_view op, Tensor& out, Fn&& fn) {
  out.set_requires_grad(true);
  Graph::current().record(op, out, std::forward<Fn>(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::mismatch("add", a.shape(), b.shape());
  Tensor out(a.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  detail::check_finite("add", out);
  if (detail::tracks({&a, &b})) {
    detail::record("add", out, [a, b](std::span<const double> g) mutable {
      detail::accumulate(a, g);
      detail::accumulate(b, g);
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::mismatch("sub", a.shape(), b.shape());
  Tensor out(a.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  detail::check_finite("sub", out);
  if (detail::tracks({&a, &b})) {
    detail::record("sub", out, [a, b](std::span<const double> g) mutable {
      detail::accumulate(a, g);
      if (b.requires_grad()) {
        auto d = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::mismatch("mul", a.shape(), b.shape());
  Tensor out(a.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  detail::check_finite("mul", out);
  if (detail::tracks({&a, &b})) {
    detail::record("mul", out, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto d = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto d = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = c * a[i];
  detail::check_finite("scale", out);
  if (detail::tracks({&a})) {
    detail::record("scale", out, [a, c](std::span<const double> g) mutable {
      auto d = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::check_finite("sum", out);
  if (detail::tracks({&a})) {
    detail::record("sum", out, [a](std::span<const double> g) mutable {
      auto d = a.mutable_grad();
      for (double& v : d) v += g[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) detail::mismatch("reshape", a.shape(), shape);
  Tensor out(std::move(shape), a.values());
  if (detail::tracks({&a})) {
    detail::record("reshape", out, [a](std::span<const double> g) mutable {
      detail::accumulate(a, g);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  detail::check_finite("relu", out);
  if (detail::tracks({&x})) {
    detail::record("relu", out, [x](std::span<const double> g) mutable {
      auto d = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) d[i] += g[i];
      }
    });
  }
  return out;
}

inline double sigmoid_scalar(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid_scalar(x[i]);
  detail::check_finite("sigmoid", out);
  if (detail::tracks({&x})) {
    detail::record("sigmoid", out, [x, out](std::span<const double> g) mutable {
      auto d = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * out[i] * (1.0 - out[i]);
    });
  }
  return out;
}

inline Tensor tanh(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(x[i]);
  detail::check_finite("tanh", out);
  if (detail::tracks({&x})) {
    detail::record("tanh", out, [x, out](std::span<const double> g) mutable {
      auto d = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - out[i] * out[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k] x [k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::expect_rank("matmul", a, 2);
  detail::expect_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) detail::mismatch("matmul", a.shape(), b.shape());
  Tensor out({m, n});
  detail::MapMat(out.data().data(), m, n).noalias() =
      detail::CMapMat(a.data().data(), m, k) * detail::CMapMat(b.data().data(), k, n);
  detail::check_finite("matmul", out);
  if (detail::tracks({&a, &b})) {
    detail::record("matmul", out, [a, b, m, k, n](std::span<const double> g) mutable {
      detail::CMapMat gm(g.data(), m, n);
      if (a.requires_grad()) {
        detail::MapMat(a.mutable_grad().data(), m, k).noalias() +=
            gm * detail::CMapMat(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::MapMat(b.mutable_grad().data(), k, n).noalias() +=
            detail::CMapMat(a.data().data(), m, k).transpose() * gm;
      }
    });
  }
  return out;
}

// Fully connected map: x [B,in], weight [out,in], optional bias [out] -> [B,out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  detail::expect_rank("linear", x, 2);
  detail::expect_rank("linear", weight, 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) detail::mismatch("linear", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{out_dim}) {
    detail::mismatch("linear", weight.shape(), bias.shape());
  }
  Tensor out({batch, out_dim});
  detail::MapMat om(out.data().data(), batch, out_dim);
  om.noalias() = detail::CMapMat(x.data().data(), batch, in) *
                 detail::CMapMat(weight.data().data(), out_dim, in).transpose();
  if (bias.defined()) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < out_dim; ++j) om(b, j) += bias[j];
    }
  }
  detail::check_finite("linear", out);
  if (detail::tracks({&x, &weight, &bias})) {
    detail::record("linear", out,
                   [x, weight, bias, batch, in, out_dim](std::span<const double> g) mutable {
                     detail::CMapMat gm(g.data(), batch, out_dim);
                     if (x.requires_grad()) {
                       detail::MapMat(x.mutable_grad().data(), batch, in).noalias() +=
                           gm * detail::CMapMat(weight.data().data(), out_dim, in);
                     }
                     if (weight.requires_grad()) {
                       detail::MapMat(weight.mutable_grad().data(), out_dim, in).noalias() +=
                           gm.transpose() * detail::CMapMat(x.data().data(), batch, in);
                     }
                     if (bias.defined() && bias.requires_grad()) {
                       auto d = bias.mutable_grad();
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t j = 0; j < out_dim; ++j) d[j] += gm(b, j);
                       }
                     }
                   });
  }
  return out;
}

// Block-diagonal linear map: x [B,n], weight [groups, n/groups, n/groups].
// Block g maps x[:, g*s:(g+1)*s] to y[:, g*s:(g+1)*s].
inline Tensor grouped_linear(const Tensor& x, const Tensor& weight) {
  detail::expect_rank("grouped_linear", x, 2);
  detail::expect_rank("grouped_linear", weight, 3);
  const std::size_t batch = x.dim(0), n = x.dim(1), groups = weight.dim(0),
                    block = weight.dim(1);
  if (weight.dim(2) != block || groups * block != n) {
    detail::mismatch("grouped_linear", x.shape(), weight.shape());
  }
  Tensor out({batch, n});
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t i = 0; i < block; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < block; ++j) {
          acc += weight[(g * block + i) * block + j] * x[b * n + g * block + j];
        }
        o[b * n + g * block + i] = acc;
      }
    }
  }
  detail::check_finite("grouped_linear", out);
  if (detail::tracks({&x, &weight})) {
    detail::record("grouped_linear", out,
                   [x, weight, batch, n, groups, block](std::span<const double> g) mutable {
                     const bool gx = x.requires_grad(), gw = weight.requires_grad();
                     std::span<double> dx = gx ? x.mutable_grad() : std::span<double>{};
                     std::span<double> dw = gw ? weight.mutable_grad() : std::span<double>{};
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t gr = 0; gr < groups; ++gr) {
                         for (std::size_t i = 0; i < block; ++i) {
                           const double go = g[b * n + gr * block + i];
                           for (std::size_t j = 0; j < block; ++j) {
                             const std::size_t w_idx = (gr * block + i) * block + j;
                             const std::size_t x_idx = b * n + gr * block + j;
                             if (gx) dx[x_idx] += go * weight[w_idx];
                             if (gw) dw[w_idx] += go * x[x_idx];
                           }
                         }
                       }
                     }
                   });
  }
  return out;
}

// W ⊙ x + b per feature; x [B,n], weight [n], bias [n].
inline Tensor elementwise_affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::expect_rank("elementwise_affine", x, 2);
  const std::size_t batch = x.dim(0), n = x.dim(1);
  if (weight.shape() != Shape{n}) detail::mismatch("elementwise_affine", x.shape(), weight.shape());
  if (bias.shape() != Shape{n}) detail::mismatch("elementwise_affine", x.shape(), bias.shape());
  Tensor out({batch, n});
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < n; ++j) o[b * n + j] = weight[j] * x[b * n + j] + bias[j];
  }
  detail::check_finite("elementwise_affine", out);
  if (detail::tracks({&x, &weight, &bias})) {
    detail::record("elementwise_affine", out,
                   [x, weight, bias, batch, n](std::span<const double> g) mutable {
                     if (x.requires_grad()) {
                       auto d = x.mutable_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * weight[i % n];
                     }
                     if (weight.requires_grad()) {
                       auto d = weight.mutable_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i] * x[i];
                     }
                     if (bias.requires_grad()) {
                       auto d = bias.mutable_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i];
                     }
                     (void)batch;
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

namespace detail {

// Output columns [lo, hi) whose input column ox*stride + kj - pad is inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t kj, const Conv2dGeometry& g,
                                                       std::size_t extent, std::size_t out) {
  const long off = static_cast<long>(kj) - static_cast<long>(g.pad);
  const long s = static_cast<long>(g.stride);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(extent) - 1 - off) < 0 ? 0 : (static_cast<long>(extent) - 1 - off) / s + 1;
  hi = std::min<long>(hi, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Gathers one sample [C,H,W] into columns of a [C*k*k, ld] matrix starting
// at column `col0`; each sample occupies out_h*out_w consecutive columns.
inline void im2col(const double* x, const Conv2dGeometry& g, double* cols, std::size_t ld,
                   std::size_t col0) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld + col0;
        const auto [lo, hi] = valid_range(kj, g, g.width, g.out_w);
        const long col_off = static_cast<long>(kj) - static_cast<long>(g.pad);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          double* dst = row + oy * g.out_w;
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          std::fill(dst, dst + lo, 0.0);
          for (std::size_t ox = lo; ox < hi; ++ox) {
            dst[ox] = src[static_cast<long>(ox * g.stride) + col_off];
          }
          std::fill(dst + hi, dst + g.out_w, 0.0);
        }
      }
    }
  }
}

inline void col2im(const double* cols, const Conv2dGeometry& g, std::size_t ld, std::size_t col0,
                   double* dx) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld + col0;
        const auto [lo, hi] = valid_range(kj, g, g.width, g.out_w);
        const long col_off = static_cast<long>(kj) - static_cast<long>(g.pad);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* dst = dx + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox * g.stride) + col_off] += src[ox];
        }
      }
    }
  }
}

// Samples per lowered chunk, sized so the column matrix stays cache resident.
inline std::size_t conv_chunk(const Conv2dGeometry& g, std::size_t batch) {
  constexpr std::size_t kTargetDoubles = 1 << 15;
  return std::clamp<std::size_t>(kTargetDoubles / std::max<std::size_t>(1, g.patch() * g.positions()), 1,
                                 std::max<std::size_t>(1, batch));
}

}  // namespace detail

// x [B,C,H,W], weight [O,C,k,k], optional bias [O]; zero padding.
// Samples are lowered in chunks to a [C*k*k, chunk*positions] column matrix
// and multiplied in one GEMM per chunk; backward recomputes the columns.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t pad,
                     const Tensor& bias = {}) {
  detail::expect_rank("conv2d", x, 4);
  detail::expect_rank("conv2d", weight, 4);
  const std::size_t batch = x.dim(0), out_ch = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != x.dim(1) || weight.dim(3) != k) {
    detail::mismatch("conv2d", x.shape(), weight.shape());
  }
  if (stride == 0 || x.dim(2) + 2 * pad < k || x.dim(3) + 2 * pad < k) {
    detail::mismatch("conv2d", x.shape(), weight.shape());
  }
  if (bias.defined() && bias.shape() != Shape{out_ch}) {
    detail::mismatch("conv2d", weight.shape(), bias.shape());
  }
  Conv2dGeometry geo{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  geo.out_h = (geo.height + 2 * pad - k) / stride + 1;
  geo.out_w = (geo.width + 2 * pad - k) / stride + 1;
  const std::size_t patch = geo.patch(), positions = geo.positions();
  const std::size_t in_size = geo.channels * geo.height * geo.width;
  const std::size_t chunk = detail::conv_chunk(geo, batch);

  Tensor out({batch, out_ch, geo.out_h, geo.out_w});
  {
    std::vector<double> cols(patch * chunk * positions), prod(out_ch * chunk * positions);
    detail::CMapMat wm(weight.data().data(), out_ch, patch);
    auto o = out.data();
    for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
      const std::size_t n = std::min(chunk, batch - b0), ld = n * positions;
      for (std::size_t b = 0; b < n; ++b) {
        detail::im2col(x.data().data() + (b0 + b) * in_size, geo, cols.data(), ld, b * positions);
      }
      detail::MapMat(prod.data(), out_ch, ld).noalias() = wm * detail::CMapMat(cols.data(), patch, ld);
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < out_ch; ++c) {
          const double shift = bias.defined() ? bias[c] : 0.0;
          const double* src = prod.data() + c * ld + b * positions;
          double* dst = o.data() + ((b0 + b) * out_ch + c) * positions;
          for (std::size_t p = 0; p < positions; ++p) dst[p] = src[p] + shift;
        }
      }
    }
  }
  detail::check_finite("conv2d", out);
  if (detail::tracks({&x, &weight, &bias})) {
    detail::record("conv2d", out, [x, weight, bias, geo, batch, out_ch, in_size,
                                   chunk](std::span<const double> g) {
      const std::size_t patch = geo.patch(), positions = geo.positions();
      const bool gx = x.requires_grad(), gw = weight.requires_grad();
      const bool gb = bias.defined() && bias.requires_grad();
      std::vector<double> gmat(out_ch * chunk * positions), cols, dcols;
      if (gw) cols.resize(patch * chunk * positions);
      if (gx) dcols.resize(patch * chunk * positions);
      detail::CMapMat wm(weight.data().data(), out_ch, patch);
      for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
        const std::size_t n = std::min(chunk, batch - b0), ld = n * positions;
        // Gradient chunk rearranged to [O, n*positions] to match the columns.
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t c = 0; c < out_ch; ++c) {
            std::copy_n(g.data() + ((b0 + b) * out_ch + c) * positions, positions,
                        gmat.data() + c * ld + b * positions);
          }
        }
        detail::CMapMat gm(gmat.data(), out_ch, ld);
        if (gw) {
          for (std::size_t b = 0; b < n; ++b) {
            detail::im2col(x.data().data() + (b0 + b) * in_size, geo, cols.data(), ld, b * positions);
          }
          detail::MapMat(weight.mutable_grad().data(), out_ch, patch).noalias() +=
              gm * detail::CMapMat(cols.data(), patch, ld).transpose();
        }
        if (gx) {
          detail::MapMat(dcols.data(), patch, ld).noalias() = wm.transpose() * gm;
          double* dx = x.mutable_grad().data();
          for (std::size_t b = 0; b < n; ++b) {
            detail::col2im(dcols.data(), geo, ld, b * positions, dx + (b0 + b) * in_size);
          }
        }
        if (gb) {
          auto d = bias.mutable_grad();
          for (std::size_t o = 0; o < out_ch; ++o) {
            const double* row = gmat.data() + o * ld;
            double acc = 0.0;
            for (std::size_t p = 0; p < ld; ++p) acc += row[p];
            d[o] += acc;
          }
        }
      }
    });
  }
  return out;
}

// Same-length 1-D convolution across the channel axis of y [B,C] with a
// shared odd-length kernel and zero padding.
inline Tensor channel_conv1d(const Tensor& y, const Tensor& kernel) {
  detail::expect_rank("channel_conv1d", y, 2);
  detail::expect_rank("channel_conv1d", kernel, 1);
  const std::size_t batch = y.dim(0), c = y.dim(1), k = kernel.dim(0);
  if (k % 2 == 0) detail::mismatch("channel_conv1d", y.shape(), kernel.shape());
  const long half = static_cast<long>(k / 2);
  Tensor out({batch, c});
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < c; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(i) + static_cast<long>(j) - half;
        if (src < 0 || src >= static_cast<long>(c)) continue;
        acc += kernel[j] * y[b * c + static_cast<std::size_t>(src)];
      }
      o[b * c + i] = acc;
    }
  }
  detail::check_finite("channel_conv1d", out);
  if (detail::tracks({&y, &kernel})) {
    detail::record("channel_conv1d", out,
                   [y, kernel, batch, c, k, half](std::span<const double> g) mutable {
                     const bool gy = y.requires_grad(), gk = kernel.requires_grad();
                     std::span<double> dy = gy ? y.mutable_grad() : std::span<double>{};
                     std::span<double> dk = gk ? kernel.mutable_grad() : std::span<double>{};
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t i = 0; i < c; ++i) {
                         const double go = g[b * c + i];
                         for (std::size_t j = 0; j < k; ++j) {
                           const long src = static_cast<long>(i) + static_cast<long>(j) - half;
                           if (src < 0 || src >= static_cast<long>(c)) continue;
                           const std::size_t s = b * c + static_cast<std::size_t>(src);
                           if (gy) dy[s] += go * kernel[j];
                           if (gk) dk[j] += go * y[s];
                         }
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and channel recalibration

// [B,C,H,W] -> [B,C], spatial mean.
inline Tensor global_avg_pool(const Tensor& x) {
  detail::expect_rank("global_avg_pool", x, 4);
  const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({batch, c});
  auto o = out.data();
  for (std::size_t bc = 0; bc < batch * c; ++bc) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += x[bc * hw + p];
    o[bc] = acc / static_cast<double>(hw);
  }
  detail::check_finite("global_avg_pool", out);
  if (detail::tracks({&x})) {
    detail::record("global_avg_pool", out, [x, batch, c, hw](std::span<const double> g) mutable {
      auto d = x.mutable_grad();
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t bc = 0; bc < batch * c; ++bc) {
        for (std::size_t p = 0; p < hw; ++p) d[bc * hw + p] += g[bc] * inv;
      }
    });
  }
  return out;
}

// x [B,C,H,W] scaled per channel by s [B,C] (per sample) or [C] (shared).
inline Tensor channelwise_mul(const Tensor& x, const Tensor& s) {
  detail::expect_rank("channelwise_mul", x, 4);
  const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const bool per_sample = s.rank() == 2;
  if (!(per_sample ? s.shape() == Shape{batch, c} : s.shape() == Shape{c})) {
    detail::mismatch("channelwise_mul", x.shape(), s.shape());
  }
  auto scale_index = [per_sample, c](std::size_t b, std::size_t ch) {
    return per_sample ? b * c + ch : ch;
  };
  Tensor out(x.shape());
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double f = s[scale_index(b, ch)];
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) o[base + p] = x[base + p] * f;
    }
  }
  detail::check_finite("channelwise_mul", out);
  if (detail::tracks({&x, &s})) {
    detail::record("channelwise_mul", out,
                   [x, s, batch, c, hw, scale_index](std::span<const double> g) mutable {
                     const bool gx = x.requires_grad(), gs = s.requires_grad();
                     std::span<double> dx = gx ? x.mutable_grad() : std::span<double>{};
                     std::span<double> ds = gs ? s.mutable_grad() : std::span<double>{};
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         const std::size_t si = scale_index(b, ch);
                         const std::size_t base = (b * c + ch) * hw;
                         double acc = 0.0;
                         for (std::size_t p = 0; p < hw; ++p) {
                           if (gx) dx[base + p] += g[base + p] * s[si];
                           acc += g[base + p] * x[base + p];
                         }
                         if (gs) ds[si] += acc;
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

// x [B,C,H,W] or [B,C]; gamma/beta [C]. In training mode normalizes with the
// batch statistics (biased variance) and updates `stats` as an exponential
// moving average: running = momentum * running + (1 - momentum) * batch, with
// the unbiased batch variance. In eval mode uses the running statistics.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormStats& stats, bool training, double momentum = 0.9,
                         double eps = 1e-5) {
  if (x.rank() != 4 && x.rank() != 2) {
    throw ShapeError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    detail::mismatch("batch_norm", x.shape(), gamma.shape());
  }
  if (stats.running_mean.size() != c || stats.running_var.size() != c) {
    throw ShapeError("batch_norm: running statistics hold " +
                     std::to_string(stats.running_mean.size()) + " channels, input has " +
                     std::to_string(c));
  }
  const std::size_t count = batch * hw;
  std::vector<double> mu(c), inv_std(c);
  if (training) {
    if (count < 2) {
      throw ShapeError("batch_norm: training mode needs more than one value per channel, got " +
                       shape_str(x.shape()));
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t p = 0; p < hw; ++p) acc += x[(b * c + ch) * hw + p];
      }
      mu[ch] = acc / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = x[(b * c + ch) * hw + p] - mu[ch];
          var += d * d;
        }
      }
      const double biased = var / static_cast<double>(count);
      const double unbiased = var / static_cast<double>(count - 1);
      inv_std[ch] = 1.0 / std::sqrt(biased + eps);
      stats.running_mean[ch] = momentum * stats.running_mean[ch] + (1.0 - momentum) * mu[ch];
      stats.running_var[ch] = momentum * stats.running_var[ch] + (1.0 - momentum) * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.running_var[ch] + eps);
    }
  }

  Tensor out(x.shape());
  Tensor xhat(x.shape());
  auto o = out.data();
  auto xh = xhat.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        xh[base + p] = (x[base + p] - mu[ch]) * inv_std[ch];
        o[base + p] = gamma[ch] * xh[base + p] + beta[ch];
      }
    }
  }
  detail::check_finite("batch_norm", out);
  if (detail::tracks({&x, &gamma, &beta})) {
    detail::record("batch_norm", out,
                   [x, gamma, beta, xhat, inv_std, training, batch, c, hw,
                    count](std::span<const double> g) mutable {
                     std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         const std::size_t base = (b * c + ch) * hw;
                         for (std::size_t p = 0; p < hw; ++p) {
                           sum_g[ch] += g[base + p];
                           sum_gx[ch] += g[base + p] * xhat[base + p];
                         }
                       }
                     }
                     if (gamma.requires_grad()) {
                       auto d = gamma.mutable_grad();
                       for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_gx[ch];
                     }
                     if (beta.requires_grad()) {
                       auto d = beta.mutable_grad();
                       for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_g[ch];
                     }
                     if (!x.requires_grad()) return;
                     auto dx = x.mutable_grad();
                     const double n = static_cast<double>(count);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         const std::size_t base = (b * c + ch) * hw;
                         const double k = gamma[ch] * inv_std[ch];
                         for (std::size_t p = 0; p < hw; ++p) {
                           if (training) {
                             dx[base + p] += k * (g[base + p] - sum_g[ch] / n -
                                                  xhat[base + p] * sum_gx[ch] / n);
                           } else {
                             dx[base + p] += k * g[base + p];
                           }
                         }
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

// Mean softmax cross-entropy of logits [B,K] against integer labels.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::expect_rank("softmax_cross_entropy", logits, 2);
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_str(logits.shape()));
  }
  std::vector<double> probs(batch * k);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) +
                       " outside [0," + std::to_string(k) + ")");
    }
    double mx = logits[b * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[b * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[b * k + j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[b * k + j] = std::exp(logits[b * k + j] - mx) / z;
    total += -(logits[b * k + static_cast<std::size_t>(label)] - mx - std::log(z));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(batch));
  detail::check_finite("softmax_cross_entropy", out);
  if (detail::tracks({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record("softmax_cross_entropy", out,
                   [logits, probs = std::move(probs), lab = std::move(lab), batch,
                    k](std::span<const double> g) mutable {
                     auto d = logits.mutable_grad();
                     const double f = g[0] / static_cast<double>(batch);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t j = 0; j < k; ++j) {
                         const double target =
                             static_cast<std::size_t>(lab[b]) == j ? 1.0 : 0.0;
                         d[b * k + j] += f * (probs[b * k + j] - target);
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Concatenation and slicing along an axis

namespace detail {

inline std::size_t outer_extent(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < axis; ++i) n *= s[i];
  return n;
}

inline std::size_t inner_extent(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape a = p.shape(), b = shape;
    if (a.size() != b.size()) detail::mismatch("concat", b, a);
    a[axis] = b[axis] = 0;
    if (a != b) detail::mismatch("concat", shape, p.shape());
    total += p.dim(axis);
  }
  shape[axis] = total;
  const std::size_t outer = detail::outer_extent(shape, axis);
  const std::size_t inner = detail::inner_extent(shape, axis);
  Tensor out(shape);
  auto o = out.data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t len = p.dim(axis) * inner;
    for (std::size_t i = 0; i < outer; ++i) {
      for (std::size_t j = 0; j < len; ++j) o[i * total * inner + offset + j] = p[i * len + j];
    }
    offset += len;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || detail::tracks({&p});
  if (any) {
    detail::record("concat", out, [parts, outer, inner, total, axis](std::span<const double> g) mutable {
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        const std::size_t len = p.dim(axis) * inner;
        if (p.requires_grad()) {
          auto d = p.mutable_grad();
          for (std::size_t i = 0; i < outer; ++i) {
            for (std::size_t j = 0; j < len; ++j) d[i * len + j] += g[i * total * inner + offset + j];
          }
        }
        offset += len;
      }
    });
  }
  return out;
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t outer = detail::outer_extent(shape, axis);
  const std::size_t inner = detail::inner_extent(shape, axis);
  const std::size_t src_len = x.dim(axis) * inner, len = (end - begin) * inner;
  Tensor out(shape);
  auto o = out.data();
  for (std::size_t i = 0; i < outer; ++i) {
    for (std::size_t j = 0; j < len; ++j) o[i * len + j] = x[i * src_len + begin * inner + j];
  }
  if (detail::tracks({&x})) {
    detail::record("slice", out, [x, outer, len, src_len, begin, inner](std::span<const double> g) mutable {
      auto d = x.mutable_grad();
      for (std::size_t i = 0; i < outer; ++i) {
        for (std::size_t j = 0; j < len; ++j) d[i * src_len + begin * inner + j] += g[i * len + j];
      }
    });
  }
  return out;
}

}  // namespace dia::ops
