#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "chsnet/gemm.hpp"
#include "chsnet/tape.hpp"
#include "chsnet/tensor.hpp"

/// Differentiable primitives. Every op takes an optional tape; passing
/// nullptr (or operands that do not require gradients) runs forward only.
namespace chs::ops {

/// Output extent of a strided, padded window: floor((in + 2p - f) / s) + 1.
inline std::size_t conv_out_extent(std::size_t in, std::size_t f, std::size_t pad, std::size_t stride) {
  if (stride == 0) throw ConfigError("stride must be positive");
  if (f == 0) throw ConfigError("kernel size must be positive");
  if (in + 2 * pad < f) {
    throw ConfigError("non-positive output extent: in=" + std::to_string(in) + " f=" + std::to_string(f) +
                      " pad=" + std::to_string(pad));
  }
  return (in + 2 * pad - f) / stride + 1;
}

namespace detail {

template <typename T>
TensorPtr<T> output_like(GradTape<T>* tape, Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
  auto out = make_tensor<T>(std::move(shape));
  if (needs_grad(tape, inputs)) out->set_requires_grad(true);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

/// Geometry of a strided, padded f x f window over a channels-last batch.
struct ConvGeometry {
  Dims4 in, out;
  std::size_t f = 1, stride = 1, pad = 0;

  bool is_pointwise() const { return f == 1 && stride == 1 && pad == 0; }
  std::size_t patch() const { return f * f * in.c; }
};

/// Unrolls input patches into rows of a (pixels, f*f*d) matrix whose column
/// order (kx, ky, c) matches the (f, f, d, r) kernel layout.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, std::vector<T>& col) {
  const std::size_t d = g.in.c, k = g.patch();
  col.assign(g.out.n * g.out.w * g.out.h * k, T(0));
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  T* row = col.data();
  for (std::size_t b = 0; b < g.out.n; ++b)
    for (std::size_t ox = 0; ox < g.out.w; ++ox)
      for (std::size_t oy = 0; oy < g.out.h; ++oy, row += k)
        for (std::size_t kx = 0; kx < g.f; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in.w)) continue;
          for (std::size_t ky = 0; ky < g.f; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) continue;
            const T* src = x + g.in.index(b, static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), 0);
            std::copy(src, src + d, row + (kx * g.f + ky) * d);
          }
        }
}

/// Adjoint of im2col: scatters-adds patch rows back onto the input grid.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* gx) {
  const std::size_t d = g.in.c, k = g.patch();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const T* row = col;
  for (std::size_t b = 0; b < g.out.n; ++b)
    for (std::size_t ox = 0; ox < g.out.w; ++ox)
      for (std::size_t oy = 0; oy < g.out.h; ++oy, row += k)
        for (std::size_t kx = 0; kx < g.f; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in.w)) continue;
          for (std::size_t ky = 0; ky < g.f; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) continue;
            T* dst = gx + g.in.index(b, static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), 0);
            const T* src = row + (kx * g.f + ky) * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
          }
        }
}

}  // namespace detail

/// Standard 2D convolution (cross-correlation) with symmetric zero padding.
/// weight: (f, f, d, r); bias: (r) or null.
template <typename T>
TensorPtr<T> conv2d(GradTape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias, std::size_t stride = 1, std::size_t pad = 0) {
  const Dims4 in = dims4(*x, "conv2d input");
  if (weight->rank() != 4 || weight->dim(0) != weight->dim(1)) {
    throw DimensionError("conv2d kernel must be (f,f,d,r), got " + shape_str(weight->shape()));
  }
  const std::size_t f = weight->dim(0);
  const std::size_t r = weight->dim(3);
  if (weight->dim(2) != in.c) {
    throw DimensionError("conv2d kernel depth " + std::to_string(weight->dim(2)) + " != input depth " +
                         std::to_string(in.c));
  }
  if (bias && bias->size() != r) throw DimensionError("conv2d bias length must equal filter count");
  const Dims4 od{in.n, conv_out_extent(in.w, f, pad, stride), conv_out_extent(in.h, f, pad, stride), r};
  auto out = detail::output_like<T>(tape, od.shape(), {x.get(), weight.get(), bias.get()});
  const detail::ConvGeometry geo{in, od, f, stride, pad};
  const std::size_t rows = od.pixels(), k = geo.patch();

  T* o = out->data().data();
  if (bias) {
    const T* bd = bias->data().data();
    for (std::size_t p = 0; p < rows; ++p) std::copy(bd, bd + r, o + p * r);
  }
  std::vector<T> col;
  const T* a = x->data().data();
  if (!geo.is_pointwise()) {
    detail::im2col(geo, a, col);
    a = col.data();
  }
  blas::gemm<T>(false, false, rows, r, k, T(1), a, k, weight->data().data(), r, bias ? T(1) : T(0), o, r);

  if (out->requires_grad()) {
    tape->record("conv2d", {x, weight, bias}, out,
                 [xp = x.get(), wp = weight.get(), bp = bias.get(), op = out.get(), geo, rows, k, r] {
                   const T* go = op->grad().data();
                   if (bp && bp->requires_grad()) {
                     T* gb = bp->grad().data();
                     for (std::size_t p = 0; p < rows; ++p)
                       for (std::size_t q = 0; q < r; ++q) gb[q] += go[p * r + q];
                   }
                   const bool gx = xp->requires_grad(), gw = wp->requires_grad();
                   if (!gx && !gw) return;
                   std::vector<T> col;
                   if (gw) {
                     const T* a = xp->data().data();
                     if (!geo.is_pointwise()) {
                       detail::im2col(geo, a, col);
                       a = col.data();
                     }
                     blas::gemm<T>(true, false, k, r, rows, T(1), a, k, go, r, T(1), wp->grad().data(), r);
                   }
                   if (gx) {
                     if (geo.is_pointwise()) {
                       blas::gemm<T>(false, true, rows, k, r, T(1), go, r, wp->data().data(), r, T(1),
                                     xp->grad().data(), k);
                     } else {
                       col.resize(rows * k);
                       blas::gemm<T>(false, true, rows, k, r, T(1), go, r, wp->data().data(), r, T(0), col.data(), k);
                       detail::col2im(geo, col.data(), xp->grad().data());
                     }
                   }
                 });
  }
  return out;
}

/// One f x f filter per input channel, no channel mixing. weight: (f, f, d).
template <typename T>
TensorPtr<T> depthwise_conv2d(GradTape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                              std::size_t stride = 1, std::size_t pad = 0) {
  const Dims4 in = dims4(*x, "depthwise input");
  if (weight->rank() != 3 || weight->dim(0) != weight->dim(1)) {
    throw DimensionError("depthwise kernel must be (f,f,d), got " + shape_str(weight->shape()));
  }
  if (weight->dim(2) != in.c) throw DimensionError("depthwise kernel depth must equal input depth");
  const std::size_t f = weight->dim(0);
  const Dims4 od{in.n, conv_out_extent(in.w, f, pad, stride), conv_out_extent(in.h, f, pad, stride), in.c};
  auto out = detail::output_like<T>(tape, od.shape(), {x.get(), weight.get()});
  const std::size_t d = in.c;
  const auto spx = static_cast<std::ptrdiff_t>(pad);

  // Visits every in-image (output row, input row, kernel tap) with the range
  // of output columns whose input column lies inside the image.
  auto for_each_row = [=](auto&& fn) {
    const auto ih = static_cast<std::ptrdiff_t>(in.h);
    for (std::size_t b = 0; b < od.n; ++b)
      for (std::size_t ox = 0; ox < od.w; ++ox)
        for (std::size_t kx = 0; kx < f; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - spx;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
          for (std::size_t ky = 0; ky < f; ++ky) {
            // oy * stride + ky - pad in [0, ih)
            const auto first = static_cast<std::ptrdiff_t>(ky) - spx;
            std::ptrdiff_t lo = first >= 0 ? 0 : (-first + static_cast<std::ptrdiff_t>(stride) - 1) / static_cast<std::ptrdiff_t>(stride);
            std::ptrdiff_t hi = first >= ih ? 0 : (ih - 1 - first) / static_cast<std::ptrdiff_t>(stride) + 1;
            hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(od.h));
            if (lo >= hi) continue;
            fn(od.index(b, ox, 0, 0), in.index(b, static_cast<std::size_t>(ix), 0, 0), (kx * f + ky) * d,
               static_cast<std::size_t>(lo), static_cast<std::size_t>(hi), first);
          }
        }
  };

  const T* xd = x->data().data();
  const T* wd = weight->data().data();
  T* o = out->data().data();
  for_each_row([&](std::size_t orow, std::size_t irow, std::size_t wi, std::size_t lo, std::size_t hi,
                   std::ptrdiff_t first) {
    const T* __restrict__ wk = wd + wi;
    for (std::size_t oy = lo; oy < hi; ++oy) {
      T* __restrict__ op = o + orow + oy * d;
      const T* __restrict__ xi = xd + irow + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * stride) + first) * d;
      for (std::size_t c = 0; c < d; ++c) op[c] += xi[c] * wk[c];
    }
  });

  if (out->requires_grad()) {
    tape->record("depthwise_conv2d", {x, weight}, out,
                 [xp = x.get(), wp = weight.get(), op = out.get(), for_each_row, d, stride] {
                   const T* go = op->grad().data();
                   const T* xd = xp->data().data();
                   const T* wd = wp->data().data();
                   T* gx = xp->requires_grad() ? xp->grad().data() : nullptr;
                   T* gw = wp->requires_grad() ? wp->grad().data() : nullptr;
                   std::vector<T> acc(d);
                   for_each_row([&](std::size_t orow, std::size_t irow, std::size_t wi, std::size_t lo,
                                    std::size_t hi, std::ptrdiff_t first) {
                     const T* __restrict__ wk = wd + wi;
                     std::fill(acc.begin(), acc.end(), T(0));
                     T* __restrict__ ac = acc.data();
                     for (std::size_t oy = lo; oy < hi; ++oy) {
                       const T* __restrict__ g = go + orow + oy * d;
                       const std::size_t ii =
                           irow + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * stride) + first) * d;
                       if (gx) {
                         T* __restrict__ gxi = gx + ii;
                         for (std::size_t c = 0; c < d; ++c) gxi[c] += g[c] * wk[c];
                       }
                       if (gw) {
                         const T* __restrict__ xi = xd + ii;
                         for (std::size_t c = 0; c < d; ++c) ac[c] += g[c] * xi[c];
                       }
                     }
                     if (gw)
                       for (std::size_t c = 0; c < d; ++c) gw[wi + c] += ac[c];
                   });
                 });
  }
  return out;
}

/// Transposed convolution: the adjoint of conv2d(stride s, pad (f-s)/2) with
/// the same kernel. Output extents are exactly s * input extents.
///
/// weight is stored as the conv2d kernel it is the adjoint of, i.e.
/// (f, f, out_depth, in_depth); bias: (out_depth) or null.
template <typename T>
TensorPtr<T> transposed_conv2d(GradTape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                               const TensorPtr<T>& bias, std::size_t stride) {
  if (stride != 1 && stride != 2) {
    throw ConfigError("transposed_conv2d supports stride 1 or 2, got " + std::to_string(stride));
  }
  const Dims4 in = dims4(*x, "transposed_conv2d input");
  if (weight->rank() != 4 || weight->dim(0) != weight->dim(1)) {
    throw DimensionError("transposed_conv2d kernel must be (f,f,out,in), got " + shape_str(weight->shape()));
  }
  const std::size_t f = weight->dim(0);
  if (f < stride) throw ConfigError("transposed_conv2d kernel smaller than stride");
  if (weight->dim(3) != in.c) throw DimensionError("transposed_conv2d kernel in-depth != input depth");
  const std::size_t r = weight->dim(2);
  if (bias && bias->size() != r) throw DimensionError("transposed_conv2d bias length != out depth");
  const Dims4 od{in.n, in.w * stride, in.h * stride, r};
  auto out = detail::output_like<T>(tape, od.shape(), {x.get(), weight.get(), bias.get()});
  const auto off = static_cast<std::ptrdiff_t>((f - stride) / 2);
  const std::size_t d = in.c;

  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < in.n; ++b)
      for (std::size_t ix = 0; ix < in.w; ++ix)
        for (std::size_t iy = 0; iy < in.h; ++iy) {
          const std::size_t ii = in.index(b, ix, iy, 0);
          for (std::size_t kx = 0; kx < f; ++kx) {
            const auto ox = static_cast<std::ptrdiff_t>(ix * stride + kx) - off;
            if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(od.w)) continue;
            for (std::size_t ky = 0; ky < f; ++ky) {
              const auto oy = static_cast<std::ptrdiff_t>(iy * stride + ky) - off;
              if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(od.h)) continue;
              fn(od.index(b, static_cast<std::size_t>(ox), static_cast<std::size_t>(oy), 0), ii,
                 (kx * f + ky) * r * d);
            }
          }
        }
  };

  const T* xd = x->data().data();
  const T* wd = weight->data().data();
  T* o = out->data().data();
  if (bias) {
    const T* bd = bias->data().data();
    for (std::size_t p = 0; p < od.pixels(); ++p) std::copy(bd, bd + r, o + p * r);
  }
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
    const T* __restrict__ xi = xd + ii;
    for (std::size_t q = 0; q < r; ++q) {
      const T* __restrict__ wr = wd + wi + q * d;
      T acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += xi[c] * wr[c];
      o[oi + q] += acc;
    }
  });

  if (out->requires_grad()) {
    tape->record("transposed_conv2d", {x, weight, bias}, out,
                 [xp = x.get(), wp = weight.get(), bp = bias.get(), op = out.get(), for_each_tap, d, r, od] {
                   const T* go = op->grad().data();
                   const T* xd = xp->data().data();
                   const T* wd = wp->data().data();
                   T* gx = xp->requires_grad() ? xp->grad().data() : nullptr;
                   T* gw = wp->requires_grad() ? wp->grad().data() : nullptr;
                   if (bp && bp->requires_grad()) {
                     T* gb = bp->grad().data();
                     for (std::size_t p = 0; p < od.pixels(); ++p)
                       for (std::size_t q = 0; q < r; ++q) gb[q] += go[p * r + q];
                   }
                   if (!gx && !gw) return;
                   for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
                     for (std::size_t q = 0; q < r; ++q) {
                       const T g = go[oi + q];
                       const T* __restrict__ wr = wd + wi + q * d;
                       if (gx) {
                         T* __restrict__ gxi = gx + ii;
                         for (std::size_t c = 0; c < d; ++c) gxi[c] += g * wr[c];
                       }
                       if (gw) {
                         T* __restrict__ gwr = gw + wi + q * d;
                         const T* __restrict__ xi = xd + ii;
                         for (std::size_t c = 0; c < d; ++c) gwr[c] += g * xi[c];
                       }
                     }
                   });
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

enum class BnMode { train, infer };

struct BnOptions {
  double eps = 1e-5;
  double momentum = 0.9;
};

/// Per-channel batch normalization over (batch, width, height).
///
/// In train mode the batch statistics normalize the input and the running
/// statistics move as running = momentum * running + (1 - momentum) * batch.
template <typename T>
TensorPtr<T> batch_norm(GradTape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                        BnMode mode, BnOptions opt = {}) {
  const Dims4 in = dims4(*x, "batch_norm input");
  const std::size_t d = in.c;
  if (gamma->size() != d || beta->size() != d || running_mean.size() != d || running_var.size() != d) {
    throw DimensionError("batch_norm parameter count must equal input depth " + std::to_string(d));
  }
  const std::size_t m = in.pixels();
  auto out = detail::output_like<T>(tape, x->shape(), {x.get(), gamma.get(), beta.get()});
  const T* xd = x->data().data();
  T* o = out->data().data();
  const T* g = gamma->data().data();
  const T* bt = beta->data().data();

  std::vector<T> mean(d, T(0)), inv_std(d, T(0));
  if (mode == BnMode::train) {
    std::vector<double> acc(d, 0.0), acc2(d, 0.0);
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t c = 0; c < d; ++c) acc[c] += xd[p * d + c];
    for (std::size_t c = 0; c < d; ++c) mean[c] = static_cast<T>(acc[c] / static_cast<double>(m));
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t c = 0; c < d; ++c) {
        const double dv = static_cast<double>(xd[p * d + c]) - mean[c];
        acc2[c] += dv * dv;
      }
    for (std::size_t c = 0; c < d; ++c) {
      const double var = acc2[c] / static_cast<double>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      running_mean[c] = static_cast<T>(opt.momentum * running_mean[c] + (1.0 - opt.momentum) * mean[c]);
      running_var[c] = static_cast<T>(opt.momentum * running_var[c] + (1.0 - opt.momentum) * var);
    }
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + opt.eps));
    }
  }

  std::vector<T> xhat(x->size());
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = p * d + c;
      xhat[i] = (xd[i] - mean[c]) * inv_std[c];
      o[i] = g[c] * xhat[i] + bt[c];
    }

  if (out->requires_grad()) {
    tape->record("batch_norm", {x, gamma, beta}, out,
                 [xp = x.get(), gp = gamma.get(), bp = beta.get(), op = out.get(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), mode, m, d] {
                   const T* go = op->grad().data();
                   const T* g = gp->data().data();
                   std::vector<T> sum_dy(d, T(0)), sum_dy_xhat(d, T(0));
                   for (std::size_t p = 0; p < m; ++p)
                     for (std::size_t c = 0; c < d; ++c) {
                       sum_dy[c] += go[p * d + c];
                       sum_dy_xhat[c] += go[p * d + c] * xhat[p * d + c];
                     }
                   if (gp->requires_grad())
                     for (std::size_t c = 0; c < d; ++c) gp->grad()[c] += sum_dy_xhat[c];
                   if (bp->requires_grad())
                     for (std::size_t c = 0; c < d; ++c) bp->grad()[c] += sum_dy[c];
                   if (!xp->requires_grad()) return;
                   T* gx = xp->grad().data();
                   if (mode == BnMode::infer) {
                     for (std::size_t p = 0; p < m; ++p)
                       for (std::size_t c = 0; c < d; ++c) gx[p * d + c] += go[p * d + c] * g[c] * inv_std[c];
                     return;
                   }
                   const T inv_m = T(1) / static_cast<T>(m);
                   for (std::size_t p = 0; p < m; ++p)
                     for (std::size_t c = 0; c < d; ++c) {
                       const std::size_t i = p * d + c;
                       gx[i] += g[c] * inv_std[c] * (go[i] - inv_m * sum_dy[c] - xhat[i] * inv_m * sum_dy_xhat[c]);
                     }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> relu(GradTape<T>* tape, const TensorPtr<T>& x) {
  auto out = detail::output_like<T>(tape, x->shape(), {x.get()});
  const T* xd = x->data().data();
  T* o = out->data().data();
  for (std::size_t i = 0; i < x->size(); ++i) o[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (out->requires_grad()) {
    tape->record("relu", {x}, out, [xp = x.get(), op = out.get()] {
      const T* xd = xp->data().data();
      const T* go = op->grad().data();
      T* gx = xp->grad().data();
      for (std::size_t i = 0; i < xp->size(); ++i)
        gx[i] += xd[i] > T(0) ? go[i] : T(0);
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sigmoid(GradTape<T>* tape, const TensorPtr<T>& x) {
  auto out = detail::output_like<T>(tape, x->shape(), {x.get()});
  const T* xd = x->data().data();
  T* o = out->data().data();
  for (std::size_t i = 0; i < x->size(); ++i) {
    // Split by sign so exp() never overflows.
    if (xd[i] >= T(0)) {
      o[i] = T(1) / (T(1) + std::exp(-xd[i]));
    } else {
      const T e = std::exp(xd[i]);
      o[i] = e / (T(1) + e);
    }
  }
  if (out->requires_grad()) {
    tape->record("sigmoid", {x}, out, [xp = x.get(), op = out.get()] {
      const T* y = op->data().data();
      const T* go = op->grad().data();
      T* gx = xp->grad().data();
      for (std::size_t i = 0; i < xp->size(); ++i) gx[i] += go[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

enum class Activation { relu, sigmoid };

template <typename T>
TensorPtr<T> activation(GradTape<T>* tape, const TensorPtr<T>& x, Activation kind) {
  return kind == Activation::relu ? relu(tape, x) : sigmoid(tape, x);
}

template <typename T>
TensorPtr<T> add(GradTape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape() != b->shape()) {
    throw DimensionError("add: shapes differ " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  }
  auto out = detail::output_like<T>(tape, a->shape(), {a.get(), b.get()});
  for (std::size_t i = 0; i < a->size(); ++i) (*out)[i] = (*a)[i] + (*b)[i];
  if (out->requires_grad()) {
    tape->record("add", {a, b}, out, [ap = a.get(), bp = b.get(), op = out.get()] {
      const auto go = op->grad();
      for (auto* t : {ap, bp}) {
        if (!t->requires_grad()) continue;
        auto g = t->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

/// Elementwise product of equally shaped tensors.
template <typename T>
TensorPtr<T> mul(GradTape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape() != b->shape()) {
    throw DimensionError("mul: shapes differ " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  }
  auto out = detail::output_like<T>(tape, a->shape(), {a.get(), b.get()});
  for (std::size_t i = 0; i < a->size(); ++i) (*out)[i] = (*a)[i] * (*b)[i];
  if (out->requires_grad()) {
    tape->record("mul", {a, b}, out, [ap = a.get(), bp = b.get(), op = out.get()] {
      const auto go = op->grad();
      if (ap->requires_grad())
        for (std::size_t i = 0; i < go.size(); ++i) ap->grad()[i] += go[i] * (*bp)[i];
      if (bp->requires_grad())
        for (std::size_t i = 0; i < go.size(); ++i) bp->grad()[i] += go[i] * (*ap)[i];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(GradTape<T>* tape, const TensorPtr<T>& x, T s) {
  auto out = detail::output_like<T>(tape, x->shape(), {x.get()});
  for (std::size_t i = 0; i < x->size(); ++i) (*out)[i] = s * (*x)[i];
  if (out->requires_grad()) {
    tape->record("scale", {x}, out, [xp = x.get(), op = out.get(), s] {
      for (std::size_t i = 0; i < xp->size(); ++i) xp->grad()[i] += s * op->grad()[i];
    });
  }
  return out;
}

/// x (n,w,h,c) times a per-channel gate g (n,1,1,c).
template <typename T>
TensorPtr<T> mul_channels(GradTape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& g) {
  const Dims4 xd = dims4(*x);
  const Dims4 gd = dims4(*g, "channel gate");
  if (gd.n != xd.n || gd.w != 1 || gd.h != 1 || gd.c != xd.c) {
    throw DimensionError("mul_channels: gate " + shape_str(g->shape()) + " incompatible with " +
                         shape_str(x->shape()));
  }
  auto out = detail::output_like<T>(tape, x->shape(), {x.get(), g.get()});
  const std::size_t plane = xd.w * xd.h;
  for (std::size_t b = 0; b < xd.n; ++b)
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < xd.c; ++c) {
        const std::size_t i = (b * plane + p) * xd.c + c;
        (*out)[i] = (*x)[i] * (*g)[b * xd.c + c];
      }
  if (out->requires_grad()) {
    tape->record("mul_channels", {x, g}, out, [xp = x.get(), gp = g.get(), op = out.get(), xd, plane] {
      const auto go = op->grad();
      for (std::size_t b = 0; b < xd.n; ++b)
        for (std::size_t p = 0; p < plane; ++p)
          for (std::size_t c = 0; c < xd.c; ++c) {
            const std::size_t i = (b * plane + p) * xd.c + c;
            if (xp->requires_grad()) xp->grad()[i] += go[i] * (*gp)[b * xd.c + c];
            if (gp->requires_grad()) gp->grad()[b * xd.c + c] += go[i] * (*xp)[i];
          }
    });
  }
  return out;
}

/// x (n,w,h,c) times a per-pixel gate g (n,w,h,1).
template <typename T>
TensorPtr<T> mul_pixels(GradTape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& g) {
  const Dims4 xd = dims4(*x);
  const Dims4 gd = dims4(*g, "pixel gate");
  if (gd.n != xd.n || gd.w != xd.w || gd.h != xd.h || gd.c != 1) {
    throw DimensionError("mul_pixels: gate " + shape_str(g->shape()) + " incompatible with " +
                         shape_str(x->shape()));
  }
  auto out = detail::output_like<T>(tape, x->shape(), {x.get(), g.get()});
  const std::size_t m = xd.pixels();
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t c = 0; c < xd.c; ++c) (*out)[p * xd.c + c] = (*x)[p * xd.c + c] * (*g)[p];
  if (out->requires_grad()) {
    tape->record("mul_pixels", {x, g}, out, [xp = x.get(), gp = g.get(), op = out.get(), m, c = xd.c] {
      const auto go = op->grad();
      for (std::size_t p = 0; p < m; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t i = p * c + ch;
          if (xp->requires_grad()) xp->grad()[i] += go[i] * (*gp)[p];
          if (gp->requires_grad()) gp->grad()[p] += go[i] * (*xp)[i];
        }
    });
  }
  return out;
}

/// Concatenate feature maps along depth.
template <typename T>
TensorPtr<T> concat_channels(GradTape<T>* tape, const std::vector<TensorPtr<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_channels needs at least one input");
  const Dims4 first = dims4(*parts.front());
  std::size_t total = 0;
  bool grad = false;
  for (const auto& p : parts) {
    const Dims4 pd = dims4(*p);
    if (pd.n != first.n || pd.w != first.w || pd.h != first.h) {
      throw DimensionError("concat_channels: spatial extents differ " + shape_str(p->shape()) + " vs " +
                           shape_str(parts.front()->shape()));
    }
    total += pd.c;
    grad = grad || p->requires_grad();
  }
  auto out = make_tensor<T>({first.n, first.w, first.h, total});
  if (tape && grad) out->set_requires_grad(true);
  const std::size_t m = first.pixels();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t c = p->dim(3);
    offsets.push_back(offset);
    for (std::size_t px = 0; px < m; ++px)
      std::copy_n(p->data().data() + px * c, c, out->data().data() + px * total + offset);
    offset += c;
  }
  if (out->requires_grad()) {
    std::vector<Tensor<T>*> raw;
    for (const auto& p : parts) raw.push_back(p.get());
    tape->record("concat_channels", parts, out, [raw, offsets, op = out.get(), m, total] {
      const T* go = op->grad().data();
      for (std::size_t k = 0; k < raw.size(); ++k) {
        if (!raw[k]->requires_grad()) continue;
        const std::size_t c = raw[k]->dim(3);
        T* g = raw[k]->grad().data();
        for (std::size_t px = 0; px < m; ++px)
          for (std::size_t ch = 0; ch < c; ++ch) g[px * c + ch] += go[px * total + offsets[k] + ch];
      }
    });
  }
  return out;
}

/// Nearest-neighbour spatial upsampling by an integer factor.
template <typename T>
TensorPtr<T> upsample_nearest(GradTape<T>* tape, const TensorPtr<T>& x, std::size_t factor) {
  if (factor == 0) throw ConfigError("upsample factor must be positive");
  const Dims4 in = dims4(*x);
  const Dims4 od{in.n, in.w * factor, in.h * factor, in.c};
  auto out = detail::output_like<T>(tape, od.shape(), {x.get()});
  for (std::size_t b = 0; b < od.n; ++b)
    for (std::size_t ox = 0; ox < od.w; ++ox)
      for (std::size_t oy = 0; oy < od.h; ++oy)
        for (std::size_t c = 0; c < od.c; ++c)
          (*out)[od.index(b, ox, oy, c)] = (*x)[in.index(b, ox / factor, oy / factor, c)];
  if (out->requires_grad()) {
    tape->record("upsample_nearest", {x}, out, [xp = x.get(), op = out.get(), in, od, factor] {
      for (std::size_t b = 0; b < od.n; ++b)
        for (std::size_t ox = 0; ox < od.w; ++ox)
          for (std::size_t oy = 0; oy < od.h; ++oy)
            for (std::size_t c = 0; c < od.c; ++c)
              xp->grad()[in.index(b, ox / factor, oy / factor, c)] += op->grad()[od.index(b, ox, oy, c)];
    });
  }
  return out;
}

/// Inverted dropout: survivors are scaled by 1/(1-rate). rate 0 is identity.
template <typename T, typename Rng>
TensorPtr<T> dropout(GradTape<T>* tape, const TensorPtr<T>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x->size());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  auto out = detail::output_like<T>(tape, x->shape(), {x.get()});
  for (std::size_t i = 0; i < x->size(); ++i) (*out)[i] = (*x)[i] * mask[i];
  if (out->requires_grad()) {
    tape->record("dropout", {x}, out, [xp = x.get(), op = out.get(), mask = std::move(mask)] {
      for (std::size_t i = 0; i < mask.size(); ++i) xp->grad()[i] += op->grad()[i] * mask[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> sum(GradTape<T>* tape, const TensorPtr<T>& x) {
  auto out = detail::output_like<T>(tape, {1}, {x.get()});
  T acc = 0;
  for (auto v : x->data()) acc += v;
  (*out)[0] = acc;
  if (out->requires_grad()) {
    tape->record("sum", {x}, out, [xp = x.get(), op = out.get()] {
      const T g = op->grad()[0];
      for (auto& v : xp->grad()) v += g;
    });
  }
  return out;
}

/// Inner product with a constant weight tensor; the usual grad-check probe.
template <typename T>
TensorPtr<T> weighted_sum(GradTape<T>* tape, const TensorPtr<T>& x, const Tensor<T>& w) {
  if (w.size() != x->size()) throw DimensionError("weighted_sum: weight length mismatch");
  auto out = detail::output_like<T>(tape, {1}, {x.get()});
  T acc = 0;
  for (std::size_t i = 0; i < x->size(); ++i) acc += (*x)[i] * w[i];
  (*out)[0] = acc;
  if (out->requires_grad()) {
    tape->record("weighted_sum", {x}, out, [xp = x.get(), op = out.get(), w] {
      const T g = op->grad()[0];
      for (std::size_t i = 0; i < xp->size(); ++i) xp->grad()[i] += g * w[i];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> square_sum_half(GradTape<T>* tape, const TensorPtr<T>& x) {
  auto out = detail::output_like<T>(tape, {1}, {x.get()});
  T acc = 0;
  for (auto v : x->data()) acc += v * v;
  (*out)[0] = acc / T(2);
  if (out->requires_grad()) {
    tape->record("square_sum_half", {x}, out, [xp = x.get(), op = out.get()] {
      const T g = op->grad()[0];
      for (std::size_t i = 0; i < xp->size(); ++i) xp->grad()[i] += g * (*xp)[i];
    });
  }
  return out;
}

}  // namespace chs::ops
