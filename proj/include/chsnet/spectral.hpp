#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <map>
#include <utility>
#include <numbers>
#include <tuple>
#include <vector>

#include "chsnet/ops.hpp"

namespace chs {

/// Complex feature map with the same (n, w, h, d) layout as Tensor.
template <typename T = double>
struct ComplexPlane {
  Shape shape;
  std::vector<T> real;
  std::vector<T> imag;

  ComplexPlane() = default;
  explicit ComplexPlane(Shape s) : shape(std::move(s)), real(shape_size(shape)), imag(shape_size(shape)) {}

  std::size_t size() const noexcept { return real.size(); }
  std::complex<T> at(std::size_t i) const { return {real[i], imag[i]}; }
};

namespace fft {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// exp(sign * 2 pi i k / n) for k < n, cached per (n, direction).
template <typename T>
const std::vector<std::complex<T>>& twiddles(std::size_t n, bool inverse) {
  thread_local std::map<std::pair<std::size_t, bool>, std::vector<std::complex<T>>> cache;
  auto& tw = cache[{n, inverse}];
  if (tw.empty()) {
    const double sign = inverse ? 1.0 : -1.0;
    tw.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      tw[k] = {static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang))};
    }
  }
  return tw;
}

/// In-place unitary 1D DFT (1/sqrt(n) both directions). Radix-2 for powers of
/// two, a direct O(n^2) sum otherwise.
template <typename T>
void dft1d(std::complex<T>* a, std::size_t n, bool inverse) {
  if (n == 1) return;
  const auto& tw = twiddles<T>(n, inverse);
  const T norm = static_cast<T>(1.0 / std::sqrt(static_cast<double>(n)));
  if (is_pow2(n)) {
    for (std::size_t i = 1, j = 0; i < n; ++i) {
      std::size_t bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t half = len / 2, step = n / len;
      for (std::size_t i = 0; i < n; i += len)
        for (std::size_t k = 0; k < half; ++k) {
          const std::complex<T> u = a[i + k];
          const std::complex<T> b = a[i + k + half], t = tw[k * step];
          const std::complex<T> v(b.real() * t.real() - b.imag() * t.imag(), b.real() * t.imag() + b.imag() * t.real());
          a[i + k] = u + v;
          a[i + k + half] = u - v;
        }
    }
    for (std::size_t i = 0; i < n; ++i) a[i] *= norm;
    return;
  }
  std::vector<std::complex<T>> out(n);
  for (std::size_t m = 0; m < n; ++m) {
    std::complex<double> acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += std::complex<double>(a[j]) * std::complex<double>(tw[(j * m) % n]);
    out[m] = std::complex<T>(acc) * norm;
  }
  std::copy(out.begin(), out.end(), a);
}

/// Unitary 2D DFT of a w x h plane stored row-major (x outer, y inner).
template <typename T>
void dft2d(std::vector<std::complex<T>>& plane, std::size_t w, std::size_t h, bool inverse) {
  for (std::size_t x = 0; x < w; ++x) dft1d(plane.data() + x * h, h, inverse);
  std::vector<std::complex<T>> col(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) col[x] = plane[x * h + y];
    dft1d(col.data(), w, inverse);
    for (std::size_t x = 0; x < w; ++x) plane[x * h + y] = col[x];
  }
}

/// Signed frequency of unshifted DFT bin k on an n-point grid:
/// bins 0..ceil(n/2)-1 are non-negative, the rest negative.
inline std::ptrdiff_t signed_freq(std::size_t k, std::size_t n) {
  return k < (n + 1) / 2 ? static_cast<std::ptrdiff_t>(k) : static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(n);
}

/// Bin of signed frequency f on an n-point grid.
inline std::size_t bin_of(std::ptrdiff_t f, std::size_t n) {
  const auto sn = static_cast<std::ptrdiff_t>(n);
  return static_cast<std::size_t>(((f % sn) + sn) % sn);
}

/// Frequencies kept by a centered crop to m bins: [-floor(m/2), ceil(m/2) - 1].
inline bool in_crop(std::ptrdiff_t f, std::size_t m) {
  return f >= -static_cast<std::ptrdiff_t>(m / 2) && f <= static_cast<std::ptrdiff_t>((m + 1) / 2) - 1;
}

}  // namespace fft

/// Per-channel unitary 2D DFT, center-shifted so DC sits at (w/2, h/2).
template <typename T>
ComplexPlane<T> dft2(const Tensor<T>& input) {
  const Dims4 d = dims4(input, "dft2 input");
  ComplexPlane<T> outp(input.shape());
  std::vector<std::complex<T>> plane(d.w * d.h);
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      for (std::size_t x = 0; x < d.w; ++x)
        for (std::size_t y = 0; y < d.h; ++y) plane[x * d.h + y] = input[d.index(b, x, y, c)];
      fft::dft2d(plane, d.w, d.h, false);
      for (std::size_t kx = 0; kx < d.w; ++kx)
        for (std::size_t ky = 0; ky < d.h; ++ky) {
          const std::size_t sx = (kx + d.w / 2) % d.w;
          const std::size_t sy = (ky + d.h / 2) % d.h;
          const std::size_t i = d.index(b, sx, sy, c);
          outp.real[i] = plane[kx * d.h + ky].real();
          outp.imag[i] = plane[kx * d.h + ky].imag();
        }
    }
  return outp;
}

/// Inverse of dft2: undo the center shift, then apply the conjugate transform.
template <typename T>
ComplexPlane<T> idft2(const ComplexPlane<T>& spectrum) {
  const Dims4 d{spectrum.shape.at(0), spectrum.shape.at(1), spectrum.shape.at(2), spectrum.shape.at(3)};
  ComplexPlane<T> outp(spectrum.shape);
  std::vector<std::complex<T>> plane(d.w * d.h);
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      for (std::size_t kx = 0; kx < d.w; ++kx)
        for (std::size_t ky = 0; ky < d.h; ++ky) {
          const std::size_t i = d.index(b, (kx + d.w / 2) % d.w, (ky + d.h / 2) % d.h, c);
          plane[kx * d.h + ky] = {spectrum.real[i], spectrum.imag[i]};
        }
      fft::dft2d(plane, d.w, d.h, true);
      for (std::size_t x = 0; x < d.w; ++x)
        for (std::size_t y = 0; y < d.h; ++y) {
          const std::size_t i = d.index(b, x, y, c);
          outp.real[i] = plane[x * d.h + y].real();
          outp.imag[i] = plane[x * d.h + y].imag();
        }
    }
  return outp;
}

namespace detail {

/// Low-pass resampling of one real plane: transform on the in grid, keep the
/// centered crop_w x crop_h frequencies, place them on the out grid, force
/// conjugate symmetry, invert and scale. Returns the largest imaginary
/// residue seen after inversion.
template <typename T>
double resample_plane(const T* src, std::size_t in_w, std::size_t in_h, std::size_t crop_w, std::size_t crop_h,
                      T* dst, std::size_t out_w, std::size_t out_h, T scale, std::size_t stride_in,
                      std::size_t stride_out, std::vector<std::complex<T>>& buf_in,
                      std::vector<std::complex<T>>& buf_out) {
  buf_in.assign(in_w * in_h, {});
  for (std::size_t x = 0; x < in_w; ++x)
    for (std::size_t y = 0; y < in_h; ++y) buf_in[x * in_h + y] = src[(x * in_h + y) * stride_in];
  fft::dft2d(buf_in, in_w, in_h, false);

  buf_out.assign(out_w * out_h, {});
  for (std::size_t kx = 0; kx < in_w; ++kx) {
    const auto fx = fft::signed_freq(kx, in_w);
    if (!fft::in_crop(fx, crop_w)) continue;
    const std::size_t ox = fft::bin_of(fx, out_w);
    for (std::size_t ky = 0; ky < in_h; ++ky) {
      const auto fy = fft::signed_freq(ky, in_h);
      if (!fft::in_crop(fy, crop_h)) continue;
      buf_out[ox * out_h + fft::bin_of(fy, out_h)] = buf_in[kx * in_h + ky];
    }
  }

  // A centered crop of even size keeps -m/2 but drops +m/2, so the spectrum
  // is no longer conjugate-symmetric. Average every bin with the conjugate of
  // its mirror so the inverse is real.
  for (std::size_t kx = 0; kx < out_w; ++kx)
    for (std::size_t ky = 0; ky < out_h; ++ky) {
      const std::size_t mx = (out_w - kx) % out_w;
      const std::size_t my = (out_h - ky) % out_h;
      const std::size_t i = kx * out_h + ky;
      const std::size_t j = mx * out_h + my;
      if (j < i) continue;
      const std::complex<T> a = buf_out[i];
      const std::complex<T> b = buf_out[j];
      buf_out[i] = (a + std::conj(b)) / T(2);
      buf_out[j] = std::conj(buf_out[i]);
    }

  fft::dft2d(buf_out, out_w, out_h, true);
  double residue = 0.0;
  for (std::size_t x = 0; x < out_w; ++x)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto v = buf_out[x * out_h + y];
      residue = std::max(residue, static_cast<double>(std::abs(v.imag())));
      dst[(x * out_h + y) * stride_out] = v.real() * scale;
    }
  return residue;
}

/// One axis of the resampling as a dense real/imaginary pair of (out x in)
/// matrices: A[j,i] = (1/in) sum_{f in crop} exp(2 pi i f (j/out - i/in)),
/// i.e. unitary transform, crop, inverse and the per-axis sqrt(out/in) scale.
template <typename T>
struct AxisResampler {
  std::size_t in = 0, out = 0;
  std::vector<T> re, im;
};

template <typename T>
const AxisResampler<T>& axis_resampler(std::size_t in, std::size_t crop, std::size_t out) {
  thread_local std::map<std::tuple<std::size_t, std::size_t, std::size_t>, AxisResampler<T>> cache;
  auto& op = cache[{in, crop, out}];
  if (op.re.empty()) {
    op.in = in;
    op.out = out;
    op.re.resize(out * in);
    op.im.resize(out * in);
    const auto lo = -static_cast<std::ptrdiff_t>(crop / 2), hi = static_cast<std::ptrdiff_t>((crop + 1) / 2) - 1;
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t i = 0; i < in; ++i) {
        const double t = static_cast<double>(j) / static_cast<double>(out) - static_cast<double>(i) / static_cast<double>(in);
        std::complex<double> acc = 0;
        for (auto f = lo; f <= hi; ++f) acc += std::polar(1.0, 2.0 * std::numbers::pi * static_cast<double>(f) * t);
        op.re[j * in + i] = static_cast<T>(acc.real() / static_cast<double>(in));
        op.im[j * in + i] = static_cast<T>(acc.imag() / static_cast<double>(in));
      }
  }
  return op;
}

/// dst += Re(A_w X A_h^T) for every batch item, all channels at once; with
/// `adjoint` the transposed operators map the out grid back to the in grid.
/// For real X this equals the symmetrized transform-domain route.
template <typename T>
void separable_resample(const AxisResampler<T>& ow, const AxisResampler<T>& oh, bool adjoint, const T* src,
                        std::size_t n, std::size_t c, T* dst) {
  const std::size_t sw = adjoint ? ow.out : ow.in, sh = adjoint ? oh.out : oh.in;
  const std::size_t dw = adjoint ? ow.in : ow.out, dh = adjoint ? oh.in : oh.out;
  std::vector<T> zr(sw * dh * c), zi(sw * dh * c);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = src + b * sw * sh * c;
    for (std::size_t x = 0; x < sw; ++x) {
      blas::gemm<T>(adjoint, false, dh, c, sh, T(1), oh.re.data(), oh.in, xb + x * sh * c, c, T(0),
                    zr.data() + x * dh * c, c);
      blas::gemm<T>(adjoint, false, dh, c, sh, T(1), oh.im.data(), oh.in, xb + x * sh * c, c, T(0),
                    zi.data() + x * dh * c, c);
    }
    T* yb = dst + b * dw * dh * c;
    blas::gemm<T>(adjoint, false, dw, dh * c, sw, T(1), ow.re.data(), ow.in, zr.data(), dh * c, T(1), yb, dh * c);
    blas::gemm<T>(adjoint, false, dw, dh * c, sw, T(-1), ow.im.data(), ow.in, zi.data(), dh * c, T(1), yb, dh * c);
  }
}

/// Differentiable spectral resampling of every (batch, channel) plane.
///
/// The forward map is scale * Re(F_out^-1 E F_in), applied through the
/// separable per-axis operators; its adjoint is the same resampling run
/// backwards. When `max_residue` is requested the forward pass goes through
/// the FFT route instead and reports its imaginary residue.
template <typename T>
TensorPtr<T> spectral_resample(GradTape<T>* tape, const TensorPtr<T>& x, std::size_t crop_w, std::size_t crop_h,
                               std::size_t out_w, std::size_t out_h, double* max_residue) {
  const Dims4 in = dims4(*x, "spectral input");
  const Dims4 od{in.n, out_w, out_h, in.c};
  auto out = ops::detail::output_like<T>(tape, od.shape(), {x.get()});
  const auto& ow = axis_resampler<T>(in.w, crop_w, out_w);
  const auto& oh = axis_resampler<T>(in.h, crop_h, out_h);
  if (max_residue) {
    const T scale = static_cast<T>(std::sqrt(static_cast<double>(out_w * out_h) / static_cast<double>(in.w * in.h)));
    std::vector<std::complex<T>> bi, bo;
    double residue = 0.0;
    for (std::size_t b = 0; b < in.n; ++b)
      for (std::size_t c = 0; c < in.c; ++c) {
        residue = std::max(residue, resample_plane(x->data().data() + in.index(b, 0, 0, c), in.w, in.h, crop_w,
                                                   crop_h, out->data().data() + od.index(b, 0, 0, c), out_w, out_h,
                                                   scale, in.c, in.c, bi, bo));
      }
    *max_residue = residue;
  } else {
    separable_resample(ow, oh, false, x->data().data(), in.n, in.c, out->data().data());
  }
  if (out->requires_grad()) {
    tape->record("spectral_resample", {x}, out, [xp = x.get(), op = out.get(), &ow, &oh, in] {
      separable_resample(ow, oh, true, op->grad().data(), in.n, in.c, xp->grad().data());
    });
  }
  return out;
}

}  // namespace detail

/// Spectral pooling: keep the centered out_w x out_h block of the spectrum
/// and invert on the smaller grid. Output is rescaled by
/// sqrt(out_w*out_h / (w*h)) so constant maps keep their value.
template <typename T>
TensorPtr<T> spectral_pool(GradTape<T>* tape, const TensorPtr<T>& x, std::size_t out_w, std::size_t out_h,
                           double* max_residue = nullptr) {
  const Dims4 in = dims4(*x, "spectral_pool input");
  if (out_w < 1 || out_h < 1 || out_w > in.w || out_h > in.h) {
    throw ConfigError("spectral_pool target " + std::to_string(out_w) + "x" + std::to_string(out_h) +
                      " must lie within input " + std::to_string(in.w) + "x" + std::to_string(in.h));
  }
  return detail::spectral_resample(tape, x, out_w, out_h, out_w, out_h, max_residue);
}

/// Resolution-preserving low-pass: crop the spectrum to (ceil(w/2), ceil(h/2))
/// and zero-pad it back to (w, h).
template <typename T>
TensorPtr<T> spectral_lowpass(GradTape<T>* tape, const TensorPtr<T>& x, double* max_residue = nullptr) {
  const Dims4 in = dims4(*x, "spectral_lowpass input");
  return detail::spectral_resample(tape, x, (in.w + 1) / 2, (in.h + 1) / 2, in.w, in.h, max_residue);
}

enum class Padding { valid, same };

/// Windowed max. Ties go to the first element in row-major scan order, which
/// is also where the gradient is routed.
template <typename T>
TensorPtr<T> max_pool(GradTape<T>* tape, const TensorPtr<T>& x, std::size_t window, std::size_t stride,
                      Padding padding) {
  if (window < 1) throw ConfigError("max_pool window must be >= 1");
  if (stride < 1) throw ConfigError("max_pool stride must be >= 1");
  const Dims4 in = dims4(*x, "max_pool input");
  auto extent = [&](std::size_t n, std::size_t& pad_lo) {
    if (padding == Padding::valid) {
      pad_lo = 0;
      return ops::conv_out_extent(n, window, 0, stride);
    }
    const std::size_t out = (n + stride - 1) / stride;
    const std::size_t need = (out - 1) * stride + window;
    pad_lo = need > n ? (need - n) / 2 : 0;
    return out;
  };
  std::size_t px = 0, py = 0;
  const Dims4 od{in.n, extent(in.w, px), extent(in.h, py), in.c};
  auto out = ops::detail::output_like<T>(tape, od.shape(), {x.get()});
  std::vector<std::size_t> arg(out->size());
  const std::size_t d = in.c;
  const T* xd = x->data().data();
  T* o = out->data().data();
  for (std::size_t b = 0; b < od.n; ++b)
    for (std::size_t ox = 0; ox < od.w; ++ox)
      for (std::size_t oy = 0; oy < od.h; ++oy) {
        const std::size_t oi = od.index(b, ox, oy, 0);
        T* __restrict__ best = o + oi;
        std::size_t* __restrict__ best_i = arg.data() + oi;
        bool first = true;
        for (std::size_t kx = 0; kx < window; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(px);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
          for (std::size_t ky = 0; ky < window; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(py);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
            const std::size_t ii = in.index(b, static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), 0);
            const T* __restrict__ xi = xd + ii;
            if (first) {
              for (std::size_t c = 0; c < d; ++c) {
                best[c] = xi[c];
                best_i[c] = ii + c;
              }
              first = false;
              continue;
            }
            for (std::size_t c = 0; c < d; ++c) {
              const bool take = xi[c] > best[c];
              best[c] = take ? xi[c] : best[c];
              best_i[c] = take ? ii + c : best_i[c];
            }
          }
        }
      }
  if (out->requires_grad()) {
    tape->record("max_pool", {x}, out, [xp = x.get(), op = out.get(), arg = std::move(arg)] {
      for (std::size_t o = 0; o < arg.size(); ++o) xp->grad()[arg[o]] += op->grad()[o];
    });
  }
  return out;
}

/// Per-channel maximum over the whole plane: (n,w,h,d) -> (n,1,1,d).
template <typename T>
TensorPtr<T> global_max_pool(GradTape<T>* tape, const TensorPtr<T>& x) {
  const Dims4 in = dims4(*x, "global_max_pool input");
  auto out = ops::detail::output_like<T>(tape, {in.n, 1, 1, in.c}, {x.get()});
  std::vector<std::size_t> arg(in.n * in.c);
  for (std::size_t b = 0; b < in.n; ++b)
    for (std::size_t c = 0; c < in.c; ++c) {
      std::size_t best_i = in.index(b, 0, 0, c);
      for (std::size_t p = 1; p < in.w * in.h; ++p) {
        const std::size_t i = (b * in.w * in.h + p) * in.c + c;
        if ((*x)[i] > (*x)[best_i]) best_i = i;
      }
      (*out)[b * in.c + c] = (*x)[best_i];
      arg[b * in.c + c] = best_i;
    }
  if (out->requires_grad()) {
    tape->record("global_max_pool", {x}, out, [xp = x.get(), op = out.get(), arg = std::move(arg)] {
      for (std::size_t o = 0; o < arg.size(); ++o) xp->grad()[arg[o]] += op->grad()[o];
    });
  }
  return out;
}

/// Low-pass each channel to half resolution by spectral pooling, then take
/// the global maximum of the pooled map.
template <typename T>
TensorPtr<T> global_spectral_max_pool(GradTape<T>* tape, const TensorPtr<T>& x) {
  const Dims4 in = dims4(*x, "global_spectral_max_pool input");
  if (in.w < 2 || in.h < 2) throw DimensionError("global_spectral_max_pool needs w,h >= 2");
  return global_max_pool(tape, spectral_pool(tape, x, (in.w + 1) / 2, (in.h + 1) / 2));
}

/// Spectral and max pooling in parallel, concatenated along depth and mixed
/// by a 1x1 convolution. mix_weight: (1, 1, 2d, d_out); mix_bias: (d_out).
///
/// valid: both branches halve the resolution (2x2 stride-2 max).
/// same: both branches keep it (3x3 stride-1 same max, spectral low-pass).
template <typename T>
TensorPtr<T> hybrid_pool(GradTape<T>* tape, const TensorPtr<T>& x, Padding mode, const TensorPtr<T>& mix_weight,
                         const TensorPtr<T>& mix_bias) {
  const Dims4 in = dims4(*x, "hybrid_pool input");
  if (mix_weight->rank() != 4 || mix_weight->dim(0) != 1 || mix_weight->dim(2) != 2 * in.c) {
    throw DimensionError("hybrid_pool mix kernel must be (1,1,2d,d_out), got " + shape_str(mix_weight->shape()));
  }
  TensorPtr<T> spectral, maxed;
  if (mode == Padding::valid) {
    if (in.w % 2 || in.h % 2) {
      throw ConfigError("valid hybrid pooling needs even extents, got " + shape_str(x->shape()));
    }
    spectral = spectral_pool(tape, x, in.w / 2, in.h / 2);
    maxed = max_pool(tape, x, 2, 2, Padding::valid);
  } else {
    spectral = spectral_lowpass(tape, x);
    maxed = max_pool(tape, x, 3, 1, Padding::same);
  }
  return ops::conv2d(tape, ops::concat_channels<T>(tape, {spectral, maxed}), mix_weight, mix_bias);
}

}  // namespace chs
