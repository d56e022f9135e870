#pragma once

// Numeric kernels shared by every module: 1-D stencils applied along an axis
// (and their exact transposes), separable 2-D filtering, bilinear 2x
// upsampling, per-pixel channel mixing, and a plain GEMM.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "liwn/error.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

enum class Extension { symmetric, zero };

/// Half-sample symmetric reflection into [0, len): ... 1 0 | 0 1 ... len-1 | len-1 ...
inline std::ptrdiff_t reflect_index(std::ptrdiff_t n, std::ptrdiff_t len) {
  const std::ptrdiff_t period = 2 * len;
  std::ptrdiff_t v = n % period;
  if (v < 0) v += period;
  return v >= len ? period - 1 - v : v;
}

/// A linear map R^in_len -> R^out_len stored row-wise as (input index, weight)
/// pairs. Every 1-D filter bank operation in the library is one of these, so
/// the transpose is always exact.
struct Stencil1D {
  std::size_t in_len = 0;
  std::size_t out_len = 0;
  std::vector<std::uint32_t> row_start{0};
  std::vector<std::uint32_t> index;
  std::vector<double> weight;

  Stencil1D() = default;
  Stencil1D(std::size_t in, std::size_t out) : in_len(in), out_len(out) {
    row_start.reserve(out + 1);
  }

  void add(std::ptrdiff_t i, double w) {
    index.push_back(static_cast<std::uint32_t>(i));
    weight.push_back(w);
  }
  void end_row() { row_start.push_back(static_cast<std::uint32_t>(index.size())); }
};

/// y[i] = sum_k taps[k] x[ext(s*i + m/2 - k)]: convolution centred on the
/// output sample, decimation keeps the even-index samples (s = 2).
inline Stencil1D centered_stencil(std::size_t len, std::span<const double> taps, Extension ext,
                                  int decimate) {
  if (taps.empty()) throw PreconditionError("filter taps must be non-empty");
  if (decimate != 1 && decimate != 2) throw PreconditionError("decimation factor must be 1 or 2");
  if (decimate == 2 && len % 2 != 0)
    throw ShapeError("decimation by 2 needs an even extent, got " + std::to_string(len));
  const auto m = static_cast<std::ptrdiff_t>(taps.size());
  const auto n = static_cast<std::ptrdiff_t>(len);
  Stencil1D st(len, len / decimate);
  for (std::ptrdiff_t i = 0; i < n / decimate; ++i) {
    for (std::ptrdiff_t k = 0; k < m; ++k) {
      const std::ptrdiff_t src = decimate * i + m / 2 - k;
      if (ext == Extension::symmetric) {
        st.add(reflect_index(src, n), taps[k]);
      } else if (src >= 0 && src < n) {
        st.add(src, taps[k]);
      }
    }
    st.end_row();
  }
  return st;
}

namespace detail {

// View of a tensor as [outer, len, inner] around `axis`.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& dims, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= dims[i];
  v.len = dims[axis];
  for (std::size_t i = axis + 1; i < dims.size(); ++i) v.inner *= dims[i];
  return v;
}

}  // namespace detail

/// Applies the stencil along `axis` (counted from the front).
template <typename T>
Tensor<T> apply_along_axis(const Tensor<T>& x, std::size_t axis, const Stencil1D& st) {
  const auto v = detail::axis_view(x.dims(), axis);
  if (v.len != st.in_len)
    throw ShapeError("stencil expects length " + std::to_string(st.in_len) + ", axis has " +
                     std::to_string(v.len));
  Shape od = x.dims();
  od[axis] = st.out_len;
  Tensor<T> y(od);
  const T* xs = x.data();
  T* ys = y.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    const T* xo = xs + o * v.len * v.inner;
    T* yo = ys + o * st.out_len * v.inner;
    for (std::size_t r = 0; r < st.out_len; ++r) {
      T* yr = yo + r * v.inner;
      for (std::uint32_t p = st.row_start[r]; p < st.row_start[r + 1]; ++p) {
        const T w = T(st.weight[p]);
        const T* xr = xo + std::size_t(st.index[p]) * v.inner;
        for (std::size_t q = 0; q < v.inner; ++q) yr[q] += w * xr[q];
      }
    }
  }
  return y;
}

/// Exact transpose of apply_along_axis.
template <typename T>
Tensor<T> apply_along_axis_adjoint(const Tensor<T>& y, std::size_t axis, const Stencil1D& st) {
  const auto v = detail::axis_view(y.dims(), axis);
  if (v.len != st.out_len) throw ShapeError("adjoint stencil length mismatch");
  Shape xd = y.dims();
  xd[axis] = st.in_len;
  Tensor<T> x(xd);
  const T* ys = y.data();
  T* xs = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    const T* yo = ys + o * st.out_len * v.inner;
    T* xo = xs + o * st.in_len * v.inner;
    for (std::size_t r = 0; r < st.out_len; ++r) {
      const T* yr = yo + r * v.inner;
      for (std::uint32_t p = st.row_start[r]; p < st.row_start[r + 1]; ++p) {
        const T w = T(st.weight[p]);
        T* xr = xo + std::size_t(st.index[p]) * v.inner;
        for (std::size_t q = 0; q < v.inner; ++q) xr[q] += w * yr[q];
      }
    }
  }
  return x;
}

namespace detail {
template <typename T>
void require_spatial(const Tensor<T>& x, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + " needs a tensor of rank >= 2");
}
}  // namespace detail

/// Filters the last two axes: `col_taps` run down each column (the H axis),
/// `row_taps` along each row (the W axis). With decimate = 2 both axes keep
/// their even-index samples.
template <typename T>
Tensor<T> separable_filter_2d(const Tensor<T>& x, std::span<const double> row_taps,
                              std::span<const double> col_taps,
                              Extension ext = Extension::symmetric, int decimate = 1) {
  detail::require_spatial(x, "separable_filter_2d");
  const std::size_t r = x.rank();
  const auto cs = centered_stencil(x.dim(r - 2), col_taps, ext, decimate);
  const auto rs = centered_stencil(x.dim(r - 1), row_taps, ext, decimate);
  return apply_along_axis(apply_along_axis(x, r - 2, cs), r - 1, rs);
}

template <typename T>
Tensor<T> separable_filter_2d_adjoint(const Tensor<T>& y, const Shape& input_dims,
                                      std::span<const double> row_taps,
                                      std::span<const double> col_taps,
                                      Extension ext = Extension::symmetric, int decimate = 1) {
  const std::size_t r = input_dims.size();
  const auto cs = centered_stencil(input_dims[r - 2], col_taps, ext, decimate);
  const auto rs = centered_stencil(input_dims[r - 1], row_taps, ext, decimate);
  return apply_along_axis_adjoint(apply_along_axis_adjoint(y, r - 1, rs), r - 2, cs);
}

/// Linear 2x interpolation stencil, align-corners-false: output sample i sits
/// at input coordinate (i + 0.5) / 2 - 0.5, clamped at the borders.
inline Stencil1D upsample2_stencil(std::size_t len) {
  if (len < 2) throw ShapeError("bilinear upsampling needs extents >= 2");
  const auto n = static_cast<std::ptrdiff_t>(len);
  Stencil1D st(len, 2 * len);
  for (std::ptrdiff_t i = 0; i < 2 * n; ++i) {
    const std::ptrdiff_t k = i / 2;
    const std::ptrdiff_t nb = (i % 2 == 0) ? k - 1 : k + 1;
    if (nb < 0 || nb >= n) {
      st.add(k, 1.0);
    } else {
      st.add(k, 0.75);
      st.add(nb, 0.25);
    }
    st.end_row();
  }
  return st;
}

template <typename T>
Tensor<T> bilinear_upsample_2x(const Tensor<T>& x) {
  detail::require_spatial(x, "bilinear_upsample_2x");
  const std::size_t r = x.rank();
  return apply_along_axis(apply_along_axis(x, r - 2, upsample2_stencil(x.dim(r - 2))), r - 1,
                          upsample2_stencil(x.dim(r - 1)));
}

template <typename T>
Tensor<T> bilinear_upsample_2x_adjoint(const Tensor<T>& y) {
  detail::require_spatial(y, "bilinear_upsample_2x_adjoint");
  const std::size_t r = y.rank();
  if (y.dim(r - 1) % 2 || y.dim(r - 2) % 2) throw ShapeError("upsampled extents must be even");
  return apply_along_axis_adjoint(
      apply_along_axis_adjoint(y, r - 1, upsample2_stencil(y.dim(r - 1) / 2)), r - 2,
      upsample2_stencil(y.dim(r - 2) / 2));
}

/// C[M,N] (+)= op(A)[M,K] * op(B)[K,N], row-major, sequential and deterministic.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  if (!trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        if (av == T{0}) continue;
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* bj = b + j * k;
        T s{0};
        if (trans_a) {
          for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * bj[p];
        } else {
          const T* ai = a + i * k;
          for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        }
        ci[j] += s;
      }
    }
  }
}

namespace detail {
// [batch, Q, spatial] view of a rank-3 ([Q,H,W]) or rank-4 ([N,Q,H,W]) tensor.
template <typename T>
void channel_view(const Tensor<T>& z, std::size_t& batch, std::size_t& q, std::size_t& s) {
  if (z.rank() == 3) {
    batch = 1;
    q = z.dim(0);
    s = z.dim(1) * z.dim(2);
  } else if (z.rank() == 4) {
    batch = z.dim(0);
    q = z.dim(1);
    s = z.dim(2) * z.dim(3);
  } else {
    throw ShapeError("channel ops expect [Q,H,W] or [N,Q,H,W], got " + shape_str(z.dims()));
  }
}
}  // namespace detail

/// y(f,u) = sum_q A[f,q] z(q,u): a 1x1 convolution.
template <typename T>
Tensor<T> channel_matmul(const Tensor<T>& z, const Tensor<T>& mix) {
  std::size_t batch, q, s;
  detail::channel_view(z, batch, q, s);
  if (mix.rank() != 2 || mix.dim(1) != q)
    throw ShapeError("mixing matrix " + shape_str(mix.dims()) + " does not match " +
                     std::to_string(q) + " input channels");
  const std::size_t f = mix.dim(0);
  Shape od = z.dims();
  od[z.rank() - 3] = f;
  Tensor<T> y(od);
  for (std::size_t b = 0; b < batch; ++b)
    gemm(false, false, f, s, q, mix.data(), z.data() + b * q * s, y.data() + b * f * s, false);
  return y;
}

/// Adjoint in z: grad_z = A^T grad_y.
template <typename T>
Tensor<T> channel_matmul_adjoint(const Tensor<T>& grad_y, const Tensor<T>& mix) {
  std::size_t batch, f, s;
  detail::channel_view(grad_y, batch, f, s);
  if (mix.rank() != 2 || mix.dim(0) != f) throw ShapeError("mixing matrix rows do not match");
  const std::size_t q = mix.dim(1);
  Shape zd = grad_y.dims();
  zd[grad_y.rank() - 3] = q;
  Tensor<T> gz(zd);
  for (std::size_t b = 0; b < batch; ++b)
    gemm(true, false, q, s, f, mix.data(), grad_y.data() + b * f * s, gz.data() + b * q * s,
         false);
  return gz;
}

/// grad_A += sum over batch and space of grad_y z^T.
template <typename T>
void channel_matmul_accumulate_weight_grad(const Tensor<T>& grad_y, const Tensor<T>& z,
                                           Tensor<T>& grad_mix) {
  std::size_t batch, f, s, bz, q, sz;
  detail::channel_view(grad_y, batch, f, s);
  detail::channel_view(z, bz, q, sz);
  if (batch != bz || s != sz) throw ShapeError("grad/z extents differ");
  if (grad_mix.dims() != Shape{f, q}) throw ShapeError("weight gradient has wrong extents");
  for (std::size_t b = 0; b < batch; ++b)
    gemm(false, true, f, q, s, grad_y.data() + b * f * s, z.data() + b * q * s, grad_mix.data(),
         true);
}

}  // namespace liwn
