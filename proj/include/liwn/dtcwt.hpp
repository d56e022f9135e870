#pragma once

// 2-D dual-tree complex wavelet transform (Kingsbury), numerically identical
// to the reference Python `dtcwt` package, with an exact adjoint.
//
// Every 1-D stage (colfilter / coldfilt / colifilt) is materialised as a
// Stencil1D, so the adjoint is the same stencils applied transposed in
// reverse order.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "liwn/error.hpp"
#include "liwn/filters.hpp"
#include "liwn/kernels.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

inline constexpr std::size_t kOrientations = 6;

/// Orientation (degrees) of band k; the band order is fixed.
inline constexpr double band_orientation_deg(std::size_t k) { return 15.0 + 30.0 * double(k); }

template <typename T>
struct ComplexSubbands {
  Tensor<T> real;  // [..., 6, h, w]
  Tensor<T> imag;
};

/// Output of dtcwt_forward for an input [..., H, W].
///
/// lowpass is [..., 4, H/2^J, W/2^J]: one plane per tree (tree index
/// 2*row_phase + col_phase of the final lowpass). averaged_lowpass() collapses
/// the trees to [..., H/2^J, W/2^J].
template <typename T>
struct Pyramid {
  Tensor<T> lowpass;
  std::vector<ComplexSubbands<T>> levels;
  Shape input_dims;

  std::size_t J() const { return levels.size(); }

  Tensor<T> averaged_lowpass() const {
    const std::size_t r = lowpass.rank();
    const std::size_t plane = lowpass.dim(r - 1) * lowpass.dim(r - 2);
    const std::size_t outer = lowpass.size() / (4 * plane);
    Shape od(lowpass.dims().begin(), lowpass.dims().end() - 3);
    od.push_back(lowpass.dim(r - 2));
    od.push_back(lowpass.dim(r - 1));
    Tensor<T> out(od);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < plane; ++i)
          out[o * plane + i] += T(0.25) * lowpass[(o * 4 + k) * plane + i];
    return out;
  }

  /// Pyramid of zeros with the same layout.
  Pyramid zeros_like() const {
    Pyramid p;
    p.input_dims = input_dims;
    p.lowpass = Tensor<T>(lowpass.dims());
    for (const auto& l : levels) p.levels.push_back({Tensor<T>(l.real.dims()), Tensor<T>(l.imag.dims())});
    return p;
  }

  /// this = a * this + b * other
  void axpby(T a, const Pyramid& other, T b) {
    auto mix = [&](Tensor<T>& x, const Tensor<T>& y) {
      x.require_same(y);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = a * x[i] + b * y[i];
    };
    if (other.levels.size() != levels.size()) throw ShapeError("pyramid level counts differ");
    mix(lowpass, other.lowpass);
    for (std::size_t j = 0; j < levels.size(); ++j) {
      mix(levels[j].real, other.levels[j].real);
      mix(levels[j].imag, other.levels[j].imag);
    }
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    f(lowpass);
    for (auto& l : levels) {
      f(l.real);
      f(l.imag);
    }
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    f(lowpass);
    for (const auto& l : levels) {
      f(l.real);
      f(l.imag);
    }
  }
};

template <typename T>
double dot(const Pyramid<T>& a, const Pyramid<T>& b) {
  if (a.levels.size() != b.levels.size()) throw ShapeError("pyramid level counts differ");
  double s = dot(a.lowpass, b.lowpass);
  for (std::size_t j = 0; j < a.levels.size(); ++j)
    s += dot(a.levels[j].real, b.levels[j].real) + dot(a.levels[j].imag, b.levels[j].imag);
  return s;
}

template <typename T>
Pyramid<T> random_pyramid_like(const Pyramid<T>& like, SeedRng& rng) {
  Pyramid<T> p = like.zeros_like();
  p.for_each_tensor([&](Tensor<T>& t) {
    for (auto& v : t.values()) v = T(rng.normal());
  });
  return p;
}

namespace detail {

using StencilRows = std::vector<std::vector<std::pair<std::ptrdiff_t, double>>>;

inline Stencil1D rows_to_stencil(std::size_t in_len, const StencilRows& rows) {
  Stencil1D st(in_len, rows.size());
  for (const auto& row : rows) {
    for (const auto& [i, w] : row) st.add(i, w);
    st.end_row();
  }
  return st;
}

// 'valid' convolution of h with the sequence X[src[0]], X[src[1]], ...;
// output sample i lands in rows[first + step * i].
inline void add_valid_conv(StencilRows& rows, std::size_t first, std::size_t step,
                           const std::vector<std::ptrdiff_t>& src, const std::vector<double>& h) {
  const std::size_t m = h.size();
  if (src.size() < m) throw ShapeError("signal too short for the q-shift filter");
  const std::size_t n_out = src.size() - m + 1;
  for (std::size_t i = 0; i < n_out; ++i) {
    auto& row = rows.at(first + step * i);
    for (std::size_t k = 0; k < m; ++k) row.emplace_back(src[i + m - 1 - k], h[k]);
  }
}

inline std::vector<double> every_other(const std::vector<double>& h, std::size_t start) {
  std::vector<double> out;
  for (std::size_t i = start; i < h.size(); i += 2) out.push_back(h[i]);
  return out;
}

inline double pair_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Non-decimating odd-length filter with half-sample symmetric extension.
inline Stencil1D colfilter_stencil(std::size_t r, const std::vector<double>& h) {
  if (h.size() % 2 == 0) throw ConfigError("level-1 filters must have odd length");
  return centered_stencil(r, h, Extension::symmetric, 1);
}

/// Decimating q-shift filter: r -> r/2, outputs of the two trees interleaved.
inline Stencil1D coldfilt_stencil(std::size_t r, const std::vector<double>& ha,
                                  const std::vector<double>& hb) {
  if (r % 4 != 0) throw ShapeError("q-shift analysis needs a length divisible by 4, got " + std::to_string(r));
  const auto m = static_cast<std::ptrdiff_t>(ha.size());
  const auto rr = static_cast<std::ptrdiff_t>(r);
  auto xe = [&](std::ptrdiff_t n) { return reflect_index(n - m, rr); };
  std::vector<std::ptrdiff_t> s_a, s_b, s_c, s_d;  // xe[t-1], xe[t-3], xe[t], xe[t-2]
  for (std::ptrdiff_t t = 5; t < rr + 2 * m - 2; t += 4) {
    s_a.push_back(xe(t - 1));
    s_b.push_back(xe(t - 3));
    s_c.push_back(xe(t));
    s_d.push_back(xe(t - 2));
  }
  const bool pos = detail::pair_dot(ha, hb) > 0;
  const std::size_t s1 = pos ? 0 : 1, s2 = pos ? 1 : 0;
  detail::StencilRows rows(r / 2);
  detail::add_valid_conv(rows, s1, 2, s_a, detail::every_other(ha, 0));
  detail::add_valid_conv(rows, s1, 2, s_b, detail::every_other(ha, 1));
  detail::add_valid_conv(rows, s2, 2, s_c, detail::every_other(hb, 0));
  detail::add_valid_conv(rows, s2, 2, s_d, detail::every_other(hb, 1));
  return detail::rows_to_stencil(r, rows);
}

/// Interpolating q-shift filter: r -> 2r.
inline Stencil1D colifilt_stencil(std::size_t r, const std::vector<double>& ha,
                                  const std::vector<double>& hb) {
  if (r % 2 != 0) throw ShapeError("q-shift synthesis needs an even length");
  const auto m = static_cast<std::ptrdiff_t>(ha.size());
  const std::ptrdiff_t m2 = m / 2;
  const auto rr = static_cast<std::ptrdiff_t>(r);
  auto xe = [&](std::ptrdiff_t n) { return reflect_index(n - m2, rr); };
  const bool pos = detail::pair_dot(ha, hb) > 0;
  const auto hao = detail::every_other(ha, 0), hae = detail::every_other(ha, 1);
  const auto hbo = detail::every_other(hb, 0), hbe = detail::every_other(hb, 1);
  detail::StencilRows rows(2 * r);
  std::vector<std::ptrdiff_t> sa, sb, sa2, sb2;
  if (m2 % 2 == 1) {
    for (std::ptrdiff_t t = 2; t < rr + m - 1; t += 2) {
      const std::ptrdiff_t ta = pos ? t : t - 1, tb = pos ? t - 1 : t;
      sa.push_back(xe(ta));
      sb.push_back(xe(tb));
    }
    detail::add_valid_conv(rows, 0, 4, sb, hao);
    detail::add_valid_conv(rows, 1, 4, sa, hbo);
    detail::add_valid_conv(rows, 2, 4, sb, hae);
    detail::add_valid_conv(rows, 3, 4, sa, hbe);
  } else {
    for (std::ptrdiff_t t = 3; t < rr + m; t += 2) {
      const std::ptrdiff_t ta = pos ? t : t - 1, tb = pos ? t - 1 : t;
      sa.push_back(xe(ta));
      sb.push_back(xe(tb));
      sa2.push_back(xe(ta - 2));
      sb2.push_back(xe(tb - 2));
    }
    detail::add_valid_conv(rows, 0, 4, sb2, hae);
    detail::add_valid_conv(rows, 1, 4, sa2, hbe);
    detail::add_valid_conv(rows, 2, 4, sb, hao);
    detail::add_valid_conv(rows, 3, 4, sa, hbo);
  }
  return detail::rows_to_stencil(r, rows);
}

namespace detail {

// Analysis stencils for one level acting on an [P, rows, cols] lowpass.
struct AnalysisStage {
  Stencil1D v_lo, v_hi, h_lo, h_hi;
  double gain = 1.0;
};

inline AnalysisStage analysis_stage(const FilterSet& f, std::size_t level, std::size_t rows,
                                    std::size_t cols) {
  AnalysisStage s;
  if (level == 1) {
    s.v_lo = colfilter_stencil(rows, f.h0o);
    s.v_hi = colfilter_stencil(rows, f.h1o);
    s.h_lo = colfilter_stencil(cols, f.h0o);
    s.h_hi = colfilter_stencil(cols, f.h1o);
    s.gain = FilterSet::level1_gain;
  } else {
    s.v_lo = coldfilt_stencil(rows, f.h0b, f.h0a);
    s.v_hi = coldfilt_stencil(rows, f.h1b, f.h1a);
    s.h_lo = coldfilt_stencil(cols, f.h0b, f.h0a);
    s.h_hi = coldfilt_stencil(cols, f.h1b, f.h1a);
  }
  return s;
}

struct SynthesisStage {
  Stencil1D v_lo, v_hi, h_lo, h_hi;
  double gain = 1.0;
};

inline SynthesisStage synthesis_stage(const FilterSet& f, std::size_t level, std::size_t rows,
                                      std::size_t cols) {
  SynthesisStage s;
  if (level == 1) {
    s.v_lo = colfilter_stencil(rows, f.g0o);
    s.v_hi = colfilter_stencil(rows, f.g1o);
    s.h_lo = colfilter_stencil(cols, f.g0o);
    s.h_hi = colfilter_stencil(cols, f.g1o);
    s.gain = FilterSet::level1_gain;
  } else {
    s.v_lo = colifilt_stencil(rows, f.g0b, f.g0a);
    s.v_hi = colifilt_stencil(rows, f.g1b, f.g1a);
    s.h_lo = colifilt_stencil(cols, f.g0b, f.g0a);
    s.h_hi = colifilt_stencil(cols, f.g1b, f.g1a);
  }
  return s;
}

// Quad (a b / c d) on each 2x2 block -> two complex bands.
template <typename T>
void q2c_into(const Tensor<T>& y, ComplexSubbands<T>& out, std::size_t band1, std::size_t band2) {
  const std::size_t P = y.dim(0), R = y.dim(1), C = y.dim(2), h = R / 2, w = C / 2;
  const T s = T(std::sqrt(0.5));
  for (std::size_t p = 0; p < P; ++p) {
    const T* yp = y.data() + p * R * C;
    T* r1 = out.real.data() + (p * kOrientations + band1) * h * w;
    T* i1 = out.imag.data() + (p * kOrientations + band1) * h * w;
    T* r2 = out.real.data() + (p * kOrientations + band2) * h * w;
    T* i2 = out.imag.data() + (p * kOrientations + band2) * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const T a = yp[(2 * i) * C + 2 * j], b = yp[(2 * i) * C + 2 * j + 1];
        const T c = yp[(2 * i + 1) * C + 2 * j], d = yp[(2 * i + 1) * C + 2 * j + 1];
        const std::size_t o = i * w + j;
        r1[o] = s * (a - d);
        i1[o] = s * (b + c);
        r2[o] = s * (a + d);
        i2[o] = s * (b - c);
      }
  }
}

// Inverse (and transpose) of q2c_into.
template <typename T>
Tensor<T> c2q_from(const ComplexSubbands<T>& in, std::size_t band1, std::size_t band2) {
  const std::size_t P = in.real.dim(0), h = in.real.dim(2), w = in.real.dim(3);
  const std::size_t R = 2 * h, C = 2 * w;
  Tensor<T> y({P, R, C});
  const T s = T(std::sqrt(0.5));
  for (std::size_t p = 0; p < P; ++p) {
    T* yp = y.data() + p * R * C;
    const T* r1 = in.real.data() + (p * kOrientations + band1) * h * w;
    const T* i1 = in.imag.data() + (p * kOrientations + band1) * h * w;
    const T* r2 = in.real.data() + (p * kOrientations + band2) * h * w;
    const T* i2 = in.imag.data() + (p * kOrientations + band2) * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t o = i * w + j;
        yp[(2 * i) * C + 2 * j] = s * (r1[o] + r2[o]);
        yp[(2 * i) * C + 2 * j + 1] = s * (i1[o] + i2[o]);
        yp[(2 * i + 1) * C + 2 * j] = s * (i1[o] - i2[o]);
        yp[(2 * i + 1) * C + 2 * j + 1] = s * (r2[o] - r1[o]);
      }
  }
  return y;
}

// Interleaved [P, 2h, 2w] lowpass <-> [P, 4, h, w] tree planes.
template <typename T>
Tensor<T> split_trees(const Tensor<T>& z) {
  const std::size_t P = z.dim(0), R = z.dim(1), C = z.dim(2), h = R / 2, w = C / 2;
  Tensor<T> out({P, 4, h, w});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j)
        out[((p * 4 + 2 * (i % 2) + (j % 2)) * h + i / 2) * w + j / 2] = z[(p * R + i) * C + j];
  return out;
}

template <typename T>
Tensor<T> merge_trees(const Tensor<T>& planes) {
  const std::size_t P = planes.dim(0), h = planes.dim(2), w = planes.dim(3);
  const std::size_t R = 2 * h, C = 2 * w;
  Tensor<T> z({P, R, C});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j)
        z[(p * R + i) * C + j] = planes[((p * 4 + 2 * (i % 2) + (j % 2)) * h + i / 2) * w + j / 2];
  return z;
}

inline std::size_t leading_count(const Shape& dims, std::size_t trailing) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing < dims.size(); ++i) n *= dims[i];
  return n;
}

inline Shape with_trailing(const Shape& dims, std::size_t drop, std::initializer_list<std::size_t> tail) {
  Shape out(dims.begin(), dims.end() - static_cast<std::ptrdiff_t>(drop));
  out.insert(out.end(), tail);
  return out;
}

// Band pairs produced from each quad image, in (z1, z2) order.
inline constexpr std::size_t kPairLH[2] = {0, 5};  // vertical highpass, horizontal lowpass
inline constexpr std::size_t kPairHL[2] = {2, 3};
inline constexpr std::size_t kPairHH[2] = {1, 4};

template <typename T>
void check_pyramid(const Pyramid<T>& p) {
  if (p.levels.empty()) throw ShapeError("pyramid has no levels");
  const Shape& in = p.input_dims;
  if (in.size() < 2) throw ShapeError("pyramid records no input extents");
  const std::size_t H = in[in.size() - 2], W = in[in.size() - 1], J = p.levels.size();
  for (std::size_t j = 1; j <= J; ++j) {
    const Shape want = with_trailing(in, 2, {kOrientations, H >> j, W >> j});
    if (p.levels[j - 1].real.dims() != want || p.levels[j - 1].imag.dims() != want)
      throw ShapeError("pyramid level " + std::to_string(j) + " has extents " +
                       shape_str(p.levels[j - 1].real.dims()) + ", expected " + shape_str(want));
  }
  if (p.lowpass.dims() != with_trailing(in, 2, {4, H >> J, W >> J}))
    throw ShapeError("pyramid lowpass has extents " + shape_str(p.lowpass.dims()));
}

}  // namespace detail

namespace detail {

// One analysis level on the interleaved lowpass [P, R, C]; returns the new
// interleaved lowpass and appends the level's bands.
template <typename T>
Tensor<T> forward_level(const Tensor<T>& lolo, std::size_t level, const FilterSet& f,
                        const Shape& input_dims, Pyramid<T>& pyr) {
  const std::size_t P = lolo.dim(0), R = lolo.dim(1), C = lolo.dim(2);
  const auto st = analysis_stage(f, level, R, C);
  Tensor<T> lo = apply_along_axis(lolo, 1, st.v_lo);
  Tensor<T> hi = apply_along_axis(lolo, 1, st.v_hi);
  if (st.gain != 1.0) {
    lo *= T(st.gain);
    hi *= T(st.gain);
  }
  const std::size_t r2 = lo.dim(1), c2 = (level == 1 ? C : C / 2);
  ComplexSubbands<T> bands{Tensor<T>({P, kOrientations, r2 / 2, c2 / 2}),
                           Tensor<T>({P, kOrientations, r2 / 2, c2 / 2})};
  q2c_into(apply_along_axis(hi, 2, st.h_lo), bands, kPairLH[0], kPairLH[1]);
  q2c_into(apply_along_axis(lo, 2, st.h_hi), bands, kPairHL[0], kPairHL[1]);
  q2c_into(apply_along_axis(hi, 2, st.h_hi), bands, kPairHH[0], kPairHH[1]);
  bands.real.reshape(with_trailing(input_dims, 2, {kOrientations, r2 / 2, c2 / 2}));
  bands.imag.reshape(with_trailing(input_dims, 2, {kOrientations, r2 / 2, c2 / 2}));
  pyr.levels.push_back(std::move(bands));
  return apply_along_axis(lo, 2, st.h_lo);
}

template <typename T>
void store_lowpass(const Tensor<T>& lolo, const Shape& input_dims, Pyramid<T>& pyr) {
  pyr.lowpass = split_trees(lolo).reshaped(
      with_trailing(input_dims, 2, {4, lolo.dim(1) / 2, lolo.dim(2) / 2}));
}

}  // namespace detail

/// Forward transform of x [..., H, W]; H and W must be divisible by 2^J.
template <typename T>
Pyramid<T> dtcwt_forward(const Tensor<T>& x, std::size_t J, const FilterSet& f) {
  if (J < 1) throw PreconditionError("dtcwt needs J >= 1");
  if (x.rank() < 2) throw ShapeError("dtcwt input must have rank >= 2");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t q = std::size_t{1} << J;
  if (H % q || W % q)
    throw ShapeError("dtcwt with J=" + std::to_string(J) + " needs extents divisible by " +
                     std::to_string(q) + ", got " + shape_str(x.dims()));
  const std::size_t P = detail::leading_count(x.dims(), 2);

  Pyramid<T> pyr;
  pyr.input_dims = x.dims();
  Tensor<T> lolo = x.reshaped({P, H, W});
  for (std::size_t level = 1; level <= J; ++level)
    lolo = detail::forward_level(lolo, level, f, x.dims(), pyr);
  detail::store_lowpass(lolo, x.dims(), pyr);
  return pyr;
}

/// Runs one further q-shift level on the lowpass of an existing pyramid:
/// extend(forward(x, J)) == forward(x, J + 1).
template <typename T>
Pyramid<T> dtcwt_extend(const Pyramid<T>& pyr, const FilterSet& f) {
  detail::check_pyramid(pyr);
  const std::size_t P = detail::leading_count(pyr.input_dims, 2);
  const auto& ld = pyr.lowpass.dims();
  const std::size_t h = ld[ld.size() - 2], w = ld[ld.size() - 1];
  if (h % 2 || w % 2)
    throw ShapeError("pyramid lowpass " + shape_str(ld) + " is too small for another level");
  Pyramid<T> out = pyr;
  const Tensor<T> lolo = detail::merge_trees(pyr.lowpass.reshaped({P, 4, h, w}));
  detail::store_lowpass(detail::forward_level(lolo, pyr.J() + 1, f, pyr.input_dims, out),
                        pyr.input_dims, out);
  return out;
}

/// Perfect-reconstruction inverse.
template <typename T>
Tensor<T> dtcwt_inverse(const Pyramid<T>& pyr, const FilterSet& f) {
  detail::check_pyramid(pyr);
  const std::size_t P = detail::leading_count(pyr.input_dims, 2);
  const std::size_t J = pyr.J();
  const auto& ld = pyr.lowpass.dims();
  Tensor<T> z = detail::merge_trees(pyr.lowpass.reshaped({P, 4, ld[ld.size() - 2], ld[ld.size() - 1]}));
  for (std::size_t level = J; level >= 1; --level) {
    const auto& lv = pyr.levels[level - 1];
    const std::size_t h = lv.real.dim(lv.real.rank() - 2), w = lv.real.dim(lv.real.rank() - 1);
    ComplexSubbands<T> b{lv.real.reshaped({P, kOrientations, h, w}),
                         lv.imag.reshaped({P, kOrientations, h, w})};
    const Tensor<T> lh = detail::c2q_from(b, detail::kPairLH[0], detail::kPairLH[1]);
    const Tensor<T> hl = detail::c2q_from(b, detail::kPairHL[0], detail::kPairHL[1]);
    const Tensor<T> hh = detail::c2q_from(b, detail::kPairHH[0], detail::kPairHH[1]);
    const auto st = detail::synthesis_stage(f, level, 2 * h, 2 * w);
    Tensor<T> y1 = apply_along_axis(z, 1, st.v_lo) + apply_along_axis(lh, 1, st.v_hi);
    Tensor<T> y2 = apply_along_axis(hl, 1, st.v_lo) + apply_along_axis(hh, 1, st.v_hi);
    z = apply_along_axis(y1, 2, st.h_lo) + apply_along_axis(y2, 2, st.h_hi);
    if (st.gain != 1.0) z *= T(st.gain);
  }
  return std::move(z).reshaped(pyr.input_dims);
}

/// Exact transpose of dtcwt_forward (not its inverse: the frame is redundant).
template <typename T>
Tensor<T> dtcwt_adjoint(const Pyramid<T>& grad, const FilterSet& f) {
  detail::check_pyramid(grad);
  const std::size_t P = detail::leading_count(grad.input_dims, 2);
  const std::size_t J = grad.J();
  const auto& ld = grad.lowpass.dims();
  Tensor<T> g_lolo =
      detail::merge_trees(grad.lowpass.reshaped({P, 4, ld[ld.size() - 2], ld[ld.size() - 1]}));
  for (std::size_t level = J; level >= 1; --level) {
    const auto& lv = grad.levels[level - 1];
    const std::size_t h = lv.real.dim(lv.real.rank() - 2), w = lv.real.dim(lv.real.rank() - 1);
    ComplexSubbands<T> b{lv.real.reshaped({P, kOrientations, h, w}),
                         lv.imag.reshaped({P, kOrientations, h, w})};
    const std::size_t in_r = level == 1 ? 2 * h : 4 * h, in_c = level == 1 ? 2 * w : 4 * w;
    const auto st = detail::analysis_stage(f, level, in_r, in_c);
    const Tensor<T> g_lh = detail::c2q_from(b, detail::kPairLH[0], detail::kPairLH[1]);
    const Tensor<T> g_hl = detail::c2q_from(b, detail::kPairHL[0], detail::kPairHL[1]);
    const Tensor<T> g_hh = detail::c2q_from(b, detail::kPairHH[0], detail::kPairHH[1]);
    Tensor<T> g_lo = apply_along_axis_adjoint(g_lolo, 2, st.h_lo) + apply_along_axis_adjoint(g_hl, 2, st.h_hi);
    Tensor<T> g_hi = apply_along_axis_adjoint(g_lh, 2, st.h_lo) + apply_along_axis_adjoint(g_hh, 2, st.h_hi);
    if (st.gain != 1.0) {
      g_lo *= T(st.gain);
      g_hi *= T(st.gain);
    }
    g_lolo = apply_along_axis_adjoint(g_lo, 1, st.v_lo) + apply_along_axis_adjoint(g_hi, 1, st.v_hi);
  }
  return std::move(g_lolo).reshaped(grad.input_dims);
}

}  // namespace liwn
