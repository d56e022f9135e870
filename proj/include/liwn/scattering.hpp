#pragma once

// Wavelet modulus propagator, order-2 scattering and deformation probes.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "liwn/dtcwt.hpp"
#include "liwn/error.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

/// Per-input-channel block width of one propagator stage: lowpass + 6 bands.
inline constexpr std::size_t kPropagatorWidth = 1 + kOrientations;

/// Modulus of the complex bands.
///
/// smooth_eps = 0: exact |z| with gradient defined as 0 where |z| < grad_floor.
/// smooth_eps > 0: sqrt(re^2 + im^2 + eps^2) - eps, smooth everywhere.
struct MagnitudeOptions {
  double smooth_eps = 0.0;
  double grad_floor = 1e-12;
};

template <typename T>
struct PropagatorCache {
  Pyramid<T> pyramid;
  Shape input_dims;
};

namespace detail {

// [P, 6, h, w] bands + [P, 4, h, w] tree lowpasses -> [P, 7, h, w].
template <typename T>
Tensor<T> assemble_propagator_output(const Pyramid<T>& pyr, const MagnitudeOptions& mo,
                                     std::size_t P) {
  const auto& re = pyr.levels[0].real;
  const std::size_t h = re.dim(re.rank() - 2), w = re.dim(re.rank() - 1), plane = h * w;
  const Tensor<T> lp = pyr.averaged_lowpass();
  const T* r = re.data();
  const T* im = pyr.levels[0].imag.data();
  Tensor<T> z({P, kPropagatorWidth, h, w});
  const T eps = T(mo.smooth_eps);
  for (std::size_t p = 0; p < P; ++p) {
    T* zp = z.data() + p * kPropagatorWidth * plane;
    std::copy_n(lp.data() + p * plane, plane, zp);
    for (std::size_t k = 0; k < kOrientations; ++k) {
      const std::size_t off = (p * kOrientations + k) * plane;
      T* out = zp + (1 + k) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T a = r[off + i], b = im[off + i];
        out[i] = eps > 0 ? std::sqrt(a * a + b * b + eps * eps) - eps : std::sqrt(a * a + b * b);
      }
    }
  }
  return z;
}

}  // namespace detail

/// W~ x for x [..., C, H, W]: returns [..., 7C, H/2, W/2] with channel 7c the
/// lowpass of input channel c and 7c+1+k the modulus of its band k.
template <typename T>
Tensor<T> wavelet_modulus_propagator(const Tensor<T>& x, const FilterSet& f,
                                     const MagnitudeOptions& mo = {},
                                     PropagatorCache<T>* cache = nullptr) {
  if (x.rank() < 3) throw ShapeError("propagator input must be [..., C, H, W], got " + shape_str(x.dims()));
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  if (H % 2 || W % 2) throw ShapeError("propagator needs even extents, got " + shape_str(x.dims()));
  auto pyr = dtcwt_forward(x, 1, f);
  const std::size_t P = detail::leading_count(x.dims(), 2);
  Tensor<T> z = detail::assemble_propagator_output(pyr, mo, P);
  Shape od(x.dims().begin(), x.dims().end() - 3);
  od.push_back(x.dim(x.rank() - 3) * kPropagatorWidth);
  od.push_back(H / 2);
  od.push_back(W / 2);
  z.reshape(od);
  if (cache) {
    cache->pyramid = std::move(pyr);
    cache->input_dims = x.dims();
  }
  return z;
}

/// Reverse-mode gradient of the propagator with respect to its input.
template <typename T>
Tensor<T> wavelet_modulus_propagator_backward(const Tensor<T>& grad_z,
                                              const PropagatorCache<T>& cache, const FilterSet& f,
                                              const MagnitudeOptions& mo = {}) {
  if (cache.input_dims.empty()) throw UsageError("propagator backward called without a cached forward");
  const Pyramid<T>& pyr = cache.pyramid;
  const std::size_t P = detail::leading_count(cache.input_dims, 2);
  const auto& re = pyr.levels[0].real;
  const std::size_t h = re.dim(re.rank() - 2), w = re.dim(re.rank() - 1), plane = h * w;
  if (grad_z.size() != P * kPropagatorWidth * plane)
    throw ShapeError("propagator gradient has extents " + shape_str(grad_z.dims()));

  Pyramid<T> g = pyr.zeros_like();
  const T* gz = grad_z.data();
  const T* r = re.data();
  const T* im = pyr.levels[0].imag.data();
  T* glp = g.lowpass.data();
  T* gre = g.levels[0].real.data();
  T* gim = g.levels[0].imag.data();
  const T eps = T(mo.smooth_eps), floor = T(mo.grad_floor);
  for (std::size_t p = 0; p < P; ++p) {
    const T* gp = gz + p * kPropagatorWidth * plane;
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < plane; ++i) glp[(p * 4 + t) * plane + i] = T(0.25) * gp[i];
    for (std::size_t k = 0; k < kOrientations; ++k) {
      const std::size_t off = (p * kOrientations + k) * plane;
      const T* gk = gp + (1 + k) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T a = r[off + i], b = im[off + i];
        T denom;
        if (eps > 0) {
          denom = std::sqrt(a * a + b * b + eps * eps);
        } else {
          denom = std::sqrt(a * a + b * b);
          if (denom < floor) continue;
        }
        gre[off + i] = gk[i] * a / denom;
        gim[off + i] = gk[i] * b / denom;
      }
    }
  }
  return dtcwt_adjoint(g, f);
}

/// One scattering path: gamma[s] is the index chosen at stage s (0 = lowpass,
/// 1..6 = modulus of band k-1) for input channel `input_channel`.
struct ScatterPath {
  std::size_t input_channel = 0;
  std::vector<std::size_t> gamma;
  std::size_t channel_begin = 0, channel_end = 0;

  /// Number of wavelet moduli along the path.
  std::size_t wavelet_order() const {
    return std::size_t(std::count_if(gamma.begin(), gamma.end(), [](std::size_t g) { return g != 0; }));
  }
  std::string label() const {
    std::string s = "c" + std::to_string(input_channel) + ":";
    for (auto g : gamma) s += g == 0 ? "L" : std::to_string(g - 1);
    return s;
  }
};

struct ScatterLayout {
  std::size_t order = 0;
  std::size_t input_channels = 0;
  std::vector<ScatterPath> entries;

  std::size_t total_channels() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < order; ++i) n *= kPropagatorWidth;
    return n * input_channels;
  }
};

/// Channel layout after `order` chained propagators: channel index is
/// c * 7^order + sum_s gamma[s] * 7^(order-1-s).
inline ScatterLayout make_scatter_layout(std::size_t C, std::size_t order) {
  ScatterLayout L;
  L.order = order;
  L.input_channels = C;
  const std::size_t block = L.total_channels() / C;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < block; ++q) {
      ScatterPath p;
      p.input_channel = c;
      p.gamma.resize(order);
      std::size_t rem = q;
      for (std::size_t s = order; s-- > 0;) {
        p.gamma[s] = rem % kPropagatorWidth;
        rem /= kPropagatorWidth;
      }
      p.channel_begin = c * block + q;
      p.channel_end = p.channel_begin + 1;
      L.entries.push_back(std::move(p));
    }
  return L;
}

template <typename T>
struct ScatterResult {
  Tensor<T> coefficients;
  ScatterLayout layout;
};

/// Two chained propagators: [..., C, H, W] -> [..., 49C, H/4, W/4].
template <typename T>
ScatterResult<T> scatter_order2(const Tensor<T>& x, const FilterSet& f,
                                const MagnitudeOptions& mo = {}) {
  if (x.rank() < 3) throw ShapeError("scattering input must be [..., C, H, W]");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  if (H % 4 || W % 4) throw ShapeError("order-2 scattering needs extents divisible by 4, got " + shape_str(x.dims()));
  auto z1 = wavelet_modulus_propagator(x, f, mo);
  auto z2 = wavelet_modulus_propagator(z1, f, mo);
  return {std::move(z2), make_scatter_layout(x.dim(x.rank() - 3), 2)};
}

template <typename T>
Tensor<T> scatter_order1(const Tensor<T>& x, const FilterSet& f, const MagnitudeOptions& mo = {}) {
  return wavelet_modulus_propagator(x, f, mo);
}

/// ||S x1 - S x2|| over every order-2 scattering channel.
template <typename T>
double scatter_distance(const Tensor<T>& x1, const Tensor<T>& x2, const FilterSet& f) {
  x1.require_same(x2);
  return norm2(scatter_order2(x1, f).coefficients - scatter_order2(x2, f).coefficients);
}

/// Displacement field tau [2, H, W] (row, column components, in pixels).
struct StabilityProbe {
  Tensor<double> tau;
  double max_grad = 0.0;

  explicit StabilityProbe(Tensor<double> t) : tau(std::move(t)) {
    if (tau.rank() != 3 || tau.dim(0) != 2) throw ShapeError("displacement field must be [2, H, W]");
    max_grad = displacement_max_grad(tau);
  }

  double max_abs_displacement() const { return max_abs(tau); }

  /// sup over pixels of the spectral norm of the (central-difference) Jacobian.
  static double displacement_max_grad(const Tensor<double>& tau) {
    const std::size_t H = tau.dim(1), W = tau.dim(2);
    auto d = [&](std::size_t comp, std::size_t i, std::size_t j, int axis) {
      if (axis == 0) {
        if (H < 2) return 0.0;
        const std::size_t a = i == 0 ? 0 : i - 1, b = i + 1 == H ? H - 1 : i + 1;
        return (tau.at(comp, b, j) - tau.at(comp, a, j)) / double(b - a);
      }
      if (W < 2) return 0.0;
      const std::size_t a = j == 0 ? 0 : j - 1, b = j + 1 == W ? W - 1 : j + 1;
      return (tau.at(comp, i, b) - tau.at(comp, i, a)) / double(b - a);
    };
    double best = 0;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double a = d(0, i, j, 0), b = d(0, i, j, 1), c = d(1, i, j, 0), e = d(1, i, j, 1);
        // Largest singular value of [[a, b], [c, e]].
        const double s1 = a * a + b * b + c * c + e * e;
        const double det = a * e - b * c;
        const double disc = std::sqrt(std::max(0.0, s1 * s1 - 4 * det * det));
        best = std::max(best, std::sqrt((s1 + disc) / 2));
      }
    return best;
  }
};

inline constexpr double kMaxDeformationGrad = 0.5;

/// Bilinear resampling x(u - tau(u)) with half-sample symmetric extension.
template <typename T>
Tensor<T> warp_image(const Tensor<T>& x, const StabilityProbe& probe) {
  if (probe.max_grad > kMaxDeformationGrad + 1e-12)
    throw PreconditionError("displacement gradient " + std::to_string(probe.max_grad) +
                            " exceeds 1/2");
  if (x.rank() < 2) throw ShapeError("warp input must have rank >= 2");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  if (probe.tau.dim(1) != H || probe.tau.dim(2) != W)
    throw ShapeError("displacement field extents do not match the image");
  const std::size_t P = x.size() / (H * W);
  Tensor<T> y(x.dims());
  const auto h = std::ptrdiff_t(H), w = std::ptrdiff_t(W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double sr = double(i) - probe.tau.at(0, i, j);
      const double sc = double(j) - probe.tau.at(1, i, j);
      const double fr = std::floor(sr), fc = std::floor(sc);
      const double wr = sr - fr, wc = sc - fc;
      const auto r0 = std::ptrdiff_t(fr), c0 = std::ptrdiff_t(fc);
      const std::size_t a = std::size_t(reflect_index(r0, h)), b = std::size_t(reflect_index(r0 + 1, h));
      const std::size_t c = std::size_t(reflect_index(c0, w)), d = std::size_t(reflect_index(c0 + 1, w));
      for (std::size_t p = 0; p < P; ++p) {
        const T* xp = x.data() + p * H * W;
        y[p * H * W + i * W + j] =
            T((1 - wr) * ((1 - wc) * xp[a * W + c] + wc * xp[a * W + d]) +
              wr * ((1 - wc) * xp[b * W + c] + wc * xp[b * W + d]));
      }
    }
  return y;
}

/// Constant displacement (rows, cols): an extended shift of the image.
inline StabilityProbe constant_shift(std::size_t H, std::size_t W, double rows, double cols) {
  Tensor<double> tau({2, H, W});
  for (std::size_t i = 0; i < H * W; ++i) {
    tau[i] = rows;
    tau[H * W + i] = cols;
  }
  return StabilityProbe(std::move(tau));
}

/// Smooth random displacement: a few low-frequency sinusoids per component,
/// scaled so that sup|tau| = amplitude.
inline StabilityProbe smooth_random_displacement(std::size_t H, std::size_t W, double amplitude,
                                                 std::uint64_t seed, int modes = 3) {
  SeedRng rng(seed);
  Tensor<double> tau({2, H, W});
  for (std::size_t comp = 0; comp < 2; ++comp)
    for (int m = 0; m < modes; ++m) {
      const double kr = rng.uniform(0.5, 1.5), kc = rng.uniform(0.5, 1.5);
      const double ph = rng.uniform(0, 2 * M_PI), a = rng.normal();
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          tau.at(comp, i, j) +=
              a * std::sin(2 * M_PI * (kr * double(i) / double(H) + kc * double(j) / double(W)) + ph);
    }
  const double m = max_abs(tau);
  if (m > 0) tau *= amplitude / m;
  return StabilityProbe(std::move(tau));
}

/// Scattering output of the given order (1 or 2).
template <typename T>
Tensor<T> scatter(const Tensor<T>& x, std::size_t order, const FilterSet& f) {
  if (order == 1) return scatter_order1(x, f);
  if (order == 2) return scatter_order2(x, f).coefficients;
  throw PreconditionError("scattering order must be 1 or 2");
}

/// ||S x' - S x|| / ||x'- x|| for x' = x shifted by (rows, cols) pixels:
/// the relative scattering distance over the relative pixel distance, both
/// normalised by ||x||.
template <typename T>
double shift_distance_ratio(const Tensor<T>& x, double rows, double cols, std::size_t order,
                            const FilterSet& f) {
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const Tensor<T> xs = warp_image(x, constant_shift(H, W, rows, cols));
  const double pix = norm2(xs - x);
  if (pix == 0) return 0;
  return norm2(scatter(xs, order, f) - scatter(x, order, f)) / pix;
}

struct WarpCurvePoint {
  double amplitude = 0;     // sup |tau|
  double max_grad = 0;      // largest sup ||grad tau|| over seeds
  double scatter_rel = 0;   // median ||S L x - S x|| / ||x||
  double pixel_rel = 0;     // median ||L x - x|| / ||x||
};

namespace detail {
inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

/// Order-2 scattering distance under smooth random warps, one point per
/// amplitude, medians over images x seeds (seed s deforms image s mod n).
template <typename T>
std::vector<WarpCurvePoint> warp_stability_curve(const std::vector<Tensor<T>>& images,
                                                 const std::vector<double>& amplitudes,
                                                 std::size_t seeds, const FilterSet& f,
                                                 std::uint64_t base_seed = 0) {
  if (images.empty()) throw PreconditionError("warp curve needs at least one image");
  std::vector<WarpCurvePoint> out;
  for (double amp : amplitudes) {
    WarpCurvePoint pt;
    pt.amplitude = amp;
    std::vector<double> sd, pd;
    for (std::size_t s = 0; s < seeds; ++s) {
      const Tensor<T>& x = images[s % images.size()];
      const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
      const StabilityProbe probe = smooth_random_displacement(H, W, amp, base_seed + s);
      pt.max_grad = std::max(pt.max_grad, probe.max_grad);
      const Tensor<T> xw = warp_image(x, probe);
      const double nx = norm2(x);
      sd.push_back(scatter_distance(xw, x, f) / nx);
      pd.push_back(norm2(xw - x) / nx);
    }
    pt.scatter_rel = detail::median(sd);
    pt.pixel_rel = detail::median(pd);
    out.push_back(pt);
  }
  return out;
}

}  // namespace liwn
