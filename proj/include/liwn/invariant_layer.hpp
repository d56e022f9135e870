#pragma once

// The locally invariant layer: propagator W~ followed by a learned 1x1
// mixing A of the lowpass and modulus channels, ReLU, optional upsampling.

#include <cmath>
#include <optional>

#include "liwn/error.hpp"
#include "liwn/kernels.hpp"
#include "liwn/scattering.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

enum class Mode { train, eval };

struct InvariantLayerFlags {
  bool apply_relu = true;
  bool upsample_out = false;
  double magnitude_floor = 0.0;  // > 0 selects the smooth modulus
  bool nonexpansive_projection = false;
  bool spectral_projection = false;
};

template <typename T>
struct InvariantLayerParams {
  Tensor<T> A;      // [C_out, 7 C_in]
  Tensor<T> alpha;  // [C_in]
  double phi_norm = 1.0;
  InvariantLayerFlags flags;

  std::size_t c_in() const { return alpha.size(); }
  std::size_t c_out() const { return A.dim(0); }

  void validate() const {
    if (A.rank() != 2 || alpha.rank() != 1 || A.dim(1) != kPropagatorWidth * alpha.size())
      throw ShapeError("mixing matrix " + shape_str(A.dims()) + " needs 7*C_in = " +
                       std::to_string(kPropagatorWidth * alpha.size()) + " columns");
    if (!(phi_norm > 0)) throw PreconditionError("phi_norm must be positive");
    if (flags.magnitude_floor < 0) throw PreconditionError("magnitude floor must be >= 0");
  }

  MagnitudeOptions magnitude() const { return {flags.magnitude_floor, 1e-12}; }
};

/// DC gain of the propagator's lowpass channel: the amount a constant input
/// offset alpha shows up in the lowpass output.
inline double lowpass_dc_gain(const FilterSet& f) {
  double s = 0;
  for (double v : f.h0o) s += v;
  return FilterSet::level1_gain * s * s;
}

/// Uniform in [-s, s], s = sqrt(1 / (7 C_in)); alpha = 0.
template <typename T>
InvariantLayerParams<T> init_invariant_params(std::size_t c_in, std::size_t c_out, const FilterSet& f,
                                              SeedRng& rng, InvariantLayerFlags flags = {}) {
  InvariantLayerParams<T> p;
  const double s = std::sqrt(1.0 / double(kPropagatorWidth * c_in));
  p.A = random_uniform<T>({c_out, kPropagatorWidth * c_in}, rng, -s, s);
  p.alpha = Tensor<T>({c_in});
  p.phi_norm = lowpass_dc_gain(f);
  p.flags = flags;
  return p;
}

/// A = I (7C x 7C), alpha = alpha_value, ReLU on: the layer reproduces W~x.
template <typename T>
InvariantLayerParams<T> make_identity_mixing(std::size_t C, double phi_norm, double alpha_value) {
  if (C < 1) throw PreconditionError("identity mixing needs C >= 1");
  InvariantLayerParams<T> p;
  const std::size_t n = kPropagatorWidth * C;
  p.A = Tensor<T>({n, n});
  for (std::size_t i = 0; i < n; ++i) p.A.at(i, i) = T(1);
  p.alpha = Tensor<T>({C}, T(alpha_value));
  p.phi_norm = phi_norm;
  p.flags.apply_relu = true;
  return p;
}

/// Rows of A with l2 norm above 1 are scaled onto the unit sphere.
template <typename T>
InvariantLayerParams<T> project_nonexpansive(InvariantLayerParams<T> p) {
  const std::size_t F = p.A.dim(0), Q = p.A.dim(1);
  for (std::size_t f = 0; f < F; ++f) {
    T* row = p.A.data() + f * Q;
    double n = 0;
    for (std::size_t q = 0; q < Q; ++q) n += double(row[q]) * double(row[q]);
    n = std::sqrt(n);
    if (n > 1.0)
      for (std::size_t q = 0; q < Q; ++q) row[q] = T(double(row[q]) / n);
  }
  return p;
}

/// Largest singular value by power iteration on A^T A.
template <typename T>
double spectral_norm(const Tensor<T>& A, int max_iter = 1000) {
  const std::size_t F = A.dim(0), Q = A.dim(1);
  std::vector<double> v(Q), u(F);
  for (std::size_t q = 0; q < Q; ++q) v[q] = 1.0 + 0.01 * double(q % 7);
  double sigma = 0;
  for (int it = 0; it < max_iter; ++it) {
    double nv = 0;
    for (double x : v) nv += x * x;
    nv = std::sqrt(nv);
    if (nv == 0) return 0;
    for (double& x : v) x /= nv;
    for (std::size_t f = 0; f < F; ++f) {
      double s = 0;
      for (std::size_t q = 0; q < Q; ++q) s += double(A[f * Q + q]) * v[q];
      u[f] = s;
    }
    std::vector<double> w(Q, 0.0);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t q = 0; q < Q; ++q) w[q] += double(A[f * Q + q]) * u[f];
    double nw = 0;
    for (double x : w) nw += x * x;
    const double next = std::sqrt(std::sqrt(nw));
    v = std::move(w);
    if (std::abs(next - sigma) <= 1e-15 * next) {
      sigma = next;
      break;
    }
    sigma = next;
  }
  return sigma;
}

/// Scales A so that ||A||_2 <= 1.
template <typename T>
InvariantLayerParams<T> project_spectral(InvariantLayerParams<T> p) {
  const double s = spectral_norm(p.A);
  if (s > 1.0) p.A *= T(1.0 / (s * (1 + 1e-12)));
  return p;
}

/// Applies whichever projections the flags request.
template <typename T>
void apply_projections(InvariantLayerParams<T>& p) {
  if (p.flags.nonexpansive_projection) p = project_nonexpansive(std::move(p));
  if (p.flags.spectral_projection) p = project_spectral(std::move(p));
}

template <typename T>
struct InvariantLayerCache {
  PropagatorCache<T> propagator;
  Tensor<T> z;    // [N, 7C, h, w]
  Tensor<T> pre;  // A z, before the ReLU
  Shape input_dims;
  bool valid = false;
};

template <typename T>
struct InvariantLayerGrads {
  Tensor<T> x, A, alpha;
};

namespace detail {

template <typename T>
Tensor<T> as_batch4(const Tensor<T>& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  throw ShapeError("invariant layer input must be [C,H,W] or [N,C,H,W], got " + shape_str(x.dims()));
}

}  // namespace detail

/// Forward pass. In train mode with a cache pointer, stores what backward needs.
template <typename T>
Tensor<T> inv_forward(const Tensor<T>& x_in, const InvariantLayerParams<T>& p, const FilterSet& f,
                      Mode mode = Mode::eval, InvariantLayerCache<T>* cache = nullptr) {
  p.validate();
  const Tensor<T> x = detail::as_batch4(x_in);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C != p.c_in())
    throw ShapeError("invariant layer expects " + std::to_string(p.c_in()) + " input channels, got " +
                     std::to_string(C));
  if (H % 2 || W % 2) throw ShapeError("invariant layer needs even extents, got " + shape_str(x_in.dims()));

  Tensor<T> xb = x;
  bool any_alpha = false;
  for (std::size_t c = 0; c < C; ++c) any_alpha |= p.alpha[c] != T(0);
  if (any_alpha)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        T* s = xb.data() + (n * C + c) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) s[i] += p.alpha[c];
      }

  const bool keep = mode == Mode::train && cache;
  PropagatorCache<T> pc;
  Tensor<T> z = wavelet_modulus_propagator(xb, f, p.magnitude(), keep ? &pc : nullptr);
  Tensor<T> y = channel_matmul(z, p.A);
  Tensor<T> pre;
  if (keep) pre = y;
  if (p.flags.apply_relu)
    for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  if (any_alpha) {
    // Remove the offset alpha left on the lowpass channels.
    const std::size_t F = p.c_out(), plane = (H / 2) * (W / 2);
    for (std::size_t fo = 0; fo < F; ++fo) {
      double corr = 0;
      for (std::size_t c = 0; c < C; ++c)
        corr += double(p.A.at(fo, kPropagatorWidth * c)) * double(p.alpha[c]);
      const T cv = T(corr * p.phi_norm);
      for (std::size_t n = 0; n < N; ++n) {
        T* s = y.data() + (n * F + fo) * plane;
        for (std::size_t i = 0; i < plane; ++i) s[i] -= cv;
      }
    }
  }
  if (p.flags.upsample_out) y = bilinear_upsample_2x(y);
  if (keep) {
    cache->propagator = std::move(pc);
    cache->z = std::move(z);
    cache->pre = std::move(pre);
    cache->input_dims = x_in.dims();
    cache->valid = true;
  }
  if (x_in.rank() == 3) y.reshape({y.dim(1), y.dim(2), y.dim(3)});
  return y;
}

template <typename T>
InvariantLayerGrads<T> inv_backward(const Tensor<T>& grad_out_in, const InvariantLayerCache<T>& cache,
                                    const InvariantLayerParams<T>& p, const FilterSet& f) {
  if (!cache.valid) throw UsageError("invariant layer backward needs a cache from a train-mode forward");
  Tensor<T> g = detail::as_batch4(grad_out_in);
  if (p.flags.upsample_out) g = bilinear_upsample_2x_adjoint(g);
  if (g.dims() != cache.pre.dims())
    throw ShapeError("gradient extents " + shape_str(grad_out_in.dims()) + " do not match the layer output");
  const std::size_t N = g.dim(0), F = g.dim(1), plane = g.dim(2) * g.dim(3);
  const std::size_t C = p.c_in();

  InvariantLayerGrads<T> out;
  out.A = Tensor<T>(p.A.dims());
  out.alpha = Tensor<T>({C});

  // Correction term: y -= phi * sum_c A[f,7c] alpha_c.
  bool any_alpha = false;
  for (std::size_t c = 0; c < C; ++c) any_alpha |= p.alpha[c] != T(0);
  std::vector<double> gsum(F, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t fo = 0; fo < F; ++fo) {
      const T* s = g.data() + (n * F + fo) * plane;
      double acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += double(s[i]);
      gsum[fo] += acc;
    }
  if (any_alpha)
    for (std::size_t fo = 0; fo < F; ++fo)
      for (std::size_t c = 0; c < C; ++c)
        out.A.at(fo, kPropagatorWidth * c) -= T(p.phi_norm * double(p.alpha[c]) * gsum[fo]);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0;
    for (std::size_t fo = 0; fo < F; ++fo) acc += gsum[fo] * double(p.A.at(fo, kPropagatorWidth * c));
    out.alpha[c] = T(-p.phi_norm * acc);
  }

  if (p.flags.apply_relu)
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(cache.pre[i] > T(0))) g[i] = T(0);
  channel_matmul_accumulate_weight_grad(g, cache.z, out.A);
  const Tensor<T> gz = channel_matmul_adjoint(g, p.A);
  Tensor<T> gx = wavelet_modulus_propagator_backward(gz, cache.propagator, f, p.magnitude());
  // d/d alpha_c of the input offset.
  const std::size_t HW = gx.dim(2) * gx.dim(3);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* s = gx.data() + (n * C + c) * HW;
      double acc = 0;
      for (std::size_t i = 0; i < HW; ++i) acc += double(s[i]);
      out.alpha[c] += T(acc);
    }
  gx.reshape(cache.input_dims);
  out.x = std::move(gx);
  return out;
}

}  // namespace liwn
