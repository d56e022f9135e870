#include <gtest/gtest.h>

#include <cmath>

#include "liwn/data.hpp"
#include "liwn/scattering.hpp"
#include "test_util.hpp"

using namespace liwn;
using liwn::testing::fd_max_rel_err;

namespace {

const FilterSet& set_a() {
  static const FilterSet f = load_filter_set("near_sym_a");
  return f;
}
const FilterSet& set_b() {
  static const FilterSet f = load_filter_set("near_sym_b");
  return f;
}

std::vector<Tensor<double>> proxy_images(std::size_t n, std::uint64_t seed) {
  std::vector<Tensor<double>> out;
  for (const auto& r : synth_natural_proxy(n, seed).records) out.push_back(r.pixels.cast<double>());
  return out;
}

// Direct level-1 transform of a single plane: full-rate symmetric-extension
// convolutions along each axis, then the 2x2 polyphase quad -> complex pair
// combination. Taps in unit-DC-gain form.
struct NaiveLevel1 {
  Tensor<double> lowpass;               // [h, w], mean of the 2x2 quad
  std::array<Tensor<double>, 6> mag;    // |band k|
};

double ext_at(const Tensor<double>& x, long i, long j) {
  auto r = [](long n, long len) {
    while (n < 0 || n >= len) n = n < 0 ? -n - 1 : 2 * len - n - 1;
    return n;
  };
  return x.at(std::size_t(r(i, long(x.dim(0)))), std::size_t(r(j, long(x.dim(1)))));
}

Tensor<double> conv_rows_cols(const Tensor<double>& x, const std::vector<double>& hv,
                              const std::vector<double>& hh) {
  const long H = long(x.dim(0)), W = long(x.dim(1));
  const long mv = long(hv.size()) / 2, mh = long(hh.size()) / 2;
  Tensor<double> y({x.dim(0), x.dim(1)});
  for (long i = 0; i < H; ++i)
    for (long j = 0; j < W; ++j) {
      double s = 0;
      for (long a = 0; a < long(hv.size()); ++a)
        for (long b = 0; b < long(hh.size()); ++b)
          s += hv[std::size_t(a)] * hh[std::size_t(b)] * ext_at(x, i + mv - a, j + mh - b);
      y.at(std::size_t(i), std::size_t(j)) = s;
    }
  return y;
}

NaiveLevel1 naive_level1(const Tensor<double>& x, const FilterSet& f) {
  const double r2 = std::sqrt(2.0);
  std::vector<double> h0 = f.h0o, h1 = f.h1o;
  for (auto& v : h0) v /= r2;
  for (auto& v : h1) v /= r2;
  const std::size_t h = x.dim(0) / 2, w = x.dim(1) / 2;
  NaiveLevel1 out;
  const Tensor<double> ll = conv_rows_cols(x, h0, h0);
  out.lowpass = Tensor<double>({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      out.lowpass.at(i, j) = 0.25 * (ll.at(2 * i, 2 * j) + ll.at(2 * i, 2 * j + 1) +
                                     ll.at(2 * i + 1, 2 * j) + ll.at(2 * i + 1, 2 * j + 1));
  // (vertical taps, horizontal taps) -> band pair
  struct Pair {
    const std::vector<double>* v;
    const std::vector<double>* hz;
    int b1, b2;
  };
  const Pair pairs[3] = {{&h1, &h0, 0, 5}, {&h0, &h1, 2, 3}, {&h1, &h1, 1, 4}};
  for (const auto& p : pairs) {
    const Tensor<double> y = conv_rows_cols(x, *p.v, *p.hz);
    out.mag[std::size_t(p.b1)] = Tensor<double>({h, w});
    out.mag[std::size_t(p.b2)] = Tensor<double>({h, w});
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double a = y.at(2 * i, 2 * j), b = y.at(2 * i, 2 * j + 1);
        const double c = y.at(2 * i + 1, 2 * j), d = y.at(2 * i + 1, 2 * j + 1);
        out.mag[std::size_t(p.b1)].at(i, j) = std::hypot(a - d, b + c) / r2;
        out.mag[std::size_t(p.b2)].at(i, j) = std::hypot(a + d, b - c) / r2;
      }
  }
  return out;
}

Tensor<double> plane(const Tensor<double>& x, std::size_t n, std::size_t c) {
  const std::size_t C = x.dim(x.rank() - 3), H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  Tensor<double> p({H, W});
  std::copy_n(x.data() + (n * C + c) * H * W, H * W, p.data());
  return p;
}

}  // namespace

TEST(Propagator, ShapeAndChannelCount) {
  SeedRng rng(1);
  auto x = random_normal<double>({3, 16, 16}, rng);
  auto z = wavelet_modulus_propagator(x, set_a());
  EXPECT_EQ(z.dims(), (Shape{21, 8, 8}));
  auto zb = wavelet_modulus_propagator(random_normal<double>({2, 5, 8, 12}, rng), set_a());
  EXPECT_EQ(zb.dims(), (Shape{2, 35, 4, 6}));
  EXPECT_THROW(wavelet_modulus_propagator(random_normal<double>({3, 7, 8}, rng), set_a()), ShapeError);
  EXPECT_THROW(wavelet_modulus_propagator(random_normal<double>({8, 8}, rng), set_a()), ShapeError);
}

TEST(Propagator, MatchesTransformThenModulus) {
  SeedRng rng(2);
  auto x = random_normal<double>({2, 3, 16, 16}, rng);
  auto z = wavelet_modulus_propagator(x, set_b());
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      auto pyr = dtcwt_forward(plane(x, n, c), 1, set_b());
      auto lp = pyr.averaged_lowpass();
      for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_NEAR(z[((n * 21) + 7 * c) * 64 + i], lp[i], 1e-14);
        for (std::size_t k = 0; k < 6; ++k) {
          const double m = std::hypot(pyr.levels[0].real[k * 64 + i], pyr.levels[0].imag[k * 64 + i]);
          EXPECT_NEAR(z[((n * 21) + 7 * c + 1 + k) * 64 + i], m, 1e-14);
        }
      }
    }
}

TEST(Propagator, MatchesNaiveDirectConvolution) {
  SeedRng rng(3);
  for (const FilterSet* f : {&set_a(), &set_b()}) {
    auto x = random_normal<double>({1, 8, 8}, rng);
    auto z = wavelet_modulus_propagator(x, *f);
    auto naive = naive_level1(plane(x, 0, 0), *f);
    for (std::size_t i = 0; i < 16; ++i) {
      EXPECT_NEAR(z[i], naive.lowpass[i], 1e-12);
      for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(z[(1 + k) * 16 + i], naive.mag[k][i], 1e-12) << k;
    }
  }
}

TEST(Propagator, ConstantInputGoesToLowpass) {
  Tensor<double> x({2, 16, 16}, 0.7);
  auto z = wavelet_modulus_propagator(x, set_a());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 64; ++i) {
      EXPECT_NEAR(z[(7 * c) * 64 + i], 0.7, 1e-12);
      for (std::size_t k = 1; k < 7; ++k) EXPECT_NEAR(z[(7 * c + k) * 64 + i], 0.0, 1e-12);
    }
}

TEST(Propagator, MagnitudesNonNegative) {
  SeedRng rng(4);
  auto z = wavelet_modulus_propagator(random_normal<double>({3, 16, 16}, rng), set_a());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 1; k < 7; ++k)
      for (std::size_t i = 0; i < 64; ++i) EXPECT_GE(z[(7 * c + k) * 64 + i], 0.0);
}

TEST(Propagator, SmoothModulusBelowExactAndConverges) {
  SeedRng rng(5);
  auto x = random_normal<double>({1, 16, 16}, rng);
  auto exact = wavelet_modulus_propagator(x, set_a());
  auto smooth = wavelet_modulus_propagator(x, set_a(), MagnitudeOptions{1e-3});
  for (std::size_t i = 0; i < exact.size(); ++i) EXPECT_LE(smooth[i], exact[i] + 1e-15);
  auto tiny = wavelet_modulus_propagator(x, set_a(), MagnitudeOptions{1e-9});
  EXPECT_LT(max_abs_diff(tiny, exact), 1e-8);
}

TEST(Propagator, BackwardMatchesFiniteDifferences) {
  SeedRng rng(6);
  for (double eps : {0.0, 1e-2}) {
    const MagnitudeOptions mo{eps};
    auto x = random_normal<double>({2, 2, 8, 8}, rng);
    PropagatorCache<double> cache;
    auto z = wavelet_modulus_propagator(x, set_a(), mo, &cache);
    auto r = random_normal<double>(z.dims(), rng);
    auto g = wavelet_modulus_propagator_backward(r, cache, set_a(), mo);
    ASSERT_EQ(g.dims(), x.dims());
    auto loss = [&] { return dot(r, wavelet_modulus_propagator(x, set_a(), mo)); };
    EXPECT_LT(fd_max_rel_err(x, g, loss, 0, rng), 1e-5) << "eps " << eps;
  }
}

TEST(Propagator, ZeroBandHasZeroGradient) {
  // Constant input: every band is exactly zero, so only the lowpass path
  // carries gradient.
  Tensor<double> x({1, 8, 8}, 1.0);
  PropagatorCache<double> cache;
  auto z = wavelet_modulus_propagator(x, set_a(), {}, &cache);
  Tensor<double> r(z.dims());
  for (std::size_t i = 64 / 4; i < r.size(); ++i) r[i] = 1.0;  // bands only
  auto g = wavelet_modulus_propagator_backward(r, cache, set_a());
  for (double v : g.values()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_LT(std::abs(v), 1e-6);
  }
}

TEST(Propagator, BackwardWithoutForwardIsUsageError) {
  PropagatorCache<double> empty;
  EXPECT_THROW(wavelet_modulus_propagator_backward(Tensor<double>({7, 4, 4}), empty, set_a()), UsageError);
}

TEST(Scattering, Order2ShapeForRgb) {
  SeedRng rng(7);
  auto s = scatter_order2(random_uniform<double>({3, 32, 32}, rng, 0, 1), set_a());
  EXPECT_EQ(s.coefficients.dims(), (Shape{147, 8, 8}));
  EXPECT_EQ(s.layout.total_channels(), 147u);
  EXPECT_EQ(s.layout.entries.size(), 147u);
  EXPECT_THROW(scatter_order2(random_normal<double>({3, 30, 32}, rng), set_a()), ShapeError);
}

TEST(Scattering, LayoutPartitionsChannels) {
  for (std::size_t order : {1u, 2u}) {
    auto L = make_scatter_layout(3, order);
    std::vector<int> hit(L.total_channels(), 0);
    for (const auto& e : L.entries)
      for (std::size_t c = e.channel_begin; c < e.channel_end; ++c) ++hit.at(c);
    for (int h : hit) EXPECT_EQ(h, 1);
    EXPECT_EQ(L.total_channels(), order == 1 ? 21u : 147u);
  }
  // 1 + 6 + 6 + 36 paths per input channel.
  auto L = make_scatter_layout(1, 2);
  std::size_t by_order[3] = {0, 0, 0};
  for (const auto& e : L.entries) ++by_order[e.wavelet_order()];
  EXPECT_EQ(by_order[0], 1u);
  EXPECT_EQ(by_order[1], 12u);
  EXPECT_EQ(by_order[2], 36u);
  auto L3 = make_scatter_layout(3, 2);
  EXPECT_EQ(L3.entries[49 * 2 + 7 * 3 + 5].label(), "c2:24");
  EXPECT_EQ(L3.entries[49].label(), "c1:LL");
}

TEST(Scattering, Order2PathsMatchExplicitIteration) {
  SeedRng rng(8);
  auto x = random_normal<double>({2, 16, 16}, rng);
  auto s = scatter_order2(x, set_a());
  for (const auto& e : s.layout.entries) {
    auto pyr1 = dtcwt_forward(plane(x, 0, e.input_channel), 1, set_a());
    auto stage = [&](const Pyramid<double>& p, std::size_t gamma) {
      if (gamma == 0) return p.averaged_lowpass();
      const std::size_t h = p.levels[0].real.dim(1), w = p.levels[0].real.dim(2);
      Tensor<double> m({h, w});
      for (std::size_t i = 0; i < h * w; ++i)
        m[i] = std::hypot(p.levels[0].real[(gamma - 1) * h * w + i], p.levels[0].imag[(gamma - 1) * h * w + i]);
      return m;
    };
    auto u1 = stage(pyr1, e.gamma[0]);
    auto u2 = stage(dtcwt_forward(u1, 1, set_a()), e.gamma[1]);
    for (std::size_t i = 0; i < 16; ++i)
      ASSERT_NEAR(s.coefficients[e.channel_begin * 16 + i], u2[i], 1e-13) << e.label();
  }
}

TEST(Scattering, DistanceBasics) {
  SeedRng rng(9);
  auto x = random_normal<double>({3, 16, 16}, rng);
  auto y = random_normal<double>({3, 16, 16}, rng);
  EXPECT_EQ(scatter_distance(x, x, set_a()), 0.0);
  EXPECT_DOUBLE_EQ(scatter_distance(x, y, set_a()), scatter_distance(y, x, set_a()));
  EXPECT_THROW(scatter_distance(x, random_normal<double>({3, 16, 20}, rng), set_a()), ShapeError);
}

TEST(Scattering, NonExpansiveOnRandomPairs) {
  SeedRng rng(10);
  for (const FilterSet* f : {&set_a(), &set_b()})
    for (int t = 0; t < 20; ++t) {
      auto x = random_normal<double>({3, 32, 32}, rng);
      auto y = x + random_normal<double>({3, 32, 32}, rng, t % 2 ? 1.0 : 0.01);
      EXPECT_LE(scatter_distance(x, y, *f), norm2(x - y) * (1 + 1e-6));
      EXPECT_LE(norm2(scatter_order2(x, *f).coefficients), norm2(x) * (1 + 1e-6));
    }
}

TEST(Warp, ZeroDisplacementIsIdentity) {
  SeedRng rng(11);
  auto x = random_normal<double>({2, 12, 10}, rng);
  EXPECT_EQ(max_abs_diff(warp_image(x, constant_shift(12, 10, 0, 0)), x), 0.0);
}

TEST(Warp, IntegerShiftIsExtendedShift) {
  SeedRng rng(12);
  auto x = random_normal<double>({1, 12, 10}, rng);
  auto y = warp_image(x, constant_shift(12, 10, 2, -1));
  for (std::size_t i = 2; i < 12; ++i)
    for (std::size_t j = 0; j + 1 < 10; ++j) EXPECT_DOUBLE_EQ(y.at(0, i, j), x.at(0, i - 2, j + 1));
  // Symmetric boundary: rows 0,1 mirror rows 1,0.
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0), x.at(0, 1, 1));
  EXPECT_DOUBLE_EQ(y.at(0, 1, 0), x.at(0, 0, 1));
}

TEST(Warp, GradientBoundEnforced) {
  Tensor<double> tau({2, 16, 16});
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) tau.at(0, i, j) = 0.3 * double(i);  // d tau / du = 0.3
  StabilityProbe ok(tau);
  EXPECT_NEAR(ok.max_grad, 0.3, 1e-12);
  EXPECT_NO_THROW(warp_image(Tensor<double>({16, 16}), ok));
  tau *= 2.0;
  StabilityProbe bad(tau);
  EXPECT_NEAR(bad.max_grad, 0.6, 1e-12);
  EXPECT_THROW(warp_image(Tensor<double>({16, 16}), bad), PreconditionError);
  EXPECT_THROW(StabilityProbe(Tensor<double>({3, 4, 4})), ShapeError);
}

TEST(Warp, SmoothDisplacementAmplitude) {
  auto p = smooth_random_displacement(32, 32, 0.5, 3);
  EXPECT_NEAR(p.max_abs_displacement(), 0.5, 1e-12);
  EXPECT_LT(p.max_grad, 0.25);
  auto q = smooth_random_displacement(32, 32, 0.5, 3);
  EXPECT_EQ(max_abs_diff(p.tau, q.tau), 0.0);
}

TEST(Stability, ShiftRatiosOnNaturalProxy) {
  const auto imgs = proxy_images(20, 77);
  double w1 = 0, w2 = 0;
  for (const auto& x : imgs) {
    for (double s : {1.0, 2.0}) {
      w1 = std::max(w1, shift_distance_ratio(x, s, 0.0, 1, set_a()));
      w1 = std::max(w1, shift_distance_ratio(x, 0.0, s, 1, set_a()));
    }
    for (double s : {1.0, 2.0, 4.0}) {
      w2 = std::max(w2, shift_distance_ratio(x, s, 0.0, 2, set_a()));
      w2 = std::max(w2, shift_distance_ratio(x, 0.0, s, 2, set_a()));
    }
  }
  EXPECT_LT(w1, 0.5);
  EXPECT_LT(w2, 0.35);
}

TEST(Stability, WarpCurveMonotoneAndBelowPixelDistance) {
  const auto imgs = proxy_images(20, 78);
  const std::vector<double> amps = {0.14, 0.28, 0.42, 0.56, 0.7};
  auto curve = warp_stability_curve(imgs, amps, 20, set_a());
  ASSERT_EQ(curve.size(), 5u);
  for (std::size_t a = 0; a < curve.size(); ++a) {
    EXPECT_LE(curve[a].max_grad, 0.25);
    EXPECT_LT(curve[a].scatter_rel, curve[a].pixel_rel);
    if (a) {
      EXPECT_GT(curve[a].scatter_rel, curve[a - 1].scatter_rel);
    }
  }
  auto zero = warp_stability_curve(imgs, {0.0}, 3, set_a());
  EXPECT_EQ(zero[0].scatter_rel, 0.0);
}
