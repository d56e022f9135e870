#pragma once

// Finite-difference checks of Network backward passes.
//
// Loss is <r, net(x)> for a fixed random r. Each sampled coordinate is
// perturbed by +-h and +-h/2 and the two central differences are combined by
// Richardson extrapolation, (4 D(h/2) - D(h)) / 3. If any perturbation changes
// a kink decision (ReLU mask, pooling winner, near-zero modulus) the
// coordinate is excluded and counted.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "liwn/filters.hpp"
#include "liwn/invariant_layer.hpp"
#include "liwn/models.hpp"
#include "liwn/nn.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

struct GradcheckOptions {
  std::size_t samples = 24;  // coordinates per tensor
  double step = 1e-5;
  double floor = 1e-4;  // denominator floor in the relative error
  double tol = 1e-5;
  std::uint64_t seed = 7;
};

struct GradcheckEntry {
  std::string name;
  double max_rel = 0;
  std::size_t checked = 0, excluded = 0;
};

struct GradcheckReport {
  std::string subject;
  double tol = 1e-5;
  std::vector<GradcheckEntry> entries;

  double max_rel() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel);
    return m;
  }
  bool pass() const {
    for (const auto& e : entries)
      if (!(e.max_rel < tol) || e.checked == 0) return false;
    return !entries.empty();
  }
  std::string text() const {
    std::ostringstream os;
    os << subject << ": " << (pass() ? "PASS" : "FAIL") << "  max rel err " << std::scientific
       << std::setprecision(2) << max_rel() << " (tol " << tol << ")\n";
    for (const auto& e : entries)
      os << "  " << std::left << std::setw(18) << e.name << std::right << " max rel " << std::scientific
         << std::setprecision(2) << e.max_rel << "  checked " << e.checked << "  excluded " << e.excluded << "\n";
    return os.str();
  }
};

inline GradcheckOptions model_gradcheck_options() {
  GradcheckOptions o;
  o.samples = 12;
  return o;
}

namespace detail {

inline double rel_err(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, SeedRng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (k >= n) return idx;
  rng.shuffle(idx);
  idx.resize(k);
  return idx;
}

}  // namespace detail

/// Checks d<r, net(x)>/d(theta) for every trainable parameter tensor and for x.
inline GradcheckReport gradcheck_network(Network<double>& net, const Tensor<double>& x, const std::string& subject,
                                         const GradcheckOptions& o = {}) {
  GradcheckReport rep;
  rep.subject = subject;
  rep.tol = o.tol;
  SeedRng rng(o.seed, 11);
  auto run = [&](const Tensor<double>& in) {
    net.reseed(o.seed, 0);
    return net.forward(in, Mode::train);
  };

  const Tensor<double> y0 = run(x);
  const std::uint64_t sig0 = net.kink_signature();
  const Tensor<double> r = random_normal<double>(y0.dims(), rng);
  net.zero_grad();
  const Tensor<double> gx = net.backward(r);

  auto loss = [&](const Tensor<double>& in, bool& kinked) {
    const Tensor<double> y = run(in);
    kinked = kinked || net.kink_signature() != sig0;
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };

  auto check = [&](const std::string& name, Tensor<double>& theta, const Tensor<double>& analytic,
                   const Tensor<double>& input) {
    GradcheckEntry e;
    e.name = name;
    for (std::size_t i : detail::sample_indices(theta.size(), o.samples, rng)) {
      const double v = theta[i];
      bool kinked = false;
      auto central = [&](double h) {
        theta[i] = v + h;
        const double lp = loss(input, kinked);
        theta[i] = v - h;
        const double lm = loss(input, kinked);
        theta[i] = v;
        return (lp - lm) / (2 * h);
      };
      const double d1 = central(o.step), d2 = central(o.step / 2);
      if (kinked) {
        ++e.excluded;
        continue;
      }
      ++e.checked;
      e.max_rel = std::max(e.max_rel, detail::rel_err(analytic[i], (4 * d2 - d1) / 3, o.floor));
    }
    rep.entries.push_back(e);
  };

  for (Param<double>* p : net.params()) {
    if (!p->trainable) continue;
    const Tensor<double> analytic = p->grad;
    check(p->name, p->value, analytic, x);
  }
  Tensor<double> xin = x;
  check("input", xin, gx, xin);
  return rep;
}

/// One tiny network per layer kind, each checked on a 2-sample batch.
/// `fault` scales the backward of the layer under test (1 = healthy).
inline std::vector<GradcheckReport> gradcheck_layer_kinds(const FilterSet& f, std::size_t side = 8,
                                                          const GradcheckOptions& o = {}, double fault = 1.0) {
  struct Case {
    std::string kind;
    std::size_t cin;
    std::function<void(Network<double>&, SeedRng&)> build;
  };
  const std::vector<Case> cases = {
      {"conv3x3", 3, [](Network<double>& n, SeedRng& r) { n.emplace<Conv2d<double>>("conv", 3, 4, 3, 1, true, r); }},
      {"conv3x3_stride2", 3,
       [](Network<double>& n, SeedRng& r) { n.emplace<Conv2d<double>>("conv", 3, 4, 3, 2, false, r); }},
      {"relu", 3, [](Network<double>& n, SeedRng&) { n.emplace<ReLU<double>>("relu"); }},
      {"batchnorm", 3,
       [](Network<double>& n, SeedRng& r) {
         auto& bn = n.emplace<BatchNorm2d<double>>("bn", 3);
         bn.gamma().value = random_uniform<double>({3}, r, 0.5, 1.5);
         bn.beta().value = random_uniform<double>({3}, r, -0.5, 0.5);
       }},
      {"maxpool", 3, [](Network<double>& n, SeedRng&) { n.emplace<MaxPool2x<double>>("pool"); }},
      {"gap", 3, [](Network<double>& n, SeedRng&) { n.emplace<GlobalAvgPool<double>>("gap"); }},
      {"fc", 3,
       [side](Network<double>& n, SeedRng& r) { n.emplace<Linear<double>>("fc", 3 * side * side, 5, r); }},
      {"dropout", 3, [](Network<double>& n, SeedRng&) { n.emplace<Dropout<double>>("drop", 0.3); }},
      {"inv_learned", 3,
       [&f](Network<double>& n, SeedRng& r) {
         auto p = init_invariant_params<double>(3, 5, f, r, {});
         p.alpha = random_uniform<double>({3}, r, 0.0, 1.0);
         n.emplace<InvariantModule<double>>("inv", p, f, true, true);
       }},
      {"inv_upsampled", 3,
       [&f](Network<double>& n, SeedRng& r) {
         InvariantLayerFlags fl;
         fl.apply_relu = false;
         fl.upsample_out = true;
         n.emplace<InvariantModule<double>>("inv", init_invariant_params<double>(3, 4, f, r, fl), f, true);
       }},
      {"inv_identity", 3,
       [&f](Network<double>& n, SeedRng& r) {
         // fixed scattering stage followed by a learned 1x1 conv so the input
         // gradient passes through the identity-mode layer
         n.emplace<InvariantModule<double>>("inv", make_identity_mixing<double>(3, lowpass_dc_gain(f), 1.0), f,
                                            false);
         n.emplace<Conv2d<double>>("mix", 21, 2, 1, 1, false, r);
       }},
  };
  std::vector<GradcheckReport> out;
  for (const auto& c : cases) {
    SeedRng rng(o.seed, 101);
    Network<double> net;
    c.build(net, rng);
    net.layer(0).backward_fault_scale = fault;
    const Tensor<double> x = random_normal<double>({2, c.cin, side, side}, rng);
    out.push_back(gradcheck_network(net, x, c.kind, o));
  }
  return out;
}

/// Reference VGG, one swap and ScatNet B at small widths, 2 samples.
inline std::vector<GradcheckReport> gradcheck_model_variants(const FilterSet& f, std::size_t side = 8,
                                                             const GradcheckOptions& o = model_gradcheck_options()) {
  std::vector<std::pair<std::string, ModelSpec>> specs;
  specs.emplace_back("ref_vgg", build_reference_vgg("cifar10", 4));
  specs.emplace_back("ref+B", apply_inv_swaps(build_reference_vgg("cifar10", 4), {'B'}));
  specs.emplace_back("scatnet_b", build_scatnet('B', 2, "cifar10"));
  std::vector<GradcheckReport> out;
  for (auto& [label, spec] : specs) {
    spec.input = {3, side, side};
    auto net = build_network<double>(spec, f, o.seed);
    SeedRng rng(o.seed, 202);
    const Tensor<double> x = random_normal<double>({2, 3, side, side}, rng);
    out.push_back(gradcheck_network(net, x, label, o));
  }
  return out;
}

}  // namespace liwn
