#pragma once

// Analytic parameter and multiply counts for a ModelSpec.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "liwn/error.hpp"
#include "liwn/filters.hpp"
#include "liwn/models.hpp"

namespace liwn {

struct CostAssumptions {
  std::size_t L = 6;  // wavelet filter length in the cost model
  std::size_t J = 1;
  std::size_t K = 6;
  std::size_t upsample_mults = 3;  // per output pixel
};

struct CostRow {
  std::string name, kind;
  std::uint64_t params = 0;
  double mults_per_input_pixel = 0;  // per pixel of the layer's input, C_in H W
  std::uint64_t mults_per_image = 0;
};

struct CostReport {
  std::string model;
  CostAssumptions assumptions;
  std::vector<CostRow> rows;
  std::size_t learned_layers = 0;
  // Wavelet filtering multiplies per input pixel of the shipped taps
  // (rows, then columns of both streams, at full rate): 3 (m0 + m1).
  double measured_wavelet_mults_per_pixel = 0;
  std::string filters;

  std::uint64_t total_params() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) s += r.params;
    return s;
  }
  std::uint64_t total_mults() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) s += r.mults_per_image;
    return s;
  }
};

/// Wavelet part of an invariant layer per input pixel: 8 L (1 - 2^(-2J)).
inline double wavelet_mults_per_pixel(const CostAssumptions& a) {
  return 8.0 * double(a.L) * (1.0 - std::pow(2.0, -2.0 * double(a.J)));
}

/// Mixing + wavelet multiplies per input pixel of an invariant layer.
inline double invariant_mults_per_pixel(std::size_t c_out, const CostAssumptions& a = {}) {
  return double(a.J * a.K + 1) / 4.0 * double(c_out) + wavelet_mults_per_pixel(a);
}

inline double conv_mults_per_pixel(std::size_t c_out, std::size_t L) { return double(L * L * c_out); }

inline std::uint64_t invariant_params(std::size_t c_in, std::size_t c_out, const CostAssumptions& a = {}) {
  return std::uint64_t(a.J * a.K + 1) * c_in * c_out;
}

inline CostRow audit_layer(const LayerSpec& l, const CostAssumptions& a) {
  if (l.in_shape.empty() || l.out_shape.empty()) throw PreconditionError("layer " + l.name + " has unresolved shapes");
  CostRow r;
  r.name = l.name;
  r.kind = l.kind;
  const std::uint64_t in_px = shape_size(l.in_shape);
  if (l.kind == "conv") {
    const std::uint64_t k = l.get_size("k", 3), cin = l.get_size("in"), cout = l.get_size("out");
    r.params = k * k * cin * cout + (l.get_bool("bias", false) ? cout : 0);
    const std::uint64_t out_px = l.out_shape[1] * l.out_shape[2];
    r.mults_per_image = k * k * cin * cout * out_px;
  } else if (l.kind == "inv") {
    const std::uint64_t cin = l.get_size("in"), cout = l.get_size("out");
    const bool learned = l.get_bool("learned", true);
    if (learned) r.params = invariant_params(cin, cout, a) + (l.get_bool("learn_alpha", false) ? cin : 0);
    const std::uint64_t h = l.in_shape[1] / 2, w = l.in_shape[2] / 2;
    std::uint64_t m = std::uint64_t(std::llround(wavelet_mults_per_pixel(a) * double(in_px)));
    if (learned) m += std::uint64_t(a.J * a.K + 1) * cin * cout * h * w;
    if (l.get_bool("up", false)) m += a.upsample_mults * cout * l.out_shape[1] * l.out_shape[2];
    r.mults_per_image = m;
  } else if (l.kind == "bn") {
    r.params = 2 * l.get_size("channels");
  } else if (l.kind == "fc") {
    const std::uint64_t in = l.get_size("in"), out = l.get_size("out");
    r.params = in * out + out;
    r.mults_per_image = in * out;
  } else if (l.kind != "relu" && l.kind != "dropout" && l.kind != "gap" && l.kind != "maxpool") {
    throw ConfigError("cannot audit layer kind '" + l.kind + "'");
  }
  r.mults_per_input_pixel = double(r.mults_per_image) / double(in_px);
  return r;
}

inline CostReport audit_model(ModelSpec m, const CostAssumptions& a = {}, const FilterSet* shipped = nullptr) {
  m.resolve_shapes();
  CostReport rep;
  rep.model = m.name;
  rep.assumptions = a;
  rep.learned_layers = m.learned_layer_count();
  for (const auto& l : m.layers) rep.rows.push_back(audit_layer(l, a));
  if (shipped) {
    rep.filters = shipped->name;
    rep.measured_wavelet_mults_per_pixel = 3.0 * double(shipped->h0o.size() + shipped->h1o.size());
  }
  return rep;
}

inline std::string report_table(const CostReport& r) {
  std::ostringstream os;
  os << "model " << r.model << "  (L=" << r.assumptions.L << ", J=" << r.assumptions.J << ", K=" << r.assumptions.K
     << ", learned layers " << r.learned_layers << ")\n";
  os << std::left << std::setw(10) << "layer" << std::setw(9) << "kind" << std::right << std::setw(12) << "params"
     << std::setw(16) << "mults/in-pixel" << std::setw(16) << "mults/image" << "\n";
  for (const auto& row : r.rows)
    os << std::left << std::setw(10) << row.name << std::setw(9) << row.kind << std::right << std::setw(12)
       << row.params << std::setw(16) << std::fixed << std::setprecision(2) << row.mults_per_input_pixel
       << std::setw(16) << row.mults_per_image << "\n";
  os << std::left << std::setw(19) << "total" << std::right << std::setw(12) << r.total_params() << std::setw(16)
     << "" << std::setw(16) << r.total_mults() << "\n";
  if (!r.filters.empty())
    os << "wavelet mults/pixel: model " << std::setprecision(2) << wavelet_mults_per_pixel(r.assumptions)
       << ", shipped " << r.filters << " taps " << r.measured_wavelet_mults_per_pixel << "\n";
  return os.str();
}

/// One row per layer, tab-separated, with a header line.
inline std::string report_tsv(const CostReport& r) {
  std::ostringstream os;
  os << "layer\tkind\tparams\tmults_per_input_pixel\tmults_per_image\n";
  os << std::setprecision(10);
  for (const auto& row : r.rows)
    os << row.name << '\t' << row.kind << '\t' << row.params << '\t' << row.mults_per_input_pixel << '\t'
       << row.mults_per_image << '\n';
  os << "total\t-\t" << r.total_params() << "\t-\t" << r.total_mults() << '\n';
  return os.str();
}

}  // namespace liwn
