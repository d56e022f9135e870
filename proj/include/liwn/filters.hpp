#pragma once

// DTCWT filter sets loaded from the versioned text assets in assets/filters.

#include <zlib.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "liwn/error.hpp"

namespace liwn {

inline constexpr int kFilterAssetVersion = 1;

inline std::uint32_t crc32_bytes(const void* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

/// Raw contents of one asset file.
struct FilterAsset {
  std::string name;
  std::string kind;  // "level1" or "qshift"
  int version = 0;
  std::map<std::string, std::vector<double>> taps;

  const std::vector<double>& at(const std::string& tap) const {
    auto it = taps.find(tap);
    if (it == taps.end()) throw ConfigError("filter asset " + name + " lacks tap list " + tap);
    return it->second;
  }
};

/// Where assets live: $LIWN_ASSET_DIR, else the directory baked in at build time.
inline std::filesystem::path default_asset_dir() {
  if (const char* env = std::getenv("LIWN_ASSET_DIR"); env && *env) return env;
#ifdef LIWN_DEFAULT_ASSET_DIR
  return LIWN_DEFAULT_ASSET_DIR;
#else
  return "assets";
#endif
}

/// Parses an asset file. The last line must be "checksum <crc32 hex>" over all
/// preceding bytes.
inline FilterAsset read_filter_asset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open filter asset " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const auto pos = bytes.rfind("checksum ");
  if (pos == std::string::npos || (pos > 0 && bytes[pos - 1] != '\n'))
    throw ConfigError(path.string() + ": missing checksum line");
  std::uint32_t stated = 0;
  {
    std::istringstream cs(bytes.substr(pos + 9));
    cs >> std::hex >> stated;
    if (!cs) throw ConfigError(path.string() + ": unreadable checksum");
  }
  const std::uint32_t actual = crc32_bytes(bytes.data(), pos);
  if (actual != stated) {
    std::ostringstream os;
    os << path.string() << ": checksum mismatch (file says " << std::hex << stated
       << ", contents give " << actual << ")";
    throw ConfigError(os.str());
  }

  FilterAsset a;
  std::istringstream body(bytes.substr(0, pos));
  std::string line;
  while (std::getline(body, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "version") {
      ls >> a.version;
    } else if (key == "name") {
      ls >> a.name;
    } else if (key == "kind") {
      ls >> a.kind;
    } else {
      std::size_t count = 0;
      if (!(ls >> count) || count == 0) throw ConfigError(path.string() + ": bad tap count for " + key);
      std::vector<double> v(count);
      for (auto& t : v)
        if (!(ls >> t)) throw ConfigError(path.string() + ": short tap list " + key);
      std::string extra;
      if (ls >> extra) throw ConfigError(path.string() + ": too many taps for " + key);
      a.taps[key] = std::move(v);
    }
  }
  if (a.version != kFilterAssetVersion)
    throw ConfigError(path.string() + ": unsupported asset version " + std::to_string(a.version));
  if (a.kind != "level1" && a.kind != "qshift")
    throw ConfigError(path.string() + ": unknown asset kind '" + a.kind + "'");
  return a;
}

namespace detail {

inline double tap_sum(const std::vector<double>& h) {
  double s = 0;
  for (double v : h) s += v;
  return s;
}

inline std::vector<double> reversed(std::vector<double> h) {
  std::reverse(h.begin(), h.end());
  return h;
}

inline std::vector<double> scaled(std::vector<double> h, double s) {
  for (auto& v : h) v *= s;
  return h;
}

inline std::vector<double> full_conv(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> c(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) c[i + j] += a[i] * b[j];
  return c;
}

inline void expect(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("filter set invariant violated: " + what);
}

}  // namespace detail

/// A complete DTCWT filter bank: a level-1 biorthogonal pair plus a q-shift
/// pair for levels >= 2.
///
/// Level-1 taps are held in the orthonormal convention (lowpass sums to
/// sqrt(2)); the published tables use unit DC gain, so loading multiplies by
/// sqrt(2) and the transform applies a 1/2 factor per 2-D level-1 stage.
struct FilterSet {
  std::string name;
  std::string level1_name;
  std::string qshift_name;
  int version = kFilterAssetVersion;

  std::vector<double> h0o, h1o, g0o, g1o;
  std::vector<double> h0a, h0b, h1a, h1b, g0a, g0b, g1a, g1b;

  static constexpr double level1_gain = 0.5;
};

inline constexpr double kLevel1SumTol = 1e-8;
inline constexpr double kQshiftHighpassSumTol = 2e-5;
inline constexpr double kOrthoTol = 1e-12;

inline void validate_level1(const FilterSet& f) {
  using detail::expect;
  const double r2 = std::sqrt(2.0);
  expect(f.h0o.size() % 2 == 1 && f.h1o.size() % 2 == 1 && f.g0o.size() % 2 == 1 &&
             f.g1o.size() % 2 == 1,
         f.level1_name + " level-1 taps must have odd length");
  expect(std::abs(detail::tap_sum(f.h0o) - r2) < kLevel1SumTol, f.level1_name + " h0o sum");
  expect(std::abs(detail::tap_sum(f.g0o) - r2) < kLevel1SumTol, f.level1_name + " g0o sum");
  expect(std::abs(detail::tap_sum(f.h1o)) < kLevel1SumTol, f.level1_name + " h1o sum");
  expect(std::abs(detail::tap_sum(f.g1o)) < kLevel1SumTol, f.level1_name + " g1o sum");
  // No distortion: h0*g0 + h1*g1 is 2 delta at the common centre.
  auto a = detail::full_conv(f.h0o, f.g0o);
  auto b = detail::full_conv(f.h1o, f.g1o);
  expect(a.size() == b.size(), f.level1_name + " analysis/synthesis lengths do not pair");
  const std::size_t mid = a.size() / 2;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double want = (i == mid) ? 2.0 : 0.0;
    expect(std::abs(a[i] + b[i] - want) < 1e-10, f.level1_name + " perfect reconstruction");
  }
}

inline void validate_qshift(const FilterSet& f) {
  using detail::expect;
  const double r2 = std::sqrt(2.0);
  const std::size_t m = f.h0a.size();
  expect(m % 2 == 0 && m >= 4, f.qshift_name + " q-shift taps must have even length");
  for (const auto* h : {&f.h0b, &f.h1a, &f.h1b, &f.g0a, &f.g0b, &f.g1a, &f.g1b})
    expect(h->size() == m, f.qshift_name + " tap lists differ in length");
  expect(std::abs(detail::tap_sum(f.h0a) - r2) < kLevel1SumTol, f.qshift_name + " h0a sum");
  expect(std::abs(detail::tap_sum(f.h1a)) < kQshiftHighpassSumTol, f.qshift_name + " h1a sum");
  expect(f.h0b == detail::reversed(f.h0a), f.qshift_name + " h0b != reverse(h0a)");
  expect(f.h1b == detail::reversed(f.h1a), f.qshift_name + " h1b != reverse(h1a)");
  expect(f.g0a == f.h0b && f.g0b == f.h0a, f.qshift_name + " g0 must be the time-reversed h0");
  expect(f.g1a == f.h1b && f.g1b == f.h1a, f.qshift_name + " g1 must be the time-reversed h1");
  // Orthonormal under even shifts.
  for (std::size_t s = 0; s < m; s += 2) {
    double ll = 0, hh = 0, lh = 0;
    for (std::size_t k = 0; k + s < m; ++k) {
      ll += f.h0a[k] * f.h0a[k + s];
      hh += f.h1a[k] * f.h1a[k + s];
      lh += f.h0a[k] * f.h1a[k + s] + (s ? f.h0a[k + s] * f.h1a[k] : 0.0);
    }
    const double want = s == 0 ? 1.0 : 0.0;
    expect(std::abs(ll - want) < kOrthoTol && std::abs(hh - want) < kOrthoTol &&
               std::abs(lh) < kOrthoTol,
           f.qshift_name + " orthonormality");
  }
}

/// Loads "<level1>" (paired with its conventional q-shift set) or
/// "<level1>+<qshift>" from `asset_dir`, validating every invariant.
inline FilterSet load_filter_set(const std::string& name,
                                 const std::filesystem::path& asset_dir = default_asset_dir()) {
  static const std::map<std::string, std::string> default_qshift = {
      {"near_sym_a", "qshift_a"}, {"near_sym_b", "qshift_b"}};
  std::string l1 = name, qs;
  if (auto plus = name.find('+'); plus != std::string::npos) {
    l1 = name.substr(0, plus);
    qs = name.substr(plus + 1);
  } else {
    auto it = default_qshift.find(name);
    if (it == default_qshift.end()) throw ConfigError("unknown filter set '" + name + "'");
    qs = it->second;
  }
  const auto dir = asset_dir / "filters";
  for (const auto& n : {l1, qs})
    if (n.empty() || !std::filesystem::exists(dir / (n + ".txt")))
      throw ConfigError("unknown filter set '" + n + "' (no asset in " + dir.string() + ")");

  const FilterAsset a1 = read_filter_asset(dir / (l1 + ".txt"));
  const FilterAsset aq = read_filter_asset(dir / (qs + ".txt"));
  if (a1.kind != "level1") throw ConfigError(l1 + " is not a level-1 filter set");
  if (aq.kind != "qshift") throw ConfigError(qs + " is not a q-shift filter set");

  FilterSet f;
  f.name = name;
  f.level1_name = a1.name;
  f.qshift_name = aq.name;
  f.version = a1.version;
  const double r2 = std::sqrt(2.0);
  f.h0o = detail::scaled(a1.at("h0o"), r2);
  f.h1o = detail::scaled(a1.at("h1o"), r2);
  f.g0o = detail::scaled(a1.at("g0o"), r2);
  f.g1o = detail::scaled(a1.at("g1o"), r2);
  f.h0a = aq.at("h0a");
  f.h0b = aq.at("h0b");
  f.h1a = aq.at("h1a");
  f.h1b = aq.at("h1b");
  f.g0a = aq.at("g0a");
  f.g0b = aq.at("g0b");
  f.g1a = aq.at("g1a");
  f.g1b = aq.at("g1b");
  validate_level1(f);
  validate_qshift(f);
  return f;
}

}  // namespace liwn
