#pragma once

// CIFAR-10/100 binary ingestion, stratified subsets, normalisation,
// augmentation and two synthetic datasets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "liwn/error.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImagePixels = kImageChannels * kImageSide * kImageSide;

struct LabeledImage {
  Tensor<float> pixels;  // [3, 32, 32] in [0, 1] for CIFAR
  std::uint32_t label = 0;
  std::uint32_t coarse_label = 0;  // CIFAR-100 only
  std::size_t source_index = 0;
};

struct Dataset {
  std::vector<LabeledImage> records;
  std::size_t classes = 0;

  std::size_t size() const { return records.size(); }
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(classes, 0);
    for (const auto& r : records) ++c.at(r.label);
    return c;
  }
};

struct DatasetSplits {
  Dataset train, test;
};

enum class CifarKind { cifar10, cifar100 };

inline std::size_t cifar_record_bytes(CifarKind k) { return k == CifarKind::cifar10 ? 3073 : 3074; }

/// Parses one record: label byte(s) then 3 x 1024 plane-major pixel bytes.
inline LabeledImage parse_cifar_record(const std::uint8_t* rec, CifarKind kind, std::size_t index) {
  LabeledImage img;
  std::size_t off = 1;
  if (kind == CifarKind::cifar10) {
    img.label = rec[0];
  } else {
    img.coarse_label = rec[0];
    img.label = rec[1];
    off = 2;
  }
  img.pixels = Tensor<float>({kImageChannels, kImageSide, kImageSide});
  for (std::size_t i = 0; i < kImagePixels; ++i) img.pixels[i] = float(rec[off + i]) / 255.0f;
  img.source_index = index;
  return img;
}

/// Inverse of parse_cifar_record for pixels that are multiples of 1/255.
inline std::vector<std::uint8_t> serialize_cifar_record(const LabeledImage& img, CifarKind kind) {
  if (img.pixels.size() != kImagePixels) throw ShapeError("CIFAR records are 3x32x32");
  std::vector<std::uint8_t> out;
  out.reserve(cifar_record_bytes(kind));
  if (kind == CifarKind::cifar100) out.push_back(std::uint8_t(img.coarse_label));
  out.push_back(std::uint8_t(img.label));
  for (std::size_t i = 0; i < kImagePixels; ++i) {
    const float v = std::clamp(img.pixels[i], 0.0f, 1.0f);
    out.push_back(std::uint8_t(std::lround(v * 255.0f)));
  }
  return out;
}

inline void read_cifar_file(const std::filesystem::path& p, CifarKind kind, std::size_t expected,
                            Dataset& into) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("missing dataset file " + p.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t rb = cifar_record_bytes(kind);
  if (bytes.size() != expected * rb)
    throw FormatError(p.string() + ": expected " + std::to_string(expected * rb) + " bytes, found " +
                      std::to_string(bytes.size()));
  const std::size_t base = into.records.size();
  for (std::size_t r = 0; r < expected; ++r) {
    auto img = parse_cifar_record(bytes.data() + r * rb, kind, base + r);
    if (img.label >= into.classes)
      throw FormatError(p.string() + ": label " + std::to_string(img.label) + " out of range");
    into.records.push_back(std::move(img));
  }
}

namespace detail {
// Accept either the extracted batch directory or its parent.
inline std::filesystem::path cifar_dir(const std::filesystem::path& dir, const char* sub,
                                       const char* probe) {
  if (std::filesystem::exists(dir / probe)) return dir;
  if (std::filesystem::exists(dir / sub / probe)) return dir / sub;
  throw ConfigError("no " + std::string(probe) + " under " + dir.string());
}
}  // namespace detail

inline DatasetSplits load_cifar10(const std::filesystem::path& dir) {
  const auto d = detail::cifar_dir(dir, "cifar-10-batches-bin", "test_batch.bin");
  DatasetSplits s;
  s.train.classes = s.test.classes = 10;
  for (int b = 1; b <= 5; ++b)
    read_cifar_file(d / ("data_batch_" + std::to_string(b) + ".bin"), CifarKind::cifar10, 10000, s.train);
  read_cifar_file(d / "test_batch.bin", CifarKind::cifar10, 10000, s.test);
  return s;
}

inline DatasetSplits load_cifar100(const std::filesystem::path& dir) {
  const auto d = detail::cifar_dir(dir, "cifar-100-binary", "test.bin");
  DatasetSplits s;
  s.train.classes = s.test.classes = 100;
  read_cifar_file(d / "train.bin", CifarKind::cifar100, 50000, s.train);
  read_cifar_file(d / "test.bin", CifarKind::cifar100, 10000, s.test);
  return s;
}

/// Stratified subset of n records, in original order. Each class gets
/// n / classes records; when n is not a multiple, the first n % classes
/// classes get one extra.
inline Dataset subset(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n > d.size()) throw PreconditionError("subset of " + std::to_string(n) + " from " +
                                            std::to_string(d.size()) + " records");
  if (n == d.size()) return d;
  std::vector<std::vector<std::size_t>> by_class(d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class.at(d.records[i].label).push_back(i);
  SeedRng rng(seed);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < d.classes; ++c) {
    const std::size_t want = n / d.classes + (c < n % d.classes ? 1 : 0);
    auto& idx = by_class[c];
    if (want > idx.size())
      throw PreconditionError("class " + std::to_string(c) + " has only " + std::to_string(idx.size()) +
                              " records");
    rng.shuffle(idx);
    keep.insert(keep.end(), idx.begin(), idx.begin() + std::ptrdiff_t(want));
  }
  std::sort(keep.begin(), keep.end());
  Dataset out;
  out.classes = d.classes;
  for (auto i : keep) out.records.push_back(d.records[i]);
  return out;
}

struct ChannelStats {
  std::vector<double> mean, stddev;
};

inline ChannelStats channel_stats(const Dataset& train) {
  if (train.records.empty()) throw PreconditionError("channel statistics of an empty dataset");
  const std::size_t C = train.records[0].pixels.dim(0);
  const std::size_t plane = train.records[0].pixels.size() / C;
  ChannelStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  std::vector<double> sq(C, 0.0);
  for (const auto& r : train.records)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = r.pixels[c * plane + i];
        s.mean[c] += v;
        sq[c] += v * v;
      }
  const double n = double(train.size() * plane);
  for (std::size_t c = 0; c < C; ++c) {
    s.mean[c] /= n;
    s.stddev[c] = std::sqrt(std::max(sq[c] / n - s.mean[c] * s.mean[c], 1e-12));
  }
  return s;
}

inline void normalize(Dataset& d, const ChannelStats& s) {
  for (auto& r : d.records) {
    const std::size_t C = r.pixels.dim(0), plane = r.pixels.size() / C;
    if (C != s.mean.size()) throw ShapeError("channel statistics do not match the images");
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        r.pixels[c * plane + i] = float((r.pixels[c * plane + i] - s.mean[c]) / s.stddev[c]);
  }
}

enum class AugmentPolicy { none, standard };

inline AugmentPolicy parse_augment_policy(const std::string& s) {
  if (s == "none") return AugmentPolicy::none;
  if (s == "standard") return AugmentPolicy::standard;
  throw ConfigError("unknown augmentation policy '" + s + "'");
}

inline constexpr std::size_t kAugmentPad = 4;

/// Crop at (dy, dx) in the 4-pixel reflect-padded image, then optional flip.
template <typename T>
Tensor<T> crop_and_flip(const Tensor<T>& img, std::size_t dy, std::size_t dx, bool flip) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto pad = std::ptrdiff_t(kAugmentPad);
  // Reflect without repeating the edge sample.
  auto refl = [](std::ptrdiff_t i, std::ptrdiff_t n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    return std::size_t(i);
  };
  Tensor<T> out({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t jj = flip ? W - 1 - j : j;
        const std::size_t si = refl(std::ptrdiff_t(i + dy) - pad, std::ptrdiff_t(H));
        const std::size_t sj = refl(std::ptrdiff_t(jj + dx) - pad, std::ptrdiff_t(W));
        out.at(c, i, j) = img.at(c, si, sj);
      }
  return out;
}

template <typename T>
Tensor<T> augment(const Tensor<T>& img, SeedRng& rng, AugmentPolicy policy) {
  if (policy == AugmentPolicy::none) return img;
  if (img.rank() != 3) throw ShapeError("augment expects [C,H,W]");
  const std::size_t dy = rng.uniform_int(2 * kAugmentPad + 1);
  const std::size_t dx = rng.uniform_int(2 * kAugmentPad + 1);
  const bool flip = rng.bernoulli(0.5);
  return crop_and_flip(img, dy, dx, flip);
}

inline constexpr double kTextureAngleDeg[2] = {15.0, 75.0};

/// Two-class oriented gratings (15 vs 75 degrees) with orientation, frequency
/// and phase jitter plus Gaussian noise. Labels alternate, so each class has
/// n/2 records (the extra one goes to class 0 when n is odd).
inline Dataset synth_oriented_textures(std::size_t n, std::uint64_t seed, std::size_t side = kImageSide) {
  SeedRng rng(seed);
  Dataset d;
  d.classes = 2;
  for (std::size_t r = 0; r < n; ++r) {
    LabeledImage img;
    img.label = std::uint32_t(r % 2);
    img.source_index = r;
    const double theta = (kTextureAngleDeg[img.label] + rng.uniform(-5, 5)) * M_PI / 180.0;
    const double freq = rng.uniform(0.22, 0.32);  // cycles per pixel
    const double phase = rng.uniform(0, 2 * M_PI);
    const double contrast = rng.uniform(0.25, 0.4);
    const double kr = freq * std::sin(theta), kc = freq * std::cos(theta);
    img.pixels = Tensor<float>({kImageChannels, side, side});
    for (std::size_t c = 0; c < kImageChannels; ++c)
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j) {
          const double g = std::cos(2 * M_PI * (kr * double(i) + kc * double(j)) + phase);
          img.pixels.at(c, i, j) = float(std::clamp(0.5 + contrast * g + 0.1 * rng.normal(), 0.0, 1.0));
        }
    d.records.push_back(std::move(img));
  }
  return d;
}

/// Stand-in for natural photographs: random fields with a 1/f amplitude
/// spectrum, colour channels sharing most of their structure, values in [0,1].
inline Dataset synth_natural_proxy(std::size_t n, std::uint64_t seed, std::size_t side = kImageSide) {
  SeedRng rng(seed);
  Dataset d;
  d.classes = 1;
  const auto N = std::ptrdiff_t(side);
  std::vector<double> cs(side), sn(side);
  for (std::size_t r = 0; r < n; ++r) {
    Tensor<double> base({side, side});
    std::array<Tensor<double>, kImageChannels> own;
    for (auto& o : own) o = Tensor<double>({side, side});
    auto add_mode = [&](Tensor<double>& t, std::ptrdiff_t ky, std::ptrdiff_t kx, double a, double ph) {
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j)
          t.at(i, j) += a * std::cos(2 * M_PI * double(ky * std::ptrdiff_t(i) + kx * std::ptrdiff_t(j)) /
                                         double(N) + ph);
    };
    for (std::ptrdiff_t ky = -N / 2; ky < N / 2; ++ky)
      for (std::ptrdiff_t kx = 0; kx < N / 2; ++kx) {
        if (ky == 0 && kx == 0) continue;
        if (kx == 0 && ky < 0) continue;
        const double amp = 1.0 / std::hypot(double(ky), double(kx));
        add_mode(base, ky, kx, amp * rng.normal(), rng.uniform(0, 2 * M_PI));
        if (std::hypot(double(ky), double(kx)) < 6)
          for (auto& o : own) add_mode(o, ky, kx, 0.3 * amp * rng.normal(), rng.uniform(0, 2 * M_PI));
      }
    Tensor<float> px({kImageChannels, side, side});
    double m = 0;
    for (std::size_t c = 0; c < kImageChannels; ++c)
      for (std::size_t i = 0; i < side * side; ++i) m = std::max(m, std::abs(base[i] + own[c][i]));
    const double mean = rng.uniform(0.35, 0.65);
    const double scale = std::min(mean, 1 - mean) / m;
    for (std::size_t c = 0; c < kImageChannels; ++c)
      for (std::size_t i = 0; i < side * side; ++i)
        px[c * side * side + i] = float(mean + scale * (base[i] + own[c][i]));
    LabeledImage img;
    img.pixels = std::move(px);
    img.source_index = r;
    d.records.push_back(std::move(img));
  }
  return d;
}

/// Stacks records [begin, begin+count) of `order` into an [N, C, H, W] batch.
template <typename T>
Tensor<T> make_batch(const Dataset& d, const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t count, std::vector<std::uint32_t>* labels = nullptr) {
  if (begin + count > order.size()) throw PreconditionError("batch runs past the end of the epoch");
  const Shape& s = d.records.at(order[begin]).pixels.dims();
  Shape dims{count};
  dims.insert(dims.end(), s.begin(), s.end());
  Tensor<T> out(dims);
  const std::size_t per = shape_size(s);
  if (labels) labels->clear();
  for (std::size_t b = 0; b < count; ++b) {
    const auto& r = d.records.at(order[begin + b]);
    if (r.pixels.dims() != s) throw ShapeError("records in a batch differ in shape");
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = T(r.pixels[i]);
    if (labels) labels->push_back(r.label);
  }
  return out;
}

}  // namespace liwn
