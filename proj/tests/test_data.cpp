#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "liwn/data.hpp"
#include "liwn/nn.hpp"
#include "liwn/scattering.hpp"

using namespace liwn;
namespace fs = std::filesystem;

namespace {

// Record r: label r % classes, pixel byte i = (r * 7 + i) % 256.
std::vector<std::uint8_t> fake_cifar_bytes(CifarKind kind, std::size_t n, std::size_t first = 0) {
  std::vector<std::uint8_t> out;
  out.reserve(n * cifar_record_bytes(kind));
  for (std::size_t r = first; r < first + n; ++r) {
    if (kind == CifarKind::cifar100) {
      out.push_back(std::uint8_t(r % 20));
      out.push_back(std::uint8_t(r % 100));
    } else {
      out.push_back(std::uint8_t(r % 10));
    }
    for (std::size_t i = 0; i < kImagePixels; ++i) out.push_back(std::uint8_t((r * 7 + i) % 256));
  }
  return out;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("liwn_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

// Full-size fake CIFAR-10 tree, shared by the loader tests.
const fs::path& fake_cifar10_root() {
  static TempDir dir;
  static bool made = false;
  if (!made) {
    const fs::path d = dir.path() / "cifar-10-batches-bin";
    fs::create_directories(d);
    write_bytes(d / "data_batch_1.bin", fake_cifar_bytes(CifarKind::cifar10, 10000));
    for (int b = 2; b <= 5; ++b) fs::copy_file(d / "data_batch_1.bin", d / ("data_batch_" + std::to_string(b) + ".bin"));
    write_bytes(d / "test_batch.bin", fake_cifar_bytes(CifarKind::cifar10, 10000, 3));
    made = true;
  }
  return dir.path();
}

Dataset labelled(std::size_t n, std::size_t classes) {
  Dataset d;
  d.classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage img;
    img.label = std::uint32_t(i % classes);
    img.source_index = i;
    img.pixels = Tensor<float>({1, 2, 2}, float(i));
    d.records.push_back(img);
  }
  return d;
}

}  // namespace

TEST(Cifar, RecordLayoutAndRoundTrip) {
  const auto bytes = fake_cifar_bytes(CifarKind::cifar10, 1, 5);
  const LabeledImage img = parse_cifar_record(bytes.data(), CifarKind::cifar10, 0);
  EXPECT_EQ(img.label, 5u);
  EXPECT_EQ(img.pixels.dims(), (Shape{3, 32, 32}));
  // plane-major, rows within planes row-major
  EXPECT_FLOAT_EQ(img.pixels.at(1, 2, 3), float((35 + 1024 + 2 * 32 + 3) % 256) / 255.0f);
  EXPECT_EQ(serialize_cifar_record(img, CifarKind::cifar10), bytes);

  const auto b100 = fake_cifar_bytes(CifarKind::cifar100, 1, 57);
  const LabeledImage i100 = parse_cifar_record(b100.data(), CifarKind::cifar100, 0);
  EXPECT_EQ(i100.label, 57u);
  EXPECT_EQ(i100.coarse_label, 17u);
  EXPECT_EQ(serialize_cifar_record(i100, CifarKind::cifar100), b100);
}

TEST(Cifar, LoadsFullCifar10Tree) {
  const auto s = load_cifar10(fake_cifar10_root());
  EXPECT_EQ(s.train.size(), 50000u);
  EXPECT_EQ(s.test.size(), 10000u);
  for (auto c : s.train.class_counts()) EXPECT_EQ(c, 5000u);
  EXPECT_EQ(s.train.records[12345].source_index, 12345u);
  EXPECT_EQ(s.test.records[0].label, 3u);
  // the batch directory itself is accepted too
  EXPECT_EQ(load_cifar10(fake_cifar10_root() / "cifar-10-batches-bin").test.size(), 10000u);
}

TEST(Cifar, Cifar100Files) {
  TempDir dir;
  write_bytes(dir.path() / "part.bin", fake_cifar_bytes(CifarKind::cifar100, 300));
  Dataset d;
  d.classes = 100;
  read_cifar_file(dir.path() / "part.bin", CifarKind::cifar100, 300, d);
  ASSERT_EQ(d.size(), 300u);
  for (auto c : d.class_counts()) EXPECT_EQ(c, 3u);
  EXPECT_EQ(d.records[250].coarse_label, 250u % 20);
}

TEST(Cifar, FormatErrors) {
  TempDir dir;
  auto bytes = fake_cifar_bytes(CifarKind::cifar10, 4);
  write_bytes(dir.path() / "short.bin", std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1));
  Dataset d;
  d.classes = 10;
  EXPECT_THROW(read_cifar_file(dir.path() / "short.bin", CifarKind::cifar10, 4, d), FormatError);
  bytes[0] = 10;
  write_bytes(dir.path() / "label.bin", bytes);
  EXPECT_THROW(read_cifar_file(dir.path() / "label.bin", CifarKind::cifar10, 4, d), FormatError);
  EXPECT_THROW(read_cifar_file(dir.path() / "absent.bin", CifarKind::cifar10, 4, d), ConfigError);
  EXPECT_THROW(load_cifar10(dir.path()), ConfigError);
  EXPECT_THROW(load_cifar100(dir.path()), ConfigError);
}

TEST(Cifar, RealCifar10WhenAvailable) {
  const char* dir = std::getenv("LIWN_CIFAR10_DIR");
  if (!dir || !*dir) GTEST_SKIP() << "LIWN_CIFAR10_DIR not set";
  const auto s = load_cifar10(dir);
  EXPECT_EQ(s.train.size(), 50000u);
  EXPECT_EQ(s.test.size(), 10000u);
  for (auto c : s.train.class_counts()) EXPECT_EQ(c, 5000u);
}

TEST(Subset, StratifiedAndDeterministic) {
  const auto s = load_cifar10(fake_cifar10_root());
  const Dataset a = subset(s.train, 10000, 1), b = subset(s.train, 10000, 1), c = subset(s.train, 10000, 2);
  ASSERT_EQ(a.size(), 10000u);
  for (auto n : a.class_counts()) EXPECT_EQ(n, 1000u);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a.records[i].source_index == b.records[i].source_index;
    differs = differs || a.records[i].source_index != c.records[i].source_index;
  }
  EXPECT_TRUE(same);
  EXPECT_TRUE(differs);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_LT(a.records[i - 1].source_index, a.records[i].source_index);
}

TEST(Subset, FullSizeAndRemainders) {
  const Dataset d = labelled(100, 10);
  const Dataset all = subset(d, 100, 9);
  ASSERT_EQ(all.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(all.records[i].source_index, i);
  const Dataset odd = subset(d, 25, 9);
  EXPECT_EQ(odd.class_counts(), (std::vector<std::size_t>{3, 3, 3, 3, 3, 2, 2, 2, 2, 2}));
  EXPECT_THROW(subset(d, 101, 0), PreconditionError);
}

TEST(Normalize, UsesTrainStatistics) {
  Dataset train = synth_natural_proxy(6, 1), test = synth_natural_proxy(3, 2);
  const ChannelStats st = channel_stats(train);
  Dataset test2 = test;
  normalize(train, st);
  normalize(test, st);
  normalize(test2, channel_stats(synth_natural_proxy(6, 1)));
  const ChannelStats after = channel_stats(train);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(after.mean[c], 0.0, 1e-5);
    EXPECT_NEAR(after.stddev[c], 1.0, 1e-5);
  }
  for (std::size_t i = 0; i < test.size(); ++i)
    for (std::size_t k = 0; k < test.records[i].pixels.size(); ++k)
      ASSERT_EQ(test.records[i].pixels[k], test2.records[i].pixels[k]);
}

TEST(Augment, NoneAndCentreCropAreIdentity) {
  SeedRng rng(1);
  const auto x = random_uniform<float>({3, 8, 8}, rng, 0, 1);
  const auto y = augment(x, rng, AugmentPolicy::none);
  const auto z = crop_and_flip(x, kAugmentPad, kAugmentPad, false);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i], y[i]);
    EXPECT_EQ(x[i], z[i]);
  }
}

TEST(Augment, DoubleFlipIsIdentity) {
  SeedRng rng(2);
  const auto x = random_uniform<float>({2, 6, 6}, rng, 0, 1);
  const auto y = crop_and_flip(crop_and_flip(x, 4, 4, true), 4, 4, true);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Augment, ReflectPaddingDoesNotRepeatEdge) {
  Tensor<float> x2({1, 8, 8});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) x2.at(0, i, j) = float(j);
  const auto y = crop_and_flip(x2, 4, 0, false);  // shifted 4 left: columns -4..3
  EXPECT_EQ(y.at(0, 0, 0), 4.0f);
  EXPECT_EQ(y.at(0, 0, 3), 1.0f);
  EXPECT_EQ(y.at(0, 0, 4), 0.0f);
}

TEST(Augment, OffsetsUniformOverNineByNine) {
  // Pixel values encode their coordinates, so each draw's crop offset and
  // flip can be read back from the two centre pixels.
  const std::size_t S = 16;
  Tensor<float> img({1, S, S});
  for (std::size_t i = 0; i < S * S; ++i) img[i] = float(i);
  SeedRng rng(3);
  const std::size_t draws = 100000;
  std::vector<double> counts(81, 0.0);
  std::size_t flips = 0;
  for (std::size_t t = 0; t < draws; ++t) {
    const auto y = augment(img, rng, AugmentPolicy::standard);
    const auto a = std::size_t(y.at(0, S / 2, S / 2)), b = std::size_t(y.at(0, S / 2, S / 2 + 1));
    const bool flip = b % S < a % S;
    const std::size_t dy = a / S + kAugmentPad - S / 2;
    const std::size_t dx = a % S + kAugmentPad - (flip ? S / 2 - 1 : S / 2);
    ASSERT_LT(dy, 9u);
    ASSERT_LT(dx, 9u);
    counts[dy * 9 + dx] += 1;
    flips += flip;
  }
  double chi2 = 0;
  const double expect = double(draws) / 81;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 124.84);  // chi-square, 80 dof, p = 0.001
  const double sd = std::sqrt(draws * 0.25);
  EXPECT_LT(std::abs(double(flips) - 0.5 * draws), 3.29 * sd);
}

TEST(Augment, PolicyNames) {
  EXPECT_EQ(parse_augment_policy("none"), AugmentPolicy::none);
  EXPECT_EQ(parse_augment_policy("standard"), AugmentPolicy::standard);
  EXPECT_THROW(parse_augment_policy("fancy"), ConfigError);
}

TEST(Textures, BalancedDeterministicAndBounded) {
  const Dataset a = synth_oriented_textures(101, 5), b = synth_oriented_textures(101, 5);
  EXPECT_EQ(a.class_counts(), (std::vector<std::size_t>{51, 50}));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a.records[i].pixels.size(); ++k) {
      ASSERT_EQ(a.records[i].pixels[k], b.records[i].pixels[k]);
      ASSERT_GE(a.records[i].pixels[k], 0.0f);
      ASSERT_LE(a.records[i].pixels[k], 1.0f);
    }
  EXPECT_EQ(synth_oriented_textures(500, 1).class_counts(), (std::vector<std::size_t>{250, 250}));
}

TEST(Textures, LinearProbeOnScatteringSeparatesClasses) {
  const FilterSet f = load_filter_set("near_sym_a");
  const Dataset d = synth_oriented_textures(500, 11);
  // spatially averaged order-2 scattering, standardised per feature
  const std::size_t F = 147;
  Tensor<double> feats({d.size(), F});
  std::vector<std::uint32_t> labels;
  for (std::size_t n = 0; n < d.size(); ++n) {
    const auto s = scatter_order2(d.records[n].pixels.cast<double>(), f).coefficients;
    const std::size_t P = s.size() / F;
    for (std::size_t k = 0; k < F; ++k) {
      double m = 0;
      for (std::size_t p = 0; p < P; ++p) m += s[k * P + p];
      feats.at(n, k) = m / double(P);
    }
    labels.push_back(d.records[n].label);
  }
  for (std::size_t k = 0; k < F; ++k) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < d.size(); ++n) m += feats.at(n, k);
    m /= double(d.size());
    for (std::size_t n = 0; n < d.size(); ++n) v += (feats.at(n, k) - m) * (feats.at(n, k) - m);
    const double sd = std::sqrt(v / double(d.size())) + 1e-12;
    for (std::size_t n = 0; n < d.size(); ++n) feats.at(n, k) = (feats.at(n, k) - m) / sd;
  }
  SeedRng rng(12);
  Linear<double> probe("probe", F, 2, rng);
  TrainConfig cfg;
  cfg.lr0 = 0.1;
  cfg.weight_decay = 0;
  for (int step = 0; step < 200; ++step) {
    for (auto* p : probe.params()) p->grad.fill(0);
    Tensor<double> g;
    softmax_cross_entropy(probe.forward(feats, Mode::train, rng), labels, &g);
    probe.backward(g);
    sgd_momentum_step(probe.params(), cfg, 0);
  }
  const auto r = softmax_cross_entropy(probe.forward(feats, Mode::eval, rng), labels);
  EXPECT_GE(double(r.correct) / double(d.size()), 0.99);
}

TEST(Batches, StackRecordsInOrder) {
  const Dataset d = labelled(5, 3);
  std::vector<std::uint32_t> labels;
  const auto x = make_batch<double>(d, {4, 0, 2}, 1, 2, &labels);
  EXPECT_EQ(x.dims(), (Shape{2, 1, 2, 2}));
  EXPECT_EQ(x[0], 0.0);
  EXPECT_EQ(x[4], 2.0);
  EXPECT_EQ(labels, (std::vector<std::uint32_t>{0, 2}));
  EXPECT_THROW(make_batch<double>(d, {0, 1}, 1, 2), PreconditionError);
}
