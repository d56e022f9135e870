#pragma once

// Epoch loop, evaluation and per-epoch metrics.

#include <chrono>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#if defined(__SSE__) || defined(__x86_64__)
#include <xmmintrin.h>
#define LIWN_HAVE_MXCSR 1
#endif

#include "liwn/data.hpp"
#include "liwn/nn.hpp"

namespace liwn {

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_acc = 0;
  double wall_seconds = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,train_acc,test_acc,wall_time";

inline std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << m.epoch << ',' << std::setprecision(8) << m.lr << ',' << m.train_loss << ',' << m.train_acc << ','
     << m.test_acc << ',' << std::setprecision(4) << m.wall_seconds;
  return os.str();
}

/// Flush denormals to zero (FTZ + DAZ) for the calling thread.
inline void flush_denormals() {
#ifdef LIWN_HAVE_MXCSR
  _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
}

// Independent random streams per epoch, so a resumed run draws exactly what
// the uninterrupted run would have.
inline SeedRng shuffle_rng(std::uint64_t seed, std::size_t epoch) { return SeedRng(seed, 3 * epoch); }
inline std::uint64_t dropout_stream(std::size_t epoch) { return 3 * epoch + 1; }
inline SeedRng augment_rng(std::uint64_t seed, std::size_t epoch) { return SeedRng(seed, 3 * epoch + 2); }

/// Accuracy in eval mode.
template <typename T>
double evaluate(Network<T>& net, const Dataset& data, std::size_t batch, double* mean_loss = nullptr) {
  if (data.records.empty()) return 0;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t correct = 0;
  double loss = 0;
  std::vector<std::uint32_t> labels;
  for (std::size_t b = 0; b < order.size(); b += batch) {
    const std::size_t n = std::min(batch, order.size() - b);
    const Tensor<T> x = make_batch<T>(data, order, b, n, &labels);
    const LossResult r = softmax_cross_entropy(net.forward(x, Mode::eval), labels);
    correct += r.correct;
    loss += r.loss * double(n);
  }
  if (mean_loss) *mean_loss = loss / double(data.size());
  return double(correct) / double(data.size());
}

/// One pass over `train` in shuffled mini-batches, then optional test accuracy.
template <typename T>
EpochMetrics train_epoch(Network<T>& net, const Dataset& train, const Dataset* test, const TrainConfig& cfg,
                         std::size_t epoch, std::uint64_t seed, AugmentPolicy aug) {
  const auto t0 = std::chrono::steady_clock::now();
  flush_denormals();
  EpochMetrics m;
  m.epoch = epoch;
  m.lr = cfg.lr_at(epoch);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SeedRng srng = shuffle_rng(seed, epoch);
  srng.shuffle(order);
  SeedRng arng = augment_rng(seed, epoch);
  net.reseed(seed, dropout_stream(epoch));

  double loss = 0;
  std::size_t correct = 0;
  std::vector<std::uint32_t> labels;
  for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
    const std::size_t n = std::min(cfg.batch, order.size() - b);
    Tensor<T> x = make_batch<T>(train, order, b, n, &labels);
    if (aug != AugmentPolicy::none) {
      const std::size_t per = x.size() / n;
      for (std::size_t i = 0; i < n; ++i) {
        const Shape s(x.dims().begin() + 1, x.dims().end());
        Tensor<T> img(s, std::vector<T>(x.data() + i * per, x.data() + (i + 1) * per));
        const Tensor<T> a = augment(img, arng, aug);
        std::copy(a.data(), a.data() + per, x.data() + i * per);
      }
    }
    net.zero_grad();
    Tensor<T> grad;
    const LossResult r = softmax_cross_entropy(net.forward(x, Mode::train), labels, &grad);
    net.backward(grad);
    sgd_momentum_step(net.params(), cfg, epoch);
    net.after_step();
    loss += r.loss * double(n);
    correct += r.correct;
  }
  m.train_loss = loss / double(train.size());
  m.train_acc = double(correct) / double(train.size());
  if (test) m.test_acc = evaluate(net, *test, cfg.batch);
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

}  // namespace liwn
