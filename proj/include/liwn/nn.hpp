#pragma once

// Trainable layers, loss, SGD with momentum and a sequential network.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "liwn/error.hpp"
#include "liwn/invariant_layer.hpp"
#include "liwn/kernels.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value, grad, velocity;
  bool trainable = true;
  bool decay = true;  // weight decay applies

  Param() = default;
  Param(std::string n, Tensor<T> v, bool train = true, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.dims()), velocity(value.dims()),
        trainable(train), decay(wd) {}
};

/// Non-trainable state saved with a model (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T>* value;
};

template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }
  virtual std::string kind() const = 0;

  /// x is [N, ...]; rng is only drawn from by stochastic layers in train mode.
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng& rng) = 0;
  /// Returns the input gradient and accumulates parameter gradients.
  virtual Tensor<T> backward(const Tensor<T>& grad) = 0;
  /// Per-sample output extents for per-sample input extents.
  virtual Shape output_shape(const Shape& in) const = 0;

  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::vector<Buffer<T>> buffers() { return {}; }
  /// Called after every optimizer step (projections).
  virtual void after_step() {}
  /// Hash of the non-smooth decisions taken by the last train-mode forward
  /// (ReLU masks, pooling winners, near-zero moduli).
  virtual std::uint64_t kink_signature() const { return 0; }

  /// Multiplies the input gradient; anything but 1 is a deliberately broken
  /// adjoint, used to check that gradient checking notices.
  double backward_fault_scale = 1.0;

 protected:
  std::string name_;
};

namespace detail {

inline void require_rank(const Shape& s, std::size_t r, const std::string& who) {
  if (s.size() != r) throw ShapeError(who + " expects rank " + std::to_string(r) + " input, got " + shape_str(s));
}

class SignatureHash {
 public:
  void add(std::uint64_t v) {
    h_ ^= v + 0x9e3779b97f4a7c15ULL + (h_ << 6) + (h_ >> 2);
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 1469598103934665603ULL;
};

template <typename T>
void require_train_cache(const Tensor<T>& t, const std::string& who) {
  if (t.empty()) throw UsageError(who + ": backward without a train-mode forward");
}

}  // namespace detail

/// 2-D convolution (cross-correlation), zero padding (L-1)/2, stride 1 or 2.
/// Stride 2 keeps the even-index outputs of the stride-1 result.
template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride,
         bool bias, SeedRng& rng)
      : Layer<T>(std::move(name)), cin_(c_in), cout_(c_out), k_(k), stride_(stride), has_bias_(bias) {
    if (k % 2 == 0) throw ConfigError(this->name_ + ": kernel size must be odd");
    if (stride != 1 && stride != 2) throw ConfigError(this->name_ + ": stride must be 1 or 2");
    const double bound = std::sqrt(6.0 / double(c_in * k * k));
    weight_ = Param<T>(this->name_ + ".weight", random_uniform<T>({c_out, c_in, k, k}, rng, -bound, bound));
    if (bias) bias_ = Param<T>(this->name_ + ".bias", Tensor<T>({c_out}), true, false);
  }

  std::string kind() const override { return "conv"; }
  std::size_t c_in() const { return cin_; }
  std::size_t c_out() const { return cout_; }
  std::size_t kernel() const { return k_; }
  std::size_t stride() const { return stride_; }
  bool has_bias() const { return has_bias_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 3, this->name_);
    if (in[0] != cin_)
      throw ShapeError(this->name_ + " expects " + std::to_string(cin_) + " channels, got " + std::to_string(in[0]));
    return {cout_, out_len(in[1]), out_len(in[2])};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng&) override {
    detail::require_rank(x.dims(), 4, this->name_);
    const Shape od = output_shape({x.dim(1), x.dim(2), x.dim(3)});
    const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3), P = od[1] * od[2], K = cin_ * k_ * k_;
    Tensor<T> y({N, od[0], od[1], od[2]});
    std::vector<T> cols(K * P);
    for (std::size_t n = 0; n < N; ++n) {
      im2col(x.data() + n * cin_ * H * W, H, W, od[1], od[2], cols.data());
      T* yn = y.data() + n * cout_ * P;
      gemm(false, false, cout_, P, K, weight_.value.data(), cols.data(), yn, false);
      if (has_bias_)
        for (std::size_t f = 0; f < cout_; ++f)
          for (std::size_t p = 0; p < P; ++p) yn[f * P + p] += bias_.value[f];
    }
    if (mode == Mode::train) x_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    detail::require_train_cache(x_, this->name_);
    const std::size_t N = x_.dim(0), H = x_.dim(2), W = x_.dim(3);
    const std::size_t ho = out_len(H), wo = out_len(W), P = ho * wo, K = cin_ * k_ * k_;
    if (g.dims() != Shape{N, cout_, ho, wo}) throw ShapeError(this->name_ + ": gradient extents");
    Tensor<T> gx(x_.dims());
    std::vector<T> cols(K * P), gcols(K * P);
    for (std::size_t n = 0; n < N; ++n) {
      const T* gn = g.data() + n * cout_ * P;
      im2col(x_.data() + n * cin_ * H * W, H, W, ho, wo, cols.data());
      gemm(false, true, cout_, K, P, gn, cols.data(), weight_.grad.data(), true);
      if (has_bias_)
        for (std::size_t f = 0; f < cout_; ++f)
          for (std::size_t p = 0; p < P; ++p) bias_.grad[f] += gn[f * P + p];
      gemm(true, false, K, P, cout_, weight_.value.data(), gn, gcols.data(), false);
      col2im(gcols.data(), H, W, ho, wo, gx.data() + n * cin_ * H * W);
    }
    return gx;
  }

  std::vector<Param<T>*> params() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }

 private:
  std::size_t out_len(std::size_t n) const { return stride_ == 1 ? n : (n + 1) / 2; }

  void im2col(const T* x, std::size_t H, std::size_t W, std::size_t ho, std::size_t wo, T* cols) const {
    const auto pad = std::ptrdiff_t(k_ / 2);
    std::size_t row = 0;
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t a = 0; a < k_; ++a)
        for (std::size_t b = 0; b < k_; ++b, ++row) {
          T* out = cols + row * ho * wo;
          for (std::size_t i = 0; i < ho; ++i) {
            const std::ptrdiff_t si = std::ptrdiff_t(i * stride_ + a) - pad;
            for (std::size_t j = 0; j < wo; ++j) {
              const std::ptrdiff_t sj = std::ptrdiff_t(j * stride_ + b) - pad;
              out[i * wo + j] = (si < 0 || sj < 0 || si >= std::ptrdiff_t(H) || sj >= std::ptrdiff_t(W))
                                    ? T(0)
                                    : x[(c * H + std::size_t(si)) * W + std::size_t(sj)];
            }
          }
        }
  }

  void col2im(const T* cols, std::size_t H, std::size_t W, std::size_t ho, std::size_t wo, T* gx) const {
    const auto pad = std::ptrdiff_t(k_ / 2);
    std::size_t row = 0;
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t a = 0; a < k_; ++a)
        for (std::size_t b = 0; b < k_; ++b, ++row) {
          const T* in = cols + row * ho * wo;
          for (std::size_t i = 0; i < ho; ++i) {
            const std::ptrdiff_t si = std::ptrdiff_t(i * stride_ + a) - pad;
            if (si < 0 || si >= std::ptrdiff_t(H)) continue;
            for (std::size_t j = 0; j < wo; ++j) {
              const std::ptrdiff_t sj = std::ptrdiff_t(j * stride_ + b) - pad;
              if (sj < 0 || sj >= std::ptrdiff_t(W)) continue;
              gx[(c * H + std::size_t(si)) * W + std::size_t(sj)] += in[i * wo + j];
            }
          }
        }
  }

  std::size_t cin_, cout_, k_, stride_;
  bool has_bias_;
  Param<T> weight_, bias_;
  Tensor<T> x_;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string kind() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng&) override {
    Tensor<T> y = x;
    for (auto& v : y.values()) v = v > T(0) ? v : T(0);
    if (mode == Mode::train) x_ = x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    detail::require_train_cache(x_, this->name_);
    x_.require_same(g);
    Tensor<T> gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(x_[i] > T(0))) gx[i] = T(0);
    return gx;
  }
  const Tensor<T>& cached_input() const { return x_; }
  std::uint64_t kink_signature() const override {
    detail::SignatureHash h;
    for (std::size_t i = 0; i < x_.size(); ++i)
      if (x_[i] > T(0)) h.add(i);
    return h.value();
  }

 private:
  Tensor<T> x_;
};

/// Per-channel batch normalisation over (N, H, W). Running statistics use
/// the biased batch variance and momentum 0.1.
template <typename T>
class BatchNorm2d : public Layer<T> {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm2d(std::string name, std::size_t C)
      : Layer<T>(std::move(name)), C_(C),
        gamma_(this->name_ + ".gamma", Tensor<T>({C}, T(1)), true, false),
        beta_(this->name_ + ".beta", Tensor<T>({C}), true, false),
        running_mean_({C}), running_var_({C}, T(1)) {}

  std::string kind() const override { return "bn"; }
  std::size_t channels() const { return C_; }
  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

  Shape output_shape(const Shape& in) const override {
    if (in.empty() || in[0] != C_) throw ShapeError(this->name_ + " expects " + std::to_string(C_) + " channels");
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng&) override {
    if (x.rank() < 2 || x.dim(1) != C_) throw ShapeError(this->name_ + ": channel mismatch " + shape_str(x.dims()));
    const std::size_t N = x.dim(0), S = x.size() / (N * C_);
    Tensor<T> y(x.dims());
    if (mode == Mode::eval) {
      for (std::size_t c = 0; c < C_; ++c) {
        const double inv = 1.0 / std::sqrt(double(running_var_[c]) + kEps);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t i = (n * C_ + c) * S + s;
            y[i] = T(double(gamma_.value[c]) * (double(x[i]) - double(running_mean_[c])) * inv +
                     double(beta_.value[c]));
          }
      }
      return y;
    }
    xhat_ = Tensor<T>(x.dims());
    inv_std_.assign(C_, 0.0);
    const double M = double(N * S);
    for (std::size_t c = 0; c < C_; ++c) {
      double mean = 0, var = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) mean += double(x[(n * C_ + c) * S + s]);
      mean /= M;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
          const double d = double(x[(n * C_ + c) * S + s]) - mean;
          var += d * d;
        }
      var /= M;
      const double inv = 1.0 / std::sqrt(var + kEps);
      inv_std_[c] = inv;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t i = (n * C_ + c) * S + s;
          const double xh = (double(x[i]) - mean) * inv;
          xhat_[i] = T(xh);
          y[i] = T(double(gamma_.value[c]) * xh + double(beta_.value[c]));
        }
      running_mean_[c] = T((1 - kMomentum) * double(running_mean_[c]) + kMomentum * mean);
      running_var_[c] = T((1 - kMomentum) * double(running_var_[c]) + kMomentum * var);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    detail::require_train_cache(xhat_, this->name_);
    xhat_.require_same(g);
    const std::size_t N = g.dim(0), S = g.size() / (N * C_);
    const double M = double(N * S);
    Tensor<T> gx(g.dims());
    for (std::size_t c = 0; c < C_; ++c) {
      double sg = 0, sgx = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t i = (n * C_ + c) * S + s;
          sg += double(g[i]);
          sgx += double(g[i]) * double(xhat_[i]);
        }
      gamma_.grad[c] += T(sgx);
      beta_.grad[c] += T(sg);
      const double k = double(gamma_.value[c]) * inv_std_[c];
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t i = (n * C_ + c) * S + s;
          gx[i] = T(k * (double(g[i]) - sg / M - double(xhat_[i]) * sgx / M));
        }
    }
    return gx;
  }

  std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
  std::vector<Buffer<T>> buffers() override {
    return {{this->name_ + ".running_mean", &running_mean_}, {this->name_ + ".running_var", &running_var_}};
  }

 private:
  std::size_t C_;
  Param<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
};

/// 2x2 max pooling, stride 2 (ties go to the first element in raster order).
template <typename T>
class MaxPool2x : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string kind() const override { return "maxpool"; }
  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 3, this->name_);
    if (in[1] % 2 || in[2] % 2) throw ShapeError(this->name_ + " needs even extents");
    return {in[0], in[1] / 2, in[2] / 2};
  }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng&) override {
    detail::require_rank(x.dims(), 4, this->name_);
    const Shape os = output_shape({x.dim(1), x.dim(2), x.dim(3)});
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), h = os[1], w = os[2];
    Tensor<T> y({N, C, h, w});
    std::vector<std::size_t> arg(y.size());
    for (std::size_t p = 0; p < N * C; ++p)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          std::size_t best = p * H * W + 2 * i * W + 2 * j;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
              const std::size_t k = p * H * W + (2 * i + a) * W + 2 * j + b;
              if (x[k] > x[best]) best = k;
            }
          y[(p * h + i) * w + j] = x[best];
          arg[(p * h + i) * w + j] = best;
        }
    if (mode == Mode::train) {
      arg_ = std::move(arg);
      in_dims_ = x.dims();
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    if (in_dims_.empty()) throw UsageError(this->name_ + ": backward without a train-mode forward");
    if (g.size() != arg_.size()) throw ShapeError(this->name_ + ": gradient extents");
    Tensor<T> gx(in_dims_);
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg_[i]] += g[i];
    return gx;
  }
  std::uint64_t kink_signature() const override {
    detail::SignatureHash h;
    for (auto a : arg_) h.add(a);
    return h.value();
  }

 private:
  std::vector<std::size_t> arg_;
  Shape in_dims_;
};

/// [N, C, H, W] -> [N, C]
template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string kind() const override { return "gap"; }
  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 3, this->name_);
    return {in[0]};
  }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng&) override {
    detail::require_rank(x.dims(), 4, this->name_);
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
    Tensor<T> y({N, C});
    for (std::size_t p = 0; p < N * C; ++p) {
      double s = 0;
      for (std::size_t i = 0; i < S; ++i) s += double(x[p * S + i]);
      y[p] = T(s / double(S));
    }
    if (mode == Mode::train) in_dims_ = x.dims();
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    if (in_dims_.empty()) throw UsageError(this->name_ + ": backward without a train-mode forward");
    const std::size_t S = in_dims_[2] * in_dims_[3];
    if (g.size() * S != shape_size(in_dims_)) throw ShapeError(this->name_ + ": gradient extents");
    Tensor<T> gx(in_dims_);
    for (std::size_t p = 0; p < g.size(); ++p)
      for (std::size_t i = 0; i < S; ++i) gx[p * S + i] = g[p] / T(S);
    return gx;
  }

 private:
  Shape in_dims_;
};

/// logits = W v + b; inputs of any rank are flattened per sample.
template <typename T>
class Linear : public Layer<T> {
 public:
  Linear(std::string name, std::size_t in, std::size_t out, SeedRng& rng)
      : Layer<T>(std::move(name)), in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(double(in));
    weight_ = Param<T>(this->name_ + ".weight", random_uniform<T>({out, in}, rng, -bound, bound));
    bias_ = Param<T>(this->name_ + ".bias", Tensor<T>({out}), true, false);
  }
  std::string kind() const override { return "fc"; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  Shape output_shape(const Shape& in) const override {
    if (shape_size(in) != in_)
      throw ShapeError(this->name_ + " expects " + std::to_string(in_) + " features, got " + shape_str(in));
    return {out_};
  }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng&) override {
    const std::size_t N = x.dim(0);
    if (x.size() != N * in_) throw ShapeError(this->name_ + ": input " + shape_str(x.dims()));
    Tensor<T> y({N, out_});
    gemm(false, true, N, out_, in_, x.data(), weight_.value.data(), y.data(), false);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < out_; ++o) y[n * out_ + o] += bias_.value[o];
    if (mode == Mode::train) x_ = x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    detail::require_train_cache(x_, this->name_);
    const std::size_t N = x_.dim(0);
    if (g.dims() != Shape{N, out_}) throw ShapeError(this->name_ + ": gradient extents");
    gemm(true, false, out_, in_, N, g.data(), x_.data(), weight_.grad.data(), true);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += g[n * out_ + o];
    Tensor<T> gx(x_.dims());
    gemm(false, false, N, in_, out_, g.data(), weight_.value.data(), gx.data(), false);
    return gx;
  }
  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

 private:
  std::size_t in_, out_;
  Param<T> weight_, bias_;
  Tensor<T> x_;
};

/// Inverted dropout: train mode zeros each element with probability p and
/// scales the rest by 1/(1-p); eval mode is the identity.
template <typename T>
class Dropout : public Layer<T> {
 public:
  Dropout(std::string name, double p) : Layer<T>(std::move(name)), p_(p) {
    if (!(p >= 0 && p < 1)) throw ConfigError(this->name_ + ": dropout probability must be in [0, 1)");
  }
  std::string kind() const override { return "dropout"; }
  double p() const { return p_; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng& rng) override {
    if (mode == Mode::eval) return x;
    mask_ = Tensor<T>(x.dims());
    const T keep = T(1.0 / (1.0 - p_));
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.size(); ++i) {
      mask_[i] = rng.bernoulli(p_) ? T(0) : keep;
      y[i] *= mask_[i];
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    detail::require_train_cache(mask_, this->name_);
    mask_.require_same(g);
    Tensor<T> gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= mask_[i];
    return gx;
  }

 private:
  double p_;
  Tensor<T> mask_;
};

/// Invariant layer as a network module. Learned mode trains A (and alpha when
/// learn_alpha is set); fixed mode keeps whatever A/alpha it was given.
template <typename T>
class InvariantModule : public Layer<T> {
 public:
  InvariantModule(std::string name, InvariantLayerParams<T> p, const FilterSet& f, bool learned,
                  bool learn_alpha = false)
      : Layer<T>(std::move(name)), filters_(f), learned_(learned) {
    p.validate();
    A_ = Param<T>(this->name_ + ".A", std::move(p.A), learned, true);
    alpha_ = Param<T>(this->name_ + ".alpha", std::move(p.alpha), learned && learn_alpha, false);
    phi_norm_ = p.phi_norm;
    flags_ = p.flags;
    if (learned) after_step();
  }

  std::string kind() const override { return "inv"; }
  bool learned() const { return learned_; }
  const InvariantLayerFlags& flags() const { return flags_; }
  std::size_t c_in() const { return alpha_.value.size(); }
  std::size_t c_out() const { return A_.value.dim(0); }
  Param<T>& A() { return A_; }
  Param<T>& alpha() { return alpha_; }

  InvariantLayerParams<T> current() const {
    InvariantLayerParams<T> p;
    p.A = A_.value;
    p.alpha = alpha_.value;
    p.phi_norm = phi_norm_;
    p.flags = flags_;
    return p;
  }

  Shape output_shape(const Shape& in) const override {
    detail::require_rank(in, 3, this->name_);
    if (in[0] != c_in()) throw ShapeError(this->name_ + " expects " + std::to_string(c_in()) + " channels");
    if (in[1] % 2 || in[2] % 2) throw ShapeError(this->name_ + " needs even extents");
    return flags_.upsample_out ? Shape{c_out(), in[1], in[2]} : Shape{c_out(), in[1] / 2, in[2] / 2};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, SeedRng&) override {
    return inv_forward(x, current(), filters_, mode, mode == Mode::train ? &cache_ : nullptr);
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    auto grads = inv_backward(g, cache_, current(), filters_);
    if (A_.trainable) A_.grad += grads.A;
    if (alpha_.trainable) alpha_.grad += grads.alpha;
    return std::move(grads.x);
  }
  std::vector<Param<T>*> params() override { return {&A_, &alpha_}; }
  /// ReLU mask plus moduli below kSingularModulus.
  std::uint64_t kink_signature() const override {
    detail::SignatureHash h;
    if (!cache_.valid) return 0;
    if (flags_.apply_relu)
      for (std::size_t i = 0; i < cache_.pre.size(); ++i)
        if (cache_.pre[i] > T(0)) h.add(i);
    if (flags_.magnitude_floor == 0) {
      const std::size_t Q = cache_.z.dim(1), S = cache_.z.dim(2) * cache_.z.dim(3);
      for (std::size_t i = 0; i < cache_.z.size(); ++i)
        if ((i / S) % Q % kPropagatorWidth != 0 && std::abs(double(cache_.z[i])) < kSingularModulus)
          h.add(i + 0x5bd1e995ULL);
    }
    return h.value();
  }
  static constexpr double kSingularModulus = 1e-4;

  void after_step() override {
    if (!learned_) return;
    auto p = current();
    apply_projections(p);
    A_.value = std::move(p.A);
  }

 private:
  FilterSet filters_;
  bool learned_;
  Param<T> A_, alpha_;
  double phi_norm_ = 1.0;
  InvariantLayerFlags flags_;
  InvariantLayerCache<T> cache_;
};

struct LossResult {
  double loss = 0;    // mean over the batch
  std::size_t correct = 0;
};

/// Mean softmax cross-entropy over the batch; grad receives
/// (softmax - onehot) / N.
template <typename T>
LossResult softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::uint32_t>& labels,
                                 Tensor<T>* grad = nullptr) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("logits " + shape_str(logits.dims()) + " do not match " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (grad) *grad = Tensor<T>(logits.dims());
  LossResult r;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] >= K) throw PreconditionError("label " + std::to_string(labels[n]) + " out of range");
    const T* z = logits.data() + n * K;
    const double m = double(*std::max_element(z, z + K));
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(double(z[k]) - m);
    const double lse = m + std::log(s);
    r.loss += lse - double(z[labels[n]]);
    if (std::size_t(std::max_element(z, z + K) - z) == labels[n]) ++r.correct;
    if (grad)
      for (std::size_t k = 0; k < K; ++k)
        (*grad)[n * K + k] = T((std::exp(double(z[k]) - lse) - (k == labels[n] ? 1.0 : 0.0)) / double(N));
  }
  r.loss /= double(N);
  return r;
}

struct TrainConfig {
  double lr0 = 0.5;
  double momentum = 0.85;
  std::size_t batch = 128;
  double weight_decay = 1e-4;
  std::vector<std::size_t> milestones = {60, 80, 100};
  double gamma = 0.2;
  std::size_t epochs = 120;

  void validate() const {
    if (!(lr0 > 0) || !(momentum >= 0 && momentum < 1) || batch == 0 || !(weight_decay >= 0) ||
        !(gamma > 0) || epochs == 0)
      throw ConfigError("training hyperparameters out of range");
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1]) throw ConfigError("milestones must be increasing");
  }

  double lr_at(std::size_t epoch) const {
    double lr = lr0;
    for (auto m : milestones)
      if (m <= epoch) lr *= gamma;
    return lr;
  }
};

/// v <- m v + (g + wd w); w <- w - lr v. Weight decay skips params flagged
/// decay = false (biases, batch-norm affine terms, alpha).
template <typename T>
void sgd_momentum_step(const std::vector<Param<T>*>& params, const TrainConfig& cfg, std::size_t epoch) {
  const double lr = cfg.lr_at(epoch);
  for (Param<T>* p : params) {
    if (!p->trainable) continue;
    const double wd = p->decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double v = cfg.momentum * double(p->velocity[i]) + double(p->grad[i]) + wd * double(p->value[i]);
      p->velocity[i] = T(v);
      p->value[i] = T(double(p->value[i]) - lr * v);
    }
  }
}

template <typename T>
class Network {
 public:
  Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  void add(std::unique_ptr<Layer<T>> l) {
    for (const auto& e : layers_)
      if (e->name() == l->name()) throw ConfigError("duplicate layer name " + l->name());
    layers_.push_back(std::move(l));
  }
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    add(std::move(p));
    return ref;
  }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  Layer<T>* find(const std::string& name) {
    for (auto& l : layers_)
      if (l->name() == name) return l.get();
    return nullptr;
  }

  /// Runs layers [0, upto) (all when upto exceeds the count).
  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::size_t upto = std::size_t(-1)) {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers_.size() && i < upto; ++i) h = layers_[i]->forward(h, mode, rng_);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& grad) {
    Tensor<T> g = grad;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      g = layers_[i]->backward(g);
      if (layers_[i]->backward_fault_scale != 1.0) g *= T(layers_[i]->backward_fault_scale);
    }
    return g;
  }

  Shape output_shape(Shape in) const {
    for (const auto& l : layers_) in = l->output_shape(in);
    return in;
  }

  std::uint64_t kink_signature() const {
    detail::SignatureHash h;
    for (const auto& l : layers_) h.add(l->kink_signature());
    return h.value();
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }
  std::vector<Buffer<T>> buffers() {
    std::vector<Buffer<T>> out;
    for (auto& l : layers_)
      for (auto b : l->buffers()) out.push_back(b);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.fill(T(0));
  }
  void after_step() {
    for (auto& l : layers_) l->after_step();
  }
  std::size_t trainable_count() {
    std::size_t n = 0;
    for (auto* p : params())
      if (p->trainable) n += p->value.size();
    return n;
  }

  /// Source of dropout masks; reseeded per epoch by the trainer.
  SeedRng& rng() { return rng_; }
  void reseed(std::uint64_t seed, std::uint64_t stream) { rng_ = SeedRng(seed, stream); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  SeedRng rng_{0};
};

}  // namespace liwn
