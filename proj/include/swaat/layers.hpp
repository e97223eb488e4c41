#pragma once

#include <Eigen/Core>
#include <memory>

#include "swaat/tensor.hpp"

namespace swaat {

enum class Mode { Train, Eval };

enum class LayerKind { Dense, Conv2d, BatchNorm, ReLU, MaxPool, Flatten, SoftmaxCrossEntropy };

inline constexpr double kBatchNormEps = 1e-5;

// Intermediates a layer keeps between forward and backward. Which fields are
// filled depends on the layer kind.
template <Real T>
struct LayerCache {
  Mode mode = Mode::Eval;
  bool param_grads = true;  // false: only the input gradient will be requested
  Shape input_shape;
  Tensor<T> input;       // Dense (weight grad), ReLU (mask)
  Tensor<T> cols;        // Conv2d im2col, one block per example
  Tensor<T> normalized;  // BatchNorm x_hat
  std::vector<T> mean, var, inv_std;
  std::vector<std::uint32_t> argmax;  // MaxPool winners (flat input offsets)
};

// A layer is an immutable description plus hand-derived forward/backward
// passes. Trainable parameters and BN running statistics live in the owning
// Network and are handed in as spans, which keeps snapshots plain vectors.
template <Real T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual std::string descriptor() const = 0;
  // Per-example output shape for a per-example input shape.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual std::size_t param_count() const { return 0; }
  virtual std::size_t state_count() const { return 0; }
  virtual void init_params(std::span<T>, Rng&) const {}
  virtual void init_state(std::span<T>) const {}

  virtual Tensor<T> forward(const Tensor<T>& x, std::span<const T> params,
                            std::span<const T> state, LayerCache<T>* cache) const = 0;

  // Returns dL/dx. Writes dL/dparams into grad_params unless it is empty.
  // With input_grad false, layers with parameters may return an empty tensor.
  virtual Tensor<T> backward(const Tensor<T>& grad_out, std::span<const T> params,
                             const LayerCache<T>& cache, std::span<T> grad_params,
                             bool input_grad = true) const = 0;
};

namespace detail {

template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using MatMap = Eigen::Map<RowMat<T>>;
template <Real T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <Real T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <Real T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <Real T>
auto arr(Tensor<T>& t) {
  return Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(t.data(), static_cast<Eigen::Index>(t.size()));
}
template <Real T>
auto arr(const Tensor<T>& t) {
  return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(t.data(), static_cast<Eigen::Index>(t.size()));
}
template <Real T>
auto arr(T* p, std::size_t n) {
  return Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}
template <Real T>
auto arr(const T* p, std::size_t n) {
  return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}

inline void expect_rank(const Shape& in, std::size_t rank, const char* layer) {
  if (in.size() != rank)
    throw ShapeError(std::string(layer) + ": expected per-example rank " + std::to_string(rank) +
                     ", got " + shape_str(in));
}

}  // namespace detail

// y = x W^T + b, W stored (out, in), then b.
template <Real T>
class Dense final : public Layer<T> {
 public:
  Dense(std::size_t in, std::size_t out) : in_(in), out_(out) {}

  LayerKind kind() const override { return LayerKind::Dense; }
  std::string descriptor() const override {
    return "dense(" + std::to_string(in_) + "," + std::to_string(out_) + ")";
  }
  Shape output_shape(const Shape& in) const override {
    detail::expect_rank(in, 1, "dense");
    if (in[0] != in_) throw ShapeError("dense: expected " + std::to_string(in_) + " inputs, got " + shape_str(in));
    return {out_};
  }
  std::size_t param_count() const override { return out_ * in_ + out_; }
  void init_params(std::span<T> p, Rng& rng) const override {
    const double sd = std::sqrt(2.0 / static_cast<double>(in_));
    for (std::size_t i = 0; i < out_ * in_; ++i) p[i] = static_cast<T>(sd * rng.normal());
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(out_ * in_), p.end(), T{0});
  }

  Tensor<T> forward(const Tensor<T>& x, std::span<const T> p, std::span<const T>,
                    LayerCache<T>* cache) const override {
    const auto batch = x.batch();
    Tensor<T> y({batch, out_}, Uninitialized{});
    detail::ConstMatMap<T> X(x.data(), batch, in_);
    detail::ConstMatMap<T> W(p.data(), out_, in_);
    detail::ConstVecMap<T> b(p.data() + out_ * in_, out_);
    detail::MatMap<T> Y(y.data(), batch, out_);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += b.transpose();
    if (cache && cache->param_grads) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, std::span<const T> p, const LayerCache<T>& cache,
                     std::span<T> gp, bool input_grad = true) const override {
    const auto batch = dy.batch();
    detail::ConstMatMap<T> dY(dy.data(), batch, out_);
    detail::ConstMatMap<T> W(p.data(), out_, in_);
    Tensor<T> dx;
    if (input_grad) {
      dx = Tensor<T>({batch, in_}, Uninitialized{});
      detail::MatMap<T>(dx.data(), batch, in_).noalias() = dY * W;
    }
    if (!gp.empty()) {
      detail::ConstMatMap<T> X(cache.input.data(), batch, in_);
      detail::MatMap<T>(gp.data(), out_, in_).noalias() = dY.transpose() * X;
      detail::VecMap<T>(gp.data() + out_ * in_, out_) = dY.colwise().sum().transpose();
    }
    return dx;
  }

 private:
  std::size_t in_, out_;
};

// 2-d convolution over NCHW input, via per-example im2col + GEMM.
// Parameters: W (out, in, k, k) then b (out).
template <Real T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride = 1,
         std::size_t pad = 0)
      : cin_(in_ch), cout_(out_ch), k_(kernel), stride_(stride), pad_(pad) {
    if (kernel == 0 || stride == 0) throw ShapeError("conv2d: kernel and stride must be positive");
  }

  LayerKind kind() const override { return LayerKind::Conv2d; }
  std::string descriptor() const override {
    return "conv2d(" + std::to_string(cin_) + "," + std::to_string(cout_) + "," + std::to_string(k_) +
           "," + std::to_string(stride_) + "," + std::to_string(pad_) + ")";
  }
  Shape output_shape(const Shape& in) const override {
    detail::expect_rank(in, 3, "conv2d");
    if (in[0] != cin_) throw ShapeError("conv2d: expected " + std::to_string(cin_) + " channels, got " + shape_str(in));
    if (in[1] + 2 * pad_ < k_ || in[2] + 2 * pad_ < k_) throw ShapeError("conv2d: input smaller than kernel");
    return {cout_, (in[1] + 2 * pad_ - k_) / stride_ + 1, (in[2] + 2 * pad_ - k_) / stride_ + 1};
  }
  std::size_t param_count() const override { return cout_ * cin_ * k_ * k_ + cout_; }
  void init_params(std::span<T> p, Rng& rng) const override {
    const std::size_t fan_in = cin_ * k_ * k_;
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < cout_ * fan_in; ++i) p[i] = static_cast<T>(sd * rng.normal());
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(cout_ * fan_in), p.end(), T{0});
  }

  Tensor<T> forward(const Tensor<T>& x, std::span<const T> p, std::span<const T>,
                    LayerCache<T>* cache) const override {
    const Shape in = x.example_shape();
    const Shape out = output_shape(in);
    const std::size_t batch = x.batch(), rows = cin_ * k_ * k_, hw = out[1] * out[2];
    const bool keep = cache && cache->param_grads;
    Tensor<T> cols_all;
    std::vector<T> scratch;
    if (keep) cols_all = Tensor<T>({batch, rows, hw}, Uninitialized{});
    else scratch.resize(rows * hw);

    Tensor<T> y({batch, cout_, out[1], out[2]}, Uninitialized{});
    detail::ConstMatMap<T> W(p.data(), cout_, rows);
    detail::ConstVecMap<T> b(p.data() + cout_ * rows, cout_);
    for (std::size_t e = 0; e < batch; ++e) {
      T* cols = keep ? cols_all.example(e).data() : scratch.data();
      im2col(x.example(e).data(), in, out, cols);
      detail::MatMap<T> Y(y.example(e).data(), cout_, hw);
      Y.noalias() = W * detail::ConstMatMap<T>(cols, rows, hw);
      Y.colwise() += b;
    }
    if (keep) cache->cols = std::move(cols_all);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, std::span<const T> p, const LayerCache<T>& cache,
                     std::span<T> gp, bool input_grad = true) const override {
    const Shape& in = cache.input_shape;
    const Shape out = output_shape(in);
    const std::size_t batch = dy.batch(), rows = cin_ * k_ * k_, hw = out[1] * out[2];
    Tensor<T> dx;
    if (input_grad) dx = Tensor<T>({batch, in[0], in[1], in[2]});
    detail::ConstMatMap<T> W(p.data(), cout_, rows);
    detail::RowMat<T> dcols(input_grad ? rows : 0, input_grad ? hw : 0);
    const bool grads = !gp.empty();
    if (grads) std::fill(gp.begin(), gp.end(), T{0});
    detail::MatMap<T> dW(gp.data(), grads ? cout_ : 0, grads ? rows : 0);
    detail::VecMap<T> db(grads ? gp.data() + cout_ * rows : nullptr, grads ? cout_ : 0);
    for (std::size_t e = 0; e < batch; ++e) {
      detail::ConstMatMap<T> dY(dy.example(e).data(), cout_, hw);
      if (input_grad) {
        dcols.noalias() = W.transpose() * dY;
        col2im(dcols.data(), in, out, dx.example(e).data());
      }
      if (grads) {
        detail::ConstMatMap<T> cols(cache.cols.example(e).data(), rows, hw);
        dW.noalias() += dY * cols.transpose();
        db += dY.rowwise().sum();
      }
    }
    return dx;
  }

 private:
  // Valid output-column range [lo, hi) for kernel offset kj.
  std::pair<std::size_t, std::size_t> valid_cols(std::size_t kj, std::size_t W, std::size_t OW) const {
    const auto p = static_cast<std::ptrdiff_t>(pad_), k = static_cast<std::ptrdiff_t>(kj),
               s = static_cast<std::ptrdiff_t>(stride_);
    // need 0 <= ow*s + k - p < W
    std::ptrdiff_t lo = p - k > 0 ? (p - k + s - 1) / s : 0;
    std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(W) + p - k + s - 1) / s;
    hi = std::clamp<std::ptrdiff_t>(hi, 0, static_cast<std::ptrdiff_t>(OW));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }

  void im2col(const T* x, const Shape& in, const Shape& out, T* cols) const {
    const std::size_t H = in[1], Wd = in[2], OH = out[1], OW = out[2];
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t ki = 0; ki < k_; ++ki)
        for (std::size_t kj = 0; kj < k_; ++kj) {
          T* row = cols + ((c * k_ + ki) * k_ + kj) * OH * OW;
          const auto [lo, hi] = valid_cols(kj, Wd, OW);
          for (std::size_t oh = 0; oh < OH; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * stride_ + ki) - static_cast<std::ptrdiff_t>(pad_);
            T* dst = row + oh * OW;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
              std::fill(dst, dst + OW, T{0});
              continue;
            }
            const T* src = x + (c * H + static_cast<std::size_t>(ih)) * Wd + static_cast<std::ptrdiff_t>(kj) -
                           static_cast<std::ptrdiff_t>(pad_);
            for (std::size_t ow = 0; ow < lo; ++ow) dst[ow] = T{0};
            if (stride_ == 1) {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow];
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * stride_];
            }
            for (std::size_t ow = hi; ow < OW; ++ow) dst[ow] = T{0};
          }
        }
  }

  void col2im(const T* cols, const Shape& in, const Shape& out, T* dx) const {
    const std::size_t H = in[1], Wd = in[2], OH = out[1], OW = out[2];
    for (std::size_t c = 0; c < cin_; ++c)
      for (std::size_t ki = 0; ki < k_; ++ki)
        for (std::size_t kj = 0; kj < k_; ++kj) {
          const T* row = cols + ((c * k_ + ki) * k_ + kj) * OH * OW;
          const auto [lo, hi] = valid_cols(kj, Wd, OW);
          for (std::size_t oh = 0; oh < OH; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * stride_ + ki) - static_cast<std::ptrdiff_t>(pad_);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            T* dst = dx + (c * H + static_cast<std::size_t>(ih)) * Wd + static_cast<std::ptrdiff_t>(kj) -
                     static_cast<std::ptrdiff_t>(pad_);
            const T* src = row + oh * OW;
            if (stride_ == 1) {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * stride_] += src[ow];
            }
          }
        }
  }

  std::size_t cin_, cout_, k_, stride_, pad_;
};

// Per-channel batch normalization for (N, C) or (N, C, H, W) input.
// Parameters: gamma (C) then beta (C). State: running mean (C) then running
// variance (C). Variances are population (biased) moments everywhere.
template <Real T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(std::size_t channels) : c_(channels) {}

  LayerKind kind() const override { return LayerKind::BatchNorm; }
  std::string descriptor() const override { return "batchnorm(" + std::to_string(c_) + ")"; }
  Shape output_shape(const Shape& in) const override {
    if ((in.size() != 1 && in.size() != 3) || in[0] != c_)
      throw ShapeError("batchnorm: expected " + std::to_string(c_) + " channels, got " + shape_str(in));
    return in;
  }
  std::size_t param_count() const override { return 2 * c_; }
  std::size_t state_count() const override { return 2 * c_; }
  std::size_t channels() const { return c_; }
  void init_params(std::span<T> p, Rng&) const override {
    std::fill(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(c_), T{1});
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(c_), p.end(), T{0});
  }
  void init_state(std::span<T> s) const override {
    std::fill(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(c_), T{0});
    std::fill(s.begin() + static_cast<std::ptrdiff_t>(c_), s.end(), T{1});
  }

  Tensor<T> forward(const Tensor<T>& x, std::span<const T> p, std::span<const T> state,
                    LayerCache<T>* cache) const override {
    const Mode mode = cache ? cache->mode : Mode::Eval;
    const std::size_t batch = x.batch(), spatial = x.example_size() / c_;
    std::vector<T> mean(c_), var(c_), inv_std(c_);
    if (mode == Mode::Train) {
      const double m = static_cast<double>(batch * spatial);
      for (std::size_t c = 0; c < c_; ++c) {
        double s = 0;
        for (std::size_t b = 0; b < batch; ++b)
          s += static_cast<double>(detail::arr(x.data() + (b * c_ + c) * spatial, spatial).sum());
        const double mu = s / m;
        double ss = 0;
        for (std::size_t b = 0; b < batch; ++b)
          ss += static_cast<double>(
              (detail::arr(x.data() + (b * c_ + c) * spatial, spatial) - static_cast<T>(mu)).square().sum());
        mean[c] = static_cast<T>(mu);
        var[c] = static_cast<T>(ss / m);
      }
    } else {
      std::copy_n(state.begin(), c_, mean.begin());
      std::copy_n(state.begin() + static_cast<std::ptrdiff_t>(c_), c_, var.begin());
    }
    for (std::size_t c = 0; c < c_; ++c)
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + kBatchNormEps));

    Tensor<T> y(x.shape(), Uninitialized{});
    const bool keep = cache && (mode == Mode::Train || cache->param_grads);
    Tensor<T> xhat = keep ? Tensor<T>(x.shape(), Uninitialized{}) : Tensor<T>();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < c_; ++c) {
        const std::size_t off = (b * c_ + c) * spatial;
        const auto in = detail::arr(x.data() + off, spatial);
        auto out = detail::arr(y.data() + off, spatial);
        if (keep) {
          auto h = detail::arr(xhat.data() + off, spatial);
          h = (in - mean[c]) * inv_std[c];
          out = p[c] * h + p[c_ + c];
        } else {
          out = p[c] * ((in - mean[c]) * inv_std[c]) + p[c_ + c];
        }
      }
    if (cache) {
      cache->normalized = std::move(xhat);
      cache->mean = std::move(mean);
      cache->var = std::move(var);
      cache->inv_std = std::move(inv_std);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, std::span<const T> p, const LayerCache<T>& cache,
                     std::span<T> gp, bool = true) const override {
    const std::size_t batch = dy.batch(), spatial = dy.example_size() / c_;
    const double m = static_cast<double>(batch * spatial);
    const bool train = cache.mode == Mode::Train;
    const bool sums = train || !gp.empty();
    Tensor<T> dx(dy.shape(), Uninitialized{});
    for (std::size_t c = 0; c < c_; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      if (sums) {
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t off = (b * c_ + c) * spatial;
          const auto g = detail::arr(dy.data() + off, spatial);
          sum_dy += static_cast<double>(g.sum());
          sum_dy_xhat += static_cast<double>((g * detail::arr(cache.normalized.data() + off, spatial)).sum());
        }
      }
      if (!gp.empty()) {
        gp[c] = static_cast<T>(sum_dy_xhat);
        gp[c_ + c] = static_cast<T>(sum_dy);
      }
      const T scale = p[c] * cache.inv_std[c];
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * c_ + c) * spatial;
        const auto g = detail::arr(dy.data() + off, spatial);
        auto out = detail::arr(dx.data() + off, spatial);
        if (train) {
          const T k = static_cast<T>(static_cast<double>(scale) / m);
          out = k * (static_cast<T>(m) * g - static_cast<T>(sum_dy) -
                     detail::arr(cache.normalized.data() + off, spatial) * static_cast<T>(sum_dy_xhat));
        } else {
          out = g * scale;
        }
      }
    }
    return dx;
  }

 private:
  std::size_t c_;
};

// Derivative at exactly 0 is defined as 0.
template <Real T>
class ReLU final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::ReLU; }
  std::string descriptor() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, std::span<const T>, std::span<const T>,
                    LayerCache<T>* cache) const override {
    Tensor<T> y(x.shape(), Uninitialized{});
    detail::arr(y) = detail::arr(x).max(T{0});
    if (cache) cache->input = y;  // y > 0 exactly where x > 0
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, std::span<const T>, const LayerCache<T>& cache,
                     std::span<T>, bool = true) const override {
    Tensor<T> dx(dy.shape(), Uninitialized{});
    detail::arr(dx) = (detail::arr(cache.input) > T{0}).select(detail::arr(dy), T{0});
    return dx;
  }
};

// Non-overlapping k x k max pooling (stride k, floor). Ties go to the first
// element in row-major window order.
template <Real T>
class MaxPool final : public Layer<T> {
 public:
  explicit MaxPool(std::size_t k) : k_(k) {
    if (k == 0) throw ShapeError("maxpool: kernel must be positive");
  }

  LayerKind kind() const override { return LayerKind::MaxPool; }
  std::string descriptor() const override { return "maxpool(" + std::to_string(k_) + ")"; }
  Shape output_shape(const Shape& in) const override {
    detail::expect_rank(in, 3, "maxpool");
    if (in[1] < k_ || in[2] < k_) throw ShapeError("maxpool: input smaller than window");
    return {in[0], in[1] / k_, in[2] / k_};
  }

  Tensor<T> forward(const Tensor<T>& x, std::span<const T>, std::span<const T>,
                    LayerCache<T>* cache) const override {
    const Shape in = x.example_shape();
    const Shape out = output_shape(in);
    const std::size_t planes = x.batch() * in[0], H = in[1], W = in[2], OH = out[1], OW = out[2];
    Tensor<T> y({x.batch(), out[0], OH, OW}, Uninitialized{});
    std::vector<std::uint32_t> arg(y.size());
    const T* xp = x.data();
    T* yp = y.data();
    std::uint32_t* ap = arg.data();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const std::size_t base = pl * H * W;
      for (std::size_t oh = 0; oh < OH; ++oh) {
        const std::size_t o_row = (pl * OH + oh) * OW;
        const std::size_t r0 = base + oh * k_ * W;
        if (k_ == 2) {
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const std::size_t a = r0 + 2 * ow, b = a + W;
            std::size_t best = a;
            if (xp[a + 1] > xp[best]) best = a + 1;
            if (xp[b] > xp[best]) best = b;
            if (xp[b + 1] > xp[best]) best = b + 1;
            yp[o_row + ow] = xp[best];
            ap[o_row + ow] = static_cast<std::uint32_t>(best);
          }
          continue;
        }
        for (std::size_t ow = 0; ow < OW; ++ow) {
          std::size_t best = r0 + ow * k_;
          for (std::size_t i = 0; i < k_; ++i) {
            const std::size_t r = r0 + i * W + ow * k_;
            for (std::size_t j = 0; j < k_; ++j)
              if (xp[r + j] > xp[best]) best = r + j;
          }
          yp[o_row + ow] = xp[best];
          ap[o_row + ow] = static_cast<std::uint32_t>(best);
        }
      }
    }
    if (cache) cache->argmax = std::move(arg);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, std::span<const T>, const LayerCache<T>& cache,
                     std::span<T>, bool = true) const override {
    Shape s{dy.batch()};
    s.insert(s.end(), cache.input_shape.begin(), cache.input_shape.end());
    Tensor<T> dx(s);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[cache.argmax[o]] += dy[o];
    return dx;
  }

 private:
  std::size_t k_;
};

template <Real T>
class Flatten final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::Flatten; }
  std::string descriptor() const override { return "flatten"; }
  Shape output_shape(const Shape& in) const override { return {shape_size(in)}; }

  Tensor<T> forward(const Tensor<T>& x, std::span<const T>, std::span<const T>,
                    LayerCache<T>*) const override {
    return x.reshaped({x.batch(), x.example_size()});
  }
  Tensor<T> backward(const Tensor<T>& dy, std::span<const T>, const LayerCache<T>& cache,
                     std::span<T>, bool = true) const override {
    Shape s{dy.batch()};
    s.insert(s.end(), cache.input_shape.begin(), cache.input_shape.end());
    return dy.reshaped(std::move(s));
  }
};

template <Real T>
struct LossResult {
  T loss = 0;                    // mean over the batch
  std::vector<T> per_example;    // -log p_y for each example
  Tensor<T> grad_logits;         // d(reduced loss)/d(logits)
};

// Softmax cross-entropy head. Reduction::Mean is the training loss;
// Reduction::Sum gives per-example gradients independent of batch size,
// which is what the attacks ascend.
template <Real T>
class SoftmaxCrossEntropy {
 public:
  enum class Reduction { Mean, Sum };

  static constexpr LayerKind kind() { return LayerKind::SoftmaxCrossEntropy; }

  static Tensor<T> probabilities(const Tensor<T>& logits) {
    Tensor<T> p(logits.shape());
    const std::size_t c = logits.example_size();
    for (std::size_t b = 0; b < logits.batch(); ++b) {
      const T* z = logits.data() + b * c;
      T* q = p.data() + b * c;
      const T mx = *std::max_element(z, z + c);
      T s = 0;
      for (std::size_t j = 0; j < c; ++j) s += (q[j] = std::exp(z[j] - mx));
      for (std::size_t j = 0; j < c; ++j) q[j] /= s;
    }
    return p;
  }

  static LossResult<T> evaluate(const Tensor<T>& logits, std::span<const int> labels,
                                Reduction reduction = Reduction::Mean) {
    const std::size_t batch = logits.batch(), c = logits.example_size();
    if (labels.size() != batch) throw ShapeError("cross-entropy: label count does not match batch");
    LossResult<T> r;
    r.per_example.resize(batch);
    r.grad_logits = Tensor<T>(logits.shape());
    const T scale = reduction == Reduction::Mean ? T{1} / static_cast<T>(batch) : T{1};
    double total = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const int y = labels[b];
      if (y < 0 || static_cast<std::size_t>(y) >= c) throw ShapeError("cross-entropy: label out of range");
      const T* z = logits.data() + b * c;
      T* g = r.grad_logits.data() + b * c;
      const T mx = *std::max_element(z, z + c);
      T s = 0;
      for (std::size_t j = 0; j < c; ++j) s += (g[j] = std::exp(z[j] - mx));
      const T lse = mx + std::log(s);
      r.per_example[b] = lse - z[y];
      total += static_cast<double>(r.per_example[b]);
      for (std::size_t j = 0; j < c; ++j) g[j] = g[j] / s * scale;
      g[y] -= scale;
    }
    r.loss = static_cast<T>(total / static_cast<double>(batch));
    return r;
  }
};

}  // namespace swaat
