#pragma once

#include <charconv>
#include <map>

#include "swaat/layers.hpp"

namespace swaat {

// Trainable parameters in canonical order: layer order, weight before bias,
// gamma before beta. BN running statistics are not part of it.
template <Real T>
class FlatParams {
 public:
  FlatParams() = default;
  explicit FlatParams(std::size_t n, T fill = T{0}) : v_(n, fill) {}
  explicit FlatParams(const std::vector<T>& v) : v_(v.begin(), v.end()) {}
  explicit FlatParams(AlignedVector<T> v) : v_(std::move(v)) {}

  std::size_t size() const { return v_.size(); }
  std::span<T> values() { return v_; }
  std::span<const T> values() const { return v_; }
  AlignedVector<T>& storage() { return v_; }
  const AlignedVector<T>& storage() const { return v_; }
  T& operator[](std::size_t i) { return v_[i]; }
  const T& operator[](std::size_t i) const { return v_[i]; }

  bool operator==(const FlatParams&) const = default;

 private:
  AlignedVector<T> v_;
};

template <Real T>
struct ForwardCache {
  Mode mode = Mode::Eval;
  bool param_grads = true;
  std::vector<LayerCache<T>> layers;
};

template <Real T>
struct Gradients {
  FlatParams<T> params;
  Tensor<T> input;
  T loss = 0;
  std::vector<T> per_example;
};

template <Real T>
struct InputGradient {
  Tensor<T> grad;              // d(sum of per-example losses)/dx
  std::vector<T> per_example;  // loss values at x
  Tensor<T> logits;
};

template <Real T>
class Network {
 public:
  using LayerPtr = std::shared_ptr<const Layer<T>>;

  Network() = default;

  Network(Shape input_shape, std::vector<LayerPtr> layers)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    if (layers_.empty()) throw ShapeError("network: no layers");
    Shape s = input_shape_;
    std::size_t p = 0, st = 0;
    for (const auto& l : layers_) {
      param_offset_.push_back(p);
      state_offset_.push_back(st);
      shapes_.push_back(s);
      s = l->output_shape(s);
      p += l->param_count();
      st += l->state_count();
    }
    if (s.size() != 1) throw ShapeError("network: output must be a flat logit vector, got " + shape_str(s));
    classes_ = s[0];
    params_.assign(p, T{0});
    state_.assign(st, T{0});
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->init_state(state_span(i));
  }

  // "input=1x28x28;conv2d(1,16,3,1,1);batchnorm(16);relu;...".
  static Network from_descriptor(std::string_view text);

  std::string descriptor() const {
    std::string s = "input=";
    for (std::size_t i = 0; i < input_shape_.size(); ++i)
      s += (i ? "x" : "") + std::to_string(input_shape_[i]);
    for (const auto& l : layers_) s += ";" + l->descriptor();
    return s;
  }

  // He-normal weights, zero biases, identity BN. The final Dense layer (the
  // classifier head) starts at zero so the initial prediction is uniform.
  void init(Rng& rng) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->init_params(param_span(i), rng);
      layers_[i]->init_state(state_span(i));
    }
    for (std::size_t i = layers_.size(); i-- > 0;)
      if (layers_[i]->kind() == LayerKind::Dense) {
        if (i + 1 == layers_.size()) std::ranges::fill(param_span(i), T{0});
        break;
      }
    bn_stale_ = false;
  }

  const Shape& input_shape() const { return input_shape_; }
  std::size_t classes() const { return classes_; }
  std::size_t param_count() const { return params_.size(); }
  std::size_t state_count() const { return state_.size(); }
  std::size_t layer_count() const { return layers_.size(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
  const Shape& layer_input_shape(std::size_t i) const { return shapes_.at(i); }

  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  std::span<T> bn_state() { return state_; }
  std::span<const T> bn_state() const { return state_; }
  std::span<T> param_span(std::size_t i) {
    return std::span<T>(params_).subspan(param_offset_[i], layers_[i]->param_count());
  }
  std::span<const T> param_span(std::size_t i) const {
    return std::span<const T>(params_).subspan(param_offset_[i], layers_[i]->param_count());
  }
  std::span<T> state_span(std::size_t i) {
    return std::span<T>(state_).subspan(state_offset_[i], layers_[i]->state_count());
  }
  std::span<const T> state_span(std::size_t i) const {
    return std::span<const T>(state_).subspan(state_offset_[i], layers_[i]->state_count());
  }

  FlatParams<T> flatten() const { return FlatParams<T>(params_); }

  void unflatten(const FlatParams<T>& v) {
    if (v.size() != params_.size())
      throw ShapeError("unflatten: expected " + std::to_string(params_.size()) + " values, got " +
                       std::to_string(v.size()));
    std::copy(v.storage().begin(), v.storage().end(), params_.begin());
  }

  // Set after weights are replaced; cleared by BN recalibration.
  bool bn_stale() const { return bn_stale_; }
  void set_bn_stale(bool stale) { bn_stale_ = stale; }

  bool has_batchnorm() const {
    return std::any_of(layers_.begin(), layers_.end(),
                       [](const LayerPtr& l) { return l->kind() == LayerKind::BatchNorm; });
  }

  std::uint64_t param_hash() const {
    Fnv1a64 h;
    h.update(std::span<const T>(params_));
    return h.digest();
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, ForwardCache<T>* cache = nullptr,
                    bool param_grads = true) const {
    return run(x, mode, cache, param_grads, layers_.size());
  }

  // Eval-mode forward through layers [0, end).
  Tensor<T> forward_prefix(const Tensor<T>& x, std::size_t end) const {
    return run(x, Mode::Eval, nullptr, false, end);
  }

  // Backpropagates dL/dlogits. Returns dL/dx (empty when input_grad is
  // false); fills grad_params (length P) unless it is empty.
  Tensor<T> backward(const ForwardCache<T>& cache, const Tensor<T>& grad_logits,
                     std::span<T> grad_params, bool input_grad = true) const {
    if (cache.layers.size() != layers_.size()) throw ShapeError("backward: cache does not match network");
    if (!grad_params.empty() && grad_params.size() != params_.size())
      throw ShapeError("backward: gradient buffer has wrong length");
    if (!grad_params.empty() && !cache.param_grads)
      throw Error("backward: forward pass did not keep parameter-gradient intermediates");
    Tensor<T> g = grad_logits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      std::span<T> gp = grad_params.empty()
                            ? std::span<T>()
                            : grad_params.subspan(param_offset_[i], layers_[i]->param_count());
      g = layers_[i]->backward(g, param_span(i), cache.layers[i], gp, input_grad || i > 0);
      if (!g.all_finite())
        throw NumericError("non-finite gradient in layer " + std::to_string(i) + " (" +
                           layers_[i]->descriptor() + ")");
    }
    return g;
  }

  // Mean cross-entropy over the batch with parameter and input gradients.
  Gradients<T> backward(const ForwardCache<T>& cache, const Tensor<T>& logits,
                        std::span<const int> labels, bool input_grad = true) const {
    auto loss = SoftmaxCrossEntropy<T>::evaluate(logits, labels);
    Gradients<T> g;
    g.params = FlatParams<T>(params_.size());
    g.input = backward(cache, loss.grad_logits, g.params.values(), input_grad);
    g.loss = loss.loss;
    g.per_example = std::move(loss.per_example);
    return g;
  }

  // Mixes the batch statistics of a Train-mode pass into the running stats.
  void absorb_batch_statistics(const ForwardCache<T>& cache, double momentum) {
    if (cache.mode != Mode::Train) return;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i]->kind() != LayerKind::BatchNorm) continue;
      auto s = state_span(i);
      const auto& lc = cache.layers[i];
      const std::size_t c = lc.mean.size();
      for (std::size_t j = 0; j < c; ++j) {
        s[j] = static_cast<T>((1 - momentum) * s[j] + momentum * lc.mean[j]);
        s[c + j] = static_cast<T>((1 - momentum) * s[c + j] + momentum * lc.var[j]);
      }
    }
  }

  // Eval-mode logits.
  Tensor<T> logits(const Tensor<T>& x) const { return forward(x, Mode::Eval); }

  // Eval-mode gradient of the summed per-example cross-entropy w.r.t. x.
  InputGradient<T> loss_input_gradient(const Tensor<T>& x, std::span<const int> labels) const {
    ForwardCache<T> cache;
    InputGradient<T> r;
    r.logits = forward(x, Mode::Eval, &cache, false);
    auto loss = SoftmaxCrossEntropy<T>::evaluate(r.logits, labels,
                                                 SoftmaxCrossEntropy<T>::Reduction::Sum);
    r.grad = backward(cache, loss.grad_logits, std::span<T>());
    r.per_example = std::move(loss.per_example);
    return r;
  }

  // Eval-mode vector-Jacobian product: seed(logits) returns dL/dlogits.
  template <typename Seed>
  Tensor<T> logit_vjp(const Tensor<T>& x, Seed&& seed, Tensor<T>* logits_out = nullptr) const {
    ForwardCache<T> cache;
    Tensor<T> z = forward(x, Mode::Eval, &cache, false);
    Tensor<T> g = seed(static_cast<const Tensor<T>&>(z));
    if (logits_out) *logits_out = std::move(z);
    return backward(cache, g, std::span<T>());
  }

  template <Real U>
  Network<U> cast() const {
    Network<U> out = Network<U>::from_descriptor(descriptor());
    std::copy(params_.begin(), params_.end(), out.params().begin());
    std::copy(state_.begin(), state_.end(), out.bn_state().begin());
    out.set_bn_stale(bn_stale_);
    return out;
  }

 private:
  Tensor<T> run(const Tensor<T>& x, Mode mode, ForwardCache<T>* cache, bool param_grads,
                std::size_t end) const {
    if (x.rank() != input_shape_.size() + 1 || x.example_shape() != input_shape_)
      throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match network input " +
                       shape_str(input_shape_));
    if (cache) {
      cache->mode = mode;
      cache->param_grads = param_grads;
      cache->layers.assign(layers_.size(), LayerCache<T>{});
    }
    LayerCache<T> scratch;
    Tensor<T> h = x;
    for (std::size_t i = 0; i < end; ++i) {
      LayerCache<T>* lc = nullptr;
      if (cache) {
        lc = &cache->layers[i];
      } else if (mode == Mode::Train && layers_[i]->kind() == LayerKind::BatchNorm) {
        scratch = LayerCache<T>{};
        lc = &scratch;
      }
      if (lc) {
        lc->mode = mode;
        lc->param_grads = param_grads;
        lc->input_shape = shapes_[i];
      }
      h = layers_[i]->forward(h, param_span(i), state_span(i), lc);
      if (!h.all_finite())
        throw NumericError("non-finite activation in layer " + std::to_string(i) + " (" +
                           layers_[i]->descriptor() + ")");
    }
    return h;
  }

  Shape input_shape_;
  std::vector<LayerPtr> layers_;
  std::vector<std::size_t> param_offset_, state_offset_;
  std::vector<Shape> shapes_;
  std::size_t classes_ = 0;
  AlignedVector<T> params_;
  AlignedVector<T> state_;
  bool bn_stale_ = false;
};

namespace detail {

inline std::vector<std::size_t> parse_sizes(std::string_view s, char sep) {
  std::vector<std::size_t> out;
  while (!s.empty()) {
    const auto pos = s.find(sep);
    const auto tok = s.substr(0, pos);
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size())
      throw FormatError("architecture: bad integer '" + std::string(tok) + "'");
    out.push_back(v);
    if (pos == std::string_view::npos) break;
    s.remove_prefix(pos + 1);
  }
  return out;
}

template <Real T>
std::shared_ptr<const Layer<T>> parse_layer(std::string_view tok) {
  const auto open = tok.find('(');
  const std::string name(tok.substr(0, open));
  std::vector<std::size_t> a;
  if (open != std::string_view::npos) {
    if (tok.back() != ')') throw FormatError("architecture: unterminated '" + std::string(tok) + "'");
    a = parse_sizes(tok.substr(open + 1, tok.size() - open - 2), ',');
  }
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (a.size() < lo || a.size() > hi)
      throw FormatError("architecture: wrong argument count in '" + std::string(tok) + "'");
  };
  if (name == "dense") {
    need(2, 2);
    return std::make_shared<Dense<T>>(a[0], a[1]);
  }
  if (name == "conv2d") {
    need(3, 5);
    return std::make_shared<Conv2d<T>>(a[0], a[1], a[2], a.size() > 3 ? a[3] : 1, a.size() > 4 ? a[4] : 0);
  }
  if (name == "batchnorm") {
    need(1, 1);
    return std::make_shared<BatchNorm<T>>(a[0]);
  }
  if (name == "maxpool") {
    need(1, 1);
    return std::make_shared<MaxPool<T>>(a[0]);
  }
  if (name == "relu") {
    need(0, 0);
    return std::make_shared<ReLU<T>>();
  }
  if (name == "flatten") {
    need(0, 0);
    return std::make_shared<Flatten<T>>();
  }
  throw FormatError("architecture: unknown layer '" + name + "'");
}

}  // namespace detail

template <Real T>
Network<T> Network<T>::from_descriptor(std::string_view text) {
  std::vector<std::string_view> toks;
  while (!text.empty()) {
    const auto pos = text.find(';');
    if (auto t = text.substr(0, pos); !t.empty()) toks.push_back(t);
    if (pos == std::string_view::npos) break;
    text.remove_prefix(pos + 1);
  }
  if (toks.empty() || !toks[0].starts_with("input="))
    throw FormatError("architecture: descriptor must start with input=CxHxW");
  Shape in = detail::parse_sizes(toks[0].substr(6), 'x');
  std::vector<LayerPtr> layers;
  for (std::size_t i = 1; i < toks.size(); ++i) layers.push_back(detail::parse_layer<T>(toks[i]));
  try {
    return Network(std::move(in), std::move(layers));
  } catch (const ShapeError& e) {
    throw FormatError(std::string("architecture: ") + e.what());
  }
}

// Built-in architectures.
//   cnn-small : conv3x3x16, BN, ReLU, pool2, conv3x3x32, BN, ReLU, pool2, dense
//   mlp-small : dense 256 with BN and ReLU, dense
//   linear    : a single dense layer (no nonlinearity, no BN)
//   linear2   : two stacked dense layers (still linear in x)
inline std::string preset_descriptor(std::string_view name, const Shape& input, std::size_t classes) {
  if (input.size() != 3) throw UserError("preset: input shape must be CxHxW");
  const std::string in = "input=" + std::to_string(input[0]) + "x" + std::to_string(input[1]) + "x" +
                         std::to_string(input[2]);
  const std::size_t flat = shape_size(input);
  const auto k = std::to_string(classes);
  if (name == "cnn-small") {
    const std::size_t h = input[1] / 2 / 2, w = input[2] / 2 / 2;
    return in + ";conv2d(" + std::to_string(input[0]) + ",16,3,1,1);batchnorm(16);relu;maxpool(2)" +
           ";conv2d(16,32,3,1,1);batchnorm(32);relu;maxpool(2);flatten;dense(" +
           std::to_string(32 * h * w) + "," + k + ")";
  }
  if (name == "mlp-small")
    return in + ";flatten;dense(" + std::to_string(flat) + ",256);batchnorm(256);relu;dense(256," + k + ")";
  if (name == "linear") return in + ";flatten;dense(" + std::to_string(flat) + "," + k + ")";
  if (name == "linear2")
    return in + ";flatten;dense(" + std::to_string(flat) + ",32);dense(32," + k + ")";
  throw UserError("unknown architecture preset '" + std::string(name) + "'");
}

// Accepts a preset name or a full descriptor.
template <Real T>
Network<T> make_network(std::string_view arch, const Shape& input, std::size_t classes) {
  if (arch.starts_with("input=")) return Network<T>::from_descriptor(arch);
  return Network<T>::from_descriptor(preset_descriptor(arch, input, classes));
}

}  // namespace swaat
