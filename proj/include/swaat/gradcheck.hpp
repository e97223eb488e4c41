#pragma once

#include "swaat/network.hpp"

namespace swaat {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Errors are relative to max(|analytic|, |numeric|, floor) so that
  // gradients that are numerically zero do not divide by zero.
  double floor = 1e-4;
  Mode mode = Mode::Train;
  bool check_input = true;
  std::size_t max_params = 0;  // 0 = every parameter; otherwise an even stride
};

struct GradCheckReport {
  double max_param_error = 0;
  double max_input_error = 0;
  std::size_t worst_param = 0;
  std::vector<double> per_layer;  // max error over each layer's parameters
  std::size_t checked = 0;
  bool passed = false;
};

// Central finite differences of the mean cross-entropy against backward().
template <Real T>
GradCheckReport grad_check(const Network<T>& net, const Tensor<T>& x, std::span<const int> y,
                           const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  rep.per_layer.assign(net.layer_count(), 0.0);
  ForwardCache<T> cache;
  const Tensor<T> logits = net.forward(x, opt.mode, &cache);
  const Gradients<T> g = net.backward(cache, logits, y);

  auto loss_at = [&](const Network<T>& n, const Tensor<T>& in) {
    return static_cast<double>(SoftmaxCrossEntropy<T>::evaluate(n.forward(in, opt.mode), y).loss);
  };
  auto rel = [&](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), opt.floor});
  };

  Network<T> probe = net;
  const std::size_t P = net.param_count();
  const std::size_t stride = (opt.max_params == 0 || opt.max_params >= P) ? 1 : P / opt.max_params;
  std::size_t layer = 0, layer_end = net.layer_count() ? net.layer(0).param_count() : 0;
  for (std::size_t i = 0; i < P; i += stride) {
    while (i >= layer_end && layer + 1 < net.layer_count()) layer_end += net.layer(++layer).param_count();
    auto p = probe.params();
    const T orig = p[i];
    p[i] = static_cast<T>(orig + opt.step);
    const double up = loss_at(probe, x);
    p[i] = static_cast<T>(orig - opt.step);
    const double down = loss_at(probe, x);
    p[i] = orig;
    const double numeric = (up - down) / (2 * opt.step);
    const double e = rel(static_cast<double>(g.params[i]), numeric);
    rep.per_layer[layer] = std::max(rep.per_layer[layer], e);
    if (e > rep.max_param_error) {
      rep.max_param_error = e;
      rep.worst_param = i;
    }
    ++rep.checked;
  }

  if (opt.check_input) {
    Tensor<T> xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T orig = xp[i];
      xp[i] = static_cast<T>(orig + opt.step);
      const double up = loss_at(net, xp);
      xp[i] = static_cast<T>(orig - opt.step);
      const double down = loss_at(net, xp);
      xp[i] = orig;
      rep.max_input_error = std::max(rep.max_input_error,
                                     rel(static_cast<double>(g.input[i]), (up - down) / (2 * opt.step)));
    }
  }
  rep.passed = rep.max_param_error < opt.tolerance && rep.max_input_error < opt.tolerance;
  return rep;
}

}  // namespace swaat
