#pragma once

#include <limits>
#include <optional>

#include "swaat/network.hpp"

namespace swaat {

enum class Norm { Linf, L2, Unconstrained };

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct AttackConfig {
  Norm norm = Norm::Linf;
  double epsilon = 8.0 / 255;
  double alpha = 2.0 / 255;
  int steps = 10;
  bool random_init = true;

  bool bounded() const { return norm != Norm::Unconstrained && std::isfinite(epsilon); }

  // Throws on invalid settings; returns a warning for a saturating step size.
  std::optional<std::string> validate() const {
    if (!(epsilon >= 0)) throw UserError("attack: epsilon must be >= 0");
    if (!(alpha > 0) || !std::isfinite(alpha)) throw UserError("attack: alpha must be positive and finite");
    if (steps < 1) throw UserError("attack: steps must be >= 1");
    if (bounded() && epsilon > 0 && alpha > 2 * epsilon)
      return "attack: alpha > 2*epsilon, every step saturates the ball";
    return std::nullopt;
  }
};

struct CWConfig {
  double c = 0.2;
  double kappa = 0.0;
  double lr = 0.01;
  int steps = 100;

  void validate() const {
    if (!(c > 0)) throw UserError("cw: c must be positive");
    if (!(kappa >= 0)) throw UserError("cw: kappa must be >= 0");
    if (!(lr > 0)) throw UserError("cw: lr must be positive");
    if (steps < 1) throw UserError("cw: steps must be >= 1");
  }
};

// A parsed attack spec string:
//   none
//   fgsm:eps=0.1
//   pgd:linf:eps=8/255:alpha=2/255:steps=10:rand=1
//   pgd:l2:eps=1.5:alpha=0.25:steps=20
//   pgd:linf:eps=inf:alpha=0.025:steps=100      (projection disabled)
//   pgd:unconstrained:alpha=0.5:steps=100        (raw-gradient steps)
//   cw:c=0.2:kappa=0:lr=0.01:steps=100
struct AttackSpec {
  enum class Kind { None, Fgsm, Pgd, CW };
  Kind kind = Kind::None;
  AttackConfig pgd;
  CWConfig cw;
  std::string text = "none";
};

namespace detail {

// Parses "a", "a/b", "inf"; a/b is a single correctly rounded division.
inline double parse_number(std::string_view s, const std::string& ctx) {
  if (s == "inf" || s == "infinity") return kInf;
  auto one = [&](std::string_view t) {
    double v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty())
      throw UserError(ctx + ": bad number '" + std::string(s) + "'");
    return v;
  };
  const auto slash = s.find('/');
  if (slash == std::string_view::npos) return one(s);
  const double den = one(s.substr(slash + 1));
  if (den == 0) throw UserError(ctx + ": division by zero in '" + std::string(s) + "'");
  return one(s.substr(0, slash)) / den;
}

inline int parse_int(std::string_view s, const std::string& ctx) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw UserError(ctx + ": bad integer '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  while (true) {
    const auto pos = s.find(sep);
    out.push_back(s.substr(0, pos));
    if (pos == std::string_view::npos) break;
    s.remove_prefix(pos + 1);
  }
  return out;
}

}  // namespace detail

inline AttackSpec parse_attack(std::string_view text) {
  AttackSpec spec;
  spec.text = std::string(text);
  const auto parts = detail::split(text, ':');
  const std::string ctx = "attack '" + spec.text + "'";
  const std::string_view head = parts[0];
  std::size_t first_kv = 1;
  if (head == "none" || head == "natural") {
    if (parts.size() != 1) throw UserError(ctx + ": 'none' takes no options");
    return spec;
  }
  if (head == "fgsm") {
    spec.kind = AttackSpec::Kind::Fgsm;
    spec.pgd.steps = 1;
    spec.pgd.random_init = false;
  } else if (head == "pgd") {
    spec.kind = AttackSpec::Kind::Pgd;
    if (parts.size() < 2) throw UserError(ctx + ": missing norm");
    if (parts[1] == "linf") spec.pgd.norm = Norm::Linf;
    else if (parts[1] == "l2") spec.pgd.norm = Norm::L2;
    else if (parts[1] == "unconstrained" || parts[1] == "none") spec.pgd.norm = Norm::Unconstrained;
    else throw UserError(ctx + ": unknown norm '" + std::string(parts[1]) + "'");
    first_kv = 2;
  } else if (head == "cw") {
    spec.kind = AttackSpec::Kind::CW;
  } else {
    throw UserError(ctx + ": unknown attack '" + std::string(head) + "'");
  }

  bool have_eps = false, have_alpha = false;
  for (std::size_t i = first_kv; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string_view::npos) throw UserError(ctx + ": expected key=value, got '" + std::string(parts[i]) + "'");
    const auto key = parts[i].substr(0, eq), val = parts[i].substr(eq + 1);
    if (spec.kind == AttackSpec::Kind::CW) {
      if (key == "c") spec.cw.c = detail::parse_number(val, ctx);
      else if (key == "kappa") spec.cw.kappa = detail::parse_number(val, ctx);
      else if (key == "lr") spec.cw.lr = detail::parse_number(val, ctx);
      else if (key == "steps") spec.cw.steps = detail::parse_int(val, ctx);
      else throw UserError(ctx + ": unknown key '" + std::string(key) + "'");
      continue;
    }
    if (key == "eps") {
      spec.pgd.epsilon = detail::parse_number(val, ctx);
      have_eps = true;
    } else if (key == "alpha" && spec.kind == AttackSpec::Kind::Pgd) {
      spec.pgd.alpha = detail::parse_number(val, ctx);
      have_alpha = true;
    } else if (key == "steps" && spec.kind == AttackSpec::Kind::Pgd) {
      spec.pgd.steps = detail::parse_int(val, ctx);
    } else if (key == "rand" && spec.kind == AttackSpec::Kind::Pgd) {
      spec.pgd.random_init = detail::parse_int(val, ctx) != 0;
    } else {
      throw UserError(ctx + ": unknown key '" + std::string(key) + "'");
    }
  }
  if (spec.kind == AttackSpec::Kind::CW) {
    spec.cw.validate();
    return spec;
  }
  if (spec.pgd.norm == Norm::Unconstrained) {
    spec.pgd.epsilon = kInf;
  } else if (!have_eps) {
    throw UserError(ctx + ": eps is required");
  }
  if (spec.kind == AttackSpec::Kind::Fgsm) {
    if (!std::isfinite(spec.pgd.epsilon)) throw UserError(ctx + ": fgsm needs a finite eps");
    spec.pgd.alpha = spec.pgd.epsilon > 0 ? spec.pgd.epsilon : 1.0;
  } else if (!have_alpha) {
    throw UserError(ctx + ": alpha is required");
  }
  spec.pgd.validate();
  return spec;
}

// Anything the attacks can differentiate through: networks, ensembles and
// test wrappers.
template <typename M, typename T>
concept Classifier = requires(const M& m, const Tensor<T>& x, std::span<const int> y) {
  { m.logits(x) } -> std::same_as<Tensor<T>>;
  { m.loss_input_gradient(x, y) } -> std::same_as<InputGradient<T>>;
  { m.logit_vjp(x, [](const Tensor<T>& z) { return z; }) } -> std::same_as<Tensor<T>>;
};

// Negative control for the obfuscation check: a model that reports a large
// one-hot logit for its wrapped network's prediction and has zero gradient
// everywhere.
template <Real T>
class GradientMasked {
 public:
  explicit GradientMasked(const Network<T>& net, T scale = T{100}) : net_(&net), scale_(scale) {}

  Tensor<T> logits(const Tensor<T>& x) const {
    const Tensor<T> z = net_->logits(x);
    Tensor<T> out(z.shape());
    const auto pred = argmax_rows(z);
    for (std::size_t b = 0; b < z.batch(); ++b) out[b * z.example_size() + static_cast<std::size_t>(pred[b])] = scale_;
    return out;
  }
  InputGradient<T> loss_input_gradient(const Tensor<T>& x, std::span<const int> y) const {
    InputGradient<T> r;
    r.logits = logits(x);
    r.per_example = SoftmaxCrossEntropy<T>::evaluate(r.logits, y, SoftmaxCrossEntropy<T>::Reduction::Sum).per_example;
    r.grad = Tensor<T>(x.shape());
    return r;
  }
  template <typename Seed>
  Tensor<T> logit_vjp(const Tensor<T>& x, Seed&&, Tensor<T>* logits_out = nullptr) const {
    if (logits_out) *logits_out = logits(x);
    return Tensor<T>(x.shape());
  }

 private:
  const Network<T>* net_;
  T scale_;
};

struct AttackOptions {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::size_t chunk = 32;  // examples per work item
};

namespace detail {

template <Real T>
T sign(T v) {
  return static_cast<T>((v > T{0}) - (v < T{0}));
}

// Projection onto B(x0) intersected with [0,1]^d for one example.
template <Real T>
void project(std::span<T> x, std::span<const T> x0, const AttackConfig& cfg) {
  const std::size_t d = x.size();
  if (cfg.bounded() && cfg.norm == Norm::Linf) {
    const T e = static_cast<T>(cfg.epsilon);
    for (std::size_t i = 0; i < d; ++i)
      x[i] = std::clamp(x[i], std::max(T{0}, x0[i] - e), std::min(T{1}, x0[i] + e));
    return;
  }
  if (cfg.bounded() && cfg.norm == Norm::L2) {
    double n2 = 0;
    for (std::size_t i = 0; i < d; ++i) n2 += static_cast<double>(x[i] - x0[i]) * static_cast<double>(x[i] - x0[i]);
    const double n = std::sqrt(n2);
    if (n > cfg.epsilon) {
      const double f = cfg.epsilon / n;
      for (std::size_t i = 0; i < d; ++i) x[i] = static_cast<T>(x0[i] + (x[i] - x0[i]) * f);
    }
  }
  // Clipping to the pixel box moves every coordinate toward x0 (which lies in
  // the box), so it never leaves the ball.
  for (std::size_t i = 0; i < d; ++i) x[i] = std::clamp(x[i], T{0}, T{1});
}

template <Real T>
void random_start(std::span<T> x, std::span<const T> x0, const AttackConfig& cfg, Rng& rng) {
  if (!cfg.bounded() || cfg.epsilon == 0) return;
  const std::size_t d = x.size();
  if (cfg.norm == Norm::Linf) {
    for (std::size_t i = 0; i < d; ++i) x[i] = static_cast<T>(x0[i] + rng.uniform(-cfg.epsilon, cfg.epsilon));
  } else {
    std::vector<double> dir(d);
    double n2 = 0;
    for (auto& v : dir) {
      v = rng.normal();
      n2 += v * v;
    }
    const double r = cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d)) / std::sqrt(n2);
    for (std::size_t i = 0; i < d; ++i) x[i] = static_cast<T>(x0[i] + r * dir[i]);
  }
  project(x, x0, cfg);
}

// One ascent step on example e of x given the gradient g.
template <Real T>
void ascend(std::span<T> x, std::span<const T> g, const AttackConfig& cfg) {
  const T a = static_cast<T>(cfg.alpha);
  switch (cfg.norm) {
    case Norm::Linf:
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += a * sign(g[i]);
      break;
    case Norm::L2: {
      double n2 = 0;
      for (const T v : g) n2 += static_cast<double>(v) * static_cast<double>(v);
      if (n2 == 0) return;  // no direction: stay put this step
      const T f = static_cast<T>(cfg.alpha / std::sqrt(n2));
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += f * g[i];
      break;
    }
    case Norm::Unconstrained:
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += a * g[i];
      break;
  }
}

// Runs fn(begin, end) over example chunks and returns per-chunk results in order.
template <typename Fn>
void for_chunks(std::size_t n, const AttackOptions& opt, Fn&& fn) {
  parallel_chunks(n, opt.chunk, opt.threads, std::forward<Fn>(fn));
}

template <Real T>
Tensor<T> rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  return x.slice(begin, end - begin);
}

}  // namespace detail

// PGD on a batch chunk, Eval mode. Random starts draw from a per-example
// stream derived from (seed, global example index), so the result does not
// depend on chunking or thread count.
template <Real T, typename M>
  requires Classifier<M, T>
Tensor<T> pgd_chunk(const M& model, const Tensor<T>& x0, std::span<const int> y, const AttackConfig& cfg,
                    std::uint64_t seed, std::size_t first_index) {
  Tensor<T> x = x0;
  if (cfg.random_init)
    for (std::size_t e = 0; e < x.batch(); ++e) {
      Rng rng(derive_seed(seed, "pgd-init", first_index + e));
      detail::random_start(x.example(e), x0.example(e), cfg, rng);
    }
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = model.loss_input_gradient(x, y);
    if (!g.grad.all_finite()) throw NumericError("pgd: non-finite input gradient");
    for (std::size_t e = 0; e < x.batch(); ++e) {
      detail::ascend(x.example(e), g.grad.example(e), cfg);
      detail::project(x.example(e), x0.example(e), cfg);
    }
  }
  return x;
}

template <Real T, typename M>
  requires Classifier<M, T>
Tensor<T> pgd(const M& model, const Tensor<T>& x, std::span<const int> y, const AttackConfig& cfg,
              const AttackOptions& opt = {}) {
  if (y.size() != x.batch()) throw ShapeError("pgd: label count does not match batch");
  Tensor<T> out(x.shape(), Uninitialized{});
  detail::for_chunks(x.batch(), opt, [&](std::size_t b, std::size_t e) {
    out.assign_slice(b, pgd_chunk<T>(model, detail::rows(x, b, e), y.subspan(b, e - b), cfg, opt.seed, b));
  });
  return out;
}

// x_adv = clip_[0,1](x + eps * sign(grad)), one gradient evaluation.
template <Real T, typename M>
  requires Classifier<M, T>
Tensor<T> fgsm_chunk(const M& model, const Tensor<T>& x, std::span<const int> y, double epsilon) {
  const auto g = model.loss_input_gradient(x, y);
  if (!g.grad.all_finite()) throw NumericError("fgsm: non-finite input gradient");
  const T e = static_cast<T>(epsilon);
  Tensor<T> out(x.shape(), Uninitialized{});
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + e * detail::sign(g.grad[i]), T{0}, T{1});
  return out;
}

template <Real T, typename M>
  requires Classifier<M, T>
Tensor<T> fgsm(const M& model, const Tensor<T>& x, std::span<const int> y, double epsilon,
               const AttackOptions& opt = {}) {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw UserError("fgsm: epsilon must be finite and >= 0");
  if (y.size() != x.batch()) throw ShapeError("fgsm: label count does not match batch");
  Tensor<T> out(x.shape(), Uninitialized{});
  detail::for_chunks(x.batch(), opt, [&](std::size_t b, std::size_t e) {
    out.assign_slice(b, fgsm_chunk<T>(model, detail::rows(x, b, e), y.subspan(b, e - b), epsilon));
  });
  return out;
}

// Fixed-c Carlini-Wagner l2 with tanh reparameterization and plain gradient
// descent; returns the best iterate by objective for each example.
template <Real T, typename M>
  requires Classifier<M, T>
Tensor<T> cw_chunk(const M& model, const Tensor<T>& x0, std::span<const int> y, const CWConfig& cfg) {
  const std::size_t B = x0.batch(), D = x0.example_size();
  // x = (tanh(w) + 1) / 2; pixels at 0 or 1 start a hair inside the box.
  const double shrink = 1 - 1e-6;
  std::vector<double> w(B * D);
  for (std::size_t i = 0; i < B * D; ++i) w[i] = std::atanh((2 * static_cast<double>(x0[i]) - 1) * shrink);

  Tensor<T> x(x0.shape(), Uninitialized{}), best = x0;
  std::vector<double> best_obj(B, kInf);
  for (int s = 0; s <= cfg.steps; ++s) {
    for (std::size_t i = 0; i < B * D; ++i) x[i] = static_cast<T>((std::tanh(w[i]) + 1) / 2);
    Tensor<T> z;
    const Tensor<T> gz = model.logit_vjp(
        x,
        [&](const Tensor<T>& logits) {
          const std::size_t C = logits.example_size();
          Tensor<T> seed(logits.shape());
          for (std::size_t b = 0; b < B; ++b) {
            const T* zb = logits.data() + b * C;
            const auto yb = static_cast<std::size_t>(y[b]);
            std::size_t other = yb == 0 ? 1 : 0;
            for (std::size_t j = 0; j < C; ++j)
              if (j != yb && zb[j] > zb[other]) other = j;
            const double m = static_cast<double>(zb[yb] - zb[other]);
            double dist = 0;
            for (std::size_t i = 0; i < D; ++i) {
              const double d = static_cast<double>(x[b * D + i]) - static_cast<double>(x0[b * D + i]);
              dist += d * d;
            }
            const double obj = dist + cfg.c * std::max(m, -cfg.kappa);
            if (obj < best_obj[b]) {
              best_obj[b] = obj;
              std::copy_n(x.data() + b * D, D, best.data() + b * D);
            }
            if (m > -cfg.kappa) {
              seed[b * C + yb] = static_cast<T>(cfg.c);
              seed[b * C + other] = static_cast<T>(-cfg.c);
            }
          }
          return seed;
        },
        &z);
    if (s == cfg.steps) break;
    if (!gz.all_finite()) throw NumericError("cw: non-finite gradient");
    for (std::size_t i = 0; i < B * D; ++i) {
      const double t = std::tanh(w[i]);
      const double dobj_dx = 2 * (static_cast<double>(x[i]) - static_cast<double>(x0[i])) + static_cast<double>(gz[i]);
      w[i] -= cfg.lr * dobj_dx * (1 - t * t) / 2;
    }
  }
  return best;
}

template <Real T, typename M>
  requires Classifier<M, T>
Tensor<T> cw_l2(const M& model, const Tensor<T>& x, std::span<const int> y, const CWConfig& cfg,
                const AttackOptions& opt = {}) {
  cfg.validate();
  if (y.size() != x.batch()) throw ShapeError("cw: label count does not match batch");
  Tensor<T> out(x.shape(), Uninitialized{});
  detail::for_chunks(x.batch(), opt, [&](std::size_t b, std::size_t e) {
    out.assign_slice(b, cw_chunk<T>(model, detail::rows(x, b, e), y.subspan(b, e - b), cfg));
  });
  return out;
}

template <Real T, typename M>
  requires Classifier<M, T>
Tensor<T> run_attack(const M& model, const Tensor<T>& x, std::span<const int> y, const AttackSpec& spec,
                     const AttackOptions& opt = {}) {
  switch (spec.kind) {
    case AttackSpec::Kind::None: return x;
    case AttackSpec::Kind::Fgsm: return fgsm(model, x, y, spec.pgd.epsilon, opt);
    case AttackSpec::Kind::Pgd: return pgd(model, x, y, spec.pgd, opt);
    case AttackSpec::Kind::CW: return cw_l2(model, x, y, spec.cw, opt);
  }
  throw Error("unreachable attack kind");
}

// Eval-mode predictions; ties go to the lowest class index.
template <Real T, typename M>
std::vector<int> predict(const M& model, const Tensor<T>& x, const AttackOptions& opt = {}) {
  std::vector<int> out(x.batch());
  detail::for_chunks(x.batch(), opt, [&](std::size_t b, std::size_t e) {
    const auto p = argmax_rows(model.logits(detail::rows(x, b, e)));
    std::copy(p.begin(), p.end(), out.begin() + static_cast<std::ptrdiff_t>(b));
  });
  return out;
}

// Per-example correctness under an attack (attack and prediction are fused
// per chunk so the adversarial batch never has to be materialized whole).
template <Real T, typename M>
  requires Classifier<M, T>
std::vector<std::uint8_t> correct_under_attack(const M& model, const Tensor<T>& x, std::span<const int> y,
                                               const AttackSpec& spec, const AttackOptions& opt = {}) {
  if (y.size() != x.batch()) throw ShapeError("attack: label count does not match batch");
  std::vector<std::uint8_t> ok(x.batch());
  detail::for_chunks(x.batch(), opt, [&](std::size_t b, std::size_t e) {
    const Tensor<T> xs = detail::rows(x, b, e);
    const auto ys = y.subspan(b, e - b);
    Tensor<T> xa;
    switch (spec.kind) {
      case AttackSpec::Kind::None: xa = xs; break;
      case AttackSpec::Kind::CW: xa = cw_chunk<T>(model, xs, ys, spec.cw); break;
      case AttackSpec::Kind::Fgsm: xa = fgsm_chunk<T>(model, xs, ys, spec.pgd.epsilon); break;
      case AttackSpec::Kind::Pgd: xa = pgd_chunk<T>(model, xs, ys, spec.pgd, opt.seed, b); break;
    }
    const auto p = argmax_rows(model.logits(xa));
    for (std::size_t i = 0; i < p.size(); ++i) ok[b + i] = p[i] == ys[i];
  });
  return ok;
}

template <Real T, typename M>
  requires Classifier<M, T>
double accuracy_under_attack(const M& model, const Tensor<T>& x, std::span<const int> y, const AttackSpec& spec,
                             const AttackOptions& opt = {}) {
  const auto ok = correct_under_attack(model, x, y, spec, opt);
  return static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(ok.size());
}

template <Real T, typename M>
double accuracy(const M& model, const Tensor<T>& x, std::span<const int> y, const AttackOptions& opt = {}) {
  const auto p = predict<T>(model, x, opt);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(p.size());
}

}  // namespace swaat
