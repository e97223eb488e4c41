#pragma once

#include <json.hpp>

#include "swaat/train.hpp"

namespace swaat {

enum class Combine { MeanProb, MeanLogit, MajorityVote };

inline std::string to_string(Combine c) {
  switch (c) {
    case Combine::MeanProb: return "mean-prob";
    case Combine::MeanLogit: return "mean-logit";
    case Combine::MajorityVote: return "majority-vote";
  }
  return "?";
}

inline Combine parse_combine(std::string_view s) {
  if (s == "mean-prob" || s == "prob") return Combine::MeanProb;
  if (s == "mean-logit" || s == "logit") return Combine::MeanLogit;
  if (s == "majority-vote" || s == "vote") return Combine::MajorityVote;
  throw UserError("unknown combine rule '" + std::string(s) + "'");
}

// Late ensemble of Eval-mode members. logits() returns a score whose argmax
// is the ensemble prediction: log of the mean probability (MeanProb), the
// mean logit (MeanLogit) or vote counts (MajorityVote). For the two
// differentiable rules the training loss is cross-entropy of that score.
template <Real T>
class Ensemble {
 public:
  explicit Ensemble(std::vector<Network<T>> members, Combine combine = Combine::MeanProb)
      : members_(std::move(members)), combine_(combine) {
    if (members_.empty()) throw UserError("ensemble: needs at least one member");
    for (const auto& m : members_)
      if (m.input_shape() != members_[0].input_shape() || m.classes() != members_[0].classes())
        throw ShapeError("ensemble: members disagree on input or output shape");
  }

  std::size_t size() const { return members_.size(); }
  Combine combine() const { return combine_; }
  const Network<T>& member(std::size_t i) const { return members_.at(i); }
  Network<T>& member(std::size_t i) { return members_.at(i); }
  std::size_t classes() const { return members_[0].classes(); }

  Tensor<T> logits(const Tensor<T>& x) const {
    std::vector<Tensor<T>> z;
    for (const auto& m : members_) z.push_back(m.logits(x));
    return combined(z);
  }

  // Cross-entropy of the combined score. For MeanProb the member seeds use the
  // closed form (p_iy / (l * P_y)) (p_i - e_y), so a one-member ensemble
  // reproduces the member's own gradient bit for bit.
  InputGradient<T> loss_input_gradient(const Tensor<T>& x, std::span<const int> y) const {
    InputGradient<T> r;
    if (combine_ == Combine::MeanProb) {
      const std::size_t l = members_.size();
      Forward f = run(x);
      const std::size_t B = f.score.batch(), C = f.score.example_size();
      r.per_example.resize(B);
      for (std::size_t b = 0; b < B; ++b) r.per_example[b] = -f.score[b * C + static_cast<std::size_t>(y[b])];
      std::vector<Tensor<T>> seeds;
      for (std::size_t i = 0; i < l; ++i) {
        Tensor<T> g = SoftmaxCrossEntropy<T>::evaluate(f.z[i], y, SoftmaxCrossEntropy<T>::Reduction::Sum).grad_logits;
        for (std::size_t b = 0; b < B; ++b) {
          const auto yb = static_cast<std::size_t>(y[b]);
          const T mean = f.mean[b * C + yb];
          const T factor = mean > T{0} ? f.p[i][b * C + yb] / (static_cast<T>(l) * mean) : T{1} / static_cast<T>(l);
          for (std::size_t k = 0; k < C; ++k) g[b * C + k] *= factor;
        }
        seeds.push_back(std::move(g));
      }
      r.grad = pull_back(f, seeds);
      r.logits = std::move(f.score);
      return r;
    }
    Tensor<T> out;
    r.grad = logit_vjp(x, [&](const Tensor<T>& score) {
      auto loss = SoftmaxCrossEntropy<T>::evaluate(score, y, SoftmaxCrossEntropy<T>::Reduction::Sum);
      r.per_example = std::move(loss.per_example);
      return std::move(loss.grad_logits);
    }, &out);
    r.logits = std::move(out);
    return r;
  }

  // seed(score) returns dL/dscore; the result is dL/dx.
  template <typename Seed>
  Tensor<T> logit_vjp(const Tensor<T>& x, Seed&& seed, Tensor<T>* logits_out = nullptr) const {
    const std::size_t l = members_.size();
    Forward f = run(x);
    const Tensor<T> gs = seed(static_cast<const Tensor<T>&>(f.score));
    const std::size_t B = f.score.batch(), C = f.score.example_size();
    std::vector<Tensor<T>> seeds;
    for (std::size_t i = 0; i < l; ++i) {
      Tensor<T> gz(f.z[i].shape());
      if (combine_ == Combine::MeanLogit) {
        const T inv = T{1} / static_cast<T>(l);
        for (std::size_t j = 0; j < gz.size(); ++j) gz[j] = gs[j] * inv;
      } else {
        // score_k = log P_k with P = mean_i p_i: d score_k / d z_i = (p_ik / (l P_k)) (e_k - p_i).
        std::vector<T> a(C);
        for (std::size_t b = 0; b < B; ++b) {
          T dot = 0;
          for (std::size_t k = 0; k < C; ++k) {
            const T mean = std::max(f.mean[b * C + k], std::numeric_limits<T>::min());
            a[k] = gs[b * C + k] * f.p[i][b * C + k] / (static_cast<T>(l) * mean);
            dot += a[k];
          }
          for (std::size_t k = 0; k < C; ++k) gz[b * C + k] = a[k] - f.p[i][b * C + k] * dot;
        }
      }
      seeds.push_back(std::move(gz));
    }
    Tensor<T> grad = pull_back(f, seeds);
    if (logits_out) *logits_out = std::move(f.score);
    return grad;
  }

 private:
  struct Forward {
    std::vector<ForwardCache<T>> caches;
    std::vector<Tensor<T>> z, p;  // member logits and probabilities
    Tensor<T> mean;               // mean probability (MeanProb)
    Tensor<T> score;
  };

  Forward run(const Tensor<T>& x) const {
    if (combine_ == Combine::MajorityVote)
      throw UserError("ensemble: majority vote is not differentiable; attack a member or use a mean rule");
    const std::size_t l = members_.size();
    Forward f;
    f.caches.resize(l);
    for (std::size_t i = 0; i < l; ++i) f.z.push_back(members_[i].forward(x, Mode::Eval, &f.caches[i], false));
    if (combine_ == Combine::MeanProb) {
      for (const auto& zi : f.z) f.p.push_back(SoftmaxCrossEntropy<T>::probabilities(zi));
      f.mean = mean_probability(f.p);
      f.score = Tensor<T>(f.mean.shape());
      for (std::size_t j = 0; j < f.mean.size(); ++j) f.score[j] = safe_log(f.mean[j]);
    } else {
      f.score = combined(f.z);
    }
    return f;
  }

  Tensor<T> pull_back(const Forward& f, const std::vector<Tensor<T>>& seeds) const {
    Tensor<T> grad;
    for (std::size_t i = 0; i < members_.size(); ++i) {
      Tensor<T> gi = members_[i].backward(f.caches[i], seeds[i], std::span<T>());
      if (i == 0) {
        grad = std::move(gi);
      } else {
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += gi[j];
      }
    }
    return grad;
  }

  static T safe_log(T v) { return std::log(std::max(v, std::numeric_limits<T>::min())); }

  Tensor<T> mean_probability(const std::vector<Tensor<T>>& p) const {
    const T inv = T{1} / static_cast<T>(p.size());
    Tensor<T> m(p[0].shape());
    for (const auto& pi : p)
      for (std::size_t j = 0; j < m.size(); ++j) m[j] += pi[j];
    for (std::size_t j = 0; j < m.size(); ++j) m[j] *= inv;
    return m;
  }

  Tensor<T> combined(const std::vector<Tensor<T>>& z) const {
    const std::size_t B = z[0].batch(), C = z[0].example_size();
    const T inv = T{1} / static_cast<T>(members_.size());
    Tensor<T> out(z[0].shape());
    switch (combine_) {
      case Combine::MeanLogit:
        for (const auto& zi : z)
          for (std::size_t j = 0; j < out.size(); ++j) out[j] += zi[j];
        for (std::size_t j = 0; j < out.size(); ++j) out[j] *= inv;
        break;
      case Combine::MeanProb: {
        std::vector<Tensor<T>> p;
        for (const auto& zi : z) p.push_back(SoftmaxCrossEntropy<T>::probabilities(zi));
        out = mean_probability(p);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = safe_log(out[j]);
        break;
      }
      case Combine::MajorityVote:
        for (const auto& zi : z) {
          const auto pred = argmax_rows(zi);
          for (std::size_t b = 0; b < B; ++b) out[b * C + static_cast<std::size_t>(pred[b])] += T{1};
        }
        break;
    }
    return out;
  }

  std::vector<Network<T>> members_;
  Combine combine_;
};

// Attack target for the decoupling experiment.
struct AttackTarget {
  enum class Kind { Member, Whole };
  Kind kind = Kind::Whole;
  std::size_t member = 0;

  static AttackTarget whole() { return {Kind::Whole, 0}; }
  static AttackTarget of_member(std::size_t i) { return {Kind::Member, i}; }
};

template <Real T>
Tensor<T> attack_target(const Ensemble<T>& e, const Tensor<T>& x, std::span<const int> y, AttackTarget target,
                        const AttackConfig& cfg, const AttackOptions& opt = {}) {
  if (target.kind == AttackTarget::Kind::Member) return pgd(e.member(target.member), x, y, cfg, opt);
  if (e.combine() == Combine::MajorityVote)
    throw UserError("attack_target: cannot attack a majority-vote ensemble as a whole");
  return pgd(e, x, y, cfg, opt);
}

// ---------------------------------------------------------------------------
// Dilemma of decoupling

struct DilemmaConfig {
  std::size_t members = 3;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string arch = "mlp-small";
  TrainConfig train;        // per-member schedule; eval fields are ignored
  SwaatConfig swaat;        // settings for the compute-matched SWAAT run
  AttackSpec eval_attack = parse_attack("pgd:linf:eps=0.1:alpha=0.025:steps=20:rand=1");
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline nlohmann::json summary(const std::vector<double>& v) {
  return {{"mean", mean_of(v)}, {"std", std_of(v)}, {"values", v}};
}

// Trains all members on attacks generated against the mean-probability
// ensemble. Data order and attack seeds follow member 0's stream, so a
// one-member run replays train_pgd_at exactly.
template <Real T>
void train_joint(std::vector<Network<T>>& members, const Dataset<T>& data, const TrainConfig& cfg,
                 std::uint64_t member0_seed) {
  const std::size_t n = data.size(), l = members.size();
  std::vector<Sgd<T>> opts;
  for (const auto& m : members) opts.emplace_back(m.param_count(), cfg.momentum, cfg.weight_decay);
  const ResamplingPolicy none;
  Rng plan_rng(derive_seed(member0_seed, "plan", cfg.start_epoch));
  BatchPlan plan = none.epoch_plan(n, cfg.batch_size, plan_rng, true);
  for (std::size_t epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    for (std::size_t b = 0; b < plan.batches(); ++b) {
      const auto idx = plan.batch(b);
      const Tensor<T> x = gather(data.images, idx);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.labels[idx[i]];
      AttackOptions ao;
      ao.seed = derive_seed(member0_seed, "train-attack", epoch * 1000003 + b);
      ao.threads = cfg.threads;
      Tensor<T> x_adv;
      {
        const Ensemble<T> e(members, Combine::MeanProb);
        x_adv = run_attack(e, x, y, cfg.attack, ao);
      }
      for (std::size_t m = 0; m < l; ++m) {
        ForwardCache<T> cache;
        const Tensor<T> logits = members[m].forward(x_adv, Mode::Train, &cache, true);
        const Gradients<T> g = members[m].backward(cache, logits, y, false);
        if (!std::isfinite(static_cast<double>(g.loss))) throw NumericError("training diverged: non-finite loss");
        members[m].absorb_batch_statistics(cache, cfg.bn_momentum);
        opts[m].step(members[m].params(), g.params.values(), lr_at(cfg, epoch, b));
      }
    }
    plan = none.epoch_plan(n, cfg.batch_size, plan_rng, true);
  }
}

struct ModeResult {
  double ensemble_natural = 0, ensemble_robust = 0, vote_natural = 0;
  std::vector<double> member_natural, member_robust;
  std::vector<std::vector<double>> disagreement;
  double mean_disagreement = 0;
  bool counting_ok = true;
  std::size_t gradient_evaluations = 0;  // attack + training backward passes per example
};

template <Real T>
ModeResult score_members(const std::vector<Network<T>>& members, const Dataset<T>& test, const DilemmaConfig& cfg,
                         std::uint64_t seed) {
  ModeResult r;
  AttackOptions ao;
  ao.seed = derive_seed(seed, "dilemma-eval");
  ao.threads = cfg.train.threads;
  const std::size_t l = members.size(), n = test.size();
  std::vector<std::vector<int>> preds;
  std::vector<std::size_t> correct(l, 0);
  for (const auto& m : members) {
    preds.push_back(predict<T>(m, test.images, ao));
    r.member_natural.push_back(accuracy<T>(m, test.images, test.labels, ao));
    r.member_robust.push_back(accuracy_under_attack<T>(m, test.images, test.labels, cfg.eval_attack, ao));
  }
  const Ensemble<T> e(members, Combine::MeanProb);
  r.ensemble_natural = accuracy<T>(e, test.images, test.labels, ao);
  r.ensemble_robust = accuracy_under_attack<T>(e, test.images, test.labels, cfg.eval_attack, ao);
  const Ensemble<T> vote(members, Combine::MajorityVote);
  const auto vp = predict<T>(vote, test.images, ao);

  r.disagreement.assign(l, std::vector<double>(l, 0.0));
  double pair_sum = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < l; ++a)
    for (std::size_t b = 0; b < l; ++b) {
      std::size_t d = 0;
      for (std::size_t i = 0; i < n; ++i) d += preds[a][i] != preds[b][i];
      r.disagreement[a][b] = static_cast<double>(d) / static_cast<double>(n);
      if (a < b) {
        pair_sum += r.disagreement[a][b];
        ++pairs;
      }
    }
  r.mean_disagreement = pairs ? pair_sum / static_cast<double>(pairs) : 0;

  // A majority-vote win needs at least ceil(l/C) votes for the true class,
  // at least one correct member, and is guaranteed when all members agree.
  const std::size_t C = test.classes, need = (l + C - 1) / C;
  std::size_t vote_correct = 0, any = 0, all = 0, member_total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = 0;
    for (std::size_t a = 0; a < l; ++a) k += preds[a][i] == test.labels[i];
    member_total += k;
    any += k > 0;
    all += k == l;
    vote_correct += vp[i] == test.labels[i];
  }
  r.vote_natural = static_cast<double>(vote_correct) / static_cast<double>(n);
  r.counting_ok = vote_correct * need <= member_total && vote_correct <= any && vote_correct >= all;
  return r;
}

inline nlohmann::json to_json(const ModeResult& r) {
  return {{"ensemble_natural", r.ensemble_natural}, {"ensemble_robust", r.ensemble_robust},
          {"vote_natural", r.vote_natural},         {"member_natural", r.member_natural},
          {"member_robust", r.member_robust},       {"disagreement", r.disagreement},
          {"mean_disagreement", r.mean_disagreement}, {"counting_ok", r.counting_ok},
          {"gradient_evaluations", r.gradient_evaluations}};
}

}  // namespace detail

// Trains l members three ways per seed and reports ensemble and member
// accuracies: (a) independent, each on attacks against itself; (b) joint, all
// on attacks against the whole ensemble; (c) one SWAAT model given the same
// number of training epochs as the l members together.
template <Real T>
nlohmann::json dilemma_experiment(const Dataset<T>& train_set, const Dataset<T>& test, const DilemmaConfig& cfg,
                                  const std::function<void(const std::string&)>& progress = {}) {
  if (cfg.members == 0) throw UserError("dilemma: members must be >= 1");
  if (cfg.seeds.empty()) throw UserError("dilemma: at least one seed is required");
  const std::size_t l = cfg.members, n = train_set.size();
  const std::size_t E = cfg.train.epochs - cfg.train.start_epoch;
  const std::size_t attack_cost = cfg.train.attack.kind == AttackSpec::Kind::Pgd
                                      ? static_cast<std::size_t>(cfg.train.attack.pgd.steps)
                                      : (cfg.train.attack.kind == AttackSpec::Kind::None ? 0 : 1);

  nlohmann::json per_seed = nlohmann::json::array();
  std::map<std::string, std::vector<double>> series;
  for (const auto seed : cfg.seeds) {
    auto make = [&](std::uint64_t s) {
      Network<T> net = make_network<T>(cfg.arch, train_set.image_shape(), train_set.classes);
      Rng rng(derive_seed(s, "init"));
      net.init(rng);
      return net;
    };
    TrainConfig tc = cfg.train;
    tc.swaat.enabled = false;
    tc.run_dir.clear();
    tc.eval_start = tc.epochs;  // no per-epoch evaluation

    std::vector<Network<T>> indep;
    for (std::size_t m = 0; m < l; ++m) {
      const std::uint64_t ms = derive_seed(seed, "member", m);
      Network<T> net = make(ms);
      TrainConfig mc = tc;
      mc.seed = ms;
      train(net, train_set, test, mc);
      indep.push_back(std::move(net));
    }
    if (progress) progress("seed " + std::to_string(seed) + ": independent members trained");
    auto a = detail::score_members(indep, test, cfg, seed);
    a.gradient_evaluations = l * E * n * (attack_cost + 1);

    std::vector<Network<T>> joint;
    for (std::size_t m = 0; m < l; ++m) joint.push_back(make(derive_seed(seed, "member", m)));
    detail::train_joint(joint, train_set, tc, derive_seed(seed, "member", 0));
    if (progress) progress("seed " + std::to_string(seed) + ": joint members trained");
    auto b = detail::score_members(joint, test, cfg, seed);
    b.gradient_evaluations = E * n * (l * attack_cost + l);

    // (c): a schedule l times as long; PGD-AT for the first half, SWAAT after.
    const std::uint64_t cs = derive_seed(seed, "swaat-single");
    Network<T> single = make(cs);
    TrainConfig sc = tc;
    sc.seed = cs;
    sc.epochs = tc.epochs * l;
    sc.decay_epochs.clear();
    for (auto d : tc.decay_points()) sc.decay_epochs.push_back(d * l);
    const std::size_t half = sc.epochs / 2;
    if (half > 0) {
      // The warm-up run ends at `half`; decay points stay those of the full schedule.
      TrainConfig warm = sc;
      warm.epochs = half;
      warm.eval_start = half;
      train(single, train_set, test, warm);
    }
    sc.start_epoch = half;
    sc.swaat = cfg.swaat;
    sc.swaat.enabled = true;
    train(single, train_set, test, sc);
    if (progress) progress("seed " + std::to_string(seed) + ": SWAAT single model trained");
    auto c = detail::score_members(std::vector<Network<T>>{single}, test, cfg, seed);
    c.gradient_evaluations = l * E * n * (attack_cost + 1);

    per_seed.push_back({{"seed", seed},
                        {"independent", detail::to_json(a)},
                        {"joint", detail::to_json(b)},
                        {"swaat", detail::to_json(c)}});
    for (const auto& [name, r] : {std::pair{"independent", &a}, {"joint", &b}, {"swaat", &c}}) {
      series[std::string(name) + ".ensemble_natural"].push_back(r->ensemble_natural);
      series[std::string(name) + ".ensemble_robust"].push_back(r->ensemble_robust);
      series[std::string(name) + ".mean_disagreement"].push_back(r->mean_disagreement);
      series[std::string(name) + ".mean_member_robust"].push_back(detail::mean_of(r->member_robust));
    }
    series["counting_ok"].push_back(a.counting_ok && b.counting_ok && c.counting_ok ? 1.0 : 0.0);
  }

  nlohmann::json summary;
  for (const auto& [k, v] : series) summary[k] = detail::summary(v);
  const bool counting = std::all_of(series["counting_ok"].begin(), series["counting_ok"].end(),
                                    [](double v) { return v == 1.0; });
  return {{"schema_version", 1},
          {"members", l},
          {"arch", cfg.arch},
          {"epochs", E},
          {"train_attack", cfg.train.attack.text},
          {"eval_attack", cfg.eval_attack.text},
          {"seeds", cfg.seeds},
          {"per_seed", per_seed},
          {"summary", summary},
          {"joint_disagreement_le_independent",
           detail::mean_of(series["joint.mean_disagreement"]) <= detail::mean_of(series["independent.mean_disagreement"])},
          {"counting_ok", counting}};
}

}  // namespace swaat
