#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include <json.hpp>

#include "swaat/checkpoint.hpp"
#include "swaat/resample.hpp"

namespace swaat {

struct SwaatConfig {
  bool enabled = false;
  std::size_t window = 4;      // M, in epochs
  std::size_t window_iterations = 0;  // overrides M*k when nonzero
  std::size_t swap_every = 1;  // epochs between swaps; 0 swaps only after the last epoch
  double lr_multiplier = 0;    // 0 means "use M"
  std::string policy = "none";
  double hard_multiplier = 3.0;
  BnMode bn_mode = BnMode::Natural;
  AggregatorMode aggregator = AggregatorMode::Recurrence;

  double multiplier() const { return lr_multiplier > 0 ? lr_multiplier : static_cast<double>(window); }
};

struct TrainConfig {
  std::size_t epochs = 60;       // length of the learning-rate schedule
  std::size_t start_epoch = 0;   // first epoch run (a warm start resumes mid-schedule)
  std::size_t batch_size = 128;
  double lr = 0.1;
  std::vector<std::size_t> decay_epochs;  // empty: epochs/2 and 3*epochs/4
  double decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double bn_momentum = 0.1;
  AttackSpec attack = parse_attack("pgd:linf:eps=8/255:alpha=2/255:steps=10:rand=1");
  AttackSpec eval_attack = parse_attack("pgd:linf:eps=8/255:alpha=2/255:steps=20:rand=1");
  std::size_t eval_every = 1;
  std::size_t eval_start = 0;    // no evaluation before this epoch
  std::size_t eval_limit = 0;    // evaluate on the first N test examples (0 = all)
  SwaatConfig swaat;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string run_dir;           // empty: nothing is written
  bool save_every_epoch = false;
  std::vector<std::size_t> checkpoint_epochs;  // epochs-completed counts to snapshot
  bool coupling_check = true;

  std::vector<std::size_t> decay_points() const {
    if (!decay_epochs.empty()) return decay_epochs;
    return {epochs / 2, 3 * epochs / 4};
  }
};

// Baseline piecewise-constant value, times M when SWAAT is enabled.
inline double lr_at(const TrainConfig& cfg, std::size_t epoch, std::size_t /*iteration*/ = 0) {
  double lr = cfg.lr;
  for (auto d : cfg.decay_points())
    if (epoch >= d) lr *= cfg.decay_factor;
  return cfg.swaat.enabled ? lr * cfg.swaat.multiplier() : lr;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_adv_acc = 0;  // on the adversarial batches trained on
  bool evaluated = false;
  double natural_acc = 0;
  double adv_acc = 0;
  double trailing5 = 0;      // mean adv_acc over the last <= 5 evaluations
  bool swapped = false;
  bool hem_mined = false;
  std::size_t hard_count = 0;
  double unique_fraction = 1;
  std::uint64_t param_hash = 0;
  double seconds = 0;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::ptrdiff_t best_epoch = -1;
  double best_adv_acc = -1;
  double best_natural_acc = 0;
  std::size_t iterations = 0;
  std::size_t swap_events = 0;
  std::size_t hem_calls = 0;
  std::uint64_t final_checksum = 0;
  std::uint64_t best_checksum = 0;
  std::vector<double> best_params;   // snapshot of the best network
  std::vector<double> best_bn_state;
  std::string best_descriptor;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  nlohmann::json j = {{"epoch", e.epoch},         {"lr", e.lr},
                      {"train_loss", e.train_loss}, {"train_adv_acc", e.train_adv_acc},
                      {"evaluated", e.evaluated}, {"swapped", e.swapped},
                      {"hem_mined", e.hem_mined}, {"hard_count", e.hard_count},
                      {"unique_fraction", e.unique_fraction},
                      {"param_hash", e.param_hash}, {"seconds", e.seconds}};
  if (e.evaluated) {
    j["natural_acc"] = e.natural_acc;
    j["adv_acc"] = e.adv_acc;
    j["trailing5"] = e.trailing5;
  }
  return j;
}

// Recomputes the best pointer and trailing means from the per-epoch log and
// compares them with the stored values.
inline bool record_consistent(const RunRecord& r) {
  std::ptrdiff_t best = -1;
  double best_acc = -1;
  std::vector<double> seen;
  for (const auto& e : r.epochs) {
    if (!e.evaluated) continue;
    seen.push_back(e.adv_acc);
    const std::size_t k = std::min<std::size_t>(5, seen.size());
    double s = 0;
    for (std::size_t i = seen.size() - k; i < seen.size(); ++i) s += seen[i];
    if (s / static_cast<double>(k) != e.trailing5) return false;
    if (e.adv_acc > best_acc) {
      best_acc = e.adv_acc;
      best = static_cast<std::ptrdiff_t>(e.epoch);
    }
  }
  return best == r.best_epoch && (best < 0 || best_acc == r.best_adv_acc);
}

// SGD with momentum and L2 weight decay: v <- mu v + g + wd p; p <- p - lr v.
template <Real T>
class Sgd {
 public:
  Sgd(std::size_t n, double momentum, double weight_decay)
      : momentum_(momentum), decay_(weight_decay), v_(n, T{0}) {}

  void step(std::span<T> p, std::span<const T> g, double lr) {
    const T mu = static_cast<T>(momentum_), wd = static_cast<T>(decay_), eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v_[i] = mu * v_[i] + g[i] + wd * p[i];
      p[i] -= eta * v_[i];
    }
  }

 private:
  double momentum_, decay_;
  std::vector<T> v_;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

namespace detail {

inline std::string epoch_tag(std::size_t e) {
  std::ostringstream os;
  os << std::setw(3) << std::setfill('0') << e;
  return os.str();
}

struct StepResult {
  double loss = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> wrong;  // positions in the training set
};

// One coupled step: attack the current snapshot, then train on the result.
template <Real T>
StepResult coupled_step(Network<T>& net, Sgd<T>& opt, const Dataset<T>& data,
                           std::span<const std::size_t> idx, const TrainConfig& cfg, double lr,
                           std::uint64_t attack_seed) {
  const Tensor<T> x = gather(data.images, idx);
  std::vector<int> y(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.labels[idx[i]];

  const std::uint64_t before = cfg.coupling_check ? net.param_hash() : 0;
  AttackOptions ao;
  ao.seed = attack_seed;
  ao.threads = cfg.threads;
  const Tensor<T> x_adv = run_attack(net, x, y, cfg.attack, ao);

  ForwardCache<T> cache;
  const Tensor<T> logits = net.forward(x_adv, Mode::Train, &cache, true);
  const Gradients<T> g = net.backward(cache, logits, y, false);
  if (!std::isfinite(static_cast<double>(g.loss)))
    throw NumericError("training diverged: non-finite loss");
  if (cfg.coupling_check && net.param_hash() != before)
    throw Error("coupling violated: parameters changed between attack and update");

  StepResult r;
  r.loss = static_cast<double>(g.loss);
  const auto pred = argmax_rows(logits);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == y[i]) ++r.correct;
    else r.wrong.push_back(idx[i]);
  }
  net.absorb_batch_statistics(cache, cfg.bn_momentum);
  opt.step(net.params(), g.params.values(), lr);
  return r;
}

inline double unique_fraction(const std::vector<std::size_t>& ordering, std::size_t n) {
  std::vector<std::uint8_t> seen(n, 0);
  std::size_t u = 0;
  for (auto i : ordering)
    if (!seen[i]) {
      seen[i] = 1;
      ++u;
    }
  return static_cast<double>(u) / static_cast<double>(n);
}

}  // namespace detail

// PGD adversarial training (cfg.swaat.enabled false) or SWAAT (true), over
// epochs [cfg.start_epoch, cfg.epochs). For SWAAT every iteration is
// aggregated; at each epoch end the order is: swap in theta_swa, recalibrate
// BN, evaluate, refresh the hard set, draw the next epoch's plan.
template <Real T>
RunRecord train(Network<T>& net, const Dataset<T>& data, const Dataset<T>& test, const TrainConfig& cfg,
                const TrainHooks& hooks = {}) {
  if (data.size() == 0) throw UserError("train: empty training set");
  if (cfg.batch_size == 0) throw UserError("train: batch_size must be positive");
  if (cfg.start_epoch >= cfg.epochs) throw UserError("train: start_epoch must be < epochs");
  if (cfg.eval_every == 0) throw UserError("train: eval_every must be positive");
  if (data.image_shape() != net.input_shape()) throw UserError("train: dataset shape does not match network input");

  const std::size_t n = data.size();
  const std::size_t k = (n + cfg.batch_size - 1) / cfg.batch_size;
  const bool swaat = cfg.swaat.enabled;
  ResamplingPolicy policy = swaat ? ResamplingPolicy::parse(cfg.swaat.policy, cfg.swaat.hard_multiplier)
                                  : ResamplingPolicy();
  std::optional<WeightAggregator<T>> agg;
  if (swaat) {
    if (cfg.swaat.window == 0 && cfg.swaat.window_iterations == 0) throw UserError("swaat: window must be >= 1");
    const std::size_t w = cfg.swaat.window_iterations ? cfg.swaat.window_iterations : cfg.swaat.window * k;
    agg.emplace(cfg.swaat.aggregator, w, net.param_count());
  }

  Sgd<T> opt(net.param_count(), cfg.momentum, cfg.weight_decay);
  Rng plan_rng(derive_seed(cfg.seed, "plan", cfg.start_epoch));
  BatchPlan plan = policy.epoch_plan(n, cfg.batch_size, plan_rng, true);
  const Dataset<T> eval_set = test.head(cfg.eval_limit);

  namespace fs = std::filesystem;
  const bool write = !cfg.run_dir.empty();
  std::ofstream log, csv;
  if (write) {
    fs::create_directories(fs::path(cfg.run_dir) / "checkpoints");
    if (swaat && policy.kind() != PolicyKind::None && policy.kind() != PolicyKind::Boot)
      fs::create_directories(fs::path(cfg.run_dir) / "hard");
    log.open(fs::path(cfg.run_dir) / "log.jsonl");
    csv.open(fs::path(cfg.run_dir) / "curves.csv");
    csv << "epoch,lr,train_loss,train_adv_acc,natural_acc,adv_acc,trailing5\n";
  }
  auto ckpt = [&](const std::string& name) {
    return (fs::path(cfg.run_dir) / "checkpoints" / name).string();
  };

  RunRecord rec;
  std::vector<double> evals;
  std::size_t i = 0;  // iterations since the start of this run
  for (std::size_t epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord er;
    er.epoch = epoch;
    er.lr = lr_at(cfg, epoch);
    er.unique_fraction = detail::unique_fraction(plan.ordering, n);
    policy.begin_epoch(n);

    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < plan.batches(); ++b) {
      const auto idx = plan.batch(b);
      const auto seed = derive_seed(cfg.seed, "train-attack", epoch * 1000003 + b);
      auto step = detail::coupled_step(net, opt, data, idx, cfg, lr_at(cfg, epoch, b), seed);
      loss_sum += step.loss * static_cast<double>(idx.size());
      correct += step.correct;
      if (policy.kind() == PolicyKind::Ohem) policy.mark_ohem(step.wrong);
      ++i;
      if (agg) agg->aggregate(net.flatten());
    }
    rec.iterations += plan.batches();
    er.train_loss = loss_sum / static_cast<double>(n);
    er.train_adv_acc = static_cast<double>(correct) / static_cast<double>(n);

    const std::size_t done = epoch + 1 - cfg.start_epoch;
    const bool swap_due = cfg.swaat.swap_every ? done % cfg.swaat.swap_every == 0 : epoch + 1 == cfg.epochs;
    if (agg && i > 0 && i % k == 0 && swap_due) {
      swap_in(*agg, net);
      AdjustBnOptions bo;
      bo.mode = cfg.swaat.bn_mode;
      bo.attack = cfg.attack.pgd;
      bo.seed = derive_seed(cfg.seed, "adjust-bn", epoch);
      bo.threads = cfg.threads;
      adjust_bn(net, data, bo);
      er.swapped = true;
      ++rec.swap_events;
    }

    if (epoch >= cfg.eval_start && ((epoch - cfg.eval_start) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
      AttackOptions ao;
      ao.seed = derive_seed(cfg.seed, "eval", epoch);
      ao.threads = cfg.threads;
      er.evaluated = true;
      er.natural_acc = accuracy<T>(net, eval_set.images, eval_set.labels, ao);
      er.adv_acc = accuracy_under_attack<T>(net, eval_set.images, eval_set.labels, cfg.eval_attack, ao);
      evals.push_back(er.adv_acc);
      const std::size_t m = std::min<std::size_t>(5, evals.size());
      double s = 0;
      for (std::size_t j = evals.size() - m; j < evals.size(); ++j) s += evals[j];
      er.trailing5 = s / static_cast<double>(m);
    }

    if (swaat) {
      const std::size_t rel = epoch - cfg.start_epoch;
      if (policy.mines_at(rel)) {
        AttackOptions ao;
        ao.seed = derive_seed(cfg.seed, "hem", epoch);
        ao.threads = cfg.threads;
        policy.mark_hem(net, data, cfg.attack.pgd, ao);
        er.hem_mined = true;
      }
      policy.end_epoch();
      er.hard_count = policy.hard_count();
      if (write && (policy.kind() == PolicyKind::Hem || policy.kind() == PolicyKind::Ohem))
        policy.dump_hard_set((fs::path(cfg.run_dir) / "hard" / ("epoch_" + detail::epoch_tag(epoch) + ".txt")).string(),
                             data.ids);
      plan = policy.epoch_plan(n, cfg.batch_size, plan_rng);
    } else {
      plan = policy.epoch_plan(n, cfg.batch_size, plan_rng, true);
    }
    er.param_hash = net.param_hash();

    const bool improved = er.evaluated && er.adv_acc > rec.best_adv_acc;
    if (improved) {
      rec.best_epoch = static_cast<std::ptrdiff_t>(epoch);
      rec.best_adv_acc = er.adv_acc;
      rec.best_natural_acc = er.natural_acc;
      rec.best_params.assign(net.params().begin(), net.params().end());
      rec.best_bn_state.assign(net.bn_state().begin(), net.bn_state().end());
      rec.best_descriptor = net.descriptor();
    }
    const WeightAggregator<T>* ap = agg ? &*agg : nullptr;
    if (write) {
      save_checkpoint(ckpt("last.swat"), net, ap);
      if (improved) rec.best_checksum = save_checkpoint(ckpt("best.swat"), net);
      const std::size_t completed = epoch + 1;
      if (cfg.save_every_epoch || std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(),
                                            completed) != cfg.checkpoint_epochs.end())
        save_checkpoint(ckpt("epoch_" + detail::epoch_tag(completed) + ".swat"), net, ap);
    } else if (improved) {
      rec.best_checksum = checkpoint_checksum(net);
    }
    er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (write) {
      log << to_json(er).dump() << '\n' << std::flush;
      csv << er.epoch << ',' << er.lr << ',' << er.train_loss << ',' << er.train_adv_acc << ',';
      if (er.evaluated) csv << er.natural_acc << ',' << er.adv_acc << ',' << er.trailing5;
      else csv << ",,";
      csv << '\n' << std::flush;
    }
    rec.epochs.push_back(er);
    if (hooks.on_epoch) hooks.on_epoch(er);
  }
  rec.hem_calls = policy.hem_calls();
  rec.final_checksum = checkpoint_checksum(net, agg ? &*agg : nullptr);
  return rec;
}

template <Real T>
RunRecord train_pgd_at(Network<T>& net, const Dataset<T>& data, const Dataset<T>& test, TrainConfig cfg,
                       const TrainHooks& hooks = {}) {
  cfg.swaat.enabled = false;
  return train(net, data, test, cfg, hooks);
}

template <Real T>
RunRecord train_swaat(Network<T>& net, const Dataset<T>& data, const Dataset<T>& test, TrainConfig cfg,
                      const TrainHooks& hooks = {}) {
  cfg.swaat.enabled = true;
  return train(net, data, test, cfg, hooks);
}

template <Real T>
Network<T> best_network(const RunRecord& r) {
  if (r.best_epoch < 0) throw Error("run has no evaluated epoch");
  Network<T> net = Network<T>::from_descriptor(r.best_descriptor);
  std::transform(r.best_params.begin(), r.best_params.end(), net.params().begin(),
                 [](double v) { return static_cast<T>(v); });
  std::transform(r.best_bn_state.begin(), r.best_bn_state.end(), net.bn_state().begin(),
                 [](double v) { return static_cast<T>(v); });
  return net;
}

}  // namespace swaat
