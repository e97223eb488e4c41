#pragma once

#include <deque>

#include "swaat/attack.hpp"
#include "swaat/data.hpp"

namespace swaat {

enum class AggregatorMode { Recurrence, ExactSMA };

inline std::string to_string(AggregatorMode m) { return m == AggregatorMode::Recurrence ? "recurrence" : "exact"; }

inline AggregatorMode parse_aggregator_mode(std::string_view s) {
  if (s == "recurrence") return AggregatorMode::Recurrence;
  if (s == "exact" || s == "exact-sma" || s == "sma") return AggregatorMode::ExactSMA;
  throw UserError("unknown aggregator mode '" + std::string(s) + "'");
}

// Running average of parameter snapshots over a window of M*k iterations.
//
// Recurrence applies theta <- (w-1)/w * theta + 1/w * theta_i with
// w = min(i, window), literally; once i exceeds the window this becomes an
// exponential average. ExactSMA keeps the last `window` snapshots and their
// true mean. Both use the same recurrence while the window is still filling,
// so they agree bit for bit in that phase.
template <Real T>
class WeightAggregator {
 public:
  WeightAggregator() = default;
  WeightAggregator(AggregatorMode mode, std::size_t window, std::size_t params)
      : mode_(mode), window_(window), theta_(params, T{0}) {
    if (window == 0) throw UserError("aggregator: window must be >= 1");
  }

  AggregatorMode mode() const { return mode_; }
  std::size_t window() const { return window_; }
  std::size_t updates() const { return count_; }
  std::size_t weight() const { return std::min(count_, window_); }
  bool empty() const { return count_ == 0; }
  const FlatParams<T>& theta() const { return theta_; }
  std::size_t ring_size() const { return ring_.size(); }

  void aggregate(const FlatParams<T>& snapshot) {
    if (snapshot.size() != theta_.size())
      throw ShapeError("aggregator: snapshot has " + std::to_string(snapshot.size()) + " values, expected " +
                       std::to_string(theta_.size()));
    ++count_;
    if (mode_ == AggregatorMode::ExactSMA && ring_.size() == window_) {
      slide(snapshot);
    } else {
      const T w = static_cast<T>(std::min(count_, window_));
      const T keep = (w - T{1}) / w, take = T{1} / w;
      auto& th = theta_.storage();
      const auto& s = snapshot.storage();
      for (std::size_t i = 0; i < th.size(); ++i) th[i] = keep * th[i] + take * s[i];
      if (mode_ == AggregatorMode::ExactSMA) ring_.push_back(snapshot.storage());
    }
  }

  // Replaces the state (used when resuming from a checkpoint). The ring of an
  // ExactSMA aggregator cannot be recovered; it is refilled with copies of
  // theta so the restored mean is unchanged.
  void restore(std::size_t count, FlatParams<T> theta) {
    if (theta.size() != theta_.size()) throw ShapeError("aggregator: restored state has the wrong length");
    count_ = count;
    theta_ = std::move(theta);
    ring_.clear();
    if (mode_ == AggregatorMode::ExactSMA)
      for (std::size_t i = 0; i < std::min(count_, window_); ++i) ring_.push_back(theta_.storage());
    since_resync_ = 0;
  }

  // Mean of the ring recomputed from scratch (ExactSMA only).
  FlatParams<T> ring_mean() const {
    if (ring_.empty()) throw Error("aggregator: empty ring");
    std::vector<double> acc(theta_.size(), 0.0);
    for (const auto& s : ring_)
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(s[i]);
    FlatParams<T> m(theta_.size());
    for (std::size_t i = 0; i < acc.size(); ++i) m[i] = static_cast<T>(acc[i] / static_cast<double>(ring_.size()));
    return m;
  }

 private:
  // Full window: theta += (new - oldest) / window, with an exact re-sum every
  // `window` slides to stop rounding drift from accumulating.
  void slide(const FlatParams<T>& snapshot) {
    AlignedVector<T> oldest = std::move(ring_.front());
    ring_.pop_front();
    ring_.push_back(snapshot.storage());
    if (++since_resync_ >= window_) {
      theta_ = ring_mean();
      since_resync_ = 0;
      return;
    }
    const T inv = T{1} / static_cast<T>(window_);
    auto& th = theta_.storage();
    const auto& s = snapshot.storage();
    for (std::size_t i = 0; i < th.size(); ++i) th[i] += (s[i] - oldest[i]) * inv;
  }

  AggregatorMode mode_ = AggregatorMode::Recurrence;
  std::size_t window_ = 1;
  std::size_t count_ = 0;
  FlatParams<T> theta_;
  std::deque<AlignedVector<T>> ring_;
  std::size_t since_resync_ = 0;
};

// net <- theta_swa. The aggregator is left untouched; BN statistics are
// marked stale until the next recalibration.
template <Real T>
void swap_in(const WeightAggregator<T>& agg, Network<T>& net) {
  if (agg.empty()) throw Error("swap_in: aggregator has no snapshots");
  net.unflatten(agg.theta());
  if (net.has_batchnorm()) net.set_bn_stale(true);
}

enum class BnMode { Natural, Adversarial };

inline std::string to_string(BnMode m) { return m == BnMode::Natural ? "natural" : "adversarial"; }

inline BnMode parse_bn_mode(std::string_view s) {
  if (s == "natural") return BnMode::Natural;
  if (s == "adversarial") return BnMode::Adversarial;
  throw UserError("unknown BN mode '" + std::string(s) + "'");
}

// Per-channel count/mean/M2, merged with Chan et al.'s pairwise update.
struct ChannelMoments {
  std::vector<double> n, mean, m2;

  explicit ChannelMoments(std::size_t c = 0) : n(c, 0.0), mean(c, 0.0), m2(c, 0.0) {}

  void merge(const ChannelMoments& o) {
    for (std::size_t c = 0; c < n.size(); ++c) {
      if (o.n[c] == 0) continue;
      const double tot = n[c] + o.n[c], d = o.mean[c] - mean[c];
      mean[c] += d * o.n[c] / tot;
      m2[c] += o.m2[c] + d * d * n[c] * o.n[c] / tot;
      n[c] = tot;
    }
  }

  double variance(std::size_t c) const { return n[c] > 0 ? m2[c] / n[c] : 0.0; }
};

// Two-pass moments of an (N, C, ...) activation block.
template <Real T>
ChannelMoments channel_moments(const Tensor<T>& h, std::size_t channels) {
  ChannelMoments m(channels);
  const std::size_t batch = h.batch(), spatial = h.example_size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = h.data() + (b * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) s += static_cast<double>(p[i]);
    }
    const double cnt = static_cast<double>(batch * spatial), mu = s / cnt;
    double ss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = h.data() + (b * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        ss += d * d;
      }
    }
    m.n[c] = cnt;
    m.mean[c] = mu;
    m.m2[c] = ss;
  }
  return m;
}

struct AdjustBnOptions {
  BnMode mode = BnMode::Natural;
  AttackConfig attack;      // used in Adversarial mode
  std::uint64_t seed = 0;   // attack randomness
  unsigned threads = 1;
  std::size_t chunk = 256;  // examples per streamed block
};

namespace detail {

// Sets every BN layer's running stats to the exact population moments of its
// input over `inputs`, layer by layer so each layer sees already-recalibrated
// upstream statistics.
template <Real T>
void recalibrate(Network<T>& net, const Tensor<T>& inputs, const AdjustBnOptions& opt) {
  const std::size_t n = inputs.batch();
  for (std::size_t li = 0; li < net.layer_count(); ++li) {
    if (net.layer(li).kind() != LayerKind::BatchNorm) continue;
    const auto& bn = static_cast<const BatchNorm<T>&>(net.layer(li));
    const std::size_t C = bn.channels();
    const std::size_t chunks = (n + opt.chunk - 1) / opt.chunk;
    std::vector<ChannelMoments> parts(chunks);
    parallel_chunks(n, opt.chunk, opt.threads, [&](std::size_t b, std::size_t e) {
      parts[b / opt.chunk] = channel_moments(net.forward_prefix(inputs.slice(b, e - b), li), C);
    });
    ChannelMoments total(C);
    for (const auto& p : parts) total.merge(p);
    auto s = net.state_span(li);
    for (std::size_t c = 0; c < C; ++c) {
      s[c] = static_cast<T>(total.mean[c]);
      s[C + c] = static_cast<T>(std::max(0.0, total.variance(c)));
    }
  }
}

}  // namespace detail

// Recomputes BN running statistics over the full dataset, momentum-free.
// Adversarial mode first calibrates on natural inputs so that the attack runs
// against a sensible Eval-mode network, then recalibrates on the PGD inputs.
template <Real T>
void adjust_bn(Network<T>& net, const Dataset<T>& data, const AdjustBnOptions& opt = {}) {
  if (data.size() == 0) throw UserError("adjust_bn: empty dataset");
  if (!net.has_batchnorm()) {
    net.set_bn_stale(false);
    return;
  }
  detail::recalibrate(net, data.images, opt);
  if (opt.mode == BnMode::Adversarial) {
    AttackOptions ao;
    ao.seed = opt.seed;
    ao.threads = opt.threads;
    const Tensor<T> adv = pgd(net, data.images, data.labels, opt.attack, ao);
    detail::recalibrate(net, adv, opt);
  }
  net.set_bn_stale(false);
}

}  // namespace swaat
