#pragma once

#include <fstream>

#include "swaat/attack.hpp"
#include "swaat/data.hpp"

namespace swaat {

enum class PolicyKind { None, Boot, Hem, Ohem };

// Per-epoch data resampling. Marked (hard) examples get hard_multiplier
// times the sampling weight of the others; resampled epochs keep size n.
class ResamplingPolicy {
 public:
  ResamplingPolicy() = default;
  ResamplingPolicy(PolicyKind kind, std::size_t period = 1, double hard_multiplier = 3.0)
      : kind_(kind), period_(period), multiplier_(hard_multiplier) {
    if (kind == PolicyKind::Hem && period == 0) throw UserError("policy: HEM period must be >= 1");
    if (!(hard_multiplier > 0)) throw UserError("policy: hard multiplier must be positive");
  }

  // "none", "boot", "hem:N", "ohem".
  static ResamplingPolicy parse(std::string_view s, double hard_multiplier = 3.0) {
    if (s == "none") return {PolicyKind::None, 1, hard_multiplier};
    if (s == "boot") return {PolicyKind::Boot, 1, hard_multiplier};
    if (s == "ohem") return {PolicyKind::Ohem, 1, hard_multiplier};
    if (s == "hem") return {PolicyKind::Hem, 1, hard_multiplier};
    if (s.starts_with("hem:")) {
      const int n = detail::parse_int(s.substr(4), "policy '" + std::string(s) + "'");
      if (n < 1) throw UserError("policy: HEM period must be >= 1");
      return {PolicyKind::Hem, static_cast<std::size_t>(n), hard_multiplier};
    }
    throw UserError("unknown resampling policy '" + std::string(s) + "'");
  }

  std::string name() const {
    switch (kind_) {
      case PolicyKind::None: return "none";
      case PolicyKind::Boot: return "boot";
      case PolicyKind::Hem: return "hem:" + std::to_string(period_);
      case PolicyKind::Ohem: return "ohem";
    }
    return "?";
  }

  PolicyKind kind() const { return kind_; }
  std::size_t period() const { return period_; }
  double hard_multiplier() const { return multiplier_; }
  std::size_t hem_calls() const { return hem_calls_; }

  // Dataset positions currently marked hard, ascending.
  std::vector<std::size_t> hard_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < hard_.size(); ++i)
      if (hard_[i]) out.push_back(i);
    return out;
  }
  std::size_t hard_count() const { return static_cast<std::size_t>(std::count(hard_.begin(), hard_.end(), 1)); }
  bool is_hard(std::size_t pos) const { return pos < hard_.size() && hard_[pos]; }

  std::vector<double> weights(std::size_t n) const {
    std::vector<double> w(n, 1.0);
    for (std::size_t i = 0; i < std::min(n, hard_.size()); ++i)
      if (hard_[i]) w[i] = multiplier_;
    return w;
  }

  void set_hard(std::size_t n, std::span<const std::size_t> positions) {
    hard_.assign(n, 0);
    for (auto p : positions) hard_.at(p) = 1;
  }

  // HEM mines at the end of epoch e (0-based) when e is a multiple of N.
  bool mines_at(std::size_t epoch) const { return kind_ == PolicyKind::Hem && epoch % period_ == 0; }

  // Marks the examples whose PGD-attacked version the current network
  // misclassifies.
  template <Real T>
  void mark_hem(const Network<T>& net, const Dataset<T>& data, const AttackConfig& attack,
                const AttackOptions& opt) {
    AttackSpec spec;
    spec.kind = AttackSpec::Kind::Pgd;
    spec.pgd = attack;
    const auto ok = correct_under_attack(net, data.images, data.labels, spec, opt);
    hard_.assign(data.size(), 0);
    for (std::size_t i = 0; i < ok.size(); ++i) hard_[i] = ok[i] ? 0 : 1;
    ++hem_calls_;
  }

  // OHEM: marks collected during an epoch replace the hard set at its end.
  void begin_epoch(std::size_t n) {
    pending_.assign(n, 0);
  }
  void mark_ohem(std::span<const std::size_t> misclassified_positions) {
    for (auto p : misclassified_positions) pending_.at(p) = 1;
  }
  void end_epoch() {
    if (kind_ == PolicyKind::Ohem) hard_ = pending_;
  }

  // The first epoch of a run uses the full dataset (plain shuffle); later
  // epochs resample according to the policy.
  BatchPlan epoch_plan(std::size_t n, std::size_t batch_size, Rng& rng, bool first_epoch = false) const {
    BatchPlan plan;
    plan.batch_size = batch_size;
    if (kind_ == PolicyKind::None || first_epoch) {
      plan.ordering = shuffled_indices(n, rng);
    } else {
      const auto w = weights(n);
      plan.ordering = sample_with_replacement(n, w, rng);
    }
    return plan;
  }

  void dump_hard_set(const std::string& path, std::span<const std::uint32_t> ids) const {
    std::ofstream out(path);
    if (!out) throw UserError("cannot write '" + path + "'");
    for (std::size_t i = 0; i < hard_.size(); ++i)
      if (hard_[i]) out << ids[i] << '\n';
  }

 private:
  PolicyKind kind_ = PolicyKind::None;
  std::size_t period_ = 1;
  double multiplier_ = 3.0;
  std::vector<std::uint8_t> hard_, pending_;
  std::size_t hem_calls_ = 0;
};

}  // namespace swaat
