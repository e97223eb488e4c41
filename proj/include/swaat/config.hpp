#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "swaat/train.hpp"

namespace swaat {

// Sectioned key-value configuration:
//
//   [train]
//   epochs = 60          ; comments start with ; or #
//
// Every key has a default; unknown sections or keys are errors. Values are
// kept as text and converted on use.
class Config {
 public:
  Config() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"data.source", "idx"},
        {"data.train_images", ""},
        {"data.train_labels", ""},
        {"data.test_images", ""},
        {"data.test_labels", ""},
        {"data.classes", "0"},
        {"data.train_limit", "0"},
        {"data.test_limit", "0"},
        {"data.synth_seed", "0"},
        {"data.synth_train", "5000"},
        {"data.synth_test", "1000"},
        {"data.synth_classes", "10"},
        {"data.synth_difficulty", "1.5"},
        {"model.arch", "cnn-small"},
        {"model.precision", "double"},
        {"model.init_checkpoint", ""},
        {"train.epochs", "60"},
        {"train.start_epoch", "0"},
        {"train.batch_size", "128"},
        {"train.lr", "0.1"},
        {"train.decay_epochs", ""},
        {"train.decay_factor", "0.1"},
        {"train.momentum", "0.9"},
        {"train.weight_decay", "5e-4"},
        {"train.bn_momentum", "0.1"},
        {"train.attack", "pgd:linf:eps=8/255:alpha=2/255:steps=10:rand=1"},
        {"train.seed", "0"},
        {"train.checkpoint_epochs", ""},
        {"train.save_every_epoch", "false"},
        {"train.coupling_check", "true"},
        {"swaat.enabled", "false"},
        {"swaat.window", "4"},
        {"swaat.window_iterations", "0"},
        {"swaat.lr_multiplier", "0"},
        {"swaat.policy", "none"},
        {"swaat.hard_multiplier", "3"},
        {"swaat.bn_mode", "natural"},
        {"swaat.aggregator", "recurrence"},
        {"swaat.swap_every", "1"},
        {"eval.attack", "pgd:linf:eps=8/255:alpha=2/255:steps=20:rand=1"},
        {"eval.every", "1"},
        {"eval.start", "0"},
        {"eval.limit", "0"},
        {"run.dir", "runs/default"},
        {"run.threads", "0"},
    };
    return d;
  }

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UserError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  static Config parse(std::string_view text, const std::string& origin = "<string>") {
    Config c;
    std::string section;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      const auto where = origin + ":" + std::to_string(line_no);
      if (const auto hash = line.find_first_of(";#"); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw UserError(where + ": malformed section header");
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw UserError(where + ": expected key = value");
      if (section.empty()) throw UserError(where + ": key outside of a section");
      c.set(section + "." + trim(t.substr(0, eq)), trim(t.substr(eq + 1)), where);
    }
    return c;
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "override") {
    if (!values_.contains(key)) throw UserError(where + ": unknown config key '" + key + "'");
    values_[key] = value;
  }

  // "--section.key=value" or "section.key=value".
  void apply_override(std::string_view arg) {
    if (arg.starts_with("--")) arg.remove_prefix(2);
    const auto eq = arg.find('=');
    if (eq == std::string_view::npos) throw UserError("override '" + std::string(arg) + "' must be key=value");
    set(std::string(arg.substr(0, eq)), std::string(arg.substr(eq + 1)));
  }

  // SWAAT_SEED, when set, replaces train.seed.
  void apply_environment() {
    if (const char* s = std::getenv("SWAAT_SEED"); s && *s) set("train.seed", s, "SWAAT_SEED");
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw UserError("unknown config key '" + key + "'");
    return it->second;
  }
  double real(const std::string& key) const { return detail::parse_number(str(key), "config " + key); }
  std::size_t size(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw UserError("config " + key + ": must be >= 0");
    return static_cast<std::size_t>(v);
  }
  long long integer(const std::string& key) const {
    const auto& s = str(key);
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw UserError("config " + key + ": bad integer '" + s + "'");
    return v;
  }
  bool boolean(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw UserError("config " + key + ": bad boolean '" + s + "'");
  }
  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    const auto& s = str(key);
    if (trim(s).empty()) return out;
    for (auto tok : detail::split(s, ',')) {
      const auto t = trim(tok);
      const int v = detail::parse_int(t, "config " + key);
      if (v < 0) throw UserError("config " + key + ": values must be >= 0");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  // Sorted, one "[section]" block per section; equal configs give equal text.
  std::string canonical() const {
    std::string out, section;
    for (const auto& [k, v] : values_) {
      const auto dot = k.find('.');
      const auto sec = k.substr(0, dot);
      if (sec != section) {
        out += (out.empty() ? "[" : "\n[") + sec + "]\n";
        section = sec;
      }
      out += k.substr(dot + 1) + " = " + v + "\n";
    }
    return out;
  }
  std::uint64_t hash() const { return fnv1a64(canonical()); }

  const std::map<std::string, std::string>& values() const { return values_; }

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = size("train.epochs");
    t.start_epoch = size("train.start_epoch");
    t.batch_size = size("train.batch_size");
    t.lr = real("train.lr");
    t.decay_epochs = sizes("train.decay_epochs");
    t.decay_factor = real("train.decay_factor");
    t.momentum = real("train.momentum");
    t.weight_decay = real("train.weight_decay");
    t.bn_momentum = real("train.bn_momentum");
    t.attack = parse_attack(str("train.attack"));
    t.seed = static_cast<std::uint64_t>(integer("train.seed"));
    t.checkpoint_epochs = sizes("train.checkpoint_epochs");
    t.save_every_epoch = boolean("train.save_every_epoch");
    t.coupling_check = boolean("train.coupling_check");
    t.swaat.enabled = boolean("swaat.enabled");
    t.swaat.window = size("swaat.window");
    t.swaat.window_iterations = size("swaat.window_iterations");
    t.swaat.lr_multiplier = real("swaat.lr_multiplier");
    t.swaat.policy = str("swaat.policy");
    t.swaat.hard_multiplier = real("swaat.hard_multiplier");
    t.swaat.bn_mode = parse_bn_mode(str("swaat.bn_mode"));
    t.swaat.aggregator = parse_aggregator_mode(str("swaat.aggregator"));
    t.swaat.swap_every = size("swaat.swap_every");
    t.eval_attack = parse_attack(str("eval.attack"));
    t.eval_every = size("eval.every");
    t.eval_start = size("eval.start");
    t.eval_limit = size("eval.limit");
    t.run_dir = str("run.dir");
    const auto th = size("run.threads");
    t.threads = th ? static_cast<unsigned>(th) : default_threads();
    if (t.batch_size == 0) throw UserError("config train.batch_size: must be positive");
    if (t.epochs == 0) throw UserError("config train.epochs: must be positive");
    if (t.eval_every == 0) throw UserError("config eval.every: must be positive");
    ResamplingPolicy::parse(t.swaat.policy);  // validates the spec string
    return t;
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

}  // namespace swaat
