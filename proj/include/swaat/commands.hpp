#pragma once

#include <cstdio>
#include <iostream>

#include "swaat/config.hpp"
#include "swaat/ensemble.hpp"

namespace swaat {

inline constexpr int kReportSchemaVersion = 1;

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Runs fn.template operator()<T>() with T = float or double.
template <typename Fn>
decltype(auto) with_precision(std::string_view precision, Fn&& fn) {
  if (precision == "double" || precision == "f64") return fn.template operator()<double>();
  if (precision == "float" || precision == "f32") return fn.template operator()<float>();
  throw UserError("unknown precision '" + std::string(precision) + "' (use float or double)");
}

template <Real T>
struct TrainTest {
  Dataset<T> train, test;
};

template <Real T>
TrainTest<T> load_data(const Config& cfg) {
  TrainTest<T> d;
  const auto& source = cfg.str("data.source");
  if (source == "synth") {
    const auto seed = static_cast<std::uint64_t>(cfg.integer("data.synth_seed"));
    const auto classes = cfg.size("data.synth_classes");
    const double difficulty = cfg.real("data.synth_difficulty");
    d.train = synth_dataset<T>(seed, cfg.size("data.synth_train"), classes, difficulty);
    d.test = synth_dataset<T>(derive_seed(seed, "test-split"), cfg.size("data.synth_test"), classes, difficulty);
  } else if (source == "idx") {
    const auto classes = cfg.size("data.classes");
    for (const char* k : {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"})
      if (cfg.str(k).empty()) throw UserError(std::string("config ") + k + " is required for idx data");
    d.train = load_idx<T>(cfg.str("data.train_images"), cfg.str("data.train_labels"), classes);
    d.test = load_idx<T>(cfg.str("data.test_images"), cfg.str("data.test_labels"), classes);
    const std::size_t c = std::max(d.train.classes, d.test.classes);
    d.train.classes = d.test.classes = c;
  } else {
    throw UserError("config data.source must be idx or synth, got '" + source + "'");
  }
  d.train = d.train.head(cfg.size("data.train_limit"));
  d.test = d.test.head(cfg.size("data.test_limit"));
  return d;
}

// ---------------------------------------------------------------------------
// train

template <Real T>
nlohmann::json run_training(const Config& cfg, std::ostream* progress = nullptr) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc = cfg.train_config();
  const auto data = load_data<T>(cfg);

  Network<T> net;
  if (const auto& init = cfg.str("model.init_checkpoint"); !init.empty()) {
    net = load_network<T>(init);
    if (net.input_shape() != data.train.image_shape())
      throw UserError("warm-start checkpoint input shape does not match the dataset");
  } else {
    net = make_network<T>(cfg.str("model.arch"), data.train.image_shape(), data.train.classes);
    Rng rng(derive_seed(tc.seed, "init"));
    net.init(rng);
  }
  if (net.classes() != data.train.classes)
    throw UserError("network has " + std::to_string(net.classes()) + " classes, dataset has " +
                    std::to_string(data.train.classes));

  fs::create_directories(tc.run_dir);
  {
    std::ofstream snap(fs::path(tc.run_dir) / "config.ini");
    snap << cfg.canonical();
  }
  TrainHooks hooks;
  if (progress)
    hooks.on_epoch = [&](const EpochRecord& e) {
      *progress << "epoch " << e.epoch << "  lr " << e.lr << "  loss " << e.train_loss;
      if (e.evaluated) *progress << "  nat " << e.natural_acc << "  adv " << e.adv_acc;
      if (e.swapped) *progress << "  [swap]";
      *progress << "  (" << e.seconds << " s)\n" << std::flush;
    };
  const RunRecord rec = train(net, data.train, data.test, tc, hooks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::json s = {{"schema_version", kReportSchemaVersion},
                      {"run_dir", tc.run_dir},
                      {"mode", tc.swaat.enabled ? "swaat" : "pgd-at"},
                      {"epochs_run", rec.epochs.size()},
                      {"iterations", rec.iterations},
                      {"swap_events", rec.swap_events},
                      {"hem_calls", rec.hem_calls},
                      {"best_epoch", rec.best_epoch},
                      {"best_adv_acc", rec.best_adv_acc},
                      {"best_natural_acc", rec.best_natural_acc},
                      {"final_checksum", to_hex(rec.final_checksum)},
                      {"config_hash", to_hex(cfg.hash())},
                      {"seed", tc.seed},
                      {"record_consistent", record_consistent(rec)},
                      {"wall_clock_seconds", secs}};
  std::ofstream(fs::path(tc.run_dir) / "summary.json") << s.dump(2) << '\n';
  return s;
}

inline nlohmann::json cmd_train(const Config& cfg, std::ostream* progress = nullptr) {
  return with_precision(cfg.str("model.precision"),
                        [&]<Real T>() { return run_training<T>(cfg, progress); });
}

// ---------------------------------------------------------------------------
// eval / obfuscation check

struct ObfuscationResult {
  double pgd_few = 0, pgd_many = 0, unconstrained = 0;
  bool many_step_flag = false, unconstrained_flag = false;
  std::string few_spec, many_spec, unconstrained_spec;

  bool passed() const { return !many_step_flag && !unconstrained_flag; }
};

// Many-step PGD must not beat few-step PGD by more than 2 points, and
// unbounded PGD-100 must drive accuracy to at most 1%.
template <Real T, typename M>
  requires Classifier<M, T>
ObfuscationResult obfuscation_check(const M& model, const Tensor<T>& x, std::span<const int> y, double epsilon,
                                    double alpha, const AttackOptions& opt, int few = 10, int many = 100) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  ObfuscationResult r;
  r.few_spec = "pgd:linf:eps=" + num(epsilon) + ":alpha=" + num(alpha) + ":steps=" + std::to_string(few) + ":rand=1";
  r.many_spec = "pgd:linf:eps=" + num(epsilon) + ":alpha=" + num(alpha) + ":steps=" + std::to_string(many) + ":rand=1";
  r.unconstrained_spec = "pgd:linf:eps=inf:alpha=" + num(alpha) + ":steps=" + std::to_string(many) + ":rand=0";
  r.pgd_few = accuracy_under_attack<T>(model, x, y, parse_attack(r.few_spec), opt);
  r.pgd_many = accuracy_under_attack<T>(model, x, y, parse_attack(r.many_spec), opt);
  r.unconstrained = accuracy_under_attack<T>(model, x, y, parse_attack(r.unconstrained_spec), opt);
  r.many_step_flag = r.pgd_many > r.pgd_few + 0.02;
  r.unconstrained_flag = r.unconstrained > 0.01;
  return r;
}

inline nlohmann::json to_json(const ObfuscationResult& r) {
  return {{"verdict", r.passed() ? "PASS" : "FLAG"},
          {"few_step", {{"spec", r.few_spec}, {"accuracy", r.pgd_few}}},
          {"many_step", {{"spec", r.many_spec}, {"accuracy", r.pgd_many}, {"flag", r.many_step_flag}}},
          {"unconstrained",
           {{"spec", r.unconstrained_spec}, {"accuracy", r.unconstrained}, {"flag", r.unconstrained_flag}}}};
}

struct EvalOptions {
  std::string checkpoint;
  std::string images, labels;
  std::size_t classes = 0;
  std::size_t limit = 0;
  std::vector<std::string> attacks;
  bool obfuscation = false;
  double obf_epsilon = 8.0 / 255, obf_alpha = 2.0 / 255;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string precision = "double";
  std::string expect_arch;  // optional: descriptor or preset the checkpoint must match
};

// Looks for the run's config snapshot next to the checkpoint directory.
inline std::optional<std::uint64_t> run_config_hash(const std::string& checkpoint) {
  namespace fs = std::filesystem;
  const fs::path p = fs::path(checkpoint).parent_path().parent_path() / "config.ini";
  std::error_code ec;
  if (!fs::exists(p, ec)) return std::nullopt;
  return Config::from_file(p.string()).hash();
}

template <Real T>
nlohmann::json run_eval(const EvalOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const CheckpointData ck = read_checkpoint(o.checkpoint);
  const Network<T> net = network_from<T>(ck);
  Dataset<T> data = load_idx<T>(o.images, o.labels, o.classes ? o.classes : net.classes());
  data = data.head(o.limit);
  if (data.image_shape() != net.input_shape())
    throw UserError("checkpoint input shape " + shape_str(net.input_shape()) + " does not match dataset " +
                    shape_str(data.image_shape()));
  if (data.classes > net.classes()) throw UserError("dataset has more classes than the checkpoint's network");
  if (!o.expect_arch.empty()) {
    const auto want = make_network<double>(o.expect_arch, data.image_shape(), net.classes()).descriptor();
    if (want != ck.descriptor)
      throw UserError("architecture mismatch: checkpoint is '" + ck.descriptor + "', expected '" + want + "'");
  }

  AttackOptions ao;
  ao.seed = o.seed;
  ao.threads = o.threads;
  nlohmann::json attacks = nlohmann::json::array();
  const double natural = accuracy<T>(net, data.images, data.labels, ao);
  for (const auto& s : o.attacks) {
    const auto spec = parse_attack(s);
    const auto a0 = std::chrono::steady_clock::now();
    const double acc = accuracy_under_attack<T>(net, data.images, data.labels, spec, ao);
    attacks.push_back({{"spec", s},
                       {"accuracy", acc},
                       {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - a0).count()}});
  }
  nlohmann::json rep = {{"schema_version", kReportSchemaVersion},
                        {"model", {{"checkpoint", o.checkpoint}, {"checksum", to_hex(ck.checksum)},
                                   {"descriptor", ck.descriptor}}},
                        {"dataset", {{"images", o.images}, {"labels", o.labels}, {"examples", data.size()}}},
                        {"precision", o.precision},
                        {"seed", o.seed},
                        {"natural_accuracy", natural},
                        {"attacks", attacks}};
  if (o.obfuscation)
    rep["obfuscation"] =
        to_json(obfuscation_check<T>(net, data.images, data.labels, o.obf_epsilon, o.obf_alpha, ao));
  const auto h = run_config_hash(o.checkpoint);
  rep["config_hash"] = h ? nlohmann::json(to_hex(*h)) : nlohmann::json(nullptr);
  rep["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline nlohmann::json cmd_eval(const EvalOptions& o) {
  return with_precision(o.precision, [&]<Real T>() { return run_eval<T>(o); });
}

// Aligned text rendering of an eval report.
inline std::string eval_table(const nlohmann::json& rep) {
  std::ostringstream os;
  std::size_t w = std::string("natural").size();
  for (const auto& a : rep["attacks"]) w = std::max(w, a["spec"].get<std::string>().size());
  auto row = [&](const std::string& name, double acc, const std::string& note = "") {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%7.2f%%", 100 * acc);
    os << "  " << name << std::string(w - name.size() + 2, ' ') << buf << note << '\n';
  };
  os << "model    " << rep["model"]["checkpoint"].get<std::string>() << " (" << rep["model"]["checksum"].get<std::string>()
     << ")\n";
  os << "examples " << rep["dataset"]["examples"].get<std::size_t>() << ", seed " << rep["seed"].get<std::uint64_t>()
     << "\n";
  row("natural", rep["natural_accuracy"].get<double>());
  for (const auto& a : rep["attacks"]) row(a["spec"].get<std::string>(), a["accuracy"].get<double>());
  if (rep.contains("obfuscation")) {
    const auto& ob = rep["obfuscation"];
    os << "obfuscation check: " << ob["verdict"].get<std::string>() << '\n';
    w = std::max({w, ob["few_step"]["spec"].get<std::string>().size(), ob["many_step"]["spec"].get<std::string>().size(),
                  ob["unconstrained"]["spec"].get<std::string>().size()});
    row(ob["few_step"]["spec"].get<std::string>(), ob["few_step"]["accuracy"].get<double>());
    row(ob["many_step"]["spec"].get<std::string>(), ob["many_step"]["accuracy"].get<double>(),
        ob["many_step"]["flag"].get<bool>() ? "  FLAG" : "");
    row(ob["unconstrained"]["spec"].get<std::string>(), ob["unconstrained"]["accuracy"].get<double>(),
        ob["unconstrained"]["flag"].get<bool>() ? "  FLAG" : "");
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// attack / adjust-bn / synth-data

struct AttackCmdOptions {
  std::string checkpoint, images, labels, spec;
  std::string out_images, out_labels;
  std::size_t limit = 0;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string precision = "double";
};

// Writes the adversarial examples as IDX. Pixels are rounded to k/255, so
// the written set can be slightly weaker than the in-memory one; both
// accuracies are reported.
inline nlohmann::json cmd_attack(const AttackCmdOptions& o) {
  return with_precision(o.precision, [&]<Real T>() {
    const Network<T> net = load_network<T>(o.checkpoint);
    Dataset<T> data = load_idx<T>(o.images, o.labels, net.classes()).head(o.limit);
    const auto spec = parse_attack(o.spec);
    AttackOptions ao;
    ao.seed = o.seed;
    ao.threads = o.threads;
    Dataset<T> adv = data;
    adv.images = run_attack(net, data.images, data.labels, spec, ao);
    write_idx(adv, o.out_images, o.out_labels);
    const Dataset<T> written = load_idx<T>(o.out_images, o.out_labels, net.classes());
    return nlohmann::json{{"schema_version", kReportSchemaVersion},
                          {"spec", o.spec},
                          {"examples", data.size()},
                          {"accuracy", accuracy<T>(net, adv.images, adv.labels, ao)},
                          {"accuracy_written", accuracy<T>(net, written.images, written.labels, ao)},
                          {"out_images", o.out_images},
                          {"out_labels", o.out_labels}};
  });
}

struct AdjustBnCmdOptions {
  std::string checkpoint, images, labels, out;
  std::string mode = "natural";
  std::string attack = "pgd:linf:eps=8/255:alpha=2/255:steps=10:rand=1";
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string precision = "double";
};

inline nlohmann::json cmd_adjust_bn(const AdjustBnCmdOptions& o) {
  return with_precision(o.precision, [&]<Real T>() {
    const CheckpointData ck = read_checkpoint(o.checkpoint);
    Network<T> net = network_from<T>(ck);
    const Dataset<T> data = load_idx<T>(o.images, o.labels, net.classes());
    AdjustBnOptions bo;
    bo.mode = parse_bn_mode(o.mode);
    const auto spec = parse_attack(o.attack);
    if (bo.mode == BnMode::Adversarial && spec.kind != AttackSpec::Kind::Pgd)
      throw UserError("adjust-bn: adversarial mode needs a pgd attack spec");
    bo.attack = spec.pgd;
    bo.seed = o.seed;
    bo.threads = o.threads;
    adjust_bn(net, data, bo);
    std::unique_ptr<WeightAggregator<T>> agg;
    if (ck.aggregator) agg = std::make_unique<WeightAggregator<T>>(aggregator_from<T>(*ck.aggregator));
    const auto sum = save_checkpoint(o.out, net, agg.get());
    return nlohmann::json{{"schema_version", kReportSchemaVersion},
                          {"mode", o.mode},
                          {"examples", data.size()},
                          {"out", o.out},
                          {"checksum", to_hex(sum)}};
  });
}

struct SynthCmdOptions {
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  std::size_t train = 5000, test = 1000, classes = 10;
  double difficulty = 1.5;
};

// Writes train-images.idx, train-labels.idx, test-images.idx and
// test-labels.idx. The test split uses a seed derived from the train seed.
inline nlohmann::json cmd_synth_data(const SynthCmdOptions& o) {
  namespace fs = std::filesystem;
  fs::create_directories(o.out_dir);
  const auto tr = synth_dataset<double>(o.seed, o.train, o.classes, o.difficulty);
  const auto te = synth_dataset<double>(derive_seed(o.seed, "test-split"), o.test, o.classes, o.difficulty);
  const fs::path d(o.out_dir);
  write_idx(tr, (d / "train-images.idx").string(), (d / "train-labels.idx").string());
  write_idx(te, (d / "test-images.idx").string(), (d / "test-labels.idx").string());
  return {{"schema_version", kReportSchemaVersion}, {"out_dir", o.out_dir}, {"train", o.train},
          {"test", o.test}, {"classes", o.classes}, {"difficulty", o.difficulty}, {"seed", o.seed}};
}

inline nlohmann::json cmd_dilemma(const Config& cfg, const DilemmaConfig& base, std::ostream* progress = nullptr) {
  return with_precision(cfg.str("model.precision"), [&]<Real T>() {
    const auto data = load_data<T>(cfg);
    DilemmaConfig dc = base;
    dc.train = cfg.train_config();
    dc.swaat = dc.train.swaat;
    dc.arch = cfg.str("model.arch");
    dc.eval_attack = dc.train.eval_attack;
    std::function<void(const std::string&)> report;
    if (progress) report = [&](const std::string& s) { *progress << s << '\n' << std::flush; };
    return dilemma_experiment(data.train, data.test.head(dc.train.eval_limit), dc, report);
  });
}

}  // namespace swaat
