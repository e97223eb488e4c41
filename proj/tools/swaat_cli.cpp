#include <malloc.h>

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "swaat/swaat.hpp"

namespace {

// Tensors are allocated and freed every step; keep them off mmap.
void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
}

void emit(const nlohmann::json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(out);
  if (!f) throw swaat::UserError("cannot write '" + out + "'");
  f << j.dump(2) << '\n';
}

swaat::Config load_config(const std::string& path, const std::vector<std::string>& overrides, unsigned threads) {
  swaat::Config cfg = path.empty() ? swaat::Config() : swaat::Config::from_file(path);
  cfg.apply_environment();
  for (const auto& o : overrides) cfg.apply_override(o);
  if (threads) cfg.set("run.threads", std::to_string(threads), "--threads");
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"SWAAT adversarial-training laboratory"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "worker threads (default: available cores)");

  // train
  auto* train = app.add_subcommand("train", "run PGD-AT or SWAAT training from a config file");
  std::string train_config;
  bool quiet = false;
  train->add_option("-c,--config", train_config, "sectioned key-value config file");
  train->add_flag("-q,--quiet", quiet, "no per-epoch progress");
  train->allow_extras();
  train->footer("Any --section.key=value argument overrides the config file.");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under attacks");
  swaat::EvalOptions eo;
  std::string eval_out;
  bool eval_text = false;
  eval->add_option("--checkpoint", eo.checkpoint, "checkpoint file")->required();
  eval->add_option("--images", eo.images, "IDX images")->required();
  eval->add_option("--labels", eo.labels, "IDX labels")->required();
  eval->add_option("--attack", eo.attacks, "attack spec (repeatable)");
  eval->add_flag("--obfuscation", eo.obfuscation, "add the obfuscated-gradient check");
  eval->add_option("--obf-eps", eo.obf_epsilon, "budget for the obfuscation check");
  eval->add_option("--obf-alpha", eo.obf_alpha, "step size for the obfuscation check");
  eval->add_option("--limit", eo.limit, "use the first N examples");
  eval->add_option("--seed", eo.seed, "attack seed");
  eval->add_option("--precision", eo.precision, "float or double");
  eval->add_option("--arch", eo.expect_arch, "fail unless the checkpoint has this architecture");
  eval->add_option("-o,--out", eval_out, "write the JSON report here");
  eval->add_flag("--text", eval_text, "print an aligned table as well");

  // obfuscation-check
  auto* obf = app.add_subcommand("obfuscation-check", "many-step and unbounded PGD sanity checks");
  swaat::EvalOptions oo;
  std::string obf_out;
  std::string obf_eps = "8/255", obf_alpha = "2/255";
  obf->add_option("--checkpoint", oo.checkpoint)->required();
  obf->add_option("--images", oo.images)->required();
  obf->add_option("--labels", oo.labels)->required();
  obf->add_option("--eps", obf_eps, "l-inf budget (fractions allowed)");
  obf->add_option("--alpha", obf_alpha, "step size (fractions allowed)");
  obf->add_option("--limit", oo.limit);
  obf->add_option("--seed", oo.seed);
  obf->add_option("--precision", oo.precision);
  obf->add_option("-o,--out", obf_out);

  // attack
  auto* atk = app.add_subcommand("attack", "write adversarial examples as IDX");
  swaat::AttackCmdOptions ac;
  std::string atk_out;
  atk->add_option("--checkpoint", ac.checkpoint)->required();
  atk->add_option("--images", ac.images)->required();
  atk->add_option("--labels", ac.labels)->required();
  atk->add_option("--attack", ac.spec)->required();
  atk->add_option("--out-images", ac.out_images)->required();
  atk->add_option("--out-labels", ac.out_labels)->required();
  atk->add_option("--limit", ac.limit);
  atk->add_option("--seed", ac.seed);
  atk->add_option("--precision", ac.precision);
  atk->add_option("-o,--out", atk_out, "JSON summary");

  // adjust-bn
  auto* abn = app.add_subcommand("adjust-bn", "recompute BN statistics over a dataset");
  swaat::AdjustBnCmdOptions bo;
  abn->add_option("--checkpoint", bo.checkpoint)->required();
  abn->add_option("--images", bo.images)->required();
  abn->add_option("--labels", bo.labels)->required();
  abn->add_option("--out", bo.out, "output checkpoint")->required();
  abn->add_option("--mode", bo.mode, "natural or adversarial");
  abn->add_option("--attack", bo.attack, "PGD spec for adversarial mode");
  abn->add_option("--seed", bo.seed);
  abn->add_option("--precision", bo.precision);

  // dilemma
  auto* dil = app.add_subcommand("dilemma", "member- vs ensemble-targeted training experiment");
  std::string dil_config, dil_out;
  swaat::DilemmaConfig dc;
  dil->add_option("-c,--config", dil_config, "config file (data, model, train, swaat, eval sections)");
  dil->add_option("--members", dc.members, "ensemble size");
  dil->add_option("--seeds", dc.seeds, "seeds to average over");
  dil->add_option("-o,--out", dil_out, "JSON report");
  dil->allow_extras();

  // synth-data
  auto* syn = app.add_subcommand("synth-data", "write a deterministic synthetic digit dataset as IDX");
  swaat::SynthCmdOptions so;
  syn->add_option("--out-dir", so.out_dir)->required();
  syn->add_option("--seed", so.seed);
  syn->add_option("--train", so.train);
  syn->add_option("--test", so.test);
  syn->add_option("--classes", so.classes);
  syn->add_option("--difficulty", so.difficulty);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const unsigned nthreads = threads ? threads : swaat::default_threads();
  try {
    if (*train) {
      const auto cfg = load_config(train_config, train->remaining(), threads);
      emit(swaat::cmd_train(cfg, quiet ? nullptr : &std::cerr), "");
    } else if (*eval) {
      eo.threads = nthreads;
      const auto rep = swaat::cmd_eval(eo);
      if (eval_text) std::cerr << swaat::eval_table(rep);
      emit(rep, eval_out);
    } else if (*obf) {
      oo.threads = nthreads;
      oo.obfuscation = true;
      oo.obf_epsilon = swaat::detail::parse_number(obf_eps, "--eps");
      oo.obf_alpha = swaat::detail::parse_number(obf_alpha, "--alpha");
      const auto rep = swaat::cmd_eval(oo);
      std::cerr << swaat::eval_table(rep);
      emit(rep, obf_out);
    } else if (*atk) {
      ac.threads = nthreads;
      emit(swaat::cmd_attack(ac), atk_out);
    } else if (*abn) {
      bo.threads = nthreads;
      emit(swaat::cmd_adjust_bn(bo), "");
    } else if (*dil) {
      const auto cfg = load_config(dil_config, dil->remaining(), threads);
      emit(swaat::cmd_dilemma(cfg, dc, &std::cerr), dil_out);
    } else if (*syn) {
      emit(swaat::cmd_synth_data(so), "");
    }
  } catch (const swaat::UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
