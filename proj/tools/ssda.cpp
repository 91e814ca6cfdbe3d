// Command-line front end: generate, train, eval, sweep, pseudolabel.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssda/app.hpp"

namespace {

std::string flag_name(const std::string& key) {
  std::string s = "--" + key;
  for (auto& ch : s) {
    if (ch == '_') ch = '-';
  }
  return s;
}

bool is_generator_key(const std::string& key) {
  return key.rfind("gen_", 0) == 0 || key == "classes" || key == "gap";
}

/// Registry keys exposed as flags on one subcommand; values are applied after
/// the config file.
struct KeyFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  std::string config_file;

  void attach(CLI::App* cmd, bool generator_only) {
    cmd->add_option("--config", config_file, "flat key = value config file");
    for (const auto& f : ssda::config_fields()) {
      if (generator_only && !is_generator_key(f.key)) continue;
      if (f.flag) {
        switches[f.key] = false;
        cmd->add_flag(flag_name(f.key), switches[f.key], f.help);
      } else {
        values[f.key];
        cmd->add_option(flag_name(f.key), values[f.key], f.help);
      }
    }
  }

  ssda::RunConfig resolve(CLI::App* cmd) const {
    ssda::RunConfig cfg;
    bool seed_given = false;
    if (!config_file.empty()) seed_given = ssda::apply_config_file(cfg, config_file).count("seed") > 0;
    for (const auto& [key, value] : values) {
      if (cmd->count(flag_name(key)) == 0) continue;
      ssda::set_config_value(cfg, key, value);
      if (key == "seed") seed_given = true;
    }
    for (const auto& [key, on] : switches) {
      if (on) ssda::set_config_value(cfg, key, "true");
    }
    ssda::apply_seed_fallback(cfg, seed_given);
    return cfg;
  }
};

template <class N>
std::vector<N> parse_list(const std::string& what, const std::string& text) {
  std::vector<N> out;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      out.push_back(static_cast<N>(std::stoll(part)));
    } catch (const std::exception&) {
      throw ssda::ConfigError(what + ": '" + part + "' is not an integer");
    }
  }
  return out;
}

std::vector<bool> parse_switch_list(const std::string& text) {
  std::vector<bool> out;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part == "on") out.push_back(true);
    else if (part == "off") out.push_back(false);
    else throw ssda::ConfigError("--cr: '" + part + "' is not on|off");
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised domain adaptation for semantic segmentation on a procedural benchmark"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "write a procedural two-domain dataset");
  KeyFlags gen_flags;
  gen_flags.attach(gen, true);
  std::string gen_out;
  bool force = false;
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_flag("--force", force, "overwrite a non-empty directory");

  auto* train = app.add_subcommand("train", "train round 0 plus self-training rounds and evaluate");
  KeyFlags train_flags;
  train_flags.attach(train, false);
  std::string run_dir;
  train->add_option("--out", run_dir, "run directory")->required();

  auto* eval = app.add_subcommand("eval", "score one checkpoint or a two-checkpoint ensemble");
  KeyFlags eval_flags;
  eval_flags.attach(eval, false);
  std::vector<std::string> checkpoints;
  std::string report_out;
  eval->add_option("--checkpoint", checkpoints, "checkpoint file (give twice for an ensemble)")->required()->expected(1, 2);
  eval->add_option("--out", report_out, "report file");

  auto* sweep = app.add_subcommand("sweep", "train a grid of labelled-set sizes and seeds");
  KeyFlags sweep_flags;
  sweep_flags.attach(sweep, false);
  std::string sweep_out, nt_list = "8,200", seed_list = "0,1,2", cr_list = "on", styling_list = "none";
  sweep->add_option("--out", sweep_out, "sweep directory")->required();
  sweep->add_option("--n-t-list", nt_list, "comma-separated labelled-set sizes")->capture_default_str();
  sweep->add_option("--seeds", seed_list, "comma-separated seeds")->capture_default_str();
  sweep->add_option("--cr", cr_list, "consistency term grid: on,off")->capture_default_str();
  sweep->add_option("--styling-grid", styling_list, "styling grid: none,lab")->capture_default_str();

  auto* pseudo = app.add_subcommand("pseudolabel", "write confident pseudolabels for the unlabelled split");
  KeyFlags pseudo_flags;
  pseudo_flags.attach(pseudo, false);
  std::string pl_checkpoint, pl_out;
  pseudo->add_option("--checkpoint", pl_checkpoint, "producing checkpoint")->required();
  pseudo->add_option("--out", pl_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      ssda::RunConfig cfg = gen_flags.resolve(gen);
      if (cfg.generator.size % cfg.train.arch.downsample != 0) {
        throw ssda::ConfigError("conflicting keys gen_size, downsample: size must be divisible by 4");
      }
      ssda::cmd_generate(cfg.resolved_generator(), gen_out, force, std::cout);
    } else if (*train) {
      ssda::cmd_train(train_flags.resolve(train), run_dir, std::cerr);
    } else if (*eval) {
      ssda::cmd_eval(checkpoints, eval_flags.resolve(eval), report_out, std::cout);
    } else if (*sweep) {
      ssda::SweepPlan plan;
      plan.n_t = parse_list<int>("--n-t-list", nt_list);
      plan.seeds = parse_list<std::uint64_t>("--seeds", seed_list);
      plan.cr = parse_switch_list(cr_list);
      plan.styling.clear();
      std::istringstream in(styling_list);
      for (std::string s; std::getline(in, s, ',');) plan.styling.push_back(s);
      ssda::cmd_sweep(sweep_flags.resolve(sweep), plan, sweep_out, std::cerr);
    } else if (*pseudo) {
      ssda::RunConfig cfg = pseudo_flags.resolve(pseudo);
      ssda::cmd_pseudolabel(pl_checkpoint, cfg, cfg.train.plan.tau, pl_out, std::cout);
    }
  } catch (const ssda::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
