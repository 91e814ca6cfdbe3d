#pragma once

// Implementations of the command-line subcommands. Each returns normally on
// success and throws ssda::Error on failure; the executable maps
// ConfigError to exit code 2 and every other error to 1.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssda/checkpoint.hpp"
#include "ssda/config.hpp"
#include "ssda/data.hpp"
#include "ssda/eval.hpp"
#include "ssda/selftrain.hpp"

namespace ssda {

namespace fs = std::filesystem;

inline constexpr const char* kMetricsVersionLine = "#metrics_version=1";
inline constexpr const char* kMetricsHeader =
    "round,step,lr,loss_total,loss_sup_source,loss_sup_target,loss_cr,loss_pc,grad_norm,mu";

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

/// The benchmark named by the config: a dataset directory when given (its
/// generator metadata is copied into the config), otherwise rendered in memory.
inline Benchmark load_benchmark(RunConfig& cfg) {
  if (cfg.dataset.empty()) return generate_benchmark(cfg.resolved_generator());
  StoredDataset stored = read_dataset(cfg.dataset);
  const GapParams gap = stored.meta.gap;
  cfg.generator = stored.meta;
  if (gap == GapParams::zero()) cfg.gap = "zero";
  if (gap == GapParams::large()) cfg.gap = "large";
  cfg.generator.gap = gap;
  return std::move(stored.bench);
}

inline std::string format_frequencies(const std::vector<double>& f) {
  std::string out;
  char buf[32];
  for (std::size_t c = 0; c < f.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%sclass%02zu=%.4f", c ? " " : "", c, f[c]);
    out += buf;
  }
  return out;
}

/// Writes a generated dataset. Refuses a non-empty directory unless `force`.
inline void cmd_generate(const GeneratorConfig& gen, const fs::path& out, bool force, std::ostream& log) {
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw ConfigError("output directory " + out.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  const Benchmark bench = generate_benchmark(gen);
  write_dataset(out, bench, gen);
  log << "wrote " << bench.source.size() << " source, " << bench.target_pool.size() << " target, "
      << bench.validation.size() << " validation images to " << out.string() << "\n";
  log << "source frequencies: " << format_frequencies(class_frequencies(bench.source, gen.num_classes)) << "\n";
  log << "target frequencies: " << format_frequencies(class_frequencies(bench.target_pool, gen.num_classes)) << "\n";
}

namespace detail {

inline std::string metrics_row(const StepMetrics& m) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.round, m.step, m.lr, m.terms.total,
                m.terms.sup_source, m.terms.sup_target, m.terms.cr, m.terms.pc, m.grad_norm, m.mu);
  return buf;
}

/// Keeps metrics rows of rounds that have a checkpoint, so a resumed run does
/// not duplicate the rows of an interrupted round.
inline void prune_metrics(const fs::path& path, const RoundStore& store) {
  if (!fs::exists(path)) return;
  std::istringstream in(read_text(path));
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#' || line.rfind("round,", 0) == 0) {
      kept += line + "\n";
      continue;
    }
    const int round = std::stoi(line.substr(0, line.find(',')));
    if (fs::exists(store.checkpoint(round))) kept += line + "\n";
  }
  write_text(path, kept);
}

}  // namespace detail

struct TrainSummary {
  std::vector<IouReport> rounds;  // student of each round on the validation split
  IouReport final_report;         // ensemble of the last two rounds
};

/// Runs the full algorithm into `out`: config.txt, metrics.csv,
/// round<k>.ckpt, pl_round<k>/, eval_round<k>.txt and the final eval.txt.
/// A directory holding the same config resumes after its last checkpoint.
inline TrainSummary cmd_train(RunConfig cfg, const fs::path& out, std::ostream& log) {
  validate_config(cfg);
  const Benchmark bench = load_benchmark(cfg);
  validate_config(cfg);
  const TrainOptions opt = cfg.resolved_options();
  fs::create_directories(out);
  const std::string config_text = format_config(cfg);
  const fs::path config_path = out / "config.txt";
  if (fs::exists(config_path) && read_text(config_path) != config_text) {
    throw ConfigError("run directory " + out.string() + " holds a different config.txt; choose another directory");
  }
  write_text(config_path, config_text);

  const RoundStore store{out};
  const fs::path metrics_path = out / "metrics.csv";
  detail::prune_metrics(metrics_path, store);
  const bool fresh = !fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, std::ios::app);
  if (fresh) metrics << kMetricsVersionLine << "\n" << kMetricsHeader << "\n";

  const auto [target_labeled, unlabeled] = split_target(bench.target_pool, cfg.n_t, cfg.seed);
  const TrainSets sets{cfg.setting, cfg.setting == Setting::ssl ? nullptr : &bench.source, &target_labeled, &unlabeled};

  const int log_every = cfg.log_every;
  auto sink = [&](const StepMetrics& m) {
    metrics << detail::metrics_row(m);
    if (log_every > 0 && (m.step + 1) % log_every == 0) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "round %d step %d lr %.2e loss %.4f (sup %.4f/%.4f cr %.4f pc %.4f) grad %.3f\n",
                    m.round, m.step + 1, m.lr, m.terms.total, m.terms.sup_source, m.terms.sup_target, m.terms.cr,
                    m.terms.pc, m.grad_norm);
      log << buf << std::flush;
    }
  };
  TrainSummary summary;
  auto on_round = [&](int k, const ModelPair<float>& pair) {
    metrics.flush();
    const IouReport r = evaluate_iou<float>({&pair.student}, opt.arch, bench.validation);
    write_report((out / ("eval_round" + std::to_string(k) + ".txt")).string(), r);
    char buf[64];
    std::snprintf(buf, sizeof buf, "round %d miou %.6f\n", k, r.miou);
    log << buf << std::flush;
    summary.rounds.push_back(r);
  };
  const auto result = run_algorithm<float>(sets, opt, cfg.seed, store, sink, on_round);
  metrics.close();
  if (!metrics) throw DataError("failed writing " + metrics_path.string());

  summary.final_report = evaluate_iou<float>({&result.previous(), &result.last()}, opt.arch, bench.validation);
  write_report((out / "eval.txt").string(), summary.final_report);
  char buf[64];
  std::snprintf(buf, sizeof buf, "ensemble miou %.6f\n", summary.final_report.miou);
  log << buf;
  return summary;
}

/// Scores one checkpoint, or the mean-softmax ensemble of several, on the
/// validation split.
inline IouReport cmd_eval(const std::vector<std::string>& checkpoints, RunConfig cfg, const std::string& out,
                          std::ostream& log) {
  if (checkpoints.empty()) throw ConfigError("eval needs at least one checkpoint");
  const Benchmark bench = load_benchmark(cfg);
  std::vector<ModelPair<float>> pairs;
  for (const auto& path : checkpoints) pairs.push_back(load_checkpoint<float>(path));
  const TinySegConfig arch = infer_config(pairs.front().student);
  std::vector<const ParamSet<float>*> models;
  for (const auto& p : pairs) {
    check_compatible(pairs.front().student, p.student);
    models.push_back(&p.student);
  }
  if (arch.num_classes != cfg.generator.num_classes) {
    throw IntegrityError("checkpoint predicts " + std::to_string(arch.num_classes) + " classes, dataset has " +
                         std::to_string(cfg.generator.num_classes));
  }
  const IouReport r = evaluate_iou<float>(models, arch, bench.validation);
  if (!out.empty()) write_report(out, r);
  log << format_report(r);
  return r;
}

/// Pseudolabels for the unlabelled split defined by (n_t, seed).
inline PseudoLabelSet cmd_pseudolabel(const std::string& checkpoint, RunConfig cfg, double tau, const fs::path& out,
                                      std::ostream& log) {
  const Benchmark bench = load_benchmark(cfg);
  const auto bytes = read_file_bytes(checkpoint);
  const ModelPair<float> pair = decode_checkpoint<float>(bytes);
  const TinySegConfig arch = infer_config(pair.student);
  if (arch.num_classes != cfg.generator.num_classes) throw IntegrityError("checkpoint and dataset differ in class count");
  const auto split = split_target(bench.target_pool, cfg.n_t, cfg.seed);
  PseudoLabelSet pl = generate_pseudolabels(pair.student, arch, split.second, tau, content_hash(bytes));
  write_pseudolabels(out, pl);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu images, mean coverage %.6f at tau %.3f\n", pl.set.size(), pl.mean_coverage(), tau);
  log << buf;
  return pl;
}

struct SweepRow {
  std::string setting;
  int n_t = 0;
  std::uint64_t seed = 0;
  double miou = 0.0;
  bool cr = true;
  std::string styling;
};

struct SweepCellSummary {
  std::string setting;
  int n_t = 0;
  bool cr = true;
  std::string styling;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
  std::size_t runs = 0;
};

struct SweepPlan {
  std::vector<int> n_t;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<bool> cr{true};
  std::vector<std::string> styling{"none"};
};

inline std::vector<SweepCellSummary> summarize_sweep(const std::vector<SweepRow>& rows) {
  std::vector<SweepCellSummary> cells;
  std::vector<std::vector<double>> values;
  for (const auto& r : rows) {
    std::size_t i = 0;
    while (i < cells.size() && !(cells[i].setting == r.setting && cells[i].n_t == r.n_t && cells[i].cr == r.cr &&
                                 cells[i].styling == r.styling)) {
      ++i;
    }
    if (i == cells.size()) {
      cells.push_back({r.setting, r.n_t, r.cr, r.styling, 0.0, 0.0, 0});
      values.emplace_back();
    }
    values[i].push_back(r.miou);
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& v = values[i];
    double mean = 0.0;
    for (double x : v) mean += x / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    cells[i].mean = mean;
    cells[i].stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    cells[i].runs = v.size();
  }
  return cells;
}

/// Trains every (N_t, CR, styling, seed) cell as a sub-run under `out` and
/// writes sweep.csv plus sweep_summary.csv (mean and std per cell). An N_t of
/// 0 runs the uda variant.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& base, const SweepPlan& plan, const fs::path& out,
                                       std::ostream& log) {
  if (plan.n_t.empty() || plan.seeds.empty() || plan.cr.empty() || plan.styling.empty()) {
    throw ConfigError("sweep: label, seed, cr and styling lists must be non-empty");
  }
  fs::create_directories(out);
  std::vector<SweepRow> rows;
  std::ofstream csv(out / "sweep.csv", std::ios::trunc);
  csv << "setting,N_t,seed,miou,cr,styling\n";
  for (int n_t : plan.n_t)
    for (bool cr : plan.cr)
      for (const auto& styling : plan.styling)
        for (std::uint64_t seed : plan.seeds) {
          RunConfig cfg = base;
          cfg.n_t = n_t;
          cfg.seed = seed;
          cfg.disable_cr = !cr;
          cfg.styling = styling;
          if (n_t == 0) cfg.setting = Setting::uda;
          if (!cr) cfg.cr_variant = "auto";
          const std::string name = to_string(cfg.setting) + "_nt" + std::to_string(n_t) + "_cr" + (cr ? "on" : "off") +
                                   "_" + styling + "_s" + std::to_string(seed);
          log << "== " << name << "\n" << std::flush;
          const TrainSummary s = cmd_train(cfg, out / name, log);
          rows.push_back({to_string(cfg.setting), n_t, seed, s.final_report.miou, cr, styling});
          char buf[160];
          std::snprintf(buf, sizeof buf, "%s,%d,%llu,%.6f,%s,%s\n", rows.back().setting.c_str(), n_t,
                        static_cast<unsigned long long>(seed), rows.back().miou, cr ? "on" : "off", styling.c_str());
          csv << buf << std::flush;
        }
  std::ofstream summary(out / "sweep_summary.csv", std::ios::trunc);
  summary << "setting,N_t,cr,styling,mean_miou,std_miou,runs\n";
  log << "setting  N_t  cr   styling  miou (mean +- std)\n";
  for (const auto& c : summarize_sweep(rows)) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s,%d,%s,%s,%.6f,%.6f,%zu\n", c.setting.c_str(), c.n_t, c.cr ? "on" : "off",
                  c.styling.c_str(), c.mean, c.stddev, c.runs);
    summary << buf;
    std::snprintf(buf, sizeof buf, "%-8s %4d %-4s %-8s %.4f +- %.4f\n", c.setting.c_str(), c.n_t, c.cr ? "on" : "off",
                  c.styling.c_str(), c.mean, c.stddev);
    log << buf;
  }
  return rows;
}

}  // namespace ssda
