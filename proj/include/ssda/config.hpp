#pragma once

// Run configuration: every tunable of a training run as a flat key = value
// registry. Values are resolved in this order, later sources winning:
//   built-in defaults < config file < command-line flags
// The seed additionally falls back to the SSDA_SEED environment variable when
// neither the file nor the flags set it.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssda/data.hpp"
#include "ssda/error.hpp"
#include "ssda/losses.hpp"
#include "ssda/selftrain.hpp"

namespace ssda {

struct RunConfig {
  Setting setting = Setting::ssda;
  std::string dataset;  // generated dataset directory; empty renders one in memory from the gen_* keys
  GeneratorConfig generator;
  std::string gap = "large";  // large | zero
  int n_t = 8;
  std::uint64_t seed = 0;
  TrainOptions train;

  bool disable_cr = false;
  bool disable_pc = false;
  bool disable_class_weights = false;
  bool disable_batch_mix = false;
  std::string cr_variant = "auto";  // auto resolves to prob for uda, onehot otherwise
  std::string styling = "none";     // none | lab
  std::string pc_scope = "target";
  bool no_pl_drop = false;
  int log_every = 100;

  /// Applies the ablation switches and setting-dependent defaults to the
  /// training options.
  TrainOptions resolved_options() const {
    TrainOptions o = train;
    o.arch.num_classes = generator.num_classes;
    o.loss.enable_cr = !disable_cr;
    o.loss.enable_pc = !disable_pc;
    o.loss.class_weighting = !disable_class_weights;
    o.loss.batch_mix = !disable_batch_mix;
    o.loss.cr_variant = parse_cr_variant(resolved_cr_variant());
    o.loss.pc_scope = parse_pc_scope(pc_scope);
    o.loss.lab_styling = styling == "lab";
    o.plan.pl_drop = !no_pl_drop;
    return o;
  }

  std::string resolved_cr_variant() const {
    if (cr_variant != "auto") return cr_variant;
    return setting == Setting::uda ? "prob" : "onehot";
  }

  GeneratorConfig resolved_generator() const {
    GeneratorConfig g = generator;
    g.gap = gap == "zero" ? GapParams::zero() : GapParams::large();
    return g;
  }
};

namespace detail {

struct Field {
  std::string key;
  std::string help;
  bool flag = false;  // boolean switch
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    N out{};
    if constexpr (std::is_same_v<N, double>) {
      out = std::stod(v, &used);
    } else if constexpr (std::is_same_v<N, std::uint64_t>) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = std::stoull(v, &used);
    } else {
      out = static_cast<N>(std::stol(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': '" + v + "' is not a valid number");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "': '" + v + "' is not a boolean");
}

inline std::string choice(const std::string& key, const std::string& v, std::initializer_list<const char*> allowed) {
  for (const char* a : allowed) {
    if (v == a) return v;
  }
  std::string list;
  for (const char* a : allowed) list += (list.empty() ? "" : "|") + std::string(a);
  throw ConfigError("key '" + key + "': '" + v + "' not in " + list);
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::istringstream in(v);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(parse_number<int>(key, part));
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

template <class Get, class Set>
Field number_field(std::string key, std::string help, Get get, Set set) {
  return {key, std::move(help), false,
          [get](const RunConfig& c) {
            const auto v = get(c);
            if constexpr (std::is_floating_point_v<decltype(v)>) {
              return fmt_double(v);
            } else {
              return std::to_string(v);
            }
          },
          [key, set](RunConfig& c, const std::string& v) {
            using N = std::decay_t<decltype(std::declval<Get>()(c))>;
            set(c, parse_number<std::conditional_t<std::is_floating_point_v<N>, double,
                                                   std::conditional_t<std::is_same_v<N, std::uint64_t>, std::uint64_t, long>>>(key, v));
          }};
}

#define SSDA_NUM(key, help, member) \
  number_field(key, help, [](const RunConfig& c) { return c.member; }, [](RunConfig& c, auto v) { c.member = static_cast<decltype(c.member)>(v); })

#define SSDA_BOOL(key, help, member)                                                                            \
  Field{key, help, true, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); },        \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(key, v); }}

#define SSDA_CHOICE(key, help, member, ...)                                                        \
  Field{key, help, false, [](const RunConfig& c) { return c.member; },                          \
        [](RunConfig& c, const std::string& v) { c.member = choice(key, v, {__VA_ARGS__}); }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"setting", "ssda | uda | ssl", false, [](const RunConfig& c) { return to_string(c.setting); },
                 [](RunConfig& c, const std::string& v) { c.setting = parse_setting(v); }});
    f.push_back({"dataset", "generated dataset directory (empty: render in memory)", false,
                 [](const RunConfig& c) { return c.dataset; }, [](RunConfig& c, const std::string& v) { c.dataset = v; }});
    f.push_back(SSDA_NUM("n_t", "labelled target images", n_t));
    f.push_back(SSDA_NUM("seed", "split, initialization and sampling seed", seed));
    f.push_back(SSDA_NUM("gen_seed", "scene generator seed", generator.seed));
    f.push_back(SSDA_NUM("gen_n_source", "source images", generator.n_source));
    f.push_back(SSDA_NUM("gen_n_target", "target pool images", generator.n_target));
    f.push_back(SSDA_NUM("gen_n_val", "validation images", generator.n_val));
    f.push_back(SSDA_NUM("gen_size", "image side length", generator.size));
    f.push_back(SSDA_NUM("classes", "number of classes", generator.num_classes));
    f.push_back(SSDA_CHOICE("gap", "domain gap preset: large | zero", gap, "large", "zero"));
    f.push_back(SSDA_NUM("base_width", "backbone width", train.arch.base_width));
    f.push_back(SSDA_NUM("embed_dim", "projection embedding size", train.arch.embed_dim));
    f.push_back(SSDA_NUM("downsample", "backbone downsample factor", train.arch.downsample));
    f.push_back({"rates", "head dilation rates, comma separated", false,
                 [](const RunConfig& c) {
                   std::string s;
                   for (int r : c.train.arch.rates) s += (s.empty() ? "" : ",") + std::to_string(r);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) { c.train.arch.rates = parse_int_list("rates", v); }});
    f.push_back(SSDA_NUM("lambda_source", "source supervised weight", train.loss.lambda_source));
    f.push_back(SSDA_NUM("lambda_target", "target supervised weight", train.loss.lambda_target));
    f.push_back(SSDA_NUM("lambda_cr", "consistency weight", train.loss.lambda_cr));
    f.push_back(SSDA_NUM("lambda_pc", "pixel contrast weight", train.loss.lambda_pc));
    f.push_back(SSDA_NUM("temperature", "contrast temperature", train.loss.temperature));
    f.push_back(SSDA_NUM("n_pix", "contrast pixels per class", train.loss.n_pix));
    f.push_back(SSDA_NUM("pc_warmup_steps", "steps before the contrast term starts", train.loss.pc_warmup_steps));
    f.push_back(SSDA_NUM("p_jitter", "colour jitter probability", train.aug.p_jitter));
    f.push_back(SSDA_NUM("p_blur", "blur probability", train.aug.p_blur));
    f.push_back(SSDA_NUM("p_randaug", "RandAugment probability", train.aug.p_randaug));
    f.push_back(SSDA_NUM("p_cutmix", "CutMix probability", train.aug.p_cutmix));
    f.push_back(SSDA_NUM("jitter_brightness", "brightness jitter strength", train.aug.brightness));
    f.push_back(SSDA_NUM("jitter_contrast", "contrast jitter strength", train.aug.contrast));
    f.push_back(SSDA_NUM("jitter_saturation", "saturation jitter strength", train.aug.saturation));
    f.push_back(SSDA_NUM("jitter_hue", "hue jitter strength", train.aug.hue));
    f.push_back(SSDA_NUM("cutmix_area_min", "smallest CutMix area fraction", train.aug.cutmix_area.lo));
    f.push_back(SSDA_NUM("cutmix_area_max", "largest CutMix area fraction", train.aug.cutmix_area.hi));
    f.push_back(SSDA_NUM("rounds", "self-training rounds after round 0", train.plan.rounds));
    f.push_back(SSDA_NUM("n_steps", "optimizer steps per round", train.plan.n_steps));
    f.push_back(SSDA_NUM("n_drop", "step at which pseudolabels are dropped", train.plan.n_drop));
    f.push_back(SSDA_NUM("tau", "pseudolabel confidence threshold", train.plan.tau));
    f.push_back(SSDA_NUM("lr", "learning rate", train.plan.lr));
    f.push_back(SSDA_NUM("lr_decay_fraction", "fraction of a round after which lr is scaled", train.plan.lr_decay_fraction));
    f.push_back(SSDA_NUM("lr_decay_factor", "lr scale after the decay point", train.plan.lr_decay_factor));
    f.push_back(SSDA_NUM("clip_norm", "gradient clipping norm", train.plan.clip_norm));
    f.push_back(SSDA_NUM("batch_source", "source images per batch", train.batch.source));
    f.push_back(SSDA_NUM("batch_target", "labelled target images per batch", train.batch.target));
    f.push_back(SSDA_NUM("batch_unlabeled", "unlabelled images per batch", train.batch.unlabeled));
    f.push_back(SSDA_BOOL("disable_cr", "drop the consistency term", disable_cr));
    f.push_back(SSDA_BOOL("disable_pc", "drop the pixel contrast term", disable_pc));
    f.push_back(SSDA_BOOL("disable_class_weights", "unweighted cross-entropy", disable_class_weights));
    f.push_back(SSDA_BOOL("disable_batch_mix", "separate source/target forward passes", disable_batch_mix));
    f.push_back(SSDA_CHOICE("cr_variant", "auto | onehot | prob", cr_variant, "auto", "onehot", "prob"));
    f.push_back(SSDA_CHOICE("styling", "none | lab", styling, "none", "lab"));
    f.push_back(SSDA_CHOICE("pc_scope", "target | target+unlabeled | target+source", pc_scope, "target",
                            "target+unlabeled", "target+source"));
    f.push_back(SSDA_BOOL("no_pl_drop", "keep pseudolabels for the whole round", no_pl_drop));
    f.push_back(SSDA_NUM("log_every", "progress line interval in steps (0: silent)", log_every));
    return f;
  }();
  return all;
}

#undef SSDA_NUM
#undef SSDA_BOOL
#undef SSDA_CHOICE

}  // namespace detail

inline const std::vector<detail::Field>& config_fields() { return detail::fields(); }

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : detail::fields()) {
    if (f.key == key) return f.get(cfg);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Parses `key = value` lines; '#' starts a comment line. Returns the keys set.
inline std::set<std::string> apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  auto trim = [](const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++number;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    set_config_value(cfg, key, trim(line.substr(eq + 1)));
    seen.insert(key);
  }
  return seen;
}

inline std::set<std::string> apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_config_text(cfg, ss.str(), path);
}

/// Uses SSDA_SEED when the seed was not set explicitly.
inline void apply_seed_fallback(RunConfig& cfg, bool seed_given) {
  if (seed_given) return;
  if (const char* env = std::getenv("SSDA_SEED"); env && *env) set_config_value(cfg, "seed", env);
}

/// Every key with its resolved value (cr_variant materialized), one per line.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) {
    const std::string v = f.key == "cr_variant" ? cfg.resolved_cr_variant() : f.get(cfg);
    out += f.key + " = " + v + "\n";
  }
  return out;
}

/// Rejects contradictory combinations, naming the keys involved.
inline void validate_config(const RunConfig& cfg) {
  auto conflict = [](const std::string& keys, const std::string& why) {
    throw ConfigError("conflicting keys " + keys + ": " + why);
  };
  if (cfg.setting == Setting::uda && cfg.n_t != 0) conflict("setting, n_t", "uda uses no labelled target images (n_t = 0)");
  if (cfg.setting != Setting::uda && cfg.n_t < 1) {
    conflict("setting, n_t", to_string(cfg.setting) + " needs at least one labelled target image");
  }
  if (cfg.n_t > cfg.generator.n_target) conflict("n_t, gen_n_target", "more labelled images than the target pool");
  if (cfg.setting == Setting::ssl && cfg.styling == "lab") conflict("setting, styling", "ssl has no source images to style");
  if (cfg.setting == Setting::ssl && cfg.pc_scope == "target+source") {
    conflict("setting, pc_scope", "ssl has no source images to contrast");
  }
  if (cfg.setting == Setting::ssl && cfg.disable_batch_mix) {
    conflict("setting, disable_batch_mix", "ssl has no source batch to mix");
  }
  if (cfg.disable_cr && cfg.cr_variant != "auto") conflict("disable_cr, cr_variant", "variant given for a disabled term");
  if (cfg.disable_pc && cfg.pc_scope != "target") conflict("disable_pc, pc_scope", "scope given for a disabled term");
  if (cfg.train.plan.n_drop <= 0 || cfg.train.plan.n_drop >= cfg.train.plan.n_steps) {
    conflict("n_drop, n_steps", "n_drop must lie strictly between 0 and n_steps");
  }
  if (cfg.generator.size % cfg.train.arch.downsample != 0) {
    conflict("gen_size, downsample", "image size must be divisible by the downsample factor");
  }
  if (cfg.log_every < 0) conflict("log_every", "must be non-negative");
  const auto o = cfg.resolved_options();
  o.arch.validate();
  o.loss.validate();
  o.aug.validate();
  o.plan.validate();
  if (o.batch.source < 1 || o.batch.target < 1 || o.batch.unlabeled < 1) {
    conflict("batch_source, batch_target, batch_unlabeled", "batch sizes must be positive");
  }
}

}  // namespace ssda
