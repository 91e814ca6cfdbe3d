#pragma once

// Procedural two-domain segmentation benchmark, labeled/unlabeled splits,
// class statistics, the mixed-batch sampler and the on-disk dataset format.
//
// Scenes are a sky band over a ground band with layered primitives on top
// (rectangles, ellipses, bars, triangles, rings); each primitive type is one
// semantic class. The target domain renders the same scene distribution and
// then applies a domain gap: per-channel gamma, a colour affine shift, extra
// texture noise, and a skew of the primitive-type frequencies.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/image.hpp"
#include "ssda/rng.hpp"

namespace ssda {

enum class Setting { ssda, uda, ssl };

inline std::string to_string(Setting s) {
  switch (s) {
    case Setting::ssda: return "ssda";
    case Setting::uda: return "uda";
    case Setting::ssl: return "ssl";
  }
  return "?";
}

inline Setting parse_setting(const std::string& s) {
  if (s == "ssda") return Setting::ssda;
  if (s == "uda") return Setting::uda;
  if (s == "ssl") return Setting::ssl;
  throw ConfigError("unknown setting '" + s + "' (expected ssda|uda|ssl)");
}

enum class Role { source, target_labeled, target_unlabeled, target_pseudolabeled, target_pool, validation };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::source: return "source";
    case Role::target_labeled: return "target_labeled";
    case Role::target_unlabeled: return "target_unlabeled";
    case Role::target_pseudolabeled: return "target_pseudolabeled";
    case Role::target_pool: return "target_pool";
    case Role::validation: return "validation";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  for (Role r : {Role::source, Role::target_labeled, Role::target_unlabeled, Role::target_pseudolabeled,
                 Role::target_pool, Role::validation}) {
    if (to_string(r) == s) return r;
  }
  throw DataError("unknown role '" + s + "'");
}

struct LabeledImage {
  std::string id;
  Image image;
  std::optional<LabelMap> label;
};

struct SampleSet {
  Role role = Role::source;
  std::vector<LabeledImage> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

struct GapParams {
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> offset{0.0, 0.0, 0.0};
  std::array<double, 3> gamma{1.0, 1.0, 1.0};
  double noise = 0.0;      // added texture-noise standard deviation
  double freq_skew = 0.0;  // > 0 favours later primitive classes

  static GapParams zero() { return {}; }

  static GapParams large() {
    GapParams g;
    g.gain = {0.75, 1.05, 0.7};
    g.offset = {0.15, -0.05, 0.2};
    g.gamma = {1.5, 0.75, 1.3};
    g.noise = 0.06;
    g.freq_skew = 0.8;
    return g;
  }

  bool operator==(const GapParams&) const = default;
};

struct GeneratorConfig {
  std::uint64_t seed = 2024;
  int n_source = 400;
  int n_target = 400;
  int n_val = 100;
  int size = 32;
  int num_classes = 5;
  GapParams gap = GapParams::large();

  bool operator==(const GeneratorConfig&) const = default;
};

struct Benchmark {
  SampleSet source;
  SampleSet target_pool;
  SampleSet validation;
};

namespace detail {

constexpr double kBaseNoise = 0.02;

inline std::array<double, 3> class_color(int c) {
  static constexpr std::array<std::array<double, 3>, 7> palette{{
      {0.55, 0.70, 0.90},  // sky
      {0.45, 0.42, 0.38},  // ground
      {0.70, 0.45, 0.35},  // rectangle
      {0.30, 0.60, 0.30},  // ellipse
      {0.80, 0.80, 0.30},  // bar
      {0.80, 0.25, 0.25},  // triangle
      {0.45, 0.35, 0.75},  // ring
  }};
  if (c < 7) return palette[static_cast<std::size_t>(c)];
  Rng r(static_cast<std::uint64_t>(c) * 7919);
  return {r.uniform(0.2, 0.9), r.uniform(0.2, 0.9), r.uniform(0.2, 0.9)};
}

// Primitive shape for object classes (c >= 2), cycling for large C.
inline int shape_kind(int c) { return (c - 2) % 5; }

struct Canvas {
  Image image;
  LabelMap label;
};

inline void paint(Canvas& cv, int y, int x, int cls, const std::array<double, 3>& color, double texture) {
  if (y < 0 || x < 0 || y >= cv.image.height || x >= cv.image.width) return;
  for (int ch = 0; ch < 3; ++ch) cv.image.at(y, x, ch) = static_cast<float>(color[static_cast<std::size_t>(ch)] + texture);
  cv.label.at(y, x) = static_cast<std::uint8_t>(cls);
}

inline void draw_object(Canvas& cv, int cls, Rng& rng, const std::array<double, 3>& base) {
  const int size = cv.image.height;
  std::array<double, 3> color = base;
  for (auto& v : color) v += rng.normal(0.0, 0.06);
  const double phase = rng.uniform(0.0, 6.283);
  switch (shape_kind(cls)) {
    case 0: {  // rectangle with window stripes
      const int w = rng.integer(5, 14), h = rng.integer(5, 14);
      const int x0 = rng.integer(-2, size - w + 2), y0 = rng.integer(-2, size - h + 2);
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) paint(cv, y, x, cls, color, ((y - y0) % 3 == 1) ? -0.15 : 0.0);
      break;
    }
    case 1: {  // ellipse with blotchy texture
      const double ry = rng.uniform(3.0, 8.0), rx = rng.uniform(3.0, 8.0);
      const double cy = rng.uniform(0.0, size), cx = rng.uniform(0.0, size);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
          if (dy * dy + dx * dx <= 1.0) paint(cv, y, x, cls, color, 0.08 * std::sin(1.7 * x + phase) * std::cos(1.3 * y));
        }
      break;
    }
    case 2: {  // thin bar, mostly vertical
      const bool vertical = rng.bernoulli(0.75);
      const int thick = rng.integer(2, 3), len = rng.integer(10, 24);
      const int a0 = rng.integer(0, size - thick), b0 = rng.integer(-4, size - len + 4);
      for (int t = 0; t < thick; ++t)
        for (int l = 0; l < len; ++l) {
          if (vertical) paint(cv, b0 + l, a0 + t, cls, color, 0.0);
          else paint(cv, a0 + t, b0 + l, cls, color, 0.0);
        }
      break;
    }
    case 3: {  // upward triangle
      const int base_w = rng.integer(6, 14), h = rng.integer(5, 12);
      const int x0 = rng.integer(-2, size - base_w + 2), y0 = rng.integer(0, size - h);
      for (int y = 0; y < h; ++y) {
        const double half = 0.5 * base_w * (y + 1) / h;
        const double mid = x0 + 0.5 * base_w;
        for (int x = static_cast<int>(std::floor(mid - half)); x < static_cast<int>(std::ceil(mid + half)); ++x)
          paint(cv, y0 + y, x, cls, color, 0.05 * ((x + y) % 2));
      }
      break;
    }
    default: {  // ring
      const double r = rng.uniform(4.0, 8.0), cy = rng.uniform(0.0, size), cx = rng.uniform(0.0, size);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
          if (d <= r && d >= r - 2.2) paint(cv, y, x, cls, color, 0.0);
        }
      break;
    }
  }
}

/// One scene. `gap` is applied after rendering; a zero gap leaves the
/// rendering untouched, so both domains share one distribution.
inline std::pair<Image, LabelMap> render_scene(Rng& rng, int size, int num_classes, const GapParams& gap) {
  Canvas cv{Image(size, size), LabelMap(size, size)};
  const double horizon = rng.uniform(0.35, 0.65) * size;
  const double tilt = rng.uniform(-0.15, 0.15);
  auto sky = class_color(0), ground = class_color(1);
  for (auto& v : sky) v += rng.normal(0.0, 0.05);
  for (auto& v : ground) v += rng.normal(0.0, 0.05);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool above = y + 0.5 < horizon + tilt * (x - 0.5 * size);
      if (above || num_classes < 2) paint(cv, y, x, 0, sky, 0.12 * (1.0 - y / double(size)));
      else paint(cv, y, x, 1, ground, 0.05 * rng.normal());
    }

  if (num_classes > 2) {
    // Object-class frequencies: uniform in the source, tilted by freq_skew.
    std::vector<double> weights;
    for (int c = 2; c < num_classes; ++c) {
      const double pos = num_classes > 3 ? (c - 2) / double(num_classes - 3) - 0.5 : 0.0;
      weights.push_back(std::exp(gap.freq_skew * 2.0 * pos));
    }
    double total = 0.0;
    for (double w : weights) total += w;
    const int objects = rng.integer(3, 6);
    for (int i = 0; i < objects; ++i) {
      double u = rng.uniform() * total;
      int cls = 2;
      for (std::size_t k = 0; k < weights.size(); ++k) {
        if (u < weights[k]) {
          cls = 2 + static_cast<int>(k);
          break;
        }
        u -= weights[k];
        cls = 2 + static_cast<int>(k);
      }
      draw_object(cv, cls, rng, class_color(cls));
    }
  }

  const double illumination = rng.uniform(0.85, 1.15);
  const double noise = kBaseNoise + gap.noise;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const auto c = static_cast<std::size_t>(ch);
        double v = std::clamp(cv.image.at(y, x, ch) * illumination + rng.normal(0.0, noise), 0.0, 1.0);
        v = gap.gain[c] * std::pow(v, gap.gamma[c]) + gap.offset[c];
        cv.image.at(y, x, ch) = quantize8(static_cast<float>(v));
      }
  return {std::move(cv.image), std::move(cv.label)};
}

inline std::string item_id(char prefix, int index) {
  std::ostringstream s;
  s << prefix;
  s.width(5);
  s.fill('0');
  s << index;
  return s.str();
}

inline SampleSet render_set(Role role, char prefix, std::uint64_t stream, std::uint64_t seed, int count, int size,
                            int num_classes, const GapParams& gap) {
  SampleSet set{role, {}};
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(mix_seed(seed, stream), static_cast<std::uint64_t>(i)));
    auto [img, lab] = render_scene(rng, size, num_classes, gap);
    set.items.push_back({item_id(prefix, i), std::move(img), std::move(lab)});
  }
  return set;
}

}  // namespace detail

/// Source set and target pool. Deterministic in all arguments; each image is
/// rendered from its own stream so counts do not perturb earlier items.
inline std::pair<SampleSet, SampleSet> generate_domains(std::uint64_t seed, int n_source, int n_target, int size,
                                                        int num_classes, const GapParams& gap) {
  if (num_classes < 2) throw ConfigError("generate_domains: need at least 2 classes");
  if (size < 4 || n_source < 0 || n_target < 0) throw ConfigError("generate_domains: invalid size or counts");
  return {detail::render_set(Role::source, 's', 0, seed, n_source, size, num_classes, GapParams::zero()),
          detail::render_set(Role::target_pool, 't', 1, seed, n_target, size, num_classes, gap)};
}

inline Benchmark generate_benchmark(const GeneratorConfig& cfg) {
  auto [source, pool] = generate_domains(cfg.seed, cfg.n_source, cfg.n_target, cfg.size, cfg.num_classes, cfg.gap);
  return {std::move(source), std::move(pool),
          detail::render_set(Role::validation, 'v', 2, cfg.seed, cfg.n_val, cfg.size, cfg.num_classes, cfg.gap)};
}

/// Uniformly random labeled subset of size n_labeled; the rest lose their
/// labels. Both outputs keep pool order.
inline std::pair<SampleSet, SampleSet> split_target(const SampleSet& pool, int n_labeled, std::uint64_t seed) {
  if (n_labeled < 0 || static_cast<std::size_t>(n_labeled) > pool.size()) {
    throw ArgumentError("split_target: N_t=" + std::to_string(n_labeled) + " outside [0," +
                        std::to_string(pool.size()) + "]");
  }
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5e1ec7));
  rng.shuffle(order);
  std::vector<bool> labeled(pool.size(), false);
  for (int i = 0; i < n_labeled; ++i) labeled[order[static_cast<std::size_t>(i)]] = true;
  SampleSet dt{Role::target_labeled, {}}, du{Role::target_unlabeled, {}};
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (labeled[i]) {
      dt.items.push_back(pool.items[i]);
    } else {
      du.items.push_back({pool.items[i].id, pool.items[i].image, std::nullopt});
    }
  }
  return {std::move(dt), std::move(du)};
}

/// Fraction of non-ignored pixels per class.
inline std::vector<double> class_frequencies(const SampleSet& set, int num_classes) {
  std::vector<double> counts(static_cast<std::size_t>(num_classes), 0.0);
  double total = 0.0;
  for (const auto& item : set.items) {
    if (!item.label) continue;
    for (std::uint8_t v : item.label->values) {
      if (v == kIgnoreLabel) continue;
      if (v >= num_classes) throw DataError("label " + std::to_string(v) + " in " + item.id + " >= C");
      counts[v] += 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) throw EmptySetError("class_frequencies: no labeled pixels");
  for (auto& c : counts) c /= total;
  return counts;
}

struct BatchSizes {
  int source = 2;
  int target = 2;
  int unlabeled = 2;
};

struct Batch {
  std::vector<LabeledImage> source;
  std::vector<LabeledImage> target_labeled;
  std::vector<LabeledImage> unlabeled;
};

/// Draws mixed batches. Each set is visited through its own shuffled cursor
/// that reshuffles at the end of every pass, so items are sampled uniformly
/// across epoch boundaries. Every drawn item is flipped horizontally with
/// probability 0.5. Images already match the crop size, so cropping is the
/// identity here.
class BatchSampler {
 public:
  BatchSampler(Setting setting, const SampleSet* source, const SampleSet* target_labeled, const SampleSet* unlabeled,
               BatchSizes sizes, std::uint64_t seed)
      : setting_(setting), sizes_(sizes), flip_rng_(mix_seed(seed, 99)) {
    auto nonempty = [](const SampleSet* s) { return s != nullptr && !s->empty(); };
    const bool need_source = setting != Setting::ssl;
    const bool need_target = setting != Setting::uda;
    if ((need_source && !nonempty(source)) || (need_target && !nonempty(target_labeled)) || !nonempty(unlabeled)) {
      throw ConfigError("batch sampler: setting '" + to_string(setting) + "' requires non-empty " +
                        (need_source ? "source, " : "") + (need_target ? "target-labeled, " : "") + "unlabeled sets");
    }
    if (need_source) source_ = Cursor(source, mix_seed(seed, 1));
    if (nonempty(target_labeled)) target_ = Cursor(target_labeled, mix_seed(seed, 2));
    unlabeled_ = Cursor(unlabeled, mix_seed(seed, 3));
  }

  /// Replaces the labeled-target stream (pseudolabel drop). In UDA the stream
  /// may become empty.
  void set_target_labeled(const SampleSet* target_labeled, std::uint64_t seed) {
    if (target_labeled == nullptr || target_labeled->empty()) {
      if (setting_ != Setting::uda) throw ConfigError("batch sampler: labeled-target stream cannot be empty");
      target_.reset();
      return;
    }
    target_ = Cursor(target_labeled, seed);
  }

  Batch next() {
    Batch batch;
    if (source_) draw(*source_, sizes_.source, batch.source);
    if (target_) draw(*target_, sizes_.target, batch.target_labeled);
    draw(*unlabeled_, sizes_.unlabeled, batch.unlabeled);
    return batch;
  }

 private:
  struct Cursor {
    const SampleSet* set = nullptr;
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    Rng rng;

    Cursor(const SampleSet* s, std::uint64_t seed) : set(s), order(s->size()), rng(seed) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
    }

    const LabeledImage& take() {
      if (pos == order.size()) {
        rng.shuffle(order);
        pos = 0;
      }
      return set->items[order[pos++]];
    }
  };

  void draw(Cursor& cursor, int count, std::vector<LabeledImage>& out) {
    for (int i = 0; i < count; ++i) {
      LabeledImage item = cursor.take();
      if (flip_rng_.bernoulli(0.5)) {
        item.image = flip_horizontal(item.image);
        if (item.label) item.label = flip_horizontal(*item.label);
      }
      out.push_back(std::move(item));
    }
  }

  Setting setting_;
  BatchSizes sizes_;
  Rng flip_rng_;
  std::optional<Cursor> source_, target_, unlabeled_;
};

// On-disk layout:
//   images/<id>.ppm   labels/<id>.pgm   manifest.txt ("<id> <role>")   meta.txt (key=value)

inline std::map<std::string, std::string> generator_meta(const GeneratorConfig& cfg) {
  std::map<std::string, std::string> kv;
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  auto triple = [&](const std::array<double, 3>& a) { return num(a[0]) + "," + num(a[1]) + "," + num(a[2]); };
  kv["classes"] = std::to_string(cfg.num_classes);
  kv["size"] = std::to_string(cfg.size);
  kv["seed"] = std::to_string(cfg.seed);
  kv["n_source"] = std::to_string(cfg.n_source);
  kv["n_target"] = std::to_string(cfg.n_target);
  kv["n_val"] = std::to_string(cfg.n_val);
  kv["gap.gain"] = triple(cfg.gap.gain);
  kv["gap.offset"] = triple(cfg.gap.offset);
  kv["gap.gamma"] = triple(cfg.gap.gamma);
  kv["gap.noise"] = num(cfg.gap.noise);
  kv["gap.freq_skew"] = num(cfg.gap.freq_skew);
  return kv;
}

inline std::array<double, 3> parse_triple(const std::string& key, const std::string& value) {
  std::array<double, 3> out{};
  std::istringstream in(value);
  std::string part;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!std::getline(in, part, ',')) throw ConfigError(key + ": expected three comma-separated numbers");
    try {
      out[i] = std::stod(part);
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + part + "' is not a number");
    }
  }
  return out;
}

inline GeneratorConfig generator_from_meta(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError("meta.txt missing key '" + k + "'");
    return it->second;
  };
  GeneratorConfig cfg;
  cfg.num_classes = std::stoi(get("classes"));
  cfg.size = std::stoi(get("size"));
  cfg.seed = std::stoull(get("seed"));
  cfg.n_source = std::stoi(get("n_source"));
  cfg.n_target = std::stoi(get("n_target"));
  cfg.n_val = std::stoi(get("n_val"));
  cfg.gap.gain = parse_triple("gap.gain", get("gap.gain"));
  cfg.gap.offset = parse_triple("gap.offset", get("gap.offset"));
  cfg.gap.gamma = parse_triple("gap.gamma", get("gap.gamma"));
  cfg.gap.noise = std::stod(get("gap.noise"));
  cfg.gap.freq_skew = std::stod(get("gap.freq_skew"));
  return cfg;
}

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ": expected key=value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline void write_dataset(const std::filesystem::path& dir, const Benchmark& bench, const GeneratorConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  for (const SampleSet* set : {&bench.source, &bench.target_pool, &bench.validation}) {
    for (const auto& item : set->items) {
      write_ppm((dir / "images" / (item.id + ".ppm")).string(), item.image);
      if (item.label) write_pgm((dir / "labels" / (item.id + ".pgm")).string(), *item.label);
      manifest << item.id << ' ' << to_string(set->role) << '\n';
    }
  }
  std::ofstream meta(dir / "meta.txt", std::ios::trunc);
  for (const auto& [k, v] : generator_meta(cfg)) meta << k << '=' << v << '\n';
  if (!manifest || !meta) throw DataError("failed writing dataset to " + dir.string());
}

struct StoredDataset {
  Benchmark bench;
  GeneratorConfig meta;
};

inline StoredDataset read_dataset(const std::filesystem::path& dir) {
  StoredDataset out;
  out.meta = generator_from_meta(read_kv_file((dir / "meta.txt").string()));
  out.bench.source.role = Role::source;
  out.bench.target_pool.role = Role::target_pool;
  out.bench.validation.role = Role::validation;
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("cannot read " + (dir / "manifest.txt").string());
  std::string id, role;
  while (manifest >> id >> role) {
    LabeledImage item{id, read_ppm((dir / "images" / (id + ".ppm")).string()), std::nullopt};
    const auto label_path = dir / "labels" / (id + ".pgm");
    if (std::filesystem::exists(label_path)) item.label = read_pgm(label_path.string());
    switch (parse_role(role)) {
      case Role::source: out.bench.source.items.push_back(std::move(item)); break;
      case Role::target_pool: out.bench.target_pool.items.push_back(std::move(item)); break;
      case Role::validation: out.bench.validation.items.push_back(std::move(item)); break;
      default: throw DataError("manifest role '" + role + "' not valid in a generated dataset");
    }
  }
  return out;
}

}  // namespace ssda
