#pragma once

// Round-based training: each round trains a fresh student/teacher pair. Rounds
// after the first add confident pseudolabels of the unlabelled pool, produced
// by the previous round's model, to the labelled-target stream until the drop
// step. The last two rounds form a softmax-averaging ensemble.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssda/augment.hpp"
#include "ssda/checkpoint.hpp"
#include "ssda/data.hpp"
#include "ssda/error.hpp"
#include "ssda/eval.hpp"
#include "ssda/losses.hpp"
#include "ssda/model.hpp"
#include "ssda/params.hpp"

namespace ssda {

struct SelfTrainPlan {
  int rounds = 2;  // self-training rounds after round 0
  int n_steps = 2000;
  int n_drop = 1000;
  double tau = 0.9;
  double lr = 1e-3;
  double lr_decay_fraction = 0.75;
  double lr_decay_factor = 0.1;
  double clip_norm = 10.0;
  bool pl_drop = true;  // false keeps pseudolabels for the whole round

  void validate() const {
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
    if (!(n_drop > 0 && n_drop < n_steps)) throw ConfigError("n_drop must lie in (0, n_steps)");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  }

  int decay_step() const { return static_cast<int>(std::ceil(lr_decay_fraction * n_steps)); }
  double lr_at(int step) const { return step < decay_step() ? lr : lr * lr_decay_factor; }
};

/// Probabilities [N, C, H, W] for a list of images, evaluated in chunks.
template <class T>
std::vector<T> predict_probs(const ParamSet<T>& model, const TinySegConfig& arch, const std::vector<const Image*>& images,
                             std::size_t chunk = 25) {
  std::vector<T> out;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t stop = std::min(images.size(), start + chunk);
    std::vector<const Image*> part(images.begin() + static_cast<long>(start), images.begin() + static_cast<long>(stop));
    const auto logits = forward_seg(model, arch, to_tensor<T>(std::span<const Image* const>(part)), Mode::eval);
    const std::size_t plane = logits.dim(2) * logits.dim(3);
    const auto probs = detail::pixel_softmax<T>(logits.data(), part.size(), logits.dim(1), plane);
    out.insert(out.end(), probs.begin(), probs.end());
  }
  return out;
}

/// Argmax of the mean softmax over `models` (a single model is its own
/// ensemble). All models must share the architecture.
template <class T>
std::vector<LabelMap> ensemble_predict(const std::vector<const ParamSet<T>*>& models, const TinySegConfig& arch,
                                       const std::vector<const Image*>& images) {
  if (models.empty()) throw ConfigError("ensemble_predict: no models");
  for (const auto* m : models) check_compatible(*models.front(), *m);
  std::vector<T> mean;
  for (const auto* m : models) {
    auto p = predict_probs(*m, arch, images);
    if (mean.empty()) {
      mean = std::move(p);
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
    }
  }
  const std::size_t classes = static_cast<std::size_t>(arch.num_classes);
  std::vector<LabelMap> out;
  if (images.empty()) return out;
  const std::size_t plane = images[0]->pixels();
  const auto labels = argmax_classes(std::span<const T>(mean), images.size(), classes, plane);
  for (std::size_t b = 0; b < images.size(); ++b) {
    LabelMap m(images[b]->height, images[b]->width);
    std::copy(labels.begin() + static_cast<long>(b * plane), labels.begin() + static_cast<long>((b + 1) * plane),
              m.values.begin());
    out.push_back(std::move(m));
  }
  return out;
}

template <class T>
ConfusionMatrix evaluate(const std::vector<const ParamSet<T>*>& models, const TinySegConfig& arch, const SampleSet& set) {
  std::vector<const Image*> images;
  for (const auto& item : set.items) {
    if (!item.label) throw ConfigError("evaluate: item '" + item.id + "' has no label");
    images.push_back(&item.image);
  }
  const auto preds = ensemble_predict(models, arch, images);
  ConfusionMatrix cm(arch.num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) accumulate(cm, preds[i], *set.items[i].label);
  return cm;
}

template <class T>
IouReport evaluate_iou(const std::vector<const ParamSet<T>*>& models, const TinySegConfig& arch, const SampleSet& set) {
  return iou(evaluate(models, arch, set));
}

struct PseudoLabelSet {
  SampleSet set{Role::target_pseudolabeled, {}};
  std::vector<double> coverage;  // labelled fraction per image
  std::uint64_t producer = 0;    // content hash of the producing checkpoint
  double tau = 0.0;

  double mean_coverage() const {
    if (coverage.empty()) return 0.0;
    double s = 0.0;
    for (double c : coverage) s += c;
    return s / static_cast<double>(coverage.size());
  }
};

/// Argmax class where the maximum softmax is at least tau, ignore elsewhere.
template <class T>
PseudoLabelSet generate_pseudolabels(const ParamSet<T>& model, const TinySegConfig& arch, const SampleSet& unlabeled,
                                     double tau, std::uint64_t producer = 0) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("generate_pseudolabels: tau must lie in (0, 1]");
  PseudoLabelSet pl;
  pl.producer = producer;
  pl.tau = tau;
  std::vector<const Image*> images;
  for (const auto& item : unlabeled.items) images.push_back(&item.image);
  const auto probs = predict_probs(model, arch, images);
  const auto classes = static_cast<std::size_t>(arch.num_classes);
  std::size_t offset = 0;
  for (const auto& item : unlabeled.items) {
    const std::size_t plane = item.image.pixels();
    LabelMap map(item.image.height, item.image.width, kIgnoreLabel);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      T best_p = probs[offset + i];
      for (std::size_t c = 1; c < classes; ++c) {
        const T p = probs[offset + c * plane + i];
        if (p > best_p) best = c, best_p = p;
      }
      if (double(best_p) >= tau) {
        map.values[i] = static_cast<std::uint8_t>(best);
        ++kept;
      }
    }
    offset += classes * plane;
    pl.coverage.push_back(plane ? static_cast<double>(kept) / static_cast<double>(plane) : 0.0);
    pl.set.items.push_back({item.id, item.image, std::move(map)});
  }
  return pl;
}

inline void write_pseudolabels(const std::filesystem::path& dir, const PseudoLabelSet& pl) {
  std::filesystem::create_directories(dir);
  std::ofstream cov(dir / "coverage.txt", std::ios::trunc);
  char buf[96];
  std::snprintf(buf, sizeof buf, "# producer=%016llx tau=%.6f\n", static_cast<unsigned long long>(pl.producer), pl.tau);
  cov << buf;
  for (std::size_t i = 0; i < pl.set.items.size(); ++i) {
    const auto& item = pl.set.items[i];
    write_pgm((dir / (item.id + ".pgm")).string(), *item.label);
    std::snprintf(buf, sizeof buf, " %.6f\n", pl.coverage[i]);
    cov << item.id << buf;
  }
  if (!cov) throw DataError("cannot write " + (dir / "coverage.txt").string());
}

/// Labelled-target stream with pseudolabels: ground-truth items first,
/// then pseudolabelled unlabelled items. Ground truth is never replaced.
inline SampleSet merge_target(const SampleSet& target_labeled, const PseudoLabelSet* pl) {
  SampleSet merged{Role::target_pseudolabeled, target_labeled.items};
  if (pl) merged.items.insert(merged.items.end(), pl->set.items.begin(), pl->set.items.end());
  return merged;
}

struct StepMetrics {
  int round = 0;
  int step = 0;
  double lr = 0.0;
  LossTerms terms;
  double grad_norm = 0.0;
  double mu = 0.0;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

struct TrainSets {
  Setting setting = Setting::ssda;
  const SampleSet* source = nullptr;
  const SampleSet* target_labeled = nullptr;
  const SampleSet* unlabeled = nullptr;
};

struct TrainOptions {
  TinySegConfig arch;
  LossConfig loss;
  AugConfig aug;
  SelfTrainPlan plan;
  BatchSizes batch;
};

namespace detail {

inline std::vector<double> weights_or_uniform(const SampleSet* set, int classes, bool enabled) {
  if (!enabled || set == nullptr || set->empty()) return {};
  try {
    return class_weights(class_frequencies(*set, classes));
  } catch (const EmptySetError&) {
    return {};
  }
}

}  // namespace detail

/// Trains round k from a fresh initialization. `pl` holds the pseudolabels
/// from the previous round (nullptr in round 0). Returns the final pair.
template <class T>
ModelPair<T> run_round(int k, const TrainSets& sets, const TrainOptions& opt, std::uint64_t seed,
                       const PseudoLabelSet* pl, const MetricsSink& sink = {}) {
  opt.plan.validate();
  opt.loss.validate();
  opt.aug.validate();
  if (k > 0 && pl == nullptr) throw StateError("round " + std::to_string(k) + " requires pseudolabels from round " +
                                               std::to_string(k - 1));
  const std::uint64_t round_seed = mix_seed(seed, static_cast<std::uint64_t>(k));
  ModelPair<T> pair = ModelPair<T>::from_student(build<T>(opt.arch, mix_seed(round_seed, 1)));

  const SampleSet empty_target{Role::target_labeled, {}};
  const SampleSet& gt_target = sets.target_labeled ? *sets.target_labeled : empty_target;
  const SampleSet with_pl = merge_target(gt_target, pl);
  const SampleSet* stream = pl ? &with_pl : &gt_target;

  LossConfig loss = opt.loss;
  const int classes = opt.arch.num_classes;
  loss.alpha_source = sets.setting == Setting::ssl ? std::vector<double>{}
                                                   : detail::weights_or_uniform(sets.source, classes, loss.class_weighting);
  loss.alpha_target = detail::weights_or_uniform(stream, classes, loss.class_weighting);

  BatchSampler sampler(sets.setting, sets.setting == Setting::ssl ? nullptr : sets.source, stream, sets.unlabeled,
                       opt.batch, mix_seed(round_seed, 2));
  Rng rng(mix_seed(round_seed, 3));
  for (int step = 0; step < opt.plan.n_steps; ++step) {
    if (pl && opt.plan.pl_drop && step == opt.plan.n_drop) {
      stream = &gt_target;
      sampler.set_target_labeled(stream, mix_seed(round_seed, 4));
      loss.alpha_target = detail::weights_or_uniform(stream, classes, loss.class_weighting);
    }
    const double lr = opt.plan.lr_at(step);
    const Batch batch = sampler.next();
    pair.student.zero_grad();
    const StepLoss<T> objective =
        total_loss<T>({static_cast<std::uint64_t>(step), sets.setting}, batch, pair, opt.arch, loss, opt.aug, rng);
    if (!std::isfinite(objective.terms.total)) {
      throw NumericError("non-finite loss at round " + std::to_string(k) + " step " + std::to_string(step));
    }
    backward(objective.total);
    const double norm = clip_grad_total_norm(pair.student, opt.plan.clip_norm);
    sgd_nesterov_step(pair.student, SgdOptions{lr, 0.9, 5e-4});
    const double mu = mu_schedule(pair.step, pair.mu_cap);
    ema_update(pair);
    if (sink) sink({k, step, lr, objective.terms, norm, mu});
  }
  return pair;
}

/// Persistence hooks for rounds; all optional.
struct RoundStore {
  std::filesystem::path dir;  // empty: keep everything in memory

  std::filesystem::path checkpoint(int k) const { return dir / ("round" + std::to_string(k) + ".ckpt"); }
  std::filesystem::path pseudolabels(int k) const { return dir / ("pl_round" + std::to_string(k)); }
};

template <class T>
struct AlgorithmResult {
  std::vector<ModelPair<T>> rounds;  // one per round, round 0 first
  std::vector<double> coverage;      // mean pseudolabel coverage consumed by round k (0 for round 0)

  const ParamSet<T>& previous() const { return rounds[rounds.size() >= 2 ? rounds.size() - 2 : 0].student; }
  const ParamSet<T>& last() const { return rounds.back().student; }
};

/// Round 0 followed by plan.rounds self-training rounds. With a store, each
/// completed round is checkpointed and an interrupted run resumes after the
/// last checkpoint present. `on_round` is called after every round.
template <class T>
AlgorithmResult<T> run_algorithm(const TrainSets& sets, const TrainOptions& opt, std::uint64_t seed,
                                 const RoundStore& store = {}, const MetricsSink& sink = {},
                                 const std::function<void(int, const ModelPair<T>&)>& on_round = {}) {
  opt.plan.validate();
  AlgorithmResult<T> result;
  std::optional<PseudoLabelSet> pl;
  std::uint64_t previous_hash = 0;
  for (int k = 0; k <= opt.plan.rounds; ++k) {
    if (pl && pl->producer != previous_hash) {
      throw IntegrityError("pseudolabels for round " + std::to_string(k) + " were not produced by round " +
                           std::to_string(k - 1));
    }
    ModelPair<T> pair;
    const bool persisted = !store.dir.empty();
    if (persisted && std::filesystem::exists(store.checkpoint(k))) {
      pair = load_checkpoint<T>(store.checkpoint(k).string());
    } else {
      pair = run_round<T>(k, sets, opt, seed, pl ? &*pl : nullptr, sink);
      if (persisted) save_checkpoint(pair, store.checkpoint(k).string());
    }
    result.coverage.push_back(pl ? pl->mean_coverage() : 0.0);
    if (on_round) on_round(k, pair);
    if (k < opt.plan.rounds) {
      previous_hash = content_hash(encode_checkpoint(pair));
      if (sets.unlabeled == nullptr) throw ConfigError("self-training needs an unlabelled set");
      pl = generate_pseudolabels(pair.student, opt.arch, *sets.unlabeled, opt.plan.tau, previous_hash);
      if (persisted) write_pseudolabels(store.pseudolabels(k + 1), *pl);
    }
    result.rounds.push_back(std::move(pair));
  }
  return result;
}

}  // namespace ssda
