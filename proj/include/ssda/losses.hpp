#pragma once

// Training objectives: class-weighted cross-entropy, consistency against a
// teacher (hard or soft targets), supervised pixel contrast over sampled
// embeddings, and the combined per-step objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ssda/augment.hpp"
#include "ssda/data.hpp"
#include "ssda/error.hpp"
#include "ssda/image.hpp"
#include "ssda/model.hpp"
#include "ssda/ops.hpp"
#include "ssda/rng.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

enum class CrVariant { onehot, prob };
enum class PcScope { target, target_unlabeled, target_source };

inline std::string to_string(CrVariant v) { return v == CrVariant::onehot ? "onehot" : "prob"; }
inline std::string to_string(PcScope s) {
  switch (s) {
    case PcScope::target: return "target";
    case PcScope::target_unlabeled: return "target+unlabeled";
    case PcScope::target_source: return "target+source";
  }
  return "?";
}

inline CrVariant parse_cr_variant(const std::string& s) {
  if (s == "onehot") return CrVariant::onehot;
  if (s == "prob") return CrVariant::prob;
  throw ConfigError("unknown cr_variant '" + s + "' (expected onehot|prob)");
}

inline PcScope parse_pc_scope(const std::string& s) {
  if (s == "target") return PcScope::target;
  if (s == "target+unlabeled") return PcScope::target_unlabeled;
  if (s == "target+source") return PcScope::target_source;
  throw ConfigError("unknown pc_scope '" + s + "' (expected target|target+unlabeled|target+source)");
}

struct LossConfig {
  double lambda_source = 1.0;
  double lambda_target = 1.0;
  double lambda_cr = 1.0;
  double lambda_pc = 0.2;
  double temperature = 0.1;
  int n_pix = 50;
  int pc_warmup_steps = 1000;
  std::uint8_t ignore_index = kIgnoreLabel;
  std::vector<double> alpha_source;  // empty means all ones
  std::vector<double> alpha_target;

  bool enable_cr = true;
  bool enable_pc = true;
  bool class_weighting = true;
  bool batch_mix = true;
  CrVariant cr_variant = CrVariant::onehot;
  PcScope pc_scope = PcScope::target;
  bool lab_styling = false;

  void validate() const {
    for (double l : {lambda_source, lambda_target, lambda_cr, lambda_pc}) {
      if (l < 0.0) throw ConfigError("loss weights must be non-negative");
    }
    if (!(temperature > 0.0)) throw ConfigError("contrast temperature must be positive");
    if (n_pix < 2) throw ConfigError("n_pix must be at least 2");
    if (pc_warmup_steps < 0) throw ConfigError("pc_warmup_steps must be non-negative");
  }
};

/// alpha_c = sqrt(median(f_present) / f_c); absent classes get the largest
/// present weight.
inline std::vector<double> class_weights(const std::vector<double>& freq) {
  std::vector<double> present;
  for (double f : freq) {
    if (f > 0.0) present.push_back(f);
  }
  if (present.empty()) throw EmptySetError("class_weights: no class has non-zero frequency");
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  const double median = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
  std::vector<double> alpha(freq.size(), 0.0);
  double largest = 0.0;
  for (std::size_t c = 0; c < freq.size(); ++c) {
    if (freq[c] > 0.0) {
      alpha[c] = std::sqrt(median / freq[c]);
      largest = std::max(largest, alpha[c]);
    }
  }
  for (std::size_t c = 0; c < freq.size(); ++c) {
    if (freq[c] <= 0.0) alpha[c] = largest;
  }
  return alpha;
}

/// Flattened [B, H, W] label maps.
inline std::vector<std::uint8_t> stack_labels(const std::vector<const LabelMap*>& maps) {
  std::vector<std::uint8_t> out;
  for (const LabelMap* m : maps) out.insert(out.end(), m->values.begin(), m->values.end());
  return out;
}

namespace detail {

template <class T>
void check_logits(const Tensor<T>& logits, std::size_t label_count, const char* op) {
  if (logits.rank() != 4 || logits.numel() / logits.dim(1) != label_count) {
    throw ConfigError(std::string(op) + ": logits " + shape_string(logits.shape()) + " do not match " +
                      std::to_string(label_count) + " label pixels");
  }
}

/// Per-pixel softmax of [B, C, H, W] logits into a plain buffer of the same layout.
template <class T>
std::vector<T> pixel_softmax(std::span<const T> z, std::size_t batch, std::size_t classes, std::size_t plane) {
  std::vector<T> p(z.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * classes * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = z[base + i];
      for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[base + c * plane + i]);
      T total = 0;
      for (std::size_t c = 0; c < classes; ++c) {
        const T e = std::exp(z[base + c * plane + i] - mx);
        p[base + c * plane + i] = e;
        total += e;
      }
      for (std::size_t c = 0; c < classes; ++c) p[base + c * plane + i] /= total;
    }
  }
  return p;
}

}  // namespace detail

/// Mean over non-ignored pixels of -alpha_y log softmax(z)_y. Returns an
/// exact zero when every pixel is ignored.
template <class T>
Tensor<T> weighted_ce(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels,
                      const std::vector<double>& alpha, std::uint8_t ignore = kIgnoreLabel) {
  detail::check_logits(logits, labels.size(), "weighted_ce");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  if (!alpha.empty() && alpha.size() != classes) throw ConfigError("weighted_ce: class weight count != C");
  auto weight = [&](std::size_t c) { return alpha.empty() ? T(1) : static_cast<T>(alpha[c]); };
  std::size_t valid = 0;
  for (std::uint8_t y : labels) {
    if (y == ignore) continue;
    if (y >= classes) throw DataError("weighted_ce: label " + std::to_string(y) + " >= C=" + std::to_string(classes));
    ++valid;
  }
  auto probs = detail::pixel_softmax<T>(logits.data(), batch, classes, plane);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t y = labels[b * plane + i];
      if (y == ignore) continue;
      const std::size_t at = (b * classes + y) * plane + i;
      const T logp = [&] {
        // log-softmax evaluated directly from logits for accuracy at large margins
        T mx = logits[b * classes * plane + i];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, logits[(b * classes + c) * plane + i]);
        T s = 0;
        for (std::size_t c = 0; c < classes; ++c) s += std::exp(logits[(b * classes + c) * plane + i] - mx);
        return logits[at] - mx - std::log(s);
      }();
      total -= double(weight(y)) * double(logp);
    }
  const T norm = valid ? T(1) / static_cast<T>(valid) : T(0);
  return detail::make_op<T>({1}, {static_cast<T>(total) * norm}, {logits},
                            [logits, labels, probs = std::move(probs), alpha, ignore, batch, classes, plane,
                             norm](const Node<T>& self) {
                              T* g = detail::grad_of(logits);
                              const T up = self.grad[0] * norm;
                              for (std::size_t b = 0; b < batch; ++b)
                                for (std::size_t i = 0; i < plane; ++i) {
                                  const std::uint8_t y = labels[b * plane + i];
                                  if (y == ignore) continue;
                                  const T w = alpha.empty() ? T(1) : static_cast<T>(alpha[y]);
                                  for (std::size_t c = 0; c < classes; ++c) {
                                    const std::size_t at = (b * classes + c) * plane + i;
                                    g[at] += up * w * (probs[at] - (c == y ? T(1) : T(0)));
                                  }
                                }
                            });
}

/// Per-pixel argmax over classes; ties go to the lowest class index.
template <class T>
std::vector<std::uint8_t> argmax_classes(std::span<const T> values, std::size_t batch, std::size_t classes,
                                         std::size_t plane) {
  std::vector<std::uint8_t> out(batch * plane);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      T best_v = values[b * classes * plane + i];
      for (std::size_t c = 1; c < classes; ++c) {
        const T v = values[(b * classes + c) * plane + i];
        if (v > best_v) best = c, best_v = v;
      }
      out[b * plane + i] = static_cast<std::uint8_t>(best);
    }
  return out;
}

/// Consistency with hard pseudo-targets: mean over all pixels of the
/// cross-entropy against argmax(teacher_probs). teacher_probs has the
/// [B, C, H, W] layout of `student_logits` and carries no gradient.
template <class T>
Tensor<T> cr_onehot(const Tensor<T>& student_logits, std::span<const T> teacher_probs) {
  const std::size_t batch = student_logits.dim(0), classes = student_logits.dim(1);
  const std::size_t plane = student_logits.dim(2) * student_logits.dim(3);
  if (teacher_probs.size() != student_logits.numel()) throw ConfigError("cr_onehot: teacher/student size mismatch");
  return weighted_ce(student_logits, argmax_classes(teacher_probs, batch, classes, plane), {});
}

/// Consistency with soft targets: mean over pixels of -sum_c q_c log p_c.
template <class T>
Tensor<T> cr_prob(const Tensor<T>& student_logits, std::span<const T> teacher_probs) {
  if (student_logits.rank() != 4 || teacher_probs.size() != student_logits.numel()) {
    throw ConfigError("cr_prob: teacher/student size mismatch");
  }
  const std::size_t batch = student_logits.dim(0), classes = student_logits.dim(1);
  const std::size_t plane = student_logits.dim(2) * student_logits.dim(3);
  const auto z = student_logits.data();
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = z[b * classes * plane + i];
      for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[(b * classes + c) * plane + i]);
      T s = 0;
      for (std::size_t c = 0; c < classes; ++c) s += std::exp(z[(b * classes + c) * plane + i] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t at = (b * classes + c) * plane + i;
        total -= double(teacher_probs[at]) * double(z[at] - lse);
      }
    }
  const std::size_t pixels = batch * plane;
  const T norm = pixels ? T(1) / static_cast<T>(pixels) : T(0);
  auto probs = detail::pixel_softmax<T>(z, batch, classes, plane);
  std::vector<T> q(teacher_probs.begin(), teacher_probs.end());
  return detail::make_op<T>({1}, {static_cast<T>(total) * norm}, {student_logits},
                            [student_logits, probs = std::move(probs), q = std::move(q), batch, classes, plane,
                             norm](const Node<T>& self) {
                              T* g = detail::grad_of(student_logits);
                              const T up = self.grad[0] * norm;
                              for (std::size_t b = 0; b < batch; ++b)
                                for (std::size_t i = 0; i < plane; ++i) {
                                  T mass = 0;
                                  for (std::size_t c = 0; c < classes; ++c) mass += q[(b * classes + c) * plane + i];
                                  for (std::size_t c = 0; c < classes; ++c) {
                                    const std::size_t at = (b * classes + c) * plane + i;
                                    g[at] += up * (mass * probs[at] - q[at]);
                                  }
                                }
                            });
}

/// Pixels chosen for the contrastive loss: flat indices into the [B, h, w]
/// embedding grid and their class labels.
struct ContrastSample {
  std::vector<std::size_t> pixels;
  std::vector<int> labels;

  std::size_t size() const { return pixels.size(); }
};

/// Nearest-neighbour downsampling of [B, H, W] labels by `factor`, taking
/// the pixel at the centre of each cell.
inline std::vector<std::uint8_t> downsample_labels(const std::vector<std::uint8_t>& labels, std::size_t batch,
                                                   std::size_t height, std::size_t width, std::size_t factor) {
  const std::size_t h = height / factor, w = width / factor;
  std::vector<std::uint8_t> out(batch * h * w);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        out[(b * h + y) * w + x] = labels[(b * height + y * factor + factor / 2) * width + x * factor + factor / 2];
      }
  return out;
}

/// Per present class: all its pixels when there are at most n_pix, otherwise
/// the ceil(n_pix/2) pixels with the lowest predicted probability for that
/// class followed by a uniform draw from the rest. `labels` is [B, h, w] and
/// `probs` the matching [B, C, h, w] softmax.
template <class T>
ContrastSample sample_contrast(const std::vector<std::uint8_t>& labels, std::span<const T> probs, std::size_t classes,
                               std::size_t plane, int n_pix, Rng& rng, std::uint8_t ignore = kIgnoreLabel) {
  if (plane == 0 || labels.size() % plane != 0 || probs.size() != labels.size() * classes) {
    throw ConfigError("sample_contrast: probability/label size mismatch");
  }
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] == ignore) continue;
    if (labels[j] >= classes) throw DataError("sample_contrast: label out of range");
    by_class[labels[j]].push_back(j);
  }
  const auto cap = static_cast<std::size_t>(n_pix);
  const std::size_t hard = (cap + 1) / 2;
  ContrastSample s;
  for (std::size_t c = 0; c < classes; ++c) {
    const auto& pool = by_class[c];
    std::vector<std::size_t> chosen;
    if (pool.size() <= cap) {
      chosen = pool;
    } else {
      std::vector<std::pair<T, std::size_t>> scored;
      for (std::size_t j : pool) scored.emplace_back(probs[((j / plane) * classes + c) * plane + j % plane], j);
      std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      std::vector<std::size_t> rest;
      for (std::size_t k = 0; k < scored.size(); ++k) (k < hard ? chosen : rest).push_back(scored[k].second);
      rng.shuffle(rest);
      chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<long>(cap - hard));
    }
    for (std::size_t j : chosen) {
      s.pixels.push_back(j);
      s.labels.push_back(static_cast<int>(c));
    }
  }
  return s;
}

/// Rows of a [B, D, h, w] embedding map at the given flat [B, h, w] pixel
/// indices, as an [A, D] tensor.
template <class T>
Tensor<T> gather_pixels(const Tensor<T>& embeddings, const std::vector<std::size_t>& pixels) {
  if (embeddings.rank() != 4) throw ConfigError("gather_pixels: expected [B,D,h,w], got " + shape_string(embeddings.shape()));
  const std::size_t dim = embeddings.dim(1), plane = embeddings.dim(2) * embeddings.dim(3);
  std::vector<T> rows(pixels.size() * dim);
  for (std::size_t a = 0; a < pixels.size(); ++a) {
    const std::size_t b = pixels[a] / plane, i = pixels[a] % plane;
    if (b >= embeddings.dim(0)) throw ConfigError("gather_pixels: pixel index out of range");
    for (std::size_t d = 0; d < dim; ++d) rows[a * dim + d] = embeddings[(b * dim + d) * plane + i];
  }
  return detail::make_op<T>({pixels.size(), dim}, std::move(rows), {embeddings},
                            [embeddings, pixels, dim, plane](const Node<T>& self) {
                              T* g = detail::grad_of(embeddings);
                              for (std::size_t a = 0; a < pixels.size(); ++a) {
                                const std::size_t b = pixels[a] / plane, i = pixels[a] % plane;
                                for (std::size_t d = 0; d < dim; ++d) g[(b * dim + d) * plane + i] += self.grad[a * dim + d];
                              }
                            });
}

/// Supervised pixel contrast over rows of `z` ([A, D]) labelled by `labels`.
/// For anchor j with positives P_j and negatives N_j:
///   L_j = 1/|P_j| sum_{p in P_j} -log( e^{s_jp} / (e^{s_jp} + sum_{n in N_j} e^{s_jn}) ),  s = z.z' / t
/// and the loss is the mean of L_j over anchors with a non-empty P_j (zero if
/// there are none).
template <class T>
Tensor<T> pixel_contrast_loss(const Tensor<T>& z, const std::vector<int>& labels, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("pixel_contrast_loss: temperature must be positive");
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw ConfigError("pixel_contrast_loss: embeddings " + shape_string(z.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = z.dim(0), dim = z.dim(1);
  const double inv_t = 1.0 / temperature;
  std::vector<double> sim(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += double(z[i * dim + d]) * z[j * dim + d];
      sim[i * n + j] = sim[j * n + i] = dot * inv_t;
    }

  std::vector<std::size_t> positives(n, 0);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) ++positives[i];
    }
    if (positives[i]) ++anchors;
  }

  // coeff[i*n+j] = dL/ds_ij before the 1/A factor.
  std::vector<double> coeff(n * n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!positives[i]) continue;
    const double* s = sim.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) mx = std::max(mx, s[j]);
    }
    double neg = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (labels[j] != labels[i]) neg += std::exp(s[j] - mx);
    }
    const double inv_p = 1.0 / static_cast<double>(positives[i]);
    double inv_denoms = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      const double ep = std::exp(s[p] - mx);
      const double denom = ep + neg;
      total += inv_p * (std::log(denom) + mx - s[p]);
      coeff[i * n + p] += inv_p * (ep / denom - 1.0);
      inv_denoms += inv_p / denom;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (labels[j] != labels[i]) coeff[i * n + j] += std::exp(s[j] - mx) * inv_denoms;
    }
  }
  const double scale_a = anchors ? 1.0 / static_cast<double>(anchors) : 0.0;
  return detail::make_op<T>({1}, {static_cast<T>(total * scale_a)}, {z},
                            [z, coeff = std::move(coeff), n, dim, scale_a, inv_t](const Node<T>& self) {
                              T* g = detail::grad_of(z);
                              const double up = double(self.grad[0]) * scale_a * inv_t;
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < n; ++j) {
                                  const double w = coeff[i * n + j] + coeff[j * n + i];
                                  if (w == 0.0) continue;
                                  for (std::size_t d = 0; d < dim; ++d) g[i * dim + d] += static_cast<T>(up * w * z[j * dim + d]);
                                }
                            });
}

/// Weighted loss terms of one training step.
struct LossTerms {
  double sup_source = 0.0;
  double sup_target = 0.0;
  double cr = 0.0;
  double pc = 0.0;
  double total = 0.0;
};

template <class T>
struct StepLoss {
  Tensor<T> total;
  LossTerms terms;
};

/// Inputs for one objective evaluation.
struct StepContext {
  std::uint64_t step = 0;  // optimizer step within the round, for the contrast warm-up
  Setting setting = Setting::ssda;
};

namespace detail {

template <class T>
Tensor<T> accumulate_term(const Tensor<T>& total, const Tensor<T>& term, double weight, double& record) {
  const Tensor<T> weighted = scale(term, static_cast<T>(weight));
  record = double(weighted.item());
  return total.defined() ? add(total, weighted) : weighted;
}

inline std::vector<const LabelMap*> label_ptrs(const std::vector<LabeledImage>& items, const char* what) {
  std::vector<const LabelMap*> out;
  for (const auto& item : items) {
    if (!item.label) throw ConfigError(std::string(what) + " item '" + item.id + "' has no label map");
    out.push_back(&*item.label);
  }
  return out;
}

}  // namespace detail

/// Teacher pseudo-targets for strong views: the teacher's softmax on each
/// clean image, with the partner's prediction substituted inside the CutMix box.
template <class T>
std::vector<T> mixed_teacher_probs(const std::vector<T>& probs, const std::vector<StrongView>& views,
                                   std::size_t classes, std::size_t plane) {
  std::vector<T> mixed(probs.size());
  for (std::size_t b = 0; b < views.size(); ++b) {
    const std::size_t src_b = b, part_b = views[b].partner;
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t from = views[b].mix.mask.values[i] ? part_b : src_b;
      for (std::size_t c = 0; c < classes; ++c) mixed[(b * classes + c) * plane + i] = probs[(from * classes + c) * plane + i];
    }
  }
  return mixed;
}

/// The full per-step objective
///   sup_source + sup_target + lambda_cr * CR + lambda_pc * PC
/// for the current setting. Source images are optionally LAB-styled towards a
/// random target image of the batch. The supervised images share one forward
/// pass (shared normalization statistics) unless batch_mix is off. The
/// teacher runs in eval mode and contributes no gradient. The contrast term
/// is active only after the warm-up and when the batch carries labelled target
/// items; the consistency term uses hard targets unless cr_variant is prob.
template <class T>
StepLoss<T> total_loss(const StepContext& ctx, const Batch& batch, ModelPair<T>& models, const TinySegConfig& arch,
                       const LossConfig& cfg, const AugConfig& aug, Rng& rng) {
  cfg.validate();
  if (ctx.setting == Setting::ssl && !batch.source.empty()) throw ConfigError("ssl setting: batch must not contain source items");
  if (ctx.setting == Setting::ssda && (batch.source.empty() || batch.target_labeled.empty())) {
    throw ConfigError("ssda setting: batch needs source and labelled target items");
  }
  if (ctx.setting == Setting::uda && batch.source.empty()) throw ConfigError("uda setting: batch needs source items");
  if (batch.unlabeled.empty() && cfg.enable_cr && cfg.lambda_cr > 0.0) {
    throw ConfigError("consistency term needs unlabelled items");
  }
  const std::size_t classes = static_cast<std::size_t>(arch.num_classes);
  const std::size_t ds = static_cast<std::size_t>(arch.downsample);
  const std::vector<double> ones;
  const auto& alpha_s = cfg.class_weighting ? cfg.alpha_source : ones;
  const auto& alpha_t = cfg.class_weighting ? cfg.alpha_target : ones;

  const bool pc_on = cfg.enable_pc && cfg.lambda_pc > 0.0 && ctx.step >= static_cast<std::uint64_t>(cfg.pc_warmup_steps) &&
                     !batch.target_labeled.empty();
  const bool pc_source = pc_on && cfg.pc_scope == PcScope::target_source;
  const bool pc_unlabeled = pc_on && cfg.pc_scope == PcScope::target_unlabeled;

  // Supervised images, LAB styling applied to source items.
  std::vector<Image> source_imgs;
  for (const auto& item : batch.source) {
    if (cfg.lab_styling) {
      const std::size_t pool = batch.target_labeled.size() + batch.unlabeled.size();
      if (pool == 0) throw ConfigError("lab styling needs a target image in the batch");
      const std::size_t k = rng.index(pool);
      const Image& style = k < batch.target_labeled.size() ? batch.target_labeled[k].image
                                                           : batch.unlabeled[k - batch.target_labeled.size()].image;
      source_imgs.push_back(lab_style(item.image, style));
    } else {
      source_imgs.push_back(item.image);
    }
  }
  std::vector<Image> target_imgs;
  for (const auto& item : batch.target_labeled) target_imgs.push_back(item.image);
  const auto source_labels = stack_labels(detail::label_ptrs(batch.source, "source"));
  const auto target_labels = stack_labels(detail::label_ptrs(batch.target_labeled, "labelled target"));

  SegOutput<T> src_out, tgt_out;
  const std::size_t ns = source_imgs.size(), nt = target_imgs.size();
  if (cfg.batch_mix && ns && nt) {
    std::vector<Image> all = source_imgs;
    all.insert(all.end(), target_imgs.begin(), target_imgs.end());
    auto out = forward(models.student, arch, to_tensor<T>(all), Mode::train, pc_on);
    src_out.logits = slice_batch(out.logits, 0, ns);
    tgt_out.logits = slice_batch(out.logits, ns, ns + nt);
    src_out.head_logits = slice_batch(out.head_logits, 0, ns);
    tgt_out.head_logits = slice_batch(out.head_logits, ns, ns + nt);
    if (pc_on) {
      src_out.embeddings = slice_batch(out.embeddings, 0, ns);
      tgt_out.embeddings = slice_batch(out.embeddings, ns, ns + nt);
    }
  } else {
    if (ns) src_out = forward(models.student, arch, to_tensor<T>(source_imgs), Mode::train, pc_source);
    if (nt) tgt_out = forward(models.student, arch, to_tensor<T>(target_imgs), Mode::train, pc_on);
  }

  StepLoss<T> result;
  Tensor<T> total;
  if (ns) total = detail::accumulate_term(total, weighted_ce(src_out.logits, source_labels, alpha_s, cfg.ignore_index),
                                          cfg.lambda_source, result.terms.sup_source);
  if (nt) total = detail::accumulate_term(total, weighted_ce(tgt_out.logits, target_labels, alpha_t, cfg.ignore_index),
                                          cfg.lambda_target, result.terms.sup_target);

  // Consistency on strong views of the unlabelled images.
  std::vector<T> view_targets;
  SegOutput<T> view_out;
  std::vector<StrongView> views;
  const bool cr_on = cfg.enable_cr && cfg.lambda_cr > 0.0;
  if (cr_on || pc_unlabeled) {
    std::vector<const Image*> clean;
    for (const auto& item : batch.unlabeled) clean.push_back(&item.image);
    const auto teacher_logits = forward_seg(models.teacher, arch, to_tensor<T>(clean), Mode::eval);
    const std::size_t plane = teacher_logits.dim(2) * teacher_logits.dim(3);
    const auto probs = detail::pixel_softmax<T>(teacher_logits.data(), clean.size(), classes, plane);
    views = strong_augment_batch(clean, aug, rng);
    view_targets = mixed_teacher_probs(probs, views, classes, plane);
    std::vector<Image> strong;
    for (const auto& v : views) strong.push_back(v.mix.image);
    view_out = forward(models.student, arch, to_tensor<T>(strong), Mode::train, pc_unlabeled);
    if (cr_on) {
      const std::span<const T> q(view_targets);
      const auto term = cfg.cr_variant == CrVariant::onehot ? cr_onehot(view_out.logits, q) : cr_prob(view_out.logits, q);
      total = detail::accumulate_term(total, term, cfg.lambda_cr, result.terms.cr);
    }
  }

  if (pc_on) {
    // Contrast pool: labelled target pixels, optionally with source pixels or
    // unlabelled strong-view pixels under the teacher's mixed argmax labels.
    std::vector<Tensor<T>> parts{tgt_out.embeddings};
    std::vector<Tensor<T>> head_parts{tgt_out.head_logits};
    const std::size_t h = tgt_out.embeddings.dim(2), w = tgt_out.embeddings.dim(3);
    const std::size_t img_h = h * ds, img_w = w * ds;
    auto labels = downsample_labels(target_labels, nt, img_h, img_w, ds);
    if (pc_source && ns) {
      parts.push_back(src_out.embeddings);
      head_parts.push_back(src_out.head_logits);
      const auto more = downsample_labels(source_labels, ns, img_h, img_w, ds);
      labels.insert(labels.end(), more.begin(), more.end());
    }
    if (pc_unlabeled && !views.empty()) {
      parts.push_back(view_out.embeddings);
      head_parts.push_back(view_out.head_logits);
      const auto hard = argmax_classes(std::span<const T>(view_targets), views.size(), classes, img_h * img_w);
      const auto more = downsample_labels(hard, views.size(), img_h, img_w, ds);
      labels.insert(labels.end(), more.begin(), more.end());
    }
    const auto embeddings = parts.size() == 1 ? parts[0] : concat_batch(parts);
    std::vector<T> head_values;
    for (const auto& hp : head_parts) head_values.insert(head_values.end(), hp.data().begin(), hp.data().end());
    const std::size_t items = labels.size() / (h * w);
    const auto probs = detail::pixel_softmax<T>(std::span<const T>(head_values), items, classes, h * w);
    const auto sample = sample_contrast<T>(labels, probs, classes, h * w, cfg.n_pix, rng, cfg.ignore_index);
    const auto term = pixel_contrast_loss(gather_pixels(embeddings, sample.pixels), sample.labels, cfg.temperature);
    total = detail::accumulate_term(total, term, cfg.lambda_pc, result.terms.pc);
  }

  if (!total.defined()) total = Tensor<T>({1}, T(0));
  result.total = total;
  result.terms.total = double(total.item());
  return result;
}

}  // namespace ssda
