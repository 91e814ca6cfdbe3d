#pragma once

// Tiny segmentation network: a convolutional backbone with one strided
// downsample, a head of parallel dilated convolutions summed together, a 1x1
// classifier and a projection head producing unit-norm pixel embeddings.
// Also holds the student/teacher pair and its EMA update.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/ops.hpp"
#include "ssda/params.hpp"
#include "ssda/rng.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

struct TinySegConfig {
  int in_channels = 3;
  int base_width = 16;
  int num_classes = 5;
  int embed_dim = 32;
  std::vector<int> rates{1, 2, 4};
  int downsample = 4;

  int feature_width() const { return 2 * base_width; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (embed_dim < 2) throw ConfigError("model: embed_dim must be >= 2");
    if (base_width < 1 || in_channels < 1 || downsample < 1) throw ConfigError("model: widths must be positive");
    if (rates.empty()) throw ConfigError("model: at least one dilation rate is required");
    for (int r : rates) {
      if (r < 1) throw ConfigError("model: dilation rates must be >= 1");
    }
  }

  bool operator==(const TinySegConfig&) const = default;
};

inline std::string aspp_name(int rate) { return "head.aspp_r" + std::to_string(rate); }

namespace detail {

template <class T>
Tensor<T> kaiming_uniform(Shape shape, Rng& rng) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> values(numel_of(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <class T>
void add_norm(ParamSet<T>& p, const std::string& prefix, std::size_t channels) {
  p.add(prefix + ".gamma", Tensor<T>({channels}, T(1)));
  p.add(prefix + ".beta", Tensor<T>({channels}, T(0)));
  p.add(prefix + ".running_mean", Tensor<T>({channels}, T(0)), false);
  p.add(prefix + ".running_var", Tensor<T>({channels}, T(1)), false);
}

template <class T>
Tensor<T> apply_norm(const ParamSet<T>& p, const std::string& prefix, const Tensor<T>& x, Mode mode) {
  return norm2d(x, p.at(prefix + ".gamma"), p.at(prefix + ".beta"), mode, p.at(prefix + ".running_mean"),
                p.at(prefix + ".running_var"));
}

}  // namespace detail

/// Kaiming-uniform weights, zero biases, identity normalization.
template <class T>
ParamSet<T> build(const TinySegConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet<T> p;
  const auto w = static_cast<std::size_t>(cfg.base_width);
  const auto f = static_cast<std::size_t>(cfg.feature_width());
  const auto ds = static_cast<std::size_t>(cfg.downsample);
  const auto in = static_cast<std::size_t>(cfg.in_channels);

  p.add("backbone.stem.conv.weight", detail::kaiming_uniform<T>({w, in, 3, 3}, rng));
  detail::add_norm(p, "backbone.stem.norm", w);
  p.add("backbone.down.conv.weight", detail::kaiming_uniform<T>({f, w, ds, ds}, rng));
  detail::add_norm(p, "backbone.down.norm", f);
  for (const char* block : {"backbone.block1", "backbone.block2"}) {
    p.add(std::string(block) + ".conv.weight", detail::kaiming_uniform<T>({f, f, 3, 3}, rng));
    detail::add_norm(p, std::string(block) + ".norm", f);
  }
  for (int r : cfg.rates) {
    p.add(aspp_name(r) + ".weight", detail::kaiming_uniform<T>({f, f, 3, 3}, rng));
    p.add(aspp_name(r) + ".bias", Tensor<T>({f}, T(0)));
  }
  detail::add_norm(p, "head.norm", f);
  const auto classes = static_cast<std::size_t>(cfg.num_classes);
  p.add("head.classifier.weight", detail::kaiming_uniform<T>({classes, f, 1, 1}, rng));
  p.add("head.classifier.bias", Tensor<T>({classes}, T(0)));

  const auto embed = static_cast<std::size_t>(cfg.embed_dim);
  p.add("proj.conv1.weight", detail::kaiming_uniform<T>({f, f, 1, 1}, rng));
  detail::add_norm(p, "proj.norm", f);
  p.add("proj.conv2.weight", detail::kaiming_uniform<T>({embed, f, 1, 1}, rng));
  p.add("proj.conv2.bias", Tensor<T>({embed}, T(0)));
  return p;
}

/// Recovers the architecture from parameter shapes (used when loading checkpoints).
template <class T>
TinySegConfig infer_config(const ParamSet<T>& p) {
  TinySegConfig cfg;
  const auto& stem = p.at("backbone.stem.conv.weight");
  cfg.base_width = static_cast<int>(stem.dim(0));
  cfg.in_channels = static_cast<int>(stem.dim(1));
  cfg.downsample = static_cast<int>(p.at("backbone.down.conv.weight").dim(2));
  cfg.num_classes = static_cast<int>(p.at("head.classifier.weight").dim(0));
  cfg.embed_dim = static_cast<int>(p.at("proj.conv2.weight").dim(0));
  cfg.rates.clear();
  const std::string prefix = "head.aspp_r";
  for (const auto& [name, e] : p) {
    if (name.rfind(prefix, 0) == 0 && name.size() > 7 && name.substr(name.size() - 7) == ".weight") {
      cfg.rates.push_back(std::stoi(name.substr(prefix.size(), name.size() - 7 - prefix.size())));
    }
  }
  std::sort(cfg.rates.begin(), cfg.rates.end());
  return cfg;
}

template <class T>
struct SegOutput {
  Tensor<T> head_logits;  // [B, C, H/ds, W/ds]
  Tensor<T> logits;       // [B, C, H, W]
  Tensor<T> embeddings;   // [B, D, H/ds, W/ds], defined when requested
};

/// Full forward pass. In train mode the normalization layers use batch
/// statistics and update their running buffers in `params`.
template <class T>
SegOutput<T> forward(const ParamSet<T>& params, const TinySegConfig& cfg, const Tensor<T>& images, Mode mode,
                     bool with_proj) {
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(cfg.in_channels)) {
    throw ConfigError("forward: images " + shape_string(images.shape()) + " do not match " +
                      std::to_string(cfg.in_channels) + " input channels");
  }
  const std::size_t h = images.dim(2), w = images.dim(3), ds = static_cast<std::size_t>(cfg.downsample);
  if (h % ds != 0 || w % ds != 0) {
    throw ConfigError("forward: image size " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by downsample factor " + std::to_string(ds));
  }
  const Tensor<T> none;
  auto block = [&](const Tensor<T>& x, const std::string& name, ConvOptions opt) {
    auto y = conv2d(x, params.at(name + ".conv.weight"), none, opt);
    return relu(detail::apply_norm(params, name + ".norm", y, mode));
  };

  auto x = block(images, "backbone.stem", {1, 1, 1});
  x = block(x, "backbone.down", {cfg.downsample, 0, 1});
  x = block(x, "backbone.block1", {1, 1, 1});
  const auto features = block(x, "backbone.block2", {1, 1, 1});

  Tensor<T> aspp;
  for (int r : cfg.rates) {
    auto branch = conv2d(features, params.at(aspp_name(r) + ".weight"), params.at(aspp_name(r) + ".bias"),
                         {1, r, r});
    aspp = aspp.defined() ? add(aspp, branch) : branch;
  }
  aspp = relu(detail::apply_norm(params, "head.norm", aspp, mode));

  SegOutput<T> out;
  out.head_logits = conv2d(aspp, params.at("head.classifier.weight"), params.at("head.classifier.bias"));
  out.logits = bilinear_upsample(out.head_logits, h, w);
  if (with_proj) {
    auto z = conv2d(features, params.at("proj.conv1.weight"), none);
    z = relu(detail::apply_norm(params, "proj.norm", z, mode));
    z = conv2d(z, params.at("proj.conv2.weight"), params.at("proj.conv2.bias"));
    out.embeddings = l2_normalize(z, 1);
  }
  return out;
}

template <class T>
Tensor<T> forward_seg(const ParamSet<T>& params, const TinySegConfig& cfg, const Tensor<T>& images, Mode mode) {
  return forward(params, cfg, images, mode, false).logits;
}

template <class T>
Tensor<T> forward_proj(const ParamSet<T>& params, const TinySegConfig& cfg, const Tensor<T>& images, Mode mode) {
  return forward(params, cfg, images, mode, true).embeddings;
}

constexpr double kMuCap = 0.995;

/// EMA coefficient min(cap, (step + 1) / (step + 10)).
inline double mu_schedule(std::uint64_t step, double cap = kMuCap) {
  const double s = static_cast<double>(step);
  return std::min(cap, (s + 1.0) / (s + 10.0));
}

template <class T>
struct ModelPair {
  ParamSet<T> student;
  ParamSet<T> teacher;
  std::uint64_t step = 0;
  double mu_cap = kMuCap;

  /// Teacher starts as an exact, non-differentiable copy of the student.
  static ModelPair from_student(ParamSet<T> student) {
    ModelPair pair;
    pair.teacher = student.clone(false);
    pair.student = std::move(student);
    return pair;
  }
};

/// teacher <- mu * teacher + (1 - mu) * student, over every entry including
/// normalization buffers.
template <class T>
void ema_blend(ParamSet<T>& teacher, const ParamSet<T>& student, double mu) {
  check_compatible(teacher, student);
  const T a = static_cast<T>(mu), b = static_cast<T>(1.0 - mu);
  auto it = student.begin();
  for (auto& [name, e] : teacher) {
    auto dst = e.value.data();
    auto src = it->second.value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a * dst[i] + b * src[i];
    ++it;
  }
}

template <class T>
void ema_update(ModelPair<T>& pair) {
  ema_blend(pair.teacher, pair.student, mu_schedule(pair.step, pair.mu_cap));
  ++pair.step;
}

}  // namespace ssda
