#pragma once

// Strong augmentation (colour jitter, blur, one RandAugment colour op, CutMix)
// and LAB statistics styling. Every function returns a new image and leaves
// its inputs untouched. Geometric ops are deliberately absent so that a
// teacher prediction on the clean image stays pixel-aligned with the student
// view outside the CutMix box.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/image.hpp"
#include "ssda/rng.hpp"

namespace ssda {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugConfig {
  // Photometric ops are off by default: classes in the synthetic scenes are
  // colour-coded, so the strong view is CutMix alone. Set 0.8 / 0.5 / 1 to enable.
  double p_jitter = 0.0;
  double p_blur = 0.0;
  double p_randaug = 0.0;
  double p_cutmix = 1.0;
  // Magnitudes sized for 32x32 scenes.
  double brightness = 0.1;  // factor drawn from [1 - b, 1 + b]
  double contrast = 0.1;
  double saturation = 0.1;
  double hue = 0.01;  // shift in turns, drawn from [-h, h]
  Range blur_sigma{0.1, 0.5};
  Range cutmix_area{0.2, 0.5};
  Range cutmix_aspect{0.5, 2.0};
  Range enhance_factor{0.9, 1.1};  // brightness / color / contrast / sharpness
  Range posterize_bits{7.0, 8.0};
  Range solarize_threshold{0.95, 1.0};

  void validate() const {
    for (double p : {p_jitter, p_blur, p_randaug, p_cutmix}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augment: probabilities must lie in [0,1]");
    }
    if (!(cutmix_area.lo >= 0.0 && cutmix_area.lo <= cutmix_area.hi && cutmix_area.hi < 1.0)) {
      throw ConfigError("augment: cutmix area range must lie in [0,1)");
    }
    if (!(cutmix_aspect.lo > 0.0 && cutmix_aspect.lo <= cutmix_aspect.hi)) {
      throw ConfigError("augment: cutmix aspect range must be positive");
    }
    if (posterize_bits.lo < 1.0 || posterize_bits.hi > 8.0 || posterize_bits.lo > posterize_bits.hi) {
      throw ConfigError("augment: posterize bits must lie in [1,8]");
    }
    if (blur_sigma.lo <= 0.0 || blur_sigma.lo > blur_sigma.hi) throw ConfigError("augment: invalid blur sigma range");
  }
};

/// Boolean pixel mask, row-major H x W.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}
  bool at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x] != 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }
};

namespace detail {

inline float gray(const Image& img, std::size_t pixel) {
  return 0.299f * img.rgb[pixel * 3] + 0.587f * img.rgb[pixel * 3 + 1] + 0.114f * img.rgb[pixel * 3 + 2];
}

/// out = degenerate + factor * (img - degenerate), clamped.
inline Image blend(const Image& img, const Image& degenerate, double factor) {
  Image out(img.height, img.width);
  const auto f = static_cast<float>(factor);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    out.rgb[i] = std::clamp(degenerate.rgb[i] + f * (img.rgb[i] - degenerate.rgb[i]), 0.0f, 1.0f);
  }
  return out;
}

inline Image grayscale(const Image& img) {
  Image g(img.height, img.width);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    const float v = gray(img, p);
    for (int c = 0; c < 3; ++c) g.rgb[p * 3 + c] = v;
  }
  return g;
}

inline int to_byte(float v) { return static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
  } else if (mx == r) {
    h = std::fmod((g - b) / d + 6.0f, 6.0f) / 6.0f;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0f) / 6.0f;
  } else {
    h = ((r - g) / d + 4.0f) / 6.0f;
  }
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = (h - std::floor(h)) * 6.0f;
  const int sector = static_cast<int>(hh) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace detail

// RandAugment colour ops with PIL semantics. `magnitude` is the enhancement
// factor (brightness, color, contrast, sharpness; 1 = identity), the bit count
// (posterize), or the threshold in [0,1] (solarize). Equalize ignores it.

inline Image adjust_brightness(const Image& img, double factor) {
  return detail::blend(img, Image(img.height, img.width, 0.0f), factor);
}

inline Image adjust_color(const Image& img, double factor) { return detail::blend(img, detail::grayscale(img), factor); }

/// Blends towards a flat image at the 8-bit-rounded mean luminance.
inline Image adjust_contrast(const Image& img, double factor) {
  double total = 0.0;
  for (std::size_t p = 0; p < img.pixels(); ++p) total += detail::gray(img, p);
  const double mean = img.pixels() ? total / static_cast<double>(img.pixels()) : 0.0;
  const auto level = static_cast<float>(std::floor(mean * 255.0 + 0.5) / 255.0);
  return detail::blend(img, Image(img.height, img.width, level), factor);
}

/// Blends with the 3x3 smoothing filter [[1,1,1],[1,5,1],[1,1,1]]/13;
/// border pixels of the smoothed image keep their original values.
inline Image adjust_sharpness(const Image& img, double factor) {
  Image smooth = img;
  for (int y = 1; y + 1 < img.height; ++y)
    for (int x = 1; x + 1 < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 4.0f * img.at(y, x, c);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) acc += img.at(y + dy, x + dx, c);
        smooth.at(y, x, c) = acc / 13.0f;
      }
  return detail::blend(img, smooth, factor);
}

/// Keeps the top `bits` bits of each 8-bit channel value.
inline Image posterize(const Image& img, int bits) {
  if (bits < 1 || bits > 8) throw ArgumentError("posterize: bits must lie in [1,8]");
  const int mask = ~((1 << (8 - bits)) - 1) & 0xff;
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    out.rgb[i] = static_cast<float>(detail::to_byte(img.rgb[i]) & mask) / 255.0f;
  }
  return out;
}

/// Inverts every value at or above the threshold.
inline Image solarize(const Image& img, double threshold) {
  Image out = img;
  for (auto& v : out.rgb) {
    if (v >= threshold) v = 1.0f - v;
  }
  return out;
}

/// Per-channel histogram equalization over 8-bit levels (PIL lookup-table
/// construction; a channel with a single populated level is left unchanged).
inline Image equalize(const Image& img) {
  Image out(img.height, img.width);
  for (int c = 0; c < 3; ++c) {
    std::array<long, 256> hist{};
    for (std::size_t p = 0; p < img.pixels(); ++p) ++hist[static_cast<std::size_t>(detail::to_byte(img.rgb[p * 3 + c]))];
    long total = 0, last = 0;
    for (std::size_t i = 0; i < 256; ++i) {
      total += hist[i];
      if (hist[i]) last = hist[i];
    }
    const long step = (total - last) / 255;
    std::array<int, 256> lut{};
    if (step == 0) {
      for (int i = 0; i < 256; ++i) lut[static_cast<std::size_t>(i)] = i;
    } else {
      long n = step / 2;
      for (std::size_t i = 0; i < 256; ++i) {
        lut[i] = static_cast<int>(std::min(255L, n / step));
        n += hist[i];
      }
    }
    for (std::size_t p = 0; p < img.pixels(); ++p) {
      const auto level = static_cast<std::size_t>(detail::to_byte(img.rgb[p * 3 + c]));
      out.rgb[p * 3 + c] = static_cast<float>(lut[level]) / 255.0f;
    }
  }
  return out;
}

inline const std::array<std::string, 7>& randaugment_ops() {
  static const std::array<std::string, 7> names{"brightness", "color",     "contrast", "equalize",
                                                "posterize",  "sharpness", "solarize"};
  return names;
}

inline Image randaugment_op(const std::string& name, double magnitude, const Image& img) {
  if (name == "brightness") return adjust_brightness(img, magnitude);
  if (name == "color") return adjust_color(img, magnitude);
  if (name == "contrast") return adjust_contrast(img, magnitude);
  if (name == "equalize") return equalize(img);
  if (name == "posterize") return posterize(img, static_cast<int>(std::lround(magnitude)));
  if (name == "sharpness") return adjust_sharpness(img, magnitude);
  if (name == "solarize") return solarize(img, magnitude);
  throw ArgumentError("unknown RandAugment op '" + name + "'");
}

inline Image adjust_hue(const Image& img, double shift) {
  Image out(img.height, img.width);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    float h, s, v;
    detail::rgb_to_hsv(img.rgb[p * 3], img.rgb[p * 3 + 1], img.rgb[p * 3 + 2], h, s, v);
    detail::hsv_to_rgb(h + static_cast<float>(shift), s, v, out.rgb[p * 3], out.rgb[p * 3 + 1], out.rgb[p * 3 + 2]);
  }
  return out;
}

/// Separable Gaussian blur, radius ceil(3 sigma), reflected borders.
inline Image gaussian_blur(const Image& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  float norm = 0.0f;
  for (int i = -radius; i <= radius; ++i) {
    const auto k = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    kernel[static_cast<std::size_t>(i + radius)] = k;
    norm += k;
  }
  for (auto& k : kernel) k /= norm;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  Image tmp(img.height, img.width), out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * img.at(y, reflect(x + i, img.width), c);
        tmp.at(y, x, c) = acc;
      }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(reflect(y + i, img.height), x, c);
        out.at(y, x, c) = std::clamp(acc, 0.0f, 1.0f);
      }
  return out;
}

/// Brightness, contrast, saturation and hue jitter in that order.
inline Image color_jitter(const Image& img, const AugConfig& cfg, Rng& rng) {
  Image out = adjust_brightness(img, rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness));
  out = adjust_contrast(out, rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast));
  out = adjust_color(out, rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation));
  return adjust_hue(out, rng.uniform(-cfg.hue, cfg.hue));
}

/// The colour part of the strong pipeline: jitter, blur, one RandAugment op.
inline Image color_augment(const Image& img, const AugConfig& cfg, Rng& rng) {
  Image out = img;
  if (rng.bernoulli(cfg.p_jitter)) out = color_jitter(out, cfg, rng);
  if (rng.bernoulli(cfg.p_blur)) out = gaussian_blur(out, rng.uniform(cfg.blur_sigma.lo, cfg.blur_sigma.hi));
  if (rng.bernoulli(cfg.p_randaug)) {
    const std::string& op = randaugment_ops()[rng.index(randaugment_ops().size())];
    double magnitude = 1.0;
    if (op == "posterize") {
      magnitude = rng.integer(static_cast<int>(cfg.posterize_bits.lo), static_cast<int>(cfg.posterize_bits.hi));
    } else if (op == "solarize") {
      magnitude = rng.uniform(cfg.solarize_threshold.lo, cfg.solarize_threshold.hi);
    } else if (op != "equalize") {
      magnitude = rng.uniform(cfg.enhance_factor.lo, cfg.enhance_factor.hi);
    }
    out = randaugment_op(op, magnitude, out);
  }
  clamp01(out);
  return out;
}

struct MixResult {
  Image image;
  Mask mask;  // true where pixels come from the partner
};

/// Pastes an axis-aligned box of x2 into x1. The box has area
/// round(area_frac * H * W) up to integer rounding, width/height ratio
/// `aspect`, and is centred at (cy, cx) in pixel coordinates; parts outside
/// the image are clipped.
inline MixResult cutmix(const Image& x1, const Image& x2, double area_frac, double aspect, double cy, double cx) {
  if (!x1.same_shape(x2)) throw ArgumentError("cutmix: images differ in size");
  MixResult r{x1, Mask(x1.height, x1.width)};
  const double area = area_frac * x1.height * x1.width;
  if (area <= 0.0) return r;
  const int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, x1.height);
  const int w = std::clamp(static_cast<int>(std::lround(area / h)), 0, x1.width);
  const int y0 = static_cast<int>(std::lround(cy - 0.5 * h)), x0 = static_cast<int>(std::lround(cx - 0.5 * w));
  for (int y = std::max(0, y0); y < std::min(x1.height, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(x1.width, x0 + w); ++x) {
      for (int c = 0; c < 3; ++c) r.image.at(y, x, c) = x2.at(y, x, c);
      r.mask.values[static_cast<std::size_t>(y) * x1.width + x] = 1;
    }
  return r;
}

/// Random CutMix with the box placed fully inside the image.
inline MixResult random_cutmix(const Image& x1, const Image& x2, const AugConfig& cfg, Rng& rng) {
  if (!x1.same_shape(x2)) throw ArgumentError("cutmix: images differ in size");
  if (!rng.bernoulli(cfg.p_cutmix)) return {x1, Mask(x1.height, x1.width)};
  const double area = rng.uniform(cfg.cutmix_area.lo, cfg.cutmix_area.hi);
  const double aspect = std::exp(rng.uniform(std::log(cfg.cutmix_aspect.lo), std::log(cfg.cutmix_aspect.hi)));
  const double cells = area * x1.height * x1.width;
  const int h = std::clamp(static_cast<int>(std::lround(std::sqrt(cells / aspect))), 1, x1.height);
  const int w = std::clamp(static_cast<int>(std::lround(cells / h)), 0, x1.width);
  const int y0 = rng.integer(0, x1.height - h), x0 = rng.integer(0, x1.width - w);
  return cutmix(x1, x2, area, aspect, y0 + 0.5 * h, x0 + 0.5 * w);
}

/// Colour-augments x and then pastes a box of `partner`.
inline MixResult strong_augment(const Image& x, const Image& partner, const AugConfig& cfg, Rng& rng) {
  if (!x.same_shape(partner)) throw ArgumentError("strong_augment: images differ in size");
  return random_cutmix(color_augment(x, cfg, rng), partner, cfg, rng);
}

struct StrongView {
  MixResult mix;
  std::size_t partner = 0;  // batch index whose content fills the mask
};

/// Strong views of a batch: every item is colour-augmented, then item i
/// receives a box from the colour-augmented view of item (i + 1) mod n.
inline std::vector<StrongView> strong_augment_batch(const std::vector<const Image*>& batch, const AugConfig& cfg,
                                                    Rng& rng) {
  std::vector<Image> colored;
  for (const Image* img : batch) colored.push_back(color_augment(*img, cfg, rng));
  std::vector<StrongView> views;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t partner = (i + 1) % batch.size();
    views.push_back({random_cutmix(colored[i], colored[partner], cfg, rng), partner});
  }
  return views;
}

// CIELAB conversion: sRGB companding, D65 white point.

namespace detail {

constexpr std::array<double, 3> kD65{0.95047, 1.0, 1.08883};

inline double srgb_to_linear(double v) { return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4); }
inline double linear_to_srgb(double v) {
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(std::max(v, 0.0), 1.0 / 2.4) - 0.055;
}

inline double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}
inline double lab_finv(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d ? t * t * t : 3 * d * d * (t - 4.0 / 29.0);
}

}  // namespace detail

inline std::array<double, 3> rgb_to_lab(double r, double g, double b) {
  r = detail::srgb_to_linear(r), g = detail::srgb_to_linear(g), b = detail::srgb_to_linear(b);
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  const double fx = detail::lab_f(x / detail::kD65[0]), fy = detail::lab_f(y / detail::kD65[1]),
               fz = detail::lab_f(z / detail::kD65[2]);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline std::array<double, 3> lab_to_rgb(double l, double a, double b) {
  const double fy = (l + 16.0) / 116.0, fx = fy + a / 500.0, fz = fy - b / 200.0;
  const double x = detail::kD65[0] * detail::lab_finv(fx), y = detail::kD65[1] * detail::lab_finv(fy),
               z = detail::kD65[2] * detail::lab_finv(fz);
  const double r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
  const double g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
  const double bl = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
  return {detail::linear_to_srgb(r), detail::linear_to_srgb(g), detail::linear_to_srgb(bl)};
}

using LabImage = std::vector<std::array<double, 3>>;

inline LabImage to_lab(const Image& img) {
  LabImage lab(img.pixels());
  for (std::size_t p = 0; p < img.pixels(); ++p) lab[p] = rgb_to_lab(img.rgb[p * 3], img.rgb[p * 3 + 1], img.rgb[p * 3 + 2]);
  return lab;
}

struct LabStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
};

inline LabStats lab_stats(const LabImage& lab) {
  LabStats s;
  if (lab.empty()) return s;
  const auto n = static_cast<double>(lab.size());
  for (const auto& px : lab)
    for (std::size_t c = 0; c < 3; ++c) s.mean[c] += px[c] / n;
  for (const auto& px : lab)
    for (std::size_t c = 0; c < 3; ++c) s.stddev[c] += (px[c] - s.mean[c]) * (px[c] - s.mean[c]) / n;
  for (auto& v : s.stddev) v = std::sqrt(v);
  return s;
}

inline LabStats lab_stats(const Image& img) { return lab_stats(to_lab(img)); }

constexpr double kLabStdEps = 1e-6;

/// Source pixels in LAB after re-standardizing each channel to the target's
/// statistics, before conversion back to RGB.
inline LabImage lab_style_lab(const Image& source, const Image& target) {
  LabImage lab = to_lab(source);
  const LabStats s = lab_stats(lab), t = lab_stats(target);
  for (auto& px : lab)
    for (std::size_t c = 0; c < 3; ++c)
      px[c] = (px[c] - s.mean[c]) / std::max(s.stddev[c], kLabStdEps) * t.stddev[c] + t.mean[c];
  return lab;
}

/// Transfers the per-channel LAB mean and standard deviation of `target` to
/// `source`; the result is clamped to [0,1].
inline Image lab_style(const Image& source, const Image& target) {
  const LabImage lab = lab_style_lab(source, target);
  Image out(source.height, source.width);
  for (std::size_t p = 0; p < lab.size(); ++p) {
    const auto rgb = lab_to_rgb(lab[p][0], lab[p][1], lab[p][2]);
    for (std::size_t c = 0; c < 3; ++c) out.rgb[p * 3 + c] = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
  }
  return out;
}

}  // namespace ssda
