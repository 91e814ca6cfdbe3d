#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// RGB image, values in [0, 1], interleaved row-major (H x W x 3).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
  bool operator==(const Image&) const = default;
};

/// Per-pixel class indices; kIgnoreLabel marks excluded pixels.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t pixels() const { return values.size(); }
  bool operator==(const LabelMap&) const = default;
};

inline float quantize8(float v) {
  return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

inline void quantize8(Image& img) {
  for (auto& v : img.rgb) v = quantize8(v);
}

inline void clamp01(Image& img) {
  for (auto& v : img.rgb) v = std::clamp(v, 0.0f, 1.0f);
}

inline Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

inline LabelMap flip_horizontal(const LabelMap& map) {
  LabelMap out(map.height, map.width);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) out.at(y, x) = map.at(y, map.width - 1 - x);
  return out;
}

/// Stacks images into a [B, 3, H, W] tensor.
template <class T>
Tensor<T> to_tensor(std::span<const Image* const> images) {
  if (images.empty()) throw ConfigError("to_tensor: no images");
  const auto h = static_cast<std::size_t>(images[0]->height), w = static_cast<std::size_t>(images[0]->width);
  std::vector<T> values(images.size() * 3 * h * w);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (!img.same_shape(*images[0])) throw ConfigError("to_tensor: images differ in size");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < h * w; ++i) values[((b * 3 + c) * h * w) + i] = static_cast<T>(img.rgb[i * 3 + c]);
  }
  return Tensor<T>({images.size(), 3, h, w}, std::move(values));
}

template <class T>
Tensor<T> to_tensor(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  for (const auto& img : images) ptrs.push_back(&img);
  return to_tensor<T>(std::span<const Image* const>(ptrs));
}

// Binary Netpbm (P6 colour / P5 grey), 8-bit.

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.rgb.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.rgb[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_pgm(const std::string& path, const LabelMap& map) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << map.width << " " << map.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(map.values.data()), static_cast<std::streamsize>(map.values.size()));
}

namespace detail {

inline std::vector<unsigned char> read_netpbm(const std::string& path, const char* magic, int channels, int& width,
                                              int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::string m;
  int maxval = 0;
  in >> m;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> width;
  skip_comments();
  in >> height;
  skip_comments();
  in >> maxval;
  if (m != magic || !in || maxval != 255 || width <= 0 || height <= 0) {
    throw DataError(path + ": expected 8-bit " + magic + " file");
  }
  in.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw DataError(path + ": truncated pixel data");
  return bytes;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = detail::read_netpbm(path, "P6", 3, w, h);
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

inline LabelMap read_pgm(const std::string& path) {
  int w = 0, h = 0;
  auto bytes = detail::read_netpbm(path, "P5", 1, w, h);
  LabelMap map(h, w);
  map.values.assign(bytes.begin(), bytes.end());
  return map;
}

}  // namespace ssda
