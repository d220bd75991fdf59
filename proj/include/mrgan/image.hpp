#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mrgan/error.hpp"

namespace mrgan {

/// Planar float image, channels-first row-major, values nominally in [0,1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, float fill = 0.0f)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  std::size_t plane() const { return width * height; }
};

/// Continuous saliency density; nonnegative and finite.
struct SaliencyMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  SaliencyMap() = default;
  SaliencyMap(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), values(w * h, fill) {}

  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct Pixel {
  int x = 0;
  int y = 0;
  bool operator==(const Pixel&) const = default;
};

/// Discrete fixations in pixel coordinates; duplicates stand for repeated
/// observers on the same pixel.
struct FixationMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Pixel> points;

  void validate() const {
    for (const auto& p : points)
      require(p.x >= 0 && p.y >= 0 && static_cast<std::size_t>(p.x) < width &&
                  static_cast<std::size_t>(p.y) < height,
              ErrorCode::invalid_argument,
              "fixation (" + std::to_string(p.x) + "," + std::to_string(p.y) + ") outside " +
                  std::to_string(width) + "x" + std::to_string(height));
  }
};

inline SaliencyMap to_saliency(const Image& img, std::size_t channel = 0) {
  SaliencyMap m(img.width, img.height);
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = img.pixels[channel * img.plane() + i];
  return m;
}

inline Image to_image(const SaliencyMap& m) {
  Image img(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.values.size(); ++i) img.pixels[i] = static_cast<float>(m.values[i]);
  return img;
}

/// Scales so the maximum becomes 1; an all-zero map stays zero.
inline SaliencyMap normalize_max(SaliencyMap m) {
  const double mx = m.values.empty() ? 0.0 : *std::max_element(m.values.begin(), m.values.end());
  if (mx > 0.0)
    for (auto& v : m.values) v /= mx;
  return m;
}

}  // namespace mrgan
