#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dndt/errors.hpp"

namespace dndt {

// Row-major 2D image. Pixel (row y, column x) sits at pix[y*width + x];
// coordinates are in pixel units with the origin at the center of pixel (0,0).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pix;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pix(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int y, int x) { return pix[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pix[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pix.size(); }
};

// Linear-interpolated percentile of the values (q in [0,1]).
inline double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw Error("percentile: empty input");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double rank = std::clamp(q, 0.0, 1.0) * (sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

// Percentile fractions used to map raw photon counts to [0,1]. These are part
// of a trained model's contract, so checkpoints record them.
struct NormRule {
  double lo_frac = 0.001;   // 0.1th percentile
  double hi_frac = 0.999;   // 99.9th percentile
};

struct NormWindow {
  double lo = 0.0;
  double hi = 1.0;
};

inline NormWindow norm_window(const Image& img, const NormRule& rule = {}) {
  NormWindow w;
  w.lo = percentile(img.pix, rule.lo_frac);
  w.hi = percentile(img.pix, rule.hi_frac);
  return w;
}

// Affine map to [0,1] with clamping. A degenerate window maps everything to 0.
inline Image normalize(const Image& img, const NormWindow& w) {
  Image out(img.height, img.width);
  const double range = w.hi - w.lo;
  if (range < 1e-12) return out;
  for (std::size_t i = 0; i < img.pix.size(); ++i)
    out.pix[i] = std::clamp((img.pix[i] - w.lo) / range, 0.0, 1.0);
  return out;
}

inline Image normalize(const Image& img, const NormRule& rule = {}) {
  return normalize(img, norm_window(img, rule));
}

}  // namespace dndt
