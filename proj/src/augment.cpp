#include <algorithm>
#include <cmath>
#include <numbers>

#include "lwnet/data_io.hpp"
#include "lwnet/random.hpp"

namespace lwnet {

AugmentDraw draw_augment(const AugmentConfig& cfg, std::mt19937_64& rng) {
  // Every field consumes its draw so switching one off leaves the others'
  // random streams where they were.
  AugmentDraw d;
  const bool h = bernoulli(rng, 0.5);
  const bool v = bernoulli(rng, 0.5);
  const double a = uniform(rng, -1.0, 1.0);
  const double b = uniform(rng, -1.0, 1.0);
  const double c = uniform(rng, -1.0, 1.0);
  d.hflip = cfg.hflip && h;
  d.vflip = cfg.vflip && v;
  d.angle_deg = a * cfg.max_rotation_deg;
  d.brightness = 1.0 + b * cfg.brightness;
  d.contrast = 1.0 + c * cfg.contrast;
  return d;
}

namespace {

// Continuous mirror of u into [0, n-1].
double fold(double u, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  u = std::fmod(u, period);
  if (u < 0) u += period;
  return u <= n - 1 ? u : period - u;
}

// Output pixel (y, x) -> source coordinate under flips then rotation.
struct Warp {
  int h, w;
  bool hflip, vflip;
  double cs, sn, cy, cx;

  Warp(int h_, int w_, const AugmentDraw& d)
      : h(h_), w(w_), hflip(d.hflip), vflip(d.vflip) {
    const double rad = d.angle_deg * std::numbers::pi / 180.0;
    cs = std::cos(rad);
    sn = std::sin(rad);
    cy = (h - 1) / 2.0;
    cx = (w - 1) / 2.0;
  }
  bool rotates() const { return sn != 0.0; }

  void source(int y, int x, double& sy, double& sx) const {
    double ry = y, rx = x;
    if (rotates()) {
      const double dy = y - cy, dx = x - cx;
      ry = cy + cs * dy - sn * dx;
      rx = cx + sn * dy + cs * dx;
      ry = fold(ry, h);
      rx = fold(rx, w);
    }
    sy = vflip ? (h - 1) - ry : ry;
    sx = hflip ? (w - 1) - rx : rx;
  }
};

}  // namespace

Image apply_geometry(const Image& img, const AugmentDraw& d) {
  const Warp warp(img.height, img.width, d);
  if (!d.hflip && !d.vflip && !warp.rotates()) return img;
  Image out(img.channels, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double sy, sx;
      warp.source(y, x, sy, sx);
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, img.height - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, img.width - 1);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double fy = sy - y0, fx = sx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1);
        const double bot = (1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  return out;
}

Mask apply_geometry(const Mask& m, const AugmentDraw& d) {
  const Warp warp(m.height, m.width, d);
  if (!d.hflip && !d.vflip && !warp.rotates()) return m;
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      double sy, sx;
      warp.source(y, x, sy, sx);
      const int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, m.height - 1);
      const int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, m.width - 1);
      out.at(y, x) = m.at(iy, ix);
    }
  return out;
}

Image apply_photometric(const Image& img, const AugmentDraw& d) {
  if (d.brightness == 1.0 && d.contrast == 1.0) return img;
  double mean = 0;
  for (float v : img.px) mean += v;
  mean /= std::max<std::size_t>(1, img.px.size());
  Image out = img;
  for (auto& v : out.px) {
    const double c = d.contrast * (v - mean) + mean;
    v = static_cast<float>(std::clamp(c * d.brightness, 0.0, 1.0));
  }
  return out;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const AugmentDraw d = draw_augment(cfg, rng);
  Sample out;
  out.name = s.name;
  out.image = apply_photometric(apply_geometry(s.image, d), d);
  if (!s.label.empty()) out.label = apply_geometry(s.label, d);
  if (!s.fov.empty()) out.fov = apply_geometry(s.fov, d);
  return out;
}

}  // namespace lwnet
