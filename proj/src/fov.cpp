#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "lwnet/data_io.hpp"

namespace lwnet {
namespace {

constexpr int kLevels = 256;
// Frames whose brightest pixel is below this carry no retina.
constexpr int kDarkLevel = 10;

int otsu_level(const std::array<std::size_t, kLevels>& hist, std::size_t total) {
  double sum_all = 0;
  for (int i = 0; i < kLevels; ++i) sum_all += static_cast<double>(i) * hist[i];
  double sum_bg = 0, best = -1;
  std::size_t w_bg = 0;
  int level = 0;
  for (int t = 0; t < kLevels; ++t) {
    w_bg += hist[t];
    if (w_bg == 0) continue;
    const std::size_t w_fg = total - w_bg;
    if (w_fg == 0) break;
    sum_bg += static_cast<double>(t) * hist[t];
    const double m_bg = sum_bg / w_bg;
    const double m_fg = (sum_all - sum_bg) / w_fg;
    const double between = static_cast<double>(w_bg) * w_fg * (m_bg - m_fg) * (m_bg - m_fg);
    if (between > best) {
      best = between;
      level = t;
    }
  }
  return level;
}

// Keeps the largest 4-connected foreground component.
Mask largest_component(const Mask& m) {
  const int h = m.height, w = m.width;
  std::vector<int> label(m.size(), -1);
  std::vector<int> stack;
  int best_label = -1;
  std::size_t best_size = 0;
  int next = 0;
  for (int start = 0; start < static_cast<int>(m.size()); ++start) {
    if (!m.px[start] || label[start] >= 0) continue;
    std::size_t size = 0;
    stack.push_back(start);
    label[start] = next;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++size;
      const int y = p / w, x = p % w;
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
        const int idx = q[0] * w + q[1];
        if (m.px[idx] && label[idx] < 0) {
          label[idx] = next;
          stack.push_back(idx);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
    ++next;
  }
  Mask out(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) out.px[i] = label[i] == best_label ? 1 : 0;
  return out;
}

// Background reachable from the border stays background; the rest is filled.
Mask fill_holes(const Mask& m) {
  const int h = m.height, w = m.width;
  std::vector<std::uint8_t> outside(m.size(), 0);
  std::vector<int> stack;
  auto seed = [&](int y, int x) {
    const int idx = y * w + x;
    if (!m.px[idx] && !outside[idx]) {
      outside[idx] = 1;
      stack.push_back(idx);
    }
  };
  for (int x = 0; x < w; ++x) {
    seed(0, x);
    seed(h - 1, x);
  }
  for (int y = 0; y < h; ++y) {
    seed(y, 0);
    seed(y, w - 1);
  }
  while (!stack.empty()) {
    const int p = stack.back();
    stack.pop_back();
    const int y = p / w, x = p % w;
    if (y > 0) seed(y - 1, x);
    if (y + 1 < h) seed(y + 1, x);
    if (x > 0) seed(y, x - 1);
    if (x + 1 < w) seed(y, x + 1);
  }
  Mask out(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) out.px[i] = outside[i] ? 0 : 1;
  return out;
}

}  // namespace

Mask estimate_fov(const Image& img) {
  if (img.channels != 3) throw DataError("estimate_fov: need a 3-plane image");
  const std::size_t n = img.plane();
  std::vector<int> lum(n);
  std::array<std::size_t, kLevels> hist{};
  int lo = kLevels, hi = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = 0.299 * img.px[i] + 0.587 * img.px[n + i] + 0.114 * img.px[2 * n + i];
    lum[i] = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, kLevels - 1);
    ++hist[lum[i]];
    lo = std::min(lo, lum[i]);
    hi = std::max(hi, lum[i]);
  }
  if (n == 0 || hi < kDarkLevel) throw DataError("estimate_fov: all-dark image, empty mask");
  if (lo == hi) return Mask(img.height, img.width, 1);
  const int level = otsu_level(hist, n);
  Mask fg(img.height, img.width);
  for (std::size_t i = 0; i < n; ++i) fg.px[i] = lum[i] > level ? 1 : 0;
  return fill_holes(largest_component(fg));
}

}  // namespace lwnet
