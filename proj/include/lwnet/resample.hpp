#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace lwnet {

/// Per-axis linear interpolation taps for resizing `in` samples to `out`
/// samples with half-pixel centers (corners not aligned). Output sample j
/// reads (1 - frac) * src[lo] + frac * src[hi].
struct LinearTaps {
  std::vector<int> lo;
  std::vector<int> hi;
  std::vector<double> frac;

  LinearTaps(int in, int out) : lo(out), hi(out), frac(out) {
    const double scale = static_cast<double>(in) / out;
    for (int j = 0; j < out; ++j) {
      double src = (j + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      int i0 = static_cast<int>(std::floor(src));
      if (i0 > in - 1) i0 = in - 1;
      lo[j] = i0;
      hi[j] = std::min(i0 + 1, in - 1);
      frac[j] = src - i0;
    }
  }
};

/// Nearest-neighbour source index for output sample j, same convention.
inline int nearest_source(int j, int in, int out) {
  const int i = static_cast<int>(std::floor((j + 0.5) * in / out));
  return std::clamp(i, 0, in - 1);
}

/// Reflection without edge repetition (..2 1 0 1 2..), for any offset.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace lwnet
