#include "lwnet/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "lwnet/parallel.hpp"
#include "lwnet/resample.hpp"

namespace lwnet {

template <typename T>
BasicBatchNormState<T> BasicBatchNormState<T>::fresh(int channels) {
  BasicBatchNormState s = uninitialized(channels);
  s.running_mean.assign(channels, T(0));
  s.running_var.assign(channels, T(1));
  return s;
}

template <typename T>
BasicBatchNormState<T> BasicBatchNormState<T>::uninitialized(int channels) {
  BasicBatchNormState s;
  s.gamma = BasicTensor<T>::full({1, channels, 1, 1}, T(1), true);
  s.beta = BasicTensor<T>::full({1, channels, 1, 1}, T(0), true);
  return s;
}

template struct BasicBatchNormState<float>;
template struct BasicBatchNormState<double>;

namespace ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Accumulator type for reductions.
using Acc = double;

// Reductions over independent lanes so the loop vectorizes; the lane split
// is fixed, so results do not depend on the machine.
constexpr int kLanes = 8;

template <typename T, typename F>
Acc lane_sum(std::size_t n, F&& term) {
  Acc lanes[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int l = 0; l < kLanes; ++l) lanes[l] += term(i + l);
  for (; i < n; ++i) lanes[0] += term(i);
  Acc s = 0;
  for (Acc v : lanes) s += v;
  return s;
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
}

// Patch matrix of a 3x3 zero-padded window over output rows [y0, y1):
// rows (ci, dy, dx), cols ((y - y0), x).
template <typename T>
void im2col3(const T* in, int channels, int h, int w, int y0, int y1, T* cols) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t band = static_cast<std::size_t>(y1 - y0) * w;
  for (int c = 0; c < channels; ++c) {
    const T* src = in + c * plane;
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        T* row = cols + (static_cast<std::size_t>(c) * 9 + dy * 3 + dx) * band;
        const int ox = dx - 1;
        const int x0 = std::max(0, -ox);
        const int x1 = std::min(w, w - ox);
        for (int y = y0; y < y1; ++y) {
          const int sy = y + dy - 1;
          T* dst = row + static_cast<std::size_t>(y - y0) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          std::fill(dst, dst + x0, T(0));
          std::copy(srow + x0 + ox, srow + x1 + ox, dst + x0);
          std::fill(dst + x1, dst + w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im3_add(const T* cols, int channels, int h, int w, int y0, int y1,
                 T* out) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t band = static_cast<std::size_t>(y1 - y0) * w;
  for (int c = 0; c < channels; ++c) {
    T* dst = out + c * plane;
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        const T* row =
            cols + (static_cast<std::size_t>(c) * 9 + dy * 3 + dx) * band;
        const int ox = dx - 1;
        const int x0 = std::max(0, -ox);
        const int x1 = std::min(w, w - ox);
        for (int y = y0; y < y1; ++y) {
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          const T* src = row + static_cast<std::size_t>(y - y0) * w;
          T* drow = dst + static_cast<std::size_t>(sy) * w;
          for (int x = x0; x < x1; ++x) drow[x + ox] += src[x];
        }
      }
    }
  }
}

// Image rows per im2col band, keeping the patch matrix cache-sized.
inline int band_rows(int rows, int w) {
  constexpr std::size_t target = 32768;  // elements
  return std::max<int>(1, static_cast<int>(target / (static_cast<std::size_t>(rows) * w)));
}

template <typename T>
void check_bias(const BasicTensor<T>& bias, int channels, const char* op) {
  if (bias.defined() && (bias.numel() != static_cast<std::size_t>(channels)))
    throw ShapeError(std::string(op) + ": bias has " +
                     std::to_string(bias.numel()) + " values, expected " +
                     std::to_string(channels));
}

// Sums per-sample partial gradients in sample order into dst.
template <typename T>
void reduce_partials(const std::vector<std::vector<T>>& partials,
                     std::span<T> dst) {
  for (const auto& p : partials)
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += p[i];
}

}  // namespace

template <typename T>
void require_finite(const BasicTensor<T>& x, const char* where) {
  for (T v : x.data())
    if (!std::isfinite(v))
      throw NumericError(std::string(where) + ": non-finite value");
}

template <typename T>
BasicTensor<T> conv2d(BasicTape<T>& tape, const BasicTensor<T>& input,
                      const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  const Shape is = input.shape();
  const Shape ws = weight.shape();
  if (ws.h != ws.w || (ws.h != 1 && ws.h != 3))
    throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " + ws.str());
  if (ws.c != is.c)
    throw ShapeError("conv2d: weight expects " + std::to_string(ws.c) +
                     " input channels, input has " + std::to_string(is.c));
  check_bias(bias, ws.n, "conv2d");
  require_finite(input, "conv2d input");

  const int co = ws.n, ci = is.c, k = ws.h;
  const int rows = ci * k * k;
  const std::size_t plane = is.plane();
  BasicTensor<T> out({is.n, co, is.h, is.w});
  const T* in_ptr = input.data().data();
  T* out_ptr = out.data_mut().data();
  CMapMat<T> wmat(weight.data().data(), co, rows);

  parallel_for(is.n, [&](int n) {
    const T* in_n = in_ptr + static_cast<std::size_t>(n) * ci * plane;
    MapMat<T> out_n(out_ptr + static_cast<std::size_t>(n) * co * plane, co,
                    plane);
    if (k == 1) {
      out_n.noalias() = wmat * CMapMat<T>(in_n, ci, plane);
    } else {
      const int br = band_rows(rows, is.w);
      std::vector<T> cols(static_cast<std::size_t>(rows) * br * is.w);
      for (int y0 = 0; y0 < is.h; y0 += br) {
        const int y1 = std::min(is.h, y0 + br);
        const std::size_t cnt = static_cast<std::size_t>(y1 - y0) * is.w;
        im2col3(in_n, ci, is.h, is.w, y0, y1, cols.data());
        out_n.middleCols(static_cast<std::size_t>(y0) * is.w, cnt).noalias() =
            wmat * CMapMat<T>(cols.data(), rows, cnt);
      }
    }
    if (bias.defined())
      for (int o = 0; o < co; ++o) out_n.row(o).array() += bias.data()[o];
  });

  if (!tape.wants_grad({&input, &weight, &bias})) return out;

  tape.record("conv2d", {input, weight, bias}, out, [=]() mutable {
    const T* gout = out.grad().data();
    const bool need_in = input.requires_grad();
    const bool need_w = weight.requires_grad();
    const bool need_b = bias.defined() && bias.requires_grad();
    T* gin = need_in ? input.grad_mut().data() : nullptr;
    CMapMat<T> wm(weight.data().data(), co, rows);
    std::vector<std::vector<T>> wpart(need_w ? is.n : 0);

    parallel_for(is.n, [&](int n) {
      CMapMat<T> gout_n(gout + static_cast<std::size_t>(n) * co * plane, co,
                        plane);
      const T* in_n = input.data().data() + static_cast<std::size_t>(n) * ci * plane;
      if (need_w) wpart[n].assign(static_cast<std::size_t>(co) * rows, T(0));
      if (k == 1) {
        if (need_w)
          MapMat<T>(wpart[n].data(), co, rows).noalias() =
              gout_n * CMapMat<T>(in_n, rows, plane).transpose();
        if (need_in)
          MapMat<T>(gin + static_cast<std::size_t>(n) * ci * plane, ci, plane)
              .noalias() += wm.transpose() * gout_n;
        return;
      }
      const int br = band_rows(rows, is.w);
      std::vector<T> cols(static_cast<std::size_t>(rows) * br * is.w);
      RowMat<T> gcols;
      for (int y0 = 0; y0 < is.h; y0 += br) {
        const int y1 = std::min(is.h, y0 + br);
        const std::size_t cnt = static_cast<std::size_t>(y1 - y0) * is.w;
        auto gblock = gout_n.middleCols(static_cast<std::size_t>(y0) * is.w, cnt);
        if (need_w) {
          im2col3(in_n, ci, is.h, is.w, y0, y1, cols.data());
          MapMat<T>(wpart[n].data(), co, rows).noalias() +=
              gblock * CMapMat<T>(cols.data(), rows, cnt).transpose();
        }
        if (need_in) {
          gcols.noalias() = wm.transpose() * gblock;
          col2im3_add(gcols.data(), ci, is.h, is.w, y0, y1,
                      gin + static_cast<std::size_t>(n) * ci * plane);
        }
      }
    });
    if (need_w) reduce_partials(wpart, weight.grad_mut());
    if (need_b) {
      auto gb = bias.grad_mut();
      for (int n = 0; n < is.n; ++n)
        for (int o = 0; o < co; ++o) {
          const T* g = gout + (static_cast<std::size_t>(n) * co + o) * plane;
          gb[o] += static_cast<T>(
              lane_sum<T>(plane, [g](std::size_t i) { return Acc(g[i]); }));
        }
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> upconv2x2(BasicTape<T>& tape, const BasicTensor<T>& input,
                         const BasicTensor<T>& weight,
                         const BasicTensor<T>& bias) {
  const Shape is = input.shape();
  const Shape ws = weight.shape();
  if (ws.h != 2 || ws.w != 2 || ws.n != is.c)
    throw ShapeError("upconv2x2: weight " + ws.str() +
                     " incompatible with input " + is.str());
  const int ci = is.c, co = ws.c;
  check_bias(bias, co, "upconv2x2");
  require_finite(input, "upconv2x2 input");

  const std::size_t plane = is.plane();
  const int oh = is.h * 2, ow = is.w * 2;
  // Rearranged weight: row (o, a, b), column i.
  auto rearrange = [ci, co](std::span<const T> w) {
    RowMat<T> m(co * 4, ci);
    for (int i = 0; i < ci; ++i)
      for (int o = 0; o < co; ++o)
        for (int t = 0; t < 4; ++t)
          m(o * 4 + t, i) = w[(static_cast<std::size_t>(i) * co + o) * 4 + t];
    return m;
  };
  const RowMat<T> wt = rearrange(weight.data());

  BasicTensor<T> out({is.n, co, oh, ow});
  T* out_ptr = out.data_mut().data();
  parallel_for(is.n, [&](int n) {
    CMapMat<T> in_n(input.data().data() + static_cast<std::size_t>(n) * ci * plane,
                    ci, plane);
    RowMat<T> tmp = wt * in_n;
    for (int o = 0; o < co; ++o) {
      const T b = bias.defined() ? bias.data()[o] : T(0);
      T* dst = out_ptr + (static_cast<std::size_t>(n) * co + o) * oh * ow;
      for (int t = 0; t < 4; ++t) {
        const int a = t / 2, bb = t % 2;
        const T* src = tmp.data() + static_cast<std::size_t>(o * 4 + t) * plane;
        for (int y = 0; y < is.h; ++y)
          for (int x = 0; x < is.w; ++x)
            dst[static_cast<std::size_t>(2 * y + a) * ow + 2 * x + bb] =
                src[static_cast<std::size_t>(y) * is.w + x] + b;
      }
    }
  });

  if (!tape.wants_grad({&input, &weight, &bias})) return out;

  tape.record("upconv2x2", {input, weight, bias}, out, [=]() mutable {
    const bool need_in = input.requires_grad();
    const bool need_w = weight.requires_grad();
    const bool need_b = bias.defined() && bias.requires_grad();
    const T* gout = out.grad().data();
    const RowMat<T> wt2 = rearrange(weight.data());
    T* gin = need_in ? input.grad_mut().data() : nullptr;
    std::vector<std::vector<T>> wpart(need_w ? is.n : 0);

    parallel_for(is.n, [&](int n) {
      RowMat<T> gtmp(co * 4, plane);
      for (int o = 0; o < co; ++o) {
        const T* src = gout + (static_cast<std::size_t>(n) * co + o) * oh * ow;
        for (int t = 0; t < 4; ++t) {
          const int a = t / 2, bb = t % 2;
          T* dst = gtmp.data() + static_cast<std::size_t>(o * 4 + t) * plane;
          for (int y = 0; y < is.h; ++y)
            for (int x = 0; x < is.w; ++x)
              dst[static_cast<std::size_t>(y) * is.w + x] =
                  src[static_cast<std::size_t>(2 * y + a) * ow + 2 * x + bb];
        }
      }
      if (need_in) {
        MapMat<T>(gin + static_cast<std::size_t>(n) * ci * plane, ci, plane)
            .noalias() += wt2.transpose() * gtmp;
      }
      if (need_w) {
        CMapMat<T> in_n(
            input.data().data() + static_cast<std::size_t>(n) * ci * plane, ci,
            plane);
        RowMat<T> gwt = gtmp * in_n.transpose();  // [co*4, ci]
        wpart[n].assign(static_cast<std::size_t>(ci) * co * 4, T(0));
        for (int i = 0; i < ci; ++i)
          for (int o = 0; o < co; ++o)
            for (int t = 0; t < 4; ++t)
              wpart[n][(static_cast<std::size_t>(i) * co + o) * 4 + t] =
                  gwt(o * 4 + t, i);
      }
    });
    if (need_w) reduce_partials(wpart, weight.grad_mut());
    if (need_b) {
      auto gb = bias.grad_mut();
      const std::size_t oplane = static_cast<std::size_t>(oh) * ow;
      for (int n = 0; n < is.n; ++n)
        for (int o = 0; o < co; ++o) {
          Acc s = 0;
          const T* g = gout + (static_cast<std::size_t>(n) * co + o) * oplane;
          for (std::size_t i = 0; i < oplane; ++i) s += g[i];
          gb[o] += static_cast<T>(s);
        }
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> batchnorm2d(BasicTape<T>& tape, const BasicTensor<T>& x,
                           BasicBatchNormState<T>& state, Mode mode) {
  const Shape s = x.shape();
  if (state.channels() != s.c)
    throw ShapeError("batchnorm2d: state has " +
                     std::to_string(state.channels()) + " channels, input has " +
                     std::to_string(s.c));
  if (mode == Mode::eval && !state.initialized())
    throw std::logic_error(
        "batchnorm2d: eval mode with uninitialised running statistics");

  const std::size_t plane = s.plane();
  const std::size_t count = static_cast<std::size_t>(s.n) * plane;
  std::vector<T> mean(s.c), invstd(s.c);
  const T* in = x.data().data();

  if (mode == Mode::train) {
    const bool first = !state.initialized();
    if (first) {
      state.running_mean.assign(s.c, T(0));
      state.running_var.assign(s.c, T(1));
    }
    for (int c = 0; c < s.c; ++c) {
      Acc sum = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = in + (static_cast<std::size_t>(n) * s.c + c) * plane;
        sum += lane_sum<T>(plane, [p](std::size_t i) { return Acc(p[i]); });
      }
      const Acc mu = sum / count;
      Acc sq = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = in + (static_cast<std::size_t>(n) * s.c + c) * plane;
        sq += lane_sum<T>(plane, [p, mu](std::size_t i) {
          const Acc d = p[i] - mu;
          return d * d;
        });
      }
      const Acc var = sq / count;
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const Acc unbiased = count > 1 ? sq / (count - 1) : var;
      if (first) {
        state.running_mean[c] = static_cast<T>(mu);
        state.running_var[c] = static_cast<T>(unbiased);
      } else {
        const double m = state.momentum;
        state.running_mean[c] =
            static_cast<T>((1 - m) * state.running_mean[c] + m * mu);
        state.running_var[c] =
            static_cast<T>((1 - m) * state.running_var[c] + m * unbiased);
      }
    }
  } else {
    for (int c = 0; c < s.c; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = static_cast<T>(
          1.0 / std::sqrt(static_cast<Acc>(state.running_var[c]) + state.eps));
    }
  }

  BasicTensor<T> out(s);
  BasicTensor<T> xhat(s);
  T* o = out.data_mut().data();
  T* xh = xhat.data_mut().data();
  const T* g = state.gamma.data().data();
  const T* b = state.beta.data().data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T v = (in[base + i] - mean[c]) * invstd[c];
        xh[base + i] = v;
        o[base + i] = g[c] * v + b[c];
      }
    }

  BasicTensor<T> gamma = state.gamma, beta = state.beta;
  if (!tape.wants_grad({&x, &gamma, &beta})) return out;

  tape.record("batchnorm2d", {x, gamma, beta}, out, [=]() mutable {
    const T* gy = out.grad().data();
    const T* xv = xhat.data().data();
    const T* gm = gamma.data().data();
    std::vector<Acc> sum_gy(s.c, 0), sum_gy_xhat(s.c, 0);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        const T* gp = gy + base;
        const T* xp = xv + base;
        sum_gy[c] += lane_sum<T>(plane, [gp](std::size_t i) { return Acc(gp[i]); });
        sum_gy_xhat[c] += lane_sum<T>(
            plane, [gp, xp](std::size_t i) { return Acc(gp[i]) * xp[i]; });
      }
    if (gamma.requires_grad()) {
      auto gg = gamma.grad_mut();
      for (int c = 0; c < s.c; ++c) gg[c] += static_cast<T>(sum_gy_xhat[c]);
    }
    if (beta.requires_grad()) {
      auto gb = beta.grad_mut();
      for (int c = 0; c < s.c; ++c) gb[c] += static_cast<T>(sum_gy[c]);
    }
    if (!x.requires_grad()) return;
    T* gx = x.grad_mut().data();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        const T scale = static_cast<T>(static_cast<Acc>(gm[c]) * invstd[c]);
        if (mode == Mode::eval) {
          for (std::size_t i = 0; i < plane; ++i)
            gx[base + i] += scale * gy[base + i];
        } else {
          const T mg = static_cast<T>(sum_gy[c] / count);
          const T mgx = static_cast<T>(sum_gy_xhat[c] / count);
          for (std::size_t i = 0; i < plane; ++i)
            gx[base + i] += scale * (gy[base + i] - mg - xv[base + i] * mgx);
        }
      }
  });
  return out;
}

template <typename T>
BasicTensor<T> relu(BasicTape<T>& tape, const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto o = out.data_mut();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  if (!tape.wants_grad({&x})) return out;
  tape.record("relu", {x}, out, [=]() mutable {
    auto gy = out.grad();
    auto xv = x.data();
    auto gx = x.grad_mut();
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx[i] += xv[i] > T(0) ? gy[i] : T(0);
  });
  return out;
}

namespace {
template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}
}  // namespace

template <typename T>
BasicTensor<T> sigmoid(BasicTape<T>& tape, const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto o = out.data_mut();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = stable_sigmoid(in[i]);
  if (!tape.wants_grad({&x})) return out;
  tape.record("sigmoid", {x}, out, [=]() mutable {
    auto gy = out.grad();
    auto p = out.data();
    auto gx = x.grad_mut();
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx[i] += gy[i] * p[i] * (T(1) - p[i]);
  });
  return out;
}

template <typename T>
BasicTensor<T> add(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
  if (!tape.wants_grad({&a, &b})) return out;
  tape.record("add", {a, b}, out, [=]() mutable {
    auto gy = out.grad();
    for (auto* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = t->grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> mul(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  BasicTensor<T> out(a.shape());
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  if (!tape.wants_grad({&a, &b})) return out;
  tape.record("mul", {a, b}, out, [=]() mutable {
    auto gy = out.grad();
    if (a.requires_grad()) {
      auto g = a.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto g = b.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * a.data()[i];
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> sum(BasicTape<T>& tape, const BasicTensor<T>& x) {
  Acc s = 0;
  for (T v : x.data()) s += v;
  auto out = BasicTensor<T>::scalar(static_cast<T>(s));
  if (!tape.wants_grad({&x})) return out;
  tape.record("sum", {x}, out, [=]() mutable {
    const T gy = out.grad()[0];
    for (T& g : x.grad_mut()) g += gy;
  });
  return out;
}

template <typename T>
BasicTensor<T> maxpool2(BasicTape<T>& tape, const BasicTensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 || s.w % 2)
    throw ShapeError("maxpool2: odd spatial size " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  BasicTensor<T> out(os);
  std::vector<std::size_t> argmax(os.numel());
  auto in = x.data();
  auto o = out.data_mut();
  std::size_t k = 0;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * s.plane();
    for (int y = 0; y < os.h; ++y)
      for (int xx = 0; xx < os.w; ++xx, ++k) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * s.w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx =
                base + static_cast<std::size_t>(2 * y + dy) * s.w + 2 * xx + dx;
            if (in[idx] > in[best]) best = idx;
          }
        argmax[k] = best;
        o[k] = in[best];
      }
  }
  if (!tape.wants_grad({&x})) return out;
  tape.record("maxpool2", {x}, out, [=]() mutable {
    auto gy = out.grad();
    auto gx = x.grad_mut();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
  });
  return out;
}

template <typename T>
BasicTensor<T> upsample2_bilinear(BasicTape<T>& tape, const BasicTensor<T>& x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  const LinearTaps ty(s.h, os.h), tx(s.w, os.w);
  BasicTensor<T> out(os);
  auto in = x.data();
  auto o = out.data_mut();
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = in.data() + static_cast<std::size_t>(nc) * s.plane();
    T* dst = o.data() + static_cast<std::size_t>(nc) * os.plane();
    for (int y = 0; y < os.h; ++y) {
      const T fy = static_cast<T>(ty.frac[y]);
      const T* r0 = src + static_cast<std::size_t>(ty.lo[y]) * s.w;
      const T* r1 = src + static_cast<std::size_t>(ty.hi[y]) * s.w;
      for (int xx = 0; xx < os.w; ++xx) {
        const T fx = static_cast<T>(tx.frac[xx]);
        const T top = (T(1) - fx) * r0[tx.lo[xx]] + fx * r0[tx.hi[xx]];
        const T bot = (T(1) - fx) * r1[tx.lo[xx]] + fx * r1[tx.hi[xx]];
        dst[static_cast<std::size_t>(y) * os.w + xx] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  if (!tape.wants_grad({&x})) return out;
  tape.record("upsample2_bilinear", {x}, out, [=]() mutable {
    auto gy = out.grad();
    auto gx = x.grad_mut();
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      const T* g = gy.data() + static_cast<std::size_t>(nc) * os.plane();
      T* d = gx.data() + static_cast<std::size_t>(nc) * s.plane();
      for (int y = 0; y < os.h; ++y) {
        const T fy = static_cast<T>(ty.frac[y]);
        T* r0 = d + static_cast<std::size_t>(ty.lo[y]) * s.w;
        T* r1 = d + static_cast<std::size_t>(ty.hi[y]) * s.w;
        for (int xx = 0; xx < os.w; ++xx) {
          const T fx = static_cast<T>(tx.frac[xx]);
          const T v = g[static_cast<std::size_t>(y) * os.w + xx];
          r0[tx.lo[xx]] += (T(1) - fy) * (T(1) - fx) * v;
          r0[tx.hi[xx]] += (T(1) - fy) * fx * v;
          r1[tx.lo[xx]] += fy * (T(1) - fx) * v;
          r1[tx.hi[xx]] += fy * fx * v;
        }
      }
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> concat_channels(BasicTape<T>& tape, const BasicTensor<T>& a,
                               const BasicTensor<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  BasicTensor<T> out(os);
  const std::size_t la = static_cast<std::size_t>(sa.c) * sa.plane();
  const std::size_t lb = static_cast<std::size_t>(sb.c) * sb.plane();
  auto o = out.data_mut();
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.data().data() + n * la, la, o.data() + n * (la + lb));
    std::copy_n(b.data().data() + n * lb, lb, o.data() + n * (la + lb) + la);
  }
  if (!tape.wants_grad({&a, &b})) return out;
  tape.record("concat_channels", {a, b}, out, [=]() mutable {
    auto gy = out.grad();
    if (a.requires_grad()) {
      auto g = a.grad_mut();
      for (int n = 0; n < sa.n; ++n)
        for (std::size_t i = 0; i < la; ++i) g[n * la + i] += gy[n * (la + lb) + i];
    }
    if (b.requires_grad()) {
      auto g = b.grad_mut();
      for (int n = 0; n < sa.n; ++n)
        for (std::size_t i = 0; i < lb; ++i)
          g[n * lb + i] += gy[n * (la + lb) + la + i];
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> softmax_channels(BasicTape<T>& tape, const BasicTensor<T>& x) {
  const Shape s = x.shape();
  if (s.c < 2) throw ShapeError("softmax_channels needs at least 2 channels");
  BasicTensor<T> out(s);
  const std::size_t plane = s.plane();
  auto in = x.data();
  auto o = out.data_mut();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = in[base + i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, in[base + c * plane + i]);
      Acc z = 0;
      for (int c = 0; c < s.c; ++c) z += std::exp(static_cast<Acc>(in[base + c * plane + i] - mx));
      for (int c = 0; c < s.c; ++c)
        o[base + c * plane + i] =
            static_cast<T>(std::exp(static_cast<Acc>(in[base + c * plane + i] - mx)) / z);
    }
  }
  if (!tape.wants_grad({&x})) return out;
  tape.record("softmax_channels", {x}, out, [=]() mutable {
    auto gy = out.grad();
    auto p = out.data();
    auto gx = x.grad_mut();
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        Acc dot = 0;
        for (int c = 0; c < s.c; ++c)
          dot += static_cast<Acc>(gy[base + c * plane + i]) * p[base + c * plane + i];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t k = base + c * plane + i;
          gx[k] += static_cast<T>(p[k] * (gy[k] - dot));
        }
      }
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> soft_cross_entropy(BasicTape<T>& tape,
                                  const BasicTensor<T>& logits,
                                  const BasicTensor<T>& targets,
                                  const BasicTensor<T>& mask) {
  const Shape s = logits.shape();
  require_same_shape(logits, targets, "soft_cross_entropy");
  const Shape ms = mask.shape();
  if (ms.n != s.n || ms.c != 1 || ms.h != s.h || ms.w != s.w)
    throw ShapeError("soft_cross_entropy: mask " + ms.str() +
                     " incompatible with logits " + s.str());
  for (T t : targets.data())
    if (!(t >= T(0) && t <= T(1)))
      throw std::invalid_argument("soft_cross_entropy: target outside [0,1]");
  Acc count = 0;
  for (T m : mask.data()) {
    if (m != T(0) && m != T(1))
      throw std::invalid_argument("soft_cross_entropy: mask must be 0/1");
    count += m;
  }
  if (count == 0)
    throw std::invalid_argument("soft_cross_entropy: mask selects no pixels");

  const std::size_t plane = s.plane();
  auto z = logits.data();
  auto t = targets.data();
  auto m = mask.data();
  // Per-element d(loss)/d(logit), already divided by the pixel count.
  std::vector<T> dz(z.size(), T(0));
  Acc total = 0;
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      if (m[static_cast<std::size_t>(n) * plane + i] == T(0)) continue;
      if (s.c == 1) {
        const Acc v = z[base + i], tv = t[base + i];
        const Acc softplus = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
        total += softplus - tv * v;
        dz[base + i] = static_cast<T>((stable_sigmoid(v) - tv) / count);
      } else {
        Acc mx = z[base + i];
        for (int c = 1; c < s.c; ++c) mx = std::max(mx, static_cast<Acc>(z[base + c * plane + i]));
        Acc se = 0, tsum = 0;
        for (int c = 0; c < s.c; ++c) {
          se += std::exp(z[base + c * plane + i] - mx);
          tsum += t[base + c * plane + i];
        }
        const Acc lse = mx + std::log(se);
        for (int c = 0; c < s.c; ++c) {
          const std::size_t k = base + c * plane + i;
          total += t[k] * (lse - z[k]);
          const Acc p = std::exp(z[k] - lse);
          dz[k] = static_cast<T>((p * tsum - t[k]) / count);
        }
      }
    }
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(total / count));
  if (!tape.wants_grad({&logits, &targets})) return out;
  tape.record("soft_cross_entropy", {logits, targets, mask}, out,
              [=, dz = std::move(dz)]() mutable {
                if (!logits.requires_grad()) return;
                const T gy = out.grad()[0];
                auto g = logits.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy * dz[i];
              });
  return out;
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, int first, int count) {
  const Shape s = x.shape();
  if (first < 0 || count < 0 || first + count > s.c)
    throw ShapeError("slice_channels: range out of bounds for " + s.str());
  BasicTensor<T> out({s.n, count, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    std::copy_n(x.data().data() + (static_cast<std::size_t>(n) * s.c + first) * plane,
                count * plane,
                out.data_mut().data() + static_cast<std::size_t>(n) * count * plane);
  return out;
}

template <typename T>
BasicTensor<T> flip(const BasicTensor<T>& x, Flip kind) {
  const Shape s = x.shape();
  const bool fh = kind == Flip::horizontal || kind == Flip::both;
  const bool fv = kind == Flip::vertical || kind == Flip::both;
  BasicTensor<T> out(s);
  auto in = x.data();
  auto o = out.data_mut();
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * s.plane();
    for (int y = 0; y < s.h; ++y) {
      const int sy = fv ? s.h - 1 - y : y;
      for (int xx = 0; xx < s.w; ++xx) {
        const int sx = fh ? s.w - 1 - xx : xx;
        o[base + static_cast<std::size_t>(y) * s.w + xx] =
            in[base + static_cast<std::size_t>(sy) * s.w + sx];
      }
    }
  }
  return out;
}

#define LWNET_INSTANTIATE_OPS(T)                                               \
  template void require_finite<T>(const BasicTensor<T>&, const char*);         \
  template BasicTensor<T> conv2d<T>(BasicTape<T>&, const BasicTensor<T>&,      \
                                    const BasicTensor<T>&,                     \
                                    const BasicTensor<T>&);                    \
  template BasicTensor<T> upconv2x2<T>(BasicTape<T>&, const BasicTensor<T>&,   \
                                       const BasicTensor<T>&,                  \
                                       const BasicTensor<T>&);                 \
  template BasicTensor<T> batchnorm2d<T>(BasicTape<T>&, const BasicTensor<T>&, \
                                         BasicBatchNormState<T>&, Mode);       \
  template BasicTensor<T> relu<T>(BasicTape<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> sigmoid<T>(BasicTape<T>&, const BasicTensor<T>&);    \
  template BasicTensor<T> add<T>(BasicTape<T>&, const BasicTensor<T>&,         \
                                 const BasicTensor<T>&);                       \
  template BasicTensor<T> mul<T>(BasicTape<T>&, const BasicTensor<T>&,         \
                                 const BasicTensor<T>&);                       \
  template BasicTensor<T> sum<T>(BasicTape<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> maxpool2<T>(BasicTape<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> upsample2_bilinear<T>(BasicTape<T>&,                 \
                                                const BasicTensor<T>&);        \
  template BasicTensor<T> concat_channels<T>(                                  \
      BasicTape<T>&, const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> softmax_channels<T>(BasicTape<T>&,                   \
                                              const BasicTensor<T>&);          \
  template BasicTensor<T> soft_cross_entropy<T>(                               \
      BasicTape<T>&, const BasicTensor<T>&, const BasicTensor<T>&,             \
      const BasicTensor<T>&);                                                  \
  template BasicTensor<T> slice_channels<T>(const BasicTensor<T>&, int, int);  \
  template BasicTensor<T> flip<T>(const BasicTensor<T>&, Flip);

LWNET_INSTANTIATE_OPS(float)
LWNET_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace lwnet
