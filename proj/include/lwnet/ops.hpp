#pragma once

#include <optional>
#include <vector>

#include "lwnet/tensor.hpp"

namespace lwnet {

enum class Mode { train, eval };

/// Learnable affine parameters and running statistics of one batch-norm
/// layer. Empty running vectors mean the statistics were never initialised.
template <typename T>
struct BasicBatchNormState {
  BasicTensor<T> gamma;  // [1, C, 1, 1]
  BasicTensor<T> beta;   // [1, C, 1, 1]
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  /// gamma = 1, beta = 0, running mean 0 / variance 1.
  static BasicBatchNormState fresh(int channels);
  /// Same affine init but no running statistics yet.
  static BasicBatchNormState uninitialized(int channels);

  int channels() const { return gamma.shape().c; }
  bool initialized() const { return !running_mean.empty(); }
};

using BatchNormState = BasicBatchNormState<float>;

namespace ops {

/// Stride-1 convolution with "same" zero padding; kernel must be 1x1 or 3x3.
/// weight is [Co, Ci, k, k]; bias ([1, Co, 1, 1]) may be undefined.
template <typename T>
BasicTensor<T> conv2d(BasicTape<T>& tape, const BasicTensor<T>& input,
                      const BasicTensor<T>& weight, const BasicTensor<T>& bias);

/// 2x2 stride-2 transposed convolution (learned x2 upsampling).
/// weight is [Ci, Co, 2, 2]; bias ([1, Co, 1, 1]) may be undefined.
template <typename T>
BasicTensor<T> upconv2x2(BasicTape<T>& tape, const BasicTensor<T>& input,
                         const BasicTensor<T>& weight,
                         const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> batchnorm2d(BasicTape<T>& tape, const BasicTensor<T>& x,
                           BasicBatchNormState<T>& state, Mode mode);

template <typename T>
BasicTensor<T> relu(BasicTape<T>& tape, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> sigmoid(BasicTape<T>& tape, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> add(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b);

/// Sum of all elements as a [1,1,1,1] tensor.
template <typename T>
BasicTensor<T> sum(BasicTape<T>& tape, const BasicTensor<T>& x);

/// 2x2 max pooling. Ties route the gradient to the first element in
/// row-major window order.
template <typename T>
BasicTensor<T> maxpool2(BasicTape<T>& tape, const BasicTensor<T>& x);

/// Bilinear x2 upsampling, corners not aligned.
template <typename T>
BasicTensor<T> upsample2_bilinear(BasicTape<T>& tape, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> concat_channels(BasicTape<T>& tape, const BasicTensor<T>& a,
                               const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> softmax_channels(BasicTape<T>& tape, const BasicTensor<T>& x);

/// Masked mean cross-entropy between logits and soft targets in [0,1].
/// One channel: sigmoid form. Several channels: softmax form over channels.
/// mask is [N,1,H,W] with values in {0,1}. Throws when the mask is empty.
template <typename T>
BasicTensor<T> soft_cross_entropy(BasicTape<T>& tape,
                                  const BasicTensor<T>& logits,
                                  const BasicTensor<T>& targets,
                                  const BasicTensor<T>& mask);

/// Channels [first, first + count) of x, no gradient.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, int first, int count);

enum class Flip { none, horizontal, vertical, both };

/// Mirrors the spatial axes, no gradient. Every flip is its own inverse.
template <typename T>
BasicTensor<T> flip(const BasicTensor<T>& x, Flip kind);

/// Throws NumericError if any value is NaN or infinite.
template <typename T>
void require_finite(const BasicTensor<T>& x, const char* where);

}  // namespace ops
}  // namespace lwnet
