#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "lwnet/ops.hpp"

namespace lwnet {

enum class Upsampling {
  transposed,  // 2x2 stride-2 transposed conv, halves channels
  bilinear,    // bilinear x2 followed by a 1x1 channel-halving conv
};

/// U-Net phi_{k,f0}. `depth` is the number of resolution levels k, so the
/// network pools k-1 times; level d carries f0 * 2^d filters.
struct UNetConfig {
  int depth = 3;
  int base_width = 8;
  int in_channels = 3;
  int num_classes = 1;
  Upsampling upsampling = Upsampling::transposed;

  int width(int level) const { return base_width << level; }
  /// Spatial sizes must be multiples of this.
  int size_multiple() const { return 1 << (depth - 1); }
  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

/// Either a single U-Net or a W-Net built from two U-Nets of the same shape.
struct ModelConfig {
  UNetConfig unet;
  bool wnet = false;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ConvLayer {
  BasicTensor<T> weight;
  BasicTensor<T> bias;  // undefined for bias-free projections
};

/// [3x3 conv -> ReLU -> BN] x 2 plus a 1x1 conv + BN shortcut from the
/// block input, summed at the output.
template <typename T>
struct ResBlock {
  ConvLayer<T> conv1, conv2, shortcut;
  BasicBatchNormState<T> bn1, bn2, shortcut_bn;
};

/// 3x3 conv -> ReLU -> BN applied to an encoder skip before concatenation.
template <typename T>
struct BridgeLayer {
  ConvLayer<T> conv;
  BasicBatchNormState<T> bn;
};

template <typename T>
struct DecoderStage {
  ConvLayer<T> up;
  BridgeLayer<T> bridge;
  ResBlock<T> block;
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

struct LayerCount {
  std::string layer;
  std::size_t count = 0;
};

template <typename T>
class BasicUNet {
 public:
  using Tensor = BasicTensor<T>;

  static BasicUNet build(const UNetConfig& cfg, std::uint64_t seed);

  /// Logits [N, num_classes, H, W]. H and W must be multiples of
  /// config().size_multiple().
  Tensor forward(BasicTape<T>& tape, const Tensor& x, Mode mode);

  const UNetConfig& config() const { return cfg_; }
  /// Filters per resolution level, top to bottom.
  std::vector<int> level_widths() const;

  /// Learnable tensors. Handles alias the model's storage.
  std::vector<NamedTensor<T>> parameters(const std::string& prefix = "") const;
  /// Batch-norm running statistics.
  std::vector<NamedBuffer<T>> buffers(const std::string& prefix = "");
  std::size_t count_params() const;

 private:
  UNetConfig cfg_;
  ResBlock<T> first_;
  std::vector<ResBlock<T>> down_;
  std::vector<DecoderStage<T>> up_;
  ConvLayer<T> final_;
};

/// Phi(x) = phi2(concat(x, p1)), p1 the probability map of phi1(x).
template <typename T>
class BasicWNet {
 public:
  using Tensor = BasicTensor<T>;

  static BasicWNet build(const UNetConfig& cfg, std::uint64_t seed);

  std::pair<Tensor, Tensor> forward(BasicTape<T>& tape, const Tensor& x,
                                    Mode mode);

  BasicUNet<T>& phi1() { return phi1_; }
  BasicUNet<T>& phi2() { return phi2_; }
  const BasicUNet<T>& phi1() const { return phi1_; }
  const BasicUNet<T>& phi2() const { return phi2_; }

  std::vector<NamedTensor<T>> parameters() const;
  std::vector<NamedBuffer<T>> buffers();
  std::size_t count_params() const;

 private:
  BasicUNet<T> phi1_, phi2_;
};

/// U-Net or W-Net behind one interface, as used by training and inference.
template <typename T>
class BasicModel {
 public:
  using Tensor = BasicTensor<T>;

  static BasicModel build(const ModelConfig& cfg, std::uint64_t seed);

  /// Logits of every stage, last one is the model's prediction.
  std::vector<Tensor> forward(BasicTape<T>& tape, const Tensor& x, Mode mode);
  /// Probability map of the final stage, computed without a tape.
  Tensor predict(const Tensor& x);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedTensor<T>> parameters() const;
  std::vector<NamedBuffer<T>> buffers();
  std::size_t count_params() const;
  std::vector<LayerCount> parameter_breakdown() const;

  bool is_wnet() const { return cfg_.wnet; }
  BasicUNet<T>& unet() { return std::get<BasicUNet<T>>(net_); }
  BasicWNet<T>& wnet() { return std::get<BasicWNet<T>>(net_); }

 private:
  ModelConfig cfg_;
  std::variant<BasicUNet<T>, BasicWNet<T>> net_;
};

/// Sigmoid for one class, channel softmax otherwise.
template <typename T>
BasicTensor<T> class_probabilities(BasicTape<T>& tape,
                                   const BasicTensor<T>& logits);

/// Groups a parameter list by layer (name up to the last '.').
template <typename T>
std::vector<LayerCount> layer_breakdown(const std::vector<NamedTensor<T>>& params);

/// Deep copy of every parameter and running statistic in model order.
/// Model copies share storage, so snapshots go through this.
struct ModelState {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };
  std::vector<Entry> entries;
};

ModelState capture_state(BasicModel<float>& model);
/// Throws std::invalid_argument if names or shapes disagree.
void restore_state(BasicModel<float>& model, const ModelState& state);

using UNet = BasicUNet<float>;
using WNet = BasicWNet<float>;
using Model = BasicModel<float>;

extern template class BasicUNet<float>;
extern template class BasicUNet<double>;
extern template class BasicWNet<float>;
extern template class BasicWNet<double>;
extern template class BasicModel<float>;
extern template class BasicModel<double>;

}  // namespace lwnet
