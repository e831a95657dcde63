#include "lwnet/netbuilder.hpp"

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "lwnet/random.hpp"

namespace lwnet {

void UNetConfig::validate() const {
  if (depth < 1 || base_width < 1 || in_channels < 1 || num_classes < 1)
    throw std::invalid_argument("UNetConfig: all fields must be positive");
  if (depth > 12) throw std::invalid_argument("UNetConfig: depth too large");
}

namespace {

template <typename T>
ConvLayer<T> make_conv(std::mt19937_64& rng, int in, int out, int k,
                       bool with_bias) {
  ConvLayer<T> layer;
  const double fan_in = static_cast<double>(in) * k * k;
  const double bound = std::sqrt(6.0 / fan_in);
  std::vector<T> w(static_cast<std::size_t>(out) * in * k * k);
  for (auto& v : w) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  layer.weight = BasicTensor<T>({out, in, k, k}, std::move(w), true);
  if (with_bias) layer.bias = BasicTensor<T>({1, out, 1, 1}, true);
  return layer;
}

template <typename T>
ConvLayer<T> make_upconv(std::mt19937_64& rng, int in, int out) {
  ConvLayer<T> layer;
  // Each output pixel sees `in` inputs through one kernel tap.
  const double bound = std::sqrt(6.0 / in);
  std::vector<T> w(static_cast<std::size_t>(in) * out * 4);
  for (auto& v : w) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  layer.weight = BasicTensor<T>({in, out, 2, 2}, std::move(w), true);
  layer.bias = BasicTensor<T>({1, out, 1, 1}, true);
  return layer;
}

template <typename T>
ResBlock<T> make_block(std::mt19937_64& rng, int in, int out) {
  ResBlock<T> b;
  b.conv1 = make_conv<T>(rng, in, out, 3, true);
  b.bn1 = BasicBatchNormState<T>::fresh(out);
  b.conv2 = make_conv<T>(rng, out, out, 3, true);
  b.bn2 = BasicBatchNormState<T>::fresh(out);
  b.shortcut = make_conv<T>(rng, in, out, 1, false);
  b.shortcut_bn = BasicBatchNormState<T>::fresh(out);
  return b;
}

template <typename T>
BasicTensor<T> run_block(BasicTape<T>& tape, ResBlock<T>& b,
                         const BasicTensor<T>& x, Mode mode) {
  auto h = ops::conv2d(tape, x, b.conv1.weight, b.conv1.bias);
  h = ops::batchnorm2d(tape, ops::relu(tape, h), b.bn1, mode);
  h = ops::conv2d(tape, h, b.conv2.weight, b.conv2.bias);
  h = ops::batchnorm2d(tape, ops::relu(tape, h), b.bn2, mode);
  auto s = ops::conv2d(tape, x, b.shortcut.weight, b.shortcut.bias);
  s = ops::batchnorm2d(tape, s, b.shortcut_bn, mode);
  return ops::add(tape, h, s);
}

template <typename T>
void push_conv(std::vector<NamedTensor<T>>& out, const std::string& name,
               const ConvLayer<T>& c) {
  out.push_back({name + ".weight", c.weight});
  if (c.bias.defined()) out.push_back({name + ".bias", c.bias});
}

template <typename T>
void push_bn(std::vector<NamedTensor<T>>& out, const std::string& name,
             const BasicBatchNormState<T>& bn) {
  out.push_back({name + ".gamma", bn.gamma});
  out.push_back({name + ".beta", bn.beta});
}

template <typename T>
void push_block(std::vector<NamedTensor<T>>& out, const std::string& name,
                const ResBlock<T>& b) {
  push_conv(out, name + ".conv1", b.conv1);
  push_bn(out, name + ".bn1", b.bn1);
  push_conv(out, name + ".conv2", b.conv2);
  push_bn(out, name + ".bn2", b.bn2);
  push_conv(out, name + ".shortcut", b.shortcut);
  push_bn(out, name + ".shortcut_bn", b.shortcut_bn);
}

template <typename T>
void push_bn_buffers(std::vector<NamedBuffer<T>>& out, const std::string& name,
                     BasicBatchNormState<T>& bn) {
  out.push_back({name + ".running_mean", &bn.running_mean});
  out.push_back({name + ".running_var", &bn.running_var});
}

template <typename T>
void push_block_buffers(std::vector<NamedBuffer<T>>& out,
                        const std::string& name, ResBlock<T>& b) {
  push_bn_buffers(out, name + ".bn1", b.bn1);
  push_bn_buffers(out, name + ".bn2", b.bn2);
  push_bn_buffers(out, name + ".shortcut_bn", b.shortcut_bn);
}

template <typename T>
std::size_t total(const std::vector<NamedTensor<T>>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace

template <typename T>
BasicUNet<T> BasicUNet<T>::build(const UNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  BasicUNet net;
  net.cfg_ = cfg;
  net.first_ = make_block<T>(rng, cfg.in_channels, cfg.width(0));
  for (int d = 1; d < cfg.depth; ++d)
    net.down_.push_back(make_block<T>(rng, cfg.width(d - 1), cfg.width(d)));
  for (int d = cfg.depth - 1; d >= 1; --d) {
    const int in = cfg.width(d), out = cfg.width(d - 1);
    DecoderStage<T> stage;
    stage.up = cfg.upsampling == Upsampling::transposed
                   ? make_upconv<T>(rng, in, out)
                   : make_conv<T>(rng, in, out, 1, true);
    stage.bridge.conv = make_conv<T>(rng, out, out, 3, true);
    stage.bridge.bn = BasicBatchNormState<T>::fresh(out);
    stage.block = make_block<T>(rng, 2 * out, out);
    net.up_.push_back(std::move(stage));
  }
  net.final_ = make_conv<T>(rng, cfg.width(0), cfg.num_classes, 1, true);
  return net;
}

template <typename T>
BasicTensor<T> BasicUNet<T>::forward(BasicTape<T>& tape, const Tensor& x,
                                     Mode mode) {
  const Shape s = x.shape();
  if (s.c != cfg_.in_channels)
    throw ShapeError("UNet expects " + std::to_string(cfg_.in_channels) +
                     " input channels, got " + std::to_string(s.c));
  const int m = cfg_.size_multiple();
  if (s.h % m || s.w % m)
    throw ShapeError("UNet input " + s.str() + " not divisible by " +
                     std::to_string(m));

  std::vector<Tensor> skips;
  Tensor h = run_block(tape, first_, x, mode);
  for (auto& block : down_) {
    skips.push_back(h);
    h = run_block(tape, block, ops::maxpool2(tape, h), mode);
  }
  for (std::size_t i = 0; i < up_.size(); ++i) {
    auto& stage = up_[i];
    const Tensor& skip = skips[skips.size() - 1 - i];
    Tensor u = cfg_.upsampling == Upsampling::transposed
                   ? ops::upconv2x2(tape, h, stage.up.weight, stage.up.bias)
                   : ops::conv2d(tape, ops::upsample2_bilinear(tape, h),
                                 stage.up.weight, stage.up.bias);
    Tensor b = ops::conv2d(tape, skip, stage.bridge.conv.weight,
                           stage.bridge.conv.bias);
    b = ops::batchnorm2d(tape, ops::relu(tape, b), stage.bridge.bn, mode);
    h = run_block(tape, stage.block, ops::concat_channels(tape, u, b), mode);
  }
  return ops::conv2d(tape, h, final_.weight, final_.bias);
}

template <typename T>
std::vector<int> BasicUNet<T>::level_widths() const {
  std::vector<int> w{first_.conv1.weight.shape().n};
  for (const auto& b : down_) w.push_back(b.conv1.weight.shape().n);
  return w;
}

template <typename T>
std::vector<NamedTensor<T>> BasicUNet<T>::parameters(
    const std::string& prefix) const {
  std::vector<NamedTensor<T>> out;
  push_block(out, prefix + "first", first_);
  for (std::size_t i = 0; i < down_.size(); ++i)
    push_block(out, prefix + "down." + std::to_string(i), down_[i]);
  for (std::size_t i = 0; i < up_.size(); ++i) {
    const std::string base = prefix + "up." + std::to_string(i);
    push_conv(out, base + ".up", up_[i].up);
    push_conv(out, base + ".bridge.conv", up_[i].bridge.conv);
    push_bn(out, base + ".bridge.bn", up_[i].bridge.bn);
    push_block(out, base + ".block", up_[i].block);
  }
  push_conv(out, prefix + "final", final_);
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> BasicUNet<T>::buffers(const std::string& prefix) {
  std::vector<NamedBuffer<T>> out;
  push_block_buffers(out, prefix + "first", first_);
  for (std::size_t i = 0; i < down_.size(); ++i)
    push_block_buffers(out, prefix + "down." + std::to_string(i), down_[i]);
  for (std::size_t i = 0; i < up_.size(); ++i) {
    const std::string base = prefix + "up." + std::to_string(i);
    push_bn_buffers(out, base + ".bridge.bn", up_[i].bridge.bn);
    push_block_buffers(out, base + ".block", up_[i].block);
  }
  return out;
}

template <typename T>
std::size_t BasicUNet<T>::count_params() const {
  return total(parameters());
}

template <typename T>
BasicWNet<T> BasicWNet<T>::build(const UNetConfig& cfg, std::uint64_t seed) {
  BasicWNet net;
  net.phi1_ = BasicUNet<T>::build(cfg, seed);
  UNetConfig second = cfg;
  second.in_channels = cfg.in_channels + cfg.num_classes;
  net.phi2_ = BasicUNet<T>::build(second, derive_seed(seed, 1));
  return net;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> BasicWNet<T>::forward(
    BasicTape<T>& tape, const Tensor& x, Mode mode) {
  Tensor logits1 = phi1_.forward(tape, x, mode);
  Tensor p1 = class_probabilities(tape, logits1);
  Tensor logits2 = phi2_.forward(tape, ops::concat_channels(tape, x, p1), mode);
  return {logits1, logits2};
}

template <typename T>
std::vector<NamedTensor<T>> BasicWNet<T>::parameters() const {
  auto out = phi1_.parameters("phi1.");
  auto second = phi2_.parameters("phi2.");
  out.insert(out.end(), second.begin(), second.end());
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> BasicWNet<T>::buffers() {
  auto out = phi1_.buffers("phi1.");
  auto second = phi2_.buffers("phi2.");
  out.insert(out.end(), second.begin(), second.end());
  return out;
}

template <typename T>
std::size_t BasicWNet<T>::count_params() const {
  return phi1_.count_params() + phi2_.count_params();
}

template <typename T>
BasicModel<T> BasicModel<T>::build(const ModelConfig& cfg, std::uint64_t seed) {
  BasicModel m;
  m.cfg_ = cfg;
  if (cfg.wnet)
    m.net_ = BasicWNet<T>::build(cfg.unet, seed);
  else
    m.net_ = BasicUNet<T>::build(cfg.unet, seed);
  return m;
}

template <typename T>
std::vector<BasicTensor<T>> BasicModel<T>::forward(BasicTape<T>& tape,
                                                   const Tensor& x, Mode mode) {
  if (cfg_.wnet) {
    auto [l1, l2] = wnet().forward(tape, x, mode);
    return {l1, l2};
  }
  return {unet().forward(tape, x, mode)};
}

template <typename T>
BasicTensor<T> BasicModel<T>::predict(const Tensor& x) {
  auto tape = BasicTape<T>::inference();
  auto logits = forward(tape, x, Mode::eval);
  return class_probabilities(tape, logits.back());
}

template <typename T>
std::vector<NamedTensor<T>> BasicModel<T>::parameters() const {
  return std::visit([](const auto& n) { return n.parameters(); }, net_);
}

template <typename T>
std::vector<NamedBuffer<T>> BasicModel<T>::buffers() {
  return std::visit([](auto& n) { return n.buffers(); }, net_);
}

template <typename T>
std::size_t BasicModel<T>::count_params() const {
  return std::visit([](const auto& n) { return n.count_params(); }, net_);
}

template <typename T>
std::vector<LayerCount> BasicModel<T>::parameter_breakdown() const {
  return layer_breakdown(parameters());
}

template <typename T>
BasicTensor<T> class_probabilities(BasicTape<T>& tape,
                                   const BasicTensor<T>& logits) {
  return logits.shape().c == 1 ? ops::sigmoid(tape, logits)
                               : ops::softmax_channels(tape, logits);
}

template <typename T>
std::vector<LayerCount> layer_breakdown(
    const std::vector<NamedTensor<T>>& params) {
  std::vector<LayerCount> out;
  for (const auto& p : params) {
    const auto dot = p.name.rfind('.');
    std::string layer = p.name.substr(0, dot);
    if (out.empty() || out.back().layer != layer) out.push_back({layer, 0});
    out.back().count += p.tensor.numel();
  }
  return out;
}

ModelState capture_state(BasicModel<float>& model) {
  ModelState state;
  for (const auto& p : model.parameters()) {
    auto d = p.tensor.data();
    state.entries.push_back({p.name, p.tensor.shape(), {d.begin(), d.end()}});
  }
  for (const auto& b : model.buffers()) {
    const int c = static_cast<int>(b.values->size());
    state.entries.push_back({b.name, {1, c, 1, 1}, *b.values});
  }
  return state;
}

void restore_state(BasicModel<float>& model, const ModelState& state) {
  auto params = model.parameters();
  auto buffers = model.buffers();
  if (state.entries.size() != params.size() + buffers.size())
    throw std::invalid_argument("restore_state: entry count mismatch");
  std::size_t i = 0;
  for (auto& p : params) {
    const auto& e = state.entries[i++];
    if (e.name != p.name || e.shape != p.tensor.shape())
      throw std::invalid_argument("restore_state: mismatch at " + p.name);
    std::copy(e.values.begin(), e.values.end(), p.tensor.data_mut().begin());
  }
  for (auto& b : buffers) {
    const auto& e = state.entries[i++];
    if (e.name != b.name)
      throw std::invalid_argument("restore_state: mismatch at " + b.name);
    *b.values = e.values;
  }
}

template class BasicUNet<float>;
template class BasicUNet<double>;
template class BasicWNet<float>;
template class BasicWNet<double>;
template class BasicModel<float>;
template class BasicModel<double>;
template BasicTensor<float> class_probabilities(BasicTape<float>&,
                                                const BasicTensor<float>&);
template BasicTensor<double> class_probabilities(BasicTape<double>&,
                                                 const BasicTensor<double>&);
template std::vector<LayerCount> layer_breakdown(
    const std::vector<NamedTensor<float>>&);
template std::vector<LayerCount> layer_breakdown(
    const std::vector<NamedTensor<double>>&);

}  // namespace lwnet
