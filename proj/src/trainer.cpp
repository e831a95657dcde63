#include "lwnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numbers>
#include <ostream>

#include "lwnet/evaluator.hpp"
#include "lwnet/parallel.hpp"
#include "lwnet/random.hpp"

namespace lwnet {

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr_min > 0 && lr0 > lr_min)) throw std::invalid_argument("need lr0 > lr_min > 0");
  if (epochs_per_cycle < 1) throw std::invalid_argument("epochs_per_cycle must be >= 1");
  if (total_iterations < 1) throw std::invalid_argument("total_iterations must be >= 1");
  if (cycles_multiplier < 1) throw std::invalid_argument("cycles_multiplier must be >= 1");
}

TrainPlan plan_training(const TrainConfig& cfg, int n_train) {
  cfg.validate();
  if (n_train < 1) throw std::invalid_argument("empty training split");
  TrainPlan p;
  p.iterations_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  p.iterations_per_cycle = cfg.epochs_per_cycle * p.iterations_per_epoch;
  const double want = static_cast<double>(cfg.total_iterations) * cfg.cycles_multiplier;
  p.cycles = std::max(1, static_cast<int>(std::lround(want / p.iterations_per_cycle)));
  return p;
}

double cosine_lr(int t, int T, double lr0, double lr_min) {
  if (T <= 0 || t < 0 || t > T) throw std::invalid_argument("cosine_lr: need 0 <= t <= T");
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * t / T));
  // Written as a blend so w = 1 and w = 0 give lr0 and lr_min exactly.
  return lr0 * w + lr_min * (1.0 - w);
}

void adam_step(const std::vector<Tensor>& params, AdamState& s, double lr) {
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), 0.0f);
      s.v.emplace_back(p.numel(), 0.0f);
    }
  }
  if (s.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (s.m[i].size() != params[i].numel()) throw ShapeError("adam_step: parameter shape changed");
    if (!params[i].has_grad()) continue;
    for (float g : params[i].grad())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient, step skipped");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data_mut();
    const bool has = params[i].has_grad();
    const std::span<const float> g = has ? params[i].grad() : std::span<const float>{};
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      const double mk = s.beta1 * m[k] + (1.0 - s.beta1) * gk;
      const double vk = s.beta2 * v[k] + (1.0 - s.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      w[k] = static_cast<float>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + s.eps));
    }
  }
}

// ---- examples -----------------------------------------------------------------

TrainExample to_example(const Sample& s) {
  return {s.name, s.image, s.label, {}, s.fov};
}

Image example_target(const TrainExample& e, int classes) {
  if (!e.soft.empty()) {
    if (e.soft.channels != classes) throw ShapeError("soft target has wrong class count");
    return e.soft;
  }
  if (e.label.empty()) throw std::invalid_argument("example " + e.name + " has no label");
  return label_to_target(e.label, classes);
}

TrainExample augment_example(const TrainExample& e, const AugmentDraw& d) {
  TrainExample out;
  out.name = e.name;
  out.image = apply_photometric(apply_geometry(e.image, d), d);
  if (!e.label.empty()) out.label = apply_geometry(e.label, d);
  if (!e.soft.empty()) {
    out.soft = apply_geometry(e.soft, d);
    for (auto& v : out.soft.px) v = std::clamp(v, 0.0f, 1.0f);
  }
  if (!e.fov.empty()) out.fov = apply_geometry(e.fov, d);
  return out;
}

std::pair<Tensor, Tensor> make_batch(const std::vector<TrainExample>& examples,
                                     const std::vector<int>& idx, int classes) {
  if (idx.empty()) throw std::invalid_argument("make_batch: empty batch");
  const auto& first = examples.at(idx[0]).image;
  const int n = static_cast<int>(idx.size());
  Tensor x({n, first.channels, first.height, first.width});
  Tensor y({n, classes, first.height, first.width});
  for (int b = 0; b < n; ++b) {
    const TrainExample& e = examples.at(idx[b]);
    if (e.image.channels != first.channels || e.image.height != first.height ||
        e.image.width != first.width)
      throw ShapeError("make_batch: examples differ in shape");
    const Image t = example_target(e, classes);
    if (t.height != first.height || t.width != first.width)
      throw ShapeError("make_batch: target shape differs from image");
    std::copy(e.image.px.begin(), e.image.px.end(), x.data_mut().begin() + x.index(b, 0, 0, 0));
    std::copy(t.px.begin(), t.px.end(), y.data_mut().begin() + y.index(b, 0, 0, 0));
  }
  return {x, y};
}

// ---- inference ------------------------------------------------------------------

Tensor image_to_tensor(const Image& img) {
  return Tensor({1, img.channels, img.height, img.width}, img.px);
}

Image tensor_to_image(const Tensor& t, int n) {
  const Shape& s = t.shape();
  Image img(s.c, s.h, s.w);
  const auto d = t.data();
  std::copy(d.begin() + t.index(n, 0, 0, 0), d.begin() + t.index(n, 0, 0, 0) + img.px.size(),
            img.px.begin());
  return img;
}

Tensor tta_predict(Model& model, const Tensor& x) {
  using ops::Flip;
  auto variant = [&](Flip f) { return ops::flip(model.predict(ops::flip(x, f)), f); };
  const Tensor a = model.predict(x), h = variant(Flip::horizontal);
  const Tensor v = variant(Flip::vertical), hv = variant(Flip::both);
  Tensor out(a.shape());
  auto o = out.data_mut();
  const auto pa = a.data(), ph = h.data(), pv = v.data(), phv = hv.data();
  // (id + h) + (v + hv): the pairing is closed under either flip, so the
  // result commutes with flips exactly.
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = std::clamp(((pa[i] + ph[i]) + (pv[i] + phv[i])) * 0.25f, 0.0f, 1.0f);
  return out;
}

Image predict_native(Model& model, const Image& image, int train_height, int train_width,
                     bool tta) {
  const int h = train_height > 0 ? train_height : image.height;
  const int w = train_width > 0 ? train_width : image.width;
  const bool resize = h != image.height || w != image.width;
  const Image input = resize ? resize_bilinear(image, h, w) : image;
  const int multiple = model.config().unet.size_multiple();
  const bool pad = h % multiple != 0 || w % multiple != 0;
  const Image padded = pad ? pad_to_multiple(input, multiple) : input;
  const Tensor x = image_to_tensor(padded);
  Image probs = tensor_to_image(tta ? tta_predict(model, x) : model.predict(x));
  if (pad) probs = crop(probs, h, w);
  if (resize) probs = resize_probs_native(probs, image.height, image.width);
  return probs;
}

// ---- training ---------------------------------------------------------------------

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kAugmentStream = 0x4147;

std::vector<Tensor> parameter_tensors(const Model& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

void write_json(std::ostream* os, const nlohmann::json& j) {
  if (os) *os << j.dump() << "\n" << std::flush;
}

}  // namespace

double validation_auc(Model& model, const std::vector<Sample>& val) {
  ScoreAccumulator acc;
  for (const auto& s : val) {
    const Image p = vessel_probability(tensor_to_image(model.predict(image_to_tensor(s.image))));
    acc.accumulate(p.px, s.label.px, s.fov.px);
  }
  return roc_auc(acc);
}

double derive_threshold(Model& model, const std::vector<Sample>& native, int train_height,
                        int train_width) {
  ScoreAccumulator acc;
  for (const auto& s : native) {
    if (s.label.empty()) continue;
    const Image p = vessel_probability(predict_native(model, s.image, train_height, train_width));
    acc.accumulate(p.px, s.label.px, s.fov.px);
  }
  return optimal_threshold(acc);
}

double derive_threshold(Model& model, const std::vector<TrainExample>& examples) {
  ScoreAccumulator acc;
  for (const auto& e : examples) {
    if (e.label.empty()) continue;
    const Image p = vessel_probability(tensor_to_image(tta_predict(model, image_to_tensor(e.image))));
    acc.accumulate(p.px, e.label.px, e.fov.px);
  }
  return optimal_threshold(acc);
}

Tensor batch_loss(Model& model, Tape& tape, const Tensor& x, const Tensor& target) {
  const Shape& s = x.shape();
  const Tensor mask = Tensor::full({s.n, 1, s.h, s.w}, 1.0f);
  Tensor total;
  for (const auto& logits : model.forward(tape, x, Mode::train)) {
    const Tensor l = ops::soft_cross_entropy(tape, logits, target, mask);
    total = total.defined() ? ops::add(tape, total, l) : l;
  }
  return total;
}

TrainResult train(Model& model, const TrainData& data, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  const int n = static_cast<int>(data.train.size());
  TrainResult r;
  r.plan = plan_training(cfg, n);
  const bool need_val = !hooks.dry_run && !hooks.auc_override;
  if (need_val && data.val.empty()) throw std::invalid_argument("empty validation split");
  const int classes = model.config().unet.num_classes;
  const auto params = parameter_tensors(model);
  const TrainPlan& plan = r.plan;

  AdamState adam;
  ModelState best_state;
  double best_auc = -1;
  int best_cycle = -1;
  int iteration = 0;
  for (int cycle = 0; cycle < plan.cycles; ++cycle) {
    for (int e = 0; e < cfg.epochs_per_cycle; ++e) {
      const int epoch = cycle * cfg.epochs_per_cycle + e;
      std::vector<int> order(n);
      for (int i = 0; i < n; ++i) order[i] = i;
      std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
      shuffle(order, shuffle_rng);
      for (int b = 0; b < plan.iterations_per_epoch; ++b) {
        const int t = e * plan.iterations_per_epoch + b;
        const double lr = cosine_lr(t, plan.iterations_per_cycle, cfg.lr0, cfg.lr_min);
        double loss_value = 0;
        if (!hooks.dry_run) {
          const int lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
          std::vector<TrainExample> batch(hi - lo);
          parallel_for(hi - lo, [&](int k) {
            const int idx = order[lo + k];
            const TrainExample& src = data.train[idx];
            if (!cfg.augment) {
              batch[k] = src;
              return;
            }
            std::mt19937_64 rng(derive_seed(cfg.seed, kAugmentStream, static_cast<std::uint64_t>(epoch),
                                            static_cast<std::uint64_t>(idx)));
            batch[k] = augment_example(src, draw_augment(cfg.augmentation, rng));
          });
          std::vector<int> all(batch.size());
          for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
          const auto [x, y] = make_batch(batch, all, classes);
          Tape tape;
          const Tensor loss = batch_loss(model, tape, x, y);
          loss_value = loss.item();
          if (!std::isfinite(loss_value))
            throw NumericError("non-finite loss at iteration " + std::to_string(iteration) +
                               " (cycle " + std::to_string(cycle) + ", lr " + std::to_string(lr) +
                               "); try a smaller lr0 or check the inputs");
          for (const auto& p : params) p.zero_grad();
          backward(loss, tape);
          adam_step(params, adam, lr);
        }
        r.lr_trace.push_back(lr);
        r.loss_trace.push_back(loss_value);
        const IterationRecord rec{iteration, cycle, lr, loss_value};
        if (hooks.on_iteration) hooks.on_iteration(rec);
        write_json(hooks.log, {{"iteration", iteration}, {"cycle", cycle}, {"lr", lr}, {"loss", loss_value}});
        ++iteration;
      }
    }
    const double auc = hooks.auc_override ? hooks.auc_override(cycle)
                       : hooks.dry_run    ? 0.0
                                          : validation_auc(model, data.val);
    r.cycle_aucs.push_back(auc);
    const bool best = best_cycle < 0 || auc > best_auc;
    if (best) {
      best_auc = auc;
      best_cycle = cycle;
      best_state = capture_state(model);
    }
    if (hooks.on_cycle_end) hooks.on_cycle_end({cycle, iteration, auc, best});
    write_json(hooks.log, {{"iteration", iteration}, {"cycle", cycle}, {"val_auc", auc}, {"best", best}});
  }
  restore_state(model, best_state);

  const Image& first = data.train.front().image;
  r.checkpoint = make_checkpoint(model, first.height, first.width);
  r.checkpoint.best_val_auc = best_auc;
  Provenance& prov = r.checkpoint.provenance;
  prov.dataset_id = data.dataset_id;
  prov.seed = cfg.seed;
  prov.iterations = iteration;
  prov.cycles = plan.cycles;
  prov.best_cycle = best_cycle;
  if (hooks.dry_run) {
    prov.threshold_source = "dry run";
  } else if (!data.threshold_set.empty()) {
    r.checkpoint.threshold = derive_threshold(model, data.threshold_set, first.height, first.width);
    prov.threshold_source = "training split " + data.dataset_id;
  } else {
    r.checkpoint.threshold = derive_threshold(model, data.train);
    prov.threshold_source = "training examples " + data.dataset_id;
  }
  return r;
}

}  // namespace lwnet
