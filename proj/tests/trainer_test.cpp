#include "lwnet/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "lwnet/evaluator.hpp"
#include "lwnet/random.hpp"
#include "test_util.hpp"

using namespace lwnet;

namespace {

ModelConfig little(bool wnet = false) {
  ModelConfig c;
  c.unet.depth = 3;
  c.unet.base_width = 8;
  c.wnet = wnet;
  return c;
}

// Bright ridges on a dark disc: linearly separable by intensity.
Sample toy_sample(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Sample s;
  s.name = "toy" + std::to_string(seed);
  s.image = Image(3, size, size);
  s.label = Mask(size, size);
  s.fov = Mask(size, size);
  const double c = (size - 1) / 2.0, r = 0.46 * size;
  struct Line {
    double y0, x0, dy, dx;
  };
  std::vector<Line> lines;
  for (int k = 0; k < 5; ++k) {
    const double a = uniform(rng, 0, 6.283185307179586);
    lines.push_back({uniform(rng, 0.2, 0.8) * size, uniform(rng, 0.2, 0.8) * size, std::sin(a), std::cos(a)});
  }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if ((y - c) * (y - c) + (x - c) * (x - c) > r * r) continue;
      s.fov.at(y, x) = 1;
      bool on = false;
      for (const auto& l : lines) on |= std::abs((y - l.y0) * l.dx - (x - l.x0) * l.dy) < 1.0;
      s.label.at(y, x) = on;
      for (int ch = 0; ch < 3; ++ch)
        s.image.at(ch, y, x) = static_cast<float>((on ? 0.85 : 0.2) + 0.02 * normal01(rng));
    }
  return s;
}

std::vector<TrainExample> examples_of(const std::vector<Sample>& v) {
  std::vector<TrainExample> out;
  for (const auto& s : v) out.push_back(to_example(s));
  return out;
}

std::vector<Sample> toy_set(int n, int size, std::uint64_t seed) {
  std::vector<Sample> v;
  for (int i = 0; i < n; ++i) v.push_back(toy_sample(size, seed * 1000 + i));
  return v;
}

std::vector<TrainExample> blank_examples(int n, int size = 16) {
  std::vector<TrainExample> v(n);
  for (auto& e : v) {
    e.image = Image(3, size, size, 0.5f);
    e.label = Mask(size, size);
    e.fov = Mask(size, size, 1);
  }
  return v;
}

// Averages every spatial kernel over its flips, making the network
// equivariant under h- and v-flips.
void symmetrize(Model& model) {
  for (const auto& p : model.parameters()) {
    const Shape s = p.tensor.shape();
    if (s.h != s.w || s.h < 2) continue;
    auto d = p.tensor.data_mut();
    const int k = s.h;
    for (int a = 0; a < s.n * s.c; ++a) {
      float* w = d.data() + static_cast<std::size_t>(a) * k * k;
      std::vector<float> out(k * k);
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
          out[y * k + x] = 0.25f * (w[y * k + x] + w[y * k + (k - 1 - x)] + w[(k - 1 - y) * k + x] +
                                    w[(k - 1 - y) * k + (k - 1 - x)]);
      std::copy(out.begin(), out.end(), w);
    }
  }
}

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 200, 1e-2, 1e-8), 1e-2);
  EXPECT_EQ(cosine_lr(200, 200, 1e-2, 1e-8), 1e-8);
  EXPECT_NEAR(cosine_lr(100, 200, 1e-2, 1e-8), 5.000005e-3, 1e-15);
  EXPECT_THROW(cosine_lr(201, 200, 1e-2, 1e-8), std::invalid_argument);
  EXPECT_THROW(cosine_lr(-1, 200, 1e-2, 1e-8), std::invalid_argument);
}

TEST(CosineLr, MonotoneWithinCycle) {
  for (int t = 1; t <= 37; ++t) EXPECT_LT(cosine_lr(t, 37, 1e-2, 1e-8), cosine_lr(t - 1, 37, 1e-2, 1e-8));
}

TEST(Plan, DefaultRecipe) {
  TrainConfig cfg;
  const TrainPlan p = plan_training(cfg, 16);
  EXPECT_EQ(p.iterations_per_epoch, 4);
  EXPECT_EQ(p.iterations_per_cycle, 200);
  EXPECT_EQ(p.cycles, 20);
  EXPECT_EQ(p.total_iterations(), 4000);
  cfg.cycles_multiplier = 2;
  EXPECT_EQ(plan_training(cfg, 16).cycles, 40);
}

TEST(Plan, RoundingAndShortBatches) {
  TrainConfig cfg;
  EXPECT_EQ(plan_training(cfg, 17).iterations_per_epoch, 5);  // last batch of 1 kept
  EXPECT_EQ(plan_training(cfg, 17).cycles, 16);
  EXPECT_EQ(plan_training(cfg, 26).cycles, 11);  // 4000 / 350 = 11.4
  EXPECT_EQ(plan_training(cfg, 30).cycles, 10);  // 4000 / 400
  cfg.total_iterations = 10;
  EXPECT_EQ(plan_training(cfg, 16).cycles, 1);
  EXPECT_THROW(plan_training(cfg, 0), std::invalid_argument);
  cfg.lr_min = 0;
  EXPECT_THROW(plan_training(cfg, 16), std::invalid_argument);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor w({1, 1, 2, 2}, {1.0f, -2.0f, 3.0f, 0.5f}, true);
  w.grad_mut();
  AdamState s;
  adam_step({w}, s, 0.1);
  EXPECT_EQ(std::vector<float>(w.data().begin(), w.data().end()),
            (std::vector<float>{1.0f, -2.0f, 3.0f, 0.5f}));
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepHandValue) {
  Tensor w({1, 1, 1, 1}, {0.0f}, true);
  w.grad_mut()[0] = 1.0f;
  AdamState s;
  adam_step({w}, s, 0.1);
  EXPECT_NEAR(w.data()[0], -0.1 / (1 + 1e-8), 1e-8);
}

TEST(Adam, FirstStepIsSignOfGradient) {
  std::mt19937_64 rng(5);
  std::vector<float> init(64);
  for (auto& v : init) v = static_cast<float>(normal01(rng));
  Tensor w({1, 1, 8, 8}, init, true);
  auto g = w.grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = static_cast<float>((i % 2 ? 1 : -1) * std::pow(10.0, uniform(rng, -4, 3)));
  AdamState s;
  adam_step({w}, s, 0.01);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double step = w.data()[i] - init[i];
    EXPECT_NEAR(step, g[i] > 0 ? -0.01 : 0.01, 1e-6) << i;
  }
  for (const auto& v : s.v[0]) EXPECT_GE(v, 0.0f);
}

TEST(Adam, NonFiniteGradientAbortsStep) {
  Tensor a({1, 1, 1, 2}, {1.0f, 2.0f}, true), b({1, 1, 1, 1}, {3.0f}, true);
  a.grad_mut()[0] = 0.5f;
  AdamState s;
  adam_step({a, b}, s, 0.1);
  const std::vector<float> before(a.data().begin(), a.data().end());
  const auto m_before = s.m;
  b.grad_mut()[0] = std::nanf("");
  EXPECT_THROW(adam_step({a, b}, s, 0.1), NumericError);
  EXPECT_EQ(std::vector<float>(a.data().begin(), a.data().end()), before);
  EXPECT_EQ(s.m, m_before);
  EXPECT_EQ(s.step, 1);
}

TEST(Train, DryRunTraceIsPiecewiseCosine) {
  Model model = Model::build(little(), 1);
  TrainData data;
  data.train = blank_examples(16);
  TrainHooks hooks;
  hooks.dry_run = true;
  const TrainResult r = train(model, data, TrainConfig{}, hooks);
  ASSERT_EQ(r.lr_trace.size(), 4000u);
  EXPECT_EQ(r.plan.cycles, 20);
  EXPECT_EQ(r.cycle_aucs.size(), 20u);
  int resets = 0;
  for (std::size_t i = 0; i < r.lr_trace.size(); ++i) {
    if (r.lr_trace[i] == 1e-2) ++resets;
    if (i % 200) EXPECT_LT(r.lr_trace[i], r.lr_trace[i - 1]);
    EXPECT_GE(r.lr_trace[i], 1e-8);
  }
  EXPECT_EQ(resets, 20);
  EXPECT_EQ(*std::max_element(r.lr_trace.begin(), r.lr_trace.end()), 1e-2);
  EXPECT_EQ(r.checkpoint.provenance.iterations, 4000);
}

TEST(Train, InjectedAucSelectsBestCycle) {
  Model model = Model::build(little(), 2);
  TrainData data;
  data.train = examples_of(toy_set(4, 16, 1));
  TrainConfig cfg;
  cfg.epochs_per_cycle = 1;
  cfg.total_iterations = 5;
  cfg.batch_size = 4;
  const std::vector<double> injected{0.5, 0.7, 0.6, 0.9, 0.8};
  std::vector<ModelState> snapshots;
  TrainHooks hooks;
  hooks.auc_override = [&](int c) { return injected.at(c); };
  hooks.on_cycle_end = [&](const CycleRecord&) { snapshots.push_back(capture_state(model)); };
  std::ostringstream log;
  hooks.log = &log;
  const TrainResult r = train(model, data, cfg, hooks);
  EXPECT_EQ(r.cycle_aucs, injected);
  EXPECT_EQ(r.checkpoint.best_val_auc, 0.9);
  EXPECT_EQ(r.checkpoint.provenance.best_cycle, 3);
  ASSERT_EQ(snapshots.size(), 5u);
  const ModelState now = capture_state(model);
  for (std::size_t i = 0; i < now.entries.size(); ++i)
    EXPECT_EQ(now.entries[i].values, snapshots[3].entries[i].values) << now.entries[i].name;
  EXPECT_NE(snapshots[3].entries[0].values, snapshots[4].entries[0].values);
  EXPECT_EQ(r.checkpoint.best_val_auc,
            *std::max_element(r.cycle_aucs.begin(), r.cycle_aucs.end()));
  // 5 iteration lines + 5 cycle lines.
  int lines = 0;
  std::istringstream in(log.str());
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 10);
}

TEST(Train, WNetLossIsSumOfHeads) {
  Model model = Model::build(little(true), 3);
  const auto examples = examples_of(toy_set(2, 16, 2));
  const auto [x, y] = make_batch(examples, {0, 1}, 1);
  Tape tape;
  const float total = batch_loss(model, tape, x, y).item();
  Tape t2;
  const auto logits = model.forward(t2, x, Mode::train);
  ASSERT_EQ(logits.size(), 2u);
  const Tensor mask = Tensor::full({2, 1, 16, 16}, 1.0f);
  const float l1 = ops::soft_cross_entropy(t2, logits[0], y, mask).item();
  const float l2 = ops::soft_cross_entropy(t2, logits[1], y, mask).item();
  EXPECT_NEAR(total, l1 + l2, 1e-6);
  EXPECT_GT(l1, 0.0f);
  EXPECT_GT(l2, 0.0f);
}

TEST(Train, SoftTargetAtPredictionHasZeroGradient) {
  Model model = Model::build(little(), 4);
  const Sample s = toy_sample(16, 3);
  const Tensor x = image_to_tensor(s.image);
  const Tensor p = model.predict(x);  // eval mode, so use eval logits below
  Tape tape;
  const Tensor logits = model.forward(tape, x, Mode::eval).back();
  Tensor leaf = logits.clone();
  leaf.set_requires_grad(true);
  Tape t2;
  const Tensor loss = ops::soft_cross_entropy(t2, leaf, p, Tensor::full({1, 1, 16, 16}, 1.0f));
  backward(loss, t2);
  for (float g : leaf.grad()) EXPECT_NEAR(g, 0.0f, 1e-7);
}

TEST(Train, LearnsSeparableToySet) {
  Model model = Model::build(little(), 5);
  TrainData data;
  data.train = examples_of(toy_set(8, 32, 4));
  data.val = toy_set(4, 32, 5);
  data.dataset_id = "toy";
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.epochs_per_cycle = 50;  // 2 iterations/epoch -> 100 per cycle
  cfg.total_iterations = 500;
  const TrainResult r = train(model, data, cfg);
  EXPECT_EQ(r.loss_trace.size(), 500u);
  EXPECT_GE(r.checkpoint.best_val_auc, 0.99);
  const double first = std::accumulate(r.loss_trace.begin(), r.loss_trace.begin() + 50, 0.0) / 50;
  const double last = std::accumulate(r.loss_trace.end() - 50, r.loss_trace.end(), 0.0) / 50;
  EXPECT_LT(last, first);
  EXPECT_GE(r.checkpoint.threshold, 0.0);
  EXPECT_LE(r.checkpoint.threshold, 1.0);
  EXPECT_EQ(r.checkpoint.provenance.dataset_id, "toy");
  // Stored AUC is the best cycle-end AUC and matches the restored model.
  EXPECT_EQ(r.checkpoint.best_val_auc, *std::max_element(r.cycle_aucs.begin(), r.cycle_aucs.end()));
  EXPECT_EQ(validation_auc(model, data.val), r.checkpoint.best_val_auc);
}

TEST(Train, SameSeedSameCheckpoint) {
  auto run = [] {
    Model model = Model::build(little(), 6);
    TrainData data;
    data.train = examples_of(toy_set(5, 16, 6));
    data.val = toy_set(2, 16, 7);
    TrainConfig cfg;
    cfg.seed = 11;
    cfg.epochs_per_cycle = 3;
    cfg.total_iterations = 18;
    return train(model, data, cfg);
  };
  const TrainResult a = run(), b = run();
  EXPECT_EQ(a.cycle_aucs, b.cycle_aucs);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
}

TEST(Train, Errors) {
  Model model = Model::build(little(), 7);
  TrainData data;
  EXPECT_THROW(train(model, data, TrainConfig{}), std::invalid_argument);
  data.train = blank_examples(4);
  EXPECT_THROW(train(model, data, TrainConfig{}), std::invalid_argument);  // no validation split
  TrainConfig cfg;
  cfg.lr0 = 1e30;
  cfg.total_iterations = 4;
  cfg.epochs_per_cycle = 4;
  data.train = examples_of(toy_set(4, 16, 8));
  data.val = toy_set(1, 16, 9);
  EXPECT_THROW(train(model, data, cfg), NumericError);
}

TEST(Tta, FlipEquivariantModelMatchesPlainPrediction) {
  Model model = Model::build(little(), 8);
  symmetrize(model);
  Image img(3, 16, 16);
  std::mt19937_64 rng(1);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const float v = static_cast<float>(uniform01(rng));
        img.at(c, y, x) = img.at(c, 15 - y, x) = img.at(c, y, 15 - x) = img.at(c, 15 - y, 15 - x) = v;
      }
  const Tensor x = image_to_tensor(img);
  const Tensor a = tta_predict(model, x), b = model.predict(x);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
}

TEST(Tta, CommutesWithFlipsExactly) {
  Model model = Model::build(little(true), 9);
  const Tensor x = image_to_tensor(toy_sample(16, 10).image);
  const Tensor base = tta_predict(model, x);
  for (auto f : {ops::Flip::horizontal, ops::Flip::vertical, ops::Flip::both}) {
    const Tensor lhs = tta_predict(model, ops::flip(x, f));
    const Tensor rhs = ops::flip(base, f);
    EXPECT_TRUE(std::equal(lhs.data().begin(), lhs.data().end(), rhs.data().begin()));
  }
  for (float v : base.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(PredictNative, NoResamplingAtTrainingResolution) {
  Model model = Model::build(little(), 10);
  const Image img = toy_sample(32, 11).image;
  const Image a = predict_native(model, img, 32, 32);
  const Image b = tensor_to_image(tta_predict(model, image_to_tensor(img)));
  EXPECT_EQ(a, b);
}

TEST(PredictNative, NativeShapeAndConstantMap) {
  Model model = Model::build(little(), 11);
  // Zero final layer: every pixel predicts sigmoid(0) = 0.5.
  for (const auto& p : model.parameters())
    if (p.name.rfind("final.", 0) == 0) std::fill(p.tensor.data_mut().begin(), p.tensor.data_mut().end(), 0.0f);
  Image img(3, 605, 700, 0.3f);
  const Image out = predict_native(model, img, 512, 512);
  EXPECT_EQ(out.channels, 1);
  EXPECT_EQ(out.height, 605);
  EXPECT_EQ(out.width, 700);
  for (float v : out.px) ASSERT_EQ(v, 0.5f);
}

TEST(PredictNative, PadsSizesOffTheMultiple) {
  Model model = Model::build(little(), 12);
  const Image img = toy_sample(30, 13).image;
  const Image out = predict_native(model, img, 0, 0);
  EXPECT_EQ(out.height, 30);
  EXPECT_EQ(out.width, 30);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model model = Model::build(little(true), 13);
  Checkpoint c = make_checkpoint(model, 64, 64);
  c.best_val_auc = 0.987654321;
  c.threshold = 0.4242;
  c.provenance.dataset_id = "drive";
  c.provenance.seed = 0xffffffffffffffffULL;
  const std::string bytes = encode_checkpoint(c);
  const Checkpoint d = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(d), bytes);
  EXPECT_EQ(d.arch, c.arch);
  EXPECT_EQ(d.provenance, c.provenance);
  EXPECT_EQ(d.threshold, c.threshold);
  EXPECT_EQ(d.best_val_auc, c.best_val_auc);
  ASSERT_EQ(d.state.entries.size(), c.state.entries.size());
  for (std::size_t i = 0; i < c.state.entries.size(); ++i) {
    EXPECT_EQ(d.state.entries[i].name, c.state.entries[i].name);
    EXPECT_EQ(std::memcmp(d.state.entries[i].values.data(), c.state.entries[i].values.data(),
                          4 * c.state.entries[i].values.size()),
              0);
  }
  Model back = load_model(d);
  const Tensor x = image_to_tensor(toy_sample(16, 14).image);
  const Tensor p = model.predict(x), q = back.predict(x);
  EXPECT_TRUE(std::equal(p.data().begin(), p.data().end(), q.data().begin()));
}

TEST(Checkpoint, FileRoundTripAndSize) {
  lwnet::testing::TempDir dir;
  Model model = Model::build(little(), 15);
  const Checkpoint c = make_checkpoint(model, 512, 512);
  save_checkpoint(c, dir / "a.lwnt");
  const Checkpoint d = load_checkpoint(dir / "a.lwnt");
  save_checkpoint(d, dir / "b.lwnt");
  const auto size = std::filesystem::file_size(dir / "a.lwnt");
  EXPECT_EQ(size, std::filesystem::file_size(dir / "b.lwnt"));
  EXPECT_EQ(encode_checkpoint(d), encode_checkpoint(c));
  EXPECT_EQ(checkpoint_id(c), checkpoint_id(d));
  EXPECT_EQ(checkpoint_id(c).size(), 16u);
  // 34,201 weights plus running statistics as float32, and a small header.
  EXPECT_GT(size, 4u * 34201);
  EXPECT_LT(size, 300'000u);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  Model model = Model::build(little(), 16);
  Checkpoint c = make_checkpoint(model, 32, 32);
  const std::string bytes = encode_checkpoint(c);
  EXPECT_THROW(decode_checkpoint("LWNT2\n" + bytes.substr(6)), std::runtime_error);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 4)), std::runtime_error);
  EXPECT_THROW(decode_checkpoint(bytes + "xxxx"), std::runtime_error);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 20)), std::runtime_error);
  c.threshold = 1.5;
  EXPECT_THROW(encode_checkpoint(c), std::invalid_argument);
  Checkpoint other = make_checkpoint(model, 32, 32);
  other.arch.unet.base_width = 12;
  EXPECT_THROW(load_model(other), std::invalid_argument);
}
