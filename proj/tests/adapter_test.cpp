#include "lwnet/adapter.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "lwnet/evaluator.hpp"
#include "test_util.hpp"

using namespace lwnet;

namespace {

SynthParams params(std::uint64_t seed) {
  SynthParams p;
  p.height = p.width = 48;
  p.seed = seed;
  p.noise = 0.01;
  return p;
}

std::vector<Sample> synth_set(const SynthParams& p, int first, int n) {
  std::vector<Sample> v;
  for (int i = first; i < first + n; ++i) v.push_back(synth_sample(p, i));
  return v;
}

double test_auc(Model& model, const std::vector<Sample>& test) {
  std::vector<Image> probs;
  for (const auto& s : test) probs.push_back(vessel_probability(predict_native(model, s.image, 0, 0)));
  std::vector<ScoredImage> views;
  for (std::size_t i = 0; i < test.size(); ++i) views.push_back({&probs[i], &test[i].label, &test[i].fov});
  return roc_auc(accumulate_images(views));
}

// One small model trained on synthetic data, shared by the tests.
class AdapterTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const SynthParams p = params(21);
    source_train_ = new std::vector<Sample>(synth_set(p, 0, 8));
    source_val_ = new std::vector<Sample>(synth_set(p, 8, 2));
    source_test_ = new std::vector<Sample>(synth_set(p, 10, 3));
    ModelConfig mc;
    Model model = Model::build(mc, 3);
    TrainData data;
    for (const auto& s : *source_train_) data.train.push_back(to_example(s));
    data.val = *source_val_;
    data.dataset_id = "synth_a";
    TrainConfig cfg;
    cfg.seed = 4;
    cfg.epochs_per_cycle = 40;  // 2 iterations/epoch
    cfg.total_iterations = 240;
    ckpt_ = new Checkpoint(train(model, data, cfg).checkpoint);
  }
  static void TearDownTestSuite() {
    delete source_train_;
    delete source_val_;
    delete source_test_;
    delete ckpt_;
  }

  static std::vector<TrainExample> source_examples() {
    std::vector<TrainExample> v;
    for (const auto& s : *source_train_) v.push_back(to_example(s));
    return v;
  }

  static std::vector<Sample>* source_train_;
  static std::vector<Sample>* source_val_;
  static std::vector<Sample>* source_test_;
  static Checkpoint* ckpt_;
};

std::vector<Sample>* AdapterTest::source_train_ = nullptr;
std::vector<Sample>* AdapterTest::source_val_ = nullptr;
std::vector<Sample>* AdapterTest::source_test_ = nullptr;
Checkpoint* AdapterTest::ckpt_ = nullptr;

}  // namespace

TEST_F(AdapterTest, PseudoLabelsAreSoftAndDeterministic) {
  const PseudoLabelSet a = pseudo_label(*ckpt_, *source_test_, "t");
  const PseudoLabelSet b = pseudo_label(*ckpt_, *source_test_, "t");
  ASSERT_EQ(a.items.size(), source_test_->size());
  std::size_t intermediate = 0;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    EXPECT_EQ(a.items[i].soft, b.items[i].soft);
    EXPECT_TRUE(a.items[i].label.empty());
    for (float v : a.items[i].soft.px) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
      intermediate += v > 0.05f && v < 0.95f;
    }
  }
  EXPECT_GT(intermediate, 0u);
  EXPECT_EQ(a.source_id, checkpoint_id(*ckpt_));
}

TEST_F(AdapterTest, PseudoLabelsOnSourceTrainingImagesAgreeWithLabels) {
  const PseudoLabelSet set = pseudo_label(*ckpt_, *source_train_);
  ScoreAccumulator acc;
  for (std::size_t i = 0; i < set.items.size(); ++i)
    acc.accumulate(set.items[i].soft.px, (*source_train_)[i].label.px, (*source_train_)[i].fov.px);
  EXPECT_GE(roc_auc(acc), ckpt_->best_val_auc - 0.02);
}

TEST_F(AdapterTest, PseudoLabelErrors) {
  std::vector<Sample> wrong{resize_sample((*source_test_)[0], 32, 32)};
  EXPECT_THROW(pseudo_label(*ckpt_, wrong), std::invalid_argument);
  Sample grey = (*source_test_)[0];
  grey.image = Image(1, 48, 48, 0.5f);
  EXPECT_THROW(pseudo_label(*ckpt_, {grey}), std::invalid_argument);
}

TEST_F(AdapterTest, PseudoLabelFilesRoundTrip) {
  lwnet::testing::TempDir dir;
  const PseudoLabelSet set = pseudo_label(*ckpt_, *source_test_, "shifted");
  const DatasetManifest m = save_pseudo_labels(set, dir.path());
  EXPECT_EQ(m.label_kind, "soft");
  const PseudoLabelSet back = load_pseudo_labels(dir / "manifest.csv");
  ASSERT_EQ(back.items.size(), set.items.size());
  EXPECT_EQ(back.source_id, set.source_id);
  EXPECT_EQ(back.target_dataset_id, "shifted");
  for (std::size_t i = 0; i < set.items.size(); ++i) {
    EXPECT_EQ(back.items[i].fov, set.items[i].fov);
    for (std::size_t k = 0; k < set.items[i].soft.px.size(); ++k)
      ASSERT_NEAR(back.items[i].soft.px[k], set.items[i].soft.px[k], 0.5 / 65535 + 1e-7);
  }
}

TEST_F(AdapterTest, ConstantLearningRateAndProvenance) {
  const PseudoLabelSet target = pseudo_label(*ckpt_, *source_test_, "shifted");
  AdaptConfig cfg;
  cfg.extra_epochs = 2;
  cfg.seed = 1;
  const AdaptResult r = adapt(*ckpt_, source_examples(), *source_train_, target, cfg);
  // 8 source + 3 target examples, batch 4: 3 iterations per epoch.
  ASSERT_EQ(r.lr_trace.size(), 6u);
  for (double lr : r.lr_trace) EXPECT_EQ(lr, 1e-2 * 0.01);
  EXPECT_EQ(r.epoch_aucs.size(), 2u);
  EXPECT_EQ(r.checkpoint.best_val_auc, *std::max_element(r.epoch_aucs.begin(), r.epoch_aucs.end()));
  const Provenance& p = r.checkpoint.provenance;
  EXPECT_EQ(p.kind, "adapt");
  EXPECT_EQ(p.parent_id, checkpoint_id(*ckpt_));
  EXPECT_EQ(p.target_dataset_id, "shifted");
  EXPECT_EQ(p.dataset_id, "synth_a");
  EXPECT_GE(r.checkpoint.threshold, 0.0);
  EXPECT_LE(r.checkpoint.threshold, 1.0);
}

TEST_F(AdapterTest, SelfAdaptationDoesNotDrift) {
  const PseudoLabelSet target = pseudo_label(*ckpt_, *source_train_, "synth_a");
  AdaptConfig cfg;
  cfg.seed = 2;
  const AdaptResult r = adapt(*ckpt_, source_examples(), *source_train_, target, cfg);
  Model before = load_model(*ckpt_), after = load_model(r.checkpoint);
  EXPECT_NEAR(test_auc(after, *source_test_), test_auc(before, *source_test_), 0.005);
}

TEST_F(AdapterTest, Errors) {
  AdaptConfig cfg;
  EXPECT_THROW(adapt(*ckpt_, source_examples(), *source_train_, PseudoLabelSet{}, cfg),
               std::invalid_argument);
  cfg.extra_epochs = 0;
  const PseudoLabelSet target = pseudo_label(*ckpt_, *source_test_);
  EXPECT_THROW(adapt(*ckpt_, source_examples(), *source_train_, target, cfg), std::invalid_argument);
}

TEST(MergedAuc, SoftTargetsEqualToPredictionsScoreHigh) {
  Model model = Model::build(ModelConfig{}, 7);
  const Sample s = synth_sample(params(3), 0);
  TrainExample e;
  e.image = s.image;
  e.soft = tensor_to_image(model.predict(image_to_tensor(s.image)));
  e.fov = s.fov;
  // Ranking a soft target by itself: the AUC of a score against its own
  // probabilities exceeds one half whenever the scores vary.
  EXPECT_GT(merged_auc(model, {e}), 0.5);
}
