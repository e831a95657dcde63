#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "lwnet/data_io.hpp"
#include "lwnet/netbuilder.hpp"

namespace lwnet {

struct TrainConfig {
  int batch_size = 4;
  double lr0 = 1e-2;
  double lr_min = 1e-8;
  int epochs_per_cycle = 50;
  int total_iterations = 4000;
  int cycles_multiplier = 1;  // 2 for artery/vein runs
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Iteration bookkeeping of a run: cycles are whole multiples of epochs.
struct TrainPlan {
  int iterations_per_epoch = 0;
  int iterations_per_cycle = 0;
  int cycles = 0;
  int total_iterations() const { return cycles * iterations_per_cycle; }
};

/// cycles = max(1, round(total_iterations * cycles_multiplier / iterations_per_cycle)).
TrainPlan plan_training(const TrainConfig& cfg, int n_train);

/// lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2; exact at both ends.
double cosine_lr(int t, int T, double lr0, double lr_min);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<float>> m, v;
};

/// Bias-corrected Adam update of every parameter from its grad buffer
/// (parameters without a gradient count as zero gradient). A non-finite
/// gradient throws NumericError before anything is modified.
void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr);

/// One training pair at training resolution. Hard labels are class ids;
/// a non-empty `soft` holds per-class target planes in [0,1] instead.
struct TrainExample {
  std::string name;
  Image image;
  Mask label;
  Image soft;
  Mask fov;
};

TrainExample to_example(const Sample& s);
/// Loss target planes of an example after augmentation.
Image example_target(const TrainExample& e, int classes);
/// Same geometric draw on image and labels; photometric on the image only.
TrainExample augment_example(const TrainExample& e, const AugmentDraw& d);

struct Provenance {
  std::string kind = "train";  // "train" or "adapt"
  std::string dataset_id;
  std::uint64_t seed = 0;
  int iterations = 0;
  int cycles = 0;
  int best_cycle = -1;
  std::string threshold_source;
  std::string parent_id;          // adapted checkpoints: source checkpoint
  std::string target_dataset_id;  // adapted checkpoints: target dataset
  bool operator==(const Provenance&) const = default;
};

struct Checkpoint {
  ModelConfig arch;
  int train_height = 0;
  int train_width = 0;
  ModelState state;
  double best_val_auc = 0;
  double threshold = 0.5;
  Provenance provenance;
};

Checkpoint make_checkpoint(Model& model, int train_height, int train_width);
/// Rebuilds the network and loads the stored weights and statistics.
Model load_model(const Checkpoint& ckpt);

/// "LWNT1\n", u64 LE header length, JSON header, LE float32 tensor data.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// 16 hex digits identifying the encoded checkpoint.
std::string checkpoint_id(const Checkpoint& ckpt);

// ---- inference --------------------------------------------------------------

Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t, int n = 0);

/// Mean of the class probabilities over identity, h-, v- and hv-flipped
/// inputs, each flipped back. `x` is [1, C, H, W].
Tensor tta_predict(Model& model, const Tensor& x);
/// Probability maps of a native-resolution image: resize to the training
/// resolution (0 keeps native), reflect-pad to the size multiple, TTA, crop,
/// resize back and clamp to [0,1].
Image predict_native(Model& model, const Image& image, int train_height, int train_width,
                     bool tta = true);

// ---- training -----------------------------------------------------------------

struct IterationRecord {
  int iteration = 0;
  int cycle = 0;
  double lr = 0;
  double loss = 0;
};

struct CycleRecord {
  int cycle = 0;
  int iteration = 0;  // iterations done so far
  double val_auc = 0;
  bool best = false;
};

struct TrainHooks {
  /// Schedule, batching and selection only: no forward/backward pass.
  bool dry_run = false;
  /// Replaces the validation AUC of a cycle.
  std::function<double(int cycle)> auc_override;
  std::function<void(const IterationRecord&)> on_iteration;
  std::function<void(const CycleRecord&)> on_cycle_end;
  /// JSON lines: one record per iteration, plus val_auc at cycle ends.
  std::ostream* log = nullptr;
};

struct TrainData {
  std::vector<TrainExample> train;  // training resolution
  std::vector<Sample> val;          // training resolution
  /// Native-resolution training images for the Dice-optimal threshold;
  /// when empty the labelled training examples are used as they are.
  std::vector<Sample> threshold_set;
  std::string dataset_id;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainPlan plan;
  std::vector<double> lr_trace;
  std::vector<double> loss_trace;
  std::vector<double> cycle_aucs;
};

/// Validation AUC of the final-stage vessel probability, FOV-masked, no TTA.
double validation_auc(Model& model, const std::vector<Sample>& val);

/// Training-set Dice-optimal threshold (TTA predictions).
double derive_threshold(Model& model, const std::vector<Sample>& native, int train_height,
                        int train_width);
double derive_threshold(Model& model, const std::vector<TrainExample>& examples);

/// Loss of one batch: summed soft cross-entropy of every stage.
Tensor batch_loss(Model& model, Tape& tape, const Tensor& x, const Tensor& target);

/// Full recipe: Adam, cyclic cosine lr, best-of-cycle selection on the
/// validation AUC, threshold from the training set.
TrainResult train(Model& model, const TrainData& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// Images and targets of examples[idx] as [B, C, H, W] tensors.
std::pair<Tensor, Tensor> make_batch(const std::vector<TrainExample>& examples,
                                     const std::vector<int>& idx, int classes);

}  // namespace lwnet
