#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lwnet/trainer.hpp"

namespace lwnet {

struct AdaptConfig {
  double lr0 = 1e-2;         // learning rate the source model was trained with
  double lr_scale = 0.01;    // fine-tuning runs at lr0 * lr_scale, constant
  int extra_epochs = 10;
  int batch_size = 4;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation;

  void validate() const;
  double lr() const { return lr0 * lr_scale; }
  bool operator==(const AdaptConfig&) const = default;
};

/// Soft predictions of a source model on unlabelled target images, kept as
/// probabilities (one plane per class), at the model's training resolution.
struct PseudoLabelSet {
  std::vector<TrainExample> items;  // image, soft, fov
  std::string source_id;            // checkpoint_id of the labelling model
  std::string target_dataset_id;
  int classes = 1;
};

/// Throws std::invalid_argument on a resolution or channel mismatch.
PseudoLabelSet pseudo_label(const Checkpoint& source, const std::vector<Sample>& target,
                            const std::string& target_dataset_id = "");

/// Writes images/, pseudo/ (16-bit, class planes stacked vertically), fov/
/// and a soft-label manifest.csv under `dir`.
DatasetManifest save_pseudo_labels(const PseudoLabelSet& set, const std::filesystem::path& dir);
/// Reads a soft-label manifest back (every split).
PseudoLabelSet load_pseudo_labels(const std::filesystem::path& manifest_path);

struct AdaptResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_aucs;  // soft AUC on the merged training set
  std::vector<double> lr_trace;
  std::vector<double> loss_trace;
};

/// AUC of the model's vessel probability (no TTA) over source examples with
/// hard labels and target examples with soft labels, pooled.
double merged_auc(Model& model, const std::vector<TrainExample>& examples);

/// Fine-tunes the source model on source labels plus target pseudo-labels,
/// selects the epoch with the best merged-set AUC and re-derives the
/// threshold on `source_native` (the source training split, native size).
AdaptResult adapt(const Checkpoint& source, const std::vector<TrainExample>& source_train,
                  const std::vector<Sample>& source_native, const PseudoLabelSet& target,
                  const AdaptConfig& cfg, std::ostream* log = nullptr);

}  // namespace lwnet
