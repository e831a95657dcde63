#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lwnet/data_io.hpp"

namespace lwnet {

/// Streamed (score, label) statistics over FOV pixels: one histogram per
/// class over kBins score bins. Counts are `Weight`s so soft labels can add
/// fractional mass to both classes.
template <typename Weight>
class BasicScoreAccumulator {
 public:
  static constexpr int kBins = 65536;

  BasicScoreAccumulator();

  /// Bin of a score in [0,1]: floor(p * (kBins - 1) + 0.5).
  static int bin(float p);
  /// Lower boundary of bin j, max(0, (j - 0.5) / (kBins - 1)).
  static double boundary(int j);
  /// First bin counted positive by threshold t (scores with bin >= j).
  static int first_positive_bin(double t);

  void add(float p, Weight positive, Weight negative);
  void add_bin(int b, Weight positive, Weight negative);
  /// FOV pixels of one image. `labels` are 0/1 for hard accumulators.
  void accumulate(std::span<const float> probs, std::span<const std::uint8_t> labels,
                  std::span<const std::uint8_t> fov);
  /// Soft labels t in [0,1]: each pixel adds t positive and 1 - t negative.
  void accumulate_soft(std::span<const float> probs, std::span<const float> targets,
                       std::span<const std::uint8_t> fov);
  void merge(const BasicScoreAccumulator& other);

  const std::vector<Weight>& positives() const { return pos_; }
  const std::vector<Weight>& negatives() const { return neg_; }
  Weight total_positive() const { return total_pos_; }
  Weight total_negative() const { return total_neg_; }
  Weight total() const { return total_pos_ + total_neg_; }
  bool operator==(const BasicScoreAccumulator&) const = default;

 private:
  std::vector<Weight> pos_, neg_;
  Weight total_pos_{}, total_neg_{};
};

using ScoreAccumulator = BasicScoreAccumulator<std::uint64_t>;
using SoftScoreAccumulator = BasicScoreAccumulator<double>;

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::uint64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Trapezoidal ROC area over all bin thresholds (Mann-Whitney with ties
/// counted one half). Throws std::invalid_argument unless both classes are
/// present.
double roc_auc(const ScoreAccumulator& acc);
double roc_auc(const SoftScoreAccumulator& acc);

/// Dice-maximizing bin boundary, lowest on ties. Requires positives;
/// an accumulator without negatives yields the lowest boundary.
double optimal_threshold(const ScoreAccumulator& acc);
/// Max Dice of the sweep behind optimal_threshold.
double best_dice(const ScoreAccumulator& acc);

/// Binarization of the accumulator at threshold t.
ConfusionCounts confusion_at(const ScoreAccumulator& acc, double t);
/// Positive iff the score's bin is at or above t's first positive bin.
bool binarize(float p, double t);

struct DiceMcc {
  double dice = 0;
  double mcc = 0;
};
/// dice = 2TP/(2TP+FP+FN) (0 if undefined); mcc = 0 when a marginal is 0.
DiceMcc dice_mcc(const ConfusionCounts& c);

/// One evaluated image: a vessel probability map with its reference.
struct ScoredImage {
  const Image* probs = nullptr;  // 1 plane, native resolution
  const Mask* label = nullptr;   // 0/1
  const Mask* fov = nullptr;     // 0/1
};

ScoreAccumulator accumulate_images(const std::vector<ScoredImage>& images);

struct EvalReport {
  double auc = 0;
  double dice = 0;
  double mcc = 0;
  double threshold = 0;
  std::string threshold_source;  // where the threshold came from
  ConfusionCounts counts;
  std::uint64_t pixels = 0;
  std::uint64_t positives = 0;
};

/// Pooled evaluation: the threshold comes from the training split unless
/// overridden, then AUC/Dice/MCC are computed on the test split.
EvalReport evaluate_protocol(const std::vector<ScoredImage>& train,
                             const std::vector<ScoredImage>& test,
                             const double* threshold_override = nullptr,
                             const std::string& override_source = "");

struct BootstrapReport {
  int n_resamples = 0;
  std::uint64_t seed = 0;
  double threshold_a = 0, threshold_b = 0;
  double auc_a = 0, auc_b = 0, dice_a = 0, dice_b = 0;  // on the full set
  std::vector<double> auc_deltas;   // A - B per resample
  std::vector<double> dice_deltas;
  double p_auc = 1;   // fraction of deltas <= 0
  double p_dice = 1;
};

/// Stratified pixel bootstrap: every resample draws, with replacement, as
/// many vessel and background FOV pixels as the original set holds. Dice
/// uses each model's own threshold.
BootstrapReport bootstrap_compare(const std::vector<ScoredImage>& a,
                                  const std::vector<ScoredImage>& b,
                                  double threshold_a, double threshold_b,
                                  int n = 100, std::uint64_t seed = 0);

extern template class BasicScoreAccumulator<std::uint64_t>;
extern template class BasicScoreAccumulator<double>;

}  // namespace lwnet
