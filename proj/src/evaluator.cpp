#include "lwnet/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "lwnet/parallel.hpp"
#include "lwnet/random.hpp"

namespace lwnet {

using u128 = unsigned __int128;

template <typename W>
BasicScoreAccumulator<W>::BasicScoreAccumulator() : pos_(kBins, W{}), neg_(kBins, W{}) {}

template <typename W>
int BasicScoreAccumulator<W>::bin(float p) {
  if (!(p >= 0.0f && p <= 1.0f))
    throw std::invalid_argument("score outside [0,1]: " + std::to_string(p));
  return static_cast<int>(std::floor(static_cast<double>(p) * (kBins - 1) + 0.5));
}

template <typename W>
double BasicScoreAccumulator<W>::boundary(int j) {
  return std::max(0.0, (j - 0.5) / (kBins - 1));
}

template <typename W>
int BasicScoreAccumulator<W>::first_positive_bin(double t) {
  if (t <= 0) return 0;
  const double x = t * (kBins - 1) + 0.5;
  // The slack absorbs rounding in boundary(j) so that t = boundary(j) maps to j.
  const double j = std::ceil(x - 1e-9);
  return static_cast<int>(std::clamp(j, 0.0, static_cast<double>(kBins)));
}

template <typename W>
void BasicScoreAccumulator<W>::add(float p, W positive, W negative) {
  add_bin(bin(p), positive, negative);
}

template <typename W>
void BasicScoreAccumulator<W>::add_bin(int b, W positive, W negative) {
  if (b < 0 || b >= kBins) throw std::invalid_argument("bin out of range");
  pos_[b] += positive;
  neg_[b] += negative;
  total_pos_ += positive;
  total_neg_ += negative;
}

template <typename W>
void BasicScoreAccumulator<W>::accumulate(std::span<const float> probs,
                                          std::span<const std::uint8_t> labels,
                                          std::span<const std::uint8_t> fov) {
  if (probs.size() != labels.size() || probs.size() != fov.size())
    throw std::invalid_argument("accumulate: shape mismatch");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!fov[i]) continue;
    if (labels[i]) add(probs[i], W(1), W(0));
    else add(probs[i], W(0), W(1));
  }
}

template <typename W>
void BasicScoreAccumulator<W>::accumulate_soft(std::span<const float> probs,
                                               std::span<const float> targets,
                                               std::span<const std::uint8_t> fov) {
  if (probs.size() != targets.size() || probs.size() != fov.size())
    throw std::invalid_argument("accumulate_soft: shape mismatch");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!fov[i]) continue;
    const float t = targets[i];
    if (!(t >= 0.0f && t <= 1.0f)) throw std::invalid_argument("soft label outside [0,1]");
    add(probs[i], static_cast<W>(t), static_cast<W>(1.0f - t));
  }
}

template <typename W>
void BasicScoreAccumulator<W>::merge(const BasicScoreAccumulator& other) {
  for (int b = 0; b < kBins; ++b) {
    pos_[b] += other.pos_[b];
    neg_[b] += other.neg_[b];
  }
  total_pos_ += other.total_pos_;
  total_neg_ += other.total_neg_;
}

template class BasicScoreAccumulator<std::uint64_t>;
template class BasicScoreAccumulator<double>;

double roc_auc(const ScoreAccumulator& acc) {
  if (acc.total_positive() == 0 || acc.total_negative() == 0)
    throw std::invalid_argument("roc_auc: both classes must be present");
  const auto& pos = acc.positives();
  const auto& neg = acc.negatives();
  // Sum over negatives of (#positives above + half the tied positives), doubled.
  u128 num = 0;
  std::uint64_t above = 0;
  for (int b = ScoreAccumulator::kBins - 1; b >= 0; --b) {
    num += static_cast<u128>(neg[b]) * (2 * static_cast<u128>(above) + pos[b]);
    above += pos[b];
  }
  const u128 den = 2 * static_cast<u128>(acc.total_positive()) * acc.total_negative();
  return static_cast<double>(static_cast<long double>(num) / static_cast<long double>(den));
}

double roc_auc(const SoftScoreAccumulator& acc) {
  if (!(acc.total_positive() > 0) || !(acc.total_negative() > 0))
    throw std::invalid_argument("roc_auc: both classes must be present");
  const auto& pos = acc.positives();
  const auto& neg = acc.negatives();
  long double num = 0, above = 0;
  for (int b = SoftScoreAccumulator::kBins - 1; b >= 0; --b) {
    num += neg[b] * (above + 0.5L * pos[b]);
    above += pos[b];
  }
  return static_cast<double>(num / (static_cast<long double>(acc.total_positive()) *
                                    acc.total_negative()));
}

namespace {

struct Sweep {
  int bin = 0;
  std::uint64_t tp = 0, fp = 0;
};

Sweep dice_sweep(const ScoreAccumulator& acc) {
  if (acc.total_positive() == 0)
    throw std::invalid_argument("optimal_threshold: no positive pixels");
  const auto& pos = acc.positives();
  const auto& neg = acc.negatives();
  const std::uint64_t p = acc.total_positive();
  Sweep best;
  bool have = false;
  std::uint64_t tp = 0, fp = 0;
  // Descending j with >= keeps the lowest boundary among ties.
  for (int j = ScoreAccumulator::kBins - 1; j >= 0; --j) {
    tp += pos[j];
    fp += neg[j];
    // Dice = 2TP / (TP + FP + P); compare cross-multiplied.
    const u128 lhs = static_cast<u128>(tp) * (best.tp + best.fp + p);
    const u128 rhs = static_cast<u128>(best.tp) * (tp + fp + p);
    if (!have || lhs >= rhs) {
      best = {j, tp, fp};
      have = true;
    }
  }
  return best;
}

}  // namespace

double optimal_threshold(const ScoreAccumulator& acc) {
  return ScoreAccumulator::boundary(dice_sweep(acc).bin);
}

double best_dice(const ScoreAccumulator& acc) {
  const Sweep s = dice_sweep(acc);
  return 2.0 * s.tp / static_cast<double>(s.tp + s.fp + acc.total_positive());
}

ConfusionCounts confusion_at(const ScoreAccumulator& acc, double t) {
  const int j = ScoreAccumulator::first_positive_bin(t);
  ConfusionCounts c;
  for (int b = 0; b < ScoreAccumulator::kBins; ++b) {
    if (b >= j) {
      c.tp += acc.positives()[b];
      c.fp += acc.negatives()[b];
    } else {
      c.fn += acc.positives()[b];
      c.tn += acc.negatives()[b];
    }
  }
  return c;
}

bool binarize(float p, double t) {
  return ScoreAccumulator::bin(p) >= ScoreAccumulator::first_positive_bin(t);
}

DiceMcc dice_mcc(const ConfusionCounts& c) {
  DiceMcc r;
  const long double tp = c.tp, fp = c.fp, tn = c.tn, fn = c.fn;
  const long double dd = 2 * tp + fp + fn;
  r.dice = dd > 0 ? static_cast<double>(2 * tp / dd) : 0.0;
  const long double a = tp + fp, b = tp + fn, cc = tn + fp, d = tn + fn;
  if (a == 0 || b == 0 || cc == 0 || d == 0) {
    r.mcc = 0.0;
  } else {
    r.mcc = static_cast<double>((tp * tn - fp * fn) / std::sqrt(a * b * cc * d));
  }
  return r;
}

ScoreAccumulator accumulate_images(const std::vector<ScoredImage>& images) {
  ScoreAccumulator acc;
  for (const auto& im : images) {
    if (!im.probs || !im.label || !im.fov)
      throw std::invalid_argument("accumulate: missing prediction, label or FOV");
    if (im.probs->channels != 1 || im.probs->height != im.label->height ||
        im.probs->width != im.label->width || im.fov->height != im.label->height ||
        im.fov->width != im.label->width)
      throw std::invalid_argument("accumulate: shape mismatch");
    acc.accumulate(im.probs->px, im.label->px, im.fov->px);
  }
  return acc;
}

EvalReport evaluate_protocol(const std::vector<ScoredImage>& train,
                             const std::vector<ScoredImage>& test,
                             const double* threshold_override,
                             const std::string& override_source) {
  EvalReport r;
  if (threshold_override) {
    r.threshold = *threshold_override;
    r.threshold_source = override_source.empty() ? "override" : override_source;
  } else {
    if (train.empty()) throw std::invalid_argument("evaluate: no training predictions for the threshold");
    r.threshold = optimal_threshold(accumulate_images(train));
    r.threshold_source = "training split";
  }
  if (test.empty()) throw std::invalid_argument("evaluate: empty test split");
  const ScoreAccumulator acc = accumulate_images(test);
  r.auc = roc_auc(acc);
  r.counts = confusion_at(acc, r.threshold);
  const DiceMcc dm = dice_mcc(r.counts);
  r.dice = dm.dice;
  r.mcc = dm.mcc;
  r.pixels = acc.total();
  r.positives = acc.total_positive();
  return r;
}

BootstrapReport bootstrap_compare(const std::vector<ScoredImage>& a,
                                  const std::vector<ScoredImage>& b,
                                  double threshold_a, double threshold_b, int n,
                                  std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("bootstrap: n must be positive");
  if (a.size() != b.size()) throw std::invalid_argument("bootstrap: prediction sets differ in size");
  // FOV pixels split by class, as (bin A, bin B) pairs.
  std::vector<std::uint16_t> pa, pb, na, nb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const ScoredImage &x = a[i], &y = b[i];
    if (!x.probs || !y.probs || !x.label || !x.fov)
      throw std::invalid_argument("bootstrap: missing prediction, label or FOV");
    if (x.probs->px.size() != y.probs->px.size() || x.probs->px.size() != x.label->px.size() ||
        x.fov->px.size() != x.label->px.size() ||
        (y.label && *y.label != *x.label) || (y.fov && *y.fov != *x.fov))
      throw std::invalid_argument("bootstrap: prediction sets do not cover the same pixels");
    for (std::size_t k = 0; k < x.probs->px.size(); ++k) {
      if (!x.fov->px[k]) continue;
      const auto ba = static_cast<std::uint16_t>(ScoreAccumulator::bin(x.probs->px[k]));
      const auto bb = static_cast<std::uint16_t>(ScoreAccumulator::bin(y.probs->px[k]));
      if (x.label->px[k]) {
        pa.push_back(ba);
        pb.push_back(bb);
      } else {
        na.push_back(ba);
        nb.push_back(bb);
      }
    }
  }
  if (pa.empty() || na.empty()) throw std::invalid_argument("bootstrap: both classes must be present");

  const int ja = ScoreAccumulator::first_positive_bin(threshold_a);
  const int jb = ScoreAccumulator::first_positive_bin(threshold_b);
  const std::size_t np = pa.size(), nn = na.size();

  struct Scores {
    double auc_a, auc_b, dice_a, dice_b;
  };
  // Draw k of each class maps to pixel pick(k).
  auto score = [&](auto&& pick_pos, auto&& pick_neg) {
    ScoreAccumulator acc_a, acc_b;
    std::uint64_t tpa = 0, fpa = 0, tpb = 0, fpb = 0;
    for (std::size_t k = 0; k < np; ++k) {
      const std::size_t i = pick_pos(k);
      acc_a.add_bin(pa[i], 1, 0);
      acc_b.add_bin(pb[i], 1, 0);
      tpa += pa[i] >= ja;
      tpb += pb[i] >= jb;
    }
    for (std::size_t k = 0; k < nn; ++k) {
      const std::size_t i = pick_neg(k);
      acc_a.add_bin(na[i], 0, 1);
      acc_b.add_bin(nb[i], 0, 1);
      fpa += na[i] >= ja;
      fpb += nb[i] >= jb;
    }
    const auto dice = [&](std::uint64_t tp, std::uint64_t fp) {
      return 2.0 * tp / static_cast<double>(tp + fp + np);
    };
    return Scores{roc_auc(acc_a), roc_auc(acc_b), dice(tpa, fpa), dice(tpb, fpb)};
  };

  BootstrapReport r;
  r.n_resamples = n;
  r.seed = seed;
  r.threshold_a = threshold_a;
  r.threshold_b = threshold_b;
  const auto identity = [](std::size_t k) { return k; };
  const Scores full = score(identity, identity);
  r.auc_a = full.auc_a;
  r.auc_b = full.auc_b;
  r.dice_a = full.dice_a;
  r.dice_b = full.dice_b;

  r.auc_deltas.assign(n, 0.0);
  r.dice_deltas.assign(n, 0.0);
  parallel_for(n, [&](int i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::vector<std::uint32_t> pos_idx(np), neg_idx(nn);
    for (auto& v : pos_idx) v = static_cast<std::uint32_t>(uniform_index(rng, np));
    for (auto& v : neg_idx) v = static_cast<std::uint32_t>(uniform_index(rng, nn));
    const Scores s = score([&](std::size_t k) { return pos_idx[k]; },
                           [&](std::size_t k) { return neg_idx[k]; });
    r.auc_deltas[i] = s.auc_a - s.auc_b;
    r.dice_deltas[i] = s.dice_a - s.dice_b;
  });
  const auto p_value = [n](const std::vector<double>& d) {
    return static_cast<double>(std::count_if(d.begin(), d.end(), [](double x) { return x <= 0; })) / n;
  };
  r.p_auc = p_value(r.auc_deltas);
  r.p_dice = p_value(r.dice_deltas);
  return r;
}

}  // namespace lwnet
