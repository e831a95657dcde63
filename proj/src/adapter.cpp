#include "lwnet/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <ostream>

#include "lwnet/evaluator.hpp"
#include "lwnet/parallel.hpp"
#include "lwnet/random.hpp"

namespace lwnet {

void AdaptConfig::validate() const {
  if (!(lr0 > 0) || !(lr_scale > 0)) throw std::invalid_argument("adapt: lr0 and lr_scale must be > 0");
  if (extra_epochs < 1) throw std::invalid_argument("adapt: extra_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("adapt: batch_size must be >= 1");
}

PseudoLabelSet pseudo_label(const Checkpoint& source, const std::vector<Sample>& target,
                            const std::string& target_dataset_id) {
  Model model = load_model(source);
  PseudoLabelSet set;
  set.source_id = checkpoint_id(source);
  set.target_dataset_id = target_dataset_id;
  set.classes = source.arch.unet.num_classes;
  for (const auto& s : target) {
    if (s.image.channels != source.arch.unet.in_channels)
      throw std::invalid_argument("pseudo_label: " + s.name + " has " + std::to_string(s.image.channels) +
                                  " channels, model expects " +
                                  std::to_string(source.arch.unet.in_channels));
    if ((source.train_height && s.height() != source.train_height) ||
        (source.train_width && s.width() != source.train_width))
      throw std::invalid_argument("pseudo_label: " + s.name + " is not at the training resolution " +
                                  std::to_string(source.train_width) + "x" +
                                  std::to_string(source.train_height));
    TrainExample e;
    e.name = s.name;
    e.image = s.image;
    e.soft = tensor_to_image(tta_predict(model, image_to_tensor(s.image)));
    e.fov = s.fov.empty() ? Mask(s.height(), s.width(), 1) : s.fov;
    set.items.push_back(std::move(e));
  }
  return set;
}

DatasetManifest save_pseudo_labels(const PseudoLabelSet& set, const std::filesystem::path& dir) {
  if (set.items.empty()) throw std::invalid_argument("save_pseudo_labels: empty set");
  for (const char* sub : {"images", "pseudo", "fov"}) std::filesystem::create_directories(dir / sub);
  DatasetManifest m;
  m.dataset_id = set.target_dataset_id.empty() ? "pseudo" : set.target_dataset_id + "_pseudo";
  m.train_height = set.items.front().image.height;
  m.train_width = set.items.front().image.width;
  m.classes = set.classes;
  m.label_kind = "soft";
  m.estimate_fov = false;
  m.base_dir = dir;
  for (std::size_t i = 0; i < set.items.size(); ++i) {
    const TrainExample& e = set.items[i];
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    const std::string img = std::string("images/") + name, lab = std::string("pseudo/") + name,
                      fov = std::string("fov/") + name;
    write_image8(dir / img, e.image);
    const int h = e.soft.height;
    Image stacked(1, h * e.soft.channels, e.soft.width);
    std::copy(e.soft.px.begin(), e.soft.px.end(), stacked.px.begin());
    write_probability16(dir / lab, stacked);
    write_mask(dir / fov, e.fov, 255);
    m.rows.push_back({img, lab, fov, Split::train});
  }
  save_manifest(m, dir / "manifest.csv");
  const nlohmann::json meta = {{"source_checkpoint", set.source_id},
                               {"target_dataset_id", set.target_dataset_id},
                               {"classes", set.classes},
                               {"images", set.items.size()}};
  std::ofstream(dir / "pseudo_labels.json") << meta.dump(2) << "\n";
  return m;
}

PseudoLabelSet load_pseudo_labels(const std::filesystem::path& manifest_path) {
  const DatasetManifest m = load_manifest(manifest_path);
  if (m.label_kind != "soft") throw DataError("not a soft-label manifest: " + manifest_path.string());
  PseudoLabelSet set;
  set.classes = m.classes;
  set.target_dataset_id = m.dataset_id;
  const auto meta_path = manifest_path.parent_path() / "pseudo_labels.json";
  if (std::filesystem::exists(meta_path)) {
    std::ifstream in(meta_path);
    const auto meta = nlohmann::json::parse(in);
    set.source_id = meta.value("source_checkpoint", "");
    set.target_dataset_id = meta.value("target_dataset_id", m.dataset_id);
  }
  for (const auto& row : m.rows) {
    const Sample s = load_sample(m, row);
    TrainExample e;
    e.name = s.name;
    e.image = s.image;
    e.fov = s.fov;
    const Image stacked = read_probability(m.resolve(row.label));
    if (stacked.width != s.width() || stacked.height != s.height() * m.classes)
      throw DataError("pseudo-label " + row.label + " does not match its image");
    e.soft = Image(m.classes, s.height(), s.width());
    std::copy(stacked.px.begin(), stacked.px.end(), e.soft.px.begin());
    set.items.push_back(std::move(e));
  }
  return set;
}

double merged_auc(Model& model, const std::vector<TrainExample>& examples) {
  SoftScoreAccumulator acc;
  for (const auto& e : examples) {
    const Image p = vessel_probability(tensor_to_image(model.predict(image_to_tensor(e.image))));
    const Mask fov = e.fov.empty() ? Mask(e.image.height, e.image.width, 1) : e.fov;
    if (!e.soft.empty()) {
      acc.accumulate_soft(p.px, vessel_probability(e.soft).px, fov.px);
    } else {
      std::vector<float> t(e.label.px.size());
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = e.label.px[i] ? 1.0f : 0.0f;
      acc.accumulate_soft(p.px, t, fov.px);
    }
  }
  return roc_auc(acc);
}

AdaptResult adapt(const Checkpoint& source, const std::vector<TrainExample>& source_train,
                  const std::vector<Sample>& source_native, const PseudoLabelSet& target,
                  const AdaptConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (target.items.empty()) throw std::invalid_argument("adapt: empty target set");
  if (target.classes != source.arch.unet.num_classes)
    throw std::invalid_argument("adapt: pseudo-labels have a different class count");
  Model model = load_model(source);
  const int classes = source.arch.unet.num_classes;

  std::vector<TrainExample> merged = source_train;
  merged.insert(merged.end(), target.items.begin(), target.items.end());
  const int n = static_cast<int>(merged.size());
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);

  AdaptResult r;
  AdamState adam;
  ModelState best_state;
  double best_auc = -1;
  int best_epoch = -1, iteration = 0;
  const double lr = cfg.lr();
  const int per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  for (int epoch = 0; epoch < cfg.extra_epochs; ++epoch) {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x5348, static_cast<std::uint64_t>(epoch)));
    shuffle(order, shuffle_rng);
    for (int b = 0; b < per_epoch; ++b) {
      const int lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::vector<TrainExample> batch(hi - lo);
      parallel_for(hi - lo, [&](int k) {
        const int idx = order[lo + k];
        if (!cfg.augment) {
          batch[k] = merged[idx];
          return;
        }
        std::mt19937_64 rng(derive_seed(cfg.seed, 0x4147, static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(idx)));
        batch[k] = augment_example(merged[idx], draw_augment(cfg.augmentation, rng));
      });
      std::vector<int> all(batch.size());
      for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
      const auto [x, y] = make_batch(batch, all, classes);
      Tape tape;
      const Tensor loss = batch_loss(model, tape, x, y);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("adapt: non-finite loss at iteration " + std::to_string(iteration));
      for (const auto& p : params) p.zero_grad();
      backward(loss, tape);
      adam_step(params, adam, lr);
      r.lr_trace.push_back(lr);
      r.loss_trace.push_back(value);
      if (log)
        *log << nlohmann::json{{"iteration", iteration}, {"epoch", epoch}, {"lr", lr}, {"loss", value}}.dump()
             << "\n";
      ++iteration;
    }
    const double auc = merged_auc(model, merged);
    r.epoch_aucs.push_back(auc);
    const bool best = best_epoch < 0 || auc > best_auc;
    if (best) {
      best_auc = auc;
      best_epoch = epoch;
      best_state = capture_state(model);
    }
    if (log)
      *log << nlohmann::json{{"iteration", iteration}, {"epoch", epoch}, {"train_auc", auc}, {"best", best}}.dump()
           << "\n"
           << std::flush;
  }
  restore_state(model, best_state);

  r.checkpoint = make_checkpoint(model, source.train_height, source.train_width);
  r.checkpoint.best_val_auc = best_auc;
  Provenance& prov = r.checkpoint.provenance;
  prov.kind = "adapt";
  prov.dataset_id = source.provenance.dataset_id;
  prov.seed = cfg.seed;
  prov.iterations = iteration;
  prov.cycles = cfg.extra_epochs;
  prov.best_cycle = best_epoch;
  prov.parent_id = checkpoint_id(source);
  prov.target_dataset_id = target.target_dataset_id;
  if (!source_native.empty()) {
    r.checkpoint.threshold = derive_threshold(model, source_native, source.train_height, source.train_width);
    prov.threshold_source = "training split " + source.provenance.dataset_id;
  } else {
    r.checkpoint.threshold = derive_threshold(model, source_train);
    prov.threshold_source = "training examples " + source.provenance.dataset_id;
  }
  return r;
}

}  // namespace lwnet
