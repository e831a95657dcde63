#include "lwnet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <optional>
#include <sstream>

#include "lwnet/adapter.hpp"
#include "lwnet/parallel.hpp"
#include "lwnet/trainer.hpp"

namespace lwnet::cli {

namespace fs = std::filesystem;

std::string format_eval_report(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "auc=" << r.auc << "\n"
     << "dice=" << r.dice << "\n"
     << "mcc=" << r.mcc << "\n"
     << "threshold=" << r.threshold << "\n"
     << "threshold_source=" << r.threshold_source << "\n"
     << "pixels=" << r.pixels << "\n"
     << "positives=" << r.positives << "\n"
     << "tp=" << r.counts.tp << "\n"
     << "fp=" << r.counts.fp << "\n"
     << "tn=" << r.counts.tn << "\n"
     << "fn=" << r.counts.fn << "\n";
  return os.str();
}

std::string format_bootstrap_report(const BootstrapReport& r) {
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  std::ostringstream os;
  os << std::setprecision(10);
  os << "n_resamples=" << r.n_resamples << "\n"
     << "seed=" << r.seed << "\n"
     << "threshold_a=" << r.threshold_a << "\n"
     << "threshold_b=" << r.threshold_b << "\n"
     << "auc_a=" << r.auc_a << "\n"
     << "auc_b=" << r.auc_b << "\n"
     << "dice_a=" << r.dice_a << "\n"
     << "dice_b=" << r.dice_b << "\n"
     << "mean_auc_delta=" << mean(r.auc_deltas) << "\n"
     << "mean_dice_delta=" << mean(r.dice_deltas) << "\n"
     << "p_auc=" << r.p_auc << "\n"
     << "p_dice=" << r.p_dice << "\n"
     << "significant_auc=" << (r.p_auc < 0.05 ? "yes" : "no") << "\n"
     << "significant_dice=" << (r.p_dice < 0.05 ? "yes" : "no") << "\n";
  return os.str();
}

namespace {

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// CLI11 leaves the default of a bool flag empty, which the config dump
// renders as false; record it explicitly.
CLI::Option* bool_flag(CLI::App* app, const std::string& name, bool& value, const std::string& desc = "") {
  return app->add_flag(name, value, desc)->default_str(value ? "true" : "false");
}

struct ArchFlags {
  int depth = 3;
  int base_width = 8;
  bool wnet = false;
  int classes = 0;  // 0: from the manifest
  std::string upsampling = "transposed";

  void add(CLI::App* app) {
    app->add_option("--depth", depth, "resolution levels k")->capture_default_str()->check(CLI::Range(1, 12));
    app->add_option("--base-width", base_width, "filters f0 at the top level")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    bool_flag(app, "--wnet,!--no-wnet", wnet, "two stacked U-Nets");
    app->add_option("--classes", classes, "output classes m (0: from the manifest)")->capture_default_str();
    app->add_option("--upsampling", upsampling, "decoder upsampling")
        ->capture_default_str()
        ->check(CLI::IsMember({"transposed", "bilinear"}));
  }

  ModelConfig config(int manifest_classes) const {
    ModelConfig c;
    c.unet.depth = depth;
    c.unet.base_width = base_width;
    c.unet.num_classes = classes > 0 ? classes : manifest_classes;
    c.unet.upsampling = upsampling == "bilinear" ? Upsampling::bilinear : Upsampling::transposed;
    c.wnet = wnet;
    c.unet.validate();
    return c;
  }
};

struct AugmentFlags {
  bool enabled = true;
  AugmentConfig cfg;

  void add(CLI::App* app) {
    bool_flag(app, "--augment,!--no-augment", enabled, "training-time augmentation");
    bool_flag(app, "--hflip,!--no-hflip", cfg.hflip);
    bool_flag(app, "--vflip,!--no-vflip", cfg.vflip);
    app->add_option("--rotation", cfg.max_rotation_deg, "max rotation in degrees")->capture_default_str();
    app->add_option("--brightness", cfg.brightness, "brightness jitter")->capture_default_str();
    app->add_option("--contrast-jitter", cfg.contrast, "contrast jitter")->capture_default_str();
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw CliError("cannot write " + path.string());
  f << text;
}

/// Every option of the top level and of the selected subcommand, defaults
/// included, in a form `--config` accepts.
void write_resolved_config(const CLI::App& app, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string prefix = app.get_subcommands().front()->get_name() + ".";
  std::istringstream all(app.config_to_str(true, false));
  std::string text, line;
  while (std::getline(all, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    if (line.substr(eq + 1) == "\"\"") continue;  // unset, no default
    if (key.rfind(prefix, 0) == 0 || key.find('.') == std::string::npos) text += line + "\n";
  }
  write_text(dir / "resolved_config.ini", text);
}

DatasetManifest open_manifest(const std::string& path, int size_multiple = 1) {
  DatasetManifest m = load_manifest(path);
  m.validate(size_multiple);
  return m;
}

/// Training resolution of a manifest; native when unset (all images must agree).
std::pair<int, int> training_size(const DatasetManifest& m, const std::vector<Sample>& samples) {
  if (m.train_height > 0) return {m.train_height, m.train_width};
  if (samples.empty()) throw CliError("no samples to infer the training resolution from");
  for (const auto& s : samples)
    if (s.height() != samples[0].height() || s.width() != samples[0].width())
      throw CliError("manifest has no train_resolution and its images differ in size");
  return {samples[0].height(), samples[0].width()};
}

std::vector<Sample> resized(const std::vector<Sample>& v, int h, int w) {
  std::vector<Sample> out;
  for (const auto& s : v)
    out.push_back(s.height() == h && s.width() == w ? s : resize_sample(s, h, w));
  return out;
}

std::vector<ScoredImage> views(const std::vector<Image>& probs, const std::vector<Sample>& samples) {
  std::vector<ScoredImage> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label.empty()) throw CliError("sample " + samples[i].name + " has no label");
    out.push_back({&probs[i], &samples[i].label, &samples[i].fov});
  }
  return out;
}

std::vector<Image> predict_all(Model& model, const Checkpoint& c, const std::vector<Sample>& samples,
                               bool tta) {
  std::vector<Image> out;
  for (const auto& s : samples)
    out.push_back(vessel_probability(predict_native(model, s.image, c.train_height, c.train_width, tta)));
  return out;
}

std::vector<Image> read_predictions(const fs::path& dir, const std::vector<Sample>& samples) {
  std::vector<Image> out;
  for (const auto& s : samples) {
    const fs::path p = dir / (s.name + ".png");
    if (!fs::exists(p)) throw CliError("missing prediction " + p.string());
    Image img = read_probability(p);
    if (img.height != s.height() || img.width != s.width())
      throw CliError("prediction " + p.string() + " is not at native resolution");
    out.push_back(std::move(img));
  }
  return out;
}

void print_param_table(std::ostream& out, Model& model) {
  out << std::left << std::setw(32) << "layer" << std::right << std::setw(10) << "params" << "\n";
  for (const auto& l : model.parameter_breakdown())
    out << std::left << std::setw(32) << l.layer << std::right << std::setw(10) << l.count << "\n";
}

// ---- subcommands -------------------------------------------------------------------

struct TrainCmd {
  std::string manifest, out_dir;
  ArchFlags arch;
  AugmentFlags aug;
  TrainConfig cfg;
  bool dry_run = false;
  int val_carveout = 4;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "train a U-Net or W-Net on a manifest");
    c->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
    c->add_option("--out", out_dir, "output directory")->required();
    arch.add(c);
    aug.add(c);
    c->add_option("--batch-size", cfg.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--lr0", cfg.lr0)->capture_default_str();
    c->add_option("--lr-min", cfg.lr_min)->capture_default_str();
    c->add_option("--epochs-per-cycle", cfg.epochs_per_cycle)->capture_default_str();
    c->add_option("--total-iterations", cfg.total_iterations)->capture_default_str();
    c->add_option("--cycles-multiplier", cfg.cycles_multiplier)->capture_default_str();
    c->add_option("--seed", cfg.seed)->capture_default_str();
    bool_flag(c, "--dry-run,!--no-dry-run", dry_run, "schedule only, no forward/backward");
    c->add_option("--val-carveout", val_carveout, "last N training rows become val when the manifest has none")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
  }

  void run(const CLI::App& app, std::ostream& out) {
    DatasetManifest m = load_manifest(manifest);
    if (const int moved = carve_validation(m, val_carveout))
      out << "validation: last " << moved << " training rows\n";
    const ModelConfig mc = arch.config(m.classes);
    m.validate(mc.unet.size_multiple());
    cfg.augment = aug.enabled;
    cfg.augmentation = aug.cfg;
    cfg.validate();
    const auto native_train = load_split(m, Split::train);
    if (native_train.empty()) throw CliError("manifest has no training rows");
    const auto [h, w] = training_size(m, native_train);
    if (h % mc.unet.size_multiple() || w % mc.unet.size_multiple())
      throw CliError("training resolution must be a multiple of " + std::to_string(mc.unet.size_multiple()));
    TrainData data;
    for (const auto& s : resized(native_train, h, w)) data.train.push_back(to_example(s));
    data.val = resized(load_split(m, Split::val), h, w);
    data.threshold_set = native_train;
    data.dataset_id = m.dataset_id;

    fs::create_directories(out_dir);
    write_resolved_config(app, out_dir);
    std::ofstream log(fs::path(out_dir) / "train_log.jsonl");
    Model model = Model::build(mc, cfg.seed);
    TrainHooks hooks;
    hooks.dry_run = dry_run;
    hooks.log = &log;
    hooks.on_cycle_end = [&](const CycleRecord& r) {
      out << "cycle " << r.cycle + 1 << " iteration " << r.iteration << " val_auc " << std::fixed
          << std::setprecision(4) << r.val_auc << (r.best ? " *" : "") << "\n"
          << std::defaultfloat << std::flush;
    };
    const TrainPlan plan = plan_training(cfg, static_cast<int>(data.train.size()));
    out << "training " << (mc.wnet ? "W-Net" : "U-Net") << " (" << model.count_params() << " parameters) on "
        << data.train.size() << " images at " << w << "x" << h << ": " << plan.cycles << " cycles x "
        << plan.iterations_per_cycle << " iterations\n";
    const TrainResult r = train(model, data, cfg, hooks);
    const fs::path ckpt_path = fs::path(out_dir) / "model.lwnt";
    save_checkpoint(r.checkpoint, ckpt_path);
    out << "best_val_auc=" << r.checkpoint.best_val_auc << "\n"
        << "threshold=" << r.checkpoint.threshold << "\n"
        << "checkpoint=" << ckpt_path.string() << "\n"
        << "checkpoint_id=" << checkpoint_id(r.checkpoint) << "\n";
  }
};

struct PredictCmd {
  std::string checkpoint, manifest, split = "test", out_dir;
  bool tta = true, binarize = false;
  double threshold = -1;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("predict", "native-resolution probability maps");
    c->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    c->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    c->add_option("--split", split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
    c->add_option("--out", out_dir)->required();
    bool_flag(c, "--tta,!--no-tta", tta, "flip test-time augmentation");
    bool_flag(c, "--binarize,!--no-binarize", binarize, "also write binary masks");
    c->add_option("--threshold", threshold, "binarization threshold (default: the checkpoint's)")
        ->capture_default_str();
  }

  void run(const CLI::App& app, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    Model model = load_model(ckpt);
    const DatasetManifest m = open_manifest(manifest);
    fs::create_directories(out_dir);
    write_resolved_config(app, out_dir);
    const double t = threshold >= 0 ? threshold : ckpt.threshold;
    std::ofstream index(fs::path(out_dir) / "predictions.csv");
    index << "name,image,probability" << (binarize ? ",mask" : "") << "\n";
    int n = 0;
    for (const auto& row : m.rows_for(parse_split(split))) {
      const Sample s = load_sample(m, row);
      const Image p = vessel_probability(predict_native(model, s.image, ckpt.train_height, ckpt.train_width, tta));
      const std::string file = s.name + ".png";
      write_probability16(fs::path(out_dir) / file, p);
      index << s.name << "," << row.image << "," << file;
      if (binarize) {
        Mask b(p.height, p.width);
        for (std::size_t i = 0; i < b.px.size(); ++i) b.px[i] = s.fov.px[i] && lwnet::binarize(p.px[i], t);
        const std::string mask_file = s.name + "_mask.png";
        write_mask(fs::path(out_dir) / mask_file, b, 255);
        index << "," << mask_file;
      }
      index << "\n";
      ++n;
    }
    out << "wrote " << n << " probability maps to " << out_dir << "\n";
  }
};

struct EvalCmd {
  std::string manifest, split = "test", checkpoint, predictions, threshold_from, report;
  double threshold = -1;
  bool tta = true, rederive = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("eval", "AUC / Dice / MCC at native resolution inside the FOV");
    c->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    c->add_option("--split", split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
    auto* ck = c->add_option("--checkpoint", checkpoint, "model to evaluate")->check(CLI::ExistingFile);
    auto* pr = c->add_option("--predictions", predictions, "directory of <name>.png probability maps")
                   ->check(CLI::ExistingDirectory);
    ck->excludes(pr);
    auto* tf = c->add_option("--threshold-from", threshold_from, "use the threshold stored in this checkpoint")
                   ->check(CLI::ExistingFile);
    auto* tv = c->add_option("--threshold", threshold, "fixed threshold")->capture_default_str();
    tf->excludes(tv);
    bool_flag(c, "--rederive,!--no-rederive", rederive, "derive the threshold on the manifest's training split");
    bool_flag(c, "--tta,!--no-tta", tta);
    c->add_option("--report", report, "write the key=value report here");
  }

  void run(const CLI::App&, std::ostream& out) {
    if (checkpoint.empty() == predictions.empty())
      throw CliError("eval needs exactly one of --checkpoint or --predictions");
    const DatasetManifest m = open_manifest(manifest);
    const auto test = load_split(m, parse_split(split));
    if (test.empty()) throw CliError("no rows in split " + split);

    std::optional<Checkpoint> ckpt;
    std::optional<Model> model;
    if (!checkpoint.empty()) {
      ckpt = load_checkpoint(checkpoint);
      model = load_model(*ckpt);
    }
    auto predict = [&](const std::vector<Sample>& v) {
      return model ? predict_all(*model, *ckpt, v, tta) : read_predictions(predictions, v);
    };

    std::optional<double> t;
    std::string source;
    if (!threshold_from.empty()) {
      const Checkpoint other = load_checkpoint(threshold_from);
      t = other.threshold;
      source = "checkpoint " + checkpoint_id(other) + " (" + other.provenance.threshold_source + ")";
    } else if (threshold >= 0) {
      t = threshold;
      source = "fixed";
    } else if (ckpt && !rederive) {
      t = ckpt->threshold;
      source = "checkpoint " + checkpoint_id(*ckpt) + " (" + ckpt->provenance.threshold_source + ")";
    }

    const std::vector<Image> test_probs = predict(test);
    EvalReport r;
    if (t) {
      r = evaluate_protocol({}, views(test_probs, test), &*t, source);
    } else {
      const auto train_samples = load_split(m, Split::train);
      if (train_samples.empty()) throw CliError("no training rows to derive a threshold from");
      const std::vector<Image> train_probs = predict(train_samples);
      r = evaluate_protocol(views(train_probs, train_samples), views(test_probs, test));
      r.threshold_source = "training split " + m.dataset_id;
    }
    const std::string text = format_eval_report(r);
    out << text;
    out << "\n" << std::left << std::setw(10) << "AUC" << std::setw(10) << "Dice" << std::setw(10) << "MCC" << "\n"
        << std::fixed << std::setprecision(4) << std::setw(10) << r.auc << std::setw(10) << r.dice << std::setw(10)
        << r.mcc << "\n"
        << std::defaultfloat;
    if (!report.empty()) write_text(report, text);
  }
};

struct AdaptCmd {
  std::string checkpoint, source, target, target_split = "train", out_dir;
  AdaptConfig cfg;
  AugmentFlags aug;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("adapt", "pseudo-label fine-tuning on an unlabelled target dataset");
    c->add_option("--checkpoint", checkpoint, "source model")->required()->check(CLI::ExistingFile);
    c->add_option("--source", source, "source manifest (labelled)")->required()->check(CLI::ExistingFile);
    c->add_option("--target", target, "target manifest (labels ignored)")->required()->check(CLI::ExistingFile);
    c->add_option("--target-split", target_split)->capture_default_str()->check(
        CLI::IsMember({"train", "val", "test"}));
    c->add_option("--out", out_dir)->required();
    c->add_option("--lr0", cfg.lr0)->capture_default_str();
    c->add_option("--lr-scale", cfg.lr_scale)->capture_default_str();
    c->add_option("--extra-epochs", cfg.extra_epochs)->capture_default_str();
    c->add_option("--batch-size", cfg.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--seed", cfg.seed)->capture_default_str();
    aug.add(c);
  }

  void run(const CLI::App& app, std::ostream& out) {
    cfg.augment = aug.enabled;
    cfg.augmentation = aug.cfg;
    cfg.validate();
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    const DatasetManifest sm = open_manifest(source), tm = open_manifest(target);
    const int h = ckpt.train_height, w = ckpt.train_width;
    const auto source_native = load_split(sm, Split::train);
    if (source_native.empty()) throw CliError("source manifest has no training rows");
    std::vector<TrainExample> source_train;
    for (const auto& s : resized(source_native, h, w)) source_train.push_back(to_example(s));
    const auto target_samples = resized(load_split(tm, parse_split(target_split)), h, w);
    if (target_samples.empty()) throw CliError("target split " + target_split + " is empty");

    fs::create_directories(out_dir);
    write_resolved_config(app, out_dir);
    const PseudoLabelSet pseudo = pseudo_label(ckpt, target_samples, tm.dataset_id);
    save_pseudo_labels(pseudo, fs::path(out_dir) / "pseudo");
    out << "pseudo-labelled " << pseudo.items.size() << " target images\n";
    std::ofstream log(fs::path(out_dir) / "adapt_log.jsonl");
    const AdaptResult r = adapt(ckpt, source_train, source_native, pseudo, cfg, &log);
    for (std::size_t e = 0; e < r.epoch_aucs.size(); ++e)
      out << "epoch " << e + 1 << " train_auc " << std::fixed << std::setprecision(4) << r.epoch_aucs[e] << "\n"
          << std::defaultfloat;
    const fs::path ckpt_path = fs::path(out_dir) / "model.lwnt";
    save_checkpoint(r.checkpoint, ckpt_path);
    out << "threshold=" << r.checkpoint.threshold << "\n"
        << "parent_id=" << r.checkpoint.provenance.parent_id << "\n"
        << "checkpoint=" << ckpt_path.string() << "\n"
        << "checkpoint_id=" << checkpoint_id(r.checkpoint) << "\n";
  }
};

struct CompareCmd {
  std::string manifest, split = "test", a, b, checkpoint_a, checkpoint_b, report;
  double threshold_a = -1, threshold_b = -1;
  int n = 100;
  std::uint64_t seed = 0;
  bool tta = true;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("compare", "paired pixel bootstrap between two models");
    c->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    c->add_option("--split", split)->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
    auto* pa = c->add_option("--a", a, "predictions of model A")->check(CLI::ExistingDirectory);
    auto* pb = c->add_option("--b", b, "predictions of model B")->check(CLI::ExistingDirectory);
    auto* ca = c->add_option("--checkpoint-a", checkpoint_a)->check(CLI::ExistingFile);
    auto* cb = c->add_option("--checkpoint-b", checkpoint_b)->check(CLI::ExistingFile);
    (void)pa;
    (void)pb;
    (void)ca;
    (void)cb;
    c->add_option("--threshold-a", threshold_a, "threshold of A (default: from --checkpoint-a)")
        ->capture_default_str();
    c->add_option("--threshold-b", threshold_b)->capture_default_str();
    c->add_option("--n", n, "bootstrap resamples")->capture_default_str();
    c->add_option("--seed", seed)->capture_default_str();
    bool_flag(c, "--tta,!--no-tta", tta);
    c->add_option("--report", report, "write the key=value report here");
  }

  void run(const CLI::App&, std::ostream& out) {
    if (n <= 0) throw CliError("--n must be positive");
    const DatasetManifest m = open_manifest(manifest);
    const auto samples = load_split(m, parse_split(split));
    if (samples.empty()) throw CliError("no rows in split " + split);
    auto side = [&](const std::string& dir, const std::string& ckpt_path, double thr, const char* name) {
      std::pair<std::vector<Image>, double> res;
      std::optional<Checkpoint> ckpt;
      if (!ckpt_path.empty()) ckpt = load_checkpoint(ckpt_path);
      if (!dir.empty()) {
        res.first = read_predictions(dir, samples);
      } else if (ckpt) {
        Model model = load_model(*ckpt);
        res.first = predict_all(model, *ckpt, samples, tta);
      } else {
        throw CliError(std::string("model ") + name + " needs predictions or a checkpoint");
      }
      if (thr >= 0) res.second = thr;
      else if (ckpt) res.second = ckpt->threshold;
      else throw CliError(std::string("model ") + name + " needs --threshold-" + name + " or --checkpoint-" + name);
      return res;
    };
    const auto [pa, ta] = side(a, checkpoint_a, threshold_a, "a");
    const auto [pb, tb] = side(b, checkpoint_b, threshold_b, "b");
    const BootstrapReport r = bootstrap_compare(views(pa, samples), views(pb, samples), ta, tb, n, seed);
    const std::string text = format_bootstrap_report(r);
    out << text;
    if (!report.empty()) write_text(report, text);
  }
};

struct ReportCmd {
  std::string checkpoint;
  ArchFlags arch;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("report", "parameter count, per-layer breakdown and file size");
    c->add_option("--checkpoint", checkpoint, "checkpoint (otherwise a fresh model from the arch flags)")
        ->check(CLI::ExistingFile);
    arch.add(c);
  }

  void run(const CLI::App&, std::ostream& out) {
    Checkpoint ckpt;
    std::uintmax_t size = 0;
    if (!checkpoint.empty()) {
      ckpt = load_checkpoint(checkpoint);
      size = fs::file_size(checkpoint);
    } else {
      Model fresh = Model::build(arch.config(1), 0);
      ckpt = make_checkpoint(fresh, 0, 0);
      size = encode_checkpoint(ckpt).size();
    }
    Model model = load_model(ckpt);
    const UNetConfig& u = ckpt.arch.unet;
    out << "architecture=" << (ckpt.arch.wnet ? "wnet" : "unet") << "\n"
        << "depth=" << u.depth << "\n"
        << "base_width=" << u.base_width << "\n"
        << "in_channels=" << u.in_channels << "\n"
        << "num_classes=" << u.num_classes << "\n"
        << "parameters=" << model.count_params() << "\n"
        << "file_bytes=" << size << "\n"
        << "file_kb=" << std::fixed << std::setprecision(1) << size / 1024.0 << std::defaultfloat << "\n";
    if (!checkpoint.empty())
      out << "train_resolution=" << ckpt.train_width << "x" << ckpt.train_height << "\n"
          << "best_val_auc=" << ckpt.best_val_auc << "\n"
          << "threshold=" << ckpt.threshold << "\n"
          << "dataset_id=" << ckpt.provenance.dataset_id << "\n"
          << "kind=" << ckpt.provenance.kind << "\n"
          << "checkpoint_id=" << checkpoint_id(ckpt) << "\n";
    out << "\n";
    print_param_table(out, model);
  }
};

struct SynthCmd {
  std::string out_dir, dataset_id = "synthetic";
  SynthParams p;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("synth", "procedural fundus-like dataset with exact labels");
    c->add_option("--out", out_dir)->required();
    c->add_option("--dataset-id", dataset_id)->capture_default_str();
    c->add_option("--height", p.height)->capture_default_str();
    c->add_option("--width", p.width)->capture_default_str();
    c->add_option("--roots", p.roots)->capture_default_str();
    c->add_option("--branch-depth", p.branch_depth)->capture_default_str();
    c->add_option("--root-width", p.root_width)->capture_default_str();
    c->add_option("--width-decay", p.width_decay)->capture_default_str();
    c->add_option("--segment-length", p.segment_length)->capture_default_str();
    c->add_option("--fraction-min", p.fraction_min)->capture_default_str();
    c->add_option("--fraction-max", p.fraction_max)->capture_default_str();
    c->add_option("--contrast", p.contrast)->capture_default_str();
    c->add_option("--illumination", p.illumination)->capture_default_str();
    c->add_option("--noise", p.noise)->capture_default_str();
    c->add_option("--texture", p.texture)->capture_default_str();
    c->add_option("--seed", p.seed)->capture_default_str();
    c->add_option("--n-train", p.n_train)->capture_default_str();
    c->add_option("--n-val", p.n_val)->capture_default_str();
    c->add_option("--n-test", p.n_test)->capture_default_str();
  }

  void run(const CLI::App& app, std::ostream& out) {
    p.validate();
    const DatasetManifest m = synth_dataset(p, out_dir, dataset_id);
    write_resolved_config(app, out_dir);
    out << "wrote " << m.rows.size() << " images to " << out_dir << "\n";
  }
};

/// `--config FILE` is read by the top-level parser, so move it in front of
/// the subcommand wherever it was written.
std::vector<std::string> hoist_config(const std::vector<std::string>& args) {
  std::vector<std::string> front, rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      front.push_back(args[i]);
      front.push_back(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      front.push_back(args[i]);
    } else {
      rest.push_back(args[i]);
    }
  }
  front.insert(front.end(), rest.begin(), rest.end());
  return front;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"lwnet: lightweight retinal vessel segmentation", "lwnet"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.set_config("--config", "", "key=value config file (unknown keys are rejected)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (1 is bit-reproducible)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  TrainCmd train_cmd;
  PredictCmd predict_cmd;
  EvalCmd eval_cmd;
  AdaptCmd adapt_cmd;
  CompareCmd compare_cmd;
  ReportCmd report_cmd;
  SynthCmd synth_cmd;
  train_cmd.add(app);
  predict_cmd.add(app);
  eval_cmd.add(app);
  adapt_cmd.add(app);
  compare_cmd.add(app);
  report_cmd.add(app);
  synth_cmd.add(app);

  std::vector<std::string> reversed = hoist_config(args);
  std::reverse(reversed.begin(), reversed.end());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  set_num_threads(threads);
  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "train") train_cmd.run(app, out);
    else if (name == "predict") predict_cmd.run(app, out);
    else if (name == "eval") eval_cmd.run(app, out);
    else if (name == "adapt") adapt_cmd.run(app, out);
    else if (name == "compare") compare_cmd.run(app, out);
    else if (name == "report") report_cmd.run(app, out);
    else if (name == "synth") synth_cmd.run(app, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace lwnet::cli
