#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lwnet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Planar float image [c][y][x]. Photographs hold values in [0,1] (8-bit
/// codes / 255); probability and soft-label maps use one plane per class.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> px;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        px(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  bool empty() const { return px.empty(); }
  float& at(int c, int y, int x) { return px[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int y, int x) const { return px[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Image&) const = default;
};

/// Per-pixel class ids or a binary mask (0/1).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> px;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return px.size(); }
  bool empty() const { return px.empty(); }
  std::uint8_t& at(int y, int x) { return px[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return px[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count_nonzero() const;
  bool operator==(const Mask&) const = default;
};

// ---- codecs ---------------------------------------------------------------

/// Colour image as 3 planes in [0,1]; grey files are replicated, 16-bit
/// files scaled by 1/65535.
Image read_image(const std::filesystem::path& path);
/// Single-plane map in [0,1] (16-bit or 8-bit grey).
Image read_probability(const std::filesystem::path& path);
/// Raw 8-bit values of a grey (or first channel of a colour) file.
Mask read_mask_raw(const std::filesystem::path& path);
/// Vessel mask: value > 127 -> 1.
Mask read_binary_mask(const std::filesystem::path& path);

/// 8-bit PNG/PPM of a 1- or 3-plane image in [0,1].
void write_image8(const std::filesystem::path& path, const Image& img);
/// 16-bit grey PNG of plane `channel` of a map in [0,1].
void write_probability16(const std::filesystem::path& path, const Image& map,
                         int channel = 0);
/// 8-bit grey file; `scale` multiplies values (255 turns 0/1 into black/white).
void write_mask(const std::filesystem::path& path, const Mask& m, int scale = 1);

// ---- resizing -------------------------------------------------------------

Image resize_bilinear(const Image& img, int height, int width);
Mask resize_nearest(const Mask& m, int height, int width);
/// Bilinear resize of probability maps, clamped back to [0,1].
Image resize_probs_native(const Image& probs, int height, int width);

/// Reflect-pads bottom/right so both sides are multiples of `multiple`.
Image pad_to_multiple(const Image& img, int multiple);
Image crop(const Image& img, int height, int width);

// ---- samples and manifests --------------------------------------------------

enum class Split { train, val, test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct Sample {
  std::string name;
  Image image;  // 3 planes
  Mask label;   // class ids; empty for unlabelled targets
  Mask fov;     // 0/1
  int height() const { return image.height; }
  int width() const { return image.width; }
};

struct ManifestRow {
  std::string image;
  std::string label;  // may be empty
  std::string fov;    // may be empty (estimated on load)
  Split split = Split::train;
  bool operator==(const ManifestRow&) const = default;
};

/// CSV with optional `#key=value` metadata lines before the header
/// `image,label,fov,split`. Relative paths resolve against `base_dir`.
struct DatasetManifest {
  std::string dataset_id;
  int train_height = 0;  // 0: train at native resolution
  int train_width = 0;
  int classes = 1;
  /// "hard" class-id labels or "soft" 16-bit probability maps.
  std::string label_kind = "hard";
  /// Rows without a FOV file get an estimated mask; otherwise an error.
  bool estimate_fov = true;
  std::filesystem::path base_dir;
  std::vector<ManifestRow> rows;

  std::vector<ManifestRow> rows_for(Split s) const;
  std::filesystem::path resolve(const std::string& p) const;
  /// Throws DataError on overlapping splits or a resolution not divisible
  /// by `size_multiple`.
  void validate(int size_multiple = 1) const;
};

/// When the manifest has no val rows, moves the last `n` train rows (in file
/// order) to val and returns how many moved; otherwise leaves it alone.
int carve_validation(DatasetManifest& m, int n = 4);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// Decodes one row, estimating the FOV if none is given. Enforces shape
/// agreement, label range and a non-empty FOV.
Sample load_sample(const DatasetManifest& m, const ManifestRow& row);
std::vector<Sample> load_split(const DatasetManifest& m, Split s);

/// Image bilinear, label and fov nearest.
Sample resize_sample(const Sample& s, int height, int width);

/// Training target: one plane for binary tasks (label == 1), one-hot planes
/// otherwise.
Image label_to_target(const Mask& label, int classes);
/// Vessel probability used for evaluation: the single plane for binary
/// tasks, 1 - p(background) otherwise.
Image vessel_probability(const Image& probs);

// ---- augmentation -----------------------------------------------------------

struct AugmentConfig {
  bool hflip = true;
  bool vflip = true;
  double max_rotation_deg = 15.0;  // 0 disables
  double brightness = 0.10;        // multiplicative jitter, 0 disables
  double contrast = 0.10;          // around the image mean, 0 disables
  static AugmentConfig none() { return {false, false, 0.0, 0.0, 0.0}; }
  bool operator==(const AugmentConfig&) const = default;
};

/// One draw of the augmentation policy.
struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
  double brightness = 1.0;
  double contrast = 1.0;
};

AugmentDraw draw_augment(const AugmentConfig& cfg, std::mt19937_64& rng);

/// Geometric part (flips then rotation about the centre, reflection
/// padding). Images and soft maps are sampled bilinearly, masks nearest.
Image apply_geometry(const Image& img, const AugmentDraw& d);
Mask apply_geometry(const Mask& m, const AugmentDraw& d);
/// Photometric jitter, clamped to [0,1].
Image apply_photometric(const Image& img, const AugmentDraw& d);

Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng);

// ---- field of view ----------------------------------------------------------

/// Otsu luminance threshold, largest 4-connected component, holes filled.
/// Throws DataError for an all-dark image.
Mask estimate_fov(const Image& img);

// ---- synthetic fundus-like data --------------------------------------------

struct SynthParams {
  int height = 256;
  int width = 256;
  // Geometry
  int roots = 4;               // vessel trees leaving the optic disc
  int branch_depth = 6;        // bifurcation levels per tree
  double root_width = 3.5;     // px, decays by width_decay per level
  double width_decay = 0.78;
  double segment_length = 9.0; // px per growth step
  double fraction_min = 0.08;  // vessel fraction band within the FOV
  double fraction_max = 0.16;
  // Appearance
  double contrast = 1.0;       // vessel darkening relative to background
  double illumination = 0.0;   // strength of a linear illumination ramp
  double noise = 0.02;         // additive Gaussian sigma
  double texture = 0.05;       // low-frequency background variation
  std::uint64_t seed = 1;
  // Dataset layout for synth_dataset
  int n_train = 16;
  int n_val = 4;
  int n_test = 8;

  void validate() const;
  bool operator==(const SynthParams&) const = default;
};

/// Image `index` of the dataset. Geometry (label, fov) depends only on the
/// seed, index and geometry fields; appearance knobs never change it.
Sample synth_sample(const SynthParams& p, int index);
double vessel_fraction(const Sample& s);

/// Writes images/, labels/, fov/, manifest.csv and synth_params.json under
/// `dir` and returns the manifest.
DatasetManifest synth_dataset(const SynthParams& p,
                              const std::filesystem::path& dir,
                              const std::string& dataset_id = "synthetic");

}  // namespace lwnet
