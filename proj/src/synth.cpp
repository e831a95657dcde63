#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numbers>

#include "lwnet/data_io.hpp"
#include "lwnet/random.hpp"

namespace lwnet {

void SynthParams::validate() const {
  if (height < 16 || width < 16) throw DataError("synth: image must be at least 16x16");
  if (contrast <= 0) throw DataError("synth: contrast must be > 0");
  if (!(fraction_min > 0 && fraction_min < fraction_max && fraction_max < 1))
    throw DataError("synth: need 0 < fraction_min < fraction_max < 1");
  if (roots < 1 || branch_depth < 0) throw DataError("synth: bad tree shape");
  if (root_width <= 0 || width_decay <= 0 || width_decay > 1 || segment_length <= 0)
    throw DataError("synth: bad vessel sizes");
  if (noise < 0 || texture < 0 || illumination < 0)
    throw DataError("synth: appearance knobs must be >= 0");
  if (n_train < 0 || n_val < 0 || n_test < 0) throw DataError("synth: negative split size");
}

namespace {

constexpr double kPi = std::numbers::pi;

struct Geometry {
  int h, w;
  double cy, cx, radius;  // FOV disc
  double dy, dx;          // optic disc
  Mask fov, label;
  std::vector<float> profile;  // vessel darkness in [0,1]
  std::size_t fov_pixels = 0, vessel_pixels = 0;
  double target = 0;

  bool done() const { return vessel_pixels >= target * fov_pixels; }

  // Capsule from (y0,x0) to (y1,x1) of radius r, clipped to the FOV.
  void segment(double y0, double x0, double y1, double x1, double r) {
    const int ylo = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - r - 1)));
    const int yhi = std::min(h - 1, static_cast<int>(std::ceil(std::max(y0, y1) + r + 1)));
    const int xlo = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - r - 1)));
    const int xhi = std::min(w - 1, static_cast<int>(std::ceil(std::max(x0, x1) + r + 1)));
    const double vy = y1 - y0, vx = x1 - x0;
    const double len2 = vy * vy + vx * vx;
    for (int y = ylo; y <= yhi; ++y)
      for (int x = xlo; x <= xhi; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!fov.px[i]) continue;
        double t = len2 > 0 ? ((y - y0) * vy + (x - x0) * vx) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double ey = y0 + t * vy - y, ex = x0 + t * vx - x;
        const double d = std::sqrt(ey * ey + ex * ex);
        if (d > r + 1) continue;
        const double edge = std::clamp(r + 0.5 - d, 0.0, 1.0);
        const double core = std::sqrt(std::max(0.0, 1.0 - (d / (r + 0.5)) * (d / (r + 0.5))));
        profile[i] = std::max(profile[i], static_cast<float>(edge * (0.55 + 0.45 * core)));
        if (d <= r && !label.px[i]) {
          label.px[i] = 1;
          ++vessel_pixels;
        }
      }
  }

  bool inside(double y, double x) const {
    const double ry = y - cy, rx = x - cx;
    return ry * ry + rx * rx <= radius * radius;
  }
};

struct Branch {
  double y, x, angle, width;
  int depth;
};

void grow_tree(Geometry& g, const SynthParams& p, double scale, double angle,
               std::mt19937_64& rng) {
  std::vector<Branch> stack{{g.dy, g.dx, angle, p.root_width * scale, 0}};
  const double step = p.segment_length * scale;
  while (!stack.empty() && !g.done()) {
    Branch b = stack.back();
    stack.pop_back();
    const int steps = 3 + static_cast<int>(uniform_index(rng, 6));
    bool left = false;
    for (int s = 0; s < steps && !g.done(); ++s) {
      b.angle += uniform(rng, -0.3, 0.3);
      const double ny = b.y + step * std::sin(b.angle);
      const double nx = b.x + step * std::cos(b.angle);
      g.segment(b.y, b.x, ny, nx, std::max(0.5, b.width / 2));
      b.y = ny;
      b.x = nx;
      if (!g.inside(b.y, b.x)) {
        left = true;
        break;
      }
    }
    if (left || b.depth >= p.branch_depth) continue;
    const double spread = uniform(rng, 0.3, 0.7);
    const double bias = uniform(rng, -0.15, 0.15);
    const double cw = std::max(1.0, b.width * p.width_decay);
    stack.push_back({b.y, b.x, b.angle + spread + bias, cw, b.depth + 1});
    stack.push_back({b.y, b.x, b.angle - spread + bias, cw, b.depth + 1});
  }
}

Geometry make_geometry(const SynthParams& p, int index) {
  std::mt19937_64 rng(derive_seed(p.seed, static_cast<std::uint64_t>(index), 0));
  Geometry g;
  g.h = p.height;
  g.w = p.width;
  const double m = std::min(p.height, p.width);
  const double scale = m / 256.0;
  g.radius = 0.46 * m * uniform(rng, 0.95, 1.0);
  g.cy = (p.height - 1) / 2.0 + uniform(rng, -0.02, 0.02) * m;
  g.cx = (p.width - 1) / 2.0 + uniform(rng, -0.02, 0.02) * m;
  const double disc_angle = uniform(rng, 0, 2 * kPi);
  g.dy = g.cy + 0.5 * g.radius * std::sin(disc_angle);
  g.dx = g.cx + 0.5 * g.radius * std::cos(disc_angle);

  g.fov = Mask(p.height, p.width);
  g.label = Mask(p.height, p.width);
  g.profile.assign(static_cast<std::size_t>(p.height) * p.width, 0.0f);
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x)
      if (g.inside(y, x)) {
        g.fov.at(y, x) = 1;
        ++g.fov_pixels;
      }

  const double band = p.fraction_max - p.fraction_min;
  g.target = uniform(rng, p.fraction_min + 0.1 * band, p.fraction_max - 0.3 * band);
  // Main trees fan out from the disc; extra trees are added until the
  // target density is reached.
  for (int t = 0; !g.done() && t < 64 * p.roots; ++t) {
    const double angle = t < p.roots
                             ? disc_angle + kPi + (t - (p.roots - 1) / 2.0) * (2 * kPi / (p.roots + 1)) +
                                   uniform(rng, -0.2, 0.2)
                             : uniform(rng, 0, 2 * kPi);
    grow_tree(g, p, scale, angle, rng);
  }
  return g;
}

}  // namespace

Sample synth_sample(const SynthParams& p, int index) {
  p.validate();
  Geometry g = make_geometry(p, index);
  std::mt19937_64 rng(derive_seed(p.seed, static_cast<std::uint64_t>(index), 1));

  const double base[3] = {0.80 + uniform(rng, -0.05, 0.05), 0.42 + uniform(rng, -0.05, 0.05),
                          0.20 + uniform(rng, -0.04, 0.04)};
  const double vessel_weight[3] = {0.75, 1.0, 0.9};
  double freq[4][2], phase[4];
  for (int k = 0; k < 4; ++k) {
    freq[k][0] = uniform(rng, 1.0, 4.0) * 2 * kPi / p.height;
    freq[k][1] = uniform(rng, 1.0, 4.0) * 2 * kPi / p.width;
    phase[k] = uniform(rng, 0, 2 * kPi);
  }
  const double ramp = uniform(rng, 0, 2 * kPi);
  const double disc_r = 0.12 * g.radius;

  Sample s;
  s.name = "synth_" + std::to_string(index);
  s.image = Image(3, p.height, p.width);
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * p.width + x;
      if (!g.fov.px[i]) continue;
      const double ry = (y - g.cy) / g.radius, rx = (x - g.cx) / g.radius;
      const double vignette = 1.0 - 0.35 * (ry * ry + rx * rx);
      double tex = 0;
      for (int k = 0; k < 4; ++k) tex += std::cos(freq[k][0] * y + freq[k][1] * x + phase[k]);
      const double texture = 1.0 + p.texture * tex / 4.0;
      const double light = std::max(0.0, 1.0 + p.illumination * (ry * std::sin(ramp) + rx * std::cos(ramp)));
      const double ddy = y - g.dy, ddx = x - g.dx;
      const double disc = 0.35 * std::exp(-(ddy * ddy + ddx * ddx) / (disc_r * disc_r));
      for (int c = 0; c < 3; ++c) {
        double v = (base[c] * vignette * texture + disc) *
                   (1.0 - 0.55 * p.contrast * vessel_weight[c] * g.profile[i]);
        v = v * light + p.noise * normal01(rng);
        v = std::clamp(v, 0.0, 1.0);
        s.image.at(c, y, x) = static_cast<float>(std::lround(v * 255.0) / 255.0);
      }
    }
  s.label = std::move(g.label);
  s.fov = std::move(g.fov);
  return s;
}

double vessel_fraction(const Sample& s) {
  std::size_t fov = 0, vessel = 0;
  for (std::size_t i = 0; i < s.fov.size(); ++i)
    if (s.fov.px[i]) {
      ++fov;
      vessel += s.label.px[i] != 0;
    }
  return fov ? static_cast<double>(vessel) / fov : 0.0;
}

DatasetManifest synth_dataset(const SynthParams& p, const std::filesystem::path& dir,
                              const std::string& dataset_id) {
  p.validate();
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.dataset_id = dataset_id;
  m.train_height = p.height;
  m.train_width = p.width;
  m.classes = 1;
  m.base_dir = dir;
  const int total = p.n_train + p.n_val + p.n_test;
  for (int i = 0; i < total; ++i) {
    const Sample s = synth_sample(p, i);
    char name[32];
    std::snprintf(name, sizeof name, "%04d.png", i);
    const std::string img = std::string("images/") + name;
    const std::string lab = std::string("labels/") + name;
    const std::string fov = std::string("fov/") + name;
    write_image8(dir / img, s.image);
    write_mask(dir / lab, s.label, 255);
    write_mask(dir / fov, s.fov, 255);
    const Split split = i < p.n_train ? Split::train
                        : i < p.n_train + p.n_val ? Split::val
                                                  : Split::test;
    m.rows.push_back({img, lab, fov, split});
  }
  save_manifest(m, dir / "manifest.csv");

  nlohmann::json j = {
      {"height", p.height}, {"width", p.width}, {"roots", p.roots},
      {"branch_depth", p.branch_depth}, {"root_width", p.root_width},
      {"width_decay", p.width_decay}, {"segment_length", p.segment_length},
      {"fraction_min", p.fraction_min}, {"fraction_max", p.fraction_max},
      {"contrast", p.contrast}, {"illumination", p.illumination}, {"noise", p.noise},
      {"texture", p.texture}, {"seed", p.seed}, {"n_train", p.n_train},
      {"n_val", p.n_val}, {"n_test", p.n_test}, {"dataset_id", dataset_id}};
  std::ofstream(dir / "synth_params.json") << j.dump(2) << "\n";
  return m;
}

}  // namespace lwnet
