#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "lwnet/data_io.hpp"

namespace lwnet {

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split tag '" + s + "'");
}

std::vector<ManifestRow> DatasetManifest::rows_for(Split s) const {
  std::vector<ManifestRow> out;
  for (const auto& r : rows)
    if (r.split == s) out.push_back(r);
  return out;
}

std::filesystem::path DatasetManifest::resolve(const std::string& p) const {
  std::filesystem::path path(p);
  if (path.is_absolute() || base_dir.empty()) return path;
  return base_dir / path;
}

int carve_validation(DatasetManifest& m, int n) {
  if (n < 0) throw DataError("carve_validation: negative count");
  if (!m.rows_for(Split::val).empty()) return 0;
  int moved = 0;
  for (auto it = m.rows.rbegin(); it != m.rows.rend() && moved < n; ++it)
    if (it->split == Split::train) {
      it->split = Split::val;
      ++moved;
    }
  if (moved > 0 && static_cast<int>(m.rows_for(Split::train).size()) == 0)
    throw DataError("carve_validation: no training rows left");
  return moved;
}

void DatasetManifest::validate(int size_multiple) const {
  if (classes < 1) throw DataError("manifest: classes must be >= 1");
  if (label_kind != "hard" && label_kind != "soft")
    throw DataError("manifest: label_kind must be hard or soft");
  if ((train_height > 0) != (train_width > 0))
    throw DataError("manifest: incomplete training resolution");
  if (train_height > 0 &&
      (train_height % size_multiple != 0 || train_width % size_multiple != 0))
    throw DataError("manifest: training resolution " + std::to_string(train_width) +
                    "x" + std::to_string(train_height) + " not divisible by " +
                    std::to_string(size_multiple));
  std::map<std::string, Split> seen;
  for (const auto& r : rows) {
    const std::string key = resolve(r.image).lexically_normal().string();
    auto [it, inserted] = seen.emplace(key, r.split);
    if (!inserted && it->second != r.split)
      throw DataError("manifest: " + r.image + " appears in splits " +
                      split_name(it->second) + " and " + split_name(r.split));
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void parse_resolution(const std::string& v, int& h, int& w) {
  const auto x = v.find('x');
  if (x == std::string::npos) throw DataError("manifest: bad train_resolution '" + v + "'");
  w = std::stoi(v.substr(0, x));
  h = std::stoi(v.substr(x + 1));
  if (w <= 0 || h <= 0) throw DataError("manifest: bad train_resolution '" + v + "'");
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file: " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  m.dataset_id = path.stem().string();
  std::string line;
  bool header = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = trim(line.substr(1, eq - 1));
      const std::string value = trim(line.substr(eq + 1));
      if (key == "dataset_id") m.dataset_id = value;
      else if (key == "train_resolution") parse_resolution(value, m.train_height, m.train_width);
      else if (key == "classes") m.classes = std::stoi(value);
      else if (key == "label_kind") m.label_kind = value;
      else if (key == "estimate_fov") m.estimate_fov = value == "1" || value == "true";
      else throw DataError("manifest: unknown key '" + key + "'");
      continue;
    }
    auto cells = split_csv(line);
    if (!header) {
      if (cells != std::vector<std::string>{"image", "label", "fov", "split"})
        throw DataError("manifest: header must be image,label,fov,split");
      header = true;
      continue;
    }
    if (cells.size() != 4)
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 4 fields");
    if (cells[0].empty())
      throw DataError("manifest line " + std::to_string(line_no) + ": empty image path");
    m.rows.push_back({cells[0], cells[1], cells[2], parse_split(cells[3])});
  }
  if (!header) throw DataError("manifest: no header in " + path.string());
  m.validate();
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "#dataset_id=" << m.dataset_id << "\n";
  if (m.train_height > 0)
    out << "#train_resolution=" << m.train_width << "x" << m.train_height << "\n";
  out << "#classes=" << m.classes << "\n";
  out << "#label_kind=" << m.label_kind << "\n";
  out << "#estimate_fov=" << (m.estimate_fov ? 1 : 0) << "\n";
  out << "image,label,fov,split\n";
  for (const auto& r : m.rows)
    out << r.image << "," << r.label << "," << r.fov << "," << split_name(r.split) << "\n";
}

Sample load_sample(const DatasetManifest& m, const ManifestRow& row) {
  Sample s;
  s.name = std::filesystem::path(row.image).stem().string();
  s.image = read_image(m.resolve(row.image));
  const int h = s.image.height, w = s.image.width;
  if (!row.label.empty() && m.label_kind == "hard") {
    const auto path = m.resolve(row.label);
    s.label = m.classes == 1 ? read_binary_mask(path) : read_mask_raw(path);
    if (s.label.height != h || s.label.width != w)
      throw DataError("shape mismatch between " + row.image + " and " + row.label);
    const int limit = std::max(2, m.classes);
    for (auto v : s.label.px)
      if (v >= limit)
        throw DataError("label " + row.label + " has class id " + std::to_string(v) +
                        " >= " + std::to_string(limit));
  }
  if (!row.fov.empty()) {
    s.fov = read_binary_mask(m.resolve(row.fov));
    if (s.fov.height != h || s.fov.width != w)
      throw DataError("shape mismatch between " + row.image + " and " + row.fov);
  } else if (m.estimate_fov) {
    s.fov = estimate_fov(s.image);
  } else {
    throw DataError("no FOV for " + row.image + " and estimation disabled");
  }
  if (s.fov.count_nonzero() == 0) throw DataError("empty FOV for " + row.image);
  return s;
}

std::vector<Sample> load_split(const DatasetManifest& m, Split s) {
  std::vector<Sample> out;
  for (const auto& r : m.rows_for(s)) out.push_back(load_sample(m, r));
  return out;
}

Sample resize_sample(const Sample& s, int height, int width) {
  Sample out;
  out.name = s.name;
  out.image = resize_bilinear(s.image, height, width);
  if (!s.label.empty()) out.label = resize_nearest(s.label, height, width);
  if (!s.fov.empty()) out.fov = resize_nearest(s.fov, height, width);
  return out;
}

Image label_to_target(const Mask& label, int classes) {
  if (classes == 1) {
    Image t(1, label.height, label.width);
    for (std::size_t i = 0; i < label.size(); ++i) t.px[i] = label.px[i] == 1 ? 1.0f : 0.0f;
    return t;
  }
  Image t(classes, label.height, label.width);
  const std::size_t plane = label.size();
  for (std::size_t i = 0; i < plane; ++i) {
    const int c = label.px[i];
    if (c >= classes) throw DataError("label_to_target: class id out of range");
    t.px[c * plane + i] = 1.0f;
  }
  return t;
}

Image vessel_probability(const Image& probs) {
  if (probs.channels == 1) return probs;
  Image v(1, probs.height, probs.width);
  for (std::size_t i = 0; i < v.px.size(); ++i)
    v.px[i] = std::clamp(1.0f - probs.px[i], 0.0f, 1.0f);
  return v;
}

}  // namespace lwnet
