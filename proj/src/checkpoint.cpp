#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "lwnet/trainer.hpp"

namespace lwnet {

namespace {

constexpr char kMagic[] = "LWNT1\n";
constexpr std::size_t kMagicLen = 6;

using nlohmann::json;

const char* upsampling_name(Upsampling u) {
  return u == Upsampling::transposed ? "transposed" : "bilinear";
}

Upsampling parse_upsampling(const std::string& s) {
  if (s == "transposed") return Upsampling::transposed;
  if (s == "bilinear") return Upsampling::bilinear;
  throw std::runtime_error("checkpoint: unknown upsampling '" + s + "'");
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(u);
}

json provenance_json(const Provenance& p) {
  return {{"kind", p.kind},
          {"dataset_id", p.dataset_id},
          {"seed", p.seed},
          {"iterations", p.iterations},
          {"cycles", p.cycles},
          {"best_cycle", p.best_cycle},
          {"threshold_source", p.threshold_source},
          {"parent_id", p.parent_id},
          {"target_dataset_id", p.target_dataset_id}};
}

Provenance parse_provenance(const json& j) {
  Provenance p;
  p.kind = j.at("kind").get<std::string>();
  p.dataset_id = j.at("dataset_id").get<std::string>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.iterations = j.at("iterations").get<int>();
  p.cycles = j.at("cycles").get<int>();
  p.best_cycle = j.at("best_cycle").get<int>();
  p.threshold_source = j.at("threshold_source").get<std::string>();
  p.parent_id = j.at("parent_id").get<std::string>();
  p.target_dataset_id = j.at("target_dataset_id").get<std::string>();
  return p;
}

}  // namespace

Checkpoint make_checkpoint(Model& model, int train_height, int train_width) {
  Checkpoint c;
  c.arch = model.config();
  c.train_height = train_height;
  c.train_width = train_width;
  c.state = capture_state(model);
  return c;
}

Model load_model(const Checkpoint& ckpt) {
  Model model = Model::build(ckpt.arch, 0);
  restore_state(model, ckpt.state);
  return model;
}

std::string encode_checkpoint(const Checkpoint& c) {
  if (!(c.threshold >= 0 && c.threshold <= 1))
    throw std::invalid_argument("checkpoint: threshold outside [0,1]");
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : c.state.entries) {
    if (e.values.size() != e.shape.numel())
      throw std::invalid_argument("checkpoint: tensor " + e.name + " does not match its shape");
    tensors.push_back({{"name", e.name},
                       {"shape", {e.shape.n, e.shape.c, e.shape.h, e.shape.w}},
                       {"offset", offset}});
    offset += 4 * e.values.size();
  }
  const UNetConfig& u = c.arch.unet;
  const json header = {
      {"arch",
       {{"depth", u.depth},
        {"base_width", u.base_width},
        {"in_channels", u.in_channels},
        {"num_classes", u.num_classes},
        {"upsampling", upsampling_name(u.upsampling)},
        {"wnet", c.arch.wnet}}},
      {"train_resolution", {c.train_height, c.train_width}},
      {"best_val_auc", c.best_val_auc},
      {"threshold", c.threshold},
      {"provenance", provenance_json(c.provenance)},
      {"tensors", tensors},
      {"body_bytes", offset}};
  const std::string text = header.dump();
  std::string out(kMagic, kMagicLen);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& e : c.state.entries)
    for (float v : e.values) put_f32(out, v);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 8 || bytes.compare(0, kMagicLen, kMagic) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const std::uint64_t hlen = get_u64(bytes, kMagicLen);
  const std::size_t body = kMagicLen + 8 + hlen;
  if (hlen > bytes.size() || body > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
  json h;
  try {
    h = json::parse(bytes.substr(kMagicLen + 8, hlen));
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad header: ") + e.what());
  }
  Checkpoint c;
  try {
    const json& a = h.at("arch");
    c.arch.unet.depth = a.at("depth").get<int>();
    c.arch.unet.base_width = a.at("base_width").get<int>();
    c.arch.unet.in_channels = a.at("in_channels").get<int>();
    c.arch.unet.num_classes = a.at("num_classes").get<int>();
    c.arch.unet.upsampling = parse_upsampling(a.at("upsampling").get<std::string>());
    c.arch.wnet = a.at("wnet").get<bool>();
    c.train_height = h.at("train_resolution").at(0).get<int>();
    c.train_width = h.at("train_resolution").at(1).get<int>();
    c.best_val_auc = h.at("best_val_auc").get<double>();
    c.threshold = h.at("threshold").get<double>();
    c.provenance = parse_provenance(h.at("provenance"));
    const std::uint64_t body_bytes = h.at("body_bytes").get<std::uint64_t>();
    if (bytes.size() - body != body_bytes) throw std::runtime_error("checkpoint: body size mismatch");
    std::uint64_t expected = 0;
    for (const auto& t : h.at("tensors")) {
      ModelState::Entry e;
      e.name = t.at("name").get<std::string>();
      const auto& s = t.at("shape");
      e.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>(), s.at(3).get<int>()};
      const std::uint64_t off = t.at("offset").get<std::uint64_t>();
      // Tensors are packed in table order, so the offsets are fully determined.
      if (off != expected || off + 4 * e.shape.numel() > body_bytes)
        throw std::runtime_error("checkpoint: bad offset for " + e.name);
      e.values.resize(e.shape.numel());
      const char* p = bytes.data() + body + off;
      for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = get_f32(p + 4 * i);
      expected = off + 4 * e.shape.numel();
      c.state.entries.push_back(std::move(e));
    }
    if (expected != body_bytes) throw std::runtime_error("checkpoint: unused body bytes");
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad header: ") + e.what());
  }
  if (!(c.threshold >= 0 && c.threshold <= 1)) throw std::runtime_error("checkpoint: threshold outside [0,1]");
  c.arch.unet.validate();
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

std::string checkpoint_id(const Checkpoint& ckpt) {
  // FNV-1a over the encoded file.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : encode_checkpoint(ckpt)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lwnet
