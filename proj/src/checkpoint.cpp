#include "gridsight/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace gridsight {

uint32_t crc32_ieee(const uint8_t* data, size_t len) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

std::string config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["preset"] = cfg.preset;
  j["input_size"] = cfg.input_size;
  j["num_classes"] = cfg.num_classes;
  j["boxes_per_cell"] = cfg.boxes_per_cell;
  j["strides"] = cfg.strides;
  j["width"] = cfg.width;
  j["depth"] = cfg.depth;
  j["aux_enabled"] = cfg.aux_enabled;
  j["seed"] = cfg.seed;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw input_error(std::string("bad config json: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.preset = j.value("preset", cfg.preset);
    cfg.input_size = j.value("input_size", cfg.input_size);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.boxes_per_cell = j.value("boxes_per_cell", cfg.boxes_per_cell);
    cfg.strides = j.value("strides", cfg.strides);
    cfg.width = j.value("width", cfg.width);
    cfg.depth = j.value("depth", cfg.depth);
    cfg.aux_enabled = j.value("aux_enabled", cfg.aux_enabled);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw input_error(std::string("bad config json: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

template <typename T>
void put(std::string& out, T v) {
  // little-endian scalar append
  for (size_t i = 0; i < sizeof(T); ++i)
    out.push_back(char((uint64_t(v) >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::string& buf;
  size_t at = 0;
  const std::string where;

  void need(size_t n) const {
    if (at + n > buf.size()) throw input_error("truncated checkpoint: " + where);
  }
  template <typename T>
  T take() {
    need(sizeof(T));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
      v |= uint64_t(uint8_t(buf[at + i])) << (8 * i);
    at += sizeof(T);
    return T(v);
  }
  std::string take_str(size_t n) {
    need(n);
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  const auto& entries = model.params().entries();
  std::string manifest;
  std::string payload;
  uint64_t offset = 0;
  put<uint32_t>(manifest, uint32_t(entries.size()));
  for (const auto& p : entries) {
    put<uint16_t>(manifest, uint16_t(p.name.size()));
    manifest += p.name;
    put<uint8_t>(manifest, uint8_t(p.tensor.ndim()));
    for (int d = 0; d < p.tensor.ndim(); ++d) put<int32_t>(manifest, int32_t(p.tensor.dim(d)));
    put<uint64_t>(manifest, offset);
    const auto data = p.tensor.data();
    const size_t bytes = data.size() * sizeof(float);
    size_t pos = payload.size();
    payload.resize(pos + bytes);
    std::memcpy(payload.data() + pos, data.data(), bytes);
    offset += bytes;
  }

  std::string out;
  out += "GSD1";
  put<uint32_t>(out, kCheckpointVersion);
  const std::string cfg = config_to_json(model.config());
  put<uint32_t>(out, uint32_t(cfg.size()));
  out += cfg;
  out += manifest;
  put<uint64_t>(out, uint64_t(payload.size()));
  out += payload;
  put<uint32_t>(out, crc32_ieee(reinterpret_cast<const uint8_t*>(payload.data()),
                                payload.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw input_error("cannot write checkpoint: " + path.string());
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw input_error("failed writing checkpoint: " + path.string());
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw input_error("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf, 0, path.string()};

  if (r.take_str(4) != "GSD1") throw input_error("not a checkpoint (bad magic): " + path.string());
  const auto version = r.take<uint32_t>();
  if (version != kCheckpointVersion)
    throw input_error("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.take<uint32_t>();
  ModelConfig cfg = config_from_json(r.take_str(cfg_len));
  Model<float> model(cfg);

  const auto n_entries = r.take<uint32_t>();
  const auto& entries = model.params().entries();
  if (n_entries != entries.size())
    throw input_error("checkpoint manifest has " + std::to_string(n_entries) +
                      " entries, model built from its config has " +
                      std::to_string(entries.size()));

  struct ManifestEntry {
    std::string name;
    Shape shape;
    uint64_t offset;
  };
  std::vector<ManifestEntry> manifest;
  for (uint32_t i = 0; i < n_entries; ++i) {
    ManifestEntry e;
    const auto name_len = r.take<uint16_t>();
    e.name = r.take_str(name_len);
    const auto ndim = r.take<uint8_t>();
    for (int d = 0; d < int(ndim); ++d) e.shape.push_back(r.take<int32_t>());
    e.offset = r.take<uint64_t>();
    manifest.push_back(std::move(e));
  }
  const auto payload_len = r.take<uint64_t>();
  r.need(payload_len);
  const char* payload = buf.data() + r.at;
  r.at += payload_len;
  const auto stored_crc = r.take<uint32_t>();
  const uint32_t actual_crc =
      crc32_ieee(reinterpret_cast<const uint8_t*>(payload), payload_len);
  if (stored_crc != actual_crc)
    throw input_error("checkpoint CRC mismatch in " + path.string());

  uint64_t cursor = 0;
  for (uint32_t i = 0; i < n_entries; ++i) {
    const auto& want = entries[i];
    const auto& got = manifest[i];
    if (got.name != want.name || got.shape != want.tensor.shape())
      throw input_error("checkpoint entry '" + got.name + "' " + shape_str(got.shape) +
                        " does not match model parameter '" + want.name + "' " +
                        shape_str(want.tensor.shape()));
    const uint64_t bytes = uint64_t(want.tensor.size()) * sizeof(float);
    if (got.offset != cursor || got.offset + bytes > payload_len)
      throw input_error("checkpoint entry '" + got.name + "' has bad payload offset");
    std::memcpy(model.params().entries()[i].tensor.data().data(), payload + got.offset, bytes);
    cursor += bytes;
  }
  if (cursor != payload_len)
    throw input_error("checkpoint payload has " + std::to_string(payload_len - cursor) +
                      " unclaimed bytes");
  return model;
}

}  // namespace gridsight
