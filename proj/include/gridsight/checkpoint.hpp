#pragma once

// Checkpoint container: "GSD1" magic, format version, the model config as
// JSON, a manifest of (name, shape, byte offset) entries, a little-endian
// float32 payload, and a trailing CRC-32 of the payload. Loading rebuilds
// the model from the stored config and verifies every manifest entry
// against it; parameters round-trip bitwise.

#include <filesystem>

#include "gridsight/model.hpp"

namespace gridsight {

inline constexpr uint32_t kCheckpointVersion = 1;

uint32_t crc32_ieee(const uint8_t* data, size_t len);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
Model<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace gridsight
