#pragma once

// Checkpoint file format:
//   line 1   magic + version ("biascope checkpoint v1")
//   line 2   single-line JSON header: config + ordered tensor manifest
//   payload  raw little-endian f32 values, manifest order
//   trailer  4-byte little-endian CRC32 of the payload
// Round-trips are bit-exact.

#include "biascope/model.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace biascope {

struct CheckpointError : std::runtime_error {
    enum class Kind { BadMagic, BadHeader, MissingPayload, SizeMismatch, ChecksumMismatch };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

void save_checkpoint(const std::filesystem::path& path, const Transformer& model);
Transformer load_checkpoint(const std::filesystem::path& path);

// Config as a standalone text document (same JSON object as the header).
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

}  // namespace biascope
