#pragma once

// Every artifact-producing CLI command writes a manifest next to its first
// output: the exact argv, seeds, inputs/outputs, tool version and wall time.
// `biascope rerun --manifest <file>` replays the stored argv; outputs must
// come out bit-identical.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace biascope {

inline constexpr const char* kToolVersion = "biascope 0.1.0";

struct RunManifest {
    std::string command;
    std::vector<std::string> argv;  // full invocation, excluding the program name
    uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string tool_version = kToolVersion;
    double wall_clock_sec = 0.0;
};

void save_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest load_manifest(const std::filesystem::path& path);

}  // namespace biascope
