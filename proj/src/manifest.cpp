#include "biascope/manifest.hpp"

#include <json.hpp>

#include <fstream>
#include <stdexcept>

namespace biascope {

using nlohmann::json;

void save_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
    const json j = {{"command", manifest.command},   {"argv", manifest.argv},
                    {"seed", manifest.seed},         {"inputs", manifest.inputs},
                    {"outputs", manifest.outputs},   {"tool_version", manifest.tool_version},
                    {"wall_clock_sec", manifest.wall_clock_sec}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    out << j.dump(2) << "\n";
}

RunManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path.string());
    json j;
    in >> j;
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<uint64_t>();
    m.inputs = j.at("inputs").get<std::vector<std::string>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    return m;
}

}  // namespace biascope
