#include "biascope/checkpoint.hpp"

#include <json.hpp>
#include <zlib.h>

#include <cstring>
#include <fstream>

namespace biascope {

using nlohmann::json;

namespace {

constexpr const char* kMagic = "biascope checkpoint v1";

json config_json(const ModelConfig& cfg) {
    return json{{"n_layers", cfg.n_layers},       {"n_heads", cfg.n_heads},
                {"d_model", cfg.d_model},         {"d_mlp", cfg.d_mlp},
                {"vocab_size", cfg.vocab_size},   {"max_seq_len", cfg.max_seq_len},
                {"tie_embeddings", cfg.tie_embeddings}};
}

ModelConfig config_from(const json& j) {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.d_mlp = j.at("d_mlp").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.tie_embeddings = j.at("tie_embeddings").get<bool>();
    cfg.validate();
    return cfg;
}

uint32_t payload_crc(const std::string& payload) {
    return static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), payload.size()));
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(2); }

ModelConfig config_from_json(const std::string& text) { return config_from(json::parse(text)); }

void save_checkpoint(const std::filesystem::path& path, const Transformer& model) {
    json manifest = json::array();
    std::string payload;
    for (const auto& name : model.param_names()) {
        const Tensor& t = model.param(name);
        manifest.push_back(json{{"name", name}, {"shape", t.shape}});
        const size_t bytes = t.values().size() * sizeof(float);
        const size_t offset = payload.size();
        payload.resize(offset + bytes);
        std::memcpy(payload.data() + offset, t.values().data(), bytes);
    }
    const json header = {{"config", config_json(model.config())}, {"tensors", manifest}};

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << kMagic << "\n" << header.dump() << "\n";
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    const uint32_t crc = payload_crc(payload);
    char trailer[4] = {static_cast<char>(crc & 0xff), static_cast<char>((crc >> 8) & 0xff),
                       static_cast<char>((crc >> 16) & 0xff), static_cast<char>((crc >> 24) & 0xff)};
    out.write(trailer, 4);
    if (!out) throw std::runtime_error("write failure on " + path.string());
}

Transformer load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());

    std::string magic;
    std::getline(in, magic);
    if (magic != kMagic)
        throw CheckpointError(CheckpointError::Kind::BadMagic,
                              "checkpoint version mismatch: expected '" + std::string(kMagic) +
                                  "', got '" + magic + "'");
    std::string header_line;
    std::getline(in, header_line);
    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::BadHeader,
                              std::string("unparseable checkpoint header: ") + e.what());
    }

    Transformer model(config_from(header.at("config")));

    const auto& manifest = header.at("tensors");
    if (manifest.size() != model.param_names().size())
        throw CheckpointError(CheckpointError::Kind::BadHeader,
                              "manifest lists " + std::to_string(manifest.size()) +
                                  " tensors, model has " +
                                  std::to_string(model.param_names().size()));
    size_t expected_floats = 0;
    for (size_t i = 0; i < manifest.size(); ++i) {
        const std::string name = manifest[i].at("name").get<std::string>();
        const auto shape = manifest[i].at("shape").get<std::vector<int64_t>>();
        if (name != model.param_names()[i] || shape != model.param(name).shape)
            throw CheckpointError(CheckpointError::Kind::BadHeader,
                                  "manifest entry " + std::to_string(i) + " ('" + name +
                                      "') does not match model layout");
        expected_floats += model.param(name).values().size();
    }

    std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rest.empty() && expected_floats > 0)
        throw CheckpointError(CheckpointError::Kind::MissingPayload,
                              "checkpoint has a header but no tensor payload");
    const size_t expected_bytes = expected_floats * sizeof(float) + 4;
    if (rest.size() != expected_bytes)
        throw CheckpointError(CheckpointError::Kind::SizeMismatch,
                              "payload size mismatch: expected " + std::to_string(expected_bytes) +
                                  " bytes, found " + std::to_string(rest.size()));

    const std::string payload = rest.substr(0, rest.size() - 4);
    const unsigned char* tr = reinterpret_cast<const unsigned char*>(rest.data() + payload.size());
    const uint32_t stored = static_cast<uint32_t>(tr[0]) | (static_cast<uint32_t>(tr[1]) << 8) |
                            (static_cast<uint32_t>(tr[2]) << 16) |
                            (static_cast<uint32_t>(tr[3]) << 24);
    if (stored != payload_crc(payload))
        throw CheckpointError(CheckpointError::Kind::ChecksumMismatch,
                              "payload checksum failure in " + path.string());

    size_t offset = 0;
    for (const auto& name : model.param_names()) {
        Tensor& t = model.param(name);
        const size_t bytes = t.values().size() * sizeof(float);
        std::memcpy(t.values().data(), payload.data() + offset, bytes);
        offset += bytes;
    }
    return model;
}

}  // namespace biascope
