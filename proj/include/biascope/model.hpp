#pragma once

// GPT-2 style pre-LayerNorm decoder with per-component hook points.
// Components are the units interventions can address: the embedding write,
// each attention head's post-output-projection residual write, and each MLP
// block's residual write. Head writes are cached after the per-head slice of
// the output projection, so replacing a cached vector is exactly replacing
// that head's contribution to the residual stream.

#include "biascope/rng.hpp"
#include "biascope/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace biascope {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    int d_mlp = 256;
    int vocab_size = 256;
    int max_seq_len = 64;
    bool tie_embeddings = true;

    int d_head() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class ComponentKind : int { Embed = 0, AttnHead = 1, Mlp = 2 };

struct ComponentId {
    int layer = 0;
    ComponentKind kind = ComponentKind::Embed;
    int head = -1;  // meaningful iff kind == AttnHead

    static ComponentId embed() { return {0, ComponentKind::Embed, -1}; }
    static ComponentId attn_head(int layer, int head) { return {layer, ComponentKind::AttnHead, head}; }
    static ComponentId mlp(int layer) { return {layer, ComponentKind::Mlp, -1}; }

    // (layer, kind, head) lexicographic == residual-stream computation order.
    auto operator<=>(const ComponentId&) const = default;
};

std::string component_str(const ComponentId& id);
ComponentId parse_component(const std::string& text);

// Maps components of one geometry onto a dense index range in computation
// order: embed, then per layer heads 0..H-1 followed by the MLP.
class ComponentIndex {
  public:
    ComponentIndex(int n_layers, int n_heads) : layers_(n_layers), heads_(n_heads) {}
    explicit ComponentIndex(const ModelConfig& cfg) : ComponentIndex(cfg.n_layers, cfg.n_heads) {}

    int count() const { return 1 + layers_ * (heads_ + 1); }
    int index_of(const ComponentId& id) const;
    ComponentId at(int index) const;
    std::vector<ComponentId> all() const;
    std::vector<ComponentId> attention_heads() const;

  private:
    int layers_;
    int heads_;
};

// Per-component, per-position residual writes from one forward pass.
struct ActivationCache {
    int seq_len = 0;
    int d_model = 0;
    int components = 0;
    std::vector<float> data;  // [component][position][d_model]

    bool empty() const { return data.empty(); }
    float* at(int comp, int pos) {
        return data.data() + (static_cast<size_t>(comp) * seq_len + pos) * d_model;
    }
    const float* at(int comp, int pos) const {
        return data.data() + (static_cast<size_t>(comp) * seq_len + pos) * d_model;
    }
};

enum class PositionScope { FinalOnly, AllPositions };

PositionScope parse_scope(const std::string& text);

struct Replacement {
    ComponentId component;
    PositionScope scope = PositionScope::FinalOnly;
    const ActivationCache* source = nullptr;
};

struct InterventionSpec {
    std::vector<Replacement> replacements;
};

// Optional transform applied to every component write (after interventions);
// returns the tensor that is actually added to the residual stream.
using ComponentHook = std::function<Tensor(Tape&, const ComponentId&, const Tensor&)>;

struct ForwardOptions {
    bool capture = false;
    const InterventionSpec* interventions = nullptr;
    ComponentHook hook;
    const std::vector<uint8_t>* key_mask = nullptr;  // 1 = position attendable (PAD masking)
};

struct ForwardResult {
    Tensor logits;          // [seq_len, vocab]
    ActivationCache cache;  // filled iff options.capture
};

// Boolean masks over named parameter tensors; the unit of selective
// fine-tuning. Selecting head h of layer l marks the d_head-wide column
// slices of that layer's Q/K/V weights and the matching rows of the output
// projection, nothing else.
struct ParamSelection {
    std::map<std::string, std::vector<uint8_t>> masks;

    bool empty() const;
    size_t count() const;
    void merge(const ParamSelection& other);
};

class Transformer {
  public:
    explicit Transformer(ModelConfig cfg);  // zero weights, unit LN gains
    static Transformer random_init(ModelConfig cfg, uint64_t seed, float scale = 0.02f);

    const ModelConfig& config() const { return cfg_; }
    const ComponentIndex& components() const { return index_; }

    const std::vector<std::string>& param_names() const { return names_; }
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    bool has_param(const std::string& name) const;

    void set_requires_grad(bool on);
    void zero_grad();

    std::vector<std::vector<float>> snapshot_params() const;
    void restore_params(const std::vector<std::vector<float>>& snapshot);

    ForwardResult forward(Tape& tape, std::span<const int> tokens,
                          const ForwardOptions& options = {}) const;
    ForwardResult forward(std::span<const int> tokens, const ForwardOptions& options = {}) const {
        Tape tape;
        return forward(tape, tokens, options);
    }

    // Residual-decomposition API (circuit discovery, additivity checks):
    // one component's write given the residual content it reads. Embed
    // ignores residual_in and reads the tokens.
    Tensor component_write(const ComponentId& id, const Tensor& residual_in,
                           std::span<const int> tokens,
                           const std::vector<uint8_t>* key_mask = nullptr) const;
    Tensor logits_from_residual(const Tensor& residual) const;

  private:
    void register_params();
    Tensor attention_head_write(Tape& tape, int layer, int head, const Tensor& normed,
                                const Tensor& mask) const;
    Tensor mlp_write(Tape& tape, int layer, const Tensor& residual) const;
    Tensor attention_mask(int seq_len, const std::vector<uint8_t>* key_mask) const;

    ModelConfig cfg_;
    ComponentIndex index_;
    std::vector<std::string> names_;
    std::map<std::string, Tensor> params_;
};

// Parameter slices owned by a component set (spec for selective updates).
ParamSelection head_parameter_selection(const Transformer& model,
                                        const std::vector<ComponentId>& components);

}  // namespace biascope
