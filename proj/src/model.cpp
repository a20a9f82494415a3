#include "biascope/model.hpp"

#include "biascope/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace biascope {

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1 || vocab_size < 1 ||
        max_seq_len < 1)
        throw std::invalid_argument("model config: all counts must be >= 1");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
}

std::string component_str(const ComponentId& id) {
    switch (id.kind) {
        case ComponentKind::Embed: return "embed";
        case ComponentKind::Mlp: return "mlp." + std::to_string(id.layer);
        case ComponentKind::AttnHead:
            return "attn." + std::to_string(id.layer) + "." + std::to_string(id.head);
    }
    return "?";
}

ComponentId parse_component(const std::string& text) {
    if (text == "embed") return ComponentId::embed();
    if (text.rfind("mlp.", 0) == 0) return ComponentId::mlp(std::stoi(text.substr(4)));
    if (text.rfind("attn.", 0) == 0) {
        const size_t dot = text.find('.', 5);
        if (dot != std::string::npos)
            return ComponentId::attn_head(std::stoi(text.substr(5, dot - 5)),
                                          std::stoi(text.substr(dot + 1)));
    }
    throw std::invalid_argument("unparseable component '" + text + "'");
}

PositionScope parse_scope(const std::string& text) {
    if (text == "final") return PositionScope::FinalOnly;
    if (text == "all") return PositionScope::AllPositions;
    throw std::invalid_argument("unknown position scope '" + text + "'");
}

int ComponentIndex::index_of(const ComponentId& id) const {
    switch (id.kind) {
        case ComponentKind::Embed:
            return 0;
        case ComponentKind::AttnHead:
            if (id.layer < 0 || id.layer >= layers_ || id.head < 0 || id.head >= heads_)
                throw std::out_of_range("component out of range: " + component_str(id));
            return 1 + id.layer * (heads_ + 1) + id.head;
        case ComponentKind::Mlp:
            if (id.layer < 0 || id.layer >= layers_)
                throw std::out_of_range("component out of range: " + component_str(id));
            return 1 + id.layer * (heads_ + 1) + heads_;
    }
    throw std::out_of_range("component out of range");
}

ComponentId ComponentIndex::at(int index) const {
    if (index < 0 || index >= count()) throw std::out_of_range("component index " + std::to_string(index));
    if (index == 0) return ComponentId::embed();
    const int rel = index - 1;
    const int layer = rel / (heads_ + 1);
    const int slot = rel % (heads_ + 1);
    return slot == heads_ ? ComponentId::mlp(layer) : ComponentId::attn_head(layer, slot);
}

std::vector<ComponentId> ComponentIndex::all() const {
    std::vector<ComponentId> out;
    out.reserve(count());
    for (int i = 0; i < count(); ++i) out.push_back(at(i));
    return out;
}

std::vector<ComponentId> ComponentIndex::attention_heads() const {
    std::vector<ComponentId> out;
    out.reserve(static_cast<size_t>(layers_) * heads_);
    for (int l = 0; l < layers_; ++l)
        for (int h = 0; h < heads_; ++h) out.push_back(ComponentId::attn_head(l, h));
    return out;
}

bool ParamSelection::empty() const { return count() == 0; }

size_t ParamSelection::count() const {
    size_t n = 0;
    for (const auto& [name, mask] : masks)
        for (const uint8_t m : mask) n += m != 0;
    return n;
}

void ParamSelection::merge(const ParamSelection& other) {
    for (const auto& [name, mask] : other.masks) {
        auto it = masks.find(name);
        if (it == masks.end()) {
            masks[name] = mask;
        } else {
            if (it->second.size() != mask.size())
                throw std::invalid_argument("selection merge: size mismatch for " + name);
            for (size_t i = 0; i < mask.size(); ++i) it->second[i] |= mask[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

Transformer::Transformer(ModelConfig cfg) : cfg_(cfg), index_(cfg) {
    cfg_.validate();
    register_params();
}

void Transformer::register_params() {
    auto reg = [&](const std::string& name, std::vector<int64_t> shape, float fill = 0.0f) {
        names_.push_back(name);
        params_.emplace(name, Tensor::full(std::move(shape), fill));
    };
    const int64_t d = cfg_.d_model, m = cfg_.d_mlp, v = cfg_.vocab_size, p = cfg_.max_seq_len;
    reg("wte", {v, d});
    reg("wpe", {p, d});
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string pre = "h" + std::to_string(l) + ".";
        reg(pre + "ln1.g", {d}, 1.0f);
        reg(pre + "ln1.b", {d});
        reg(pre + "attn.wq", {d, d});
        reg(pre + "attn.bq", {d});
        reg(pre + "attn.wk", {d, d});
        reg(pre + "attn.bk", {d});
        reg(pre + "attn.wv", {d, d});
        reg(pre + "attn.bv", {d});
        reg(pre + "attn.wo", {d, d});
        reg(pre + "ln2.g", {d}, 1.0f);
        reg(pre + "ln2.b", {d});
        reg(pre + "mlp.w1", {d, m});
        reg(pre + "mlp.b1", {m});
        reg(pre + "mlp.w2", {m, d});
        reg(pre + "mlp.b2", {d});
    }
    reg("lnf.g", {d}, 1.0f);
    reg("lnf.b", {d});
    if (!cfg_.tie_embeddings) reg("wu", {d, v});
}

Transformer Transformer::random_init(ModelConfig cfg, uint64_t seed, float scale) {
    Transformer model(cfg);
    Rng rng = Rng(seed).stream("init");
    for (const auto& name : model.names_) {
        Tensor& t = model.param(name);
        const bool is_weight = t.ndim() == 2;
        if (!is_weight) continue;  // biases stay 0, LN gains stay 1
        for (auto& x : t.values()) x = static_cast<float>(rng.normal(0.0, scale));
    }
    return model;
}

Tensor& Transformer::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

const Tensor& Transformer::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

bool Transformer::has_param(const std::string& name) const { return params_.count(name) != 0; }

void Transformer::set_requires_grad(bool on) {
    for (auto& [name, t] : params_) t.set_requires_grad(on);
}

void Transformer::zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
}

std::vector<std::vector<float>> Transformer::snapshot_params() const {
    std::vector<std::vector<float>> out;
    out.reserve(names_.size());
    for (const auto& name : names_) out.push_back(param(name).values());
    return out;
}

void Transformer::restore_params(const std::vector<std::vector<float>>& snapshot) {
    if (snapshot.size() != names_.size())
        throw std::invalid_argument("restore_params: snapshot layout mismatch");
    for (size_t i = 0; i < names_.size(); ++i) {
        Tensor& t = param(names_[i]);
        if (snapshot[i].size() != t.values().size())
            throw std::invalid_argument("restore_params: size mismatch for " + names_[i]);
        t.values() = snapshot[i];
    }
}

Tensor Transformer::attention_mask(int seq_len, const std::vector<uint8_t>* key_mask) const {
    if (key_mask && static_cast<int>(key_mask->size()) != seq_len)
        throw std::invalid_argument("attention key mask length != sequence length");
    Tensor mask = Tensor::zeros({seq_len, seq_len});
    for (int q = 0; q < seq_len; ++q)
        for (int k = 0; k < seq_len; ++k) {
            const bool visible = k <= q && (!key_mask || (*key_mask)[k]);
            if (!visible) mask.ptr()[q * seq_len + k] = -1e9f;
        }
    return mask;
}

Tensor Transformer::attention_head_write(Tape& tape, int layer, int head, const Tensor& normed,
                                         const Tensor& mask) const {
    const std::string pre = "h" + std::to_string(layer) + ".attn.";
    const int dh = cfg_.d_head();
    const Tensor q = ops::add_rowvec(tape, ops::matmul(tape, normed, param(pre + "wq")), param(pre + "bq"));
    const Tensor k = ops::add_rowvec(tape, ops::matmul(tape, normed, param(pre + "wk")), param(pre + "bk"));
    const Tensor v = ops::add_rowvec(tape, ops::matmul(tape, normed, param(pre + "wv")), param(pre + "bv"));
    const Tensor qh = ops::slice_cols(tape, q, head * dh, (head + 1) * dh);
    const Tensor kh = ops::slice_cols(tape, k, head * dh, (head + 1) * dh);
    const Tensor vh = ops::slice_cols(tape, v, head * dh, (head + 1) * dh);
    Tensor scores = ops::mul_scalar(tape, ops::matmul_nt(tape, qh, kh),
                                    1.0f / std::sqrt(static_cast<float>(dh)));
    scores = ops::add(tape, scores, mask);
    const Tensor probs = ops::softmax_rows(tape, scores);
    const Tensor oh = ops::matmul(tape, probs, vh);
    const Tensor wo_rows = ops::slice_rows(tape, param(pre + "wo"), head * dh, (head + 1) * dh);
    return ops::matmul(tape, oh, wo_rows);
}

Tensor Transformer::mlp_write(Tape& tape, int layer, const Tensor& residual) const {
    const std::string pre = "h" + std::to_string(layer) + ".";
    const Tensor normed =
        ops::layer_norm(tape, residual, param(pre + "ln2.g"), param(pre + "ln2.b"));
    Tensor h = ops::add_rowvec(tape, ops::matmul(tape, normed, param(pre + "mlp.w1")),
                               param(pre + "mlp.b1"));
    h = ops::gelu(tape, h);
    return ops::add_rowvec(tape, ops::matmul(tape, h, param(pre + "mlp.w2")),
                           param(pre + "mlp.b2"));
}

namespace {

// Applies interventions, the user hook, and cache capture to one component
// write, in that order.
Tensor apply_component(Tape& tape, const ComponentIndex& index, const ComponentId& id,
                       Tensor write, const ForwardOptions& options, ActivationCache* cache) {
    const int seq_len = static_cast<int>(write.shape[0]);
    const int d_model = static_cast<int>(write.shape[1]);
    if (options.interventions) {
        for (const Replacement& r : options.interventions->replacements) {
            if (!(r.component == id)) continue;
            if (!r.source)
                throw std::invalid_argument("intervention on " + component_str(id) + " has no source cache");
            const int ci = index.index_of(id);
            if (r.source->seq_len != seq_len || r.source->d_model != d_model ||
                r.source->components != index.count())
                throw std::invalid_argument("intervention source cache missing entry for " +
                                            component_str(id) + " (geometry mismatch)");
            if (r.scope == PositionScope::AllPositions) {
                Tensor replaced = Tensor::zeros(write.shape);
                for (int p = 0; p < seq_len; ++p)
                    std::copy_n(r.source->at(ci, p), d_model, replaced.ptr() + p * d_model);
                write = replaced;
            } else {
                Tensor row = Tensor::zeros({d_model});
                std::copy_n(r.source->at(ci, seq_len - 1), d_model, row.ptr());
                write = ops::set_row(tape, write, seq_len - 1, row);
            }
        }
    }
    if (options.hook) write = options.hook(tape, id, write);
    if (cache) {
        const int ci = index.index_of(id);
        for (int p = 0; p < seq_len; ++p)
            std::copy_n(write.ptr() + p * d_model, d_model, cache->at(ci, p));
    }
    return write;
}

void check_no_duplicate_targets(const InterventionSpec& spec) {
    for (size_t i = 0; i < spec.replacements.size(); ++i)
        for (size_t j = i + 1; j < spec.replacements.size(); ++j)
            if (spec.replacements[i].component == spec.replacements[j].component)
                throw std::invalid_argument("duplicate intervention target " +
                                            component_str(spec.replacements[i].component));
}

}  // namespace

ForwardResult Transformer::forward(Tape& tape, std::span<const int> tokens,
                                   const ForwardOptions& options) const {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg_.max_seq_len)
        throw std::invalid_argument("forward: sequence of " + std::to_string(tokens.size()) +
                                    " tokens exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    for (const int t : tokens)
        if (t < 0 || t >= cfg_.vocab_size)
            throw std::out_of_range("forward: token id " + std::to_string(t) +
                                    " outside vocabulary of " + std::to_string(cfg_.vocab_size));
    if (options.interventions) check_no_duplicate_targets(*options.interventions);

    const int seq_len = static_cast<int>(tokens.size());
    ForwardResult result;
    ActivationCache* cache = nullptr;
    if (options.capture) {
        result.cache.seq_len = seq_len;
        result.cache.d_model = cfg_.d_model;
        result.cache.components = index_.count();
        result.cache.data.assign(
            static_cast<size_t>(index_.count()) * seq_len * cfg_.d_model, 0.0f);
        cache = &result.cache;
    }

    std::vector<int> positions(seq_len);
    for (int i = 0; i < seq_len; ++i) positions[i] = i;

    Tensor x = ops::add(tape, ops::embedding(tape, param("wte"), tokens),
                        ops::embedding(tape, param("wpe"), positions));
    x = apply_component(tape, index_, ComponentId::embed(), x, options, cache);

    const Tensor mask = attention_mask(seq_len, options.key_mask);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string pre = "h" + std::to_string(l) + ".";
        const Tensor normed =
            ops::layer_norm(tape, x, param(pre + "ln1.g"), param(pre + "ln1.b"));
        for (int h = 0; h < cfg_.n_heads; ++h) {
            Tensor write = attention_head_write(tape, l, h, normed, mask);
            write = apply_component(tape, index_, ComponentId::attn_head(l, h), write, options, cache);
            x = ops::add(tape, x, write);
        }
        Tensor write = mlp_write(tape, l, x);
        write = apply_component(tape, index_, ComponentId::mlp(l), write, options, cache);
        x = ops::add(tape, x, write);
    }

    const Tensor final_norm = ops::layer_norm(tape, x, param("lnf.g"), param("lnf.b"));
    result.logits = cfg_.tie_embeddings ? ops::matmul_nt(tape, final_norm, param("wte"))
                                        : ops::matmul(tape, final_norm, param("wu"));
    return result;
}

Tensor Transformer::component_write(const ComponentId& id, const Tensor& residual_in,
                                    std::span<const int> tokens,
                                    const std::vector<uint8_t>* key_mask) const {
    Tape tape;
    switch (id.kind) {
        case ComponentKind::Embed: {
            std::vector<int> positions(tokens.size());
            for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
            return ops::add(tape, ops::embedding(tape, param("wte"), tokens),
                            ops::embedding(tape, param("wpe"), positions));
        }
        case ComponentKind::AttnHead: {
            index_.index_of(id);  // range check
            const std::string pre = "h" + std::to_string(id.layer) + ".";
            const Tensor normed =
                ops::layer_norm(tape, residual_in, param(pre + "ln1.g"), param(pre + "ln1.b"));
            const Tensor mask = attention_mask(static_cast<int>(residual_in.shape[0]), key_mask);
            return attention_head_write(tape, id.layer, id.head, normed, mask);
        }
        case ComponentKind::Mlp:
            index_.index_of(id);
            return mlp_write(tape, id.layer, residual_in);
    }
    throw std::invalid_argument("component_write: bad component");
}

Tensor Transformer::logits_from_residual(const Tensor& residual) const {
    Tape tape;
    const Tensor final_norm = ops::layer_norm(tape, residual, param("lnf.g"), param("lnf.b"));
    return cfg_.tie_embeddings ? ops::matmul_nt(tape, final_norm, param("wte"))
                               : ops::matmul(tape, final_norm, param("wu"));
}

// ---------------------------------------------------------------------------
// parameter selection
// ---------------------------------------------------------------------------

namespace {

void mark_all(ParamSelection& sel, const Transformer& model, const std::string& name) {
    const Tensor& t = model.param(name);
    auto& mask = sel.masks[name];
    mask.assign(t.values().size(), 0);
    std::fill(mask.begin(), mask.end(), 1);
}

std::vector<uint8_t>& mask_for(ParamSelection& sel, const Transformer& model,
                               const std::string& name) {
    auto& mask = sel.masks[name];
    if (mask.empty()) mask.assign(model.param(name).values().size(), 0);
    return mask;
}

}  // namespace

ParamSelection head_parameter_selection(const Transformer& model,
                                        const std::vector<ComponentId>& components) {
    const ModelConfig& cfg = model.config();
    const int d = cfg.d_model, dh = cfg.d_head();
    ParamSelection sel;
    for (const ComponentId& id : components) {
        model.components().index_of(id);  // throws when out of range
        switch (id.kind) {
            case ComponentKind::Embed:
                mark_all(sel, model, "wte");
                mark_all(sel, model, "wpe");
                break;
            case ComponentKind::Mlp: {
                const std::string pre = "h" + std::to_string(id.layer) + ".mlp.";
                mark_all(sel, model, pre + "w1");
                mark_all(sel, model, pre + "b1");
                mark_all(sel, model, pre + "w2");
                mark_all(sel, model, pre + "b2");
                break;
            }
            case ComponentKind::AttnHead: {
                const std::string pre = "h" + std::to_string(id.layer) + ".attn.";
                const int c0 = id.head * dh, c1 = (id.head + 1) * dh;
                for (const char* w : {"wq", "wk", "wv"}) {
                    auto& mask = mask_for(sel, model, pre + w);
                    for (int r = 0; r < d; ++r)
                        for (int c = c0; c < c1; ++c) mask[static_cast<size_t>(r) * d + c] = 1;
                }
                auto& womask = mask_for(sel, model, pre + "wo");
                for (int r = c0; r < c1; ++r)
                    for (int c = 0; c < d; ++c) womask[static_cast<size_t>(r) * d + c] = 1;
                break;
            }
        }
    }
    return sel;
}

}  // namespace biascope
