#include "biascope/groundtruth.hpp"

#include "biascope/checkpoint.hpp"

#include <json.hpp>

#include <cmath>
#include <set>
#include <stdexcept>

namespace biascope {

using nlohmann::json;

namespace {

// Zero-mean feature directions: u_k has +s at channel 2k and -s at 2k+1,
// so LayerNorm's mean subtraction leaves them invariant up to scale.
constexpr int kGenderMark = 0;  // carried by both gender tokens
constexpr int kGenderSign = 1;  // +1 for gender_a, -1 for gender_b
constexpr int kQueryMark = 2;
constexpr int kAnswerDir = 3;
constexpr int kIdentityBase = 4;

void add_feature(float* row, int channel_pair, float coeff) {
    const float s = coeff * 0.7071067811865476f;
    row[2 * channel_pair] += s;
    row[2 * channel_pair + 1] -= s;
}

int identity_channel(int token, int d_model) {
    const int pool = d_model / 2 - kIdentityBase;
    return kIdentityBase + token % pool;
}

}  // namespace

void PlantSpec::validate() const {
    config.validate();
    if (config.d_model % 2 != 0 || config.d_head() < 4 || config.d_model / 2 < kIdentityBase + 1)
        throw std::invalid_argument(
            "plant: config too small for the construction (need even d_model, d_head >= 4)");
    if (planted_heads.empty()) throw std::invalid_argument("plant: no planted heads");
    std::set<std::pair<int, int>> seen;
    for (const auto& id : planted_heads) {
        if (id.kind != ComponentKind::AttnHead)
            throw std::invalid_argument("plant: planted component must be an attention head");
        if (id.layer < 0 || id.layer >= config.n_layers || id.head < 0 || id.head >= config.n_heads)
            throw std::invalid_argument("plant: planted head out of range " + component_str(id));
        if (!seen.insert({id.layer, id.head}).second)
            throw std::invalid_argument("plant: duplicate planted head " + component_str(id));
    }
    const std::set<int> gender{gender_a, gender_b};
    const std::set<int> answer{answer_a, answer_b};
    if (gender.size() != 2 || answer.size() != 2)
        throw std::invalid_argument("plant: gender/answer token pairs must be distinct");
    for (const int g : gender)
        if (answer.count(g)) throw std::invalid_argument("plant: gender and answer tokens overlap");
    for (const int t : {gender_a, gender_b, answer_a, answer_b, query_token})
        if (t < 0 || t >= config.vocab_size)
            throw std::invalid_argument("plant: token id out of vocabulary");
    if (filler_tokens.empty()) throw std::invalid_argument("plant: no filler tokens");
    if (noise_scale < 0) throw std::invalid_argument("plant: negative noise_scale");
}

PlantedWorld make_planted_world(ModelConfig geometry, std::vector<ComponentId> planted_heads,
                                float noise_scale, int n_fillers, int n_neutral) {
    PlantedWorld world;
    Vocab& v = world.vocab;
    PlantSpec& spec = world.spec;
    spec.gender_a = v.add("ga");
    spec.gender_b = v.add("gb");
    spec.answer_a = v.add("ansa");
    spec.answer_b = v.add("ansb");
    spec.query_token = v.add("q");
    for (int i = 0; i < n_fillers; ++i) spec.filler_tokens.push_back(v.add("f" + std::to_string(i)));
    for (int i = 0; i < n_neutral; ++i) spec.neutral_tokens.push_back(v.add("n" + std::to_string(i)));
    geometry.vocab_size = v.size();
    geometry.tie_embeddings = false;
    spec.config = geometry;
    spec.planted_heads = std::move(planted_heads);
    spec.noise_scale = noise_scale;
    spec.validate();
    return world;
}

PlantedWorld default_planted_world(float noise_scale, std::vector<ComponentId> planted_heads) {
    ModelConfig cfg;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_model = 64;
    cfg.d_mlp = 256;
    cfg.max_seq_len = 32;
    return make_planted_world(cfg, std::move(planted_heads), noise_scale, 8, 8);
}

namespace {

// Builds the deterministic part of the planted model for one output gain.
Transformer build_planted(const PlantSpec& spec, float write_gain) {
    const ModelConfig& cfg = spec.config;
    Transformer model(cfg);
    const int d = cfg.d_model, dh = cfg.d_head();

    Tensor& wte = model.param("wte");
    for (int t = 0; t < cfg.vocab_size; ++t)
        add_feature(wte.ptr() + static_cast<size_t>(t) * d, identity_channel(t, d), 1.0f);
    add_feature(wte.ptr() + static_cast<size_t>(spec.gender_a) * d, kGenderMark, 1.0f);
    add_feature(wte.ptr() + static_cast<size_t>(spec.gender_a) * d, kGenderSign, 1.0f);
    add_feature(wte.ptr() + static_cast<size_t>(spec.gender_b) * d, kGenderMark, 1.0f);
    add_feature(wte.ptr() + static_cast<size_t>(spec.gender_b) * d, kGenderSign, -1.0f);
    add_feature(wte.ptr() + static_cast<size_t>(spec.query_token) * d, kQueryMark, 1.0f);

    Tensor& wu = model.param("wu");  // [d, vocab]
    {
        std::vector<float> dir(d, 0.0f);
        add_feature(dir.data(), kAnswerDir, 1.0f);
        for (int r = 0; r < d; ++r) {
            wu.ptr()[static_cast<size_t>(r) * cfg.vocab_size + spec.answer_a] = dir[r];
            wu.ptr()[static_cast<size_t>(r) * cfg.vocab_size + spec.answer_b] = -dir[r];
        }
    }

    constexpr float kAttnGain = 2.0f;  // one-hot attention margin on the gender key
    for (const ComponentId& id : spec.planted_heads) {
        const std::string pre = "h" + std::to_string(id.layer) + ".attn.";
        const int c0 = id.head * dh;
        Tensor& wq = model.param(pre + "wq");
        Tensor& wk = model.param(pre + "wk");
        Tensor& wv = model.param(pre + "wv");
        Tensor& wo = model.param(pre + "wo");
        std::vector<float> qdir(d, 0.0f), kdir(d, 0.0f), vdir(d, 0.0f), odir(d, 0.0f);
        add_feature(qdir.data(), kQueryMark, kAttnGain);
        add_feature(kdir.data(), kGenderMark, kAttnGain);
        add_feature(vdir.data(), kGenderSign, 1.0f);
        add_feature(odir.data(), kAnswerDir, write_gain);
        for (int r = 0; r < d; ++r) {
            wq.ptr()[static_cast<size_t>(r) * d + c0] = qdir[r];      // query channel 0
            wk.ptr()[static_cast<size_t>(r) * d + c0] = kdir[r];      // key channel 0
            wv.ptr()[static_cast<size_t>(r) * d + c0 + 1] = vdir[r];  // value channel 1
        }
        for (int c = 0; c < d; ++c)
            wo.ptr()[static_cast<size_t>(c0 + 1) * d + c] = odir[c];
    }
    return model;
}

std::vector<int> probe_tokens(const PlantSpec& spec) {
    return {spec.filler_tokens[0], spec.gender_a,
            spec.filler_tokens[1 % spec.filler_tokens.size()], spec.query_token};
}

double probe_margin(const Transformer& model, const PlantSpec& spec) {
    const std::vector<int> tokens = probe_tokens(spec);
    const Tensor logits = model.forward(tokens).logits;
    const int v = model.config().vocab_size;
    const float* last = logits.ptr() + (tokens.size() - 1) * v;
    return static_cast<double>(last[spec.answer_a]) - last[spec.answer_b];
}

double vec_norm(const float* x, int n) {
    double acc = 0;
    for (int i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * x[i];
    return std::sqrt(acc);
}

}  // namespace

Transformer construct_planted_model(const PlantSpec& spec, uint64_t seed) {
    spec.validate();

    // The answer-logit margin responds nonlinearly to the head output gain
    // (LayerNorm rescales the residual stream), so calibrate by bisection on
    // a gendered probe input.
    double lo = 1e-4, hi = 64.0;
    if (probe_margin(build_planted(spec, static_cast<float>(hi)), spec) < spec.target_margin)
        throw std::invalid_argument("plant: target_margin unreachable for this geometry");
    for (int iter = 0; iter < 60; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double m = probe_margin(build_planted(spec, static_cast<float>(mid)), spec);
        (m < spec.target_margin ? lo : hi) = mid;
    }
    const float gain = static_cast<float>(0.5 * (lo + hi));
    Transformer model = build_planted(spec, gain);

    if (spec.noise_scale > 0.0f) {
        // Planted write norm at the final position bounds how loud the noise
        // heads may be.
        const std::vector<int> tokens = probe_tokens(spec);
        ForwardOptions opts;
        opts.capture = true;
        const ForwardResult probe = model.forward(tokens, opts);
        const int final_pos = static_cast<int>(tokens.size()) - 1;
        const int pi = model.components().index_of(spec.planted_heads.front());
        const double planted_norm =
            vec_norm(probe.cache.at(pi, final_pos), spec.config.d_model);

        Rng rng = Rng(seed).stream("plant-noise");
        const int d = spec.config.d_model, dh = spec.config.d_head();
        std::set<std::pair<int, int>> planted;
        for (const auto& id : spec.planted_heads) planted.insert({id.layer, id.head});
        for (int l = 0; l < spec.config.n_layers; ++l) {
            const std::string pre = "h" + std::to_string(l) + ".attn.";
            for (int h = 0; h < spec.config.n_heads; ++h) {
                if (planted.count({l, h})) continue;
                const int c0 = h * dh;
                for (const char* w : {"wq", "wk", "wv"}) {
                    Tensor& t = model.param(pre + w);
                    for (int r = 0; r < d; ++r)
                        for (int c = c0; c < c0 + dh; ++c)
                            t.ptr()[static_cast<size_t>(r) * d + c] =
                                static_cast<float>(rng.normal(0.0, 0.1 * spec.noise_scale));
                }
                Tensor& wo = model.param(pre + "wo");
                for (int r = c0; r < c0 + dh; ++r)
                    for (int c = 0; c < d; ++c)
                        wo.ptr()[static_cast<size_t>(r) * d + c] =
                            static_cast<float>(rng.normal(0.0, 1.0));
                // Worst-case residual write: |LN row| = sqrt(d), attention is
                // a convex combination, then the output rows.
                Tensor& wv = model.param(pre + "wv");
                double vnorm = 0, onorm = 0;
                for (int r = 0; r < d; ++r)
                    for (int c = c0; c < c0 + dh; ++c) {
                        const double x = wv.ptr()[static_cast<size_t>(r) * d + c];
                        vnorm += x * x;
                    }
                for (int r = c0; r < c0 + dh; ++r)
                    for (int c = 0; c < d; ++c) {
                        const double x = wo.ptr()[static_cast<size_t>(r) * d + c];
                        onorm += x * x;
                    }
                const double bound = std::sqrt(static_cast<double>(d)) * std::sqrt(vnorm) *
                                     std::sqrt(onorm);
                const double cap = 0.01 * planted_norm;
                if (bound > cap && bound > 0) {
                    const float s = static_cast<float>(cap / bound);
                    for (int r = c0; r < c0 + dh; ++r)
                        for (int c = 0; c < d; ++c)
                            wo.ptr()[static_cast<size_t>(r) * d + c] *= s;
                }
            }
        }
    }
    return model;
}

namespace {

std::string detokenize(const Vocab* vocab, const std::vector<int>& ids) {
    if (!vocab) return {};
    std::string out;
    for (const int id : ids) {
        if (!out.empty()) out += ' ';
        out += vocab->token(id);
    }
    return out;
}

std::vector<int> random_prefix(const PlantSpec& spec, Rng& rng, int gender_token) {
    const int len = 5 + static_cast<int>(rng.below(3));  // prefix incl. query
    const int gender_pos = static_cast<int>(rng.below(len - 1));
    std::vector<int> tokens(len);
    for (int i = 0; i < len - 1; ++i)
        tokens[i] = spec.filler_tokens[rng.below(spec.filler_tokens.size())];
    tokens[gender_pos] = gender_token;
    tokens[len - 1] = spec.query_token;
    return tokens;
}

}  // namespace

std::vector<MinimalPair> synthetic_pairs(const PlantSpec& spec, int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("synthetic_pairs: n must be >= 1");
    spec.validate();
    Rng rng = Rng(seed).stream("synthetic-pairs");
    std::vector<MinimalPair> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const bool a_first = rng.below(2) == 0;
        const int g = a_first ? spec.gender_a : spec.gender_b;
        const int g_cf = a_first ? spec.gender_b : spec.gender_a;
        MinimalPair pair;
        pair.x = random_prefix(spec, rng, g);
        pair.x_cf = pair.x;
        for (size_t p = 0; p < pair.x.size(); ++p)
            if (pair.x[p] == g) pair.x_cf[p] = g_cf;
        pair.y_stereo = a_first ? spec.answer_a : spec.answer_b;
        pair.y_anti = a_first ? spec.answer_b : spec.answer_a;
        out.push_back(std::move(pair));
    }
    return out;
}

std::vector<LabeledSequence> synthetic_balanced_corpus(const PlantSpec& spec, int n,
                                                       uint64_t seed) {
    spec.validate();
    Rng rng = Rng(seed).stream("balanced-corpus");
    std::vector<LabeledSequence> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const int combo = i % 4;  // (gender, answer) in all four combinations
        const int g = combo / 2 == 0 ? spec.gender_a : spec.gender_b;
        const int ans = combo % 2 == 0 ? spec.answer_a : spec.answer_b;
        LabeledSequence seq;
        seq.tokens = random_prefix(spec, rng, g);
        seq.tokens.push_back(ans);
        seq.label = ans == spec.answer_a ? Stereotype::Male : Stereotype::Female;
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<std::vector<int>> synthetic_neutral_corpus(const PlantSpec& spec, int n,
                                                       uint64_t seed) {
    spec.validate();
    if (spec.neutral_tokens.empty())
        throw std::invalid_argument("synthetic_neutral_corpus: spec has no neutral tokens");
    Rng rng = Rng(seed).stream("neutral-corpus");
    std::vector<std::vector<int>> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const int len = 6 + static_cast<int>(rng.below(5));
        std::vector<int> seq(len);
        for (int p = 0; p < len; ++p)
            seq[p] = spec.neutral_tokens[rng.below(spec.neutral_tokens.size())];
        out.push_back(std::move(seq));
    }
    return out;
}

// Fills in surface strings for synthetic records so they can be saved.
void attach_surfaces(std::vector<MinimalPair>& pairs, const Vocab& vocab) {
    for (auto& p : pairs) {
        p.text = detokenize(&vocab, p.x);
        p.counterfactual = detokenize(&vocab, p.x_cf);
    }
}

std::string plant_spec_to_json(const PlantSpec& spec) {
    json heads = json::array();
    for (const auto& id : spec.planted_heads) heads.push_back(component_str(id));
    const json j = {{"config", json::parse(config_to_json(spec.config))},
                    {"planted_heads", heads},
                    {"gender_tokens", {spec.gender_a, spec.gender_b}},
                    {"answer_tokens", {spec.answer_a, spec.answer_b}},
                    {"query_token", spec.query_token},
                    {"filler_tokens", spec.filler_tokens},
                    {"neutral_tokens", spec.neutral_tokens},
                    {"noise_scale", spec.noise_scale},
                    {"target_margin", spec.target_margin}};
    return j.dump(2);
}

PlantSpec plant_spec_from_json(const std::string& text) {
    const json j = json::parse(text);
    PlantSpec spec;
    spec.config = config_from_json(j.at("config").dump());
    for (const auto& h : j.at("planted_heads"))
        spec.planted_heads.push_back(parse_component(h.get<std::string>()));
    spec.gender_a = j.at("gender_tokens").at(0).get<int>();
    spec.gender_b = j.at("gender_tokens").at(1).get<int>();
    spec.answer_a = j.at("answer_tokens").at(0).get<int>();
    spec.answer_b = j.at("answer_tokens").at(1).get<int>();
    spec.query_token = j.at("query_token").get<int>();
    spec.filler_tokens = j.at("filler_tokens").get<std::vector<int>>();
    spec.neutral_tokens = j.at("neutral_tokens").get<std::vector<int>>();
    spec.noise_scale = j.at("noise_scale").get<float>();
    spec.target_margin = j.value("target_margin", 3.5f);
    spec.validate();
    return spec;
}

}  // namespace biascope
