#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "biascope/cma.hpp"
#include "biascope/evaluation.hpp"
#include "biascope/groundtruth.hpp"
#include "biascope/ops.hpp"

#include <cmath>
#include <map>

using namespace biascope;

namespace {

const PlantedWorld& world() {
    static PlantedWorld w = default_planted_world();
    return w;
}

const Transformer& planted() {
    static Transformer model = construct_planted_model(world().spec, 99);
    return model;
}

int final_argmax(const Transformer& model, const std::vector<int>& tokens) {
    const Tensor logits = model.forward(tokens).logits;
    const int v = model.config().vocab_size;
    const float* last = logits.ptr() + (tokens.size() - 1) * v;
    int best = 0;
    for (int i = 1; i < v; ++i)
        if (last[i] > last[best]) best = i;
    return best;
}

}  // namespace

TEST_CASE("planted model answers according to the gender token") {
    const PlantSpec& spec = world().spec;
    const std::vector<int> with_a = {spec.filler_tokens[0], spec.gender_a, spec.filler_tokens[1],
                                     spec.query_token};
    const std::vector<int> with_b = {spec.filler_tokens[0], spec.gender_b, spec.filler_tokens[1],
                                     spec.query_token};
    CHECK(final_argmax(planted(), with_a) == spec.answer_a);
    CHECK(final_argmax(planted(), with_b) == spec.answer_b);
}

TEST_CASE("calibration hits the requested answer margin") {
    const PlantSpec& spec = world().spec;
    const std::vector<int> probe = {spec.filler_tokens[0], spec.gender_a, spec.filler_tokens[1],
                                    spec.query_token};
    const Tensor logits = planted().forward(probe).logits;
    const int v = spec.config.vocab_size;
    const float* last = logits.ptr() + (probe.size() - 1) * v;
    CHECK(std::fabs(last[spec.answer_a] - last[spec.answer_b] - spec.target_margin) < 1e-3);
}

TEST_CASE("planted heads attend one-hot onto the gender position") {
    const PlantSpec& spec = world().spec;
    const Transformer& model = planted();
    const std::vector<int> tokens = {spec.filler_tokens[2], spec.filler_tokens[0], spec.gender_a,
                                     spec.filler_tokens[1], spec.query_token};
    const int seq = static_cast<int>(tokens.size());
    const int d = spec.config.d_model, dh = spec.config.d_head();

    // Independent attention recomputation straight from the parameters.
    for (const ComponentId& head : spec.planted_heads) {
        // the head reads the residual stream; for layer l that includes all
        // earlier writes, so take the true residual from the cache
        ForwardOptions capture;
        capture.capture = true;
        const ForwardResult fw = model.forward(tokens, capture);
        Tensor residual = Tensor::zeros({seq, d});
        const ComponentIndex& index = model.components();
        for (int ci = 0; ci < index.count(); ++ci) {
            const ComponentId id = index.at(ci);
            const bool before = id.kind == ComponentKind::Embed || id.layer < head.layer;
            if (!before) continue;
            for (int p = 0; p < seq; ++p)
                for (int j = 0; j < d; ++j) residual.ptr()[p * d + j] += fw.cache.at(ci, p)[j];
        }
        Tape tape;
        const std::string pre = "h" + std::to_string(head.layer) + ".";
        const Tensor normed =
            ops::layer_norm(tape, residual, model.param(pre + "ln1.g"), model.param(pre + "ln1.b"));
        const Tensor q = ops::add_rowvec(tape, ops::matmul(tape, normed, model.param(pre + "attn.wq")),
                                         model.param(pre + "attn.bq"));
        const Tensor k = ops::add_rowvec(tape, ops::matmul(tape, normed, model.param(pre + "attn.wk")),
                                         model.param(pre + "attn.bk"));
        const Tensor qh = ops::slice_cols(tape, q, head.head * dh, (head.head + 1) * dh);
        const Tensor kh = ops::slice_cols(tape, k, head.head * dh, (head.head + 1) * dh);
        Tensor scores = ops::mul_scalar(tape, ops::matmul_nt(tape, qh, kh),
                                        1.0f / std::sqrt(static_cast<float>(dh)));
        const Tensor probs = ops::softmax_rows(tape, scores);
        CHECK(probs.ptr()[(seq - 1) * seq + 2] >= 0.99f);  // gender token at position 2
    }
}

TEST_CASE("with zero noise the non-planted heads write nothing") {
    const PlantSpec& spec = world().spec;
    const Transformer& model = planted();
    const std::vector<int> x = {spec.filler_tokens[0], spec.gender_a, spec.filler_tokens[1],
                                spec.query_token};
    const std::vector<int> x_cf = {spec.filler_tokens[0], spec.gender_b, spec.filler_tokens[1],
                                   spec.query_token};
    ForwardOptions capture;
    capture.capture = true;
    const ForwardResult cf = model.forward(x_cf, capture);
    const Tensor clean = model.forward(x).logits;

    for (const ComponentId& id : model.components().attention_heads()) {
        bool is_planted = false;
        for (const auto& p : spec.planted_heads)
            if (p == id) is_planted = true;
        if (is_planted) continue;
        InterventionSpec spec_swap;
        spec_swap.replacements.push_back({id, PositionScope::AllPositions, &cf.cache});
        ForwardOptions opts;
        opts.interventions = &spec_swap;
        const Tensor swapped = model.forward(x, opts).logits;
        CHECK(swapped.values() == clean.values());
    }
}

TEST_CASE("planted-head NIE dominates every non-planted head by 10x") {
    const PlantSpec& spec = world().spec;
    const auto pairs = synthetic_pairs(spec, 8, 7);
    const auto contexts = prepare_contexts(planted(), pairs);
    double min_planted = 1e300, max_other = 0;
    for (const ComponentId& id : planted().components().attention_heads()) {
        const double v = joint_nie(planted(), contexts, {id}, PositionScope::FinalOnly);
        bool is_planted = false;
        for (const auto& p : spec.planted_heads)
            if (p == id) is_planted = true;
        if (is_planted)
            min_planted = std::min(min_planted, v);
        else
            max_other = std::max(max_other, std::fabs(v));
    }
    CHECK(min_planted >= 10.0 * std::max(max_other, 1e-12));
}

TEST_CASE("single planted head: swapping it flips the answer") {
    PlantedWorld w = default_planted_world(0.0f, {ComponentId::attn_head(2, 1)});
    const Transformer model = construct_planted_model(w.spec, 5);
    const std::vector<int> x = {w.spec.filler_tokens[0], w.spec.gender_a, w.spec.filler_tokens[1],
                                w.spec.query_token};
    const std::vector<int> x_cf = {w.spec.filler_tokens[0], w.spec.gender_b,
                                   w.spec.filler_tokens[1], w.spec.query_token};
    ForwardOptions capture;
    capture.capture = true;
    const ForwardResult cf = model.forward(x_cf, capture);
    CHECK(final_argmax(model, x) == w.spec.answer_a);

    InterventionSpec swap;
    swap.replacements.push_back(
        {ComponentId::attn_head(2, 1), PositionScope::FinalOnly, &cf.cache});
    ForwardOptions opts;
    opts.interventions = &swap;
    const Tensor logits = model.forward(x, opts).logits;
    const int v = model.config().vocab_size;
    const float* last = logits.ptr() + (x.size() - 1) * v;
    CHECK(last[w.spec.answer_b] > last[w.spec.answer_a]);
}

TEST_CASE("construction is deterministic given the seed") {
    PlantedWorld w = default_planted_world(0.5f);
    const Transformer a = construct_planted_model(w.spec, 42);
    const Transformer b = construct_planted_model(w.spec, 42);
    for (const auto& name : a.param_names())
        CHECK(a.param(name).values() == b.param(name).values());
    const Transformer c = construct_planted_model(w.spec, 43);
    bool any_diff = false;
    for (const auto& name : a.param_names())
        any_diff = any_diff || a.param(name).values() != c.param(name).values();
    CHECK(any_diff);
}

TEST_CASE("noise heads stay under one percent of the planted write") {
    PlantedWorld w = default_planted_world(1.0f);
    const Transformer model = construct_planted_model(w.spec, 11);
    const std::vector<int> probe = {w.spec.filler_tokens[0], w.spec.gender_a,
                                    w.spec.filler_tokens[1], w.spec.query_token};
    ForwardOptions capture;
    capture.capture = true;
    const ForwardResult fw = model.forward(probe, capture);
    const int last = static_cast<int>(probe.size()) - 1;
    const int d = w.spec.config.d_model;
    auto norm_at = [&](const ComponentId& id) {
        const float* v = fw.cache.at(model.components().index_of(id), last);
        double acc = 0;
        for (int j = 0; j < d; ++j) acc += static_cast<double>(v[j]) * v[j];
        return std::sqrt(acc);
    };
    const double planted_norm = norm_at(w.spec.planted_heads[0]);
    CHECK(planted_norm > 0.0);
    for (const ComponentId& id : model.components().attention_heads()) {
        bool is_planted = false;
        for (const auto& p : w.spec.planted_heads)
            if (p == id) is_planted = true;
        if (!is_planted) CHECK(norm_at(id) <= 0.0101 * planted_norm);
    }
}

TEST_CASE("synthetic pairs satisfy the minimal-pair invariants") {
    const PlantSpec& spec = world().spec;
    const auto pairs = synthetic_pairs(spec, 25, 3);
    CHECK(pairs.size() == 25);
    for (const auto& p : pairs) {
        REQUIRE(p.x.size() == p.x_cf.size());
        int diff = 0;
        for (size_t i = 0; i < p.x.size(); ++i) diff += p.x[i] != p.x_cf[i];
        CHECK(diff == 1);
        CHECK(p.y_stereo != p.y_anti);
        CHECK(p.x.back() == spec.query_token);
    }
    // deterministic given seed
    const auto again = synthetic_pairs(spec, 25, 3);
    for (size_t i = 0; i < pairs.size(); ++i) CHECK(pairs[i].x == again[i].x);
}

TEST_CASE("planted model scores fully stereotypical before mitigation") {
    const auto pairs = synthetic_pairs(world().spec, 16, 21);
    const TransformerLogitModel lm(planted());
    CHECK(professions_score(lm, pairs) == 1.0);
}

TEST_CASE("balanced corpus covers all four gender-answer combinations equally") {
    const auto corpus = synthetic_balanced_corpus(world().spec, 32, 13);
    std::map<std::pair<int, int>, int> combos;
    int male_labels = 0;
    for (const auto& s : corpus) {
        const int ans = s.tokens.back();
        int gender = -1;
        for (const int t : s.tokens)
            if (t == world().spec.gender_a || t == world().spec.gender_b) gender = t;
        ++combos[{gender, ans}];
        male_labels += s.label == Stereotype::Male;
    }
    CHECK(combos.size() == 4);
    for (const auto& [key, count] : combos) CHECK(count == 8);
    CHECK(male_labels == 16);
}

TEST_CASE("neutral corpus stays inside the neutral sub-vocabulary") {
    const auto corpus = synthetic_neutral_corpus(world().spec, 10, 5);
    CHECK(corpus.size() == 10);
    for (const auto& seq : corpus)
        for (const int t : seq) {
            bool neutral = false;
            for (const int n : world().spec.neutral_tokens) neutral = neutral || n == t;
            CHECK(neutral);
        }
}

TEST_CASE("plant spec validation and JSON round-trip") {
    PlantedWorld w = default_planted_world();
    const PlantSpec back = plant_spec_from_json(plant_spec_to_json(w.spec));
    CHECK(back.config == w.spec.config);
    CHECK(back.planted_heads == w.spec.planted_heads);
    CHECK(back.gender_a == w.spec.gender_a);
    CHECK(back.neutral_tokens == w.spec.neutral_tokens);

    PlantSpec bad = w.spec;
    bad.config.d_model = 8;
    bad.config.n_heads = 4;  // d_head = 2 < 4
    CHECK_THROWS_AS(construct_planted_model(bad, 1), std::invalid_argument);

    PlantSpec dup = w.spec;
    dup.planted_heads = {ComponentId::attn_head(1, 1), ComponentId::attn_head(1, 1)};
    CHECK_THROWS_AS(construct_planted_model(dup, 1), std::invalid_argument);

    PlantSpec overlap = w.spec;
    overlap.answer_a = overlap.gender_a;
    CHECK_THROWS_AS(construct_planted_model(overlap, 1), std::invalid_argument);
}
