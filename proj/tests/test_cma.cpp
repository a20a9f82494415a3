#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "biascope/cma.hpp"
#include "biascope/groundtruth.hpp"
#include "biascope/rng.hpp"

#include <cmath>
#include <filesystem>

using namespace biascope;
namespace fs = std::filesystem;

namespace {

// Brute-force softmax ratio used as the oracle: plain double loops, no
// shift trick, no shared code with the implementation.
double oracle_ratio(const std::vector<float>& logits, int y_anti, int y_stereo) {
    double denom = 0;
    for (const float v : logits) denom += std::exp(static_cast<double>(v));
    const double pa = std::exp(static_cast<double>(logits[y_anti])) / denom;
    const double ps = std::exp(static_cast<double>(logits[y_stereo])) / denom;
    return pa / ps;
}

PlantedWorld small_world() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_mlp = 32;
    cfg.max_seq_len = 16;
    return make_planted_world(cfg, {ComponentId::attn_head(0, 0), ComponentId::attn_head(1, 1)},
                              0.0f, 4, 4);
}

}  // namespace

TEST_CASE("bias ratio basics") {
    std::vector<float> logits(6, 0.3f);
    CHECK(bias_ratio(logits, 2, 4) == doctest::Approx(1.0));

    // stereo carries ln 2 over anti, everything else is hard-masked out
    std::vector<float> two(5, -1e9f);
    two[1] = std::log(2.0f);
    two[3] = 0.0f;
    CHECK(bias_ratio(two, 3, 1) == doctest::Approx(0.5).epsilon(1e-9));

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> random_logits(12);
        for (auto& v : random_logits) v = static_cast<float>(rng.uniform(-5, 5));
        CHECK(bias_ratio(random_logits, 7, 2) ==
              doctest::Approx(oracle_ratio(random_logits, 7, 2)).epsilon(1e-6));
    }
}

TEST_CASE("bias ratio is invariant to a constant logit shift") {
    Rng rng(5);
    std::vector<float> logits(10);
    for (auto& v : logits) v = static_cast<float>(rng.uniform(-3, 3));
    // the shift itself rounds the f32 inputs, so compare at that granularity
    std::vector<float> shifted = logits;
    for (auto& v : shifted) v += 11.5f;
    CHECK(bias_ratio(logits, 1, 6) == doctest::Approx(bias_ratio(shifted, 1, 6)).epsilon(1e-5));
}

TEST_CASE("bias ratio rejects degenerate inputs") {
    std::vector<float> logits(4, 0.0f);
    CHECK_THROWS_AS(bias_ratio(logits, 2, 2), std::invalid_argument);
    logits[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(bias_ratio(logits, 0, 2), std::invalid_argument);
}

TEST_CASE("identity counterfactual gives exactly zero NIE everywhere") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    auto pairs = synthetic_pairs(w.spec, 6, 9);
    for (auto& p : pairs) p.x_cf = p.x;  // degenerate pair
    const auto contexts = prepare_contexts(model, pairs);
    for (const ComponentId& id : model.components().all())
        CHECK(joint_nie(model, contexts, {id}, PositionScope::FinalOnly) == 0.0);
}

TEST_CASE("two-example NIE equals the hand-computed mean of ratios") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 2, 17);
    const ComponentId head = w.spec.planted_heads[0];

    double hand = 0;
    for (const auto& p : pairs) {
        const Tensor clean = model.forward(p.x).logits;
        const int v = model.config().vocab_size;
        std::vector<float> clean_final(clean.ptr() + (p.x.size() - 1) * v,
                                       clean.ptr() + p.x.size() * v);
        ForwardOptions capture;
        capture.capture = true;
        const ForwardResult cf = model.forward(p.x_cf, capture);
        InterventionSpec spec;
        spec.replacements.push_back({head, PositionScope::FinalOnly, &cf.cache});
        ForwardOptions opts;
        opts.interventions = &spec;
        const Tensor swapped = model.forward(p.x, opts).logits;
        std::vector<float> swapped_final(swapped.ptr() + (p.x.size() - 1) * v,
                                         swapped.ptr() + p.x.size() * v);
        hand += oracle_ratio(swapped_final, p.y_anti, p.y_stereo) /
                oracle_ratio(clean_final, p.y_anti, p.y_stereo);
    }
    hand = hand / 2.0 - 1.0;

    const NieScore score = nie(model, pairs, head);
    CHECK(score.n_examples == 2);
    CHECK(score.nie == doctest::Approx(hand).epsilon(1e-6));
}

TEST_CASE("top-k returns every component sorted when k equals the pool") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 4, 23);
    const auto components = model.components().all();
    const auto result =
        top_k(model, pairs, static_cast<int>(components.size()), components);
    CHECK(result.ranked.size() == components.size());
    for (size_t i = 1; i < result.ranked.size(); ++i)
        CHECK(result.ranked[i - 1].nie >= result.ranked[i].nie);
}

TEST_CASE("top-k recovers the planted pair exactly") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 8, 29);
    const auto result = top_k(model, pairs, 2, model.components().attention_heads());
    REQUIRE(result.ranked.size() == 2);
    std::vector<ComponentId> found = {result.ranked[0].component, result.ranked[1].component};
    std::sort(found.begin(), found.end());
    std::vector<ComponentId> expected = w.spec.planted_heads;
    std::sort(expected.begin(), expected.end());
    CHECK(found == expected);
}

TEST_CASE("k must be positive and within range") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 2, 31);
    CHECK_THROWS_AS(top_k(model, pairs, 0, model.components().all()), std::invalid_argument);
    CHECK_THROWS_AS(k_greedy(model, pairs, 99, model.components().all()), std::invalid_argument);
}

TEST_CASE("greedy first pick matches top-k first pick with identical value") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 6, 37);
    const auto components = model.components().all();
    const auto t = top_k(model, pairs, 1, components);
    const auto g = k_greedy(model, pairs, 1, components);
    CHECK(t.ranked[0].component == g.ranked[0].component);
    CHECK(t.ranked[0].nie == g.ranked[0].nie);
}

TEST_CASE("greedy size-2 matches the exhaustive best subset on a small model") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 6, 41);
    const auto components = model.components().all();  // 7 components
    REQUIRE(components.size() <= 8);
    const auto contexts = prepare_contexts(model, pairs);

    // enumeration oracle over all 2-subsets
    double best = -1e300;
    std::vector<ComponentId> best_set;
    for (size_t i = 0; i < components.size(); ++i)
        for (size_t j = i + 1; j < components.size(); ++j) {
            const double v =
                joint_nie(model, contexts, {components[i], components[j]}, PositionScope::FinalOnly);
            if (v > best) {
                best = v;
                best_set = {components[i], components[j]};
            }
        }

    const auto g = k_greedy(model, pairs, 2, components);
    const double greedy_joint =
        joint_nie(model, contexts, {g.ranked[0].component, g.ranked[1].component},
                  PositionScope::FinalOnly);
    // greedy is not guaranteed optimal in general; report the gap and, for
    // the additively planted model, expect exact recovery
    INFO("greedy joint ", greedy_joint, " vs exhaustive best ", best);
    CHECK(greedy_joint <= best + 1e-9);
    std::vector<ComponentId> got = {g.ranked[0].component, g.ranked[1].component};
    std::sort(got.begin(), got.end());
    std::sort(best_set.begin(), best_set.end());
    std::vector<ComponentId> expected = w.spec.planted_heads;
    std::sort(expected.begin(), expected.end());
    CHECK(got == expected);
    CHECK(best_set == expected);

    // joint effect of the greedy pair at least matches any single component
    for (const auto& c : components) {
        const double single = joint_nie(model, contexts, {c}, PositionScope::FinalOnly);
        CHECK(greedy_joint >= single - 1e-9);
    }
}

TEST_CASE("discovery is deterministic and parallel-invariant") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 6, 43);
    const auto components = model.components().all();
    const auto a = top_k(model, pairs, 3, components, PositionScope::FinalOnly, 1);
    const auto b = top_k(model, pairs, 3, components, PositionScope::FinalOnly, 4);
    REQUIRE(a.ranked.size() == b.ranked.size());
    for (size_t i = 0; i < a.ranked.size(); ++i) {
        CHECK(a.ranked[i].component == b.ranked[i].component);
        CHECK(a.ranked[i].nie == b.ranked[i].nie);
    }
}

TEST_CASE("ranked score files round-trip") {
    const std::vector<RankedEntry> entries = {
        {ComponentId::attn_head(2, 3), 12.5, 16},
        {ComponentId::attn_head(0, 1), 0.0078125, 16},
        {ComponentId::mlp(1), -0.25, 16},
        {ComponentId::embed(), 0.0, 16},
    };
    const fs::path path = fs::temp_directory_path() / "biascope_cma_test_ranked.txt";
    save_ranked_scores(path, entries);
    const auto back = load_ranked_scores(path);
    REQUIRE(back.size() == entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        CHECK(back[i].component == entries[i].component);
        CHECK(back[i].score == entries[i].score);
        CHECK(back[i].n_examples == entries[i].n_examples);
    }
    fs::remove(path);
}
