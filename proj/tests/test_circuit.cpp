#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "biascope/circuit.hpp"
#include "biascope/groundtruth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace biascope;
namespace fs = std::filesystem;

namespace {

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

double oracle_prob_diff(const Transformer& model, const MinimalPair& p) {
    const Tensor logits = model.forward(p.x).logits;
    const int v = model.config().vocab_size;
    const float* last = logits.ptr() + (p.x.size() - 1) * v;
    double denom = 0;
    double mx = last[0];
    for (int i = 0; i < v; ++i) mx = std::max(mx, static_cast<double>(last[i]));
    for (int i = 0; i < v; ++i) denom += std::exp(last[i] - mx);
    return (std::exp(last[p.y_stereo] - mx) - std::exp(last[p.y_anti] - mx)) / denom;
}

}  // namespace

TEST_CASE("graph construction covers the residual DAG output-first") {
    ModelConfig cfg;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_model = 64;
    cfg.d_mlp = 256;
    const Circuit c = build_full_graph(cfg, 0.01);
    // embed->21 receivers is part of: heads receive strictly earlier layers,
    // mlp also receives same-layer heads, logits receives everything
    CHECK(c.edges.size() == 207);
    CHECK(c.edges.front().receiver == c.logits_node());
    // senders of one receiver appear in descending component order
    int prev_receiver = c.logits_node() + 1;
    int prev_sender = 1 << 20;
    for (const auto& e : c.edges) {
        if (e.receiver != prev_receiver) {
            CHECK(e.receiver <= prev_receiver);
            prev_sender = 1 << 20;
            prev_receiver = e.receiver;
        }
        CHECK(e.sender < prev_sender);
        prev_sender = e.sender;
    }
    CHECK_THROWS_AS(build_full_graph(cfg, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(build_full_graph(cfg, -1.0), std::invalid_argument);
}

TEST_CASE("task metric: zero model is indifferent, planted model is biased") {
    const PlantedWorld w = small_world();
    const auto pairs = synthetic_pairs(w.spec, 6, 3);

    Transformer zero(w.spec.config);  // all-zero weights: equal logits
    CHECK(task_metric(zero, pairs) == 0.0);

    const Transformer model = construct_planted_model(w.spec, 1);
    CHECK(task_metric(model, pairs) > 0.1);

    // hand-computed two-example mean
    const std::vector<MinimalPair> two(pairs.begin(), pairs.begin() + 2);
    const double hand = (oracle_prob_diff(model, two[0]) + oracle_prob_diff(model, two[1])) / 2.0;
    CHECK(task_metric(model, two) == doctest::Approx(hand).epsilon(1e-6));
}

TEST_CASE("ablating an edge with identical clean and counterfactual sender output is free") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 4, 5);
    const Circuit circuit = build_full_graph(model.config(), 0.01);
    const ComponentIndex& index = model.components();

    // MLP writes are exactly zero in the planted model under either input.
    const auto mlp_ab = ablate_edge(model, pairs, circuit,
                                    index.index_of(ComponentId::mlp(0)), circuit.logits_node());
    CHECK(mlp_ab.delta == 0.0);

    // planted-head -> logits carries the mechanism
    const auto head_ab =
        ablate_edge(model, pairs, circuit, index.index_of(w.spec.planted_heads[0]),
                    circuit.logits_node());
    CHECK(head_ab.delta > 0.01);

    CHECK_THROWS_AS(
        ablate_edge(model, pairs, circuit, circuit.logits_node(), circuit.logits_node()),
        std::invalid_argument);
}

TEST_CASE("ablating every incoming logits edge reproduces the counterfactual metric") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 5, 7);

    Circuit circuit = build_full_graph(model.config(), 0.01);
    for (auto& e : circuit.edges)
        if (e.receiver == circuit.logits_node()) e.present = false;
    const double swapped = circuit_metric(model, pairs, circuit);

    std::vector<MinimalPair> flipped = pairs;
    for (auto& p : flipped) std::swap(p.x, p.x_cf);
    const double counterfactual = task_metric(model, flipped);
    CHECK(swapped == doctest::Approx(counterfactual).epsilon(1e-4));
}

TEST_CASE("ablate and restore returns the metric bit-exactly") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 4, 11);
    Circuit circuit = build_full_graph(model.config(), 0.01);
    const double before = circuit_metric(model, pairs, circuit);
    circuit.edges[3].present = false;
    (void)circuit_metric(model, pairs, circuit);
    circuit.edges[3].present = true;
    CHECK(circuit_metric(model, pairs, circuit) == before);
}

TEST_CASE("infinite threshold removes every edge") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 3, 13);
    const Circuit c =
        acdc_prune(model, pairs, std::numeric_limits<double>::infinity());
    for (const auto& e : c.edges) CHECK_FALSE(e.present);
    CHECK(circuit_attention_heads(c).empty());
}

TEST_CASE("pruning the planted model keeps exactly the planted mechanism") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 8, 17);
    const Circuit c = acdc_prune(model, pairs, 0.01);
    const ComponentIndex& index = model.components();

    for (const ComponentId& head : w.spec.planted_heads) {
        CHECK(has_complete_path(c, head));
        const int hi = index.index_of(head);
        CHECK(c.edges[c.edge_index(0, hi)].present);
        CHECK(c.edges[c.edge_index(hi, c.logits_node())].present);
    }
    for (const ComponentId& head : index.attention_heads()) {
        bool is_planted = false;
        for (const auto& p : w.spec.planted_heads) is_planted = is_planted || p == head;
        if (!is_planted) CHECK_FALSE(has_complete_path(c, head));
    }

    const auto heads = circuit_attention_heads(c);
    std::vector<ComponentId> expected = w.spec.planted_heads;
    std::sort(expected.begin(), expected.end());
    CHECK(heads == expected);
}

TEST_CASE("pruning is deterministic and parallel-invariant") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 4, 19);
    const Circuit a = acdc_prune(model, pairs, 0.01, PositionScope::AllPositions, 1);
    const Circuit b = acdc_prune(model, pairs, 0.01, PositionScope::AllPositions, 4);
    REQUIRE(a.edges.size() == b.edges.size());
    for (size_t i = 0; i < a.edges.size(); ++i) {
        CHECK(a.edges[i].present == b.edges[i].present);
        CHECK(a.edges[i].last_delta == b.edges[i].last_delta);
    }
}

TEST_CASE("circuit export round-trips and renders") {
    const PlantedWorld w = small_world();
    const Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 4, 23);
    const Circuit c = acdc_prune(model, pairs, 0.01);

    const fs::path jpath = fs::temp_directory_path() / "biascope_circuit_test.json";
    export_circuit_json(jpath, c);
    const Circuit back = load_circuit_json(jpath);
    CHECK(back.threshold == c.threshold);
    CHECK(back.scope == c.scope);
    REQUIRE(back.edges.size() == c.edges.size());
    for (size_t i = 0; i < c.edges.size(); ++i) {
        CHECK(back.edges[i].sender == c.edges[i].sender);
        CHECK(back.edges[i].receiver == c.edges[i].receiver);
        CHECK(back.edges[i].present == c.edges[i].present);
        CHECK(back.edges[i].last_delta == c.edges[i].last_delta);
    }

    const fs::path dpath = fs::temp_directory_path() / "biascope_circuit_test.dot";
    export_circuit_dot(dpath, c);
    std::ifstream in(dpath);
    std::string dot((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(dot.find("digraph") != std::string::npos);
    int arrows = 0;
    for (size_t at = dot.find("->"); at != std::string::npos; at = dot.find("->", at + 1)) ++arrows;
    int present = 0;
    for (const auto& e : c.edges) present += e.present;
    CHECK(arrows == present);
    CHECK(present >= 2);

    // empty circuit renders a header-only graph
    Circuit empty = c;
    for (auto& e : empty.edges) e.present = false;
    export_circuit_dot(dpath, empty);
    std::ifstream in2(dpath);
    std::string dot2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(dot2.find("->") == std::string::npos);
    fs::remove(jpath);
    fs::remove(dpath);
}
