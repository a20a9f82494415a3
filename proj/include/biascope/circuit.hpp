#pragma once

// Automated circuit discovery over the component-level residual-stream DAG.
// Edges are tested in an output-first sweep; an edge whose counterfactual
// ablation moves the task metric by less than the threshold is removed for
// good, and later tests keep it ablated.

#include "biascope/corpus.hpp"
#include "biascope/model.hpp"

#include <filesystem>
#include <vector>

namespace biascope {

struct CircuitEdge {
    int sender = 0;    // component index (0 = embed / input node)
    int receiver = 0;  // component index, or logits_node()
    bool present = true;
    double last_delta = 0.0;
};

struct Circuit {
    int n_layers = 0;
    int n_heads = 0;
    double threshold = 0.0;
    PositionScope scope = PositionScope::AllPositions;
    std::vector<CircuitEdge> edges;  // visitation order: receivers output-first

    int logits_node() const { return ComponentIndex(n_layers, n_heads).count(); }
    int edge_index(int sender, int receiver) const;  // -1 when absent from the DAG
};

// All residual-stream edges of a geometry, in visitation order.
Circuit build_full_graph(const ModelConfig& cfg, double threshold,
                         PositionScope scope = PositionScope::AllPositions);

// Mean over pairs of p(y_stereo | x) - p(y_anti | x) at the final position.
double task_metric(const Transformer& model, const std::vector<MinimalPair>& dataset,
                   int jobs = 1);

struct EdgeAblation {
    CircuitEdge edge;
    double metric_before = 0.0;
    double metric_after = 0.0;
    double delta = 0.0;
};

// Effect of ablating one extra edge on top of the circuit's absent set.
EdgeAblation ablate_edge(const Transformer& model, const std::vector<MinimalPair>& dataset,
                         const Circuit& circuit, int sender, int receiver, int jobs = 1);

// Task metric with the circuit's absent edges ablated (counterfactual
// contributions fed to their receivers).
double circuit_metric(const Transformer& model, const std::vector<MinimalPair>& dataset,
                      const Circuit& circuit, int jobs = 1);

Circuit acdc_prune(const Transformer& model, const std::vector<MinimalPair>& dataset,
                   double threshold, PositionScope scope = PositionScope::AllPositions,
                   int jobs = 1);

// Attention heads with at least one retained incident edge.
std::vector<ComponentId> circuit_attention_heads(const Circuit& circuit);

// True when a retained path input -> node -> logits exists.
bool has_complete_path(const Circuit& circuit, const ComponentId& node);

void export_circuit_dot(const std::filesystem::path& path, const Circuit& circuit);
void export_circuit_json(const std::filesystem::path& path, const Circuit& circuit);
Circuit load_circuit_json(const std::filesystem::path& path);

}  // namespace biascope
