#include "biascope/circuit.hpp"

#include "biascope/kernels.hpp"
#include "biascope/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace biascope {

using nlohmann::json;

namespace {

// Senders feeding one receiver, in component-index order. Heads read the
// residual before their own layer's attention; the MLP reads it after.
std::vector<int> senders_of(const ComponentIndex& index, int receiver, int logits_node) {
    std::vector<int> out;
    if (receiver == logits_node) {
        for (int i = 0; i < index.count(); ++i) out.push_back(i);
        return out;
    }
    const ComponentId id = index.at(receiver);
    out.push_back(0);  // embed
    for (int i = 1; i < index.count(); ++i) {
        const ComponentId s = index.at(i);
        if (id.kind == ComponentKind::AttnHead) {
            if (s.layer < id.layer) out.push_back(i);
        } else {  // Mlp
            if (s.layer < id.layer || (s.layer == id.layer && s.kind == ComponentKind::AttnHead))
                out.push_back(i);
        }
    }
    return out;
}

}  // namespace

int Circuit::edge_index(int sender, int receiver) const {
    for (size_t i = 0; i < edges.size(); ++i)
        if (edges[i].sender == sender && edges[i].receiver == receiver) return static_cast<int>(i);
    return -1;
}

Circuit build_full_graph(const ModelConfig& cfg, double threshold, PositionScope scope) {
    if (!(threshold > 0.0)) throw std::invalid_argument("circuit: threshold must be > 0");
    Circuit c;
    c.n_layers = cfg.n_layers;
    c.n_heads = cfg.n_heads;
    c.threshold = threshold;
    c.scope = scope;
    const ComponentIndex index(cfg);
    const int logits = c.logits_node();
    // Output-first sweep: receivers from logits backward, senders in
    // descending component order (late layers first).
    for (int receiver = logits; receiver >= 1; --receiver) {
        std::vector<int> senders = senders_of(index, receiver, logits);
        std::sort(senders.rbegin(), senders.rend());
        for (const int s : senders) c.edges.push_back({s, receiver, true, 0.0});
    }
    return c;
}

namespace {

std::span<const float> final_row(const Tensor& logits) {
    const int64_t v = logits.shape[1];
    return {logits.ptr() + (logits.shape[0] - 1) * v, static_cast<size_t>(v)};
}

double prob_difference(std::span<const float> logits_final, int y_stereo, int y_anti) {
    double mx = logits_final[0];
    for (const float v : logits_final) mx = std::max(mx, static_cast<double>(v));
    double denom = 0.0;
    for (const float v : logits_final) denom += std::exp(static_cast<double>(v) - mx);
    const double ps = std::exp(static_cast<double>(logits_final[y_stereo]) - mx) / denom;
    const double pa = std::exp(static_cast<double>(logits_final[y_anti]) - mx) / denom;
    return ps - pa;
}

struct PairState {
    std::vector<int> x;
    std::vector<uint8_t> x_mask;
    int y_stereo = -1;
    int y_anti = -1;
    ActivationCache cf_cache;
    std::vector<std::vector<float>> writes;  // committed writes under current ablations
};

PairState make_state(const Transformer& model, const MinimalPair& pair) {
    if (!pair.has_continuations())
        throw std::invalid_argument("circuit: dataset pair lacks continuation tokens");
    PairState st;
    st.x = pair.x;
    st.x_mask = pair.x_key_mask();
    st.y_stereo = pair.y_stereo;
    st.y_anti = pair.y_anti;
    const std::vector<uint8_t> cf_mask = pair.x_cf_key_mask();
    ForwardOptions opts;
    opts.capture = true;
    opts.key_mask = &cf_mask;
    st.cf_cache = model.forward(pair.x_cf, opts).cache;
    return st;
}

// Dense (sender, receiver) -> edge position lookup; -1 when the DAG lacks
// the edge.
std::vector<int> build_edge_lut(const Circuit& circuit) {
    const int nodes = circuit.logits_node() + 1;
    std::vector<int> lut(static_cast<size_t>(nodes) * nodes, -1);
    for (size_t i = 0; i < circuit.edges.size(); ++i)
        lut[static_cast<size_t>(circuit.edges[i].sender) * nodes + circuit.edges[i].receiver] =
            static_cast<int>(i);
    return lut;
}

// Recomputes component writes from `start` onward under the given absent-edge
// set and returns the pair's metric contribution. `writes` holds committed
// values for components < start and receives fresh values for the rest.
double replay_pair(const Transformer& model, const Circuit& circuit,
                   const std::vector<int>& edge_lut, const std::vector<uint8_t>& absent,
                   PairState& st, std::vector<std::vector<float>>& writes, int start) {
    const ComponentIndex index(circuit.n_layers, circuit.n_heads);
    const int components = index.count();
    const int logits_node = circuit.logits_node();
    const int seq_len = static_cast<int>(st.x.size());
    const int d = st.cf_cache.d_model;
    const auto& ops = kernels::active();

    writes.resize(components);
    Tensor residual = Tensor::zeros({seq_len, d});
    const int nodes = logits_node + 1;
    auto gather_input = [&](int receiver) {
        std::fill(residual.values().begin(), residual.values().end(), 0.0f);
        for (const int s : senders_of(index, receiver, logits_node)) {
            const int e = edge_lut[static_cast<size_t>(s) * nodes + receiver];
            const bool ablated = e >= 0 && absent[e];
            const float* cur = writes[s].data();
            for (int p = 0; p < seq_len; ++p) {
                const bool use_cf =
                    ablated && (circuit.scope == PositionScope::AllPositions || p == seq_len - 1);
                const float* src = use_cf ? st.cf_cache.at(s, p) : cur + p * d;
                ops.add(residual.ptr() + p * d, src, residual.ptr() + p * d, d);
            }
        }
    };

    for (int ci = start; ci < components; ++ci) {
        const ComponentId id = index.at(ci);
        if (id.kind == ComponentKind::Embed) {
            const Tensor w = model.component_write(id, residual, st.x, &st.x_mask);
            writes[ci] = w.values();
            continue;
        }
        gather_input(ci);
        const Tensor w = model.component_write(id, residual, st.x, &st.x_mask);
        writes[ci] = w.values();
    }
    gather_input(logits_node);
    const Tensor logits = model.logits_from_residual(residual);
    return prob_difference(final_row(logits), st.y_stereo, st.y_anti);
}

double metric_over_pairs(const Transformer& model, const Circuit& circuit,
                         const std::vector<int>& edge_lut, const std::vector<uint8_t>& absent,
                         std::vector<PairState>& states, int start, bool commit, int jobs) {
    std::vector<double> contrib(states.size());
    parallel_for(states.size(), jobs, [&](size_t i) {
        std::vector<std::vector<float>> scratch = states[i].writes;
        contrib[i] = replay_pair(model, circuit, edge_lut, absent, states[i], scratch, start);
        if (commit) states[i].writes = std::move(scratch);
    });
    double acc = 0.0;
    for (const double c : contrib) acc += c;
    return acc / states.size();
}

std::vector<PairState> prepare_states(const Transformer& model,
                                      const std::vector<MinimalPair>& dataset, int jobs) {
    if (dataset.empty()) throw std::invalid_argument("circuit: empty dataset");
    std::vector<PairState> states(dataset.size());
    parallel_for(dataset.size(), jobs,
                 [&](size_t i) { states[i] = make_state(model, dataset[i]); });
    return states;
}

}  // namespace

double task_metric(const Transformer& model, const std::vector<MinimalPair>& dataset, int jobs) {
    if (dataset.empty()) throw std::invalid_argument("task_metric: empty dataset");
    std::vector<double> contrib(dataset.size());
    parallel_for(dataset.size(), jobs, [&](size_t i) {
        const MinimalPair& pair = dataset[i];
        if (!pair.has_continuations())
            throw std::invalid_argument("task_metric: pair lacks continuation tokens");
        const std::vector<uint8_t> mask = pair.x_key_mask();
        ForwardOptions opts;
        opts.key_mask = &mask;
        contrib[i] = prob_difference(final_row(model.forward(pair.x, opts).logits), pair.y_stereo,
                                     pair.y_anti);
    });
    double acc = 0.0;
    for (const double c : contrib) acc += c;
    return acc / dataset.size();
}

EdgeAblation ablate_edge(const Transformer& model, const std::vector<MinimalPair>& dataset,
                         const Circuit& circuit, int sender, int receiver, int jobs) {
    const int e = circuit.edge_index(sender, receiver);
    if (e < 0) throw std::invalid_argument("ablate_edge: edge not in graph");
    std::vector<PairState> states = prepare_states(model, dataset, jobs);
    const std::vector<int> lut = build_edge_lut(circuit);
    std::vector<uint8_t> absent(circuit.edges.size(), 0);
    for (size_t i = 0; i < circuit.edges.size(); ++i) absent[i] = !circuit.edges[i].present;

    const double before = metric_over_pairs(model, circuit, lut, absent, states, 0, true, jobs);
    absent[e] = 1;
    const int start = std::min(receiver, circuit.logits_node());
    const double after = metric_over_pairs(model, circuit, lut, absent, states, start, false, jobs);

    EdgeAblation result;
    result.edge = circuit.edges[e];
    result.metric_before = before;
    result.metric_after = after;
    result.delta = std::fabs(after - before);
    result.edge.last_delta = result.delta;
    return result;
}

double circuit_metric(const Transformer& model, const std::vector<MinimalPair>& dataset,
                      const Circuit& circuit, int jobs) {
    std::vector<PairState> states = prepare_states(model, dataset, jobs);
    const std::vector<int> lut = build_edge_lut(circuit);
    std::vector<uint8_t> absent(circuit.edges.size(), 0);
    for (size_t i = 0; i < circuit.edges.size(); ++i) absent[i] = !circuit.edges[i].present;
    return metric_over_pairs(model, circuit, lut, absent, states, 0, false, jobs);
}

Circuit acdc_prune(const Transformer& model, const std::vector<MinimalPair>& dataset,
                   double threshold, PositionScope scope, int jobs) {
    Circuit circuit = build_full_graph(model.config(), threshold, scope);
    std::vector<PairState> states = prepare_states(model, dataset, jobs);
    const std::vector<int> lut = build_edge_lut(circuit);
    std::vector<uint8_t> absent(circuit.edges.size(), 0);

    double current = metric_over_pairs(model, circuit, lut, absent, states, 0, true, jobs);
    for (size_t e = 0; e < circuit.edges.size(); ++e) {
        CircuitEdge& edge = circuit.edges[e];
        absent[e] = 1;
        // Components before the receiver are untouched by this edge, so the
        // replay can reuse their committed writes.
        const int start = std::min(edge.receiver, circuit.logits_node());
        const double trial =
            metric_over_pairs(model, circuit, lut, absent, states, start, false, jobs);
        edge.last_delta = std::fabs(trial - current);
        if (edge.last_delta < threshold) {
            edge.present = false;
            current = metric_over_pairs(model, circuit, lut, absent, states, start, true, jobs);
        } else {
            absent[e] = 0;
        }
    }
    return circuit;
}

std::vector<ComponentId> circuit_attention_heads(const Circuit& circuit) {
    const ComponentIndex index(circuit.n_layers, circuit.n_heads);
    std::vector<uint8_t> touched(index.count(), 0);
    for (const auto& e : circuit.edges) {
        if (!e.present) continue;
        touched[e.sender] = 1;
        if (e.receiver < index.count()) touched[e.receiver] = 1;
    }
    std::vector<ComponentId> out;
    for (int i = 1; i < index.count(); ++i) {
        const ComponentId id = index.at(i);
        if (id.kind == ComponentKind::AttnHead && touched[i]) out.push_back(id);
    }
    return out;
}

bool has_complete_path(const Circuit& circuit, const ComponentId& node) {
    const ComponentIndex index(circuit.n_layers, circuit.n_heads);
    const int target = index.index_of(node);
    const int logits = circuit.logits_node();
    auto reachable = [&](int from, int to) {
        std::vector<uint8_t> seen(logits + 1, 0);
        std::vector<int> queue{from};
        seen[from] = 1;
        while (!queue.empty()) {
            const int u = queue.back();
            queue.pop_back();
            if (u == to) return true;
            for (const auto& e : circuit.edges)
                if (e.present && e.sender == u && !seen[e.receiver]) {
                    seen[e.receiver] = 1;
                    queue.push_back(e.receiver);
                }
        }
        return false;
    };
    return reachable(0, target) && reachable(target, logits);
}

namespace {

std::string node_name(const Circuit& circuit, int node) {
    if (node == circuit.logits_node()) return "logits";
    return component_str(ComponentIndex(circuit.n_layers, circuit.n_heads).at(node));
}

int node_from_name(const Circuit& circuit, const std::string& name) {
    if (name == "logits") return circuit.logits_node();
    return ComponentIndex(circuit.n_layers, circuit.n_heads).index_of(parse_component(name));
}

}  // namespace

void export_circuit_dot(const std::filesystem::path& path, const Circuit& circuit) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write circuit " + path.string());
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", circuit.threshold);
    out << "// circuit graph, threshold " << buf << ", scope "
        << (circuit.scope == PositionScope::AllPositions ? "all" : "final") << "\n";
    out << "digraph circuit {\n";
    for (const auto& e : circuit.edges) {
        if (!e.present) continue;
        std::snprintf(buf, sizeof buf, "%.6g", e.last_delta);
        out << "  \"" << node_name(circuit, e.sender) << "\" -> \"" << node_name(circuit, e.receiver)
            << "\" [label=\"" << buf << "\"];\n";
    }
    out << "}\n";
}

void export_circuit_json(const std::filesystem::path& path, const Circuit& circuit) {
    json edges = json::array();
    for (const auto& e : circuit.edges)
        edges.push_back({{"sender", node_name(circuit, e.sender)},
                         {"receiver", node_name(circuit, e.receiver)},
                         {"present", e.present},
                         {"delta", e.last_delta}});
    const json j = {{"n_layers", circuit.n_layers},
                    {"n_heads", circuit.n_heads},
                    {"threshold", circuit.threshold},
                    {"scope", circuit.scope == PositionScope::AllPositions ? "all" : "final"},
                    {"edges", edges}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write circuit " + path.string());
    out << j.dump(2) << "\n";
}

Circuit load_circuit_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open circuit " + path.string());
    json j;
    in >> j;
    Circuit c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.threshold = j.at("threshold").get<double>();
    c.scope = parse_scope(j.at("scope").get<std::string>());
    for (const auto& e : j.at("edges"))
        c.edges.push_back({node_from_name(c, e.at("sender").get<std::string>()),
                           node_from_name(c, e.at("receiver").get<std::string>()),
                           e.at("present").get<bool>(), e.at("delta").get<double>()});
    return c;
}

}  // namespace biascope
