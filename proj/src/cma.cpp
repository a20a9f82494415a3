#include "biascope/cma.hpp"

#include "biascope/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace biascope {

double bias_ratio(std::span<const float> logits_final, int y_anti, int y_stereo) {
    if (y_anti == y_stereo) throw std::invalid_argument("bias_ratio: identical continuation tokens");
    if (y_anti < 0 || y_stereo < 0 || static_cast<size_t>(y_anti) >= logits_final.size() ||
        static_cast<size_t>(y_stereo) >= logits_final.size())
        throw std::out_of_range("bias_ratio: continuation token outside logits");
    double mx = logits_final[0];
    for (const float v : logits_final) {
        if (!std::isfinite(v)) throw std::invalid_argument("bias_ratio: non-finite logits");
        mx = std::max(mx, static_cast<double>(v));
    }
    double denom = 0.0;
    for (const float v : logits_final) denom += std::exp(static_cast<double>(v) - mx);
    const double p_anti = std::exp(static_cast<double>(logits_final[y_anti]) - mx) / denom;
    const double p_stereo = std::exp(static_cast<double>(logits_final[y_stereo]) - mx) / denom;
    return p_anti / p_stereo;
}

namespace {

std::span<const float> final_row(const Tensor& logits) {
    const int64_t v = logits.shape[1];
    return {logits.ptr() + (logits.shape[0] - 1) * v, static_cast<size_t>(v)};
}

PairContext make_context(const Transformer& model, const MinimalPair& pair) {
    if (!pair.has_continuations())
        throw std::invalid_argument("cma: dataset pair lacks continuation tokens");
    PairContext ctx;
    ctx.x = pair.x;
    ctx.x_mask = pair.x_key_mask();
    ctx.y_stereo = pair.y_stereo;
    ctx.y_anti = pair.y_anti;

    ForwardOptions clean;
    clean.key_mask = &ctx.x_mask;
    ctx.b_null = bias_ratio(final_row(model.forward(pair.x, clean).logits), pair.y_anti,
                            pair.y_stereo);
    if (!(ctx.b_null > 0.0) || !std::isfinite(ctx.b_null))
        throw std::runtime_error("cma: degenerate clean bias ratio");

    const std::vector<uint8_t> cf_mask = pair.x_cf_key_mask();
    ForwardOptions counter;
    counter.capture = true;
    counter.key_mask = &cf_mask;
    ctx.cf_cache = model.forward(pair.x_cf, counter).cache;
    return ctx;
}

}  // namespace

std::vector<PairContext> prepare_contexts(const Transformer& model,
                                          const std::vector<MinimalPair>& dataset, int jobs) {
    if (dataset.empty()) throw std::invalid_argument("cma: empty dataset");
    std::vector<PairContext> contexts(dataset.size());
    parallel_for(dataset.size(), jobs,
                 [&](size_t i) { contexts[i] = make_context(model, dataset[i]); });
    return contexts;
}

double joint_nie(const Transformer& model, const std::vector<PairContext>& contexts,
                 const std::vector<ComponentId>& components, PositionScope scope) {
    if (contexts.empty()) throw std::invalid_argument("cma: no pair contexts");
    double acc = 0.0;
    for (const PairContext& ctx : contexts) {
        InterventionSpec spec;
        for (const ComponentId& c : components)
            spec.replacements.push_back({c, scope, &ctx.cf_cache});
        ForwardOptions opts;
        opts.interventions = &spec;
        opts.key_mask = &ctx.x_mask;
        const double b_intv =
            bias_ratio(final_row(model.forward(ctx.x, opts).logits), ctx.y_anti, ctx.y_stereo);
        acc += b_intv / ctx.b_null - 1.0;
    }
    return acc / contexts.size();
}

NieScore nie(const Transformer& model, const std::vector<MinimalPair>& dataset,
             const ComponentId& component, PositionScope scope) {
    const auto contexts = prepare_contexts(model, dataset, 1);
    return {component, joint_nie(model, contexts, {component}, scope),
            static_cast<int>(dataset.size())};
}

namespace {

void sort_ranked(std::vector<NieScore>& scores) {
    std::sort(scores.begin(), scores.end(), [](const NieScore& a, const NieScore& b) {
        if (a.nie != b.nie) return a.nie > b.nie;
        return a.component < b.component;  // deterministic tie-break
    });
}

void check_k(int k, size_t n_components) {
    if (k < 1) throw std::invalid_argument("discovery: k must be >= 1");
    if (static_cast<size_t>(k) > n_components)
        throw std::invalid_argument("discovery: k exceeds component count");
}

}  // namespace

DiscoveryResult top_k(const Transformer& model, const std::vector<MinimalPair>& dataset, int k,
                      const std::vector<ComponentId>& components, PositionScope scope, int jobs) {
    check_k(k, components.size());
    const auto contexts = prepare_contexts(model, dataset, jobs);
    std::vector<NieScore> scores(components.size());
    parallel_for(components.size(), jobs, [&](size_t i) {
        scores[i] = {components[i], joint_nie(model, contexts, {components[i]}, scope),
                     static_cast<int>(dataset.size())};
    });
    sort_ranked(scores);
    scores.resize(k);
    return {std::move(scores), Strategy::TopK, k};
}

DiscoveryResult k_greedy(const Transformer& model, const std::vector<MinimalPair>& dataset, int k,
                         const std::vector<ComponentId>& components, PositionScope scope,
                         int jobs) {
    check_k(k, components.size());
    const auto contexts = prepare_contexts(model, dataset, jobs);

    std::vector<ComponentId> selected;
    std::vector<NieScore> ranked;
    std::vector<ComponentId> remaining = components;
    for (int step = 0; step < k; ++step) {
        // Joint effect of the already-selected set plus each candidate,
        // all swapped simultaneously.
        std::vector<double> joint(remaining.size());
        parallel_for(remaining.size(), jobs, [&](size_t i) {
            std::vector<ComponentId> trial = selected;
            trial.push_back(remaining[i]);
            joint[i] = joint_nie(model, contexts, trial, scope);
        });
        size_t best = 0;
        for (size_t i = 1; i < remaining.size(); ++i) {
            if (joint[i] > joint[best] ||
                (joint[i] == joint[best] && remaining[i] < remaining[best]))
                best = i;
        }
        selected.push_back(remaining[best]);
        ranked.push_back({remaining[best], joint[best], static_cast<int>(dataset.size())});
        remaining.erase(remaining.begin() + best);
    }
    return {std::move(ranked), Strategy::KGreedy, k};
}

void save_ranked_scores(const std::filesystem::path& path,
                        const std::vector<RankedEntry>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write ranked scores " + path.string());
    out << "# component score n_examples\n";
    char buf[64];
    for (const auto& e : entries) {
        std::snprintf(buf, sizeof buf, " %.17g %d", e.score, e.n_examples);
        out << component_str(e.component) << buf << "\n";
    }
}

std::vector<RankedEntry> load_ranked_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open ranked scores " + path.string());
    std::vector<RankedEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const size_t s1 = line.find(' ');
        const size_t s2 = line.find(' ', s1 + 1);
        if (s1 == std::string::npos || s2 == std::string::npos)
            throw std::runtime_error("bad ranked-score line: '" + line + "'");
        RankedEntry e;
        e.component = parse_component(line.substr(0, s1));
        e.score = std::stod(line.substr(s1 + 1, s2 - s1 - 1));
        e.n_examples = std::stoi(line.substr(s2 + 1));
        out.push_back(e);
    }
    return out;
}

std::vector<RankedEntry> to_ranked_entries(const DiscoveryResult& result) {
    std::vector<RankedEntry> out;
    out.reserve(result.ranked.size());
    for (const auto& s : result.ranked) out.push_back({s.component, s.nie, s.n_examples});
    return out;
}

}  // namespace biascope
