#pragma once

// Causal mediation analysis. A component's importance is the expected
// proportional change of the bias ratio when its output at the intervention
// position is replaced by the counterfactual run's output.

#include "biascope/corpus.hpp"
#include "biascope/model.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace biascope {

// p(y_anti | x) / p(y_stereo | x) from final-position logits.
double bias_ratio(std::span<const float> logits_final, int y_anti, int y_stereo);

struct NieScore {
    ComponentId component;
    double nie = 0.0;
    int n_examples = 0;
};

enum class Strategy { TopK, KGreedy };

struct DiscoveryResult {
    std::vector<NieScore> ranked;  // descending nie, ties by component order
    Strategy strategy = Strategy::TopK;
    int k = 0;
};

// Per-pair state reused across component evaluations: the clean bias ratio
// and the counterfactual activation cache.
struct PairContext {
    std::vector<int> x;
    std::vector<uint8_t> x_mask;
    int y_stereo = -1;
    int y_anti = -1;
    double b_null = 0.0;
    ActivationCache cf_cache;
};

std::vector<PairContext> prepare_contexts(const Transformer& model,
                                          const std::vector<MinimalPair>& dataset, int jobs = 1);

// Mean over pairs of b_intv / b_null - 1 with every listed component swapped
// simultaneously.
double joint_nie(const Transformer& model, const std::vector<PairContext>& contexts,
                 const std::vector<ComponentId>& components,
                 PositionScope scope = PositionScope::FinalOnly);

NieScore nie(const Transformer& model, const std::vector<MinimalPair>& dataset,
             const ComponentId& component, PositionScope scope = PositionScope::FinalOnly);

DiscoveryResult top_k(const Transformer& model, const std::vector<MinimalPair>& dataset, int k,
                      const std::vector<ComponentId>& components,
                      PositionScope scope = PositionScope::FinalOnly, int jobs = 1);

DiscoveryResult k_greedy(const Transformer& model, const std::vector<MinimalPair>& dataset, int k,
                         const std::vector<ComponentId>& components,
                         PositionScope scope = PositionScope::FinalOnly, int jobs = 1);

// Ranked-score interchange file: "component score n_examples" per line,
// consumed by the fine-tuning stage. DiffMask+ reuses it with expected mask
// values as scores.
struct RankedEntry {
    ComponentId component;
    double score = 0.0;
    int n_examples = 0;
};

void save_ranked_scores(const std::filesystem::path& path, const std::vector<RankedEntry>& entries);
std::vector<RankedEntry> load_ranked_scores(const std::filesystem::path& path);

std::vector<RankedEntry> to_ranked_entries(const DiscoveryResult& result);

}  // namespace biascope
