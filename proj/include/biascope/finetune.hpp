#pragma once

// Parameter-efficient fine-tuning: next-token cross entropy on a gender-
// balanced corpus, with updates restricted to a parameter selection. The
// complement of the selection stays byte-identical.

#include "biascope/corpus.hpp"
#include "biascope/model.hpp"

#include <string>
#include <utility>
#include <vector>

namespace biascope {

enum class LrSchedule { Linear, Constant };

struct FineTuneConfig {
    float lr = 1e-4f;
    int max_epochs = 20;
    int patience = 10;
    LrSchedule schedule = LrSchedule::Linear;
    float weight_decay = 0.01f;
    int batch_size = 16;
    float split_fraction = 0.9f;
    uint64_t seed = 0;

    void validate() const;
};

// Shuffles each label group with a seeded stream and takes the leading
// fraction, so label proportions in both splits match within one example.
std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> split_balanced(
    const std::vector<LabeledSequence>& corpus, double fraction, uint64_t seed);

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> valid_loss;
    int best_epoch = -1;
    std::string stop_reason;
};

// Mutates the model in place, leaving it at the best-validation epoch.
TrainHistory finetune(Transformer& model, const ParamSelection& selection,
                      const std::vector<LabeledSequence>& corpus, const FineTuneConfig& config);

ParamSelection baseline_selection_full(const Transformer& model);
ParamSelection baseline_selection_all_attn(const Transformer& model);
ParamSelection baseline_selection_last_n_attn(const Transformer& model, int n);
// Uniform draw without replacement from heads outside the excluded set.
ParamSelection baseline_selection_random_heads(const Transformer& model, int n,
                                               const std::vector<ComponentId>& excluded,
                                               uint64_t seed);

std::string history_to_json(const TrainHistory& history);

}  // namespace biascope
