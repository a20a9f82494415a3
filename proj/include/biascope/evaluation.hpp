#pragma once

// Bias and language-modeling metrics over anything that can score token
// sequences, plus a comparison report across fine-tuned model variants.

#include "biascope/corpus.hpp"
#include "biascope/model.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace biascope {

// Per-position next-token logits; the abstraction the metrics run against
// (a transformer in production, table models in tests).
struct LogitModel {
    virtual ~LogitModel() = default;
    virtual Tensor all_logits(std::span<const int> tokens) const = 0;
    virtual int vocab_size() const = 0;
};

class TransformerLogitModel : public LogitModel {
  public:
    explicit TransformerLogitModel(const Transformer& model, int pad_token = Vocab::kPad)
        : model_(&model), pad_(pad_token) {}
    Tensor all_logits(std::span<const int> tokens) const override;
    int vocab_size() const override { return model_->config().vocab_size; }

  private:
    const Transformer* model_;
    int pad_;
};

enum class LengthMode { TotalLogProb, MeanPerToken };

LengthMode parse_length_mode(const std::string& text);

// log p(sequence): sum (or mean) of next-token log probabilities from
// position 1 onward; PAD targets are skipped.
double sequence_score(const LogitModel& model, std::span<const int> tokens, LengthMode mode);

// Fraction of pairs scoring the stereotypical member strictly higher
// (ties count as non-stereotypical).
double stereotype_score(const LogitModel& model, const std::vector<MinimalPair>& pairs,
                        LengthMode mode = LengthMode::TotalLogProb, int jobs = 1);

// Fraction of pairs with p(y_stereo | x) > p(y_anti | x) at the final position.
double professions_score(const LogitModel& model, const std::vector<MinimalPair>& pairs,
                         int jobs = 1);

// exp(total NLL / predicted-token count) over the corpus.
double perplexity(const LogitModel& model, const std::vector<std::vector<int>>& corpus,
                  int jobs = 1);

// Fraction of pairs where the designated-correct member ("text") scores
// strictly higher than "counterfactual".
double minimal_pair_accuracy(const LogitModel& model, const std::vector<MinimalPair>& pairs,
                             LengthMode mode = LengthMode::MeanPerToken, int jobs = 1);

struct EvalReport {
    std::string model_tag;
    uint64_t seed = 0;
    std::map<std::string, double> metrics;

    struct Example {
        int pair_id = 0;
        double score_x = 0;
        double score_cf = 0;
        bool preferred_stereo = false;
    };
    std::vector<Example> examples;  // optional audit records
};

void save_eval_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport load_eval_report(const std::filesystem::path& path);

bool metric_higher_is_better(const std::string& name);

// Comparison across reports, grouped by model tag: absolute mean/stddev per
// metric plus percent improvement vs the baseline tag (sign follows the
// metric direction, so lower perplexity shows as positive improvement).
// Writes <out_base>.json, <out_base>.txt and <out_base>.tsv.
void emit_report(const std::vector<EvalReport>& reports, const std::string& baseline_tag,
                 const std::filesystem::path& out_base);

}  // namespace biascope
