#pragma once

// Hand-wired toy transformers with a known bias mechanism. Selected heads
// attend from the final (query) position to a gender-carrying token and copy
// its sign into an answer direction that the unembedding maps onto two
// answer tokens; every other component writes (near) zero. The planted head
// set is therefore an exact oracle for what discovery methods should find.

#include "biascope/corpus.hpp"
#include "biascope/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace biascope {

struct PlantSpec {
    ModelConfig config;
    std::vector<ComponentId> planted_heads;  // AttnHead kind only
    int gender_a = -1;
    int gender_b = -1;
    int answer_a = -1;  // preferred continuation after gender_a
    int answer_b = -1;
    int query_token = -1;
    std::vector<int> filler_tokens;
    std::vector<int> neutral_tokens;  // disjoint sub-vocabulary for held-out perplexity
    float noise_scale = 0.0f;
    float target_margin = 3.5f;  // answer_a-vs-answer_b logit gap on a gendered probe

    void validate() const;
};

struct PlantedWorld {
    PlantSpec spec;
    Vocab vocab;
};

// Default world: 4 layers x 4 heads, d_model 64, heads (1,1) and (2,2)
// planted, 8 filler and 8 neutral tokens.
PlantedWorld default_planted_world(float noise_scale = 0.0f,
                                   std::vector<ComponentId> planted_heads = {
                                       ComponentId::attn_head(1, 1),
                                       ComponentId::attn_head(2, 2)});
PlantedWorld make_planted_world(ModelConfig geometry, std::vector<ComponentId> planted_heads,
                                float noise_scale, int n_fillers, int n_neutral);

Transformer construct_planted_model(const PlantSpec& spec, uint64_t seed);

// Counterfactual pairs over the planted vocabulary: x = fillers with one
// gender token and a final query token; x_cf flips only the gender token.
std::vector<MinimalPair> synthetic_pairs(const PlantSpec& spec, int n, uint64_t seed);

// Fine-tuning corpus where both answers follow both genders equally often;
// the label is the gender of the answer token.
std::vector<LabeledSequence> synthetic_balanced_corpus(const PlantSpec& spec, int n,
                                                       uint64_t seed);

// Held-out sequences over the neutral sub-vocabulary only.
std::vector<std::vector<int>> synthetic_neutral_corpus(const PlantSpec& spec, int n,
                                                       uint64_t seed);

// Fills in surface strings for synthetic records so they can be saved.
void attach_surfaces(std::vector<MinimalPair>& pairs, const Vocab& vocab);

std::string plant_spec_to_json(const PlantSpec& spec);
PlantSpec plant_spec_from_json(const std::string& text);

}  // namespace biascope
