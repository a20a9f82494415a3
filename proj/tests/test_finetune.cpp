#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "biascope/circuit.hpp"
#include "biascope/finetune.hpp"
#include "biascope/groundtruth.hpp"

#include <cmath>
#include <cstring>

using namespace biascope;

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

std::vector<LabeledSequence> tiny_corpus(const PlantSpec& spec, int n, uint64_t seed) {
    return synthetic_balanced_corpus(spec, n, seed);
}

FineTuneConfig quick_config(uint64_t seed) {
    FineTuneConfig cfg;
    cfg.lr = 5e-3f;
    cfg.max_epochs = 8;
    cfg.patience = 8;
    cfg.batch_size = 8;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("balanced split keeps label proportions and is seed-deterministic") {
    std::vector<LabeledSequence> corpus;
    for (int i = 0; i < 10; ++i) corpus.push_back({{1, 2}, Stereotype::Male, "m" + std::to_string(i)});
    for (int i = 0; i < 10; ++i) corpus.push_back({{3, 4}, Stereotype::Female, "f" + std::to_string(i)});

    const auto [train, valid] = split_balanced(corpus, 0.9, 7);
    CHECK(train.size() == 18);
    CHECK(valid.size() == 2);
    int train_m = 0, valid_m = 0;
    for (const auto& s : train) train_m += s.label == Stereotype::Male;
    for (const auto& s : valid) valid_m += s.label == Stereotype::Male;
    CHECK(train_m == 9);
    CHECK(valid_m == 1);

    const auto [train2, valid2] = split_balanced(corpus, 0.9, 7);
    REQUIRE(train2.size() == train.size());
    for (size_t i = 0; i < train.size(); ++i) CHECK(train2[i].text == train[i].text);

    const auto [train3, valid3] = split_balanced(corpus, 0.9, 8);
    bool differs = false;
    for (size_t i = 0; i < train.size(); ++i) differs = differs || train3[i].text != train[i].text;
    CHECK(differs);
}

TEST_CASE("split rejects single-label corpora and bad fractions") {
    std::vector<LabeledSequence> corpus = {{{1}, Stereotype::Male, "a"},
                                           {{2}, Stereotype::Male, "b"}};
    CHECK_THROWS_AS(split_balanced(corpus, 0.9, 1), std::invalid_argument);
    corpus.push_back({{3}, Stereotype::Female, "c"});
    CHECK_THROWS_AS(split_balanced(corpus, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_balanced(corpus, 0.0, 1), std::invalid_argument);
}

TEST_CASE("fine-tuning freezes everything outside the selection byte-for-byte") {
    const PlantedWorld w = small_world();
    Transformer model = construct_planted_model(w.spec, 1);
    const auto before = model.snapshot_params();
    const auto corpus = tiny_corpus(w.spec, 48, 3);

    const ParamSelection selection = head_parameter_selection(model, w.spec.planted_heads);
    const TrainHistory history = finetune(model, selection, corpus, quick_config(11));
    CHECK_FALSE(history.train_loss.empty());

    const auto& names = model.param_names();
    bool anything_changed = false;
    for (size_t p = 0; p < names.size(); ++p) {
        const auto& now = model.param(names[p]).values();
        const auto it = selection.masks.find(names[p]);
        for (size_t i = 0; i < now.size(); ++i) {
            const bool selected = it != selection.masks.end() && it->second[i];
            if (!selected) {
                CHECK(std::memcmp(&now[i], &before[p][i], sizeof(float)) == 0);
            } else {
                anything_changed = anything_changed || now[i] != before[p][i];
            }
        }
    }
    CHECK(anything_changed);
}

TEST_CASE("history records the best epoch as the validation minimum") {
    const PlantedWorld w = small_world();
    Transformer model = construct_planted_model(w.spec, 1);
    const auto corpus = tiny_corpus(w.spec, 48, 5);
    const TrainHistory history =
        finetune(model, baseline_selection_full(model), corpus, quick_config(13));
    REQUIRE(history.best_epoch >= 0);
    const double best = history.valid_loss[history.best_epoch];
    for (const double v : history.valid_loss) CHECK(best <= v);
    CHECK((history.stop_reason == "early-stopping" || history.stop_reason == "max-epochs"));
}

TEST_CASE("early stopping honors the patience window") {
    const PlantedWorld w = small_world();
    Transformer model = construct_planted_model(w.spec, 1);
    const auto corpus = tiny_corpus(w.spec, 32, 7);
    FineTuneConfig cfg = quick_config(17);
    cfg.lr = 0.5f;  // aggressively large: validation deteriorates quickly
    cfg.max_epochs = 30;
    cfg.patience = 2;
    const TrainHistory history = finetune(model, baseline_selection_full(model), corpus, cfg);
    if (history.stop_reason == "early-stopping")
        CHECK(static_cast<int>(history.valid_loss.size()) <= history.best_epoch + 1 + cfg.patience);
    CHECK(static_cast<int>(history.valid_loss.size()) < 30);
}

TEST_CASE("planted-head fine-tuning on the balanced corpus reduces the task metric") {
    const PlantedWorld w = small_world();
    Transformer model = construct_planted_model(w.spec, 1);
    const auto pairs = synthetic_pairs(w.spec, 12, 9);
    const double metric_before = std::fabs(task_metric(model, pairs));

    const auto corpus = tiny_corpus(w.spec, 64, 11);
    FineTuneConfig cfg = quick_config(19);
    cfg.lr = 1e-2f;
    cfg.max_epochs = 12;
    cfg.patience = 12;
    finetune(model, head_parameter_selection(model, w.spec.planted_heads), corpus, cfg);

    const double metric_after = std::fabs(task_metric(model, pairs));
    INFO("before ", metric_before, " after ", metric_after);
    CHECK(metric_after < metric_before);
}

TEST_CASE("fine-tune runs are deterministic given the seed") {
    const PlantedWorld w = small_world();
    const auto corpus = tiny_corpus(w.spec, 32, 13);
    Transformer a = construct_planted_model(w.spec, 1);
    Transformer b = construct_planted_model(w.spec, 1);
    const ParamSelection sel = head_parameter_selection(a, w.spec.planted_heads);
    finetune(a, sel, corpus, quick_config(23));
    finetune(b, sel, corpus, quick_config(23));
    for (const auto& name : a.param_names())
        CHECK(a.param(name).values() == b.param(name).values());
}

TEST_CASE("configuration and selection validation") {
    const PlantedWorld w = small_world();
    Transformer model = construct_planted_model(w.spec, 1);
    const auto corpus = tiny_corpus(w.spec, 16, 15);

    CHECK_THROWS_AS(finetune(model, ParamSelection{}, corpus, quick_config(1)),
                    std::invalid_argument);
    CHECK_THROWS_AS(finetune(model, baseline_selection_full(model), {}, quick_config(1)),
                    std::invalid_argument);
    FineTuneConfig bad = quick_config(1);
    bad.patience = 99;
    CHECK_THROWS_AS(finetune(model, baseline_selection_full(model), corpus, bad),
                    std::invalid_argument);
    bad = quick_config(1);
    bad.split_fraction = 1.5f;
    CHECK_THROWS_AS(finetune(model, baseline_selection_full(model), corpus, bad),
                    std::invalid_argument);
}

TEST_CASE("baseline selections cover the advertised slices") {
    const PlantedWorld w = small_world();
    Transformer model = construct_planted_model(w.spec, 1);

    const auto full = baseline_selection_full(model);
    size_t total = 0;
    for (const auto& name : model.param_names()) total += model.param(name).values().size();
    CHECK(full.count() == total);

    const auto last1 = baseline_selection_last_n_attn(model, 1);
    for (const auto& [name, mask] : last1.masks) CHECK(name.rfind("h1.attn.", 0) == 0);
    CHECK(last1.masks.size() == 7);  // wq bq wk bk wv bv wo
    CHECK_THROWS_AS(baseline_selection_last_n_attn(model, 3), std::invalid_argument);

    const auto all_attn = baseline_selection_all_attn(model);
    CHECK(all_attn.masks.size() == 14);

    const auto r1 = baseline_selection_random_heads(model, 2, w.spec.planted_heads, 31);
    const auto r2 = baseline_selection_random_heads(model, 2, w.spec.planted_heads, 31);
    CHECK(r1.masks == r2.masks);
    // exclusion leaves exactly the two non-planted heads -> their slices
    const auto excluded_slices = head_parameter_selection(
        model, {ComponentId::attn_head(0, 1), ComponentId::attn_head(1, 0)});
    CHECK(r1.masks == excluded_slices.masks);
    CHECK_THROWS_AS(baseline_selection_random_heads(model, 3, w.spec.planted_heads, 1),
                    std::invalid_argument);
}
