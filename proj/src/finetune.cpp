#include "biascope/finetune.hpp"

#include "biascope/ops.hpp"
#include "biascope/optim.hpp"
#include "biascope/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace biascope {

using nlohmann::json;

void FineTuneConfig::validate() const {
    if (!(split_fraction > 0.0f && split_fraction < 1.0f))
        throw std::invalid_argument("finetune: split_fraction must be in (0, 1)");
    if (max_epochs < 1) throw std::invalid_argument("finetune: max_epochs must be >= 1");
    if (patience < 1 || patience > max_epochs)
        throw std::invalid_argument("finetune: patience must be in [1, max_epochs]");
    if (batch_size < 1) throw std::invalid_argument("finetune: batch_size must be >= 1");
    if (!(lr > 0.0f)) throw std::invalid_argument("finetune: lr must be > 0");
    if (weight_decay < 0.0f) throw std::invalid_argument("finetune: negative weight_decay");
}

std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> split_balanced(
    const std::vector<LabeledSequence>& corpus, double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("split_balanced: fraction must be in (0, 1)");
    std::vector<LabeledSequence> male, female;
    for (const auto& s : corpus)
        (s.label == Stereotype::Male ? male : female).push_back(s);
    if (male.empty() || female.empty())
        throw std::invalid_argument("split_balanced: corpus carries a single label only");

    Rng rng = Rng(seed).stream("split");
    std::vector<LabeledSequence> train, valid;
    for (auto* group : {&male, &female}) {
        rng.shuffle(*group);
        const size_t n_train =
            static_cast<size_t>(std::llround(fraction * static_cast<double>(group->size())));
        for (size_t i = 0; i < group->size(); ++i)
            (i < n_train ? train : valid).push_back(std::move((*group)[i]));
    }
    return {std::move(train), std::move(valid)};
}

namespace {

// Mean next-token NLL for one sequence; the final position has no target.
double sequence_loss(const Transformer& model, const std::vector<int>& tokens,
                     bool with_grad) {
    if (tokens.size() < 2)
        throw std::invalid_argument("finetune: sequences need at least two tokens");
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    targets.push_back(-1);  // ignored
    Tape tape;
    const ForwardResult fw = model.forward(tape, tokens);
    Tensor loss = ops::cross_entropy(tape, fw.logits, targets, -1);
    const double value = loss.item();
    if (with_grad && loss.requires_grad) tape.backward(loss);
    return value;
}

double mean_valid_loss(const Transformer& model, const std::vector<LabeledSequence>& valid) {
    double acc = 0.0;
    for (const auto& s : valid) acc += sequence_loss(model, s.tokens, false);
    return acc / static_cast<double>(valid.size());
}

}  // namespace

TrainHistory finetune(Transformer& model, const ParamSelection& selection,
                      const std::vector<LabeledSequence>& corpus, const FineTuneConfig& config) {
    config.validate();
    if (selection.empty()) throw std::invalid_argument("finetune: empty parameter selection");
    if (corpus.empty()) throw std::invalid_argument("finetune: empty corpus");
    for (const auto& [name, mask] : selection.masks) {
        if (mask.size() != model.param(name).values().size())
            throw std::invalid_argument("finetune: selection mask shape mismatch for " + name);
    }

    auto [train, valid] = split_balanced(corpus, config.split_fraction, config.seed);
    if (train.empty() || valid.empty())
        throw std::invalid_argument("finetune: split produced an empty partition");

    // Gradients are only needed where updates can land.
    model.set_requires_grad(false);
    for (const auto& [name, mask] : selection.masks) model.param(name).set_requires_grad(true);

    std::map<std::string, AdamState> states;
    AdamConfig adam_cfg;
    adam_cfg.weight_decay = config.weight_decay;

    TrainHistory history;
    std::vector<std::vector<float>> best_snapshot = model.snapshot_params();
    double best_valid = std::numeric_limits<double>::infinity();
    const Rng base(config.seed);

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        const float lr = config.schedule == LrSchedule::Linear
                             ? config.lr * static_cast<float>(config.max_epochs - epoch) /
                                   static_cast<float>(config.max_epochs)
                             : config.lr;
        Rng shuffle_rng = base.stream("batch-shuffle", epoch);
        shuffle_rng.shuffle(order);

        double train_acc = 0.0;
        size_t done = 0;
        while (done < order.size()) {
            const size_t batch_end = std::min(done + config.batch_size, order.size());
            model.zero_grad();
            for (size_t i = done; i < batch_end; ++i)
                train_acc += sequence_loss(model, train[order[i]].tokens, true);
            for (const auto& [name, mask] : selection.masks) {
                Tensor& p = model.param(name);
                adamw_step(states[name], std::span<float>(p.values()),
                           std::span<const float>(p.grad_ref()), lr, adam_cfg, mask.data());
            }
            done = batch_end;
        }
        history.train_loss.push_back(train_acc / static_cast<double>(train.size()));
        const double vloss = mean_valid_loss(model, valid);
        history.valid_loss.push_back(vloss);

        if (vloss < best_valid) {
            best_valid = vloss;
            history.best_epoch = epoch;
            best_snapshot = model.snapshot_params();
        } else if (epoch - history.best_epoch >= config.patience) {
            history.stop_reason = "early-stopping";
            break;
        }
    }
    if (history.stop_reason.empty()) history.stop_reason = "max-epochs";

    model.restore_params(best_snapshot);
    model.set_requires_grad(false);
    return history;
}

ParamSelection baseline_selection_full(const Transformer& model) {
    ParamSelection sel;
    for (const auto& name : model.param_names())
        sel.masks[name].assign(model.param(name).values().size(), 1);
    return sel;
}

namespace {

void select_layer_attention(ParamSelection& sel, const Transformer& model, int layer) {
    const std::string pre = "h" + std::to_string(layer) + ".attn.";
    for (const char* n : {"wq", "bq", "wk", "bk", "wv", "bv", "wo"})
        sel.masks[pre + n].assign(model.param(pre + n).values().size(), 1);
}

}  // namespace

ParamSelection baseline_selection_all_attn(const Transformer& model) {
    ParamSelection sel;
    for (int l = 0; l < model.config().n_layers; ++l) select_layer_attention(sel, model, l);
    return sel;
}

ParamSelection baseline_selection_last_n_attn(const Transformer& model, int n) {
    if (n < 1 || n > model.config().n_layers)
        throw std::invalid_argument("last-n selection: n exceeds layer count");
    ParamSelection sel;
    for (int l = model.config().n_layers - n; l < model.config().n_layers; ++l)
        select_layer_attention(sel, model, l);
    return sel;
}

ParamSelection baseline_selection_random_heads(const Transformer& model, int n,
                                               const std::vector<ComponentId>& excluded,
                                               uint64_t seed) {
    std::set<std::pair<int, int>> banned;
    for (const auto& id : excluded) {
        model.components().index_of(id);  // validates
        if (id.kind == ComponentKind::AttnHead) banned.insert({id.layer, id.head});
    }
    std::vector<ComponentId> pool;
    for (const auto& id : model.components().attention_heads())
        if (!banned.count({id.layer, id.head})) pool.push_back(id);
    if (n < 1 || static_cast<size_t>(n) > pool.size())
        throw std::invalid_argument("random-heads selection: n exceeds available heads");
    Rng rng = Rng(seed).stream("random-heads");
    rng.shuffle(pool);
    pool.resize(n);
    std::sort(pool.begin(), pool.end());
    return head_parameter_selection(model, pool);
}

std::string history_to_json(const TrainHistory& history) {
    const json j = {{"train_loss", history.train_loss},
                    {"valid_loss", history.valid_loss},
                    {"best_epoch", history.best_epoch},
                    {"stop_reason", history.stop_reason}};
    return j.dump(2);
}

}  // namespace biascope
