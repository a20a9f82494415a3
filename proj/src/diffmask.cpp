#include "biascope/diffmask.hpp"

#include "biascope/ops.hpp"
#include "biascope/optim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace biascope {

using nlohmann::json;

HardConcrete HardConcrete::init(int k) {
    HardConcrete dist;
    dist.location = Tensor::zeros({k});
    return dist;
}

namespace {

double gate_shift(const HardConcrete& d) {
    return d.temperature * std::log(-static_cast<double>(d.gamma) / d.zeta);
}

}  // namespace

std::vector<double> expected_nonzero(const MaskParams& params) {
    const HardConcrete& d = params.dist;
    const double shift = gate_shift(d);
    std::vector<double> out(d.size());
    for (int i = 0; i < d.size(); ++i)
        out[i] = 1.0 / (1.0 + std::exp(-(static_cast<double>(d.location.ptr()[i]) - shift)));
    return out;
}

std::vector<double> expected_mask_value(const MaskParams& params) {
    // Exact expectation of the clamped stretched sample, by midpoint
    // quadrature over the uniform noise. The integrand saturates at the
    // clamp bounds, so a moderate grid is already far inside the Monte
    // Carlo tolerance. At the binarization threshold this agrees with the
    // plain stretched-sigmoid estimator: both cross 0.5 exactly at z = 0.
    constexpr int kGrid = 8192;
    const HardConcrete& d = params.dist;
    std::vector<double> out(d.size());
    for (int i = 0; i < d.size(); ++i) {
        const double z = d.location.ptr()[i];
        double acc = 0.0;
        for (int g = 0; g < kGrid; ++g) {
            const double u = (g + 0.5) / kGrid;
            const double noise = std::log(u) - std::log1p(-u);
            const double s = 1.0 / (1.0 + std::exp(-(noise + z) / d.temperature));
            acc += std::clamp(s * (d.zeta - d.gamma) + d.gamma, 0.0, 1.0);
        }
        out[i] = acc / kGrid;
    }
    return out;
}

std::vector<double> sample_mask_values(const MaskParams& params, Rng& rng) {
    const HardConcrete& d = params.dist;
    std::vector<double> out(d.size());
    for (int i = 0; i < d.size(); ++i) {
        const double u = rng.uniform_open01();
        const double noise = std::log(u) - std::log1p(-u);
        const double s =
            1.0 / (1.0 + std::exp(-(noise + d.location.ptr()[i]) / d.temperature));
        out[i] = std::clamp(s * (d.zeta - d.gamma) + d.gamma, 0.0, 1.0);
    }
    return out;
}

Tensor sample_mask_graph(Tape& tape, const HardConcrete& dist,
                         const std::vector<double>& logistic_noise) {
    if (static_cast<int>(logistic_noise.size()) != dist.size())
        throw ShapeError("sample_mask: noise size " + std::to_string(logistic_noise.size()) +
                         " vs mask size " + std::to_string(dist.size()));
    Tensor noise = Tensor::zeros({dist.size()});
    for (int i = 0; i < dist.size(); ++i) noise.ptr()[i] = static_cast<float>(logistic_noise[i]);
    Tensor s = ops::sigmoid(
        tape, ops::mul_scalar(tape, ops::add(tape, dist.location, noise), 1.0f / dist.temperature));
    Tensor stretched =
        ops::add_scalar(tape, ops::mul_scalar(tape, s, dist.zeta - dist.gamma), dist.gamma);
    return ops::clamp(tape, stretched, 0.0f, 1.0f);
}

Tensor expected_nonzero_graph(Tape& tape, const HardConcrete& dist) {
    return ops::sigmoid(
        tape, ops::add_scalar(tape, dist.location, static_cast<float>(-gate_shift(dist))));
}

MaskedForwardResult masked_forward(Tape& tape, const Transformer& model, const MinimalPair& pair,
                                   const Tensor& mask,
                                   const std::vector<ComponentId>& masked_components,
                                   PositionScope scope, const InterventionSpec* extra) {
    if (mask.numel() != static_cast<int64_t>(masked_components.size()))
        throw ShapeError("masked_forward: mask of " + std::to_string(mask.numel()) +
                         " entries vs " + std::to_string(masked_components.size()) +
                         " masked components");
    const ComponentIndex& index = model.components();
    std::vector<int> slot(index.count(), -1);
    for (size_t i = 0; i < masked_components.size(); ++i)
        slot[index.index_of(masked_components[i])] = static_cast<int>(i);

    const std::vector<uint8_t> cf_mask = pair.x_cf_key_mask();
    ForwardOptions cf_opts;
    cf_opts.capture = true;
    cf_opts.key_mask = &cf_mask;
    const ActivationCache cf_cache = model.forward(pair.x_cf, cf_opts).cache;

    const std::vector<uint8_t> x_mask = pair.x_key_mask();
    ForwardOptions base_opts;
    base_opts.key_mask = &x_mask;
    MaskedForwardResult result;
    result.base_logits = model.forward(pair.x, base_opts).logits;

    const int seq_len = static_cast<int>(pair.x.size());
    const int d = model.config().d_model;
    ForwardOptions masked_opts;
    masked_opts.key_mask = &x_mask;
    masked_opts.interventions = extra;
    masked_opts.hook = [&](Tape& t, const ComponentId& id, const Tensor& write) -> Tensor {
        const int s = slot[index.index_of(id)];
        if (s < 0) return write;
        const Tensor gate = ops::gather_scalar(t, mask, s);
        if (scope == PositionScope::AllPositions) {
            Tensor cf = Tensor::zeros({seq_len, d});
            for (int p = 0; p < seq_len; ++p)
                std::copy_n(cf_cache.at(index.index_of(id), p), d, cf.ptr() + p * d);
            return ops::add(t, write, ops::mul_bcast_scalar(t, ops::sub(t, cf, write), gate));
        }
        Tensor cf_row = Tensor::zeros({d});
        std::copy_n(cf_cache.at(index.index_of(id), seq_len - 1), d, cf_row.ptr());
        const Tensor row = ops::select_row(t, write, seq_len - 1);
        const Tensor mixed =
            ops::add(t, row, ops::mul_bcast_scalar(t, ops::sub(t, cf_row, row), gate));
        return ops::set_row(t, write, seq_len - 1, mixed);
    };
    result.masked_logits = model.forward(tape, pair.x, masked_opts).logits;
    return result;
}

DiffMaskLoss diffmask_loss(Tape& tape, const Tensor& masked_final_logits,
                           const Tensor& base_final_probs, int y_stereo, int y_anti,
                           const MaskParams& params) {
    if (masked_final_logits.ndim() != 1 || base_final_probs.ndim() != 1)
        throw ShapeError("diffmask_loss: expects final-position vectors");
    DiffMaskLoss loss;
    // log p~(y_stereo) - log p~(y_anti) == logit difference; the ratio is
    // exponentiated with a clamped exponent for overflow-safe gradients.
    const Tensor diff = ops::sub(tape, ops::gather_scalar(tape, masked_final_logits, y_stereo),
                                 ops::gather_scalar(tape, masked_final_logits, y_anti));
    loss.task = ops::exp(tape, ops::clamp(tape, diff, -20.0f, 20.0f));

    const Tensor pnz = expected_nonzero_graph(tape, params.dist);
    loss.sparsity = ops::mul_scalar(
        tape, ops::add_scalar(tape, ops::sum(tape, pnz), -params.alpha), params.lambda);

    const Tensor masked_probs = ops::softmax_rows(tape, masked_final_logits);
    loss.kl =
        ops::mul_scalar(tape, ops::kl_divergence(tape, base_final_probs, masked_probs), params.beta);

    loss.total = ops::add(tape, ops::add(tape, loss.task, loss.sparsity), loss.kl);
    return loss;
}

namespace {

Tensor final_probs(const Tensor& logits) {
    Tape tape;
    const Tensor row = ops::select_row(tape, logits, logits.shape[0] - 1);
    return ops::softmax_rows(tape, row);
}

}  // namespace

MaskTrainReport train_mask(const Transformer& model, const std::vector<MinimalPair>& dataset,
                           const MaskTrainOptions& options) {
    if (dataset.empty()) throw std::invalid_argument("train_mask: empty dataset");
    MaskTrainReport report;
    report.components = model.components().attention_heads();
    const int k = static_cast<int>(report.components.size());

    MaskParams params;
    params.dist = HardConcrete::init(k);
    params.dist.location.set_requires_grad(true);
    params.alpha = options.alpha;
    params.beta = options.beta;
    params.lambda = 0.0f;

    AdamState adam;
    AdamConfig adam_cfg;
    const Rng base(options.seed);
    Rng noise_rng = base.stream("mask-noise");

    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < options.epochs && !report.diverged; ++epoch) {
        Rng shuffle_rng = base.stream("mask-shuffle", epoch);
        shuffle_rng.shuffle(order);
        MaskEpochStats stats;
        for (const size_t idx : order) {
            const MinimalPair& pair = dataset[idx];
            std::vector<double> noise(k);
            for (int i = 0; i < k; ++i) {
                const double u = noise_rng.uniform_open01();
                noise[i] = std::log(u) - std::log1p(-u);
            }
            Tape tape;
            const Tensor mask = sample_mask_graph(tape, params.dist, noise);
            const MaskedForwardResult fw =
                masked_forward(tape, model, pair, mask, report.components, options.scope);
            const Tensor base_p = final_probs(fw.base_logits);
            const Tensor masked_final =
                ops::select_row(tape, fw.masked_logits, fw.masked_logits.shape[0] - 1);
            DiffMaskLoss loss =
                diffmask_loss(tape, masked_final, base_p, pair.y_stereo, pair.y_anti, params);

            const double total = loss.total.item();
            if (!std::isfinite(total)) {
                report.diverged = true;
                break;
            }
            stats.task += loss.task.item();
            stats.sparsity += loss.sparsity.item();
            stats.kl += loss.kl.item();
            stats.total += total;

            tape.backward(loss.total);
            adamw_step(adam, std::span<float>(params.dist.location.values()),
                       std::span<const float>(params.dist.location.grad_ref()), options.lr_z,
                       adam_cfg);
            params.dist.location.zero_grad();

            const auto pnz = expected_nonzero(params);
            const double excess =
                std::accumulate(pnz.begin(), pnz.end(), 0.0) - params.alpha;
            params.lambda =
                std::max(0.0f, params.lambda + options.lr_lambda * static_cast<float>(excess));
        }
        const double n = static_cast<double>(dataset.size());
        stats.task /= n;
        stats.sparsity /= n;
        stats.kl /= n;
        stats.total /= n;
        const auto pnz = expected_nonzero(params);
        stats.expected_l0 = std::accumulate(pnz.begin(), pnz.end(), 0.0);
        stats.lambda = params.lambda;
        report.epochs.push_back(stats);
    }

    report.expected_mask = expected_mask_value(params);
    report.selected = binarize(params, report.components).selected;
    report.params = std::move(params);
    return report;
}

BinarizeResult binarize(const MaskParams& params, const std::vector<ComponentId>& components) {
    if (static_cast<int>(components.size()) != params.dist.size())
        throw ShapeError("binarize: component list does not match mask size");
    const auto em = expected_mask_value(params);
    BinarizeResult result;
    result.mask.resize(components.size());
    for (size_t i = 0; i < components.size(); ++i) {
        result.mask[i] = em[i] >= 0.5 ? 1 : 0;
        if (result.mask[i]) result.selected.push_back(components[i]);
    }
    return result;
}

std::vector<RankedEntry> top_mask_components(const MaskParams& params,
                                             const std::vector<ComponentId>& components, int n,
                                             int n_examples) {
    if (n < 0 || static_cast<size_t>(n) > components.size())
        throw std::invalid_argument("top_mask_components: bad n");
    const auto em = expected_mask_value(params);
    std::vector<size_t> idx(components.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        if (em[a] != em[b]) return em[a] > em[b];
        return components[a] < components[b];
    });
    std::vector<RankedEntry> out;
    for (int i = 0; i < n; ++i)
        out.push_back({components[idx[i]], em[idx[i]], n_examples});
    return out;
}

void save_mask_report(const std::filesystem::path& path, const MaskTrainReport& report) {
    json epochs = json::array();
    for (const auto& e : report.epochs)
        epochs.push_back({{"task", e.task},
                          {"sparsity", e.sparsity},
                          {"kl", e.kl},
                          {"total", e.total},
                          {"expected_l0", e.expected_l0},
                          {"lambda", e.lambda}});
    json components = json::array();
    for (const auto& c : report.components) components.push_back(component_str(c));
    json selected = json::array();
    for (const auto& c : report.selected) selected.push_back(component_str(c));
    const json j = {{"epochs", epochs},
                    {"components", components},
                    {"expected_mask", report.expected_mask},
                    {"selected", selected},
                    {"diverged", report.diverged}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write mask report " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace biascope
