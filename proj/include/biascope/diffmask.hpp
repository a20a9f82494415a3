#pragma once

// DiffMask+: a dataset-global stochastic almost-binary mask over attention
// heads. Sampling uses the hard concrete distribution (a stretched, clamped
// binary concrete), so gates take exact 0/1 values with positive probability
// while staying differentiable through the clamp interior. Training splices
// counterfactual activations into the forward pass in proportion to the gate
// and optimizes task + lambda * (expected L0 - alpha) + beta * KL.

#include "biascope/cma.hpp"
#include "biascope/corpus.hpp"
#include "biascope/model.hpp"
#include "biascope/rng.hpp"

#include <filesystem>
#include <vector>

namespace biascope {

struct HardConcrete {
    Tensor location;  // unconstrained logits z, one per masked component
    float temperature = 2.0f / 3.0f;
    float gamma = -0.1f;  // stretch lower bound (< 0)
    float zeta = 1.1f;    // stretch upper bound (> 1)

    int size() const { return static_cast<int>(location.numel()); }
    static HardConcrete init(int k);  // z = 0, i.e. E[m] = 0.5 per gate
};

struct MaskParams {
    HardConcrete dist;
    float lambda = 0.0f;  // Lagrange multiplier, projected to [0, inf)
    float alpha = 1.0f;   // target number of open gates
    float beta = 1.0f;    // KL weight
};

// Per gate: P(m != 0) = sigmoid(z - temperature * log(-gamma/zeta)) in
// closed form, and the exact expected gate value E[m] via deterministic
// quadrature over the noise (binarization thresholds on it; the crossing
// point at 0.5 coincides with the plain stretched-sigmoid estimator).
std::vector<double> expected_nonzero(const MaskParams& params);
std::vector<double> expected_mask_value(const MaskParams& params);

// One stochastic mask draw (value level, for Monte Carlo checks).
std::vector<double> sample_mask_values(const MaskParams& params, Rng& rng);

// Differentiable draw given pre-sampled logistic noise (log u - log(1-u)).
Tensor sample_mask_graph(Tape& tape, const HardConcrete& dist,
                         const std::vector<double>& logistic_noise);
Tensor expected_nonzero_graph(Tape& tape, const HardConcrete& dist);

struct MaskedForwardResult {
    Tensor masked_logits;  // [S, V], differentiable w.r.t. the mask
    Tensor base_logits;    // [S, V], unmasked forward on x
};

// Runs x_cf to cache counterfactual outputs, then x with each masked
// component's output replaced by (1 - m_i) * h_i + m_i * h~_i. Extra
// interventions, when given, apply before the mask mixing (the full-swap
// oracle swaps the embedding this way).
MaskedForwardResult masked_forward(Tape& tape, const Transformer& model, const MinimalPair& pair,
                                   const Tensor& mask,
                                   const std::vector<ComponentId>& masked_components,
                                   PositionScope scope = PositionScope::FinalOnly,
                                   const InterventionSpec* extra = nullptr);

struct DiffMaskLoss {
    Tensor task;      // p~(y_stereo) / p~(y_anti), computed in log space
    Tensor sparsity;  // lambda * (sum_i P(m_i != 0) - alpha)
    Tensor kl;        // beta * KL(p || p~) at the final position
    Tensor total;
};

DiffMaskLoss diffmask_loss(Tape& tape, const Tensor& masked_final_logits,
                           const Tensor& base_final_probs, int y_stereo, int y_anti,
                           const MaskParams& params);

struct MaskTrainOptions {
    float alpha = 10.0f;
    float beta = 1.0f;
    int epochs = 200;
    float lr_z = 1e-3f;
    float lr_lambda = 1e-2f;
    uint64_t seed = 0;
    PositionScope scope = PositionScope::FinalOnly;
};

struct MaskEpochStats {
    double task = 0, sparsity = 0, kl = 0, total = 0;
    double expected_l0 = 0;
    double lambda = 0;
};

struct MaskTrainReport {
    std::vector<MaskEpochStats> epochs;
    std::vector<ComponentId> components;  // mask slot -> component
    std::vector<double> expected_mask;
    std::vector<ComponentId> selected;  // E[m] >= 0.5
    bool diverged = false;
    MaskParams params;
};

// Per-example stochastic steps: adaptive-moment descent on z, projected
// ascent on lambda. The model is frozen throughout.
MaskTrainReport train_mask(const Transformer& model, const std::vector<MinimalPair>& dataset,
                           const MaskTrainOptions& options);

struct BinarizeResult {
    std::vector<uint8_t> mask;  // deterministic gate per component
    std::vector<ComponentId> selected;
};

BinarizeResult binarize(const MaskParams& params, const std::vector<ComponentId>& components);

// Top-n components by expected mask value (the reported head set).
std::vector<RankedEntry> top_mask_components(const MaskParams& params,
                                             const std::vector<ComponentId>& components, int n,
                                             int n_examples);

void save_mask_report(const std::filesystem::path& path, const MaskTrainReport& report);

}  // namespace biascope
