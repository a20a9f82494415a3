#pragma once

// Finite-difference verification harness. A Program is a closure from
// (tape, inputs) to a scalar tensor; finite_diff_check compares the tape
// gradient of every input element against central differences.

#include "biascope/ops.hpp"
#include "biascope/tensor.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace biascope {

template <typename T>
using ProgramT = std::function<TensorT<T>(TapeT<T>&, std::vector<TensorT<T>>&)>;

template <typename T>
TensorT<T> evaluate(const ProgramT<T>& program, std::vector<TensorT<T>> inputs) {
    TapeT<T> tape;
    return program(tape, inputs);
}

struct GradCheckReport {
    struct PerInput {
        double max_rel_err = 0.0;
        bool pass = true;
    };
    std::vector<PerInput> inputs;
    double max_rel_err = 0.0;
    bool pass = true;
};

// Relative error with a unit floor, so near-zero gradients are compared
// absolutely: |a - n| / max(|a|, |n|, 1).
inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1.0});
    return std::fabs(analytic - numeric) / denom;
}

template <typename T>
GradCheckReport finite_diff_check(const ProgramT<T>& program, std::vector<TensorT<T>> inputs,
                                  double step, double tolerance) {
    // Analytic pass.
    std::vector<TensorT<T>> tracked;
    tracked.reserve(inputs.size());
    for (const auto& in : inputs) tracked.push_back(in.clone_detached().set_requires_grad(true));
    TapeT<T> tape;
    TensorT<T> out = program(tape, tracked);
    if (out.numel() != 1)
        throw std::invalid_argument("finite_diff_check: program must be scalar-valued, got " +
                                    shape_str(out.shape));
    tape.backward(out);

    auto eval_at = [&](const std::vector<TensorT<T>>& pts) {
        std::vector<TensorT<T>> frozen;
        frozen.reserve(pts.size());
        for (const auto& p : pts) frozen.push_back(p.clone_detached());
        TapeT<T> t;
        return static_cast<double>(program(t, frozen).item());
    };

    GradCheckReport report;
    report.inputs.resize(inputs.size());
    std::vector<TensorT<T>> probe;
    probe.reserve(inputs.size());
    for (const auto& in : inputs) probe.push_back(in.clone_detached());
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& slot = report.inputs[k];
        for (int64_t i = 0; i < inputs[k].numel(); ++i) {
            const T saved = probe[k].ptr()[i];
            probe[k].ptr()[i] = saved + static_cast<T>(step);
            const double fp = eval_at(probe);
            probe[k].ptr()[i] = saved - static_cast<T>(step);
            const double fm = eval_at(probe);
            probe[k].ptr()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = tracked[k].grad_ref()[i];
            slot.max_rel_err = std::max(slot.max_rel_err, rel_err(analytic, numeric));
        }
        slot.pass = slot.max_rel_err <= tolerance;
        report.max_rel_err = std::max(report.max_rel_err, slot.max_rel_err);
        report.pass = report.pass && slot.pass;
    }
    return report;
}

}  // namespace biascope
