#pragma once

// Shared finite-difference cases for every autograd primitive, used by the
// unit tests and by the acceptance suite (which runs them at full count).
// Checks run on the f64 instantiation: the derivative formulas under test
// are identical to the f32 build, without f32 rounding noise drowning the
// comparison.

#include "biascope/gradcheck.hpp"
#include "biascope/ops.hpp"
#include "biascope/rng.hpp"

#include <functional>
#include <string>
#include <vector>

namespace gradcases {

using biascope::ProgramT;
using biascope::Rng;
using D = biascope::TensorT<double>;
using TapeD = biascope::TapeT<double>;
namespace ops = biascope::ops;

struct PrimitiveCase {
    std::string name;
    double step = 1e-3;
    double tolerance = 1e-4;
    // Fresh random inputs for one check instance.
    std::function<std::vector<D>(Rng&)> make_inputs;
    ProgramT<double> program;
};

inline D rand_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -2.0, double hi = 2.0) {
    D t = D::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline D rand_probs(Rng& rng, int64_t n) {
    // Softmax of a mild range keeps entries comfortably positive.
    D t = rand_tensor(rng, {n}, -1.0, 1.0);
    double mx = t.values()[0];
    for (const double v : t.values()) mx = std::max(mx, v);
    double denom = 0;
    for (auto& v : t.values()) {
        v = std::exp(v - mx);
        denom += v;
    }
    for (auto& v : t.values()) v /= denom;
    return t;
}

// Scalar-valued wrapper: reduces any output through sum-of-squares-like
// weighting so every output element influences the check.
inline D to_scalar(TapeD& tape, const D& x) {
    return ops::sum(tape, ops::mul(tape, x, ops::add_scalar(tape, x, 0.25)));
}

inline std::vector<PrimitiveCase> primitive_cases() {
    std::vector<PrimitiveCase> cases;

    cases.push_back({"matmul", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {3, 4}), rand_tensor(r, {4, 2})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::matmul(t, in[0], in[1]));
                     }});
    cases.push_back({"matmul_nt", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {3, 4}), rand_tensor(r, {2, 4})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::matmul_nt(t, in[0], in[1]));
                     }});
    cases.push_back({"add", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {2, 5}), rand_tensor(r, {2, 5})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::add(t, in[0], in[1]));
                     }});
    cases.push_back({"sub", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {2, 5}), rand_tensor(r, {2, 5})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::sub(t, in[0], in[1]));
                     }});
    cases.push_back({"mul", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {2, 5}), rand_tensor(r, {2, 5})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::mul(t, in[0], in[1]));
                     }});
    cases.push_back({"add_rowvec", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {3, 4}), rand_tensor(r, {4})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::add_rowvec(t, in[0], in[1]));
                     }});
    cases.push_back({"mul_bcast_scalar", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {2, 3}), rand_tensor(r, {1})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::mul_bcast_scalar(t, in[0], in[1]));
                     }});
    cases.push_back({"softmax", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {3, 5})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::softmax_rows(t, in[0]));
                     }});
    cases.push_back({"layer_norm", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {3, 6}), rand_tensor(r, {6}),
                                               rand_tensor(r, {6})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::layer_norm(t, in[0], in[1], in[2]));
                     }});
    cases.push_back({"gelu", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {2, 6})}; },
                     [](TapeD& t, std::vector<D>& in) { return to_scalar(t, ops::gelu(t, in[0])); }});
    cases.push_back({"embedding", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {5, 3})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         const std::vector<int> ids = {1, 4, 1, 0};
                         return to_scalar(t, ops::embedding(t, in[0], ids));
                     }});
    cases.push_back({"sigmoid", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {2, 6})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::sigmoid(t, in[0]));
                     }});
    cases.push_back({"exp", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {2, 6})}; },
                     [](TapeD& t, std::vector<D>& in) { return to_scalar(t, ops::exp(t, in[0])); }});
    cases.push_back({"log", 1e-4, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {2, 6}, 0.5, 2.5)}; },
                     [](TapeD& t, std::vector<D>& in) { return to_scalar(t, ops::log(t, in[0])); }});
    // Clamp has gradient kinks at the bounds; sampled inputs stay clear of
    // them by more than the step.
    cases.push_back({"clamp", 1e-3, 1e-4,
                     [](Rng& r) {
                         D t = D::zeros({6});
                         for (auto& v : t.values()) {
                             v = r.uniform(-2.0, 2.0);
                             if (std::fabs(std::fabs(v) - 1.0) < 0.01) v = 0.5;
                         }
                         return std::vector<D>{t};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::clamp(t, in[0], -1.0, 1.0));
                     }});
    cases.push_back({"cross_entropy", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {4, 6})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         const std::vector<int> targets = {0, 3, 5, 2};
                         return ops::cross_entropy(t, in[0], targets);
                     }});
    cases.push_back({"kl_divergence", 1e-4, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_probs(r, 6), rand_probs(r, 6)};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return ops::kl_divergence(t, in[0], in[1]);
                     }});
    cases.push_back({"sum", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {3, 4})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         return ops::sum(t, ops::mul(t, in[0], in[0]));
                     }});
    cases.push_back({"select_row", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {4, 5})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::select_row(t, in[0], 2));
                     }});
    cases.push_back({"set_row", 1e-3, 1e-4,
                     [](Rng& r) {
                         return std::vector<D>{rand_tensor(r, {4, 5}), rand_tensor(r, {5})};
                     },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::set_row(t, in[0], 1, in[1]));
                     }});
    cases.push_back({"slice_cols", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {3, 6})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::slice_cols(t, in[0], 1, 4));
                     }});
    cases.push_back({"slice_rows", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {5, 3})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         return to_scalar(t, ops::slice_rows(t, in[0], 1, 4));
                     }});
    cases.push_back({"gather_scalar", 1e-3, 1e-4,
                     [](Rng& r) { return std::vector<D>{rand_tensor(r, {7})}; },
                     [](TapeD& t, std::vector<D>& in) {
                         return ops::exp(t, ops::gather_scalar(t, in[0], 3));
                     }});
    return cases;
}

struct PrimitiveCheckResult {
    std::string name;
    double worst_rel_err = 0.0;
    bool pass = true;
};

inline std::vector<PrimitiveCheckResult> run_primitive_checks(int cases_per_primitive,
                                                              uint64_t seed = 2024) {
    std::vector<PrimitiveCheckResult> results;
    Rng rng(seed);
    for (const auto& c : primitive_cases()) {
        PrimitiveCheckResult r;
        r.name = c.name;
        for (int i = 0; i < cases_per_primitive; ++i) {
            const auto report =
                biascope::finite_diff_check<double>(c.program, c.make_inputs(rng), c.step,
                                                    c.tolerance);
            r.worst_rel_err = std::max(r.worst_rel_err, report.max_rel_err);
            r.pass = r.pass && report.pass;
        }
        results.push_back(r);
    }
    return results;
}

// Random compositions of five primitives ending in a scalar reduction.
inline ProgramT<double> random_composite(uint64_t seed) {
    return [seed](TapeD& tape, std::vector<D>& in) {
        Rng rng(seed);
        D x = in[0];  // [2,3]
        for (int step = 0; step < 5; ++step) {
            switch (rng.below(7)) {
                case 0: x = ops::gelu(tape, x); break;
                case 1: x = ops::sigmoid(tape, x); break;
                case 2: x = ops::exp(tape, ops::mul_scalar(tape, x, 0.4)); break;
                case 3: x = ops::softmax_rows(tape, x); break;
                case 4: x = ops::matmul(tape, x, in[1]); break;  // [3,3] weight
                case 5: x = ops::mul(tape, x, x); break;
                case 6: x = ops::add_rowvec(tape, x, in[2]); break;
            }
        }
        return ops::sum(tape, x);
    };
}

}  // namespace gradcases
