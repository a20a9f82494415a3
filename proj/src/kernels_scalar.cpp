// Scalar reference kernels. Every other backend is tested against these.
// This translation unit is built without target-specific ISA flags and with
// FP contraction disabled so the reference semantics are plain IEEE f32
// (one rounding per arithmetic op, sequential reduction order).

#include "biascope/kernels.hpp"

#include <cmath>

namespace biascope::kernels {
namespace {

void s_add(const float* a, const float* b, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

void s_sub(const float* a, const float* b, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}

void s_mul(const float* a, const float* b, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

void s_madd(const float* a, const float* b, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

void s_axpy(float alpha, const float* x, float* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void s_scale(const float* x, float alpha, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = alpha * x[i];
}

float s_dot(const float* a, const float* b, size_t n) {
    float acc = 0.0f;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double s_sum(const float* x, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

double s_sumsq(const float* x, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * x[i];
    return acc;
}

float s_maxval(const float* x, size_t n) {
    float m = x[0];
    for (size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
    return m;
}

void s_vexp(const float* x, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = std::exp(x[i]);
}

void s_vsigmoid(const float* x, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void s_vtanh(const float* x, float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = std::tanh(x[i]);
}

void s_gemm_nn(const float* a, const float* b, float* c,
               size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        if (!acc) {
            for (size_t j = 0; j < n; ++j) crow[j] = 0.0f;
        }
        const float* arow = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void s_gemm_nt(const float* a, const float* b, float* c,
               size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const float v = s_dot(arow, b + j * k, k);
            c[i * n + j] = acc ? c[i * n + j] + v : v;
        }
    }
}

void s_gemm_tn(const float* a, const float* b, float* c,
               size_t m, size_t k, size_t n, bool acc) {
    if (!acc) {
        for (size_t i = 0; i < m * n; ++i) c[i] = 0.0f;
    }
    for (size_t p = 0; p < k; ++p) {
        const float* arow = a + p * m;
        const float* brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            const float av = arow[i];
            float* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops ops = {
        "scalar",
        s_add, s_sub, s_mul, s_madd,
        s_axpy, s_scale,
        s_dot,
        s_sum, s_sumsq, s_maxval,
        s_vexp, s_vsigmoid, s_vtanh,
        s_gemm_nn, s_gemm_nt, s_gemm_tn,
    };
    return ops;
}

}  // namespace biascope::kernels
