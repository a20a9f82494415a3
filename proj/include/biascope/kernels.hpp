#pragma once

#include <cstddef>
#include <string>

namespace biascope::kernels {

// Function table for the f32 inner loops. Two backends ship: a scalar
// reference implementation and an AVX2+FMA variant selected at runtime.
// Elementwise kernels are bit-identical across backends; reductions and
// GEMMs may differ by rounding (lane reassociation, FMA) and are
// equivalence-tested against the scalar reference under a tolerance.
struct Ops {
    const char* name;

    // dst = a + b / a - b / a * b ; dst += a * b
    void (*add)(const float* a, const float* b, float* dst, size_t n);
    void (*sub)(const float* a, const float* b, float* dst, size_t n);
    void (*mul)(const float* a, const float* b, float* dst, size_t n);
    void (*madd)(const float* a, const float* b, float* dst, size_t n);

    // y += alpha * x ; dst = alpha * x
    void (*axpy)(float alpha, const float* x, float* y, size_t n);
    void (*scale)(const float* x, float alpha, float* dst, size_t n);

    float (*dot)(const float* a, const float* b, size_t n);

    // Reductions accumulate in f64.
    double (*sum)(const float* x, size_t n);
    double (*sumsq)(const float* x, size_t n);
    float (*maxval)(const float* x, size_t n);  // n >= 1

    void (*vexp)(const float* x, float* dst, size_t n);
    void (*vsigmoid)(const float* x, float* dst, size_t n);
    void (*vtanh)(const float* x, float* dst, size_t n);

    // Row-major GEMM family. acc=false overwrites c, acc=true accumulates.
    //   gemm_nn: c[m,n] (+)= a[m,k] * b[k,n]
    //   gemm_nt: c[m,n] (+)= a[m,k] * b[n,k]^T
    //   gemm_tn: c[m,n] (+)= a[k,m]^T * b[k,n]
    void (*gemm_nn)(const float* a, const float* b, float* c,
                    size_t m, size_t k, size_t n, bool acc);
    void (*gemm_nt)(const float* a, const float* b, float* c,
                    size_t m, size_t k, size_t n, bool acc);
    void (*gemm_tn)(const float* a, const float* b, float* c,
                    size_t m, size_t k, size_t n, bool acc);
};

enum class Backend { Auto, Scalar, Avx2 };

// True when the binary carries AVX2 kernels and the CPU supports AVX2+FMA.
bool avx2_available();

const Ops& scalar_ops();
const Ops* avx2_ops();  // nullptr when compiled out

// Active table. Auto resolves once, on first use, to the best available
// backend; set_backend overrides it (throws std::invalid_argument when the
// requested backend is unavailable).
const Ops& active();
void set_backend(Backend b);
Backend active_backend();

Backend parse_backend(const std::string& name);
std::string backend_name(Backend b);

}  // namespace biascope::kernels
