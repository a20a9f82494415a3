// AVX2 + FMA kernel variants. Built with -mavx2 -mfma -ffp-contract=off:
// FMA happens only through explicit intrinsics, so the elementwise kernels
// (mul followed by add) stay bit-identical to the scalar reference while
// dot/GEMM use fused accumulation.

#include "biascope/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>

namespace biascope::kernels {
namespace {

void v_add(const float* a, const float* b, float* dst, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void v_sub(const float* a, const float* b, float* dst, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void v_mul(const float* a, const float* b, float* dst, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void v_madd(const float* a, const float* b, float* dst, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 prod = _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
        _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(dst + i), prod));
    }
    for (; i < n; ++i) dst[i] += a[i] * b[i];
}

void v_axpy(float alpha, const float* x, float* y, size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 prod = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void v_scale(const float* x, float alpha, float* dst, size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) dst[i] = alpha * x[i];
}

float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    return _mm_cvtss_f32(s);
}

float v_dot(const float* a, const float* b, size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    }
    for (; i + 8 <= n; i += 8)
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    float acc = hsum8(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double hsum4d(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    __m128d s = _mm_add_pd(lo, hi);
    s = _mm_add_sd(s, _mm_unpackhi_pd(s, s));
    return _mm_cvtsd_f64(s);
}

double v_sum(const float* x, size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 v = _mm256_loadu_ps(x + i);
        acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
        acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
    }
    double acc = hsum4d(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += x[i];
    return acc;
}

double v_sumsq(const float* x, size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 v = _mm256_loadu_ps(x + i);
        __m256d d0 = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
        __m256d d1 = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
        acc0 = _mm256_fmadd_pd(d0, d0, acc0);
        acc1 = _mm256_fmadd_pd(d1, d1, acc1);
    }
    double acc = hsum4d(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += static_cast<double>(x[i]) * x[i];
    return acc;
}

float v_maxval(const float* x, size_t n) {
    size_t i = 0;
    float m = x[0];
    if (n >= 8) {
        __m256 vm = _mm256_loadu_ps(x);
        for (i = 8; i + 8 <= n; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(x + i));
        __m128 lo = _mm256_castps256_ps128(vm);
        __m128 hi = _mm256_extractf128_ps(vm, 1);
        __m128 s = _mm_max_ps(lo, hi);
        s = _mm_max_ps(s, _mm_movehl_ps(s, s));
        s = _mm_max_ss(s, _mm_shuffle_ps(s, s, 1));
        m = _mm_cvtss_f32(s);
    }
    for (; i < n; ++i) m = x[i] > m ? x[i] : m;
    return m;
}

// exp on 8 lanes, Cephes-style polynomial (max error ~2 ulp in f32).
__m256 exp256(__m256 x) {
    const __m256 hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
    const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
    const __m256 c1 = _mm256_set1_ps(0.693359375f);
    const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
    const __m256 one = _mm256_set1_ps(1.0f);

    x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);

    __m256 fx = _mm256_fmadd_ps(x, log2e, _mm256_set1_ps(0.5f));
    fx = _mm256_floor_ps(fx);
    x = _mm256_fnmadd_ps(fx, c1, x);
    x = _mm256_fnmadd_ps(fx, c2, x);

    __m256 z = _mm256_mul_ps(x, x);
    __m256 y = _mm256_set1_ps(1.9875691500e-4f);
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
    y = _mm256_fmadd_ps(y, z, _mm256_add_ps(x, one));

    __m256i n = _mm256_cvtps_epi32(fx);
    n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
    n = _mm256_slli_epi32(n, 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

void v_vexp(const float* x, float* dst, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(dst + i, exp256(_mm256_loadu_ps(x + i)));
    // Tail saturates at the same bounds as the vector body.
    for (; i < n; ++i)
        dst[i] = std::exp(std::min(std::max(x[i], -88.3762626647949f), 88.3762626647949f));
}

void v_vsigmoid(const float* x, float* dst, size_t n) {
    const __m256 one = _mm256_set1_ps(1.0f);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 e = exp256(_mm256_sub_ps(_mm256_setzero_ps(), _mm256_loadu_ps(x + i)));
        _mm256_storeu_ps(dst + i, _mm256_div_ps(one, _mm256_add_ps(one, e)));
    }
    for (; i < n; ++i) dst[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void v_vtanh(const float* x, float* dst, size_t n) {
    const __m256 one = _mm256_set1_ps(1.0f);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 t = exp256(_mm256_mul_ps(_mm256_set1_ps(2.0f), _mm256_loadu_ps(x + i)));
        _mm256_storeu_ps(dst + i, _mm256_div_ps(_mm256_sub_ps(t, one), _mm256_add_ps(t, one)));
    }
    for (; i < n; ++i) dst[i] = std::tanh(x[i]);
}

void v_gemm_nn(const float* a, const float* b, float* c,
               size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        if (!acc) {
            for (size_t j = 0; j < n; ++j) crow[j] = 0.0f;
        }
        const float* arow = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            const __m256 av = _mm256_set1_ps(arow[p]);
            const float* brow = b + p * n;
            size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            const float afs = arow[p];
            for (; j < n; ++j) crow[j] += afs * brow[j];
        }
    }
}

void v_gemm_nt(const float* a, const float* b, float* c,
               size_t m, size_t k, size_t n, bool acc) {
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const float v = v_dot(arow, b + j * k, k);
            c[i * n + j] = acc ? c[i * n + j] + v : v;
        }
    }
}

void v_gemm_tn(const float* a, const float* b, float* c,
               size_t m, size_t k, size_t n, bool acc) {
    if (!acc) {
        for (size_t i = 0; i < m * n; ++i) c[i] = 0.0f;
    }
    for (size_t p = 0; p < k; ++p) {
        const float* arow = a + p * m;
        const float* brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            const __m256 av = _mm256_set1_ps(arow[i]);
            float* crow = c + i * n;
            size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            const float afs = arow[i];
            for (; j < n; ++j) crow[j] += afs * brow[j];
        }
    }
}

}  // namespace

const Ops* avx2_ops() {
    static const Ops ops = {
        "avx2",
        v_add, v_sub, v_mul, v_madd,
        v_axpy, v_scale,
        v_dot,
        v_sum, v_sumsq, v_maxval,
        v_vexp, v_vsigmoid, v_vtanh,
        v_gemm_nn, v_gemm_nt, v_gemm_tn,
    };
    return &ops;
}

}  // namespace biascope::kernels

#else

namespace biascope::kernels {
const Ops* avx2_ops() { return nullptr; }
}  // namespace biascope::kernels

#endif
