#pragma once

// Primitive differentiable operations over TensorT. Forward math runs in the
// tensor's scalar type with f64 accumulators inside reductions (softmax,
// layer_norm, cross_entropy, kl_divergence); the float instantiation routes
// hot loops through the runtime-dispatched kernels.

#include "biascope/kernels.hpp"
#include "biascope/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <type_traits>

namespace biascope::ops {

namespace detail {

template <typename T>
constexpr bool is_f32 = std::is_same_v<T, float>;

template <typename T>
TensorT<T> make_output(std::vector<int64_t> shape, bool needs_grad) {
    TensorT<T> out = TensorT<T>::zeros(std::move(shape));
    if (needs_grad) out.set_requires_grad(true);
    return out;
}

// dst += a * b, elementwise
template <typename T>
void acc_mul(T* dst, const T* a, const T* b, size_t n) {
    if constexpr (is_f32<T>) {
        kernels::active().madd(a, b, dst, n);
    } else {
        for (size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
    }
}

// dst += alpha * x
template <typename T>
void acc_axpy(T* dst, T alpha, const T* x, size_t n) {
    if constexpr (is_f32<T>) {
        kernels::active().axpy(alpha, x, dst, n);
    } else {
        for (size_t i = 0; i < n; ++i) dst[i] += alpha * x[i];
    }
}

template <typename T>
void acc_add(T* dst, const T* x, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += x[i];
}

template <typename T>
double wide_sum(const T* x, size_t n) {
    if constexpr (is_f32<T>) {
        return kernels::active().sum(x, n);
    } else {
        double acc = 0;
        for (size_t i = 0; i < n; ++i) acc += x[i];
        return acc;
    }
}

template <typename T>
T row_max(const T* x, size_t n) {
    if constexpr (is_f32<T>) {
        return kernels::active().maxval(x, n);
    } else {
        T m = x[0];
        for (size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
        return m;
    }
}

template <typename T>
void vexp(const T* x, T* dst, size_t n) {
    if constexpr (is_f32<T>) {
        kernels::active().vexp(x, dst, n);
    } else {
        for (size_t i = 0; i < n; ++i) dst[i] = std::exp(x[i]);
    }
}

inline void check2d(const char* op, const std::vector<int64_t>& s) {
    if (s.size() != 2) throw ShapeError(std::string(op) + ": expected matrix, got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    detail::check2d("matmul", a.shape);
    detail::check2d("matmul", b.shape);
    const size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    if (b.shape[0] != static_cast<int64_t>(k))
        throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape) + " x " + shape_str(b.shape));

    const bool ng = a.requires_grad || b.requires_grad;
    TensorT<T> out = detail::make_output<T>({a.shape[0], b.shape[1]}, ng);
    if constexpr (detail::is_f32<T>) {
        kernels::active().gemm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
    } else {
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
                const T av = a.ptr()[i * k + p];
                for (size_t j = 0; j < n; ++j) out.ptr()[i * n + j] += av * b.ptr()[p * n + j];
            }
    }
    if (ng)
        tape.push([a, b, out, m, k, n] {
            const T* g = out.grad->data();
            if (a.requires_grad) {
                if constexpr (detail::is_f32<T>) {
                    kernels::active().gemm_nt(g, b.ptr(), a.grad->data(), m, n, k, true);
                } else {
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < n; ++j) {
                            const T gv = g[i * n + j];
                            for (size_t p = 0; p < k; ++p)
                                (*a.grad)[i * k + p] += gv * b.ptr()[p * n + j];
                        }
                }
            }
            if (b.requires_grad) {
                if constexpr (detail::is_f32<T>) {
                    kernels::active().gemm_tn(a.ptr(), g, b.grad->data(), k, m, n, true);
                } else {
                    for (size_t i = 0; i < m; ++i)
                        for (size_t p = 0; p < k; ++p) {
                            const T av = a.ptr()[i * k + p];
                            for (size_t j = 0; j < n; ++j)
                                (*b.grad)[p * n + j] += av * g[i * n + j];
                        }
                }
            }
        });
    return out;
}

// c[m,n] = a[m,k] @ b[n,k]^T  (used for QK^T scores and tied unembedding)
template <typename T>
TensorT<T> matmul_nt(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    detail::check2d("matmul_nt", a.shape);
    detail::check2d("matmul_nt", b.shape);
    const size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    if (b.shape[1] != static_cast<int64_t>(k))
        throw ShapeError("matmul_nt: inner dims disagree " + shape_str(a.shape) + " x " +
                         shape_str(b.shape) + "^T");

    const bool ng = a.requires_grad || b.requires_grad;
    TensorT<T> out = detail::make_output<T>({a.shape[0], b.shape[0]}, ng);
    if constexpr (detail::is_f32<T>) {
        kernels::active().gemm_nt(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
    } else {
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
                double acc = 0;
                for (size_t p = 0; p < k; ++p)
                    acc += static_cast<double>(a.ptr()[i * k + p]) * b.ptr()[j * k + p];
                out.ptr()[i * n + j] = static_cast<T>(acc);
            }
    }
    if (ng)
        tape.push([a, b, out, m, k, n] {
            const T* g = out.grad->data();
            if (a.requires_grad) {
                if constexpr (detail::is_f32<T>) {
                    kernels::active().gemm_nn(g, b.ptr(), a.grad->data(), m, n, k, true);
                } else {
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < n; ++j) {
                            const T gv = g[i * n + j];
                            for (size_t p = 0; p < k; ++p)
                                (*a.grad)[i * k + p] += gv * b.ptr()[j * k + p];
                        }
                }
            }
            if (b.requires_grad) {
                if constexpr (detail::is_f32<T>) {
                    kernels::active().gemm_tn(g, a.ptr(), b.grad->data(), n, m, k, true);
                } else {
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < n; ++j) {
                            const T gv = g[i * n + j];
                            for (size_t p = 0; p < k; ++p)
                                (*b.grad)[j * k + p] += gv * a.ptr()[i * k + p];
                        }
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape)
        throw ShapeError("add: shapes differ " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t n = a.numel();
    const bool ng = a.requires_grad || b.requires_grad;
    TensorT<T> out = detail::make_output<T>(a.shape, ng);
    if constexpr (detail::is_f32<T>) {
        kernels::active().add(a.ptr(), b.ptr(), out.ptr(), n);
    } else {
        for (size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
    }
    if (ng)
        tape.push([a, b, out, n] {
            if (a.requires_grad) detail::acc_add(a.grad->data(), out.grad->data(), n);
            if (b.requires_grad) detail::acc_add(b.grad->data(), out.grad->data(), n);
        });
    return out;
}

template <typename T>
TensorT<T> sub(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape)
        throw ShapeError("sub: shapes differ " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t n = a.numel();
    const bool ng = a.requires_grad || b.requires_grad;
    TensorT<T> out = detail::make_output<T>(a.shape, ng);
    if constexpr (detail::is_f32<T>) {
        kernels::active().sub(a.ptr(), b.ptr(), out.ptr(), n);
    } else {
        for (size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
    }
    if (ng)
        tape.push([a, b, out, n] {
            if (a.requires_grad) detail::acc_add(a.grad->data(), out.grad->data(), n);
            if (b.requires_grad) detail::acc_axpy(b.grad->data(), T(-1), out.grad->data(), n);
        });
    return out;
}

template <typename T>
TensorT<T> mul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape)
        throw ShapeError("mul: shapes differ " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t n = a.numel();
    const bool ng = a.requires_grad || b.requires_grad;
    TensorT<T> out = detail::make_output<T>(a.shape, ng);
    if constexpr (detail::is_f32<T>) {
        kernels::active().mul(a.ptr(), b.ptr(), out.ptr(), n);
    } else {
        for (size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
    }
    if (ng)
        tape.push([a, b, out, n] {
            if (a.requires_grad) detail::acc_mul(a.grad->data(), out.grad->data(), b.ptr(), n);
            if (b.requires_grad) detail::acc_mul(b.grad->data(), out.grad->data(), a.ptr(), n);
        });
    return out;
}

template <typename T>
TensorT<T> mul_scalar(TapeT<T>& tape, const TensorT<T>& x, T c) {
    const size_t n = x.numel();
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    if constexpr (detail::is_f32<T>) {
        kernels::active().scale(x.ptr(), c, out.ptr(), n);
    } else {
        for (size_t i = 0; i < n; ++i) out.ptr()[i] = c * x.ptr()[i];
    }
    if (x.requires_grad)
        tape.push([x, out, c, n] { detail::acc_axpy(x.grad->data(), c, out.grad->data(), n); });
    return out;
}

// out = x * s[0] where s is a 1-element tensor (gradient flows to both).
template <typename T>
TensorT<T> mul_bcast_scalar(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& s) {
    if (s.numel() != 1)
        throw ShapeError("mul_bcast_scalar: scale must be scalar, got " + shape_str(s.shape));
    const size_t n = x.numel();
    const bool ng = x.requires_grad || s.requires_grad;
    TensorT<T> out = detail::make_output<T>(x.shape, ng);
    const T c = s.ptr()[0];
    if constexpr (detail::is_f32<T>) {
        kernels::active().scale(x.ptr(), c, out.ptr(), n);
    } else {
        for (size_t i = 0; i < n; ++i) out.ptr()[i] = c * x.ptr()[i];
    }
    if (ng)
        tape.push([x, s, out, c, n] {
            const T* g = out.grad->data();
            if (x.requires_grad) detail::acc_axpy(x.grad->data(), c, g, n);
            if (s.requires_grad) {
                double acc = 0;
                for (size_t i = 0; i < n; ++i) acc += static_cast<double>(g[i]) * x.ptr()[i];
                (*s.grad)[0] += static_cast<T>(acc);
            }
        });
    return out;
}

template <typename T>
TensorT<T> add_scalar(TapeT<T>& tape, const TensorT<T>& x, T c) {
    const size_t n = x.numel();
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    for (size_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] + c;
    if (x.requires_grad)
        tape.push([x, out, n] { detail::acc_add(x.grad->data(), out.grad->data(), n); });
    return out;
}

// out[i,:] = x[i,:] + v  (bias add)
template <typename T>
TensorT<T> add_rowvec(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& v) {
    detail::check2d("add_rowvec", x.shape);
    if (v.numel() != x.shape[1])
        throw ShapeError("add_rowvec: vector " + shape_str(v.shape) + " vs matrix " + shape_str(x.shape));
    const size_t m = x.shape[0], n = x.shape[1];
    const bool ng = x.requires_grad || v.requires_grad;
    TensorT<T> out = detail::make_output<T>(x.shape, ng);
    for (size_t i = 0; i < m; ++i)
        if constexpr (detail::is_f32<T>) {
            kernels::active().add(x.ptr() + i * n, v.ptr(), out.ptr() + i * n, n);
        } else {
            for (size_t j = 0; j < n; ++j) out.ptr()[i * n + j] = x.ptr()[i * n + j] + v.ptr()[j];
        }
    if (ng)
        tape.push([x, v, out, m, n] {
            const T* g = out.grad->data();
            if (x.requires_grad) detail::acc_add(x.grad->data(), g, m * n);
            if (v.requires_grad)
                for (size_t i = 0; i < m; ++i) detail::acc_add(v.grad->data(), g + i * n, n);
        });
    return out;
}

template <typename T>
TensorT<T> sigmoid(TapeT<T>& tape, const TensorT<T>& x) {
    const size_t n = x.numel();
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    if constexpr (detail::is_f32<T>) {
        kernels::active().vsigmoid(x.ptr(), out.ptr(), n);
    } else {
        for (size_t i = 0; i < n; ++i) out.ptr()[i] = T(1) / (T(1) + std::exp(-x.ptr()[i]));
    }
    if (x.requires_grad)
        tape.push([x, out, n] {
            const T* y = out.ptr();
            const T* g = out.grad->data();
            T* dx = x.grad->data();
            for (size_t i = 0; i < n; ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
        });
    return out;
}

template <typename T>
TensorT<T> exp(TapeT<T>& tape, const TensorT<T>& x) {
    const size_t n = x.numel();
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    detail::vexp(x.ptr(), out.ptr(), n);
    if (x.requires_grad)
        tape.push([x, out, n] { detail::acc_mul(x.grad->data(), out.grad->data(), out.ptr(), n); });
    return out;
}

template <typename T>
TensorT<T> log(TapeT<T>& tape, const TensorT<T>& x) {
    const size_t n = x.numel();
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    for (size_t i = 0; i < n; ++i) out.ptr()[i] = std::log(x.ptr()[i]);
    if (x.requires_grad)
        tape.push([x, out, n] {
            const T* g = out.grad->data();
            T* dx = x.grad->data();
            for (size_t i = 0; i < n; ++i) dx[i] += g[i] / x.ptr()[i];
        });
    return out;
}

// Identity gradient strictly inside (lo, hi), zero outside.
template <typename T>
TensorT<T> clamp(TapeT<T>& tape, const TensorT<T>& x, T lo, T hi) {
    if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
    const size_t n = x.numel();
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    for (size_t i = 0; i < n; ++i) {
        const T v = x.ptr()[i];
        out.ptr()[i] = v < lo ? lo : (v > hi ? hi : v);
    }
    if (x.requires_grad)
        tape.push([x, out, lo, hi, n] {
            const T* g = out.grad->data();
            T* dx = x.grad->data();
            for (size_t i = 0; i < n; ++i) {
                const T v = x.ptr()[i];
                if (v > lo && v < hi) dx[i] += g[i];
            }
        });
    return out;
}

// GPT-2 gelu (tanh approximation):
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
template <typename T>
TensorT<T> gelu(TapeT<T>& tape, const TensorT<T>& x) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    const size_t n = x.numel();
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    auto inner = std::make_shared<std::vector<T>>(n);
    for (size_t i = 0; i < n; ++i) {
        const T v = x.ptr()[i];
        (*inner)[i] = static_cast<T>(kSqrt2OverPi * (v + kCubic * v * v * v));
    }
    auto tanh_inner = std::make_shared<std::vector<T>>(n);
    if constexpr (detail::is_f32<T>) {
        kernels::active().vtanh(inner->data(), tanh_inner->data(), n);
    } else {
        for (size_t i = 0; i < n; ++i) (*tanh_inner)[i] = std::tanh((*inner)[i]);
    }
    for (size_t i = 0; i < n; ++i)
        out.ptr()[i] = static_cast<T>(0.5) * x.ptr()[i] * (T(1) + (*tanh_inner)[i]);
    if (x.requires_grad)
        tape.push([x, out, tanh_inner, n] {
            const T* g = out.grad->data();
            T* dx = x.grad->data();
            for (size_t i = 0; i < n; ++i) {
                const double v = x.ptr()[i];
                const double t = (*tanh_inner)[i];
                const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                dx[i] += g[i] * static_cast<T>(d);
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// normalization / distributions
// ---------------------------------------------------------------------------

// Softmax along the last axis. Entries more than 88 below the row maximum
// flush to an exact zero, so hard-masked attention scores contribute nothing
// on any kernel backend.
template <typename T>
TensorT<T> softmax_rows(TapeT<T>& tape, const TensorT<T>& x) {
    if (x.shape.empty()) throw ShapeError("softmax: scalar input");
    const size_t n = static_cast<size_t>(x.shape.back());
    const size_t rows = static_cast<size_t>(x.numel()) / n;
    TensorT<T> out = detail::make_output<T>(x.shape, x.requires_grad);
    std::vector<T> shifted(n);
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * n;
        T* yr = out.ptr() + r * n;
        const T m = detail::row_max(xr, n);
        for (size_t i = 0; i < n; ++i) shifted[i] = xr[i] - m;
        detail::vexp(shifted.data(), yr, n);
        for (size_t i = 0; i < n; ++i)
            if (shifted[i] < T(-88)) yr[i] = T(0);
        const double s = detail::wide_sum(yr, n);
        for (size_t i = 0; i < n; ++i) yr[i] = static_cast<T>(yr[i] / s);
    }
    if (x.requires_grad)
        tape.push([x, out, rows, n] {
            for (size_t r = 0; r < rows; ++r) {
                const T* y = out.ptr() + r * n;
                const T* g = out.grad->data() + r * n;
                T* dx = x.grad->data() + r * n;
                double dotgy = 0;
                for (size_t i = 0; i < n; ++i) dotgy += static_cast<double>(g[i]) * y[i];
                for (size_t i = 0; i < n; ++i)
                    dx[i] += static_cast<T>(y[i] * (g[i] - dotgy));
            }
        });
    return out;
}

// Per-row layer norm with affine scale/shift. A zero-variance row normalizes
// to the zero vector (eps inside the square root).
template <typename T>
TensorT<T> layer_norm(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& gain,
                      const TensorT<T>& bias, T eps = T(1e-5)) {
    detail::check2d("layer_norm", x.shape);
    const size_t m = x.shape[0], n = x.shape[1];
    if (gain.numel() != static_cast<int64_t>(n) || bias.numel() != static_cast<int64_t>(n))
        throw ShapeError("layer_norm: affine params " + shape_str(gain.shape) + "/" +
                         shape_str(bias.shape) + " vs row width " + std::to_string(n));
    const bool ng = x.requires_grad || gain.requires_grad || bias.requires_grad;
    TensorT<T> out = detail::make_output<T>(x.shape, ng);
    auto xhat = std::make_shared<std::vector<T>>(m * n);
    auto inv_std = std::make_shared<std::vector<T>>(m);
    for (size_t r = 0; r < m; ++r) {
        const T* xr = x.ptr() + r * n;
        const double mu = detail::wide_sum(xr, n) / n;
        double var = 0;
        for (size_t i = 0; i < n; ++i) {
            const double d = xr[i] - mu;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*inv_std)[r] = static_cast<T>(inv);
        for (size_t i = 0; i < n; ++i) {
            const T h = static_cast<T>((xr[i] - mu) * inv);
            (*xhat)[r * n + i] = h;
            out.ptr()[r * n + i] = h * gain.ptr()[i] + bias.ptr()[i];
        }
    }
    if (ng)
        tape.push([x, gain, bias, out, xhat, inv_std, m, n] {
            for (size_t r = 0; r < m; ++r) {
                const T* g = out.grad->data() + r * n;
                const T* h = xhat->data() + r * n;
                if (gain.requires_grad)
                    for (size_t i = 0; i < n; ++i) (*gain.grad)[i] += g[i] * h[i];
                if (bias.requires_grad)
                    for (size_t i = 0; i < n; ++i) (*bias.grad)[i] += g[i];
                if (x.requires_grad) {
                    double mean_dh = 0, mean_dh_h = 0;
                    for (size_t i = 0; i < n; ++i) {
                        const double dh = static_cast<double>(g[i]) * gain.ptr()[i];
                        mean_dh += dh;
                        mean_dh_h += dh * h[i];
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    T* dx = x.grad->data() + r * n;
                    const double inv = (*inv_std)[r];
                    for (size_t i = 0; i < n; ++i) {
                        const double dh = static_cast<double>(g[i]) * gain.ptr()[i];
                        dx[i] += static_cast<T>(inv * (dh - mean_dh - h[i] * mean_dh_h));
                    }
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// lookup / slicing
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> embedding(TapeT<T>& tape, const TensorT<T>& table, std::span<const int> ids) {
    detail::check2d("embedding", table.shape);
    const size_t v = table.shape[0], d = table.shape[1];
    for (const int id : ids)
        if (id < 0 || static_cast<size_t>(id) >= v)
            throw std::out_of_range("embedding: id " + std::to_string(id) + " out of vocab " +
                                    std::to_string(v));
    TensorT<T> out = detail::make_output<T>({static_cast<int64_t>(ids.size()), table.shape[1]},
                                            table.requires_grad);
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.ptr() + static_cast<size_t>(ids[i]) * d, d, out.ptr() + i * d);
    if (table.requires_grad) {
        std::vector<int> ids_copy(ids.begin(), ids.end());
        tape.push([table, out, ids_copy, d] {
            for (size_t i = 0; i < ids_copy.size(); ++i)
                detail::acc_add(table.grad->data() + static_cast<size_t>(ids_copy[i]) * d,
                                out.grad->data() + i * d, d);
        });
    }
    return out;
}

template <typename T>
TensorT<T> select_row(TapeT<T>& tape, const TensorT<T>& x, int64_t row) {
    detail::check2d("select_row", x.shape);
    if (row < 0 || row >= x.shape[0])
        throw std::out_of_range("select_row: row " + std::to_string(row) + " in " + shape_str(x.shape));
    const size_t n = x.shape[1];
    TensorT<T> out = detail::make_output<T>({x.shape[1]}, x.requires_grad);
    std::copy_n(x.ptr() + static_cast<size_t>(row) * n, n, out.ptr());
    if (x.requires_grad)
        tape.push([x, out, row, n] {
            detail::acc_add(x.grad->data() + static_cast<size_t>(row) * n, out.grad->data(), n);
        });
    return out;
}

// Copy of x with one row replaced by v.
template <typename T>
TensorT<T> set_row(TapeT<T>& tape, const TensorT<T>& x, int64_t row, const TensorT<T>& v) {
    detail::check2d("set_row", x.shape);
    if (row < 0 || row >= x.shape[0])
        throw std::out_of_range("set_row: row " + std::to_string(row) + " in " + shape_str(x.shape));
    if (v.numel() != x.shape[1])
        throw ShapeError("set_row: row " + shape_str(v.shape) + " vs matrix " + shape_str(x.shape));
    const size_t n = x.shape[1];
    const bool ng = x.requires_grad || v.requires_grad;
    TensorT<T> out = detail::make_output<T>(x.shape, ng);
    std::copy_n(x.ptr(), x.numel(), out.ptr());
    std::copy_n(v.ptr(), n, out.ptr() + static_cast<size_t>(row) * n);
    if (ng)
        tape.push([x, v, out, row, n] {
            const T* g = out.grad->data();
            if (x.requires_grad) {
                const size_t m = static_cast<size_t>(x.shape[0]);
                for (size_t r = 0; r < m; ++r)
                    if (r != static_cast<size_t>(row))
                        detail::acc_add(x.grad->data() + r * n, g + r * n, n);
            }
            if (v.requires_grad)
                detail::acc_add(v.grad->data(), g + static_cast<size_t>(row) * n, n);
        });
    return out;
}

template <typename T>
TensorT<T> slice_cols(TapeT<T>& tape, const TensorT<T>& x, int64_t c0, int64_t c1) {
    detail::check2d("slice_cols", x.shape);
    if (c0 < 0 || c1 > x.shape[1] || c0 >= c1)
        throw std::out_of_range("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") in " + shape_str(x.shape));
    const size_t m = x.shape[0], n = x.shape[1], w = c1 - c0;
    TensorT<T> out = detail::make_output<T>({x.shape[0], c1 - c0}, x.requires_grad);
    for (size_t r = 0; r < m; ++r)
        std::copy_n(x.ptr() + r * n + c0, w, out.ptr() + r * w);
    if (x.requires_grad)
        tape.push([x, out, c0, m, n, w] {
            for (size_t r = 0; r < m; ++r)
                detail::acc_add(x.grad->data() + r * n + c0, out.grad->data() + r * w, w);
        });
    return out;
}

template <typename T>
TensorT<T> slice_rows(TapeT<T>& tape, const TensorT<T>& x, int64_t r0, int64_t r1) {
    detail::check2d("slice_rows", x.shape);
    if (r0 < 0 || r1 > x.shape[0] || r0 >= r1)
        throw std::out_of_range("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                                ") in " + shape_str(x.shape));
    const size_t n = x.shape[1], h = r1 - r0;
    TensorT<T> out = detail::make_output<T>({r1 - r0, x.shape[1]}, x.requires_grad);
    std::copy_n(x.ptr() + static_cast<size_t>(r0) * n, h * n, out.ptr());
    if (x.requires_grad)
        tape.push([x, out, r0, n, h] {
            detail::acc_add(x.grad->data() + static_cast<size_t>(r0) * n, out.grad->data(), h * n);
        });
    return out;
}

template <typename T>
TensorT<T> gather_scalar(TapeT<T>& tape, const TensorT<T>& x, int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.numel())
        throw std::out_of_range("gather_scalar: index " + std::to_string(flat_index) + " in " +
                                shape_str(x.shape));
    TensorT<T> out = detail::make_output<T>({1}, x.requires_grad);
    out.ptr()[0] = x.ptr()[flat_index];
    if (x.requires_grad)
        tape.push([x, out, flat_index] { (*x.grad)[flat_index] += out.grad->data()[0]; });
    return out;
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(TapeT<T>& tape, const TensorT<T>& x) {
    TensorT<T> out = detail::make_output<T>({1}, x.requires_grad);
    out.ptr()[0] = static_cast<T>(detail::wide_sum(x.ptr(), x.numel()));
    if (x.requires_grad)
        tape.push([x, out] {
            const T g = out.grad->data()[0];
            T* dx = x.grad->data();
            for (int64_t i = 0; i < x.numel(); ++i) dx[i] += g;
        });
    return out;
}

// Mean next-token NLL over rows whose target is not ignore_index.
template <typename T>
TensorT<T> cross_entropy(TapeT<T>& tape, const TensorT<T>& logits, std::span<const int> targets,
                         int ignore_index = -1) {
    detail::check2d("cross_entropy", logits.shape);
    const size_t m = logits.shape[0], v = logits.shape[1];
    if (targets.size() != m)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets vs logits " +
                         shape_str(logits.shape));
    size_t valid = 0;
    auto lse = std::make_shared<std::vector<double>>(m, 0.0);
    double total = 0;
    std::vector<T> e(v);
    for (size_t r = 0; r < m; ++r) {
        if (targets[r] == ignore_index) continue;
        if (targets[r] < 0 || static_cast<size_t>(targets[r]) >= v)
            throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) +
                                    " out of vocab " + std::to_string(v));
        const T* xr = logits.ptr() + r * v;
        const T mx = detail::row_max(xr, v);
        double s = 0;
        for (size_t i = 0; i < v; ++i) s += std::exp(static_cast<double>(xr[i]) - mx);
        (*lse)[r] = mx + std::log(s);
        total += (*lse)[r] - xr[targets[r]];
        ++valid;
    }
    if (valid == 0) throw std::invalid_argument("cross_entropy: no valid targets");
    TensorT<T> out = detail::make_output<T>({1}, logits.requires_grad);
    out.ptr()[0] = static_cast<T>(total / valid);
    if (logits.requires_grad) {
        std::vector<int> tgt(targets.begin(), targets.end());
        tape.push([logits, out, tgt, lse, ignore_index, m, v, valid] {
            const T g = out.grad->data()[0];
            for (size_t r = 0; r < m; ++r) {
                if (tgt[r] == ignore_index) continue;
                const T* xr = logits.ptr() + r * v;
                T* dx = logits.grad->data() + r * v;
                const double l = (*lse)[r];
                for (size_t i = 0; i < v; ++i) {
                    double p = std::exp(static_cast<double>(xr[i]) - l);
                    if (static_cast<int>(i) == tgt[r]) p -= 1.0;
                    dx[i] += static_cast<T>(g * p / valid);
                }
            }
        });
    }
    return out;
}

// KL(p || q) over two probability vectors of equal length; contributions with
// p_i = 0 vanish by convention.
template <typename T>
TensorT<T> kl_divergence(TapeT<T>& tape, const TensorT<T>& p, const TensorT<T>& q) {
    if (p.shape != q.shape)
        throw ShapeError("kl_divergence: shapes differ " + shape_str(p.shape) + " vs " +
                         shape_str(q.shape));
    const size_t n = p.numel();
    const bool ng = p.requires_grad || q.requires_grad;
    double acc = 0;
    for (size_t i = 0; i < n; ++i) {
        const double pi = p.ptr()[i];
        if (pi > 0) acc += pi * (std::log(pi) - std::log(static_cast<double>(q.ptr()[i])));
    }
    TensorT<T> out = detail::make_output<T>({1}, ng);
    out.ptr()[0] = static_cast<T>(acc);
    if (ng)
        tape.push([p, q, out, n] {
            const T g = out.grad->data()[0];
            for (size_t i = 0; i < n; ++i) {
                const double pi = p.ptr()[i];
                if (pi <= 0) continue;
                if (q.requires_grad) (*q.grad)[i] += static_cast<T>(-g * pi / q.ptr()[i]);
                if (p.requires_grad)
                    (*p.grad)[i] += static_cast<T>(
                        g * (std::log(pi) - std::log(static_cast<double>(q.ptr()[i])) + 1.0));
            }
        });
    return out;
}

}  // namespace biascope::ops
