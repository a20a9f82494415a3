#include "biascope/kernels.hpp"

#include <atomic>
#include <stdexcept>

namespace biascope::kernels {
namespace {

std::atomic<const Ops*> g_active{nullptr};
std::atomic<Backend> g_backend{Backend::Auto};

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const Ops* resolve(Backend b) {
    switch (b) {
        case Backend::Scalar:
            return &scalar_ops();
        case Backend::Avx2:
            if (!avx2_available())
                throw std::invalid_argument("kernels: avx2 backend unavailable on this machine");
            return avx2_ops();
        case Backend::Auto:
        default:
            return avx2_available() ? avx2_ops() : &scalar_ops();
    }
}

}  // namespace

bool avx2_available() {
    return avx2_ops() != nullptr && cpu_has_avx2_fma();
}

const Ops& active() {
    const Ops* ops = g_active.load(std::memory_order_acquire);
    if (!ops) {
        ops = resolve(g_backend.load());
        g_active.store(ops, std::memory_order_release);
    }
    return *ops;
}

void set_backend(Backend b) {
    const Ops* ops = resolve(b);
    g_backend.store(b);
    g_active.store(ops, std::memory_order_release);
}

Backend active_backend() {
    const Ops& ops = active();
    return &ops == &scalar_ops() ? Backend::Scalar : Backend::Avx2;
}

Backend parse_backend(const std::string& name) {
    if (name == "auto") return Backend::Auto;
    if (name == "scalar") return Backend::Scalar;
    if (name == "avx2") return Backend::Avx2;
    throw std::invalid_argument("kernels: unknown backend '" + name + "'");
}

std::string backend_name(Backend b) {
    switch (b) {
        case Backend::Scalar: return "scalar";
        case Backend::Avx2: return "avx2";
        default: return "auto";
    }
}

}  // namespace biascope::kernels
