#include "dualatt/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace dualatt::kernels {
namespace {

const KernelTable* pick_default() {
    if (const char* env = std::getenv("DUALATT_ISA")) {
        const std::string want(env);
        if (want == "scalar") return &scalar_table();
        if (want == "avx2" && avx2_table() && cpu_supports_avx2()) return avx2_table();
    }
    if (avx2_table() && cpu_supports_avx2()) return avx2_table();
    return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
    static std::atomic<const KernelTable*> table{pick_default()};
    return table;
}

}  // namespace

bool cpu_supports_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

Isa active_isa() { return active().isa; }

void force_isa(Isa isa) {
    if (isa == Isa::scalar) {
        current().store(&scalar_table());
        return;
    }
    if (!avx2_table() || !cpu_supports_avx2())
        throw std::invalid_argument("AVX2 kernels are not available on this machine");
    current().store(avx2_table());
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

void gemm_acc(const KernelTable& t, const double* a, const double* b, double* c,
              std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av != 0.0) t.axpy(av, b + p * n, crow, n);
        }
    }
}

void gemm_at_acc(const KernelTable& t, const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av != 0.0) t.axpy(av, brow, c + p * n, n);
        }
    }
}

void gemm_bt_acc(const KernelTable& t, const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) c[i * k + p] += t.dot(a + i * n, b + p * n, n);
}

}  // namespace dualatt::kernels
