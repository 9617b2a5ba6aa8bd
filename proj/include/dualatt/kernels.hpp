#pragma once
// Dense double-precision inner loops used by the tensor operators.
//
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2+FMA variant. The variant is picked once at startup from CPUID and
// can be pinned with the DUALATT_ISA environment variable (scalar|avx2).

#include <cstddef>
#include <string_view>

namespace dualatt::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
    Isa isa;
    // sum_i x[i] * y[i]
    double (*dot)(const double* x, const double* y, std::size_t n);
    // y[i] += a * x[i]
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    // z[i] = x[i] * y[i]
    void (*mul)(const double* x, const double* y, double* z, std::size_t n);
    // z[i] += x[i] * y[i]
    void (*mul_acc)(const double* x, const double* y, double* z, std::size_t n);
    // sum_i x[i]
    double (*sum)(const double* x, std::size_t n);
    // x[i] *= a
    void (*scale)(double a, double* x, std::size_t n);
};

const KernelTable& scalar_table();
// Returns nullptr when the AVX2 variant is not compiled in.
const KernelTable* avx2_table();

bool cpu_supports_avx2();

// Table chosen for this process.
const KernelTable& active();
Isa active_isa();
// Overrides the runtime choice; throws std::invalid_argument when the
// requested ISA is not available on this machine.
void force_isa(Isa isa);

std::string_view isa_name(Isa isa);

// C[M,N] += A[M,K] * B[K,N], all row-major and contiguous.
void gemm_acc(const KernelTable& t, const double* a, const double* b, double* c,
              std::size_t m, std::size_t k, std::size_t n);
// C[K,N] += A[M,K]^T * B[M,N].
void gemm_at_acc(const KernelTable& t, const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);
// C[M,K] += A[M,N] * B[K,N]^T.
void gemm_bt_acc(const KernelTable& t, const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);

}  // namespace dualatt::kernels
