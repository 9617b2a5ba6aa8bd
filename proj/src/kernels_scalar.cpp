#include "dualatt/kernels.hpp"

namespace dualatt::kernels {
namespace {

double dot_scalar(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void mul_scalar(const double* x, const double* y, double* z, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

void mul_acc_scalar(const double* x, const double* y, double* z, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) z[i] += x[i] * y[i];
}

double sum_scalar(const double* x, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    return s;
}

void scale_scalar(double a, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{Isa::scalar, dot_scalar, axpy_scalar, mul_scalar,
                                   mul_acc_scalar, sum_scalar, scale_scalar};
    return table;
}

}  // namespace dualatt::kernels
