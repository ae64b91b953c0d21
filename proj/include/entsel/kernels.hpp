#pragma once

#include <cstddef>

// Low-level double-precision kernels behind the classifier's hot loops.
// Every kernel has a scalar reference implementation and, on capable x86-64
// hosts, an AVX2+FMA variant; the active backend is picked once at runtime
// and can be forced (API or ENTSEL_KERNELS=scalar|avx2 in the environment).
// Elementwise kernels agree with the reference to a few ulps (the vector
// variants fuse multiply-adds); reductions agree to the usual reassociation
// tolerance.  Within one process a single backend serves every call, so runs
// are reproducible for a given machine and backend.
namespace entsel::kernels {

enum class Backend { scalar, avx2 };

const char* backend_name(Backend b);
bool supported(Backend b);
// Currently active backend (resolves auto-detection on first use).
Backend active();
// Force a specific backend; throws std::runtime_error if unsupported here.
void force(Backend b);
// Back to auto-detection (honors the ENTSEL_KERNELS environment override).
void use_auto();

// sum_i a[i] * b[i]
double dot(const double* a, const double* b, std::size_t n);
// sum_i a[i]
double sum(const double* a, std::size_t n);
// y[i] += alpha * x[i]
void axpy(double alpha, const double* x, double* y, std::size_t n);
// x[i] *= alpha
void scale(double alpha, double* x, std::size_t n);
// y[i] = max(x[i], 0)
void relu(const double* x, double* y, std::size_t n);
// out[i] = g[i] if x[i] > 0 else 0   (backprop through relu)
void relu_mask(const double* x, const double* g, double* out, std::size_t n);
// One Adam step over a contiguous parameter span.  inv_bc1/inv_bc2 are the
// precomputed bias corrections 1/(1-beta1^t) and 1/(1-beta2^t).
void adam_step(double* p, double* m, double* v, const double* g, std::size_t n,
               double lr, double beta1, double beta2, double eps,
               double inv_bc1, double inv_bc2);

}  // namespace entsel::kernels
