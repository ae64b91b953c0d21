#include "entsel/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

namespace entsel::kernels {

// ---------------------------------------------------------------------------
// Scalar reference implementations.  These define the semantics; the SIMD
// variants are checked against them.

namespace scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const double* a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void relu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_mask(const double* x, const double* g, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
}

void adam_step(double* p, double* m, double* v, const double* g, std::size_t n,
               double lr, double beta1, double beta2, double eps,
               double inv_bc1, double inv_bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i]);
    const double mhat = m[i] * inv_bc1;
    const double vhat = v[i] * inv_bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace scalar

#if defined(ENTSEL_HAVE_AVX2)
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
double sum(const double* a, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale(double alpha, double* x, std::size_t n);
void relu(const double* x, double* y, std::size_t n);
void relu_mask(const double* x, const double* g, double* out, std::size_t n);
void adam_step(double* p, double* m, double* v, const double* g, std::size_t n,
               double lr, double beta1, double beta2, double eps,
               double inv_bc1, double inv_bc2);
}  // namespace avx2
#endif

// ---------------------------------------------------------------------------
// Dispatch.  One backend per process unless explicitly re-forced.

namespace {

struct KernelTable {
  double (*dot)(const double*, const double*, std::size_t);
  double (*sum)(const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scale)(double, double*, std::size_t);
  void (*relu)(const double*, double*, std::size_t);
  void (*relu_mask)(const double*, const double*, double*, std::size_t);
  void (*adam_step)(double*, double*, double*, const double*, std::size_t,
                    double, double, double, double, double, double);
};

constexpr KernelTable kScalarTable = {
    scalar::dot,  scalar::sum,       scalar::axpy,     scalar::scale,
    scalar::relu, scalar::relu_mask, scalar::adam_step};

#if defined(ENTSEL_HAVE_AVX2)
constexpr KernelTable kAvx2Table = {
    avx2::dot,  avx2::sum,       avx2::axpy,     avx2::scale,
    avx2::relu, avx2::relu_mask, avx2::adam_step};
#endif

const KernelTable* g_table = nullptr;
Backend g_backend = Backend::scalar;

bool cpu_has_avx2() {
#if defined(ENTSEL_HAVE_AVX2)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

void select(Backend b) {
  switch (b) {
    case Backend::scalar:
      g_table = &kScalarTable;
      break;
    case Backend::avx2:
#if defined(ENTSEL_HAVE_AVX2)
      g_table = &kAvx2Table;
      break;
#else
      throw std::runtime_error("kernels: avx2 backend not compiled in");
#endif
  }
  g_backend = b;
}

void auto_select() {
  const char* env = std::getenv("ENTSEL_KERNELS");
  if (env != nullptr && std::strlen(env) > 0) {
    const std::string s = env;
    if (s == "scalar") {
      select(Backend::scalar);
      return;
    }
    if (s == "avx2") {
      if (!supported(Backend::avx2))
        throw std::runtime_error(
            "ENTSEL_KERNELS=avx2 but this build/host does not support it");
      select(Backend::avx2);
      return;
    }
    if (s != "auto")
      throw std::runtime_error("ENTSEL_KERNELS: unknown backend '" + s + "'");
  }
  select(cpu_has_avx2() ? Backend::avx2 : Backend::scalar);
}

const KernelTable& table() {
  if (g_table == nullptr) auto_select();
  return *g_table;
}

}  // namespace

const char* backend_name(Backend b) {
  return b == Backend::scalar ? "scalar" : "avx2";
}

bool supported(Backend b) {
  if (b == Backend::scalar) return true;
  return cpu_has_avx2();
}

Backend active() {
  table();
  return g_backend;
}

void force(Backend b) {
  if (!supported(b))
    throw std::runtime_error(std::string("kernels: backend '") +
                             backend_name(b) + "' not supported on this host");
  select(b);
}

void use_auto() { auto_select(); }

double dot(const double* a, const double* b, std::size_t n) {
  return table().dot(a, b, n);
}
double sum(const double* a, std::size_t n) { return table().sum(a, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  table().axpy(alpha, x, y, n);
}
void scale(double alpha, double* x, std::size_t n) {
  table().scale(alpha, x, n);
}
void relu(const double* x, double* y, std::size_t n) { table().relu(x, y, n); }
void relu_mask(const double* x, const double* g, double* out, std::size_t n) {
  table().relu_mask(x, g, out, n);
}
void adam_step(double* p, double* m, double* v, const double* g, std::size_t n,
               double lr, double beta1, double beta2, double eps,
               double inv_bc1, double inv_bc2) {
  table().adam_step(p, m, v, g, n, lr, beta1, beta2, eps, inv_bc1, inv_bc2);
}

}  // namespace entsel::kernels
