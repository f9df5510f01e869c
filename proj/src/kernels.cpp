#include "cdl/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cdl::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr long kParallelWork = 1L << 16;

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline void softmax_row(const double* x, double* y, int cols, double tau) {
  double mx = x[0];
  for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (int j = 0; j < cols; ++j) {
    y[j] = std::exp((x[j] - mx) / tau);
    s += y[j];
  }
  const double inv = 1.0 / s;
  for (int j = 0; j < cols; ++j) y[j] *= inv;
}

inline void layer_norm_row(const double* x, double* xhat, double* inv_std, int cols, double eps) {
  double mean = 0.0;
  for (int j = 0; j < cols; ++j) mean += x[j];
  mean /= cols;
  double var = 0.0;
  for (int j = 0; j < cols; ++j) {
    const double d = x[j] - mean;
    var += d * d;
  }
  var /= cols;
  const double is = 1.0 / std::sqrt(var + eps);
  *inv_std = is;
  for (int j = 0; j < cols; ++j) xhat[j] = (x[j] - mean) * is;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate) {
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n >= kParallelWork)
  for (int i = 0; i < m; ++i) {
    double* ci = C + static_cast<long>(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = A + static_cast<long>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = B + static_cast<long>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate) {
  // Transposing B keeps the inner loop contiguous; per-element summation
  // order over k is unchanged.
  std::vector<double> bt(static_cast<std::size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
  gemm_nn(a, bt, c, m, k, n, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate) {
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * k * n >= kParallelWork)
  for (int i = 0; i < m; ++i) {
    double* ci = C + static_cast<long>(i) * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    for (int p = 0; p < k; ++p) {
      const double av = A[static_cast<long>(p) * m + i];
      const double* bp = B + static_cast<long>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void softmax_rows(std::span<const double> x, std::span<double> y, int rows, int cols, double tau) {
#pragma omp parallel for schedule(static) if (static_cast<long>(rows) * cols >= kParallelWork)
  for (int i = 0; i < rows; ++i)
    softmax_row(x.data() + static_cast<long>(i) * cols, y.data() + static_cast<long>(i) * cols, cols, tau);
}

void layer_norm_rows(std::span<const double> x, std::span<double> xhat, std::span<double> inv_std,
                     int rows, int cols, double eps) {
#pragma omp parallel for schedule(static) if (static_cast<long>(rows) * cols >= kParallelWork)
  for (int i = 0; i < rows; ++i)
    layer_norm_row(x.data() + static_cast<long>(i) * cols, xhat.data() + static_cast<long>(i) * cols,
                   inv_std.data() + i, cols, eps);
}

void gelu(std::span<const double> x, std::span<double> y) {
  const long n = static_cast<long>(x.size());
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (long i = 0; i < n; ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_grad(std::span<const double> x, std::span<const double> dy, std::span<double> dx) {
  const long n = static_cast<long>(x.size());
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (long i = 0; i < n; ++i) {
    const double v = x[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    dx[i] += dy[i] * (cdf + v * pdf);
  }
}

namespace reference {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<std::size_t>(i) * n + j] : 0.0;
      for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
      c[static_cast<std::size_t>(i) * n + j] = s;
    }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<std::size_t>(i) * n + j] : 0.0;
      for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(j) * k + p];
      c[static_cast<std::size_t>(i) * n + j] = s;
    }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<std::size_t>(i) * n + j] : 0.0;
      for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(p) * m + i] * b[static_cast<std::size_t>(p) * n + j];
      c[static_cast<std::size_t>(i) * n + j] = s;
    }
}

void softmax_rows(std::span<const double> x, std::span<double> y, int rows, int cols, double tau) {
  for (int i = 0; i < rows; ++i)
    softmax_row(x.data() + static_cast<long>(i) * cols, y.data() + static_cast<long>(i) * cols, cols, tau);
}

void layer_norm_rows(std::span<const double> x, std::span<double> xhat, std::span<double> inv_std,
                     int rows, int cols, double eps) {
  for (int i = 0; i < rows; ++i)
    layer_norm_row(x.data() + static_cast<long>(i) * cols, xhat.data() + static_cast<long>(i) * cols,
                   inv_std.data() + i, cols, eps);
}

void gelu(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
}

}  // namespace reference

}  // namespace cdl::kernels
