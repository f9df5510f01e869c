#pragma once

#include <span>

// Dense kernels behind the autodiff primitives. Every kernel has a serial
// reference in `kernels::reference` computing each output element with the
// same operation order, so the OpenMP versions are bit-identical to it.
namespace cdl::kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate = false);
// C[m x n] (+)= A[m x k] * B[n x k]^T
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate = false);
// C[m x n] (+)= A[k x m]^T * B[k x n]
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate = false);

// Row-wise softmax of x / tau.
void softmax_rows(std::span<const double> x, std::span<double> y, int rows, int cols, double tau);

// Row-wise normalization; writes normalized values and per-row inverse stddev.
void layer_norm_rows(std::span<const double> x, std::span<double> xhat, std::span<double> inv_std,
                     int rows, int cols, double eps);

void gelu(std::span<const double> x, std::span<double> y);
void gelu_grad(std::span<const double> x, std::span<const double> dy, std::span<double> dx);

// Number of threads OpenMP would use (1 when built without OpenMP).
int max_threads();

namespace reference {
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate = false);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate = false);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k,
             int n, bool accumulate = false);
void softmax_rows(std::span<const double> x, std::span<double> y, int rows, int cols, double tau);
void layer_norm_rows(std::span<const double> x, std::span<double> xhat, std::span<double> inv_std,
                     int rows, int cols, double eps);
void gelu(std::span<const double> x, std::span<double> y);
}  // namespace reference

}  // namespace cdl::kernels
