#pragma once

#include <cstdint>
#include <vector>

namespace memdist::kernels {

// Backend selection. Both backends produce bit-identical results: every
// kernel accumulates each output element in the same fixed order, and the
// OpenMP variants only split independent output elements across threads.
// The serial variants are naive reference loops kept for testing.
enum class Backend { serial, openmp };

void set_backend(Backend b);
Backend backend();

// Thread cap, from MEMDISTILL_THREADS when set, else the OpenMP default.
int max_threads();
void set_max_threads(int n);

// ---- dense linear algebra ----
// c[m x n] = op(a) * op(b), op controlled by ta/tb (transpose flags).
// a is [m x k] (or [k x m] when ta), b is [k x n] (or [n x k] when tb).
void matmul(const double* a, const double* b, double* c, int m, int k, int n, bool ta, bool tb);

// ---- convolution (3x3, stride 1, pad 1) ----
void conv2d_fwd(const double* x, const double* w, double* y, int B, int Cin, int H, int W, int Cout);
void conv2d_igrad(const double* gy, const double* w, double* gx, int B, int Cin, int H, int W, int Cout);
void conv2d_wgrad(const double* x, const double* gy, double* gw, int B, int Cin, int H, int W, int Cout);

// ---- elementwise ----
void relu(const double* x, double* y, std::int64_t n);
void relu_mask(const double* x, double* y, std::int64_t n);  // 1 where x > 0
void vexp(const double* x, double* y, std::int64_t n);
void vlog(const double* x, double* y, std::int64_t n);
void vrecip(const double* x, double* y, std::int64_t n);
void vrsqrt_eps(const double* x, double* y, std::int64_t n, double eps);  // (x+eps)^-1/2
void vadd(const double* a, const double* b, double* y, std::int64_t n);
void vsub(const double* a, const double* b, double* y, std::int64_t n);
void vmul(const double* a, const double* b, double* y, std::int64_t n);
void vscale(const double* x, double* y, std::int64_t n, double c);

// ---- bias ----
void add_bias(const double* x, const double* b, double* y, int rows, int cols);
void add_channel_bias(const double* x, const double* b, double* y, int B, int C, int HW);

// ---- reductions / broadcasts ----
double sum_all(const double* x, std::int64_t n);
void row_sum(const double* x, double* y, int rows, int cols);
void row_max(const double* x, double* y, int rows, int cols);
void bcast_col(const double* v, double* y, int rows, int cols);     // y[r,c] = v[r]
void col_sum(const double* x, double* y, int rows, int cols);
void bcast_row(const double* v, double* y, int rows, int cols);     // y[r,c] = v[c]
void channel_sum(const double* x, double* y, int B, int C, int HW);
void bcast_channel(const double* v, double* y, int B, int C, int HW);
void spatial_mean_bcast(const double* x, double* y, int BC, int HW);

// ---- spatial resampling ----
void avg_pool2x(const double* x, double* y, int BC, int H, int W);
void avg_unpool2x(const double* g, double* y, int BC, int H, int W);  // H,W = unpooled dims
void bilinear_up2x(const double* x, double* y, int BC, int H, int W);
void bilinear_up2x_adj(const double* g, double* y, int BC, int H, int W);  // H,W = source dims

// Per-sample horizontal flip followed by rotation (bilinear, zero fill).
// angle in radians; one angle/flip per sample.
void rot_flip(const double* x, double* y, int B, int C, int H, int W,
              const double* angles, const std::uint8_t* flips);
void rot_flip_adj(const double* g, double* y, int B, int C, int H, int W,
                  const double* angles, const std::uint8_t* flips);

// ---- gather / scatter (serial on both backends; cheap ops) ----
void index_select_rows(const double* x, double* y, const int* idx, int n_idx, std::int64_t row_len);
void index_scatter_add_rows(const double* g, double* y, const int* idx, int n_idx, std::int64_t row_len);
void select_labels(const double* x, double* y, const int* labels, int rows, int cols);
void scatter_labels(const double* v, double* y, const int* labels, int rows, int cols);

}  // namespace memdist::kernels
