#include "memdist/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace memdist::kernels {

namespace {

Backend g_backend = Backend::openmp;
int g_max_threads = 0;  // 0 = uninitialized

int env_thread_cap() {
    const char* s = std::getenv("MEMDISTILL_THREADS");
    if (!s) return 0;
    const int v = std::atoi(s);
    return v > 0 ? v : 0;
}

int hw_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

bool use_omp(std::int64_t work) {
    return g_backend == Backend::openmp && max_threads() > 1 && work >= 16384;
}

}  // namespace

void set_backend(Backend b) { g_backend = b; }
Backend backend() { return g_backend; }

int max_threads() {
    if (g_max_threads == 0) {
        const int cap = env_thread_cap();
        g_max_threads = cap > 0 ? std::min(cap, hw_threads()) : hw_threads();
    }
    return g_max_threads;
}

void set_max_threads(int n) { g_max_threads = n > 0 ? n : hw_threads(); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

inline double mm_at(const double* p, int r, int c, int ld, bool trans) {
    return trans ? p[static_cast<std::int64_t>(c) * ld + r] : p[static_cast<std::int64_t>(r) * ld + c];
}

// Serial reference: plain triple loop, k innermost ascending.
void matmul_serial(const double* a, const double* b, double* c, int m, int k, int n, bool ta, bool tb) {
    const int lda = ta ? m : k;
    const int ldb = tb ? k : n;
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += mm_at(a, i, p, lda, ta) * mm_at(b, p, j, ldb, tb);
            c[static_cast<std::int64_t>(i) * n + j] = acc;
        }
    }
}

// One output row; accumulation over k ascending for each element, same order
// as the serial reference.
inline void matmul_row(const double* a, const double* b, double* crow, int i, int m, int k, int n,
                       bool ta, bool tb) {
    const int lda = ta ? m : k;
    const int ldb = tb ? k : n;
    if (!tb) {
        for (int j = 0; j < n; ++j) crow[j] = 0.0;
        for (int p = 0; p < k; ++p) {
            const double aip = mm_at(a, i, p, lda, ta);
            const double* brow = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    } else {
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::int64_t>(j) * k;
            double acc = 0.0;
            if (!ta) {
                const double* arow = a + static_cast<std::int64_t>(i) * k;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            } else {
                for (int p = 0; p < k; ++p) acc += a[static_cast<std::int64_t>(p) * m + i] * brow[p];
            }
            crow[j] = acc;
        }
    }
}

}  // namespace

void matmul(const double* a, const double* b, double* c, int m, int k, int n, bool ta, bool tb) {
    if (g_backend == Backend::serial) {
        matmul_serial(a, b, c, m, k, n, ta, tb);
        return;
    }
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(work))
    for (int i = 0; i < m; ++i) matmul_row(a, b, c + static_cast<std::int64_t>(i) * n, i, m, k, n, ta, tb);
}

// ---------------------------------------------------------------------------
// conv2d 3x3 stride 1 pad 1
// ---------------------------------------------------------------------------

namespace {

// x and y already offset to the sample; writes output channel co.
inline void conv2d_fwd_one(const double* x, const double* w, double* y, int co, int Cin, int H, int W) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    double* yp = y + static_cast<std::int64_t>(co) * hw;
    for (int oh = 0; oh < H; ++oh) {
        for (int ow = 0; ow < W; ++ow) {
            double acc = 0.0;
            for (int ci = 0; ci < Cin; ++ci) {
                const double* xp = x + ci * hw;
                const double* wp = w + (static_cast<std::int64_t>(co) * Cin + ci) * 9;
                for (int kh = 0; kh < 3; ++kh) {
                    const int ih = oh + kh - 1;
                    if (ih < 0 || ih >= H) continue;
                    for (int kw = 0; kw < 3; ++kw) {
                        const int iw = ow + kw - 1;
                        if (iw < 0 || iw >= W) continue;
                        acc += xp[static_cast<std::int64_t>(ih) * W + iw] * wp[kh * 3 + kw];
                    }
                }
            }
            yp[static_cast<std::int64_t>(oh) * W + ow] = acc;
        }
    }
}

void conv2d_fwd_serial(const double* x, const double* w, double* y, int B, int Cin, int H, int W, int Cout) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co)
            conv2d_fwd_one(x + b * Cin * hw, w, y + b * Cout * hw, co, Cin, H, W);
}

inline void conv2d_igrad_one(const double* gy, const double* w, double* gx, int ci, int Cin, int H, int W,
                             int Cout) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    double* gp = gx + ci * hw;
    for (int h = 0; h < H; ++h) {
        for (int ww_ = 0; ww_ < W; ++ww_) {
            double acc = 0.0;
            for (int co = 0; co < Cout; ++co) {
                const double* gyp = gy + co * hw;
                const double* wp = w + (static_cast<std::int64_t>(co) * Cin + ci) * 9;
                for (int kh = 0; kh < 3; ++kh) {
                    const int oh = h - kh + 1;
                    if (oh < 0 || oh >= H) continue;
                    for (int kw = 0; kw < 3; ++kw) {
                        const int ow = ww_ - kw + 1;
                        if (ow < 0 || ow >= W) continue;
                        acc += gyp[static_cast<std::int64_t>(oh) * W + ow] * wp[kh * 3 + kw];
                    }
                }
            }
            gp[static_cast<std::int64_t>(h) * W + ww_] = acc;
        }
    }
}

void conv2d_igrad_serial(const double* gy, const double* w, double* gx, int B, int Cin, int H, int W,
                         int Cout) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (int ci = 0; ci < Cin; ++ci)
            conv2d_igrad_one(gy + b * Cout * hw, w, gx + b * Cin * hw, ci, Cin, H, W, Cout);
}

inline void conv2d_wgrad_one(const double* x, const double* gy, double* gw, int co, int ci, int B, int Cin,
                             int H, int W, int Cout) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    double* wp = gw + (static_cast<std::int64_t>(co) * Cin + ci) * 9;
    for (int kh = 0; kh < 3; ++kh) {
        for (int kw = 0; kw < 3; ++kw) {
            double acc = 0.0;
            for (int b = 0; b < B; ++b) {
                const double* xp = x + (static_cast<std::int64_t>(b) * Cin + ci) * hw;
                const double* gyp = gy + (static_cast<std::int64_t>(b) * Cout + co) * hw;
                const int oh0 = std::max(0, 1 - kh), oh1 = std::min(H, H + 1 - kh);
                const int ow0 = std::max(0, 1 - kw), ow1 = std::min(W, W + 1 - kw);
                for (int oh = oh0; oh < oh1; ++oh) {
                    const int ih = oh + kh - 1;
                    for (int ow = ow0; ow < ow1; ++ow)
                        acc += xp[static_cast<std::int64_t>(ih) * W + (ow + kw - 1)] *
                               gyp[static_cast<std::int64_t>(oh) * W + ow];
                }
            }
            wp[kh * 3 + kw] = acc;
        }
    }
}

void conv2d_wgrad_serial(const double* x, const double* gy, double* gw, int B, int Cin, int H, int W,
                         int Cout) {
    for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci) conv2d_wgrad_one(x, gy, gw, co, ci, B, Cin, H, W, Cout);
}

}  // namespace

void conv2d_fwd(const double* x, const double* w, double* y, int B, int Cin, int H, int W, int Cout) {
    if (g_backend == Backend::serial) {
        conv2d_fwd_serial(x, w, y, B, Cin, H, W, Cout);
        return;
    }
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t work = static_cast<std::int64_t>(B) * Cout * Cin * hw * 9;
    const int tasks = B * Cout;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(work))
    for (int t = 0; t < tasks; ++t) {
        const int b = t / Cout, co = t % Cout;
        conv2d_fwd_one(x + b * Cin * hw, w, y + b * Cout * hw, co, Cin, H, W);
    }
}

void conv2d_igrad(const double* gy, const double* w, double* gx, int B, int Cin, int H, int W, int Cout) {
    if (g_backend == Backend::serial) {
        conv2d_igrad_serial(gy, w, gx, B, Cin, H, W, Cout);
        return;
    }
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t work = static_cast<std::int64_t>(B) * Cout * Cin * hw * 9;
    const int tasks = B * Cin;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(work))
    for (int t = 0; t < tasks; ++t) {
        const int b = t / Cin, ci = t % Cin;
        conv2d_igrad_one(gy + b * Cout * hw, w, gx + b * Cin * hw, ci, Cin, H, W, Cout);
    }
}

void conv2d_wgrad(const double* x, const double* gy, double* gw, int B, int Cin, int H, int W, int Cout) {
    if (g_backend == Backend::serial) {
        conv2d_wgrad_serial(x, gy, gw, B, Cin, H, W, Cout);
        return;
    }
    const std::int64_t work = static_cast<std::int64_t>(B) * Cout * Cin * H * W * 9;
    const int tasks = Cout * Cin;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(work))
    for (int t = 0; t < tasks; ++t)
        conv2d_wgrad_one(x, gy, gw, t / Cin, t % Cin, B, Cin, H, W, Cout);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

#define MEMDIST_ELEMENTWISE(expr)                                                             \
    if (g_backend == Backend::serial) {                                                       \
        for (std::int64_t i = 0; i < n; ++i) expr;                                            \
        return;                                                                               \
    }                                                                                         \
    _Pragma("omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))")   \
    for (std::int64_t i = 0; i < n; ++i) expr;

void relu(const double* x, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = x[i] > 0.0 ? x[i] : 0.0) }
void relu_mask(const double* x, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = x[i] > 0.0 ? 1.0 : 0.0) }
void vexp(const double* x, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = std::exp(x[i])) }
void vlog(const double* x, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = std::log(x[i])) }
void vrecip(const double* x, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = 1.0 / x[i]) }
void vrsqrt_eps(const double* x, double* y, std::int64_t n, double eps) {
    MEMDIST_ELEMENTWISE(y[i] = 1.0 / std::sqrt(x[i] + eps))
}
void vadd(const double* a, const double* b, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = a[i] + b[i]) }
void vsub(const double* a, const double* b, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = a[i] - b[i]) }
void vmul(const double* a, const double* b, double* y, std::int64_t n) { MEMDIST_ELEMENTWISE(y[i] = a[i] * b[i]) }
void vscale(const double* x, double* y, std::int64_t n, double c) { MEMDIST_ELEMENTWISE(y[i] = c * x[i]) }

#undef MEMDIST_ELEMENTWISE

// ---------------------------------------------------------------------------
// bias
// ---------------------------------------------------------------------------

void add_bias(const double* x, const double* b, double* y, int rows, int cols) {
    const std::int64_t n = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int r = 0; r < rows; ++r) {
        const double* xp = x + static_cast<std::int64_t>(r) * cols;
        double* yp = y + static_cast<std::int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) yp[c] = xp[c] + b[c];
    }
}

void add_channel_bias(const double* x, const double* b, double* y, int B, int C, int HW) {
    const int tasks = B * C;
    const std::int64_t n = static_cast<std::int64_t>(tasks) * HW;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int t = 0; t < tasks; ++t) {
        const double bias = b[t % C];
        const double* xp = x + static_cast<std::int64_t>(t) * HW;
        double* yp = y + static_cast<std::int64_t>(t) * HW;
        for (int i = 0; i < HW; ++i) yp[i] = xp[i] + bias;
    }
}

// ---------------------------------------------------------------------------
// reductions / broadcasts
// ---------------------------------------------------------------------------

namespace {
constexpr std::int64_t kSumBlock = 1024;
}

// Fixed-block pairwise sum: block partials in index order, then a serial sum
// of the partials. Identical structure on both backends, so the result does
// not depend on the thread count.
double sum_all(const double* x, std::int64_t n) {
    const std::int64_t nb = (n + kSumBlock - 1) / kSumBlock;
    if (nb <= 1) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += x[i];
        return acc;
    }
    std::vector<double> partial(static_cast<size_t>(nb));
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (g_backend == Backend::openmp && max_threads() > 1 && n >= 65536)
    for (std::int64_t b = 0; b < nb; ++b) {
        const std::int64_t lo = b * kSumBlock, hi = std::min(n, lo + kSumBlock);
        double acc = 0.0;
        for (std::int64_t i = lo; i < hi; ++i) acc += x[i];
        partial[static_cast<size_t>(b)] = acc;
    }
    double total = 0.0;
    for (std::int64_t b = 0; b < nb; ++b) total += partial[static_cast<size_t>(b)];
    return total;
}

void row_sum(const double* x, double* y, int rows, int cols) {
    const std::int64_t n = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int r = 0; r < rows; ++r) {
        const double* xp = x + static_cast<std::int64_t>(r) * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += xp[c];
        y[r] = acc;
    }
}

void row_max(const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* xp = x + static_cast<std::int64_t>(r) * cols;
        double m = xp[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, xp[c]);
        y[r] = m;
    }
}

void bcast_col(const double* v, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double* yp = y + static_cast<std::int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) yp[c] = v[r];
    }
}

void col_sum(const double* x, double* y, int rows, int cols) {
    for (int c = 0; c < cols; ++c) y[c] = 0.0;
    for (int r = 0; r < rows; ++r) {
        const double* xp = x + static_cast<std::int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) y[c] += xp[c];
    }
}

void bcast_row(const double* v, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) std::memcpy(y + static_cast<std::int64_t>(r) * cols, v, sizeof(double) * static_cast<size_t>(cols));
}

void channel_sum(const double* x, double* y, int B, int C, int HW) {
    for (int c = 0; c < C; ++c) y[c] = 0.0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xp = x + (static_cast<std::int64_t>(b) * C + c) * HW;
            double acc = 0.0;
            for (int i = 0; i < HW; ++i) acc += xp[i];
            y[c] += acc;
        }
}

void bcast_channel(const double* v, double* y, int B, int C, int HW) {
    const int tasks = B * C;
    for (int t = 0; t < tasks; ++t) {
        const double val = v[t % C];
        double* yp = y + static_cast<std::int64_t>(t) * HW;
        for (int i = 0; i < HW; ++i) yp[i] = val;
    }
}

void spatial_mean_bcast(const double* x, double* y, int BC, int HW) {
    const std::int64_t n = static_cast<std::int64_t>(BC) * HW;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int t = 0; t < BC; ++t) {
        const double* xp = x + static_cast<std::int64_t>(t) * HW;
        double acc = 0.0;
        for (int i = 0; i < HW; ++i) acc += xp[i];
        const double m = acc / HW;
        double* yp = y + static_cast<std::int64_t>(t) * HW;
        for (int i = 0; i < HW; ++i) yp[i] = m;
    }
}

// ---------------------------------------------------------------------------
// spatial resampling
// ---------------------------------------------------------------------------

void avg_pool2x(const double* x, double* y, int BC, int H, int W) {
    const int Ho = H / 2, Wo = W / 2;
    const std::int64_t n = static_cast<std::int64_t>(BC) * H * W;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int t = 0; t < BC; ++t) {
        const double* xp = x + static_cast<std::int64_t>(t) * H * W;
        double* yp = y + static_cast<std::int64_t>(t) * Ho * Wo;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                const double* p = xp + static_cast<std::int64_t>(2 * i) * W + 2 * j;
                yp[static_cast<std::int64_t>(i) * Wo + j] = (p[0] + p[1] + p[W] + p[W + 1]) * 0.25;
            }
    }
}

void avg_unpool2x(const double* g, double* y, int BC, int H, int W) {
    const int Ho = H / 2, Wo = W / 2;
    const std::int64_t n = static_cast<std::int64_t>(BC) * H * W;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int t = 0; t < BC; ++t) {
        const double* gp = g + static_cast<std::int64_t>(t) * Ho * Wo;
        double* yp = y + static_cast<std::int64_t>(t) * H * W;
        for (int p = 0; p < H; ++p)
            for (int q = 0; q < W; ++q) {
                const int i = p / 2, j = q / 2;
                yp[static_cast<std::int64_t>(p) * W + q] =
                    (i < Ho && j < Wo) ? gp[static_cast<std::int64_t>(i) * Wo + j] * 0.25 : 0.0;
            }
    }
}

namespace {

// Source coordinate and bilinear taps for output index i of the 2x upsample.
// src = (i + 0.5)/2 - 0.5, clamped to [0, n-1].
struct Taps {
    int lo, hi;
    double wlo, whi;
};

inline Taps up2x_taps(int i, int n) {
    double src = (i + 0.5) * 0.5 - 0.5;
    src = std::max(0.0, std::min(static_cast<double>(n - 1), src));
    const int lo = static_cast<int>(std::floor(src));
    const double t = src - lo;
    return {lo, std::min(lo + 1, n - 1), 1.0 - t, t};
}

}  // namespace

void bilinear_up2x(const double* x, double* y, int BC, int H, int W) {
    const int Ho = 2 * H, Wo = 2 * W;
    const std::int64_t n = static_cast<std::int64_t>(BC) * Ho * Wo;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int t = 0; t < BC; ++t) {
        const double* xp = x + static_cast<std::int64_t>(t) * H * W;
        double* yp = y + static_cast<std::int64_t>(t) * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
            const Taps ty = up2x_taps(i, H);
            for (int j = 0; j < Wo; ++j) {
                const Taps tx = up2x_taps(j, W);
                yp[static_cast<std::int64_t>(i) * Wo + j] =
                    ty.wlo * (tx.wlo * xp[static_cast<std::int64_t>(ty.lo) * W + tx.lo] +
                              tx.whi * xp[static_cast<std::int64_t>(ty.lo) * W + tx.hi]) +
                    ty.whi * (tx.wlo * xp[static_cast<std::int64_t>(ty.hi) * W + tx.lo] +
                              tx.whi * xp[static_cast<std::int64_t>(ty.hi) * W + tx.hi]);
            }
        }
    }
}

void bilinear_up2x_adj(const double* g, double* y, int BC, int H, int W) {
    const int Ho = 2 * H, Wo = 2 * W;
    const std::int64_t n = static_cast<std::int64_t>(BC) * Ho * Wo;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int t = 0; t < BC; ++t) {
        const double* gp = g + static_cast<std::int64_t>(t) * Ho * Wo;
        double* yp = y + static_cast<std::int64_t>(t) * H * W;
        for (int p = 0; p < H; ++p) {
            for (int q = 0; q < W; ++q) {
                double acc = 0.0;
                // Candidate output rows/cols whose stencil can include (p, q).
                for (int i = std::max(0, 2 * p - 1); i <= std::min(Ho - 1, 2 * p + 2); ++i) {
                    const Taps ty = up2x_taps(i, H);
                    double wy = 0.0;
                    if (ty.lo == p) wy += ty.wlo;
                    if (ty.hi == p) wy += ty.whi;
                    if (wy == 0.0) continue;
                    for (int j = std::max(0, 2 * q - 1); j <= std::min(Wo - 1, 2 * q + 2); ++j) {
                        const Taps tx = up2x_taps(j, W);
                        double wx = 0.0;
                        if (tx.lo == q) wx += tx.wlo;
                        if (tx.hi == q) wx += tx.whi;
                        if (wx == 0.0) continue;
                        acc += wy * wx * gp[static_cast<std::int64_t>(i) * Wo + j];
                    }
                }
                yp[static_cast<std::int64_t>(p) * W + q] = acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// flip + rotate (bilinear, zero fill)
// ---------------------------------------------------------------------------

namespace {

// Source coordinates (in the original image) sampled by output pixel (r, c):
// inverse-rotate around the center, then undo the horizontal flip.
inline void rot_src(int r, int c, int H, int W, double cs, double sn, bool flip, double& sy, double& sx) {
    const double cy = 0.5 * (H - 1), cx = 0.5 * (W - 1);
    const double dy = r - cy, dx = c - cx;
    sx = cs * dx + sn * dy + cx;
    sy = -sn * dx + cs * dy + cy;
    if (flip) sx = (W - 1) - sx;
}

}  // namespace

void rot_flip(const double* x, double* y, int B, int C, int H, int W, const double* angles,
              const std::uint8_t* flips) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t n = static_cast<std::int64_t>(B) * C * hw;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int b = 0; b < B; ++b) {
        const double cs = std::cos(angles[b]), sn = std::sin(angles[b]);
        const bool fl = flips[b] != 0;
        for (int ch = 0; ch < C; ++ch) {
            const double* xp = x + (static_cast<std::int64_t>(b) * C + ch) * hw;
            double* yp = y + (static_cast<std::int64_t>(b) * C + ch) * hw;
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) {
                    double sy, sx;
                    rot_src(r, c, H, W, cs, sn, fl, sy, sx);
                    const int fy = static_cast<int>(std::floor(sy)), fx = static_cast<int>(std::floor(sx));
                    const double tv = sy - fy, tu = sx - fx;
                    double acc = 0.0;
                    for (int dy = 0; dy <= 1; ++dy)
                        for (int dx = 0; dx <= 1; ++dx) {
                            const int yy = fy + dy, xx = fx + dx;
                            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                            const double wgt = (dy ? tv : 1.0 - tv) * (dx ? tu : 1.0 - tu);
                            acc += wgt * xp[static_cast<std::int64_t>(yy) * W + xx];
                        }
                    yp[static_cast<std::int64_t>(r) * W + c] = acc;
                }
        }
    }
}

void rot_flip_adj(const double* g, double* y, int B, int C, int H, int W, const double* angles,
                  const std::uint8_t* flips) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t n = static_cast<std::int64_t>(B) * C * hw;
#pragma omp parallel for schedule(static) num_threads(max_threads()) if (use_omp(n))
    for (int b = 0; b < B; ++b) {
        const double ang = angles[b];
        const double cs = std::cos(ang), sn = std::sin(ang);
        const bool fl = flips[b] != 0;
        const double cy = 0.5 * (H - 1), cx = 0.5 * (W - 1);
        for (int ch = 0; ch < C; ++ch) {
            const double* gp = g + (static_cast<std::int64_t>(b) * C + ch) * hw;
            double* yp = y + (static_cast<std::int64_t>(b) * C + ch) * hw;
            for (int p = 0; p < H; ++p)
                for (int q = 0; q < W; ++q) {
                    // Forward-map source pixel (p, q) to locate candidate outputs.
                    double fx = fl ? (W - 1) - static_cast<double>(q) : static_cast<double>(q);
                    const double dy = p - cy, dx = fx - cx;
                    const double oy = cy + sn * dx + cs * dy;
                    const double ox = cx + cs * dx - sn * dy;
                    double acc = 0.0;
                    const int r0 = std::max(0, static_cast<int>(std::floor(oy)) - 2);
                    const int r1 = std::min(H - 1, static_cast<int>(std::floor(oy)) + 2);
                    const int c0 = std::max(0, static_cast<int>(std::floor(ox)) - 2);
                    const int c1 = std::min(W - 1, static_cast<int>(std::floor(ox)) + 2);
                    for (int r = r0; r <= r1; ++r)
                        for (int c = c0; c <= c1; ++c) {
                            double sy, sx;
                            rot_src(r, c, H, W, cs, sn, fl, sy, sx);
                            const int fy = static_cast<int>(std::floor(sy)),
                                      fxx = static_cast<int>(std::floor(sx));
                            if (p < fy || p > fy + 1 || q < fxx || q > fxx + 1) continue;
                            const double tv = sy - fy, tu = sx - fxx;
                            const double wgt = (p == fy ? 1.0 - tv : tv) * (q == fxx ? 1.0 - tu : tu);
                            acc += wgt * gp[static_cast<std::int64_t>(r) * W + c];
                        }
                    yp[static_cast<std::int64_t>(p) * W + q] = acc;
                }
        }
    }
}

// ---------------------------------------------------------------------------
// gather / scatter
// ---------------------------------------------------------------------------

void index_select_rows(const double* x, double* y, const int* idx, int n_idx, std::int64_t row_len) {
    for (int i = 0; i < n_idx; ++i)
        std::memcpy(y + i * row_len, x + idx[i] * row_len, sizeof(double) * static_cast<size_t>(row_len));
}

void index_scatter_add_rows(const double* g, double* y, const int* idx, int n_idx, std::int64_t row_len) {
    for (int i = 0; i < n_idx; ++i) {
        const double* gp = g + i * row_len;
        double* yp = y + idx[i] * row_len;
        for (std::int64_t j = 0; j < row_len; ++j) yp[j] += gp[j];
    }
}

void select_labels(const double* x, double* y, const int* labels, int rows, int cols) {
    for (int r = 0; r < rows; ++r) y[r] = x[static_cast<std::int64_t>(r) * cols + labels[r]];
}

void scatter_labels(const double* v, double* y, const int* labels, int rows, int cols) {
    std::memset(y, 0, sizeof(double) * static_cast<size_t>(rows) * static_cast<size_t>(cols));
    for (int r = 0; r < rows; ++r) y[static_cast<std::int64_t>(r) * cols + labels[r]] = v[r];
}

}  // namespace memdist::kernels
