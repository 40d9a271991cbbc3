/* Vectorizable reductions. `omp simd` lets the compiler reorder the sum
 * without -ffast-math; the order is fixed per binary, so results stay
 * deterministic run to run. Build with -fno-trapping-math so the selects
 * in the PReLU loops can be if-converted. */
#ifndef DCRNET_SIMD_H
#define DCRNET_SIMD_H

#include <stddef.h>

static inline double dcr_dot_f32(const float *a, const float *b, ptrdiff_t n)
{
    float s = 0.0f;
#pragma omp simd reduction(+:s)
    for (ptrdiff_t i = 0; i < n; i++)
        s += a[i] * b[i];
    return (double)s;
}

static inline double dcr_dot_f64(const double *a, const double *b, ptrdiff_t n)
{
    double s = 0.0;
#pragma omp simd reduction(+:s)
    for (ptrdiff_t i = 0; i < n; i++)
        s += a[i] * b[i];
    return s;
}

static inline double dcr_sum_f32(const float *a, ptrdiff_t n)
{
    double s = 0.0;
#pragma omp simd reduction(+:s)
    for (ptrdiff_t i = 0; i < n; i++)
        s += (double)a[i];
    return s;
}

static inline double dcr_sum_f64(const double *a, ptrdiff_t n)
{
    double s = 0.0;
#pragma omp simd reduction(+:s)
    for (ptrdiff_t i = 0; i < n; i++)
        s += a[i];
    return s;
}

static inline void dcr_prelu_f32(float *restrict y, const float *restrict x, float a, ptrdiff_t n)
{
#pragma omp simd
    for (ptrdiff_t i = 0; i < n; i++)
        y[i] = x[i] >= 0.0f ? x[i] : a * x[i];
}

static inline void dcr_prelu_f64(double *restrict y, const double *restrict x, double a, ptrdiff_t n)
{
#pragma omp simd
    for (ptrdiff_t i = 0; i < n; i++)
        y[i] = x[i] >= 0.0 ? x[i] : a * x[i];
}

/* y = (x - m) * s, out = y * gm + bt */
static inline void dcr_bn_apply_f32(float *restrict out, float *restrict xh, const float *restrict x,
                                    float m, float s, float gm, float bt, ptrdiff_t n)
{
#pragma omp simd
    for (ptrdiff_t i = 0; i < n; i++) {
        float v = (x[i] - m) * s;
        xh[i] = v;
        out[i] = v * gm + bt;
    }
}

static inline void dcr_bn_apply_f64(double *restrict out, double *restrict xh, const double *restrict x,
                                    double m, double s, double gm, double bt, ptrdiff_t n)
{
#pragma omp simd
    for (ptrdiff_t i = 0; i < n; i++) {
        double v = (x[i] - m) * s;
        xh[i] = v;
        out[i] = v * gm + bt;
    }
}

/* gx = scale * (g - mg - xh * mgx) */
static inline void dcr_bn_grad_f32(float *restrict gx, const float *restrict g, const float *restrict xh,
                                   float scale, float mg, float mgx, ptrdiff_t n)
{
#pragma omp simd
    for (ptrdiff_t i = 0; i < n; i++)
        gx[i] = scale * (g[i] - mg - xh[i] * mgx);
}

static inline void dcr_bn_grad_f64(double *restrict gx, const double *restrict g, const double *restrict xh,
                                   double scale, double mg, double mgx, ptrdiff_t n)
{
#pragma omp simd
    for (ptrdiff_t i = 0; i < n; i++)
        gx[i] = scale * (g[i] - mg - xh[i] * mgx);
}

/* copy `rows` rows of n elements between buffers with different pitches */
static inline void dcr_copy_rows_f32(float *restrict dst, ptrdiff_t dpitch, const float *restrict src,
                                     ptrdiff_t spitch, ptrdiff_t rows, ptrdiff_t n)
{
    for (ptrdiff_t r = 0; r < rows; r++) {
        float *restrict d = dst + r * dpitch;
        const float *restrict s = src + r * spitch;
#pragma omp simd
        for (ptrdiff_t i = 0; i < n; i++)
            d[i] = s[i];
    }
}

static inline void dcr_copy_rows_f64(double *restrict dst, ptrdiff_t dpitch, const double *restrict src,
                                     ptrdiff_t spitch, ptrdiff_t rows, ptrdiff_t n)
{
    for (ptrdiff_t r = 0; r < rows; r++) {
        double *restrict d = dst + r * dpitch;
        const double *restrict s = src + r * spitch;
#pragma omp simd
        for (ptrdiff_t i = 0; i < n; i++)
            d[i] = s[i];
    }
}

/* first and second moments about a shift `c` in one pass */
static inline void dcr_moments_f32(const float *a, double c, ptrdiff_t n, double *s1, double *s2)
{
    double p = 0.0, q = 0.0;
#pragma omp simd reduction(+:p, q)
    for (ptrdiff_t i = 0; i < n; i++) {
        double d = (double)a[i] - c;
        p += d;
        q += d * d;
    }
    *s1 += p;
    *s2 += q;
}

static inline void dcr_moments_f64(const double *a, double c, ptrdiff_t n, double *s1, double *s2)
{
    double p = 0.0, q = 0.0;
#pragma omp simd reduction(+:p, q)
    for (ptrdiff_t i = 0; i < n; i++) {
        double d = a[i] - c;
        p += d;
        q += d * d;
    }
    *s1 += p;
    *s2 += q;
}

/* PReLU input gradient plus the slope gradient (sum of g*x over x < 0) */
static inline double dcr_prelu_back_f32(float *restrict gx, const float *restrict g,
                                        const float *restrict x, float a, ptrdiff_t n)
{
    double s = 0.0;
#pragma omp simd reduction(+:s)
    for (ptrdiff_t i = 0; i < n; i++) {
        int neg = x[i] < 0.0f;
        gx[i] = neg ? a * g[i] : g[i];
        s += neg ? (double)(g[i] * x[i]) : 0.0;
    }
    return s;
}

static inline double dcr_prelu_back_f64(double *restrict gx, const double *restrict g,
                                        const double *restrict x, double a, ptrdiff_t n)
{
    double s = 0.0;
#pragma omp simd reduction(+:s)
    for (ptrdiff_t i = 0; i < n; i++) {
        int neg = x[i] < 0.0;
        gx[i] = neg ? a * g[i] : g[i];
        s += neg ? g[i] * x[i] : 0.0;
    }
    return s;
}

/* Batch norm followed by PReLU, fused so the normalized value is never
 * stored: xh = (x - m) * s, z = xh * gm + bt, y = z >= 0 ? z : a * z.
 * The backward passes recompute xh and z from x. */
#define DCR_DEFINE_BNP(T, SUF)                                                          \
    static inline void dcr_bnp_apply_##SUF(T *restrict y, const T *restrict x, T m, T s, \
                                           T gm, T bt, T a, ptrdiff_t n)                 \
    {                                                                                   \
        _Pragma("omp simd")                                                             \
        for (ptrdiff_t i = 0; i < n; i++) {                                             \
            T z = ((x[i] - m) * s) * gm + bt;                                           \
            y[i] = z >= (T)0 ? z : a * z;                                               \
        }                                                                               \
    }                                                                                   \
                                                                                        \
    /* accumulates sum(gz), sum(gz * xh) and the slope gradient sum(g * z, z < 0) */    \
    static inline void dcr_bnp_sums_##SUF(const T *restrict g, const T *restrict x, T m, \
                                          T s, T gm, T bt, T a, ptrdiff_t n,             \
                                          double *sg, double *sgx, double *sa)           \
    {                                                                                   \
        double p = 0.0, q = 0.0, r = 0.0;                                               \
        _Pragma("omp simd reduction(+:p, q, r)")                                        \
        for (ptrdiff_t i = 0; i < n; i++) {                                             \
            T xh = (x[i] - m) * s;                                                      \
            T z = xh * gm + bt;                                                         \
            int neg = z < (T)0;                                                         \
            T gz = neg ? a * g[i] : g[i];                                               \
            p += (double)gz;                                                            \
            q += (double)(gz * xh);                                                     \
            r += neg ? (double)(g[i] * z) : 0.0;                                        \
        }                                                                               \
        *sg += p;                                                                       \
        *sgx += q;                                                                      \
        *sa += r;                                                                       \
    }                                                                                   \
                                                                                        \
    /* gx = scale * (gz - mg - xh * mgx) */                                             \
    static inline void dcr_bnp_grad_##SUF(T *restrict gx, const T *restrict g,          \
                                          const T *restrict x, T m, T s, T gm, T bt, T a, \
                                          T scale, T mg, T mgx, ptrdiff_t n)             \
    {                                                                                   \
        _Pragma("omp simd")                                                             \
        for (ptrdiff_t i = 0; i < n; i++) {                                             \
            T xh = (x[i] - m) * s;                                                      \
            T z = xh * gm + bt;                                                         \
            T gz = z < (T)0 ? a * g[i] : g[i];                                          \
            gx[i] = scale * (gz - mg - xh * mgx);                                       \
        }                                                                               \
    }

DCR_DEFINE_BNP(float, f32)
DCR_DEFINE_BNP(double, f64)

#endif
