/* Register-blocked convolution inner loops (GCC/Clang vector extensions).
 *
 * A stride-1 convolution on a zero-padded plane laid out with row pitch Wp is
 * a sum of shifted copies of the input: every kernel tap t contributes
 * w[t] * src[off[t] + k] to output position k. dcr_taps_* evaluates that sum
 * for a run of positions while keeping the accumulators in registers; the
 * transposed convolution (input gradient) uses the same loop with negated
 * offsets into a front-padded gradient buffer. dcr_tapdots_* computes every
 * tap's dot product (weight gradient) in a single sweep over the positions.
 *
 * Buffers must carry DCR_SLACK readable elements past the logical end.
 */
#ifndef DCRNET_CONV_H
#define DCRNET_CONV_H

#include <stddef.h>

#define DCR_SLACK 256

typedef float dcr_vf __attribute__((vector_size(64), aligned(4)));
typedef double dcr_vd __attribute__((vector_size(64), aligned(8)));

#define DCR_DEFINE_CONV(T, V, SUF)                                                        \
    enum { DCR_VL_##SUF = (int)(sizeof(V) / sizeof(T)) };                                 \
                                                                                          \
    /* the vector typedefs are under-aligned, so these are unaligned moves */            \
    static inline V dcr_load_##SUF(const T *p) { return *(const V *)p; }                  \
                                                                                          \
    static inline void dcr_store_##SUF(T *p, V v) { *(V *)p = v; }                        \
                                                                                          \
    /* dst[k] = sum_t w[t] * src[off[t] + k] for k < n, n rounded up to 4 vectors */      \
    static inline void dcr_taps_##SUF(T *dst, const T *src, const ptrdiff_t *off,         \
                                      const T *w, ptrdiff_t ntaps, ptrdiff_t n)           \
    {                                                                                     \
        const ptrdiff_t VL = DCR_VL_##SUF;                                                \
        for (ptrdiff_t k = 0; k < n; k += 4 * VL) {                                       \
            V a0 = {0}, a1 = {0}, a2 = {0}, a3 = {0};                                     \
            for (ptrdiff_t t = 0; t < ntaps; t++) {                                       \
                const T *s = src + off[t] + k;                                            \
                const T wt = w[t];                                                        \
                a0 += wt * dcr_load_##SUF(s);                                             \
                a1 += wt * dcr_load_##SUF(s + VL);                                        \
                a2 += wt * dcr_load_##SUF(s + 2 * VL);                                    \
                a3 += wt * dcr_load_##SUF(s + 3 * VL);                                    \
            }                                                                             \
            dcr_store_##SUF(dst + k, a0);                                                 \
            dcr_store_##SUF(dst + k + VL, a1);                                            \
            dcr_store_##SUF(dst + k + 2 * VL, a2);                                        \
            dcr_store_##SUF(dst + k + 3 * VL, a3);                                        \
        }                                                                                 \
    }                                                                                     \
                                                                                          \
    /* out[t] += sum_{k<n} g[k] * src[off[t] + k]; n rounded up to a vector; scratch     \
     * holds ntaps vectors */                                                             \
    static inline void dcr_tapdots_##SUF(double *out, const T *g, const T *src,           \
                                         const ptrdiff_t *off, ptrdiff_t ntaps,           \
                                         ptrdiff_t n, void *scratch_)                     \
    {                                                                                     \
        const ptrdiff_t VL = DCR_VL_##SUF;                                                \
        V *scratch = (V *)scratch_;                                                       \
        const V zero = {0};                                                               \
        for (ptrdiff_t t = 0; t < ntaps; t++)                                             \
            scratch[t] = zero;                                                            \
        for (ptrdiff_t k = 0; k < n; k += VL) {                                           \
            const V gv = dcr_load_##SUF(g + k);                                           \
            for (ptrdiff_t t = 0; t < ntaps; t++)                                         \
                scratch[t] += gv * dcr_load_##SUF(src + off[t] + k);                      \
        }                                                                                 \
        for (ptrdiff_t t = 0; t < ntaps; t++) {                                           \
            double s = 0.0;                                                               \
            for (ptrdiff_t j = 0; j < VL; j++)                                            \
                s += (double)scratch[t][j];                                               \
            out[t] += s;                                                                  \
        }                                                                                 \
    }

DCR_DEFINE_CONV(float, dcr_vf, f32)
DCR_DEFINE_CONV(double, dcr_vd, f64)

#endif
