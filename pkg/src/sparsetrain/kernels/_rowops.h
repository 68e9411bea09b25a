/* Row updates for the compiled kernels: y[t*ys] += a * x[t*xs], optionally
 * gated by a skip flag. A skipped product is replaced by +0 through a bit
 * mask, which leaves the partial sum unchanged (it starts at +0 and can never
 * become -0) and keeps the loop free of branches so it vectorises. */
#ifndef SPARSETRAIN_ROWOPS_H
#define SPARSETRAIN_ROWOPS_H

#include <stdint.h>
#include <string.h>

static inline void row_axpy(float *y, Py_ssize_t ys, const float *x, Py_ssize_t xs,
                            float a, Py_ssize_t n)
{
    Py_ssize_t t;
    if (ys == 1 && xs == 1) {
        for (t = 0; t < n; t++)
            y[t] = y[t] + a * x[t];
    } else {
        for (t = 0; t < n; t++)
            y[t * ys] = y[t * ys] + a * x[t * xs];
    }
}

static inline float gate(float p, uint8_t f)
{
    uint32_t u;
    memcpy(&u, &p, 4);
    u &= -(uint32_t)(f != 0);
    memcpy(&p, &u, 4);
    return p;
}

static inline void row_axpy_sel(float *y, Py_ssize_t ys, const float *x, Py_ssize_t xs,
                                float a, const uint8_t *f, Py_ssize_t fs, Py_ssize_t n)
{
    Py_ssize_t t;
    if (ys == 1 && xs == 1 && fs == 1) {
        for (t = 0; t < n; t++)
            y[t] = y[t] + gate(a * x[t], f[t]);
    } else {
        for (t = 0; t < n; t++)
            y[t * ys] = y[t * ys] + gate(a * x[t * xs], f[t * fs]);
    }
}

#endif
