# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled CNMP training kernels.

Parameters live in one flat float64 vector.  ``layout`` has one row per dense
layer, ``(weight_offset, bias_offset, n_in, n_out)``; weights are row-major
``(n_out, n_in)``.  The first ``n_enc`` rows are encoder layers, the rest are
decoder layers.  Hidden layers use ReLU, the last layer of each stack is
linear.  Matrix products go through BLAS ``dgemm`` on row-major buffers by
treating them as transposed column-major matrices.
"""
from libc.math cimport exp, log, log1p, sqrt, fabs
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cdef double HALF_LOG_2PI = 0.91893853320467274178

cdef extern from *:
    """
    #include <float.h>
    #include <math.h>
    /* restrict lets gcc vectorize; sqrt vectorizes under -fno-math-errno */
    static long _count_nonfinite(const double* restrict g, long n) {
        long bad = 0;
        for (long k = 0; k < n; ++k) bad += !(fabs(g[k]) <= DBL_MAX);
        return bad;
    }
    static void _adam_folded(double* restrict th, const double* restrict g,
                             double* restrict m, double* restrict v, long n,
                             double b1, double b2, double lr_t, double eps_t) {
        const double a1 = 1.0 - b1, a2 = 1.0 - b2;
        for (long k = 0; k < n; ++k) {
            double gk = g[k];
            double mk = b1 * m[k] + a1 * gk;
            double vk = b2 * v[k] + a2 * (gk * gk);
            /* flush decaying moments before they go subnormal (very slow) */
            mk = fabs(mk) < 1e-200 ? 0.0 : mk;
            vk = vk < 1e-200 ? 0.0 : vk;
            m[k] = mk;
            v[k] = vk;
            th[k] -= lr_t * mk / (sqrt(vk) + eps_t);
        }
    }
    """
    long _count_nonfinite(const double* g, long n) nogil
    void _adam_folded(double* th, const double* g, double* m, double* v, long n,
                      double b1, double b2, double lr_t, double eps_t) nogil


cdef inline void _dense_fwd(const double* w, const double* b, const double* a, double* c,
                            int n, int nin, int nout, bint relu) noexcept nogil:
    cdef int i, k
    cdef double one = 1.0
    cdef char ta = b'T'
    cdef char tb = b'N'
    for i in range(n):
        memcpy(c + i * nout, b, nout * sizeof(double))
    dgemm(&ta, &tb, &nout, &n, &nin, &one, <double*>w, &nin, <double*>a, &nin, &one, c, &nout)
    if relu:
        for k in range(n * nout):
            if c[k] < 0.0:
                c[k] = 0.0


cdef inline void _dense_bwd(const double* w, const double* a, const double* dc, double* dw,
                            double* db, double* da, int n, int nin, int nout) noexcept nogil:
    # dc: (n, nout) gradient w.r.t. pre-activation; da may be NULL
    cdef int i, j
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef char tn = b'N'
    cdef char tt = b'T'
    dgemm(&tn, &tt, &nin, &nout, &n, &one, <double*>a, &nin, <double*>dc, &nout, &zero, dw, &nin)
    for j in range(nout):
        db[j] = 0.0
    for i in range(n):
        for j in range(nout):
            db[j] += dc[i * nout + j]
    if da != NULL:
        dgemm(&tn, &tn, &nin, &n, &nout, &one, <double*>w, &nin, <double*>dc, &nout, &zero, da, &nin)


cdef inline double _softplus(double x) noexcept nogil:
    return (x if x > 0.0 else 0.0) + log1p(exp(-fabs(x)))


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def loss_grad(double[::1] theta, double[::1] grad, long[:, ::1] layout, int n_enc,
              double[:, ::1] obs, double[::1] ctx, double[::1] tx, double[:, ::1] ty,
              double floor):
    """Gaussian NLL of targets ``(tx, ty)`` given observations; fills ``grad``.

    Returns the loss averaged over targets and output dimensions.
    """
    cdef int n_layers = layout.shape[0]
    cdef int n_dec = n_layers - n_enc
    cdef int n = obs.shape[0]
    cdef int nt = tx.shape[0]
    cdef int d = ty.shape[1]
    cdef int nc = ctx.shape[0]
    cdef int width = <int>layout[n_enc - 1, 3]
    cdef int q_in = <int>layout[n_enc, 2]
    if obs.shape[1] != layout[0, 2] or q_in != width + nc + 1 or layout[n_layers - 1, 3] != 2 * d:
        raise ValueError("observation/context/target sizes do not match the network layout")
    if n < 1 or nt < 1:
        raise ValueError("need at least one observation and one target")

    cdef double* th = &theta[0]
    cdef double* gr = &grad[0]
    cdef int L, i, j, k, rows, nin, nout, maxw = q_in
    cdef long total = 0
    for L in range(n_layers):
        rows = n if L < n_enc else nt
        total += rows * layout[L, 3]
        if layout[L, 3] > maxw:
            maxw = <int>layout[L, 3]
        if layout[L, 2] > maxw:
            maxw = <int>layout[L, 2]
    cdef int maxrows = n if n > nt else nt
    cdef double* acts = <double*>malloc((total + nt * q_in + 2 * maxrows * maxw) * sizeof(double))
    cdef double** out = <double**>malloc(n_layers * sizeof(double*))
    if acts == NULL or out == NULL:
        free(acts)
        free(out)
        raise MemoryError()
    cdef double* q = acts + total
    cdef double* g1 = q + nt * q_in
    cdef double* g2 = g1 + maxrows * maxw
    cdef double* tmp
    cdef double mu, raw, s, y, r2, inv, loss = 0.0, scale
    cdef const double* a_in
    cdef long off = 0

    with nogil:
        for L in range(n_layers):
            rows = n if L < n_enc else nt
            out[L] = acts + off
            off += rows * layout[L, 3]

        # encoder
        for L in range(n_enc):
            a_in = &obs[0, 0] if L == 0 else out[L - 1]
            _dense_fwd(th + layout[L, 0], th + layout[L, 1], a_in, out[L], n,
                       <int>layout[L, 2], <int>layout[L, 3], L < n_enc - 1)
        # mean aggregation into the query rows
        for j in range(width):
            s = 0.0
            for i in range(n):
                s += out[n_enc - 1][i * width + j]
            q[j] = s / n
        for k in range(nc):
            q[width + k] = ctx[k]
        for i in range(1, nt):
            memcpy(q + i * q_in, q, (width + nc) * sizeof(double))
        for i in range(nt):
            q[i * q_in + width + nc] = tx[i]
        # decoder
        for L in range(n_enc, n_layers):
            a_in = q if L == n_enc else out[L - 1]
            _dense_fwd(th + layout[L, 0], th + layout[L, 1], a_in, out[L], nt,
                       <int>layout[L, 2], <int>layout[L, 3], L < n_layers - 1)

        # Gaussian head
        scale = 1.0 / (nt * d)
        tmp = out[n_layers - 1]
        for i in range(nt):
            for k in range(d):
                mu = tmp[i * 2 * d + k]
                raw = tmp[i * 2 * d + d + k]
                s = _softplus(raw) + floor
                y = ty[i, k]
                r2 = (y - mu) * (y - mu)
                inv = 1.0 / (s * s)
                loss += HALF_LOG_2PI + log(s) + 0.5 * r2 * inv
                g1[i * 2 * d + k] = (mu - y) * inv * scale
                g1[i * 2 * d + d + k] = (1.0 / s - r2 * inv / s) * scale * _sigmoid(raw)
        loss *= scale

        # decoder backward; g1 holds d(pre-activation) of layer L
        for L in range(n_layers - 1, n_enc - 1, -1):
            nin = <int>layout[L, 2]
            nout = <int>layout[L, 3]
            a_in = q if L == n_enc else out[L - 1]
            _dense_bwd(th + layout[L, 0], a_in, g1, gr + layout[L, 0], gr + layout[L, 1],
                       g2, nt, nin, nout)
            if L > n_enc:
                for k in range(nt * nin):
                    if out[L - 1][k] <= 0.0:
                        g2[k] = 0.0
            tmp = g1
            g1 = g2
            g2 = tmp
        # g1 now holds d(q); reduce latent part and spread over observations
        for j in range(width):
            s = 0.0
            for i in range(nt):
                s += g1[i * q_in + j]
            g2[j] = s / n
        for i in range(n):
            memcpy(g1 + i * width, g2, width * sizeof(double))
        # encoder backward
        for L in range(n_enc - 1, -1, -1):
            nin = <int>layout[L, 2]
            nout = <int>layout[L, 3]
            a_in = &obs[0, 0] if L == 0 else out[L - 1]
            _dense_bwd(th + layout[L, 0], a_in, g1, gr + layout[L, 0], gr + layout[L, 1],
                       g2 if L > 0 else NULL, n, nin, nout)
            if L > 0:
                for k in range(n * nin):
                    if out[L - 1][k] <= 0.0:
                        g2[k] = 0.0
                tmp = g1
                g1 = g2
                g2 = tmp

    free(acts)
    free(out)
    return loss


def adam_update(double[::1] theta, double[::1] grad, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    """In-place Adam update; returns False (and leaves everything untouched)
    if any gradient component is non-finite."""
    cdef long size = theta.shape[0]
    cdef double c1 = 1.0 - beta1 ** step, c2 = 1.0 - beta2 ** step
    if _count_nonfinite(&grad[0], size):
        return False
    _adam_folded(&theta[0], &grad[0], &m[0], &v[0], size, beta1, beta2,
                 lr * sqrt(c2) / c1, eps * sqrt(c2))
    return True
