# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops of the E-step."""

from libc.math cimport exp, log, INFINITY


def posterior_rows(double[:, ::1] corr, const double[::1] energy, const double[::1] logprior,
                   const double[::1] norms, double sigma2, double const_term,
                   double[::1] wsum, double[::1] logev, double[::1] qval):
    """Turn correlations into posteriors in place.

    On entry ``corr[p, j]`` is ``<patch_p, template_j>``.  On exit it holds the
    posterior over hypotheses ``j``.  ``wsum`` accumulates posterior mass per
    hypothesis; ``logev`` and ``qval`` receive the per-patch log evidence and
    expected complete log-likelihood.
    """
    cdef Py_ssize_t n = corr.shape[0]
    cdef Py_ssize_t J = corr.shape[1]
    cdef Py_ssize_t p, j
    cdef double inv = 0.5 / sigma2
    cdef double a, m, z, s1, e, rz
    if energy.shape[0] != J or logprior.shape[0] != J or wsum.shape[0] != J:
        raise ValueError("hypothesis dimension mismatch")
    if norms.shape[0] != n or logev.shape[0] != n or qval.shape[0] != n:
        raise ValueError("patch dimension mismatch")
    with nogil:
        for p in range(n):
            m = -INFINITY
            for j in range(J):
                a = const_term - (norms[p] - 2.0 * corr[p, j] + energy[j]) * inv + logprior[j]
                corr[p, j] = a
                if a > m:
                    m = a
            z = 0.0
            s1 = 0.0
            for j in range(J):
                a = corr[p, j]
                e = exp(a - m)
                if e > 0.0:
                    s1 = s1 + e * a
                corr[p, j] = e
                z = z + e
            rz = 1.0 / z
            for j in range(J):
                e = corr[p, j] * rz
                corr[p, j] = e
                wsum[j] = wsum[j] + e
            logev[p] = m + log(z)
            qval[p] = s1 * rz
