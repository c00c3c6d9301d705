"""Pure-numpy versions of the compiled kernels (same contracts)."""

import numpy as np


def posterior_rows(corr, energy, logprior, norms, sigma2, const_term, wsum, logev, qval):
    a = const_term - (norms[:, None] - 2.0 * corr + energy[None, :]) * (0.5 / sigma2) + logprior[None, :]
    m = a.max(axis=1)
    e = np.exp(a - m[:, None])
    z = e.sum(axis=1)
    with np.errstate(invalid="ignore"):
        s1 = np.where(e > 0, e * a, 0.0).sum(axis=1)
    rz = 1.0 / z
    np.multiply(e, rz[:, None], out=corr)
    wsum += corr.sum(axis=0)
    logev[:] = m + np.log(z)
    qval[:] = s1 * rz
