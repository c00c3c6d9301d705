"""Independent reference computations used by the tests.

Each oracle evaluates a quantity by a route that shares no vectorized code
with the package: direct sums, scalar loops, arbitrary-precision special
functions, or dense quadrature.
"""

import math

import mpmath
import numpy as np

from patchem.basis import normalized_spherical_bessel, spherical_harmonic, wigner_d


# ---------------------------------------------------------------------------
# special functions


def spherical_jn_series(ell, x, terms=120):
    """Power series ``j_l(x) = x^l sum_k (-x^2/2)^k / (k! (2l+2k+1)!!)`` in 60-digit arithmetic."""
    with mpmath.workdps(60):
        return _jn_series(ell, mpmath.mpf(x), terms)


def _jn_series(ell, x, terms):
    total = mpmath.mpf(0)
    dfact = mpmath.mpf(1)
    for j in range(1, 2 * ell + 2, 2):
        dfact *= j
    for k in range(terms):
        if k > 0:
            dfact *= 2 * ell + 2 * k + 1
        total += (-x * x / 2) ** k / (mpmath.factorial(k) * dfact)
    return float(x ** ell * total)


def spherical_bessel_zero_mp(ell, s):
    """Zero of ``j_l`` as the zero of ``J_{l+1/2}`` from mpmath."""
    return float(mpmath.besseljzero(mpmath.mpf(ell) + mpmath.mpf(1) / 2, s))


def sphere_quadrature(n_theta=40, n_phi=80):
    """Nodes ``(theta, phi)`` and weights integrating band-limited functions on S^2."""
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.outer(w, np.full(n_phi, 2 * np.pi / n_phi))
    return T.ravel(), P.ravel(), W.ravel()


def disk_quadrature(n_r=60, n_phi=120):
    """Polar Gauss-Legendre x uniform-angle rule on the unit disk."""
    r, w = np.polynomial.legendre.leggauss(n_r)
    r, w = 0.5 * (r + 1), 0.5 * w
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    R, P = np.meshgrid(r, phi, indexing="ij")
    W = np.outer(w * r, np.full(n_phi, 2 * np.pi / n_phi))
    return R.ravel() * np.cos(P.ravel()), R.ravel() * np.sin(P.ravel()), W.ravel()


def truncated_fourier(basis, idx, kx, ky, n_r=60, n_phi=120):
    """``int_{|r|<=1} psi(r) exp(i c r.k) dr`` by dense polar quadrature."""
    c = basis.params.bandlimit
    x, y, w = disk_quadrature(n_r, n_phi)
    vals = basis.evaluate(idx, x, y)
    kx = np.atleast_1d(kx)
    ky = np.atleast_1d(ky)
    phase = np.exp(1j * c * (np.outer(kx, x) + np.outer(ky, y)))
    return phase @ (vals * w)


# ---------------------------------------------------------------------------
# projections


def fourier_slice_projection(x, R, L, c):
    """Projection by evaluating the 3-D expansion on the central slice and
    integrating the inverse 2-D transform over the frequency disk.
    """
    layout = x.layout
    ce = math.pi * c * L
    kr, kw = np.polynomial.legendre.leggauss(80)
    kr, kw = 0.5 * (kr + 1), 0.5 * kw
    nphi = 160
    ph = 2 * np.pi * np.arange(nphi) / nphi
    KR, PH = np.meshgrid(kr, ph, indexing="ij")
    W = (kw * kr)[:, None] * np.full(nphi, 2 * np.pi / nphi)[None, :]
    k3 = np.stack([KR * np.cos(PH), KR * np.sin(PH), 0 * KR], -1).reshape(-1, 3)
    src = k3 @ R  # rows are (R^T k)^T
    rad = np.linalg.norm(src, axis=1)
    th = np.arccos(np.clip(src[:, 2] / np.maximum(rad, 1e-300), -1, 1))
    phi = np.arctan2(src[:, 1], src[:, 0])
    ell, m, s = layout.indices()
    fh = np.zeros(len(k3), complex)
    for a in range(layout.size):
        fh += x.coeffs[a] * spherical_harmonic(int(ell[a]), int(m[a]), th, phi) * \
            normalized_spherical_bessel(int(ell[a]), int(s[a]), np.clip(rad, 0, 1))
    g = (np.arange(L) - (L - 1) / 2) / (L / 2)
    X, Y = np.meshgrid(g, g, indexing="ij")
    phase = np.exp(1j * ce * (X.ravel()[:, None] * k3[:, 0][None] + Y.ravel()[:, None] * k3[:, 1][None]))
    img = (ce / (2 * np.pi)) ** 2 * (phase @ (fh * W.ravel()))
    return img.reshape(L, L), (X ** 2 + Y ** 2 <= 1)


def coefficient_image(basis, beta, R, ell, m, s):
    """Image of a single coefficient ``x_{l,m,s} = 1`` under rotation ``R``,
    summed term by term over the PSWFs.
    """
    D = wigner_d(ell, R)
    img = np.zeros(basis.psi.shape[1:], dtype=complex)
    for i in range(basis.count):
        N, n = int(basis.N[i]), int(basis.n[i])
        if abs(N) > ell:
            continue
        img += beta.entry(ell, s, N, n) * D[N + ell, m + ell] * basis.psi[i]
    return img


def column_images(basis, beta, R, layout):
    """All single-coefficient images: complex ``(M, L, L)``."""
    ell, m, s = layout.indices()
    return np.array([coefficient_image(basis, beta, R, int(a), int(b), int(c))
                     for a, b, c in zip(ell, m, s)])


# ---------------------------------------------------------------------------
# patch geometry


def dense_patch(img, shift):
    """Zero-pad to ``2L x 2L``, roll circularly by ``-shift``, keep the top-left ``L x L``."""
    L = img.shape[0]
    big = np.zeros((2 * L, 2 * L), dtype=img.dtype)
    big[:L, :L] = img
    big = np.roll(big, (-int(shift[0]), -int(shift[1])), axis=(0, 1))
    return big[:L, :L]


def all_shifts(L):
    return [(a, b) for a in range(2 * L) for b in range(2 * L)]


# ---------------------------------------------------------------------------
# EM quantities


def patch_operators(basis, beta, grid, layout):
    """``G[s][k]``: complex ``(L^2, M)`` maps from coefficients to a patch."""
    L = basis.params.L
    cols = [column_images(basis, beta, R, layout) for R in grid.matrices]
    G = []
    for sh in all_shifts(L):
        row = []
        for k in range(grid.K):
            row.append(np.array([dense_patch(c, sh).ravel() for c in cols[k]]).T)
        G.append(row)
    return G


def g_direct(G, M):
    """Quadruple loop over shift, rotation and coefficient pairs."""
    S, K = len(G), len(G[0])
    g = np.zeros((S, K, M, M), dtype=complex)
    for s in range(S):
        for k in range(K):
            Gk = G[s][k]
            for a in range(M):
                for b in range(M):
                    g[s, k, a, b] = np.sum(np.conj(Gk[:, a]) * Gk[:, b])
    return g


def bayes_posteriors(patches, G, x, rho, sigma2):
    """Posterior over (shift, rotation) by direct enumeration of Gaussian likelihoods."""
    S, K = len(G), len(G[0])
    out = np.zeros((len(patches), S, K))
    for p, patch in enumerate(patches):
        logw = np.full((S, K), -np.inf)
        for s in range(S):
            if rho[s] == 0:
                continue
            for k in range(K):
                tmpl = (G[s][k] @ x).real
                logw[s, k] = -np.sum((patch.ravel() - tmpl) ** 2) / (2 * sigma2) + math.log(rho[s] / K)
        w = np.exp(logw - logw.max())
        out[p] = w / w.sum()
    return out


def direct_system(patches, G, post):
    """Unfactored normal equations: ``A = sum w G^H G``, ``y = sum w G^H I``."""
    S, K = len(G), len(G[0])
    M = G[0][0].shape[1]
    A = np.zeros((M, M), dtype=complex)
    y = np.zeros(M, dtype=complex)
    for p, patch in enumerate(patches):
        v = patch.ravel()
        for s in range(S):
            for k in range(K):
                w = post[p, s, k]
                if w == 0:
                    continue
                Gk = G[s][k]
                A += w * (Gk.conj().T @ Gk)
                y += w * (Gk.conj().T @ v)
    return A, y
