"""Forward model: volume coefficients to projections, and the patch operator.

A volume's 3-D Fourier transform is expanded as
``f^(c k, theta, phi) = sum x[l,m,s] Y_l^m(theta, phi) j_{l,s}(k)``.
Its projection along z after rotation ``omega`` is synthesized directly in
real space on the PSWF basis::

    I_omega = sum_{l,N,m,n,s} x[l,m,s] beta_hat[l,s;N,n] D^l_{N,m}(omega) psi_{N,n}

A patch is ``C T_shift Z I_omega``: zero-pad to ``2L x 2L``, circularly
shift, keep the top-left ``L x L`` block.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .basis import (
    BandlimitParams,
    PswfBasis,
    RotationGrid,
    normalized_spherical_bessel,
    spherical_harmonic,
    wigner_d,
)

IMAG_TOLERANCE = 1e-10


class ConjugateSymmetryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# coefficient layout


@dataclasses.dataclass(frozen=True)
class CoefficientLayout:
    """Flat ordering of ``x[l, m, s]``: l ascending, then m, then s.

    ``s`` is 1-based as in the expansion.
    """

    s_of_ell: tuple
    ell_max: int

    def __post_init__(self):
        object.__setattr__(self, "s_of_ell", tuple(int(s) for s in self.s_of_ell[: self.ell_max + 1]))

    @classmethod
    def from_params(cls, params: BandlimitParams, ell_max: int | None = None) -> "CoefficientLayout":
        ell_max = params.ell_max if ell_max is None else ell_max
        if len(params.s_of_ell) <= ell_max:
            raise ValueError("ell_max exceeds the radial-count table")
        return cls(params.s_of_ell, ell_max)

    @property
    def offsets(self) -> np.ndarray:
        sizes = [(2 * l + 1) * self.s_of_ell[l] for l in range(self.ell_max + 1)]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def flat(self, ell: int, m: int, s: int) -> int:
        S = self.s_of_ell[ell]
        if not (0 <= ell <= self.ell_max and abs(m) <= ell and 1 <= s <= S):
            raise IndexError((ell, m, s))
        return int(self.offsets[ell] + (m + ell) * S + (s - 1))

    def indices(self):
        """Arrays ``(ell, m, s)`` for every flat position."""
        ls, ms, ss = [], [], []
        for ell in range(self.ell_max + 1):
            S = self.s_of_ell[ell]
            for m in range(-ell, ell + 1):
                for s in range(1, S + 1):
                    ls.append(ell)
                    ms.append(m)
                    ss.append(s)
        return np.array(ls), np.array(ms), np.array(ss)

    def mirror(self) -> np.ndarray:
        """Flat index of ``(l, -m, s)`` for every position."""
        ell, m, s = self.indices()
        return np.array([self.flat(a, -b, c) for a, b, c in zip(ell, m, s)], dtype=int)

    def real_basis(self) -> np.ndarray:
        """Square matrix ``B`` with ``x = B @ theta`` conjugate-symmetric for real theta.

        For ``m > 0`` the pair ``(theta[l,m,s], theta[l,-m,s])`` holds the real
        and imaginary parts of ``x[l,m,s]``; for ``m = 0``,
        ``x[l,0,s] = i^l theta[l,0,s]``.
        """
        ell, m, _ = self.indices()
        mir = self.mirror()
        M = self.size
        B = np.zeros((M, M), dtype=complex)
        for a in range(M):
            l, mm = ell[a], m[a]
            if mm == 0:
                B[a, a] = 1j ** l
            elif mm > 0:
                b = mir[a]
                sign = (-1) ** (l + mm)
                B[a, a], B[a, b] = 1.0, 1j
                B[b, a], B[b, b] = sign, -1j * sign
        return B

    def to_real(self, x) -> np.ndarray:
        return np.linalg.solve(self.real_basis(), np.asarray(x, dtype=complex)).real

    def from_real(self, theta) -> np.ndarray:
        return self.real_basis() @ np.asarray(theta, dtype=float)


@dataclasses.dataclass
class VolumeCoefficients:
    """Expansion coefficients of a real volume (conjugate-symmetric)."""

    layout: CoefficientLayout
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} coefficients, got {self.coeffs.shape}")

    @property
    def ell_max(self) -> int:
        return self.layout.ell_max

    @classmethod
    def zeros(cls, layout: CoefficientLayout) -> "VolumeCoefficients":
        return cls(layout, np.zeros(layout.size, dtype=complex))

    @classmethod
    def from_real(cls, layout: CoefficientLayout, theta) -> "VolumeCoefficients":
        return cls(layout, layout.from_real(theta))

    @classmethod
    def random(cls, layout: CoefficientLayout, rng: np.random.Generator, scale: float = 1.0):
        return cls.from_real(layout, scale * rng.standard_normal(layout.size))

    def to_real(self) -> np.ndarray:
        return self.layout.to_real(self.coeffs)

    def symmetry_defect(self) -> float:
        ell, m, _ = self.layout.indices()
        partner = (-1.0) ** (ell + m) * np.conj(self.coeffs[self.layout.mirror()])
        return float(np.max(np.abs(self.coeffs - partner), initial=0.0))

    def symmetrized(self) -> "VolumeCoefficients":
        ell, m, _ = self.layout.indices()
        partner = (-1.0) ** (ell + m) * np.conj(self.coeffs[self.layout.mirror()])
        return VolumeCoefficients(self.layout, 0.5 * (self.coeffs + partner))

    def get(self, ell: int, m: int, s: int) -> complex:
        return complex(self.coeffs[self.layout.flat(ell, m, s)])

    def embed(self, layout: CoefficientLayout) -> "VolumeCoefficients":
        """Copy into a larger layout; new frequencies start at zero."""
        if layout.ell_max < self.ell_max:
            raise ValueError("target layout must not be smaller")
        out = np.zeros(layout.size, dtype=complex)
        ell, m, s = self.layout.indices()
        for a, (l, mm, ss) in enumerate(zip(ell, m, s)):
            if ss > layout.s_of_ell[l]:
                raise ValueError("target layout has fewer radial functions")
            out[layout.flat(l, mm, ss)] = self.coeffs[a]
        return VolumeCoefficients(layout, out)

    def rotated(self, R) -> "VolumeCoefficients":
        """Coefficients of the volume ``f(R^T r)``."""
        out = np.empty_like(self.coeffs)
        off = self.layout.offsets
        for ell in range(self.ell_max + 1):
            S = self.layout.s_of_ell[ell]
            block = self.coeffs[off[ell]: off[ell + 1]].reshape(2 * ell + 1, S)
            out[off[ell]: off[ell + 1]] = (wigner_d(ell, R) @ block).ravel()
        return VolumeCoefficients(self.layout, out)


# ---------------------------------------------------------------------------
# beta table


@dataclasses.dataclass
class BetaTable:
    """``beta_hat[l]`` has shape ``(P, S(l))``, rows following the PSWF order."""

    beta_hat: list
    pswf_N: np.ndarray
    pswf_n: np.ndarray

    def entry(self, ell: int, s: int, N: int, n: int) -> complex:
        rows = np.flatnonzero((self.pswf_N == N) & (self.pswf_n == n))
        if not rows.size:
            raise KeyError((N, n))
        return complex(self.beta_hat[ell][rows[0], s - 1])

    @property
    def ell_max(self) -> int:
        return len(self.beta_hat) - 1


def compute_beta_table(basis: PswfBasis, params: BandlimitParams | None = None,
                       n_quad: int | None = None) -> BetaTable:
    """Radial quadrature of ``int_0^1 j_{l,s}(k) R_{N,n}(k) k dk`` with all
    prefactors folded in: ``(c/2pi)^2 alpha sqrt(2 pi) Y_l^N(pi/2, 0)``.
    """
    params = basis.params if params is None else params
    if params.L != basis.params.L or params.c != basis.params.c:
        raise ValueError("basis was built for different bandlimit parameters")
    if n_quad is None or n_quad == basis.params.n_quad:
        nodes, weights, R = basis.nodes, basis.weights, basis.R
    else:
        x, w = np.polynomial.legendre.leggauss(n_quad)
        nodes, weights = 0.5 * (x + 1), 0.5 * w
        R = np.array([basis.radial(i, nodes) for i in range(basis.count)])
    c = params.bandlimit
    pref = (c / (2 * math.pi)) ** 2 * basis.alpha * math.sqrt(2 * math.pi)
    table = []
    for ell in range(params.ell_max + 1):
        S = params.s_of_ell[ell]
        jl = np.array([normalized_spherical_bessel(ell, s, nodes) for s in range(1, S + 1)])
        integral = (R * (weights * nodes)) @ jl.T
        ylm = np.array([
            spherical_harmonic(ell, int(N), math.pi / 2, 0.0) if abs(N) <= ell else 0.0
            for N in basis.N
        ])
        block = (pref * ylm)[:, None] * integral
        block[np.abs(basis.N) > ell] = 0.0
        table.append(block)
    return BetaTable(table, basis.N.copy(), basis.n.copy())


# ---------------------------------------------------------------------------
# projection


@dataclasses.dataclass
class Projection:
    image: np.ndarray
    omega: np.ndarray | None = None


def pswf_operator(beta: BetaTable, wigner: list, layout: CoefficientLayout) -> np.ndarray:
    """Maps coefficients to PSWF coefficients: shape ``(K, P, M)``.

    ``wigner[l]`` is a ``(K, 2l+1, 2l+1)`` stack of D-matrices.
    """
    K = wigner[0].shape[0]
    P = len(beta.pswf_N)
    H = np.zeros((K, P, layout.size), dtype=complex)
    off = layout.offsets
    for ell in range(layout.ell_max + 1):
        S = layout.s_of_ell[ell]
        rows = np.flatnonzero(np.abs(beta.pswf_N) <= ell)
        Dg = wigner[ell][:, beta.pswf_N[rows] + ell, :]
        block = Dg[:, :, :, None] * beta.beta_hat[ell][rows][None, :, None, :S]
        H[:, rows, off[ell]: off[ell + 1]] = block.reshape(K, len(rows), -1)
    return H


def _wigner_stack(omegas, ell_max: int) -> list:
    omegas = np.asarray(omegas, dtype=float).reshape(-1, 3, 3)
    return [np.array([wigner_d(ell, R) for R in omegas]) for ell in range(ell_max + 1)]


def _check_real(img: np.ndarray) -> np.ndarray:
    scale = max(float(np.max(np.abs(img))), 1e-300)
    resid = float(np.max(np.abs(img.imag)))
    if resid > IMAG_TOLERANCE * scale:
        raise ConjugateSymmetryError(
            f"projection has imaginary residue {resid / scale:.2e} (relative); "
            "coefficients are not conjugate-symmetric"
        )
    return img.real


def project(x: VolumeCoefficients, omega, basis: PswfBasis, beta: BetaTable) -> Projection:
    """Synthesize the ``L x L`` projection of ``x`` after rotation ``omega``."""
    if beta.ell_max < x.ell_max:
        raise ValueError(f"beta table covers ell <= {beta.ell_max}, coefficients need {x.ell_max}")
    if len(beta.pswf_N) != basis.count:
        raise ValueError("beta table and PSWF basis disagree on the number of PSWFs")
    H = pswf_operator(beta, _wigner_stack(omega, x.ell_max), x.layout)[0]
    img = basis.matrix() @ (H @ x.coeffs)
    L = basis.params.L
    return Projection(_check_real(img).reshape(L, L), np.asarray(omega, dtype=float))


def real_projection_operator(basis: PswfBasis, beta: BetaTable, grid: RotationGrid,
                             layout: CoefficientLayout) -> np.ndarray:
    """``F[k]`` maps real parameters ``theta`` to the flattened projection.

    Shape ``(K, L*L, M)``; real because ``B theta`` is conjugate-symmetric.
    """
    H = pswf_operator(beta, grid.wigner, layout)
    HB = H @ layout.real_basis()
    F = np.einsum("xp,kpm->kxm", basis.matrix(), HB)
    scale = max(float(np.max(np.abs(F))), 1e-300)
    if float(np.max(np.abs(F.imag))) > 1e-8 * scale:
        raise ConjugateSymmetryError("projection operator is not real on the symmetric subspace")
    return np.ascontiguousarray(F.real)


# ---------------------------------------------------------------------------
# patch operator  C T_shift Z


def shift_set(L: int) -> np.ndarray:
    """All shifts ``(lx, ly)`` in ``{0..2L-1}^2``, row-major in ``lx``."""
    g = np.arange(2 * L)
    return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)


def shift_index(L: int, shift) -> int:
    lx, ly = (int(v) for v in shift)
    if not (0 <= lx < 2 * L and 0 <= ly < 2 * L):
        raise ValueError(f"shift {shift} outside {{0..{2 * L - 1}}}^2")
    return lx * 2 * L + ly


def pad_shift_crop(img: np.ndarray, shift) -> np.ndarray:
    """``C T_shift Z img`` for an ``L x L`` image."""
    L = img.shape[0]
    shift_index(L, shift)
    lx, ly = int(shift[0]), int(shift[1])
    i = (np.arange(L) + lx) % (2 * L)
    j = (np.arange(L) + ly) % (2 * L)
    out = np.zeros((L, L), dtype=img.dtype)
    vi, vj = i < L, j < L
    out[np.ix_(vi, vj)] = img[np.ix_(i[vi], j[vj])]
    return out


def gather_index(L: int) -> np.ndarray:
    """For every shift and crop pixel, the source pixel in the projection or -1.

    Shape ``(4 L^2, L^2)``.
    """
    shifts = shift_set(L)
    i = (np.arange(L)[None, :] + shifts[:, 0:1]) % (2 * L)
    j = (np.arange(L)[None, :] + shifts[:, 1:2]) % (2 * L)
    src = i[:, :, None] * L + j[:, None, :]
    valid = (i[:, :, None] < L) & (j[:, None, :] < L)
    return np.where(valid, src, -1).reshape(len(shifts), L * L)


def visibility_mask(L: int) -> np.ndarray:
    """``mask[shift, pixel]``: does projection pixel land inside the crop."""
    g = gather_index(L)
    mask = np.zeros((g.shape[0], L * L))
    rows, cols = np.nonzero(g >= 0)
    mask[rows, g[rows, cols]] = 1.0
    return mask


def zero_template_shifts(L: int) -> np.ndarray:
    """Boolean over shifts whose crop window sees only zero padding."""
    s = shift_set(L)
    return (s[:, 0] == L) | (s[:, 1] == L)


def make_patch(proj, shift, sigma2: float = 0.0, seed=None) -> np.ndarray:
    """One noisy patch ``C T_shift Z proj + noise``."""
    img = proj.image if isinstance(proj, Projection) else np.asarray(proj)
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    out = pad_shift_crop(np.asarray(img, dtype=float), shift)
    if sigma2 > 0:
        out = out + np.random.default_rng(seed).normal(0.0, math.sqrt(sigma2), out.shape)
    return out


# ---------------------------------------------------------------------------
# voxel rendering of the expansion


def _frequency_points(params: BandlimitParams):
    kmax = int(math.floor(params.c * params.L + 1e-9))
    g = np.arange(-kmax, kmax + 1)
    K = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    rad = np.linalg.norm(K, axis=1) / (params.c * params.L)
    keep = rad <= 1.0
    return K[keep], rad[keep]


def fourier_design(params: BandlimitParams, layout: CoefficientLayout):
    """Evaluate the expansion on integer frequencies inside the bandlimit ball.

    Returns ``(freqs, E)`` with ``E @ x`` the Fourier values.
    """
    K, rad = _frequency_points(params)
    norm = np.linalg.norm(K, axis=1)
    theta = np.where(norm > 0, np.arccos(np.divide(K[:, 2], norm, out=np.ones(len(K)), where=norm > 0)), 0.0)
    phi = np.arctan2(K[:, 1], K[:, 0])
    E = np.zeros((len(K), layout.size), dtype=complex)
    ell, m, s = layout.indices()
    for a in range(layout.size):
        E[:, a] = spherical_harmonic(int(ell[a]), int(m[a]), theta, phi) * \
            normalized_spherical_bessel(int(ell[a]), int(s[a]), rad)
    return K, E


def render_operator(params: BandlimitParams, layout: CoefficientLayout) -> np.ndarray:
    """Real ``(L^3, M)`` matrix mapping real parameters to voxel values."""
    L = params.L
    K, E = fourier_design(params, layout)
    t = (np.arange(L) - (L - 1) / 2.0) / (L / 2.0)
    # Riemann sum of the inverse transform with spacing pi in disk units
    ph = np.exp(1j * math.pi * t[:, None] * K[:, 0][None, :])[:, None, None, :] \
        * np.exp(1j * math.pi * t[:, None] * K[:, 1][None, :])[None, :, None, :] \
        * np.exp(1j * math.pi * t[:, None] * K[:, 2][None, :])[None, None, :, :]
    W = ph.reshape(L ** 3, len(K)) / 8.0
    Rc = W @ (E @ layout.real_basis())
    return Rc


def render_volume(x: VolumeCoefficients, params: BandlimitParams) -> np.ndarray:
    """Voxel grid ``L x L x L`` of the expanded volume (real part)."""
    Rc = render_operator(params, x.layout)
    vol = Rc @ x.to_real()
    scale = max(float(np.max(np.abs(vol))), 1e-300)
    if float(np.max(np.abs(vol.imag))) > 1e-6 * scale:
        raise ConjugateSymmetryError("rendered volume has a large imaginary residue")
    L = params.L
    return vol.real.reshape(L, L, L)


def fit_coefficients(volume: np.ndarray, params: BandlimitParams,
                     layout: CoefficientLayout) -> VolumeCoefficients:
    """Least-squares expansion coefficients of a voxel volume."""
    L = params.L
    if volume.shape != (L, L, L):
        raise ValueError(f"volume must be {L}^3, got {volume.shape}")
    Rr = render_operator(params, layout).real
    theta, *_ = np.linalg.lstsq(Rr, volume.ravel(), rcond=None)
    return VolumeCoefficients.from_real(layout, theta)
