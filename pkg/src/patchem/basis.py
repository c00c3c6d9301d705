"""Special functions and basis tables.

Spherical Bessel functions and their zeros, complex spherical harmonics,
Wigner-D matrices, uniformly sampled rotation grids, and the 2-D prolate
spheroidal wave functions (PSWFs) on the unit disk.

Conventions
-----------
* Pixel ``(i, j)`` of an ``L x L`` image sits at disk coordinates
  ``x = (i - (L-1)/2) / (L/2)``, ``y = (j - (L-1)/2) / (L/2)``; axis 0 is x.
* The PSWF bandlimit used in the truncated Fourier kernel ``exp(i c r.k)``
  is ``pi * c * L`` where ``c`` is the bandlimit in cycles per pixel
  (``c = 1/2`` is Nyquist).
* ``psi_{N,n}(r, phi) = Phi_{N,n}(r) exp(i N phi) / sqrt(2 pi)`` with real,
  L2(r dr)-normalized radial profiles ``Phi_{N,n} = Phi_{-N,n}``; the
  eigenvalue of the truncated Fourier transform is
  ``alpha_{N,n} = 2 pi i^N mu_{N,n}`` with ``mu`` real.
* ``D^l_{m',m}(R) = <Y_l^{m'}, U(R) Y_l^m>`` with ``(U(R) f)(u) = f(R^T u)``,
  so ``D^l(R1 R2) = D^l(R1) D^l(R2)``.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np
from scipy import special

CACHE_VERSION = 1
CACHE_ENV = "PATCHEM_CACHE_DIR"


class PswfConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# spherical Bessel functions


@functools.lru_cache(maxsize=None)
def _bessel_zero_table(ell: int, count: int) -> tuple:
    if ell == 0:
        return tuple(math.pi * s for s in range(1, count + 1))
    # zeros of j_{l-1} bracket the zeros of j_l (interlacing)
    lower = _bessel_zero_table(ell - 1, count + 1)
    zeros = []
    for s in range(count):
        a, b = lower[s], lower[s + 1]
        fa = special.spherical_jn(ell, a)
        for _ in range(200):
            mid = 0.5 * (a + b)
            if mid <= a or mid >= b:
                break
            fm = special.spherical_jn(ell, mid)
            if fm == 0.0:
                a = b = mid
                break
            if (fm > 0) == (fa > 0):
                a, fa = mid, fm
            else:
                b = mid
        zeros.append(0.5 * (a + b))
    return tuple(zeros)


def spherical_bessel_zero(ell: int, s: int) -> float:
    """The ``s``-th positive zero of the spherical Bessel function ``j_ell``."""
    if ell < 0 or s < 1:
        raise ValueError(f"need ell >= 0 and s >= 1, got ell={ell}, s={s}")
    return _bessel_zero_table(int(ell), int(s))[s - 1]


def spherical_bessel_zeros(ell: int, count: int) -> np.ndarray:
    if ell < 0 or count < 0:
        raise ValueError("ell and count must be non-negative")
    if count == 0:
        return np.zeros(0)
    return np.array(_bessel_zero_table(int(ell), int(count)))


def normalized_spherical_bessel(ell: int, s: int, k):
    """``4 / |j_{l+1}(u_{l,s})| * j_l(u_{l,s} k)`` for ``k`` in [0, 1]."""
    k = np.asarray(k, dtype=float)
    if np.any(k < 0) or np.any(k > 1):
        raise ValueError("k must lie in [0, 1]")
    u = spherical_bessel_zero(ell, s)
    norm = 4.0 / abs(special.spherical_jn(ell + 1, u))
    z = u * k
    tiny = z < 1e-100  # scipy returns nan for subnormal arguments; use the leading series term
    lead = z ** ell / math.prod(range(1, 2 * ell + 2, 2)) if ell else np.ones_like(z)
    out = norm * np.where(tiny, lead, special.spherical_jn(ell, np.where(tiny, 1.0, z)))
    return out if out.ndim else float(out)


def radial_counts(c: float, L: int, ell_max: int) -> tuple:
    """Number of radial functions per degree: zeros with ``u <= pi c L``."""
    bound = math.pi * c * L
    counts = []
    for ell in range(ell_max + 1):
        s = 0
        while spherical_bessel_zero(ell, s + 1) <= bound:
            s += 1
        counts.append(s)
    return tuple(counts)


# ---------------------------------------------------------------------------
# spherical harmonics


def spherical_harmonic(ell: int, m: int, theta, phi):
    """Complex spherical harmonic with the Condon-Shortley phase."""
    if abs(m) > ell:
        raise ValueError(f"|m| must not exceed ell (ell={ell}, m={m})")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    am = abs(m)
    norm = math.sqrt(
        (2 * ell + 1) / (4 * math.pi) * math.factorial(ell - am) / math.factorial(ell + am)
    )
    # scipy's lpmv carries the Condon-Shortley phase
    y = norm * special.lpmv(am, ell, np.cos(theta)) * np.exp(1j * am * phi)
    if m < 0:
        y = (-1) ** am * np.conj(y)
    return y if y.ndim else complex(y)


# ---------------------------------------------------------------------------
# rotations and Wigner-D matrices


def quaternion_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, M in enumerate(flat):
        tr = np.trace(M)
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s]
        elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
            s = 2.0 * math.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
            q = [(M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif M[1, 1] > M[2, 2]:
            s = 2.0 * math.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
            q = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
            q = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s, (M[1, 2] + M[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


def random_quaternions(count: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform unit quaternions (w, x, y, z) by Shoemake's method."""
    u1, u2, u3 = rng.random((3, count))
    a, b = np.sqrt(1 - u1), np.sqrt(u1)
    q = np.stack(
        [b * np.cos(2 * np.pi * u3), a * np.sin(2 * np.pi * u2),
         a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3)],
        axis=-1,
    )
    q[q[:, 0] < 0] *= -1
    return q


def random_rotations(count: int, rng: np.random.Generator) -> np.ndarray:
    return quaternion_to_matrix(random_quaternions(count, rng))


def euler_zyz(R) -> tuple:
    """Angles ``(a, b, g)`` with ``R = Rz(a) Ry(b) Rz(g)``.

    Read off the unit quaternion, where ``a + g`` and ``a - g`` come from
    separate component pairs; this stays accurate next to ``b = 0`` and
    ``b = pi`` where the matrix entries lose the split.
    """
    w, x, y, z = matrix_to_quaternion(np.asarray(R, dtype=float))
    half_sum = math.atan2(z, w)
    half_diff = math.atan2(-x, y)
    b = 2.0 * math.atan2(math.hypot(x, y), math.hypot(w, z))
    return half_sum + half_diff, b, half_sum - half_diff


def rotation_zyz(a: float, b: float, g: float) -> np.ndarray:
    def rz(t):
        c, s = math.cos(t), math.sin(t)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    c, s = math.cos(b), math.sin(b)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return rz(a) @ ry @ rz(g)


@functools.lru_cache(maxsize=None)
def _jy_eigen(ell: int):
    m = np.arange(-ell, ell)
    up = np.sqrt(ell * (ell + 1) - m * (m + 1.0))
    jy = np.zeros((2 * ell + 1, 2 * ell + 1), dtype=complex)
    # <m+1| J_y |m> = sqrt(l(l+1) - m(m+1)) / (2i)
    jy[np.arange(1, 2 * ell + 1), np.arange(2 * ell)] = up / 2j
    jy[np.arange(2 * ell), np.arange(1, 2 * ell + 1)] = -up / 2j
    lam, vec = np.linalg.eigh(jy)
    return np.round(lam), vec


def little_d(ell: int, beta: float) -> np.ndarray:
    """Wigner small-d matrix ``d^l(beta) = exp(-i beta J_y)``."""
    if beta == 0.0:
        return np.eye(2 * int(ell) + 1)
    lam, vec = _jy_eigen(int(ell))
    d = (vec * np.exp(-1j * beta * lam)) @ vec.conj().T
    return d.real


def wigner_d(ell: int, omega) -> np.ndarray:
    """Wigner-D matrix of degree ``ell`` for a rotation matrix ``omega``.

    Indexed ``[m' + ell, m + ell]``.
    """
    if ell < 0:
        raise ValueError("ell must be non-negative")
    R = np.asarray(omega, dtype=float)
    if R.shape != (3, 3):
        raise ValueError("omega must be a 3x3 rotation matrix")
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
        raise ValueError("omega is not a proper rotation")
    a, b, g = euler_zyz(R)
    m = np.arange(-ell, ell + 1)
    return np.exp(-1j * m * a)[:, None] * little_d(ell, b) * np.exp(-1j * m * g)[None, :]


@dataclasses.dataclass(frozen=True)
class RotationGrid:
    """``K`` rotations with their Wigner-D tables up to ``ell_max``.

    ``wigner[l]`` has shape ``(K, 2l+1, 2l+1)``.
    """

    quaternions: np.ndarray
    matrices: np.ndarray
    wigner: tuple
    ell_max: int

    @property
    def K(self) -> int:
        return len(self.matrices)


def _wigner_tables(matrices: np.ndarray, ell_max: int) -> tuple:
    angles = [euler_zyz(R) for R in matrices]
    tables = []
    for ell in range(ell_max + 1):
        m = np.arange(-ell, ell + 1)
        D = np.empty((len(matrices), 2 * ell + 1, 2 * ell + 1), dtype=complex)
        for i, (a, b, g) in enumerate(angles):
            D[i] = np.exp(-1j * m * a)[:, None] * little_d(ell, b) * np.exp(-1j * m * g)[None, :]
        tables.append(D)
    return tuple(tables)


def rotation_grid_from_matrices(matrices, ell_max: int) -> RotationGrid:
    matrices = np.asarray(matrices, dtype=float).reshape(-1, 3, 3)
    return RotationGrid(
        quaternions=matrix_to_quaternion(matrices),
        matrices=matrices,
        wigner=_wigner_tables(matrices, ell_max),
        ell_max=ell_max,
    )


def build_rotation_grid(K: int, seed: int, ell_max: int, include_identity: bool = False) -> RotationGrid:
    """Draw ``K`` Haar-uniform rotations from a seeded generator."""
    if K < 1:
        raise ValueError("K must be at least 1")
    q = random_quaternions(K, np.random.default_rng(seed))
    if include_identity:
        q[0] = (1.0, 0.0, 0.0, 0.0)
    matrices = quaternion_to_matrix(q)
    if include_identity:
        matrices[0] = np.eye(3)
    return RotationGrid(quaternions=q, matrices=matrices,
                        wigner=_wigner_tables(matrices, ell_max), ell_max=ell_max)


# ---------------------------------------------------------------------------
# PSWFs on the unit disk


@dataclasses.dataclass(frozen=True)
class BandlimitParams:
    """Bandlimit and truncation rules shared by every basis table.

    ``s_of_ell`` defaults to the Nyquist zero-counting rule
    ``u_{l,s} <= pi c L``; ``alpha_threshold`` is the retained range of
    ``|alpha_{N,n}|^2 / |alpha_{0,0}|^2``.  Either may be overridden.
    """

    L: int
    ell_max: int
    c: float = 0.5
    alpha_threshold: float = 1e-6
    s_of_ell: tuple | None = None
    n_max_of_N: tuple | None = None
    n_quad: int = 128

    def __post_init__(self):
        if not 0 < self.c <= 1:
            raise ValueError("c must lie in (0, 1]")
        if self.L < 3:
            raise ValueError("L must be at least 3")
        if self.ell_max < 0:
            raise ValueError("ell_max must be non-negative")
        if self.s_of_ell is None:
            object.__setattr__(self, "s_of_ell", radial_counts(self.c, self.L, self.ell_max))
        else:
            object.__setattr__(self, "s_of_ell", tuple(int(s) for s in self.s_of_ell))
        if len(self.s_of_ell) < self.ell_max + 1 or min(self.s_of_ell[: self.ell_max + 1]) < 1:
            raise ValueError(
                f"S(l) must be >= 1 for every l <= {self.ell_max}; got {self.s_of_ell} "
                f"(bandlimit pi*c*L = {self.bandlimit:.3f} too small for this ell_max)"
            )
        if self.n_max_of_N is not None:
            object.__setattr__(self, "n_max_of_N", tuple(int(n) for n in self.n_max_of_N))

    @property
    def bandlimit(self) -> float:
        """PSWF bandlimit in disk units (radians per half-box)."""
        return math.pi * self.c * self.L

    def with_ell_max(self, ell_max: int) -> "BandlimitParams":
        s = self.s_of_ell if len(self.s_of_ell) > ell_max else None
        return dataclasses.replace(self, ell_max=ell_max, s_of_ell=s)

    def cache_key(self) -> str:
        payload = json.dumps(
            {"v": CACHE_VERSION, "c": self.c, "L": self.L, "ell_max": self.ell_max,
             "thr": self.alpha_threshold, "s": list(self.s_of_ell),
             "n_max": self.n_max_of_N, "nq": self.n_quad},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _radial_polys(N: int, nbasis: int, r: np.ndarray):
    """Orthonormal (w.r.t. r dr on [0,1]) radial Zernike functions and derivatives."""
    t = 1.0 - 2.0 * r * r
    T = np.empty((nbasis, r.size))
    dT = np.empty((nbasis, r.size))
    rN = r ** N
    drN = N * r ** (N - 1) if N > 0 else np.zeros_like(r)
    for k in range(nbasis):
        a = math.sqrt(2.0 * (2 * k + N + 1))
        p = special.eval_jacobi(k, N, 0, t)
        dp = 0.5 * (k + N + 1) * special.eval_jacobi(k - 1, N + 1, 1, t) if k > 0 else 0.0
        T[k] = a * rN * p
        dT[k] = a * (drN * p - 4.0 * r * rN * dp)
    return T, dT


def _gauss01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _radial_eigen(N: int, c: float, nbasis: int):
    """Galerkin diagonalisation of the commuting radial operator

    ``-(1/r) d/dr[r (1 - r^2) d/dr] + N^2 / r^2 + c^2 r^2``.
    """
    r, w = _gauss01(N + 2 * nbasis + 16)
    T, dT = _radial_polys(N, nbasis, r)
    weight = w * r * (1 - r * r)
    M = (dT * weight) @ dT.T + (T * (w * (N * N / r + c * c * r ** 3))) @ T.T
    chi, V = np.linalg.eigh(0.5 * (M + M.T))
    return chi, V


@dataclasses.dataclass
class PswfBasis:
    """Sampled PSWFs ``psi_{N,n}`` on the ``L x L`` grid plus radial data.

    ``psi`` has shape ``(P, L, L)``; entries are ordered by ``(N, n)`` with
    ``N`` ascending.  ``coeffs[abs(N)]`` holds the radial expansion
    coefficients (columns = n) in the orthonormal radial Zernike basis.
    """

    params: BandlimitParams
    N: np.ndarray
    n: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray
    psi: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    R: np.ndarray
    coeffs: dict

    @property
    def count(self) -> int:
        return len(self.N)

    @property
    def n_max_of_N(self) -> dict:
        out = {}
        for N, n in zip(self.N, self.n):
            out[int(N)] = max(out.get(int(N), -1), int(n))
        return out

    def index(self, N: int, n: int) -> int:
        hits = np.flatnonzero((self.N == N) & (self.n == n))
        if not hits.size:
            raise KeyError((N, n))
        return int(hits[0])

    def radial(self, idx: int, r) -> np.ndarray:
        """Radial profile ``Phi_{N,n}(r)`` at arbitrary ``r`` in [0, 1]."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        N, n = abs(int(self.N[idx])), int(self.n[idx])
        C = self.coeffs[N]
        T, _ = _radial_polys(N, C.shape[0], r)
        return C[:, n] @ T

    def evaluate(self, idx: int, x, y) -> np.ndarray:
        """Continuous ``psi`` at disk coordinates, zero outside the disk."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        r = np.hypot(x, y)
        inside = r <= 1.0
        out = np.zeros(x.shape, dtype=complex)
        N = int(self.N[idx])
        phi = np.arctan2(y[inside], x[inside])
        out[inside] = self.radial(idx, r[inside]) * np.exp(1j * N * phi) / math.sqrt(2 * math.pi)
        return out

    def matrix(self) -> np.ndarray:
        """``(L*L, P)`` matrix whose columns are the sampled ``psi``."""
        return self.psi.reshape(self.count, -1).T


def pixel_disk_coordinates(L: int):
    t = (np.arange(L) - (L - 1) / 2.0) / (L / 2.0)
    return np.meshgrid(t, t, indexing="ij")


def _hankel_eigenvalue(N: int, c: float, coef: np.ndarray, nq: int = 256) -> np.ndarray:
    r, w = _gauss01(nq)
    T, _ = _radial_polys(N, coef.shape[0], r)
    phi = (coef.T @ T) * (w * r)
    kernel = special.jv(N, c * np.outer(r, r))
    return np.einsum("ai,ij,aj->a", phi, kernel, phi)


def build_pswf_basis(params: BandlimitParams, max_refine: int = 3) -> PswfBasis:
    """Compute and sample the PSWFs retained under the eigenvalue rule.

    Angular indices are capped at ``|N| <= ell_max``: higher ones have no
    spherical-harmonic partner and never enter a projection.
    """
    c = params.bandlimit
    thr = params.alpha_threshold
    forced = params.n_max_of_N
    radial = {}
    alpha00 = None
    N = 0
    while True:
        if N > params.ell_max or (forced is not None and N >= len(forced)):
            break
        nbasis = int(c) + 40
        for _ in range(max_refine + 1):
            chi, V = _radial_eigen(N, c, nbasis)
            probe = V[:, : min(nbasis // 2, 40)]
            mu = _hankel_eigenvalue(N, c, probe)
            if alpha00 is None:
                alpha00 = 2 * math.pi * abs(mu[0])
            a2 = (2 * math.pi * np.abs(mu)) ** 2 / alpha00 ** 2
            keep = forced[N] + 1 if forced is not None else int(np.sum(np.cumprod(a2 >= thr)))
            tail = np.max(np.abs(V[-8:, :keep])) if keep else 0.0
            if keep < probe.shape[1] and tail < 1e-13:
                break
            nbasis *= 2
        else:
            raise PswfConvergenceError(f"radial eigenproblem for N={N} did not converge")
        if keep == 0:
            break
        coef = V[:, :keep].copy()
        # sign convention: positive behaviour at the origin
        lead = np.sqrt(2.0 * (2 * np.arange(nbasis) + N + 1)) * special.binom(np.arange(nbasis) + N, N)
        sgn = np.sign(lead @ coef)
        sgn[sgn == 0] = 1.0
        coef *= sgn
        radial[N] = (coef, _hankel_eigenvalue(N, c, coef))
        N += 1

    Nmax = max(radial)
    X, Y = pixel_disk_coordinates(params.L)
    r = np.hypot(X, Y)
    inside = r <= 1.0
    phase = np.exp(1j * np.arctan2(Y, X))
    nodes, weights = _gauss01(params.n_quad)

    Ns, ns, mus, psis, Rs = [], [], [], [], []
    profiles = {}
    for aN, (coef, mu) in radial.items():
        Tpix, _ = _radial_polys(aN, coef.shape[0], r[inside])
        Tq, _ = _radial_polys(aN, coef.shape[0], nodes)
        profiles[aN] = (coef.T @ Tpix, coef.T @ Tq)
    for N in range(-Nmax, Nmax + 1):
        coef, mu = radial[abs(N)]
        pix, quad = profiles[abs(N)]
        ang = phase[inside] ** abs(N)
        for n in range(coef.shape[1]):
            img = np.zeros((params.L, params.L), dtype=complex)
            vals = pix[n] * ang / math.sqrt(2 * math.pi)
            img[inside] = vals if N >= 0 else np.conj(vals)
            Ns.append(N)
            ns.append(n)
            mus.append(mu[n])
            psis.append(img)
            Rs.append(quad[n])
    Ns = np.array(Ns)
    mus = np.array(mus)
    return PswfBasis(
        params=params,
        N=Ns,
        n=np.array(ns),
        mu=mus,
        alpha=2 * np.pi * (1j ** np.abs(Ns)) * mus,
        psi=np.array(psis),
        nodes=nodes,
        weights=weights,
        R=np.array(Rs),
        coeffs={k: v[0] for k, v in radial.items()},
    )


# ---------------------------------------------------------------------------
# versioned on-disk cache


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "patchem"))


def save_pswf_basis(basis: PswfBasis, path) -> None:
    p = basis.params
    meta = dict(version=CACHE_VERSION, L=p.L, ell_max=p.ell_max, c=p.c,
                alpha_threshold=p.alpha_threshold, s_of_ell=list(p.s_of_ell),
                n_max_of_N=None if p.n_max_of_N is None else list(p.n_max_of_N),
                n_quad=p.n_quad, key=p.cache_key())
    arrays = {f"coeffs_{k}": v for k, v in basis.coeffs.items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), N=basis.N, n=basis.n, mu=basis.mu,
                 alpha=basis.alpha, psi=basis.psi, nodes=basis.nodes,
                 weights=basis.weights, R=basis.R, **arrays)


def load_pswf_basis(path, params: BandlimitParams | None = None) -> PswfBasis:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta["version"] != CACHE_VERSION:
            raise ValueError(f"cache version {meta['version']} != {CACHE_VERSION}")
        if params is not None and meta["key"] != params.cache_key():
            raise ValueError("cache key does not match the requested parameters")
        if params is None:
            params = BandlimitParams(
                L=meta["L"], ell_max=meta["ell_max"], c=meta["c"],
                alpha_threshold=meta["alpha_threshold"], s_of_ell=tuple(meta["s_of_ell"]),
                n_max_of_N=None if meta["n_max_of_N"] is None else tuple(meta["n_max_of_N"]),
                n_quad=meta["n_quad"],
            )
        coeffs = {int(k.split("_")[1]): z[k] for k in z.files if k.startswith("coeffs_")}
        return PswfBasis(params=params, N=z["N"], n=z["n"], mu=z["mu"], alpha=z["alpha"],
                         psi=z["psi"], nodes=z["nodes"], weights=z["weights"], R=z["R"],
                         coeffs=coeffs)


def cached_pswf_basis(params: BandlimitParams, directory=None) -> PswfBasis:
    """Load the basis from the cache directory, computing it on a miss."""
    directory = Path(directory) if directory is not None else cache_dir()
    path = directory / f"pswf_{params.cache_key()}.npz"
    if path.exists():
        return load_pswf_basis(path, params)
    basis = build_pswf_basis(params)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_pswf_basis(basis, tmp)
    os.replace(tmp, path)
    return basis
