"""Stochastic approximate EM over micrograph patches.

Every patch is explained by at most one projection at an unknown shift
``l`` in ``{0..2L-1}^2`` and rotation ``omega`` in a fixed grid of ``K``
rotations.  The E-step computes posteriors over ``(l, omega)`` per patch;
the M-step solves a linear system for the coefficients and re-estimates the
shift distribution ``rho`` in closed form.

The engine works on the real parameterization ``x = B theta`` so that every
solve keeps the coefficients conjugate-symmetric.  Hypotheses are flattened
as ``j = k * S + s`` (rotation-major).  Patches are processed in fixed-size
chunks and partial sums are reduced in chunk order, which keeps results
bit-identical for any number of worker threads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
from threadpoolctl import threadpool_limits

from . import kernels
from .basis import PswfBasis, RotationGrid
from .forward import (
    BetaTable,
    CoefficientLayout,
    VolumeCoefficients,
    fit_coefficients,
    gather_index,
    pswf_operator,
    real_projection_operator,
    shift_index,
    visibility_mask,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, message, condition: float):
        super().__init__(message)
        self.condition = condition


class MemoryBudgetError(MemoryError):
    def __init__(self, message, estimate: int):
        super().__init__(message)
        self.estimate = estimate


class ResumeMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data types


@dataclasses.dataclass
class PatchSet:
    """Non-overlapping ``L x L`` patches with a known noise variance."""

    patches: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, dtype=float)
        if self.patches.ndim != 3 or self.patches.shape[1] != self.patches.shape[2]:
            raise ValueError("patches must have shape (n, L, L)")
        if not np.all(np.isfinite(self.patches)):
            raise ValueError("patch pixels must be finite")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def L(self) -> int:
        return self.patches.shape[1]

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    def flat(self) -> np.ndarray:
        return self.patches.reshape(self.n, -1)

    @classmethod
    def from_micrographs(cls, micrographs, L: int, policy: str = "crop") -> "PatchSet":
        from .simulate import partition

        mics = list(micrographs)
        sig = {round(float(m.sigma2), 15) for m in mics}
        if len(sig) != 1:
            raise ValueError("micrographs carry different noise variances")
        pats = np.concatenate([partition(m, L, policy) for m in mics])
        return cls(pats, float(mics[0].sigma2))


@dataclasses.dataclass
class ShiftDistribution:
    """Distribution over the ``(2L)^2`` shifts, flattened row-major in ``lx``."""

    rho: np.ndarray
    L: int

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).ravel()
        if self.rho.shape != (4 * self.L * self.L,):
            raise ValueError("rho must have (2L)^2 entries")
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-12:
            raise ValueError("rho must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, L: int) -> "ShiftDistribution":
        return cls(np.full(4 * L * L, 1.0 / (4 * L * L)), L)

    @classmethod
    def point_mass(cls, L: int, shift) -> "ShiftDistribution":
        r = np.zeros(4 * L * L)
        r[shift_index(L, shift)] = 1.0
        return cls(r, L)

    def grid(self) -> np.ndarray:
        return self.rho.reshape(2 * self.L, 2 * self.L)


@dataclasses.dataclass(frozen=True)
class EmConfig:
    """Driver settings; ``schedule`` lists ``(ell_max, max_iterations)`` stages."""

    schedule: tuple = ((2, 10),)
    S: float = 1.0
    eps: float = 1e-4
    seed: int = 0
    init_seed: int = 1
    stop_mode: str = "literal"       # literal | validation
    stop_statistic: str = "loglik"   # loglik | Q
    threads: int = 1
    chunk: int = 32
    assembly: str = "backprojection"  # backprojection | qg
    memory_budget: int = 2 * 1024 ** 3
    keep_trajectory: bool = False

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple((int(a), int(b)) for a, b in self.schedule))
        if not 0 < self.S <= 1:
            raise ValueError("S must lie in (0, 1]")
        if not self.schedule:
            raise ValueError("empty frequency schedule")
        if any(b[0] < a[0] for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("frequency schedule must be non-decreasing in ell_max")
        if self.stop_mode not in ("literal", "validation"):
            raise ValueError("stop_mode must be 'literal' or 'validation'")
        if self.stop_statistic not in ("loglik", "Q"):
            raise ValueError("stop_statistic must be 'loglik' or 'Q'")
        if self.assembly not in ("backprojection", "qg"):
            raise ValueError("assembly must be 'backprojection' or 'qg'")
        if self.threads < 1 or self.chunk < 1:
            raise ValueError("threads and chunk must be positive")

    def fingerprint(self) -> str:
        d = dataclasses.asdict(self)
        for k in ("threads", "keep_trajectory"):  # do not affect results
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def minibatch_size(S: float, n_patches: int) -> int:
    return max(1, int(math.floor(S * n_patches + 1e-9)))


# ---------------------------------------------------------------------------
# forward operators for one frequency stage


class PatchModel:
    """Real projection operator plus the patch window geometry."""

    def __init__(self, basis: PswfBasis, beta: BetaTable, grid: RotationGrid,
                 layout: CoefficientLayout):
        self.basis, self.beta, self.grid, self.layout = basis, beta, grid, layout
        self.L = basis.params.L
        self.K = grid.K
        self.n_shifts = 4 * self.L * self.L
        self.F = real_projection_operator(basis, beta, grid, layout)
        self.gather = gather_index(self.L)
        self.mask = visibility_mask(self.L)
        rows, cols = np.nonzero(self.gather >= 0)
        L2 = self.L * self.L
        # crop pixel (s, i) -> projection pixel gather[s, i]
        self.scatter = scipy.sparse.csr_matrix(
            (np.ones(rows.size), (rows * L2 + cols, self.gather[rows, cols])),
            shape=(self.n_shifts * L2, L2),
        )

    @property
    def M(self) -> int:
        return self.layout.size

    def templates(self, theta) -> np.ndarray:
        return self.F @ np.asarray(theta, dtype=float)

    def windowed(self, theta) -> np.ndarray:
        """``C T_s Z`` applied to every template: shape ``(K, S, L^2)``."""
        t = self.templates(theta)
        tpad = np.concatenate([t, np.zeros((self.K, 1))], axis=1)
        return tpad[:, self.gather]


# ---------------------------------------------------------------------------
# E-step


@dataclasses.dataclass
class EStep:
    """Sufficient statistics of one E-step over a set of patches."""

    indices: np.ndarray
    wsum: np.ndarray        # (K, S) posterior mass
    back: np.ndarray        # (K, L^2) posterior-weighted data, in projection frame
    logev: np.ndarray       # per-patch log evidence
    qval: np.ndarray        # per-patch expected complete log-likelihood
    norm2: float            # sum of squared patch norms
    shift_marginal: np.ndarray | None = None
    template_energy: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def loglik(self) -> float:
        return float(np.mean(self.logev))

    @property
    def Q(self) -> float:
        return float(np.mean(self.qval))


def _log_prior(rho: ShiftDistribution, K: int) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lr = np.log(rho.rho) - math.log(K)
    return np.tile(lr, K)


def _chunk_task(model, Wt, energy, logprior, sigma2, const, P, with_marginals):
    n = P.shape[0]
    corr = P @ Wt
    norms = np.einsum("ij,ij->i", P, P)
    wsum = np.zeros(Wt.shape[1])
    logev = np.empty(n)
    qval = np.empty(n)
    kernels.posterior_rows(corr, energy, logprior, norms, sigma2, const, wsum, logev, qval)
    B1 = corr.T @ P  # (K*S, L^2)
    back = np.asarray((model.scatter.T @ B1.reshape(model.K, -1).T).T)
    extra = None
    if with_marginals:
        extra = (corr.reshape(n, model.K, model.n_shifts).sum(axis=1), corr @ energy)
    return wsum, back, logev, qval, float(norms.sum()), extra


def e_step(model: PatchModel, patches: PatchSet, theta, rho: ShiftDistribution,
           indices=None, threads: int = 1, chunk: int = 32,
           with_marginals: bool = False) -> EStep:
    """Posterior statistics for ``patches[indices]`` under ``(theta, rho)``."""
    if patches.L != model.L:
        raise ValueError("patch size does not match the model")
    idx = np.arange(patches.n) if indices is None else np.asarray(indices, dtype=int)
    W = model.windowed(theta).reshape(model.K * model.n_shifts, -1)
    Wt = np.ascontiguousarray(W.T)
    energy = np.einsum("ij,ij->i", W, W)
    logprior = _log_prior(rho, model.K)
    s2 = patches.sigma2
    const = -0.5 * model.L ** 2 * math.log(2 * math.pi * s2)
    flat = patches.flat()
    blocks = [idx[a: a + chunk] for a in range(0, len(idx), chunk)]

    def task(b):
        return _chunk_task(model, Wt, energy, logprior, s2, const,
                           np.ascontiguousarray(flat[b]), with_marginals)

    wsum = np.zeros(model.K * model.n_shifts)
    back = np.zeros((model.K, model.L ** 2))
    logev, qval, marg, tene = [], [], [], []
    norm2 = 0.0
    if threads > 1:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(task, blocks)
    else:
        pool, results = None, map(task, blocks)
    try:
        for r in results:  # fixed chunk order
            wsum += r[0]
            back += r[1]
            logev.append(r[2])
            qval.append(r[3])
            norm2 += r[4]
            if with_marginals:
                marg.append(r[5][0])
                tene.append(r[5][1])
    finally:
        if pool is not None:
            pool.shutdown()
    return EStep(
        idx, wsum.reshape(model.K, model.n_shifts), back,
        np.concatenate(logev) if logev else np.zeros(0),
        np.concatenate(qval) if qval else np.zeros(0), norm2,
        np.concatenate(marg) if with_marginals else None,
        np.concatenate(tene) if with_marginals else None,
    )


# ---------------------------------------------------------------------------
# per-patch reference operations


def _template_table(model: PatchModel, theta) -> np.ndarray:
    return model.windowed(theta)  # (K, S, L^2)


def patch_likelihood(patch, shift, omega_index: int, model: PatchModel, theta, sigma2: float) -> float:
    """Unnormalized Gaussian kernel ``exp(-||patch - template||^2 / 2 sigma^2)``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    W = _template_table(model, theta)
    r = np.asarray(patch, dtype=float).ravel() - W[omega_index, shift_index(model.L, shift)]
    return float(np.exp(-np.dot(r, r) / (2.0 * sigma2)))


def log_likelihood_table(patch, model: PatchModel, theta, sigma2: float) -> np.ndarray:
    """``-||patch - template||^2 / 2 sigma^2`` for every (shift, rotation): shape ``(S, K)``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    W = _template_table(model, theta)
    r = np.asarray(patch, dtype=float).ravel()[None, None, :] - W
    return (-np.einsum("ksx,ksx->sk", r, r) / (2.0 * sigma2))


def normalized_likelihood(patch, model: PatchModel, theta, sigma2: float) -> np.ndarray:
    """Likelihood table over ``(shift, rotation)`` normalized to sum to 1."""
    ll = log_likelihood_table(patch, model, theta, sigma2)
    w = np.exp(ll - ll.max())
    return w / w.sum()


def posterior(patch, model: PatchModel, theta, rho: ShiftDistribution, sigma2: float) -> np.ndarray:
    """Bayes posterior over ``(shift, rotation)`` with prior ``rho[s] / K``: shape ``(S, K)``."""
    ll = log_likelihood_table(patch, model, theta, sigma2)
    with np.errstate(divide="ignore"):
        a = ll + np.log(rho.rho)[:, None] - math.log(model.K)
    w = np.exp(a - a.max())
    return w / w.sum()


# ---------------------------------------------------------------------------
# literal complex path: q, g and the assembled system


def _pswf_rotation_ops(basis, beta, grid, layout) -> np.ndarray:
    """``Psi H_k``: complex ``(K, L^2, M)``."""
    H = pswf_operator(beta, grid.wigner, layout)
    return np.einsum("xp,kpm->kxm", basis.matrix(), H)


def memory_estimate_g(L: int, K: int, M: int) -> int:
    return 16 * (4 * L * L * K * M * M + K * L * L * M * M)


def memory_estimate_q(n: int, L: int, K: int, M: int) -> int:
    return 16 * n * 4 * L * L * K * M


def precompute_g(basis: PswfBasis, beta: BetaTable, grid: RotationGrid,
                 layout: CoefficientLayout | None = None,
                 memory_budget: int = 2 * 1024 ** 3) -> np.ndarray:
    """``g[s, k, a, b] = sum_pixels conj(G_sk[:, a]) G_sk[:, b]`` with ``G_sk = C T_s Z Psi H_k``.

    Shape ``(4 L^2, K, M, M)``; Hermitian in ``(a, b)`` exactly.
    """
    layout = layout or CoefficientLayout.from_params(basis.params)
    L, K, M = basis.params.L, grid.K, layout.size
    est = memory_estimate_g(L, K, M)
    if est > memory_budget:
        raise MemoryBudgetError(f"g tensor needs about {est / 2**20:.1f} MiB "
                                f"(budget {memory_budget / 2**20:.1f} MiB)", est)
    G0 = _pswf_rotation_ops(basis, beta, grid, layout)
    X = np.einsum("kxa,kxb->xkab", G0.conj(), G0).reshape(L * L, -1)
    g = (visibility_mask(L) @ X.real + 1j * (visibility_mask(L) @ X.imag)).reshape(4 * L * L, K, M, M)
    return 0.5 * (g + np.conj(np.swapaxes(g, -1, -2)))


def _patches_in_projection_frame(flat: np.ndarray, L: int) -> np.ndarray:
    """``out[p, s, pix]`` = patch pixel that projection pixel ``pix`` lands on under shift ``s``."""
    g = gather_index(L)
    out = np.zeros((flat.shape[0], g.shape[0], L * L))
    rows, cols = np.nonzero(g >= 0)
    out[:, rows, g[rows, cols]] = flat[:, cols]
    return out


def precompute_q(patches: PatchSet, basis: PswfBasis, beta: BetaTable, grid: RotationGrid,
                 layout: CoefficientLayout | None = None, indices=None,
                 memory_budget: int = 2 * 1024 ** 3) -> np.ndarray:
    """``q[p, s, k, a] = sum_pixels conj(G_sk[:, a]) patch_p``: shape ``(n, 4L^2, K, M)``."""
    layout = layout or CoefficientLayout.from_params(basis.params)
    L, K, M = basis.params.L, grid.K, layout.size
    idx = np.arange(patches.n) if indices is None else np.asarray(indices)
    est = memory_estimate_q(len(idx), L, K, M)
    if est > memory_budget:
        raise MemoryBudgetError(f"q tensor needs about {est / 2**20:.1f} MiB "
                                f"(budget {memory_budget / 2**20:.1f} MiB)", est)
    G0 = _pswf_rotation_ops(basis, beta, grid, layout)
    Pt = _patches_in_projection_frame(patches.flat()[idx], L)
    return np.einsum("psx,kxa->pska", Pt, G0.conj())


def assemble_system(responsibilities, q, g, rho=None):
    """Normal equations ``A x = y`` from per-patch weights over ``(shift, rotation)``.

    ``responsibilities`` has shape ``(n, S, K)``.  With ``rho=None`` they are
    used as given (posteriors).  Otherwise they are read as normalized
    likelihoods and weighted by ``rho[s]``.
    """
    w = np.asarray(responsibilities, dtype=float)
    if w.ndim != 3 or q.shape[:3] != w.shape or g.shape[:2] != w.shape[1:]:
        raise ValueError(f"shape mismatch: weights {w.shape}, q {q.shape}, g {g.shape}")
    if rho is not None:
        r = rho.rho if isinstance(rho, ShiftDistribution) else np.asarray(rho, dtype=float)
        w = w * r[None, :, None]
    total = w.sum(axis=0)
    A = np.einsum("sk,skab->ab", total, g)
    y = np.einsum("psk,pska->a", w, q)
    return A, y


def real_system(A, y, layout: CoefficientLayout):
    """Restrict a complex system to the real parameterization ``x = B theta``."""
    B = layout.real_basis()
    Ar = (B.conj().T @ A @ B).real
    return 0.5 * (Ar + Ar.T), (B.conj().T @ y).real


def solve_real(Ar, yr, delta: float = 1e-10):
    """Solve the symmetric system; add ``delta * tr(A)/M`` only if the plain solve fails."""
    Ar = np.asarray(Ar, dtype=float)
    yr = np.asarray(yr, dtype=float)
    M = Ar.shape[0]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            th = scipy.linalg.solve(Ar, yr, assume_a="sym")
        if np.all(np.isfinite(th)):
            return th
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
        pass
    ridge = delta * max(np.trace(Ar), 1e-300) / M
    log.warning("M-step system singular; adding ridge %.3e", ridge)
    Rg = Ar + ridge * np.eye(M)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            th = scipy.linalg.solve(Rg, yr, assume_a="sym")
        if np.all(np.isfinite(th)):
            return th
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
        pass
    cond = float(np.linalg.cond(Ar))
    raise SingularSystemError(f"M-step system is singular beyond ridge rescue (cond ~ {cond:.3e})", cond)


def solve_m_step_x(A, y, layout: CoefficientLayout, delta: float = 1e-10) -> VolumeCoefficients:
    """Maximizer of the expected log-likelihood over conjugate-symmetric coefficients."""
    A = np.asarray(A)
    y = np.asarray(y)
    if A.shape != (layout.size, layout.size) or y.shape != (layout.size,):
        raise ValueError("system size does not match the coefficient layout")
    Ar, yr = real_system(A, y, layout)
    return VolumeCoefficients.from_real(layout, solve_real(Ar, yr, delta))


def update_rho(responsibilities, n_patches: int | None = None, L: int | None = None) -> ShiftDistribution:
    """Closed-form shift update: posterior mass per shift over the batch size.

    ``responsibilities`` is either ``(n, S, K)`` per patch or an aggregated
    ``(K, S)`` mass table (then ``n_patches`` is required).
    """
    w = np.asarray(responsibilities, dtype=float)
    if w.ndim == 3:
        n = w.shape[0]
        per_shift = w.sum(axis=(0, 2))
    elif w.ndim == 2:
        if n_patches is None:
            raise ValueError("n_patches is required for aggregated mass")
        n = n_patches
        per_shift = w.sum(axis=0)
    else:
        raise ValueError("unexpected responsibility shape")
    total = per_shift.sum()
    assert total > 0, "posterior mass vanished"
    rho = per_shift / n
    rho = rho / rho.sum()  # absorbs rounding; the exact ratio is already 1
    L = L if L is not None else int(round(math.sqrt(per_shift.size) / 2))
    return ShiftDistribution(rho, L)


# ---------------------------------------------------------------------------
# M-step on engine statistics


def system_from_estep(model: PatchModel, est: EStep):
    """Real normal equations ``A theta = y`` from E-step statistics."""
    F = model.F
    m = est.wsum @ model.mask                      # (K, L^2)
    Ar = (F * m[:, :, None]).reshape(-1, model.M).T @ F.reshape(-1, model.M)
    yr = F.reshape(-1, model.M).T @ est.back.ravel()
    return 0.5 * (Ar + Ar.T), yr


def expected_loglik(theta, Ar, yr, est: EStep, rho: ShiftDistribution, sigma2: float, L: int) -> float:
    """Expected complete log-likelihood (summed over the batch) at ``(theta, rho)``."""
    th = np.asarray(theta, dtype=float)
    fit = est.norm2 - 2.0 * th @ yr + th @ Ar @ th
    n = est.n
    K = est.wsum.shape[0]
    per_shift = est.wsum.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        prior = np.where(per_shift > 0, per_shift * (np.log(rho.rho) - math.log(K)), 0.0).sum()
    return float(-fit / (2 * sigma2) - 0.5 * n * L * L * math.log(2 * math.pi * sigma2) + prior)


# ---------------------------------------------------------------------------
# driver


@dataclasses.dataclass
class EmState:
    x: VolumeCoefficients
    rho: ShiftDistribution
    k: int = 0
    stage: int = 0
    ell_max_current: int = 0
    Q_history: list = dataclasses.field(default_factory=list)
    prev_stat: float = -math.inf
    rng_state: dict | None = None


@dataclasses.dataclass
class EmResult:
    state: EmState
    history: list
    trajectory: list


def initial_coefficients(params, layout: CoefficientLayout, seed: int) -> VolumeCoefficients:
    """Least-squares fit of an i.i.d. standard Gaussian ``L^3`` volume."""
    rng = np.random.default_rng(seed)
    vol = rng.standard_normal((params.L,) * 3)
    return fit_coefficients(vol, params, layout)


def _config_hash(config: EmConfig, patches: PatchSet, params, grid: RotationGrid) -> str:
    h = hashlib.sha256()
    h.update(config.fingerprint().encode())
    h.update(params.cache_key().encode())
    h.update(np.ascontiguousarray(grid.quaternions).tobytes())
    h.update(np.float64(patches.sigma2).tobytes())
    h.update(hashlib.sha256(patches.patches.tobytes()).digest())
    return h.hexdigest()[:16]


def save_checkpoint(path, state: EmState, history: list, config_hash: str, val_idx) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(
        tmp,
        version=CHECKPOINT_VERSION,
        config_hash=config_hash,
        theta=state.x.to_real(),
        ell_max=state.ell_max_current,
        rho=state.rho.rho,
        L=state.rho.L,
        k=state.k,
        stage=state.stage,
        prev_stat=state.prev_stat,
        history=json.dumps(history),
        rng_state=json.dumps(state.rng_state),
        val_idx=np.asarray(val_idx if val_idx is not None else [], dtype=int),
    )
    tmp.replace(path)


def load_checkpoint(path, params, config_hash: str | None = None):
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ResumeMismatchError(f"checkpoint version {int(z['version'])} is not supported")
        if config_hash is not None and str(z["config_hash"]) != config_hash:
            raise ResumeMismatchError("checkpoint was written by a run with a different configuration")
        layout = CoefficientLayout.from_params(params, int(z["ell_max"]))
        state = EmState(
            VolumeCoefficients.from_real(layout, z["theta"]),
            ShiftDistribution(z["rho"], int(z["L"])),
            int(z["k"]), int(z["stage"]), int(z["ell_max"]),
            prev_stat=float(z["prev_stat"]),
            rng_state=json.loads(str(z["rng_state"])),
        )
        history = json.loads(str(z["history"]))
        val = z["val_idx"]
    state.Q_history = [h["stat"] for h in history]
    return state, history, (val if val.size else None)


def _ascent_record(model, est, theta_old, theta_new, rho_old, rho_new, sigma2):
    Ar, yr = system_from_estep(model, est)
    q_old = expected_loglik(theta_old, Ar, yr, est, rho_old, sigma2, model.L)
    q_new = expected_loglik(theta_new, Ar, yr, est, rho_new, sigma2, model.L)
    return q_old / est.n, q_new / est.n


def m_step(model: PatchModel, est: EStep, patches: PatchSet, rho: ShiftDistribution,
           assembly: str = "backprojection", memory_budget: int = 2 * 1024 ** 3,
           theta=None, cache: dict | None = None):
    """New ``(theta, rho)`` from E-step statistics."""
    if assembly == "qg":
        cache = {} if cache is None else cache
        if "g" not in cache:
            cache["g"] = precompute_g(model.basis, model.beta, model.grid, model.layout, memory_budget)
        q = precompute_q(patches, model.basis, model.beta, model.grid, model.layout,
                         est.indices, memory_budget)
        post = _full_posteriors(model, patches, theta, rho, est.indices)
        A, y = assemble_system(post, q, cache["g"])
        Ar, yr = real_system(A, y, model.layout)
    else:
        Ar, yr = system_from_estep(model, est)
    theta_new = solve_real(Ar, yr)
    rho_new = update_rho(est.wsum, est.n, model.L)
    return theta_new, rho_new


def _full_posteriors(model, patches, theta, rho, indices) -> np.ndarray:
    """Dense ``(n, S, K)`` posteriors; only for small problems."""
    out = []
    for p in indices:
        out.append(posterior(patches.patches[p], model, theta, rho, patches.sigma2))
    return np.array(out)


def run(patches: PatchSet, config: EmConfig, basis: PswfBasis, beta: BetaTable,
        grid: RotationGrid, x0: VolumeCoefficients | None = None,
        rho0: ShiftDistribution | None = None, checkpoint_dir=None,
        resume: bool = False, progress=None) -> EmResult:
    """Stochastic approximate EM with frequency marching.

    Each stage runs until the per-patch statistic improves by at most
    ``eps`` or the stage's iteration cap is reached.  Checkpoints are written
    after every M-step when ``checkpoint_dir`` is given.
    """
    params = basis.params
    top = max(e for e, _ in config.schedule)
    if top > params.ell_max or top > beta.ell_max or top > len(grid.wigner) - 1:
        raise ValueError(f"schedule needs ell_max {top}, tables cover {min(params.ell_max, beta.ell_max)}")
    if patches.L != params.L:
        raise ValueError("patch size and basis size differ")
    n = patches.n
    bsize = minibatch_size(config.S, n)
    chash = _config_hash(config, patches, params, grid)
    ckpt = Path(checkpoint_dir) / "checkpoint.npz" if checkpoint_dir is not None else None

    with threadpool_limits(limits=1):
        rng = np.random.default_rng(config.seed)
        history: list = []
        trajectory: list = []
        val_idx = None
        if resume and ckpt is not None and ckpt.exists():
            state, history, val_idx = load_checkpoint(ckpt, params, chash)
            rng.bit_generator.state = state.rng_state
            fresh_stage = False
        else:
            layout0 = CoefficientLayout.from_params(params, config.schedule[0][0])
            x = x0.embed(layout0) if x0 is not None else initial_coefficients(params, layout0, config.init_seed)
            if x.ell_max > layout0.ell_max:
                raise ValueError("initial coefficients exceed the first stage")
            state = EmState(x, rho0 or ShiftDistribution.uniform(params.L), 0, 0, layout0.ell_max)
            if config.stop_mode == "validation" and bsize < n:
                vrng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
                val_idx = np.sort(vrng.choice(n, size=bsize, replace=False))
            fresh_stage = True

        def draw():
            if bsize == n:
                return np.arange(n)
            return np.sort(rng.choice(n, size=bsize, replace=False))

        for stage in range(state.stage, len(config.schedule)):
            ell, cap = config.schedule[stage]
            if stage != state.stage or fresh_stage:
                if stage != state.stage:
                    state.k, state.prev_stat = 0, -math.inf
                state.stage = stage
                layout = CoefficientLayout.from_params(params, ell)
                state.x = state.x.embed(layout)
                state.ell_max_current = ell
            fresh_stage = True
            layout = state.x.layout
            model = PatchModel(basis, beta, grid, layout)
            qg_cache: dict = {}
            if config.keep_trajectory and not trajectory:
                trajectory.append((state.x.to_real(), state.rho.rho.copy()))
            while True:
                t0 = time.perf_counter()
                idx = draw()
                theta = state.x.to_real()
                est = e_step(model, patches, theta, state.rho, idx, config.threads, config.chunk)
                if val_idx is not None:
                    vest = e_step(model, patches, theta, state.rho, val_idx, config.threads, config.chunk)
                else:
                    vest = est
                stat = vest.loglik if config.stop_statistic == "loglik" else vest.Q
                rec = {"stage": stage, "ell_max": ell, "k": state.k, "stat": stat,
                       "loglik": est.loglik, "Q": est.Q, "batch": int(est.n)}
                if state.k > 0 and stat - state.prev_stat <= config.eps:
                    rec["stopped"] = "eps"
                elif state.k >= cap:
                    rec["stopped"] = "cap"
                if "stopped" in rec:
                    rec["wall"] = time.perf_counter() - t0
                    history.append(rec)
                    state.Q_history.append(stat)
                    _emit(progress, rec)
                    break
                theta_new, rho_new = m_step(model, est, patches, state.rho, config.assembly,
                                            config.memory_budget, theta, qg_cache)
                q_old, q_new = _ascent_record(model, est, theta, theta_new, state.rho, rho_new, patches.sigma2)
                rec.update(Q_before=q_old, Q_after=q_new, wall=time.perf_counter() - t0)
                history.append(rec)
                state.Q_history.append(stat)
                _emit(progress, rec)
                state.x = VolumeCoefficients.from_real(layout, theta_new)
                state.rho = rho_new
                state.prev_stat = stat
                state.k += 1
                if config.keep_trajectory:
                    trajectory.append((theta_new.copy(), rho_new.rho.copy()))
                if ckpt is not None:
                    state.rng_state = rng.bit_generator.state
                    save_checkpoint(ckpt, state, history, chash, val_idx)
        state.rng_state = rng.bit_generator.state
    return EmResult(state, history, trajectory)


def run_full_batch(patches: PatchSet, config: EmConfig, basis: PswfBasis, beta: BetaTable,
                   grid: RotationGrid, x0: VolumeCoefficients | None = None,
                   rho0: ShiftDistribution | None = None) -> EmResult:
    """Plain (non-stochastic) EM over all patches; no random draws at all."""
    params = basis.params
    history, trajectory = [], []
    with threadpool_limits(limits=1):
        layout = CoefficientLayout.from_params(params, config.schedule[0][0])
        x = x0.embed(layout) if x0 is not None else initial_coefficients(params, layout, config.init_seed)
        rho = rho0 or ShiftDistribution.uniform(params.L)
        allidx = np.arange(patches.n)
        for stage, (ell, cap) in enumerate(config.schedule):
            layout = CoefficientLayout.from_params(params, ell)
            x = x.embed(layout)
            model = PatchModel(basis, beta, grid, layout)
            if config.keep_trajectory and not trajectory:
                trajectory.append((x.to_real(), rho.rho.copy()))
            prev, k = -math.inf, 0
            while True:
                theta = x.to_real()
                est = e_step(model, patches, theta, rho, allidx, config.threads, config.chunk)
                stat = est.loglik if config.stop_statistic == "loglik" else est.Q
                if (k > 0 and stat - prev <= config.eps) or k >= cap:
                    history.append({"stage": stage, "k": k, "stat": stat, "loglik": est.loglik, "Q": est.Q})
                    break
                theta_new, rho = m_step(model, est, patches, rho)
                history.append({"stage": stage, "k": k, "stat": stat, "loglik": est.loglik, "Q": est.Q})
                x = VolumeCoefficients.from_real(layout, theta_new)
                prev = stat
                k += 1
                if config.keep_trajectory:
                    trajectory.append((theta_new.copy(), rho.rho.copy()))
    return EmResult(EmState(x, rho, k, len(config.schedule) - 1, x.ell_max), history, trajectory)


def _emit(progress, rec):
    line = (f"stage ell_max={rec['ell_max']} k={rec['k']} stat={rec['stat']:.6f} "
            f"Q={rec['Q']:.6f} wall={rec.get('wall', 0.0):.2f}s")
    log.info(line)
    if progress is not None:
        progress(rec)
