"""Scoring: volume alignment, Fourier shell correlation, and patch picking."""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
from scipy import ndimage, optimize

from .basis import RotationGrid, random_rotations, rotation_zyz
from .em import PatchModel, PatchSet, ShiftDistribution, e_step
from .forward import VolumeCoefficients, render_operator, zero_template_shifts
from .simulate import PatchTruth


# ---------------------------------------------------------------------------
# FSC


@dataclasses.dataclass
class FscCurve:
    shells: np.ndarray          # integer radii that had voxels
    values: np.ndarray
    L: int

    @property
    def frequency(self) -> np.ndarray:
        """Spatial frequency of each shell in cycles per voxel."""
        return self.shells / float(self.L)

    @property
    def nyquist_shell(self) -> int:
        return self.L // 2

    @property
    def resolution_shell(self) -> int:
        """First shell where the curve drops below 0.5 (Nyquist if it never does)."""
        sel = self.shells <= self.nyquist_shell
        for r, v in zip(self.shells[sel], self.values[sel]):
            if v < 0.5:
                return int(r)
        return self.nyquist_shell

    def min_up_to(self, radius: float) -> float:
        sel = self.shells <= radius + 1e-12
        return float(np.min(self.values[sel]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["shell", "frequency", "fsc"])
            for r, f, v in zip(self.shells, self.frequency, self.values):
                w.writerow([int(r), f"{f:.6f}", f"{v:.10f}"])


def shell_index(shape) -> np.ndarray:
    grids = np.meshgrid(*[np.fft.fftfreq(n) * n for n in shape], indexing="ij")
    return np.rint(np.sqrt(sum(g ** 2 for g in grids))).astype(int)


def fsc(a: np.ndarray, b: np.ndarray) -> FscCurve:
    """Per-shell normalized correlation of two volumes' Fourier transforms."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    A, B = np.fft.fftn(a), np.fft.fftn(b)
    r = shell_index(a.shape).ravel()
    nr = r.max() + 1
    cross = np.bincount(r, (A * np.conj(B)).real.ravel(), nr)
    pa = np.bincount(r, (np.abs(A) ** 2).ravel(), nr)
    pb = np.bincount(r, (np.abs(B) ** 2).ravel(), nr)
    count = np.bincount(r, minlength=nr)
    denom = np.sqrt(pa * pb)
    ok = (count > 0) & (denom > 0)
    vals = np.clip(cross[ok] / denom[ok], -1.0, 1.0)
    return FscCurve(np.flatnonzero(ok), vals, a.shape[0])


# ---------------------------------------------------------------------------
# alignment


@dataclasses.dataclass
class AlignResult:
    aligned: np.ndarray
    rotation: np.ndarray
    reflected: bool
    shift: tuple
    score: float


def _ncc_shift(vol, truth_f, truth_norm, max_shift):
    """Best normalized correlation over integer circular shifts within ``max_shift``."""
    L = vol.shape[0]
    vn = np.linalg.norm(vol)
    if vn == 0:
        return -np.inf, (0, 0, 0)
    cc = np.fft.ifftn(truth_f * np.conj(np.fft.fftn(vol))).real / (vn * truth_norm)
    s = np.fft.fftfreq(L) * L
    allowed = np.abs(s) <= max_shift
    cc = np.where(allowed[:, None, None] & allowed[None, :, None] & allowed[None, None, :], cc, -np.inf)
    i = np.unravel_index(int(np.argmax(cc)), cc.shape)
    return float(cc[i]), tuple(int(s[j]) for j in i)


class _SplineRotator:
    def __init__(self, vol):
        self.L = vol.shape[0]
        self.coef = ndimage.spline_filter(np.asarray(vol, float), order=3, mode="constant")
        c = (self.L - 1) / 2.0
        g = np.arange(self.L) - c
        self.pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), 0).reshape(3, -1)
        self.c = c

    def __call__(self, R, reflect):
        src = np.asarray(R).T @ self.pts
        if reflect:
            src = -src
        out = ndimage.map_coordinates(self.coef, src + self.c, order=3, mode="constant", prefilter=False)
        return out.reshape((self.L,) * 3)


def quasi_uniform_rotations(n: int, seed: int = 12345) -> np.ndarray:
    """``n`` rotations (Haar-random with a fixed seed), the identity first."""
    R = random_rotations(n, np.random.default_rng(seed))
    R[0] = np.eye(3)
    return R


def align(est: np.ndarray, truth: np.ndarray, n_rotations: int = 3000, refine_steps: int = 20,
          max_shift: int | None = None, rotate=None, seed: int = 12345) -> AlignResult:
    """Rotate/reflect/translate ``est`` to best match ``truth`` (normalized cross-correlation).

    ``rotate(R, reflect)`` may be supplied to replace spline interpolation with
    an exact rotation operator (for example one acting on expansion
    coefficients).
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError("grids differ")
    L = est.shape[0]
    max_shift = L // 3 if max_shift is None else max_shift
    rot = rotate or _SplineRotator(est)
    tf = np.fft.fftn(truth)
    tn = np.linalg.norm(truth)

    def score(R, refl):
        return _ncc_shift(rot(R, refl), tf, tn, max_shift)[0]

    best = (-np.inf, None, False)
    for R in quasi_uniform_rotations(n_rotations, seed):
        for refl in (False, True):
            s = score(R, refl)
            if s > best[0]:
                best = (s, R, refl)
    _, R0, refl = best

    # bounded scalar refinement of small axis rotations, one axis at a time
    cur = R0
    width = 2.0 * math.pi / max(n_rotations, 1) ** (1 / 3.0)
    for step in range(refine_steps):
        axis = step % 3

        def f(t):
            return -score(_axis_rotation(axis, t) @ cur, refl)

        res = optimize.minimize_scalar(f, bracket=None, bounds=(-width, width), method="bounded",
                                       options={"xatol": 1e-4})
        if -res.fun > score(cur, refl):
            cur = _axis_rotation(axis, res.x) @ cur
        if axis == 2:
            width *= 0.6
    vol = rot(cur, refl)
    s, shift = _ncc_shift(vol, tf, tn, max_shift)
    return AlignResult(np.roll(vol, shift, axis=(0, 1, 2)), cur, refl, shift, s)


def _axis_rotation(axis: int, t: float) -> np.ndarray:
    if axis == 2:
        return rotation_zyz(t, 0.0, 0.0)
    if axis == 1:
        return rotation_zyz(0.0, t, 0.0)
    # rotation about x
    c, s = math.cos(t), math.sin(t)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def coefficient_rotator(x: VolumeCoefficients, params):
    """Exact rotation (and inversion) of an expanded volume, rendered to voxels."""
    Rop = render_operator(params, x.layout).real
    L = params.L
    ell, _, _ = x.layout.indices()
    parity = (-1.0) ** ell

    def rotate(R, reflect):
        y = x.rotated(R)
        if reflect:
            y = VolumeCoefficients(y.layout, y.coeffs * parity)
        return (Rop @ y.to_real()).reshape(L, L, L)

    return rotate


# ---------------------------------------------------------------------------
# picking


@dataclasses.dataclass
class PickReport:
    picked_shift: np.ndarray
    predicted_empty: np.ndarray
    template_energy: np.ndarray
    f1_empty: float = float("nan")
    precision: float = float("nan")
    sensitivity: float = float("nan")
    localization_accuracy: float = float("nan")
    baseline_f1: float = float("nan")
    chance_accuracy: float = float("nan")
    uniform_chance_accuracy: float = float("nan")
    n_half_occupied: int = 0
    degenerate: bool = False

    def as_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items()
             if k not in ("picked_shift", "predicted_empty", "template_energy")}
        d["picked_shift"] = self.picked_shift.tolist()
        d["predicted_empty"] = self.predicted_empty.astype(int).tolist()
        return d


def f1_score(pred, truth):
    """Standard F1 with ``True`` as the positive class; returns (f1, precision, recall)."""
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    tp = np.sum(pred & truth)
    fp = np.sum(pred & ~truth)
    fn = np.sum(~pred & truth)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return float(f1), float(prec), float(rec)


def permutation_chance(picked: np.ndarray, true_shift: np.ndarray, period: int) -> float:
    """Expected accuracy when picks are paired with truths at random.

    This is the accuracy of a picker whose output carries no information
    about the patch but keeps the same distribution of picked shifts.
    """
    d = circular_distance(picked[:, None, :], true_shift[None, :, :], period)
    return float(np.mean(np.all(d <= 1, axis=-1)))


def half_occupied(shift: np.ndarray, L: int) -> np.ndarray:
    """Patches whose generating shift leaves at least half of the projection inside."""
    lx, ly = shift[:, 0], shift[:, 1]
    valid = (lx >= 0) & (ly >= 0)
    low = (lx < L / 2.0) & (ly < L / 2.0)
    high = (lx > 1.5 * L) & (ly > 1.5 * L)
    return valid & (low | high)


def circular_distance(a, b, period: int) -> np.ndarray:
    d = np.abs(np.asarray(a) - np.asarray(b)) % period
    return np.minimum(d, period - d)


def pick(patches: PatchSet, x: VolumeCoefficients, grid: RotationGrid, basis, beta,
         rho: ShiftDistribution | None = None, truth: PatchTruth | None = None,
         empty_threshold: float = 0.05, empty_energy_fraction: float = 0.01,
         threads: int = 1, chunk: int = 32) -> PickReport:
    """Most probable shift per patch, empty-patch calls, and scores against ``truth``."""
    L = patches.L
    model = PatchModel(basis, beta, grid, x.layout)
    rho = rho or ShiftDistribution.uniform(L)
    theta = x.to_real()
    est = e_step(model, patches, theta, rho, None, threads, chunk, with_marginals=True)
    marg = est.shift_marginal / model.K
    best = np.argmax(marg, axis=1)
    picked = np.stack(np.divmod(best, 2 * L), axis=1)
    zero = zero_template_shifts(L)
    pred_empty = zero[best] | (est.template_energy < empty_threshold * L * L * patches.sigma2)
    degenerate = not np.any(model.templates(theta))
    rep = PickReport(picked, pred_empty, est.template_energy, degenerate=degenerate)
    if truth is not None:
        true_empty = truth.clean_energy < empty_energy_fraction * truth.mean_projection_energy
        rep.f1_empty, rep.precision, rep.sensitivity = f1_score(pred_empty, true_empty)
        rep.baseline_f1 = f1_score(np.ones_like(true_empty), true_empty)[0]
        half = half_occupied(truth.shift, L) & (truth.n_projections == 1)
        rep.n_half_occupied = int(half.sum())
        if half.any():
            d = circular_distance(picked[half], truth.shift[half], 2 * L)
            rep.localization_accuracy = float(np.mean(np.all(d <= 1, axis=1)))
            rep.chance_accuracy = permutation_chance(picked[half], truth.shift[half], 2 * L)
        rep.uniform_chance_accuracy = 9.0 / (4 * L * L)
    return rep
