"""Synthetic micrographs: placement, projection rendering, noise, downsampling.

Placements are stored by the top-left corner of each projection box in
micrograph pixel coordinates (row, column); axis 0 is x.  A projection whose
corner is ``c`` appears in the patch with origin ``a L`` under the shift
``(a L - c) mod 2L`` of the patch operator.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings

import numpy as np
from scipy import ndimage

from .basis import random_quaternions, quaternion_to_matrix, rotation_grid_from_matrices
from .forward import (
    BetaTable,
    CoefficientLayout,
    PswfBasis,
    VolumeCoefficients,
    real_projection_operator,
)

log = logging.getLogger(__name__)

MODES = ("separated", "arbitrary")
METHODS = ("true-volume", "expanded-volume")


class PlacementError(RuntimeError):
    """Raised when the requested number of projections cannot be placed."""

    def __init__(self, message, achieved: int, requested: int):
        super().__init__(message)
        self.achieved = achieved
        self.requested = requested


@dataclasses.dataclass(frozen=True)
class SimConfig:
    N: int
    gamma: float
    snr: float
    L: int
    mode: str = "separated"
    method: str = "expanded-volume"
    seed: int = 0
    downsample_to: int | None = None
    on_infeasible: str = "error"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.on_infeasible not in ("error", "saturate"):
            raise ValueError("on_infeasible must be 'error' or 'saturate'")
        if self.L < 3 or self.N < self.L:
            raise ValueError("need 3 <= L <= N")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class Placement:
    corner: tuple
    quaternion: np.ndarray
    energy: float = float("nan")

    def center(self, L: int) -> tuple:
        return tuple(float(c) + (L - 1) / 2.0 for c in self.corner)


@dataclasses.dataclass
class Micrograph:
    pixels: np.ndarray
    sigma2: float
    placements: list
    L_proj: int
    clean: np.ndarray | None = None
    config: dict | None = None

    @property
    def N(self) -> int:
        return self.pixels.shape[0]

    @property
    def T(self) -> int:
        return len(self.placements)

    def occupancy(self) -> float:
        return self.T * self.L_proj ** 2 / float(self.N ** 2)

    def manifest(self) -> dict:
        L = self.L_proj
        return {
            "format": "patchem-manifest/1",
            "N": self.N,
            "L_proj": L,
            "sigma2": self.sigma2,
            "T": self.T,
            "corner_convention": "top-left corner (row, col) of the L_proj box; axis 0 is x",
            "shift_convention": "projection with corner c in patch with origin o has shift (o - c) mod 2L",
            "placements": [
                {
                    "corner": [float(c) for c in p.corner],
                    "center": list(p.center(L)),
                    "quaternion": [float(q) for q in p.quaternion],
                    "energy": float(p.energy),
                }
                for p in self.placements
            ],
            "config": self.config,
        }

    @classmethod
    def from_manifest(cls, pixels, manifest: dict) -> "Micrograph":
        pl = [
            Placement(tuple(p["corner"]), np.asarray(p["quaternion"], float), p.get("energy", float("nan")))
            for p in manifest["placements"]
        ]
        return cls(np.asarray(pixels, float), float(manifest["sigma2"]), pl,
                   int(manifest["L_proj"]), config=manifest.get("config"))


# ---------------------------------------------------------------------------
# placement


def target_count(gamma: float, N: int, L: int) -> int:
    """Number of projections for occupancy fraction ``gamma = T L^2 / N^2``."""
    return int(round(gamma * N * N / float(L * L)))


def max_separated_occupancy(L: int) -> float:
    """Lattice-packing bound on occupancy under the separated-mode condition."""
    return L * L / float((2 * L - 1) ** 2)


def _exclusion(mode: str, L: int) -> int:
    # corners closer than this on both axes conflict
    return 2 * L - 1 if mode == "separated" else L


def sample_corners(N: int, L: int, T: int, mode: str, rng: np.random.Generator,
                   on_infeasible: str = "error", batch: int = 4096,
                   patience: int = 64) -> np.ndarray:
    """Sequentially place ``T`` box corners in ``[0, N-L]^2``.

    Candidates are drawn uniformly and rejected on conflict.  After
    ``patience`` consecutive rejections, the remaining free positions are
    enumerated and sampled exactly, so a jammed configuration is detected
    rather than guessed.
    """
    span = N - L + 1
    d = _exclusion(mode, L)
    free = np.ones((span, span), dtype=bool)
    corners = []

    def block(cx, cy):
        free[max(cx - d + 1, 0): cx + d, max(cy - d + 1, 0): cy + d] = False

    misses = 0
    while len(corners) < T and misses < patience:
        cand = rng.integers(0, span, size=(batch, 2))
        for cx, cy in cand:
            if free[cx, cy]:
                corners.append((int(cx), int(cy)))
                block(cx, cy)
                misses = 0
                if len(corners) == T:
                    break
            else:
                misses += 1
                if misses >= patience:
                    break
    if len(corners) < T:
        avail = np.flatnonzero(free)
        while len(corners) < T and avail.size:
            pick = avail[rng.integers(avail.size)]
            cx, cy = divmod(int(pick), span)
            corners.append((cx, cy))
            ax, ay = np.divmod(avail, span)
            avail = avail[(np.abs(ax - cx) >= d) | (np.abs(ay - cy) >= d)]
    if len(corners) < T:
        msg = (f"placed only T={len(corners)} of {T} projections (occupancy "
               f"{len(corners) * L * L / N ** 2:.3f}); the {mode} condition admits no more")
        if on_infeasible == "error":
            raise PlacementError(msg, len(corners), T)
        log.warning(msg)
    return np.array(corners, dtype=int).reshape(-1, 2)


def check_separation(corners, L: int, mode: str = "separated") -> bool:
    """Brute-force pairwise check of the placement condition."""
    c = np.asarray(corners, dtype=int).reshape(-1, 2)
    d = _exclusion(mode, L)
    for t in range(len(c)):
        diff = np.abs(c[t + 1:] - c[t])
        if np.any((diff[:, 0] < d) & (diff[:, 1] < d)):
            return False
    return True


class ExpansionSource:
    """Projections synthesized from expansion coefficients on the PSWF basis."""

    def __init__(self, x: VolumeCoefficients, basis: PswfBasis, beta: BetaTable):
        self.x, self.basis, self.beta = x, basis, beta
        self.L = basis.params.L

    def project_many(self, rotations, chunk: int = 256) -> np.ndarray:
        R = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
        layout: CoefficientLayout = self.x.layout
        theta = self.x.to_real()
        out = np.empty((len(R), self.L, self.L))
        for a in range(0, len(R), chunk):
            grid = rotation_grid_from_matrices(R[a: a + chunk], layout.ell_max)
            F = real_projection_operator(self.basis, self.beta, grid, layout)
            out[a: a + chunk] = (F @ theta).reshape(-1, self.L, self.L)
        return out


class VoxelSource:
    """Line-integral projections of a voxel volume after trilinear rotation."""

    def __init__(self, volume: np.ndarray):
        volume = np.asarray(volume, dtype=float)
        if volume.ndim != 3 or len(set(volume.shape)) != 1:
            raise ValueError("volume must be a cube")
        self.volume = volume
        self.L = volume.shape[0]

    def project(self, R) -> np.ndarray:
        L = self.L
        c = (L - 1) / 2.0
        g = np.arange(L) - c
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=0).reshape(3, -1)
        # sample f(R^T r): source coordinates are R^T r
        src = np.asarray(R, dtype=float).T @ pts + c
        vals = ndimage.map_coordinates(self.volume, src, order=1, mode="constant", cval=0.0)
        # dz = 2/L in disk units, matching the expansion's projection scale
        return vals.reshape(L, L, L).sum(axis=2) * (2.0 / L)

    def project_many(self, rotations) -> np.ndarray:
        return np.array([self.project(R) for R in np.asarray(rotations).reshape(-1, 3, 3)])


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def place_projections(source, config: SimConfig) -> Micrograph:
    """Place projections of ``source`` uniformly at random (noiseless)."""
    L = source.L
    if L != config.L:
        raise ValueError(f"source projections are {L} px but config.L = {config.L}")
    r_place, r_rot, _ = _streams(config.seed)
    T = target_count(config.gamma, config.N, L)
    corners = sample_corners(config.N, L, T, config.mode, r_place, config.on_infeasible)
    quats = random_quaternions(len(corners), r_rot)
    imgs = source.project_many(quaternion_to_matrix(quats)) if len(corners) else np.zeros((0, L, L))
    pix = np.zeros((config.N, config.N))
    placements = []
    for (cx, cy), q, img in zip(corners, quats, imgs):
        pix[cx: cx + L, cy: cy + L] += img
        placements.append(Placement((int(cx), int(cy)), q, float(np.sum(img ** 2))))
    return Micrograph(pix, 0.0, placements, L, clean=pix.copy(), config=config.as_dict())


def noise_variance(energies, L: int, snr: float) -> float:
    """``sigma^2 = mean ||I||_F^2 / (L^2 snr)``."""
    e = np.asarray(energies, dtype=float)
    if e.size == 0:
        raise ValueError("no projections to calibrate noise against")
    mean = float(np.mean(e))
    if not mean > 0:
        raise ValueError("projections have zero energy")
    return mean / (L * L * snr) if np.isfinite(snr) else 0.0


def add_noise(mic: Micrograph, snr: float, rng=None, sigma2: float | None = None) -> Micrograph:
    """Add white Gaussian noise calibrated to the mean projection energy.

    ``sigma2`` overrides the calibration, for datasets whose micrographs
    share one noise level.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        seed = rng if rng is not None else (mic.config or {}).get("seed", 0)
        rng = _streams(seed)[2]
    if sigma2 is None:
        sigma2 = noise_variance([p.energy for p in mic.placements], mic.L_proj, snr)
    elif not sigma2 >= 0:
        raise ValueError("sigma2 must be non-negative")
    clean = mic.clean if mic.clean is not None else mic.pixels
    noisy = clean + (rng.normal(0.0, math.sqrt(sigma2), clean.shape) if sigma2 > 0 else 0.0)
    return dataclasses.replace(mic, pixels=noisy, sigma2=sigma2, clean=clean)


def pooled_noise_variance(micrographs, snr: float) -> float:
    """One noise variance for a dataset, from all of its projection energies."""
    mics = list(micrographs)
    sizes = {m.L_proj for m in mics}
    if len(sizes) != 1:
        raise ValueError("micrographs hold projections of different sizes")
    return noise_variance([p.energy for m in mics for p in m.placements], sizes.pop(), snr)


# ---------------------------------------------------------------------------
# downsampling


def _crop_axis(F: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = F.shape[axis]
    F = np.moveaxis(F, axis, 0)
    out = np.zeros((n_out,) + F.shape[1:], dtype=complex)
    h = n_out // 2
    if n_out % 2:
        out[: h + 1] = F[: h + 1]
        if h:
            out[-h:] = F[-h:]
    else:
        out[:h] = F[:h]
        if h > 1:
            out[-(h - 1):] = F[-(h - 1):]
        # the output Nyquist bin collects both input bins at +-h
        out[h] = 0.5 * (F[h] + F[n_in - h])
    return np.moveaxis(out * (n_out / n_in), 0, axis)


def fourier_crop(img: np.ndarray, n_out: int) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    n_in = img.shape[0]
    if n_out == n_in:
        return img.copy()
    if n_out > n_in:
        raise ValueError("Fourier cropping cannot enlarge")
    F = np.fft.fft2(img)
    F = _crop_axis(_crop_axis(F, n_out, 0), n_out, 1)
    return np.fft.ifft2(F).real


def crop_noise_factor(n_in: int, n_out: int) -> float:
    """Variance ratio of white noise after :func:`fourier_crop`."""
    if n_out == n_in:
        return 1.0
    eff = n_out - (0.5 if n_out % 2 == 0 else 0.0)
    return (eff / n_in) ** 2


def downsample(mic: Micrograph, target_L: int) -> Micrograph:
    """Fourier-crop the micrograph so projections become ``target_L`` px."""
    if target_L == mic.L_proj:
        return dataclasses.replace(mic)
    if target_L > mic.L_proj:
        raise ValueError("target_L must not exceed the current projection size")
    exact = mic.N * target_L / mic.L_proj
    n_out = int(round(exact))
    if abs(exact - n_out) > 1e-9:
        warnings.warn(f"downsampled size {exact:.3f} is not an integer; using {n_out}")
    f = n_out / mic.N
    pix = fourier_crop(mic.pixels, n_out)
    clean = fourier_crop(mic.clean, n_out) if mic.clean is not None else None
    placements = []
    for p in mic.placements:
        # the crop keeps the sampling origin, so coordinates scale about pixel 0
        ctr = [c * f for c in p.center(mic.L_proj)]
        corner = tuple(v - (target_L - 1) / 2.0 for v in ctr)
        placements.append(Placement(corner, p.quaternion, p.energy * f * f))
    return Micrograph(pix, mic.sigma2 * crop_noise_factor(mic.N, n_out), placements,
                      target_L, clean=clean, config=mic.config)


# ---------------------------------------------------------------------------
# generation pipelines


def generate_method_two(x_true: VolumeCoefficients, config: SimConfig,
                        basis: PswfBasis, beta: BetaTable, sigma2: float | None = None) -> Micrograph:
    """Micrograph whose projections come from the expansion itself."""
    if config.method != "expanded-volume":
        config = dataclasses.replace(config, method="expanded-volume")
    mic = place_projections(ExpansionSource(x_true, basis, beta), config)
    return add_noise(mic, config.snr, sigma2=sigma2)


def generate_method_one(volume: np.ndarray, config: SimConfig, sigma2: float | None = None) -> Micrograph:
    """Micrograph from a voxel volume, noised at full size, then downsampled."""
    if config.method != "true-volume":
        config = dataclasses.replace(config, method="true-volume")
    mic = add_noise(place_projections(VoxelSource(volume), config), config.snr, sigma2=sigma2)
    if config.downsample_to is not None:
        mic = downsample(mic, config.downsample_to)
    return mic


# ---------------------------------------------------------------------------
# patches


def partition(mic_or_pixels, L: int, policy: str = "crop") -> np.ndarray:
    """Non-overlapping ``L x L`` patches in row-major order of patch origin."""
    pix = mic_or_pixels.pixels if isinstance(mic_or_pixels, Micrograph) else np.asarray(mic_or_pixels)
    n = pix.shape[0]
    if n % L:
        if policy == "crop":
            pix = pix[: n - n % L, : n - n % L]
        elif policy == "pad":
            m = -(-n // L) * L
            pix = np.pad(pix, ((0, m - n), (0, m - n)))
        else:
            raise ValueError(f"micrograph side {n} is not a multiple of {L}")
    b = pix.shape[0] // L
    return pix.reshape(b, L, b, L).transpose(0, 2, 1, 3).reshape(b * b, L, L).copy()


def patch_origins(n: int, L: int) -> np.ndarray:
    b = n // L
    a = np.arange(b) * L
    return np.stack(np.meshgrid(a, a, indexing="ij"), axis=-1).reshape(-1, 2)


@dataclasses.dataclass
class PatchTruth:
    """Per-patch ground truth derived from the placement record."""

    shift: np.ndarray      # (P, 2); -1 where no projection touches the patch
    n_projections: np.ndarray
    clean_energy: np.ndarray
    mean_projection_energy: float


def patch_ground_truth(mic: Micrograph, L: int | None = None) -> PatchTruth:
    L = mic.L_proj if L is None else L
    origins = patch_origins(mic.N, L)
    b = mic.N // L
    shift = -np.ones((len(origins), 2), dtype=int)
    count = np.zeros(len(origins), dtype=int)
    for p in mic.placements:
        cx, cy = (int(round(v)) for v in p.corner)
        for ax in range(max(cx // L, 0), min((cx + L - 1) // L, b - 1) + 1):
            for ay in range(max(cy // L, 0), min((cy + L - 1) // L, b - 1) + 1):
                k = ax * b + ay
                count[k] += 1
                shift[k] = ((ax * L - cx) % (2 * L), (ay * L - cy) % (2 * L))
    if mic.clean is None:
        raise ValueError("patch ground truth needs the noiseless micrograph")
    energy = np.sum(partition(mic.clean, L) ** 2, axis=(1, 2))
    energies = [p.energy for p in mic.placements]
    return PatchTruth(shift, count, energy, float(np.mean(energies)) if energies else 0.0)


# ---------------------------------------------------------------------------
# phantoms


def gaussian_blobs(L: int, seed: int = 7, n_blobs: int = 6) -> np.ndarray:
    """Asymmetric sum of anisotropic Gaussians inside the inscribed ball."""
    rng = np.random.default_rng(seed)
    g = (np.arange(L) - (L - 1) / 2.0) / (L / 2.0)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    vol = np.zeros((L, L, L))
    for _ in range(n_blobs):
        c = rng.uniform(-0.45, 0.45, 3)
        w = rng.uniform(0.18, 0.35, 3)
        a = rng.uniform(0.5, 1.5)
        vol += a * np.exp(-(((X - c[0]) / w[0]) ** 2 + ((Y - c[1]) / w[1]) ** 2 + ((Z - c[2]) / w[2]) ** 2) / 2)
    return vol


_SHEPP_LOGAN = [
    # value, axes (a, b, c), center (x, y, z), phi (deg)
    (1.0, (0.69, 0.92, 0.81), (0.0, 0.0, 0.0), 0.0),
    (-0.8, (0.6624, 0.874, 0.78), (0.0, -0.0184, 0.0), 0.0),
    (-0.2, (0.11, 0.31, 0.22), (0.22, 0.0, 0.0), -18.0),
    (-0.2, (0.16, 0.41, 0.28), (-0.22, 0.0, 0.0), 18.0),
    (0.1, (0.21, 0.25, 0.41), (0.0, 0.35, -0.15), 0.0),
    (0.1, (0.046, 0.046, 0.05), (0.0, 0.1, 0.25), 0.0),
    (0.1, (0.046, 0.046, 0.05), (0.0, -0.1, 0.25), 0.0),
    (0.1, (0.046, 0.023, 0.05), (-0.08, -0.605, 0.0), 0.0),
    (0.1, (0.023, 0.023, 0.02), (0.0, -0.606, 0.0), 0.0),
    (0.1, (0.023, 0.046, 0.02), (0.06, -0.605, 0.0), 0.0),
]


def shepp_logan_3d(L: int) -> np.ndarray:
    """3-D Shepp-Logan phantom (Kak-Slaney ellipsoids) on an ``L^3`` grid."""
    g = (np.arange(L) - (L - 1) / 2.0) / (L / 2.0)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    vol = np.zeros((L, L, L))
    for val, (a, b, c), (x0, y0, z0), phi in _SHEPP_LOGAN:
        t = math.radians(phi)
        xr = (X - x0) * math.cos(t) + (Y - y0) * math.sin(t)
        yr = -(X - x0) * math.sin(t) + (Y - y0) * math.cos(t)
        vol[(xr / a) ** 2 + (yr / b) ** 2 + ((Z - z0) / c) ** 2 <= 1.0] += val
    return vol


def sample_model_patches(x: VolumeCoefficients, basis: PswfBasis, beta: BetaTable, grid,
                         n: int, snr: float, seed: int = 0, rho=None):
    """Patches drawn exactly from the patch model: grid rotation, shift from ``rho``, white noise.

    Returns ``(patches, sigma2, shifts, rotation_indices)``; ``sigma2`` follows
    the same SNR convention as :func:`add_noise` applied to the unshifted
    projections.
    """
    from .forward import pad_shift_crop, shift_set

    L = basis.params.L
    rng = np.random.default_rng(seed)
    F = real_projection_operator(basis, beta, grid, x.layout)
    proj = (F @ x.to_real()).reshape(grid.K, L, L)
    rho = np.full(4 * L * L, 1.0 / (4 * L * L)) if rho is None else np.asarray(rho, float)
    shifts = shift_set(L)[rng.choice(4 * L * L, size=n, p=rho)]
    rots = rng.integers(0, grid.K, size=n)
    sigma2 = noise_variance(np.sum(proj ** 2, axis=(1, 2)), L, snr)
    clean = np.array([pad_shift_crop(proj[k], s) for k, s in zip(rots, shifts)])
    noisy = clean + rng.normal(0.0, math.sqrt(sigma2), clean.shape)
    return noisy, sigma2, shifts, rots
