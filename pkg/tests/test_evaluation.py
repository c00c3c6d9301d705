import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchem.basis import random_rotations, rotation_zyz
from patchem.em import PatchSet, ShiftDistribution
from patchem.evaluation import (
    FscCurve,
    align,
    circular_distance,
    coefficient_rotator,
    f1_score,
    fsc,
    half_occupied,
    permutation_chance,
    pick,
    shell_index,
)
from patchem.forward import VolumeCoefficients, pad_shift_crop, real_projection_operator, render_volume
from patchem.simulate import PatchTruth, gaussian_blobs


# ---------------------------------------------------------------------------
# FSC


def test_fsc_of_a_volume_with_itself_is_one(rng):
    v = rng.normal(size=(9, 9, 9))
    c = fsc(v, v)
    assert np.allclose(c.values, 1.0, atol=1e-12)
    assert c.resolution_shell == c.nyquist_shell == 4


def test_fsc_of_negated_volume_is_minus_one(rng):
    v = rng.normal(size=(8, 8, 8))
    assert np.allclose(fsc(v, -v).values, -1.0, atol=1e-12)


@given(st.integers(0, 1000), st.floats(0.01, 100))
def test_fsc_is_symmetric_and_scale_invariant(seed, scale):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(6, 6, 6)), r.normal(size=(6, 6, 6))
    assert np.allclose(fsc(a, b).values, fsc(b, a).values, atol=1e-12)
    assert np.allclose(fsc(scale * a, b).values, fsc(a, b).values, atol=1e-10)


def test_fsc_of_independent_noise_is_centered():
    L = 16
    vals = np.array([fsc(*np.random.default_rng(s).normal(size=(2, L, L, L))).values for s in range(30)])
    counts = np.bincount(shell_index((L,) * 3).ravel())
    # each shell holds count/2 independent complex pairs
    sd = 1.0 / np.sqrt(counts[: vals.shape[1]] / 2.0)
    assert np.all(np.abs(vals.mean(axis=0)[1:]) < 4 * sd[1:] / np.sqrt(30))
    assert np.all(np.abs(vals.std(axis=0)[2:] / sd[2:] - 1) < 0.5)


def test_shell_index_matches_loop():
    n = 6
    idx = shell_index((n, n, n))
    for i, j, k in itertools.product(range(n), repeat=3):
        f = [a if a < n / 2 else a - n for a in (i, j, k)]
        assert idx[i, j, k] == int(np.rint(np.sqrt(sum(v * v for v in f))))


def test_resolution_and_minimum_readouts(tmp_path):
    c = FscCurve(np.arange(6), np.array([1.0, 0.9, 0.7, 0.45, 0.6, 0.1]), 10)
    assert c.resolution_shell == 3
    assert c.min_up_to(2) == 0.7
    assert np.allclose(c.frequency, np.arange(6) / 10)
    c.to_csv(tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "shell,frequency,fsc"


def test_fsc_rejects_mismatched_grids():
    with pytest.raises(ValueError):
        fsc(np.zeros((4, 4, 4)), np.zeros((5, 5, 5)))


# ---------------------------------------------------------------------------
# alignment


@pytest.fixture(scope="module")
def vol7(t7):
    x = VolumeCoefficients.random(t7.layout, np.random.default_rng(3))
    return x, render_volume(x, t7.params)


def test_align_identity_with_splines():
    v = gaussian_blobs(11)
    res = align(v, v, n_rotations=50, refine_steps=3)
    assert res.score > 0.999 and not res.reflected
    assert np.abs(res.rotation - np.eye(3)).max() < 1e-3


def test_align_recovers_a_known_rotation(t7, vol7):
    x, truth = vol7
    R0 = rotation_zyz(0.7, 1.2, -0.4)
    y = x.rotated(R0)
    est = render_volume(y, t7.params)
    res = align(est, truth, n_rotations=800, refine_steps=15, rotate=coefficient_rotator(y, t7.params))
    assert not res.reflected
    assert np.abs(res.rotation - R0.T).max() < 0.02
    c = fsc(res.aligned, truth)
    assert c.min_up_to(c.nyquist_shell) > 0.99


def test_align_detects_a_reflection(t7, vol7):
    x, truth = vol7
    ell, _, _ = x.layout.indices()
    y = VolumeCoefficients(x.layout, x.coeffs * (-1.0) ** ell).rotated(rotation_zyz(0.2, 0.5, 1.0))
    est = render_volume(y, t7.params)
    res = align(est, truth, n_rotations=800, refine_steps=15, rotate=coefficient_rotator(y, t7.params))
    assert res.reflected
    assert res.score > 0.99


def test_coefficient_inversion_matches_voxel_inversion(t7, vol7):
    x, truth = vol7
    rot = coefficient_rotator(x, t7.params)
    assert np.allclose(rot(np.eye(3), True), truth[::-1, ::-1, ::-1], atol=1e-10 * np.abs(truth).max())


# ---------------------------------------------------------------------------
# picking helpers


def test_f1_known_values():
    assert f1_score([1, 1, 0, 0], [1, 0, 1, 0]) == (0.5, 0.5, 0.5)
    f1, p, r = f1_score([1, 1, 1, 0], [1, 0, 0, 0])
    assert (p, r) == (pytest.approx(1 / 3), 1.0) and f1 == pytest.approx(0.5)
    assert f1_score([0, 0], [0, 0]) == (0.0, 0.0, 0.0)


def test_half_occupied_rule():
    L = 4
    s = np.array([(0, 0), (1, 1), (2, 0), (7, 7), (0, 7), (-1, -1), (1, 7)])
    assert half_occupied(s, L).tolist() == [True, True, False, True, False, False, False]


def test_circular_distance():
    assert circular_distance(0, 9, 10) == 1
    assert circular_distance(3, 8, 10) == 5


def test_permutation_chance_matches_pairwise_loop(rng):
    P = 2 * 5
    a = rng.integers(0, P, size=(15, 2))
    b = rng.integers(0, P, size=(15, 2))
    hits = 0
    for i in range(15):
        for j in range(15):
            dx = min(abs(a[i, 0] - b[j, 0]) % P, P - abs(a[i, 0] - b[j, 0]) % P)
            dy = min(abs(a[i, 1] - b[j, 1]) % P, P - abs(a[i, 1] - b[j, 1]) % P)
            hits += dx <= 1 and dy <= 1
    assert permutation_chance(a, b, P) == pytest.approx(hits / 225)
    same = np.tile([[2, 3]], (6, 1))
    assert permutation_chance(same, same, P) == 1.0


# ---------------------------------------------------------------------------
# picking


@pytest.fixture(scope="module")
def pick_data(t5):
    grid = t5.grid(6, seed=4)
    x = VolumeCoefficients.random(t5.layout, np.random.default_rng(1))
    F = real_projection_operator(t5.basis, t5.beta, grid, t5.layout)
    proj = (F @ x.to_real()).reshape(grid.K, 5, 5)
    rng = np.random.default_rng(2)
    shifts = np.array([(a, b) for a in (0, 1, 2, 8, 9) for b in (0, 1, 2, 8, 9)] + [(5, 3), (3, 5), (6, 6)])
    rots = rng.integers(0, grid.K, size=len(shifts))
    clean = np.array([pad_shift_crop(proj[k], s) for k, s in zip(rots, shifts)])
    e = np.sum(clean ** 2, axis=(1, 2))
    truth = PatchTruth(shifts, (e > 0).astype(int), e, float(np.mean(np.sum(proj ** 2, axis=(1, 2)))))
    return grid, x, clean, truth


def test_noiseless_patches_are_picked_exactly(t5, pick_data):
    grid, x, clean, truth = pick_data
    ps = PatchSet(clean + 1e-6 * np.random.default_rng(0).normal(size=clean.shape), 1e-12)
    rep = pick(ps, x, grid, t5.basis, t5.beta, truth=truth)
    half = half_occupied(truth.shift, 5)
    assert np.array_equal(rep.picked_shift[half], truth.shift[half])
    assert rep.localization_accuracy == 1.0
    assert rep.n_half_occupied == half.sum()
    empty = truth.clean_energy == 0
    assert np.array_equal(rep.predicted_empty, empty)
    assert rep.f1_empty == 1.0
    assert rep.uniform_chance_accuracy == pytest.approx(9 / 100)


def test_zero_volume_is_degenerate_and_scores_the_baseline(t5, pick_data):
    grid, x, clean, truth = pick_data
    ps = PatchSet(clean + np.random.default_rng(0).normal(size=clean.shape), 1.0)
    rep = pick(ps, VolumeCoefficients.zeros(t5.layout), grid, t5.basis, t5.beta, truth=truth)
    assert rep.degenerate
    assert rep.predicted_empty.all()
    assert rep.f1_empty == rep.baseline_f1


def test_picks_are_invariant_to_joint_rescaling(t5, pick_data):
    grid, x, clean, truth = pick_data
    noisy = clean + 0.3 * np.random.default_rng(5).normal(size=clean.shape)
    a = pick(PatchSet(noisy, 0.09), x, grid, t5.basis, t5.beta)
    b = pick(PatchSet(7 * noisy, 0.09 * 49), VolumeCoefficients(x.layout, 7 * x.coeffs), grid, t5.basis, t5.beta)
    assert np.array_equal(a.picked_shift, b.picked_shift)
    assert np.array_equal(a.predicted_empty, b.predicted_empty)


def test_pick_report_serializes(t5, pick_data):
    grid, x, clean, truth = pick_data
    rep = pick(PatchSet(clean + 0.1, 0.01), x, grid, t5.basis, t5.beta,
               rho=ShiftDistribution.uniform(5), truth=truth)
    d = rep.as_dict()
    assert len(d["picked_shift"]) == len(clean) and "template_energy" not in d
