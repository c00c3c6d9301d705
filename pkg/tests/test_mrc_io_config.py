import json
import struct

import numpy as np
import pytest

from patchem import config as cfgmod
from patchem.basis import BandlimitParams
from patchem.forward import CoefficientLayout, VolumeCoefficients
from patchem.io import (
    ArtifactMismatchError,
    check_same_hash,
    load_coefficients,
    read_sidecar,
    save_coefficients,
    write_json,
    write_sidecar,
)
from patchem.mrc import MrcError, read_header, read_mrc, write_mrc


# ---------------------------------------------------------------------------
# MRC


@pytest.mark.parametrize("shape", [(7, 5), (4, 6, 3)])
def test_mrc_round_trip(tmp_path, rng, shape):
    a = rng.normal(size=shape).astype(np.float32)
    write_mrc(tmp_path / "a.mrc", a, voxel_size=2.0, label="test")
    b = read_mrc(tmp_path / "a.mrc")
    assert b.shape == shape and np.array_equal(a, b)
    h = read_header(tmp_path / "a.mrc")
    assert h["voxel_size"] == pytest.approx(2.0) and h["mode"] == 2


def test_mrc_header_layout(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_mrc(tmp_path / "a.mrc", a)
    raw = (tmp_path / "a.mrc").read_bytes()
    assert len(raw) == 1024 + 24 * 4
    assert struct.unpack_from("<4i", raw, 0) == (2, 3, 4, 2)
    assert raw[208:212] == b"MAP "
    assert struct.unpack_from("<3f", raw, 76) == (0.0, 23.0, 11.5)
    # x varies fastest on disk
    data = np.frombuffer(raw[1024:], "<f4")
    assert data[1] == a[1, 0, 0]


def test_mrc_reads_big_endian(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    h = bytearray(1024)
    struct.pack_into(">4i", h, 0, 3, 4, 1, 2)
    h[208:212] = b"MAP "
    h[212] = 0x11
    (tmp_path / "b.mrc").write_bytes(bytes(h) + a.T.astype(">f4").tobytes())
    assert np.array_equal(read_mrc(tmp_path / "b.mrc"), a)


def test_mrc_rejects_corrupt_files(tmp_path):
    (tmp_path / "c.mrc").write_bytes(b"\0" * 100)
    with pytest.raises(MrcError):
        read_mrc(tmp_path / "c.mrc")
    h = bytearray(1024)
    struct.pack_into("<4i", h, 0, 4, 4, 1, 2)
    (tmp_path / "d.mrc").write_bytes(bytes(h) + b"\0" * 8)
    with pytest.raises(MrcError):
        read_mrc(tmp_path / "d.mrc")
    with pytest.raises(MrcError):
        write_mrc(tmp_path / "e.mrc", np.zeros(5))


# ---------------------------------------------------------------------------
# artifacts


def test_sidecar_round_trip(tmp_path):
    write_sidecar(tmp_path / "x.mrc", "abc", sigma2=np.float64(0.5), arr=np.arange(3))
    s = read_sidecar(tmp_path / "x.mrc")
    assert s == {"config_hash": "abc", "sigma2": 0.5, "arr": [0, 1, 2]}
    assert read_sidecar(tmp_path / "missing.mrc") is None


def test_hash_agreement():
    assert check_same_hash(["a", "a", None]) == "a"
    assert check_same_hash([None, ""]) is None
    with pytest.raises(ArtifactMismatchError):
        check_same_hash(["a", "b"])


def test_coefficient_round_trip(tmp_path, t5, rng):
    x = VolumeCoefficients.random(t5.layout, rng)
    save_coefficients(tmp_path / "c.npz", x, t5.params, "h1")
    y, params, h = load_coefficients(tmp_path / "c.npz")
    assert h == "h1" and params.L == 5 and params.s_of_ell == t5.params.s_of_ell
    assert np.array_equal(y.coeffs, x.coeffs)
    y2, _, _ = load_coefficients(tmp_path / "c.npz", t5.params)
    assert np.array_equal(y2.coeffs, x.coeffs)


def test_coefficients_for_other_grid_are_rejected(tmp_path, t5, rng):
    x = VolumeCoefficients.random(t5.layout, rng)
    save_coefficients(tmp_path / "c.npz", x, t5.params)
    with pytest.raises(ArtifactMismatchError):
        load_coefficients(tmp_path / "c.npz", BandlimitParams(L=7, ell_max=2))
    np.savez(tmp_path / "bad.npz", format="other")
    with pytest.raises(ArtifactMismatchError):
        load_coefficients(tmp_path / "bad.npz")


def test_write_json_is_atomic_and_sorted(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": np.int64(2)})
    text = (tmp_path / "a.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert not list(tmp_path.glob("*.tmp"))


# ---------------------------------------------------------------------------
# configuration


def test_defaults_validate():
    cfg = cfgmod.load()
    assert cfg["basis"]["L"] == 9 and cfg["em"]["K"] == 200
    assert cfgmod.ell_max(cfg) == 4


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"basis": {"L": 11}, "em": {"S": 0.5}}))
    cfg = cfgmod.load(p, ["em.S=0.25", "simulation.mode=arbitrary", "em.schedule=[[2,3],[6,3]]"])
    assert cfg["basis"]["L"] == 11 and cfg["basis"]["c"] == 0.5
    assert cfg["em"]["S"] == 0.25 and cfg["simulation"]["mode"] == "arbitrary"
    assert cfgmod.ell_max(cfg) == 6


@pytest.mark.parametrize("override", [
    "em.S=2", "basis.L=2", "em.bogus=1", "simulation.mode=dense", "em.schedule=[[4,1],[2,1]]",
])
def test_invalid_values_are_rejected(override):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(overrides=[override])


def test_malformed_inputs(tmp_path):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(overrides=["no-equals-sign"])
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(tmp_path / "list.json")


def test_hash_ignores_paths_and_thresholds():
    a = cfgmod.load()
    b = cfgmod.load(overrides=["paths.output=elsewhere", "pick.min_f1=0.5"])
    c = cfgmod.load(overrides=["em.seed=3"])
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    assert cfgmod.config_hash(a) != cfgmod.config_hash(c)
