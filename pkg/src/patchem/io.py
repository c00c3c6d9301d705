"""Artifact persistence: coefficient files and JSON sidecars carrying the config hash."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .basis import BandlimitParams
from .forward import CoefficientLayout, VolumeCoefficients

COEFF_FORMAT = "patchem-coefficients/1"


class ArtifactMismatchError(ValueError):
    pass


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    os.replace(tmp, path)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_sidecar(path, config_hash: str, **extra) -> None:
    write_json(sidecar_path(path), {"config_hash": config_hash, **extra})


def read_sidecar(path) -> dict | None:
    p = sidecar_path(path)
    return read_json(p) if p.exists() else None


def check_same_hash(hashes, what: str = "inputs") -> str | None:
    """All known hashes must agree; returns the common one."""
    known = {h for h in hashes if h}
    if len(known) > 1:
        raise ArtifactMismatchError(f"{what} come from different configurations: {sorted(known)}")
    return next(iter(known), None)


def save_coefficients(path, x: VolumeCoefficients, params: BandlimitParams, config_hash: str = "") -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, format=COEFF_FORMAT, theta=x.to_real(), ell_max=x.ell_max,
             s_of_ell=np.asarray(params.s_of_ell), L=params.L, c=params.c,
             config_hash=config_hash)
    os.replace(tmp, path)


def load_coefficients(path, params: BandlimitParams | None = None):
    """Returns ``(coefficients, params, config_hash)``."""
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != COEFF_FORMAT:
            raise ArtifactMismatchError(f"{path}: not a coefficient file")
        ell = int(z["ell_max"])
        if params is None:
            params = BandlimitParams(L=int(z["L"]), ell_max=ell, c=float(z["c"]),
                                     s_of_ell=tuple(int(s) for s in z["s_of_ell"]))
        elif params.L != int(z["L"]) or params.c != float(z["c"]):
            raise ArtifactMismatchError(f"{path}: coefficients were fitted for L={int(z['L'])}, c={float(z['c'])}")
        layout = CoefficientLayout.from_params(params, ell)
        return VolumeCoefficients.from_real(layout, z["theta"]), params, str(z["config_hash"])
