"""Minimal MRC2014 reader/writer for 32-bit float maps and images.

Only mode 2 (float32) little-endian files are written.  Reading accepts
modes 0, 1, 2 and 6 in either byte order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

HEADER_BYTES = 1024
_MODES = {0: np.int8, 1: np.int16, 2: np.float32, 6: np.uint16}


class MrcError(ValueError):
    pass


def _header(data: np.ndarray, voxel_size: float, label: str) -> bytes:
    nz, ny, nx = data.shape
    h = bytearray(HEADER_BYTES)
    struct.pack_into("<3i", h, 0, nx, ny, nz)
    struct.pack_into("<i", h, 12, 2)
    struct.pack_into("<3i", h, 16, 0, 0, 0)           # nxstart, nystart, nzstart
    struct.pack_into("<3i", h, 28, nx, ny, nz)        # mx, my, mz
    struct.pack_into("<3f", h, 40, nx * voxel_size, ny * voxel_size, nz * voxel_size)
    struct.pack_into("<3f", h, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", h, 64, 1, 2, 3)           # column, row, section axes
    finite = data[np.isfinite(data)]
    dmin = float(finite.min()) if finite.size else 0.0
    dmax = float(finite.max()) if finite.size else 0.0
    dmean = float(finite.mean()) if finite.size else 0.0
    rms = float(finite.std()) if finite.size else 0.0
    struct.pack_into("<3f", h, 76, dmin, dmax, dmean)
    struct.pack_into("<i", h, 88, 1 if nz > 1 else 0)  # ispg: volume vs image stack
    struct.pack_into("<i", h, 92, 0)                  # nsymbt
    h[104:108] = b"MRCO"
    struct.pack_into("<i", h, 108, 20140)             # nversion
    h[208:212] = b"MAP "
    h[212:216] = bytes([0x44, 0x44, 0x00, 0x00])      # little-endian machine stamp
    struct.pack_into("<f", h, 216, rms)
    labels = [label.encode("ascii", "replace")[:80]] if label else []
    struct.pack_into("<i", h, 220, len(labels))
    for i, lab in enumerate(labels):
        h[224 + 80 * i: 224 + 80 * i + len(lab)] = lab
    return bytes(h)


def write_mrc(path, data, voxel_size: float = 1.0, label: str = "") -> None:
    """Write a 2-D image or 3-D volume as float32.

    Arrays are indexed ``[x, y]`` / ``[x, y, z]`` in this package; the file
    stores x fastest, as the format expects.
    """
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise MrcError("expected a 2-D or 3-D array")
    stored = np.ascontiguousarray(np.transpose(arr, (2, 1, 0)), dtype="<f4")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_header(stored, voxel_size, label))
        fh.write(stored.tobytes())
    tmp.replace(path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_BYTES)
    if len(raw) < HEADER_BYTES:
        raise MrcError(f"{path}: truncated header")
    stamp = raw[212]
    endian = ">" if stamp == 0x11 else "<"
    nx, ny, nz, mode = struct.unpack_from(endian + "4i", raw, 0)
    if mode not in _MODES or min(nx, ny, nz) < 1:
        # try the other byte order before giving up
        endian = ">" if endian == "<" else "<"
        nx, ny, nz, mode = struct.unpack_from(endian + "4i", raw, 0)
        if mode not in _MODES or min(nx, ny, nz) < 1:
            raise MrcError(f"{path}: unsupported or corrupt header (mode {mode})")
    nsymbt = struct.unpack_from(endian + "i", raw, 92)[0]
    cella = struct.unpack_from(endian + "3f", raw, 40)
    return {"nx": nx, "ny": ny, "nz": nz, "mode": mode, "endian": endian,
            "nsymbt": nsymbt, "voxel_size": cella[0] / nx if nx else 1.0}


def read_mrc(path) -> np.ndarray:
    """Read an image (returned 2-D) or volume, indexed ``[x, y(, z)]``."""
    h = read_header(path)
    dtype = np.dtype(_MODES[h["mode"]]).newbyteorder(h["endian"])
    count = h["nx"] * h["ny"] * h["nz"]
    with open(path, "rb") as fh:
        fh.seek(HEADER_BYTES + h["nsymbt"])
        buf = np.fromfile(fh, dtype=dtype, count=count)
    if buf.size != count:
        raise MrcError(f"{path}: expected {count} values, found {buf.size}")
    arr = buf.reshape(h["nz"], h["ny"], h["nx"]).transpose(2, 1, 0)
    arr = arr.astype(np.float32 if h["mode"] == 2 else np.float64)
    return arr[:, :, 0] if h["nz"] == 1 else arr
