"""Kernel backend selection.

The compiled extension is used when it imports; set ``PATCHEM_KERNELS=python``
to force the numpy fallback.
"""

import os

from . import _fallback

BACKEND = "python"
posterior_rows = _fallback.posterior_rows

if os.environ.get("PATCHEM_KERNELS", "").lower() != "python":
    try:
        from ._kernels import posterior_rows  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def backends() -> dict:
    """All importable implementations, keyed by name."""
    out = {"python": _fallback.posterior_rows}
    try:
        from ._kernels import posterior_rows as c_rows
        out["cython"] = c_rows
    except ImportError:
        pass
    return out
