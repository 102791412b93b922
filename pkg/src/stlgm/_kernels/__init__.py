"""Kernel lane selection.

The hot numerical kernels (kriging weights, sparse LDL, Polya-Gamma draws)
exist twice: a Cython extension (stlgm._kernels._ext) and a pure numpy
fallback. The extension is used when importable; setting STLGM_PURE_PYTHON=1
forces the fallback. BACKEND names the active lane so run manifests can
record it.
"""

import importlib
import os

from . import _fallback

_ext = None
if os.environ.get("STLGM_PURE_PYTHON", "0") != "1":
    try:
        _ext = importlib.import_module("._ext", __name__)
    except ImportError:
        _ext = None

HAVE_EXT = _ext is not None
BACKEND = "compiled" if HAVE_EXT else "python"

if HAVE_EXT:
    nngp_weights = _ext.nngp_weights
    pg_draws = _ext.pg_draws
    ldl_symbolic = _ext.ldl_symbolic
    ldl_numeric = _ext.ldl_numeric
    ldl_solve = _ext.ldl_solve
    ldl_ltsolve = _ext.ldl_ltsolve
else:
    nngp_weights = _fallback.nngp_weights
    pg_draws = _fallback.pg_draws

__all__ = ["BACKEND", "HAVE_EXT", "nngp_weights", "pg_draws", "_ext", "_fallback"]
