"""Kernel dispatch: compiled extension when importable, Python otherwise.

Set ``DISTSLAM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from .errors import SingularCovariance

_compiled = None
if os.environ.get("DISTSLAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def _impl(prefer):
    if prefer == "python" or _compiled is None:
        return _kernels_py
    return _compiled


def cycle_sq_distances(ia, kb, lc_poses, lc_covs, pa, sa, sega, pb, sb, segb, backend=None):
    out = _impl(backend or BACKEND).cycle_sq_distances(ia, kb, lc_poses, lc_covs, pa, sa, sega, pb, sb, segb)
    if np.any(out < 0):
        raise SingularCovariance("cycle covariance not positive definite")
    return out


def max_clique_exact(adj, backend=None) -> list[int]:
    impl = _impl(backend or BACKEND)
    if impl is _compiled and len(adj) > 64:
        impl = _kernels_py
    return list(impl.max_clique_exact(adj))
