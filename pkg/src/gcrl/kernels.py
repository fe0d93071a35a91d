"""Select the compiled kernels when available, else the numpy fallback.

Set ``GCRL_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
by the cross-check tests).
"""

from __future__ import annotations

import os

from . import _core_py

if os.environ.get("GCRL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _core_py
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _core_py
        BACKEND = "python"

greedy_dagify = _impl.greedy_dagify
penalty_gd = _impl.penalty_gd
sinkhorn_stack = _impl.sinkhorn_stack
# the compiled version uses plain loops for its matrix products; BLAS wins
# once the feature dimension grows past a few dozen
GROUP_REGS_MAX_DIM = 32


def group_regs(W, P, pair_i, pair_j, orders):
    if W.shape[-1] > GROUP_REGS_MAX_DIM:
        return _core_py.group_regs(W, P, pair_i, pair_j, orders)
    return _impl.group_regs(W, P, pair_i, pair_j, orders)
