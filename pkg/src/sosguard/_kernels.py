"""Backend selection for the polynomial product kernel.

The compiled extension (``sosguard._fastpoly``) is preferred when it
imported cleanly; otherwise the numpy fallback below is used.  Setting
``SOSGUARD_BACKEND=python`` in the environment forces the fallback, which
the benchmark harness uses to compare both paths.
"""

from __future__ import annotations

import os

import numpy as np

#: Hard packing limits: 8 bits per variable, at most 8 variables per key.
PACK_MAX_VARS = 8
PACK_MAX_EXP = 255


def mul_packed_numpy(keys_p, coefs_p, keys_q, coefs_q):
    """Pure-numpy term merge: outer key sums, then group-and-add."""
    keys_p = np.asarray(keys_p, dtype=np.uint64)
    keys_q = np.asarray(keys_q, dtype=np.uint64)
    if keys_p.size == 0 or keys_q.size == 0:
        return np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.float64)
    all_keys = (keys_p[:, None] + keys_q[None, :]).ravel()
    all_vals = (np.asarray(coefs_p)[:, None] * np.asarray(coefs_q)[None, :]).ravel()
    uniq, inverse = np.unique(all_keys, return_inverse=True)
    sums = np.bincount(inverse, weights=all_vals, minlength=uniq.size)
    return uniq, sums


if os.environ.get("SOSGUARD_BACKEND", "").lower() in ("python", "numpy", "pure"):
    BACKEND = "numpy"
    mul_packed = mul_packed_numpy
else:
    try:
        from ._fastpoly import mul_packed  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        BACKEND = "numpy"
        mul_packed = mul_packed_numpy


def pack_exponents(exps: np.ndarray) -> np.ndarray:
    """Pack an (nterms, nvars) exponent matrix into uint64 keys."""
    nvars = exps.shape[1]
    if nvars > PACK_MAX_VARS:
        raise ValueError(f"cannot pack {nvars} variables (max {PACK_MAX_VARS})")
    keys = np.zeros(exps.shape[0], dtype=np.uint64)
    for i in range(nvars):
        keys |= exps[:, i].astype(np.uint64) << np.uint64(8 * i)
    return keys


def unpack_key(key: int, nvars: int) -> tuple:
    """Decode one packed key back into an exponent tuple."""
    return tuple((int(key) >> (8 * i)) & 0xFF for i in range(nvars))
