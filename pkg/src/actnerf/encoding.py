"""Fourier-feature positional encoding and the unbounded-scene contraction."""

from __future__ import annotations

import numpy as np


def positional_encoding(p, frequencies: int, include_input: bool = True) -> np.ndarray:
    """Encode the last axis of ``p`` with ``frequencies`` octaves of sin/cos.

    Per input coordinate the output is ``[sin(2^k pi p), cos(2^k pi p)]`` for
    ``k = 0..frequencies-1``; with ``include_input`` the raw coordinates come
    first. A scalar or 1-D input is treated as a single point.
    """
    p = np.asarray(p)
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    squeeze = p.ndim <= 1
    x = np.atleast_1d(p)
    if squeeze:
        x = x[None, :]
    parts = [x] if include_input else []
    for k in range(frequencies):
        arg = (2.0**k * np.pi) * x
        # interleave sin/cos per coordinate: [..., d, 2]
        sc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
        parts.append(sc.reshape(*x.shape[:-1], -1))
    out = np.concatenate(parts, axis=-1).astype(x.dtype) if parts else x[..., :0]
    return out[0] if squeeze else out


def contract(x: np.ndarray) -> np.ndarray:
    """Radial contraction of R^3 into the ball of radius 2.

    Points inside the unit ball are unchanged; outside, ``x`` maps to
    ``(2 - 1/|x|) x/|x|``.
    """
    x = np.asarray(x)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1.0)
    outside = (2.0 - 1.0 / safe) * (x / safe)
    return np.where(norm <= 1.0, x, outside).astype(x.dtype)
