"""Rays, sample sets along rays and inverse-transform re-sampling.

All functions are batched over rays: per-ray quantities carry a leading
``[R]`` axis and per-sample quantities are ``[R, N]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Rays:
    origins: np.ndarray  # [R, 3]
    directions: np.ndarray  # [R, 3], unit length
    near: np.ndarray  # [R]
    far: np.ndarray  # [R]

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float32))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float32))
        r = self.origins.shape[0]
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float32), (r,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float32), (r,)).copy()
        if self.directions.shape != self.origins.shape or self.origins.shape[-1] != 3:
            raise ValueError("origins and directions must both be [R, 3]")
        if np.any(self.near >= self.far):
            raise ValueError("every ray needs near < far")
        norms = np.linalg.norm(self.directions.astype(np.float64), axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("ray directions must be unit length")

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> Rays:
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    def points(self, t: np.ndarray) -> np.ndarray:
        """Positions ``o + t d`` for sample distances ``t`` [R, N] -> [R, N, 3]."""
        return self.origins[:, None, :] + t[..., None] * self.directions[:, None, :]


@dataclass
class SampleSet:
    t: np.ndarray  # [R, N], sorted along the last axis
    deltas: np.ndarray  # [R, N]

    @classmethod
    def from_t(cls, t: np.ndarray, far) -> SampleSet:
        return cls(t, compute_deltas(t, far))

    @property
    def n(self) -> int:
        return self.t.shape[-1]


@dataclass
class WeightPdf:
    weights: np.ndarray  # [R, N], rows sum to one
    edges: np.ndarray  # [R, N + 1]

    def validate(self, atol: float = 1e-6):
        if np.any(self.weights < 0):
            raise ValueError("pdf weights must be non-negative")
        if not np.allclose(self.weights.sum(-1), 1.0, atol=atol):
            raise ValueError("pdf weights must sum to one")
        if self.edges.shape[-1] != self.weights.shape[-1] + 1:
            raise ValueError("need one more edge than bins")


def compute_deltas(t: np.ndarray, far) -> np.ndarray:
    """``t[i+1] - t[i]``, with the last interval running to the far bound."""
    far = np.asarray(far, dtype=t.dtype)
    if t.shape[-1] == 0:
        return np.zeros_like(t)
    last = np.broadcast_to(far, t.shape[:-1])[..., None] - t[..., -1:]
    return np.concatenate([np.diff(t, axis=-1), last], axis=-1)


def uniform_samples(
    near,
    far,
    n: int,
    stratified: bool = False,
    rng: np.random.Generator | None = None,
    offsets: np.ndarray | None = None,
) -> SampleSet:
    """``n`` samples per ray, one per equal-width bin of ``[near, far]``.

    Deterministic mode takes the bin midpoints; stratified mode draws one
    uniform position inside each bin (from ``rng``, or from pre-drawn
    in-bin ``offsets`` in [0, 1)).
    """
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float32))
    far = np.atleast_1d(np.asarray(far, dtype=np.float32))
    width = (far - near) / n
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float32)
    elif stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        offsets = rng.random((near.shape[0], n), dtype=np.float32)
    else:
        offsets = np.full((near.shape[0], n), 0.5, dtype=np.float32)
    t = near[:, None] + (np.arange(n, dtype=np.float32)[None, :] + offsets) * width[:, None]
    return SampleSet.from_t(t, far)


def bin_edges(t: np.ndarray, near, far) -> np.ndarray:
    """Bin partition around sorted samples: midpoints between neighbours."""
    near = np.broadcast_to(np.asarray(near, dtype=t.dtype), t.shape[:-1])[..., None]
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), t.shape[:-1])[..., None]
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    return np.concatenate([near, mids, far], axis=-1)


def stratified_uniforms(
    n: int,
    rows: int,
    rng: np.random.Generator | None = None,
    jitter: np.ndarray | None = None,
) -> np.ndarray:
    """Sorted uniforms in [0, 1): one per equal bin.

    Bin midpoints by default; jittered inside each bin when ``rng`` or a
    pre-drawn ``jitter`` array is given.
    """
    base = np.arange(n, dtype=np.float32)[None, :]
    if jitter is None:
        if rng is None:
            jitter = np.full((rows, n), 0.5, dtype=np.float32)
        else:
            jitter = rng.random((rows, n), dtype=np.float32)
    return np.minimum((base + jitter) / n, np.float32(1 - 2**-24))


def inverse_transform_sample(pdf: WeightPdf, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF samples for uniforms ``u`` [R, M] (sorted, in [0, 1)).

    Positions are linearly interpolated inside the selected bin, so the
    output is sorted whenever ``u`` is.
    """
    w = pdf.weights
    edges = pdf.edges
    cdf = np.concatenate([np.zeros_like(w[..., :1]), np.cumsum(w, axis=-1)], axis=-1)
    # pin the plateau to exactly 1 so u < 1 never lands in an empty trailing bin
    total = cdf[..., -1:]
    cdf = cdf / np.where(total > 0, total, 1)
    n_bins = w.shape[-1]
    # last cdf entry <= u; right-sided, so empty bins are skipped
    idx = (u[..., :, None] >= cdf[..., None, :]).sum(-1) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    lo_cdf = np.take_along_axis(cdf, idx, -1)
    bin_w = np.take_along_axis(cdf, idx + 1, -1) - lo_cdf
    lo_t = np.take_along_axis(edges, idx, -1)
    hi_t = np.take_along_axis(edges, idx + 1, -1)
    safe = np.where(bin_w > 0, bin_w, 1)
    frac = np.clip(np.where(bin_w > 0, (u - lo_cdf) / safe, 0), 0, 1)
    return (lo_t + frac * (hi_t - lo_t)).astype(edges.dtype)


def merge_and_sort(a: SampleSet, b: SampleSet, far) -> SampleSet:
    """Sorted union of two sample sets on the same rays, deltas recomputed."""
    t = np.sort(np.concatenate([a.t, b.t], axis=-1), axis=-1)
    return SampleSet.from_t(t, far)
