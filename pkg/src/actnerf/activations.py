"""Activation features, activation-derived density estimates and masks.

A trunk activation ``A`` for one ray is an ``[N_s, N_h]`` matrix (samples by
hidden units). Batched callers pass ``[R, N_s, N_h]``; every reduction here
works on the trailing axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import ConfigurationError

ESTIMATORS = ("f1", "f2", "f3")


class DegenerateWeights(ValueError):
    """All density estimates along a ray are zero; no usable PDF exists."""

    def __init__(self, rows=None):
        self.rows = rows
        super().__init__("density estimate is zero everywhere along the ray")


@dataclass
class DensityEstimate:
    values: np.ndarray
    estimator: str
    layer: int | None = None


def feature_per_sample(activations: np.ndarray) -> np.ndarray:
    """Mean over hidden units: ``[..., N_s, N_h] -> [..., N_s]``."""
    a = np.asarray(activations)
    if a.size == 0:
        raise ValueError("activation matrix is empty")
    return a.mean(axis=-1)


def ray_scalar(activations: np.ndarray) -> np.ndarray:
    """Per-ray scalar: mean over samples of the per-sample activation sum.

    Note the missing ``1/N_h`` relative to ``feature_per_sample``: the result
    equals ``N_h * mean(feature_per_sample(A))``.
    """
    a = np.asarray(activations)
    if a.size == 0:
        raise ValueError("activation matrix is empty")
    return a.sum(axis=-1).mean(axis=-1)


def _moments(f, sample_std):
    """Mean and std along the last axis, computed on a power-of-two rescaled
    copy so huge or tiny features neither overflow nor underflow. The
    scaling is exact, so ordinary inputs give bit-identical results."""
    m = np.max(np.abs(f), axis=-1, keepdims=True)
    ok = np.isfinite(m) & (m > 0)
    _, e = np.frexp(np.where(ok, m, 1))
    scale = np.ldexp(np.ones_like(m, dtype=np.result_type(f.dtype, np.float32)), np.where(ok, e - 1, 0))
    g = f / scale
    sd = g.std(axis=-1, ddof=1 if sample_std else 0, keepdims=True)
    return g.mean(axis=-1, keepdims=True) * scale, sd * scale


def estimate_density(
    f: np.ndarray,
    estimator: str = "f2",
    apply_relu: bool = True,
    sample_std: bool = False,
    layer: int | None = None,
) -> DensityEstimate:
    """Turn activation features ``f`` [..., N_s] into a density estimate.

    f1 = ReLU((mu - sd) - f), f2 = ReLU((mu - sd/2) - f), f3 = f2 ** 2, where
    mu/sd are the mean and (population) standard deviation along the ray.
    ``apply_relu=False`` swaps the ReLU for the identity.
    """
    if estimator not in ESTIMATORS:
        raise ConfigurationError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    f = np.asarray(f)
    if f.shape[-1] < 2:
        raise ValueError("need at least two samples per ray for a standard deviation")
    mu, sd = _moments(f, sample_std)
    scale = 1.0 if estimator == "f1" else 0.5
    d = (mu - scale * sd) - f
    if apply_relu:
        d = np.maximum(d, 0)
    if estimator == "f3":
        with np.errstate(over="ignore", under="ignore"):  # inf is handled when normalizing
            d = d * d
    return DensityEstimate(d, estimator, layer)


def _normalize(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a non-negative array; returns (weights, zero-row mask).

    Rows are divided by a power of two near their maximum first, which is
    exact, so sums cannot overflow. Rows holding ``inf`` take the limiting
    distribution: uniform over their infinite entries. Zero rows come back
    as zeros.
    """
    if np.any(np.isnan(d)):
        raise ValueError("density estimate contains NaN")
    if np.any(d < 0):
        raise ValueError("density estimate must be non-negative")
    inf_rows = np.isinf(d).any(axis=-1, keepdims=True)
    if np.any(inf_rows):
        d = np.where(inf_rows, np.isinf(d).astype(d.dtype), d)
    m = d.max(axis=-1, keepdims=True)
    _, e = np.frexp(np.where(m > 0, m, 1))
    # 2**(e-1) <= max < 2**e; the lower bound keeps the scale itself finite
    d = d / np.ldexp(np.ones_like(m), e - 1)
    total = d.sum(axis=-1, keepdims=True)
    bad = total[..., 0] == 0
    return d / np.where(bad[..., None], 1, total), bad


def weights_from_density(d_hat: np.ndarray) -> np.ndarray:
    """Normalize a non-negative estimate [..., N] to per-ray weights.

    Raises :class:`DegenerateWeights` (with ``rows`` set to a boolean mask over
    the leading axes) when any ray sums to exactly zero.
    """
    w, bad = _normalize(np.asarray(d_hat))
    if np.any(bad):
        raise DegenerateWeights(bad)
    return w


def weights_or_fallback(d_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`weights_from_density` but per ray: degenerate rows get
    uniform weights and are reported in the returned boolean mask."""
    d = np.asarray(d_hat)
    w, bad = _normalize(d)
    uniform = np.full_like(w, 1.0 / d.shape[-1])
    return np.where(bad[..., None], uniform, w), bad


def nonnegative_shift(d: np.ndarray) -> np.ndarray:
    """Shift each ray's estimate so its minimum is zero.

    Used only when the estimator's ReLU is disabled, where raw estimates can be
    negative and cannot be normalized directly.
    """
    return d - d.min(axis=-1, keepdims=True)


@dataclass
class ActivationImage:
    values: np.ndarray  # [H, W]
    layer: int

    @property
    def threshold(self) -> float:
        return _mean_threshold(self.values)


def build_activation_image(ray_values: np.ndarray, height: int, width: int, layer: int) -> ActivationImage:
    """Arrange per-ray scalars (row-major pixel order) into an image."""
    v = np.asarray(ray_values, dtype=np.float64).reshape(height, width)
    if not np.all(np.isfinite(v)):
        raise ValueError("activation image has non-finite entries")
    return ActivationImage(v, layer)


def derive_mask(img: ActivationImage | np.ndarray) -> np.ndarray:
    """Pixels whose value lies strictly below the image mean."""
    v = img.values if isinstance(img, ActivationImage) else np.asarray(img, dtype=np.float64)
    return v < _mean_threshold(v)


def _mean_threshold(v: np.ndarray) -> float:
    # rounding can push the computed mean of a constant image above its value
    return float(np.clip(v.mean(), v.min(), v.max()))


def count_dense_samples(sigma: np.ndarray, threshold: float) -> np.ndarray:
    """Number of samples per ray with density above ``threshold``."""
    return (np.asarray(sigma) > threshold).sum(axis=-1)


def upsample_nearest(x: np.ndarray, target_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Replicate every cell of ``x`` into a 2x block along each axis.

    ``target_shape`` defaults to twice the input shape and must consist of
    even sizes equal to twice the input.
    """
    x = np.asarray(x)
    if target_shape is None:
        target_shape = tuple(2 * s for s in x.shape)
    target_shape = tuple(target_shape)
    if len(target_shape) != x.ndim:
        raise ConfigurationError("target shape rank does not match input")
    if any(s % 2 for s in target_shape):
        raise ConfigurationError(f"upsampling needs even target dims, got {target_shape}")
    if any(t != 2 * s for t, s in zip(target_shape, x.shape)):
        raise ConfigurationError(f"target {target_shape} is not twice input {x.shape}")
    out = x
    for axis in range(x.ndim):
        out = np.repeat(out, 2, axis=axis)
    return out


def downsample_nearest(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`upsample_nearest` on block-constant arrays."""
    x = np.asarray(x)
    if any(s % 2 for s in x.shape):
        raise ConfigurationError(f"downsampling needs even dims, got {x.shape}")
    return x[tuple(slice(0, None, 2) for _ in range(x.ndim))]


def histogram(values: np.ndarray, bins: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-count histogram over [min, max] of one ray's values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        hi = lo + 1.0
    return np.histogram(v, bins=bins, range=(lo, hi))
