"""Emission-absorption quadrature along rays.

``sigma``/``deltas`` are ``[R, N]`` and colours ``[R, N, 3]``. The weights are
``w_i = T_i (1 - exp(-sigma_i delta_i))`` with ``T_i = exp(-sum_{j<i} sigma_j delta_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUNDS = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "transparent": None,
}


def background_color(name_or_rgb) -> np.ndarray | None:
    if name_or_rgb is None:
        return None
    if isinstance(name_or_rgb, str):
        if name_or_rgb not in BACKGROUNDS:
            raise ValueError(f"unknown background {name_or_rgb!r}")
        rgb = BACKGROUNDS[name_or_rgb]
        return None if rgb is None else np.asarray(rgb, dtype=np.float32)
    return np.asarray(name_or_rgb, dtype=np.float32)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # [R, 3]
    alpha: np.ndarray  # [R]
    weights: np.ndarray | None = None  # [R, N]


def compute_weights(sigma: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rendering weights and transmittances ``(w, T)``, both [R, N]."""
    tau = sigma * deltas
    depth = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(depth[..., :1]), depth[..., :-1]], axis=-1)
    trans = np.exp(-excl)
    w = trans * -np.expm1(-tau)
    return w, trans


def final_transmittance(sigma: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    return np.exp(-(sigma * deltas).sum(axis=-1))


def composite(weights: np.ndarray, rgb: np.ndarray, background=None) -> RenderOutput:
    """``sum_i w_i c_i + (1 - sum_i w_i) * background``; alpha is ``sum_i w_i``."""
    alpha = weights.sum(axis=-1)
    color = (weights[..., None] * rgb).sum(axis=-2)
    bg = background_color(background)
    if bg is not None:
        color = color + (1 - alpha)[..., None] * bg
    return RenderOutput(color, alpha, weights)


def composite_backward(
    sigma: np.ndarray,
    rgb: np.ndarray,
    deltas: np.ndarray,
    weights: np.ndarray,
    trans: np.ndarray,
    d_color: np.ndarray,
    background=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss w.r.t. ``sigma`` and ``rgb`` given ``d_color`` [R, 3].

    With ``c'_i = c_i - bg`` the pixel is ``bg + sum_i w_i c'_i`` and
    ``dC/dsigma_k = delta_k (T_{k+1} c'_k - sum_{i>k} w_i c'_i)``.
    """
    bg = background_color(background)
    shifted = rgb if bg is None else rgb - bg
    g = (shifted * d_color[..., None, :]).sum(-1)  # g . c'_i  [R, N]
    wg = weights * g
    # suffix sum over i > k
    tail = np.cumsum(wg[..., ::-1], axis=-1)[..., ::-1]
    after = tail - wg
    t_next = trans * np.exp(-sigma * deltas)
    d_sigma = deltas * (t_next * g - after)
    d_rgb = weights[..., None] * d_color[..., None, :]
    return d_sigma, d_rgb
