"""Radiance fields that the renderer can query.

Anything with ``evaluate(points, dirs, tap_through=None) -> FieldSample`` can
be rendered; :class:`NerfField` wraps an MLP and ``scene.AnalyticScene``
provides the closed-form ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import contract, positional_encoding
from .mlp import ForwardTrace, MlpParams, forward_flops, forward_with_taps


@dataclass
class FieldSample:
    sigma: np.ndarray | None  # [M]
    rgb: np.ndarray | None  # [M, 3]
    trace: ForwardTrace | None = None
    flops: int = 0


class NerfField:
    """An MLP radiance field over world-space points and unit directions."""

    def __init__(self, params: MlpParams, unbounded: bool = False):
        self.params = params
        self.unbounded = unbounded

    @property
    def config(self):
        return self.params.config

    def encode(self, points: np.ndarray, dirs: np.ndarray | None):
        cfg = self.params.config
        if self.unbounded:
            points = contract(points)
        xe = positional_encoding(points.astype(np.float32), cfg.pe_frequencies_pos, cfg.include_input)
        de = None
        if dirs is not None:
            de = positional_encoding(dirs.astype(np.float32), cfg.pe_frequencies_dir, cfg.include_input)
        return xe, de

    def evaluate(self, points: np.ndarray, dirs: np.ndarray | None, tap_through: int | None = None) -> FieldSample:
        xe, de = self.encode(points, dirs)
        trace = forward_with_taps(self.params, xe, de, tap_through)
        return FieldSample(trace.sigma, trace.rgb, trace, trace.flops)

    def flops_per_sample(self, tap_through: int | None = None) -> int:
        return forward_flops(self.params.config, tap_through)
