"""End-to-end ray pipelines: baseline coarse-to-fine, activation-informed
sampling, and the activation-mask fine-pass skip.

Every pipeline works on a batch of :class:`~actnerf.sampling.Rays`; whole
images go through :func:`render_rays`, which splits rays into fixed chunks
and maps them over a thread pool. Chunk results do not depend on the thread
count or on which other rays share a chunk.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .activations import (
    ESTIMATORS,
    estimate_density,
    feature_per_sample,
    nonnegative_shift,
    ray_scalar,
    upsample_nearest,
    weights_or_fallback,
)
from .mlp import ConfigurationError
from .sampling import (
    Rays,
    SampleSet,
    WeightPdf,
    bin_edges,
    inverse_transform_sample,
    merge_and_sort,
    stratified_uniforms,
    uniform_samples,
)
from .scene import camera_rays
from .volume import composite, compute_weights

DensityHook = Callable[[Rays, SampleSet], np.ndarray]


@dataclass(frozen=True)
class SamplingOptions:
    n_coarse: int = 64
    n_fine: int = 64
    stratified: bool = False
    seed: int = 0
    background: str | tuple = "white"
    merge_uniform: bool = True


@dataclass
class PipelineResult:
    rgb: np.ndarray  # [R, 3]
    alpha: np.ndarray  # [R]
    coarse_rgb: np.ndarray | None = None
    coarse_alpha: np.ndarray | None = None
    fine_t: np.ndarray | None = None
    failed: np.ndarray | None = None  # [R] bool, degenerate PDF -> uniform fallback
    fine_rays: np.ndarray | None = None  # [R] bool, rays that ran the fine pass
    ray_values: np.ndarray | None = None  # [R], per-ray activation scalar
    coarse_weights: np.ndarray | None = None
    coarse_t: np.ndarray | None = None
    flops: dict = field(default_factory=dict)

    @property
    def total_flops(self) -> int:
        return int(sum(self.flops.values()))

    @property
    def failure_count(self) -> int:
        return 0 if self.failed is None else int(self.failed.sum())

    @property
    def fine_fraction(self) -> float:
        if self.fine_rays is None:
            return 1.0
        return float(self.fine_rays.mean()) if self.fine_rays.size else 0.0


def _draws(rays: Rays, opts: SamplingOptions, pixel_ids):
    """Per-ray jitter for the uniform samples and for the fine-pass uniforms.

    Each ray gets its own generator seeded from (seed, pixel id), so draws do
    not depend on chunking or thread count.
    """
    if not opts.stratified:
        return None, None
    r = len(rays)
    if pixel_ids is None:
        raise ConfigurationError("stratified rendering needs pixel ids")
    jc = np.empty((r, opts.n_coarse), np.float32)
    jf = np.empty((r, max(opts.n_fine, 0)), np.float32)
    for i, pid in enumerate(np.asarray(pixel_ids)):
        g = np.random.default_rng([opts.seed, int(pid)])
        jc[i] = g.random(opts.n_coarse, dtype=np.float32)
        jf[i] = g.random(jf.shape[1], dtype=np.float32)
    return jc, jf


def _uniform(rays: Rays, opts: SamplingOptions, jitter) -> SampleSet:
    return uniform_samples(rays.near, rays.far, opts.n_coarse, offsets=jitter)


def evaluate_samples(field_, rays: Rays, samples: SampleSet, tap_through=None):
    """Query a field at every sample; returns (sigma [R,N], rgb [R,N,3], out)."""
    r, n = samples.t.shape
    pts = rays.points(samples.t).reshape(-1, 3)
    dirs = None
    if tap_through is None:
        dirs = np.repeat(rays.directions, n, axis=0)
    out = field_.evaluate(pts, dirs, tap_through)
    sigma = None if out.sigma is None else out.sigma.reshape(r, n)
    rgb = None if out.rgb is None else out.rgb.reshape(r, n, 3)
    return sigma, rgb, out


def _fine_stage(fine, rays, coarse_samples, weights, opts, u_jitter, merge):
    """Normalize ``weights`` into a PDF, resample, and run the fine network."""
    if opts.n_fine == 0:
        samples = coarse_samples
        failed = np.zeros(len(rays), bool)
    else:
        w_hat, failed = weights_or_fallback(weights)
        edges = bin_edges(coarse_samples.t, rays.near, rays.far)
        u = stratified_uniforms(opts.n_fine, len(rays), jitter=u_jitter)
        t_new = inverse_transform_sample(WeightPdf(w_hat, edges), u)
        new = SampleSet.from_t(t_new, rays.far)
        samples = merge_and_sort(coarse_samples, new, rays.far) if merge else new
    sigma, rgb, out = evaluate_samples(fine, rays, samples)
    w, _ = compute_weights(sigma, samples.deltas)
    result = composite(w, rgb, opts.background)
    return result, samples, failed, out.flops


def render_coarse_to_fine(
    coarse,
    fine,
    rays: Rays,
    opts: SamplingOptions = SamplingOptions(),
    pixel_ids=None,
    keep_trace: bool = False,
):
    """Baseline hierarchical sampling: uniform coarse pass, then fine pass.

    Returns a :class:`PipelineResult`; with ``keep_trace`` the coarse
    forward trace is returned as a second value.
    """
    jc, jf = _draws(rays, opts, pixel_ids)
    cs = _uniform(rays, opts, jc)
    sigma, rgb, c_out = evaluate_samples(coarse, rays, cs)
    w, _ = compute_weights(sigma, cs.deltas)
    coarse_res = composite(w, rgb, opts.background)
    fine_res, fs, failed, fine_flops = _fine_stage(fine, rays, cs, w, opts, jf, opts.merge_uniform)
    result = PipelineResult(
        rgb=fine_res.rgb,
        alpha=fine_res.alpha,
        coarse_rgb=coarse_res.rgb,
        coarse_alpha=coarse_res.alpha,
        fine_t=fs.t,
        failed=failed,
        fine_rays=np.ones(len(rays), bool),
        coarse_weights=w,
        coarse_t=cs.t,
        flops={"coarse": c_out.flops, "fine": fine_flops},
    )
    if keep_trace:
        return result, c_out.trace
    return result


def activation_features(coarse, rays: Rays, samples: SampleSet, layer: int, pre_relu: bool = False):
    """Per-sample activation features of ``coarse`` at trunk layer ``layer``.

    Returns ``(f [R, N], A [R, N, N_h], flops)`` from a pass truncated at
    ``layer``.
    """
    r, n = samples.t.shape
    _, _, out = evaluate_samples(coarse, rays, samples, tap_through=layer)
    a = out.trace.tap(layer, pre_relu=pre_relu).reshape(r, n, -1)
    return feature_per_sample(a), a, out.flops


def density_from_features(f, estimator: str, estimator_relu: bool = True) -> np.ndarray:
    d = estimate_density(f, estimator, apply_relu=estimator_relu).values
    if not estimator_relu:
        d = nonnegative_shift(d)
    return d


def render_activation_informed(
    coarse,
    fine,
    rays: Rays,
    layer: int,
    estimator: str = "f2",
    opts: SamplingOptions = SamplingOptions(),
    pixel_ids=None,
    estimator_relu: bool = True,
    pre_relu_taps: bool = False,
    density_hook: DensityHook | None = None,
    features: np.ndarray | None = None,
) -> PipelineResult:
    """Replace the coarse pass with a truncated pass plus a density estimate.

    The coarse network is run only up to trunk layer ``layer``; the mean
    activation per sample is turned into a density estimate, normalized and
    resampled, and only the fine network is evaluated in full.
    ``density_hook`` overrides the estimate (test hook); ``features`` supplies
    precomputed per-sample features (e.g. upsampled from a lower resolution).
    Rays whose estimate is zero everywhere fall back to uniform fine samples
    and are flagged in ``failed``.
    """
    cfg = getattr(coarse, "config", None)
    if cfg is not None and not 1 <= layer <= cfg.trunk_layers:
        raise ConfigurationError(f"layer must lie in [1, {cfg.trunk_layers}]")
    if estimator not in ESTIMATORS:
        raise ConfigurationError(f"unknown estimator {estimator!r}")
    jc, jf = _draws(rays, opts, pixel_ids)
    cs = _uniform(rays, opts, jc)
    est_flops = 0
    values = None
    if density_hook is not None:
        d = density_hook(rays, cs)
    else:
        if features is None:
            features, a, est_flops = activation_features(coarse, rays, cs, layer, pre_relu_taps)
            values = ray_scalar(a)
        d = density_from_features(features, estimator, estimator_relu)
    fine_res, fs, failed, fine_flops = _fine_stage(fine, rays, cs, d, opts, jf, opts.merge_uniform)
    return PipelineResult(
        rgb=fine_res.rgb,
        alpha=fine_res.alpha,
        fine_t=fs.t,
        failed=failed,
        fine_rays=np.ones(len(rays), bool),
        ray_values=values,
        coarse_t=cs.t,
        flops={"coarse": est_flops, "fine": fine_flops},
    )


def _chunks(n: int, chunk: int):
    return [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def _concat(parts: list[PipelineResult]) -> PipelineResult:
    def cat(name):
        vals = [getattr(p, name) for p in parts]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals, axis=0)

    flops: dict = {}
    for p in parts:
        for k, v in p.flops.items():
            flops[k] = flops.get(k, 0) + v
    names = [
        "rgb", "alpha", "coarse_rgb", "coarse_alpha", "fine_t", "failed",
        "fine_rays", "ray_values", "coarse_weights", "coarse_t",
    ]
    return PipelineResult(**{n: cat(n) for n in names}, flops=flops)


def render_rays(
    fn: Callable[..., PipelineResult],
    rays: Rays,
    pixel_ids=None,
    chunk: int = 1024,
    threads: int = 1,
    **kwargs,
) -> PipelineResult:
    """Apply a per-chunk pipeline ``fn(rays, pixel_ids=..., **kwargs)`` to all rays."""
    if pixel_ids is None:
        pixel_ids = np.arange(len(rays))
    pixel_ids = np.asarray(pixel_ids)
    slices = _chunks(len(rays), chunk)

    def run(sl):
        return fn(rays[sl], pixel_ids=pixel_ids[sl], **kwargs)

    if threads <= 1 or len(slices) <= 1:
        parts = [run(sl) for sl in slices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, slices))
    return _concat(parts)


def _coarse_with_scalar(coarse, rays, opts, layer, pixel_ids, pre_relu=False):
    jc, _ = _draws(rays, opts, pixel_ids)
    cs = _uniform(rays, opts, jc)
    sigma, rgb, out = evaluate_samples(coarse, rays, cs)
    w, _ = compute_weights(sigma, cs.deltas)
    res = composite(w, rgb, opts.background)
    a = out.trace.tap(layer, pre_relu=pre_relu).reshape(len(rays), opts.n_coarse, -1)
    return PipelineResult(
        rgb=res.rgb,
        alpha=res.alpha,
        coarse_rgb=res.rgb,
        coarse_alpha=res.alpha,
        ray_values=ray_scalar(a).astype(np.float64),
        coarse_weights=w,
        coarse_t=cs.t,
        flops={"coarse": out.flops},
    )


def _fine_only(fine, rays, opts, coarse_t, coarse_weights, pixel_ids):
    _, jf = _draws(rays, opts, pixel_ids)
    cs = SampleSet.from_t(coarse_t, rays.far)
    res, fs, failed, flops = _fine_stage(fine, rays, cs, coarse_weights, opts, jf, opts.merge_uniform)
    return PipelineResult(
        rgb=res.rgb, alpha=res.alpha, fine_t=fs.t, failed=failed, flops={"fine": flops}
    )


def render_mask_skip(
    coarse,
    fine,
    rays: Rays,
    layer: int,
    opts: SamplingOptions = SamplingOptions(),
    pixel_ids=None,
    chunk: int = 1024,
    threads: int = 1,
    pre_relu_taps: bool = False,
) -> PipelineResult:
    """Run the fine pass only where the per-ray activation scalar is below
    the image mean; elsewhere keep the coarse colour.

    ``rays`` must cover the whole image, since the threshold is an image
    statistic.
    """
    if pixel_ids is None:
        pixel_ids = np.arange(len(rays))
    pixel_ids = np.asarray(pixel_ids)
    first = render_rays(
        lambda r, pixel_ids: _coarse_with_scalar(coarse, r, opts, layer, pixel_ids, pre_relu_taps),
        rays, pixel_ids, chunk, threads,
    )
    v = first.ray_values
    tau = v.mean()
    mask = v < tau
    rgb = first.coarse_rgb.copy()
    alpha = first.coarse_alpha.copy()
    failed = np.zeros(len(rays), bool)
    fine_flops = 0
    idx = np.flatnonzero(mask)
    if idx.size:
        sub = rays[idx]
        ct = first.coarse_t[idx]
        cw = first.coarse_weights[idx]
        slices = _chunks(idx.size, chunk)

        def run(sl):
            return _fine_only(fine, sub[sl], opts, ct[sl], cw[sl], pixel_ids[idx][sl])

        if threads <= 1 or len(slices) <= 1:
            parts = [run(sl) for sl in slices]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, slices))
        second = _concat(parts)
        rgb[idx] = second.rgb
        alpha[idx] = second.alpha
        failed[idx] = second.failed
        fine_flops = second.flops.get("fine", 0)
    return PipelineResult(
        rgb=rgb,
        alpha=alpha,
        coarse_rgb=first.coarse_rgb,
        coarse_alpha=first.coarse_alpha,
        failed=failed,
        fine_rays=mask,
        ray_values=v,
        flops={"coarse": first.flops.get("coarse", 0), "fine": fine_flops},
    )


PIPELINE_KINDS = ("baseline", "act", "mask-skip")


@dataclass(frozen=True)
class PipelineSpec:
    """Which pipeline renders a view, plus its ablation switches."""

    kind: str = "baseline"
    layer: int = 2
    estimator: str = "f2"
    relu: bool = True
    upsample: bool = False

    def __post_init__(self):
        if self.kind not in PIPELINE_KINDS:
            raise ConfigurationError(f"unknown pipeline {self.kind!r}; expected one of {PIPELINE_KINDS}")
        if self.kind == "act" and self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")

    @property
    def tag(self) -> str:
        if self.kind == "baseline":
            return "baseline"
        if self.kind == "mask-skip":
            return f"mask-skip({self.layer})"
        tag = f"act({self.layer},{self.estimator})"
        if not self.relu:
            tag += "-norelu"
        if self.upsample:
            tag += "-upsampled"
        return tag


def upsampled_features(coarse, camera, near, far, layer, opts, chunk=1024, threads=1, pre_relu=False):
    """Activation features computed at half resolution with half the samples,
    then nearest-neighbour upsampled to [H*W, N_c]."""
    if camera.width % 2 or camera.height % 2 or opts.n_coarse % 2:
        raise ConfigurationError("upsampled features need even width, height and n_coarse")
    low = camera.scaled(0.5)
    low_opts = SamplingOptions(
        n_coarse=opts.n_coarse // 2, n_fine=0, stratified=opts.stratified, seed=opts.seed,
        background=opts.background, merge_uniform=opts.merge_uniform,
    )
    rays = camera_rays(low, near, far)

    def feats(r, pixel_ids):
        jc, _ = _draws(r, low_opts, pixel_ids)
        f, _, flops = activation_features(coarse, r, _uniform(r, low_opts, jc), layer, pre_relu)
        return PipelineResult(rgb=np.zeros((len(r), 3)), alpha=np.zeros(len(r)), ray_values=f,
                              flops={"coarse": flops})

    out = render_rays(feats, rays, chunk=chunk, threads=threads)
    f = out.ray_values.reshape(low.height, low.width, low_opts.n_coarse)
    up = upsample_nearest(f, (camera.height, camera.width, opts.n_coarse))
    return up.reshape(-1, opts.n_coarse), out.flops["coarse"]


def render_view(
    spec: PipelineSpec,
    coarse,
    fine,
    camera,
    near: float,
    far: float,
    opts: SamplingOptions = SamplingOptions(),
    chunk: int = 1024,
    threads: int = 1,
) -> PipelineResult:
    """Render one full camera view with the pipeline described by ``spec``."""
    rays = camera_rays(camera, near, far)
    if spec.kind == "baseline":
        return render_rays(
            lambda r, pixel_ids: render_coarse_to_fine(coarse, fine, r, opts, pixel_ids),
            rays, chunk=chunk, threads=threads,
        )
    if spec.kind == "mask-skip":
        return render_mask_skip(coarse, fine, rays, spec.layer, opts, chunk=chunk, threads=threads)
    if spec.upsample:
        feats, feat_flops = upsampled_features(coarse, camera, near, far, spec.layer, opts, chunk, threads)
        ids = np.arange(len(rays))
        out = render_rays(
            lambda r, pixel_ids: render_activation_informed(
                coarse, fine, r, spec.layer, spec.estimator, opts, pixel_ids,
                estimator_relu=spec.relu, features=feats[pixel_ids],
            ),
            rays, ids, chunk=chunk, threads=threads,
        )
        out.flops["coarse"] = feat_flops
        return out
    return render_rays(
        lambda r, pixel_ids: render_activation_informed(
            coarse, fine, r, spec.layer, spec.estimator, opts, pixel_ids, estimator_relu=spec.relu
        ),
        rays, chunk=chunk, threads=threads,
    )
