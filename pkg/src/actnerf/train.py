"""Joint coarse + fine training with a photometric MSE loss."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .field import NerfField
from .mlp import AdamState, MlpConfig, MlpParams, NonFiniteGradientError, adam_step, backward
from .pipelines import evaluate_samples
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
from .activations import weights_or_fallback
from .scene import Dataset, camera_rays
from .volume import composite, composite_backward, compute_weights

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, last_good: ckpt_io.Checkpoint):
        self.iteration = iteration
        self.last_good = last_good
        super().__init__(f"non-finite loss at iteration {iteration}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    rays_per_batch: int = 512
    lr: float = 5e-4
    lr_final: float = 5e-5
    n_coarse: int = 64
    n_fine: int = 64
    seed: int = 0
    coarse_weight: float = 1.0
    fine_weight: float = 1.0
    log_every: int = 25
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_batch < 1:
            raise ValueError("iterations must be >= 0 and rays_per_batch >= 1")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")

    def lr_at(self, it: int) -> float:
        """Exponential decay from ``lr`` to ``lr_final`` over the run."""
        if self.iterations <= 1:
            return self.lr
        frac = it / (self.iterations - 1)
        return self.lr * (self.lr_final / self.lr) ** frac


def photometric_loss(coarse_rgb, fine_rgb, gt_rgb, coarse_weight=1.0, fine_weight=1.0) -> float:
    """Batch mean of ``|C_c - C|^2 + |C_f - C|^2`` (squared norms over channels)."""
    c = np.asarray(coarse_rgb, np.float64)
    f = np.asarray(fine_rgb, np.float64)
    g = np.asarray(gt_rgb, np.float64)
    if not c.shape == f.shape == g.shape:
        raise ValueError("coarse, fine and ground-truth batches must share a shape")
    per_ray = coarse_weight * ((c - g) ** 2).sum(-1) + fine_weight * ((f - g) ** 2).sum(-1)
    return float(per_ray.mean())


@dataclass
class TrainResult:
    checkpoint: ckpt_io.Checkpoint
    curve: list  # dicts: iteration, coarse_mse, fine_mse, psnr, loss, seconds


def init_networks(mlp_config: MlpConfig, seed: int) -> dict:
    return {
        "coarse": MlpParams.init(mlp_config, seed=seed),
        "fine": MlpParams.init(mlp_config, seed=seed + 1),
    }


def _make_checkpoint(nets, opt, meta) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        {k: v.copy() for k, v in nets.items()},
        {k: AdamState([m.copy() for m in s.m], [v.copy() for v in s.v], s.step) for k, s in opt.items()},
        dict(meta),
    )


def _training_rays(dataset: Dataset):
    cams, imgs = dataset.split("train")
    origins, dirs, colors = [], [], []
    for cam, img in zip(cams, imgs):
        r = camera_rays(cam, dataset.near, dataset.far)
        origins.append(r.origins)
        dirs.append(r.directions)
        colors.append(img.reshape(-1, 3))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors).astype(np.float32)


def train_step(nets, opt, rays: Rays, target, cfg: TrainConfig, rng, lr, background, unbounded=False):
    """One optimizer step on a ray batch; returns updated nets/opt and stats."""
    coarse = NerfField(nets["coarse"], unbounded)
    fine = NerfField(nets["fine"], unbounded)
    b = len(rays)

    cs = uniform_samples(rays.near, rays.far, cfg.n_coarse, stratified=True, rng=rng)
    c_sigma, c_rgb, c_out = evaluate_samples(coarse, rays, cs)
    c_w, c_T = compute_weights(c_sigma, cs.deltas)
    c_res = composite(c_w, c_rgb, background)

    # resampling positions carry no gradient
    if cfg.n_fine > 0:
        w_hat, _ = weights_or_fallback(c_w)
        edges = bin_edges(cs.t, rays.near, rays.far)
        u = stratified_uniforms(cfg.n_fine, b, rng)
        t_new = inverse_transform_sample(WeightPdf(w_hat, edges), u)
        fs = merge_and_sort(cs, SampleSet.from_t(t_new, rays.far), rays.far)
    else:
        fs = cs
    f_sigma, f_rgb, f_out = evaluate_samples(fine, rays, fs)
    f_w, f_T = compute_weights(f_sigma, fs.deltas)
    f_res = composite(f_w, f_rgb, background)

    loss = photometric_loss(c_res.rgb, f_res.rgb, target, cfg.coarse_weight, cfg.fine_weight)
    coarse_mse = float(np.mean((c_res.rgb - target) ** 2))
    fine_mse = float(np.mean((f_res.rgb - target) ** 2))
    stats = {"loss": loss, "coarse_mse": coarse_mse, "fine_mse": fine_mse}
    if not math.isfinite(loss):
        return nets, opt, stats

    new_nets, new_opt = {}, {}
    for name, sigma, rgb, samples, w, trans, res, out, weight in (
        ("coarse", c_sigma, c_rgb, cs, c_w, c_T, c_res, c_out, cfg.coarse_weight),
        ("fine", f_sigma, f_rgb, fs, f_w, f_T, f_res, f_out, cfg.fine_weight),
    ):
        d_color = (2.0 * weight / b) * (res.rgb - target)
        d_sigma, d_rgb = composite_backward(sigma, rgb, samples.deltas, w, trans, d_color, background)
        grads = backward(nets[name], out.trace, d_sigma.reshape(-1), d_rgb.reshape(-1, 3))
        new_nets[name], new_opt[name] = adam_step(nets[name], grads, opt[name], lr)
    return new_nets, new_opt, stats


def train(
    dataset: Dataset,
    mlp_config: MlpConfig,
    cfg: TrainConfig,
    out_dir=None,
    init: ckpt_io.Checkpoint | None = None,
    time_budget: float | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Train coarse and fine networks on the dataset's training split.

    Deterministic for a given ``cfg.seed``. With ``out_dir`` the final
    checkpoint, periodic checkpoints and ``loss.csv`` are written there.
    ``time_budget`` (seconds) stops early, keeping the learning-rate schedule
    of the full run.
    """
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        nets = {k: v.copy() for k, v in init.networks.items()}
        opt = init.optimizer or {k: AdamState.init(v) for k, v in nets.items()}
    else:
        nets = init_networks(mlp_config, cfg.seed)
        opt = {k: AdamState.init(v) for k, v in nets.items()}
    meta = {
        "near": dataset.near,
        "far": dataset.far,
        "background": list(dataset.background),
        "train": asdict(cfg),
        **(meta or {}),
    }
    background = np.asarray(dataset.background, np.float32)
    origins, dirs, colors = _training_rays(dataset)
    out_dir = Path(out_dir) if out_dir is not None else None
    curve = []
    start = time.perf_counter()

    for it in range(cfg.iterations):
        idx = rng.integers(0, origins.shape[0], cfg.rays_per_batch)
        rays = Rays(origins[idx], dirs[idx], dataset.near, dataset.far)
        lr = cfg.lr_at(it)
        try:
            nets, opt, stats = train_step(nets, opt, rays, colors[idx], cfg, rng, lr, background)
        except NonFiniteGradientError:
            stats = {"loss": float("nan")}
        if not math.isfinite(stats["loss"]):
            # updates are functional, so nets/opt still hold the last good state
            last_good = _make_checkpoint(nets, opt, meta)
            if out_dir is not None:
                ckpt_io.save(out_dir / "checkpoint.anrf", last_good)
            raise TrainingDiverged(it, last_good)
        elapsed = time.perf_counter() - start
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            row = {
                "iteration": it,
                "coarse_mse": stats["coarse_mse"],
                "fine_mse": stats["fine_mse"],
                "psnr": -10.0 * math.log10(max(stats["fine_mse"], 1e-10)),
                "loss": stats["loss"],
                "seconds": elapsed,
            }
            curve.append(row)
            log.info("it %d loss %.5f psnr %.2f (%.0fs)", it, row["loss"], row["psnr"], elapsed)
        if cfg.checkpoint_every and out_dir is not None and (it + 1) % cfg.checkpoint_every == 0:
            ckpt_io.save(out_dir / f"checkpoint_{it + 1:06d}.anrf", _make_checkpoint(nets, opt, meta))
        if time_budget is not None and elapsed > time_budget:
            log.info("time budget reached after %d iterations", it + 1)
            meta["stopped_at"] = it + 1
            break

    final = _make_checkpoint(nets, opt, meta)
    if out_dir is not None:
        ckpt_io.save(out_dir / "checkpoint.anrf", final)
        write_loss_csv(out_dir / "loss.csv", curve)
    return TrainResult(final, curve)


LOSS_COLUMNS = ("iteration", "coarse_mse", "fine_mse", "psnr")


def write_loss_csv(path, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in curve:
            w.writerow([row["iteration"]] + [f"{row[c]:.8g}" for c in LOSS_COLUMNS[1:]])
