"""Quality, timing and FLOP benchmarks over a matrix of pipelines.

Speedup convention: ``(t_baseline - t_pipeline) / t_pipeline``, as a
percentage. A pipeline taking 33.11 s against a 48.98 s baseline is a 47.9%
speedup. The same convention is used for the FLOP-based figure.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .metrics import psnr, ssim
from .pipelines import PipelineSpec, SamplingOptions, render_view

SPEEDUP_FORMULA = "speedup_pct = 100 * (t_baseline - t_pipeline) / t_pipeline"

COLUMNS = (
    "scene", "pipeline", "psnr", "ssim", "seconds", "flops", "coarse_flops",
    "fine_fraction", "failures", "threads", "speedup_pct", "flop_speedup_pct",
    "coarse_flop_reduction_pct",
)


@dataclass
class MetricsRow:
    scene: str
    pipeline: str
    psnr: float
    ssim: float
    seconds: float
    flops: int
    coarse_flops: int
    fine_fraction: float
    failures: int
    threads: int
    speedup_pct: float = 0.0
    flop_speedup_pct: float = 0.0
    coarse_flop_reduction_pct: float = 0.0

    def __post_init__(self):
        if not self.psnr >= 0:
            raise ValueError("PSNR must be >= 0")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("SSIM must lie in [-1, 1]")
        if self.flops <= 0:
            raise ValueError("FLOPs must be positive")


def speedup(t_baseline: float, t_pipeline: float) -> float:
    return 100.0 * (t_baseline - t_pipeline) / t_pipeline


def default_matrix(layers=(1, 2, 3), estimators=("f1", "f2", "f3")) -> list[PipelineSpec]:
    """Baseline plus every (layer, estimator) activation pipeline."""
    specs = [PipelineSpec("baseline")]
    specs += [PipelineSpec("act", layer=l, estimator=e) for l in layers for e in estimators]
    return specs


def ablation_matrix(layers=(1, 2, 3), estimators=("f1", "f2", "f3")) -> list[PipelineSpec]:
    """ReLU / no-ReLU crossed with full-res / upsampled features."""
    specs = [PipelineSpec("baseline")]
    for relu in (True, False):
        for up in (False, True):
            specs += [
                PipelineSpec("act", layer=l, estimator=e, relu=relu, upsample=up)
                for l in layers for e in estimators
            ]
    return specs


def bench(
    specs,
    coarse,
    fine,
    cameras,
    images,
    near: float,
    far: float,
    opts: SamplingOptions = SamplingOptions(),
    repeats: int = 1,
    threads: int = 1,
    chunk: int = 1024,
    scene: str = "scene",
    warmup: bool = True,
) -> list[MetricsRow]:
    """Render every view with every pipeline and collect a MetricsRow each.

    Quality is averaged over views. Time is the median over ``repeats`` of
    the summed per-view render time; a discarded warmup render precedes
    timing. Speedups are relative to the first baseline spec (added if
    absent).
    """
    specs = list(specs)
    if not any(s.kind == "baseline" for s in specs):
        specs.insert(0, PipelineSpec("baseline"))
    if warmup and cameras:
        render_view(specs[0], coarse, fine, cameras[0], near, far, opts, chunk, threads)

    rows = []
    for spec in specs:
        times, results = [], None
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            outs = [render_view(spec, coarse, fine, cam, near, far, opts, chunk, threads) for cam in cameras]
            times.append(time.perf_counter() - t0)
            results = outs
        p, s = [], []
        for out, img in zip(results, images):
            pred = out.rgb.reshape(img.shape)
            p.append(psnr(np.clip(pred, 0, 1), img))
            s.append(ssim(np.clip(pred, 0, 1), img))
        rows.append(
            MetricsRow(
                scene=scene,
                pipeline=spec.tag,
                psnr=float(np.mean(p)),
                ssim=float(np.mean(s)),
                seconds=float(np.median(times)),
                flops=int(sum(o.total_flops for o in results)),
                coarse_flops=int(sum(o.flops.get("coarse", 0) for o in results)),
                fine_fraction=float(np.mean([o.fine_fraction for o in results])),
                failures=int(sum(o.failure_count for o in results)),
                threads=threads,
            )
        )
    base = next(r for r, s in zip(rows, specs) if s.kind == "baseline")
    for r in rows:
        r.speedup_pct = speedup(base.seconds, r.seconds)
        r.flop_speedup_pct = speedup(base.flops, r.flops)
        r.coarse_flop_reduction_pct = 100.0 * (1.0 - r.coarse_flops / base.coarse_flops)
    return rows


def write_csv(path, rows: list[MetricsRow]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SPEEDUP_FORMULA}\n")
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def write_json(path, rows: list[MetricsRow], extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"speedup_formula": SPEEDUP_FORMULA, "columns": list(COLUMNS), "rows": [asdict(r) for r in rows]}
    doc.update(extra or {})
    path.write_text(json.dumps(doc, indent=2))


def format_table(rows: list[MetricsRow]) -> str:
    """Plain-text table in the layout of the comparison tables."""
    head = f"{'pipeline':<26}{'PSNR':>8}{'SSIM':>8}{'time[s]':>9}{'speedup':>9}{'cFLOPs-':>9}{'fine%':>7}{'fail':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.pipeline:<26}{r.psnr:8.2f}{r.ssim:8.4f}{r.seconds:9.3f}{r.speedup_pct:8.1f}%"
            f"{r.coarse_flop_reduction_pct:8.1f}%{100 * r.fine_fraction:6.1f}%{r.failures:6d}"
        )
    return "\n".join(lines)
