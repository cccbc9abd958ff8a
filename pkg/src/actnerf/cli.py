"""Command-line interface: ``actnerf {make-scene,train,render,analyze,bench}``.

Every command resolves its settings from flags, then an optional JSON config
file (``--config``), then built-in defaults, prints the resolved settings,
and writes its outputs plus ``manifest.json`` and ``config.json`` into the
run directory given by ``--out``. Feeding that ``config.json`` back through
``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import bench as bench_mod
from . import checkpoint as ckpt_io
from .activations import (
    build_activation_image,
    derive_mask,
    ray_scalar,
    weights_or_fallback,
)
from .blender import TransformsParseError, load_blender_transforms, save_blender_transforms
from .colormap import overlay_mask, render_heatmap, render_histogram
from .field import NerfField
from .imageio import write_image, write_png
from .metrics import psnr, ssim
from .mlp import ConfigurationError, MlpConfig, UnsupportedOperationError
from .pipelines import (
    PipelineSpec,
    SamplingOptions,
    activation_features,
    density_from_features,
    evaluate_samples,
    render_view,
)
from .sampling import uniform_samples
from .scene import AnalyticScene, camera_rays, make_dataset, tri_sphere_scene
from .train import TrainConfig, TrainingDiverged, train

log = logging.getLogger("actnerf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# Built-in defaults per command. Flags left unset fall back to the config
# file, then to these values. Keys match the flag names with '-' -> '_'.
DEFAULTS = {
    "make-scene": {
        "scene": "tri-sphere", "width": 64, "height": 64, "n_train": 20, "n_val": 5,
        "n_test": 5, "seed": 0, "supersample": 2, "background": "white",
    },
    "train": {
        "data": None, "iterations": 1000, "batch": 256, "lr": 2e-3, "lr_final": 2e-4,
        "n_coarse": 64, "n_fine": 64, "seed": 0, "trunk_layers": 4, "hidden_units": 64,
        "pe_pos": 10, "pe_dir": 4, "skip_at": None, "density_activation": "relu",
        "time_budget": None, "log_every": 25, "checkpoint_every": 0, "resume": None,
    },
    "render": {
        "checkpoint": None, "data": None, "split": "test", "view": 0, "pipeline": "baseline",
        "layer": 2, "estimator": "f2", "merge": True, "relu": True, "upsample": False,
        "n_coarse": 64, "n_fine": 64, "stratified": False, "seed": 0, "background": None,
        "threads": 1, "chunk": 1024, "format": "png",
    },
    "analyze": {
        "checkpoint": None, "data": None, "split": "test", "view": 0, "layers": "1,2,3,4",
        "estimator": "f2", "n_coarse": 64, "hist_rays": 4, "seed": 0, "threads": 1,
        "chunk": 1024,
    },
    "bench": {
        "checkpoint": None, "data": None, "split": "test", "views": 0, "layers": "1,2,3",
        "estimators": "f1,f2,f3", "mask_skip": True, "ablation": False, "repeats": 1,
        "n_coarse": 64, "n_fine": 64, "seed": 0, "threads": 1, "chunk": 1024,
    },
}

REQUIRED = {
    "make-scene": (),
    "train": ("data",),
    "render": ("checkpoint", "data"),
    "analyze": ("checkpoint", "data"),
    "bench": ("checkpoint", "data"),
}


def _bool_flag(p, name, help_):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=None, help=help_)
    p.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actnerf", description="NeRF micro-engine with activation-informed sampling.")
    parser.add_argument("--version", action="version", version=f"actnerf {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--out", required=True, help="run directory for all outputs")
        p.add_argument("--config", help="JSON file with settings (flags override it)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("make-scene", help="render a procedural posed-image dataset")
    common(p)
    p.add_argument("--scene", help="'tri-sphere' or a scene JSON file")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--supersample", type=int)
    p.add_argument("--background", choices=["white", "black"])

    p = sub.add_parser("train", help="train coarse and fine networks")
    common(p)
    p.add_argument("--data", help="dataset directory or transforms json")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int, help="rays per batch")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", type=float)
    p.add_argument("--n-coarse", type=int)
    p.add_argument("--n-fine", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trunk-layers", type=int)
    p.add_argument("--hidden-units", type=int)
    p.add_argument("--pe-pos", type=int)
    p.add_argument("--pe-dir", type=int)
    p.add_argument("--skip-at", type=int)
    p.add_argument("--density-activation", choices=["relu", "softplus"])
    p.add_argument("--time-budget", type=float, help="seconds; stop early when exceeded")
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    def view_args(p):
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="dataset providing the camera and ground truth")
        p.add_argument("--split", choices=["train", "val", "test"])
        p.add_argument("--view", type=int, help="index within the split")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--chunk", type=int)

    p = sub.add_parser("render", help="render one view with a chosen pipeline")
    common(p)
    view_args(p)
    p.add_argument("--pipeline", choices=["baseline", "act", "mask-skip"])
    p.add_argument("--layer", type=int, help="trunk layer to tap (1-based)")
    p.add_argument("--estimator", choices=["f1", "f2", "f3"])
    _bool_flag(p, "merge", "merge fine samples with the uniform ones (--no-merge to disable)")
    _bool_flag(p, "relu", "outer ReLU in the estimator (--no-relu to disable)")
    _bool_flag(p, "upsample", "estimate from half-resolution activations")
    _bool_flag(p, "stratified", "jittered sample positions")
    p.add_argument("--n-coarse", type=int)
    p.add_argument("--n-fine", type=int)
    p.add_argument("--background", choices=["white", "black", "transparent"])
    p.add_argument("--format", choices=["png", "ppm"])

    p = sub.add_parser("analyze", help="activation heatmaps, histograms and mask")
    common(p)
    view_args(p)
    p.add_argument("--layers", help="comma-separated trunk layers")
    p.add_argument("--estimator", choices=["f1", "f2", "f3"])
    p.add_argument("--n-coarse", type=int)
    p.add_argument("--hist-rays", type=int, help="number of rays with histogram plots")

    p = sub.add_parser("bench", help="quality/time/FLOP table over a pipeline matrix")
    common(p)
    view_args(p)
    p.add_argument("--views", type=int, help="number of views (0 = whole split)")
    p.add_argument("--layers")
    p.add_argument("--estimators")
    _bool_flag(p, "mask-skip", "include mask-skip pipelines")
    _bool_flag(p, "ablation", "add no-ReLU and upsampled variants")
    p.add_argument("--repeats", type=int)
    p.add_argument("--n-coarse", type=int)
    p.add_argument("--n-fine", type=int)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Flags, then config file, then defaults."""
    defaults = DEFAULTS[command]
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown keys in config file: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    missing = [k for k in REQUIRED[command] if resolved.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def _write_manifest(out: Path, command: str, cfg: dict, files: list, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    manifest = {
        "command": command,
        "version": __version__,
        "argv": sys.argv[1:],
        "config": cfg,
        "files": sorted(str(f) for f in files),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_networks(path):
    ckpt = ckpt_io.load(path)
    if "coarse" not in ckpt.networks or "fine" not in ckpt.networks:
        raise ckpt_io.CheckpointError("checkpoint must hold 'coarse' and 'fine' networks")
    return ckpt, NerfField(ckpt.networks["coarse"]), NerfField(ckpt.networks["fine"])


def _view(cfg):
    ds = load_blender_transforms(cfg["data"])
    cams, imgs = ds.split(cfg["split"])
    if not 0 <= cfg["view"] < len(cams):
        raise UsageError(f"view {cfg['view']} out of range for split {cfg['split']!r} ({len(cams)} views)")
    return ds, cams[cfg["view"]], imgs[cfg["view"]]


def cmd_make_scene(cfg, out: Path):
    if cfg["scene"] == "tri-sphere":
        scene = tri_sphere_scene()
    else:
        scene = AnalyticScene.load(cfg["scene"])
    bg = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}[cfg["background"]]
    scene = AnalyticScene(scene.primitives, bg, scene.near, scene.far, scene.unbounded)
    ds = make_dataset(
        scene, cfg["n_train"], cfg["n_val"], cfg["n_test"], cfg["width"], cfg["height"],
        cfg["seed"], cfg["supersample"],
    )
    written = save_blender_transforms(ds, out)
    scene.save(out / "scene.json")
    files = [p.name for p in written.values()] + ["scene.json"]
    files += [str(p.relative_to(out)) for p in sorted(out.glob("*/r_*.png"))]
    return files, {"views": len(ds.cameras)}


def cmd_train(cfg, out: Path):
    ds = load_blender_transforms(cfg["data"])
    init = ckpt_io.load(cfg["resume"]) if cfg["resume"] else None
    if init is not None:
        mlp_cfg = init.networks["coarse"].config
    else:
        mlp_cfg = MlpConfig(
            trunk_layers=cfg["trunk_layers"], hidden_units=cfg["hidden_units"],
            pe_frequencies_pos=cfg["pe_pos"], pe_frequencies_dir=cfg["pe_dir"],
            skip_connection_at=cfg["skip_at"], density_activation=cfg["density_activation"],
            seed=cfg["seed"],
        )
    tcfg = TrainConfig(
        iterations=cfg["iterations"], rays_per_batch=cfg["batch"], lr=cfg["lr"],
        lr_final=cfg["lr_final"], n_coarse=cfg["n_coarse"], n_fine=cfg["n_fine"],
        seed=cfg["seed"], log_every=cfg["log_every"], checkpoint_every=cfg["checkpoint_every"],
    )
    t0 = time.perf_counter()
    res = train(ds, mlp_cfg, tcfg, out_dir=out, init=init, time_budget=cfg["time_budget"])
    last = res.curve[-1] if res.curve else {}
    print(f"trained {last.get('iteration', -1) + 1} iterations in {time.perf_counter() - t0:.1f}s; "
          f"last batch PSNR {last.get('psnr', float('nan')):.2f} dB")
    files = ["checkpoint.anrf", "loss.csv"] + [p.name for p in out.glob("checkpoint_*.anrf")]
    return files, {}


def _opts(cfg, background):
    return SamplingOptions(
        n_coarse=cfg["n_coarse"], n_fine=cfg.get("n_fine", 0), stratified=cfg.get("stratified", False),
        seed=cfg["seed"], background=background, merge_uniform=cfg.get("merge", True),
    )


def cmd_render(cfg, out: Path):
    ckpt, coarse, fine = _load_networks(cfg["checkpoint"])
    ds, cam, gt = _view(cfg)
    bg = cfg["background"] or tuple(ckpt.meta.get("background", ds.background))
    spec = PipelineSpec(cfg["pipeline"], cfg["layer"], cfg["estimator"], cfg["relu"], cfg["upsample"])
    t0 = time.perf_counter()
    res = render_view(spec, coarse, fine, cam, ds.near, ds.far, _opts(cfg, bg), cfg["chunk"], cfg["threads"])
    seconds = time.perf_counter() - t0
    img = res.rgb.reshape(cam.height, cam.width, 3)
    name = spec.tag.replace("(", "_").replace(")", "").replace(",", "_")
    image_file = f"{name}.{cfg['format']}"
    alpha = res.alpha.reshape(cam.height, cam.width) if cfg["background"] == "transparent" else None
    write_image(out / image_file, img, alpha)
    entry = {
        "pipeline": spec.tag,
        "image": image_file,
        "seconds": seconds,
        "flops": res.total_flops,
        "flops_by_pass": {k: int(v) for k, v in res.flops.items()},
        "fine_fraction": res.fine_fraction,
        "failures": res.failure_count,
        "view": {"split": cfg["split"], "index": cfg["view"]},
    }
    if alpha is None:
        entry["psnr"] = psnr(np.clip(img, 0, 1), gt)
        entry["ssim"] = ssim(np.clip(img, 0, 1), gt)
    report_path = out / "report.json"
    report = json.loads(report_path.read_text()) if report_path.exists() else {"renders": {}}
    report["renders"][spec.tag] = entry
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"{spec.tag}: {entry.get('psnr', float('nan')):.2f} dB, {entry['flops']} FLOPs, "
          f"{seconds:.2f}s, {entry['failures']} degenerate rays -> {out / image_file}")
    return [image_file, "report.json"], {}


def cmd_analyze(cfg, out: Path):
    ckpt, coarse, fine = _load_networks(cfg["checkpoint"])
    ds, cam, gt = _view(cfg)
    try:
        layers = [int(x) for x in str(cfg["layers"]).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--layers must be comma-separated integers: {exc}") from exc
    n_trunk = coarse.config.trunk_layers
    if not layers or any(not 1 <= l <= n_trunk for l in layers):
        raise UsageError(f"layers must lie in [1, {n_trunk}]")
    rays = camera_rays(cam, ds.near, ds.far)
    samples = uniform_samples(rays.near, rays.far, cfg["n_coarse"])
    sigma, _, full = evaluate_samples(coarse, rays, samples)
    files = []
    rows = []
    h, w = cam.height, cam.width
    pick = np.linspace(0, len(rays) - 1, cfg["hist_rays"]).astype(int) if cfg["hist_rays"] > 0 else []
    for layer in layers:
        a = full.trace.tap(layer).reshape(len(rays), cfg["n_coarse"], -1)
        v = ray_scalar(a)
        img = build_activation_image(v, h, w, layer)
        mask = derive_mask(img)
        f = a.mean(-1)
        _, failed = weights_or_fallback(density_from_features(f, cfg["estimator"]))
        render_heatmap(out / f"heatmap_layer{layer}.png", img.values)
        overlay = overlay_mask(gt, mask.reshape(h, w))
        write_png(out / f"mask_layer{layer}.png", overlay)
        files += [f"heatmap_layer{layer}.png", f"mask_layer{layer}.png"]
        for r in pick:
            fn_f = f"hist_layer{layer}_ray{r}_feature.png"
            render_histogram(out / fn_f, f[r])
            files.append(fn_f)
        for pix in range(len(rays)):
            rows.append((pix, layer, float(v[pix]), bool(mask.ravel()[pix]), bool(failed[pix])))
        print(f"layer {layer}: tau={img.threshold:.4f}, |P|={int(mask.sum())}/{len(rays)}, "
              f"degenerate rays={int(failed.sum())}")
    for r in pick:
        fn_s = f"hist_ray{r}_sigma.png"
        render_histogram(out / fn_s, sigma[r])
        files.append(fn_s)
    render_heatmap(out / "density_sum.png", sigma.sum(-1).reshape(h, w))
    files.append("density_sum.png")
    with open(out / "activations.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pixel", "layer", "v", "in_mask", "failed"])
        for pix, layer, v, m, fl in rows:
            wr.writerow([pix, layer, f"{v:.8g}", int(m), int(fl)])
    files.append("activations.csv")
    return files, {}


def cmd_bench(cfg, out: Path):
    ckpt, coarse, fine = _load_networks(cfg["checkpoint"])
    ds = load_blender_transforms(cfg["data"])
    cams, imgs = ds.split(cfg["split"])
    if cfg["views"]:
        cams, imgs = cams[: cfg["views"]], imgs[: cfg["views"]]
    if not cams:
        raise UsageError(f"split {cfg['split']!r} has no views")
    try:
        layers = tuple(int(x) for x in str(cfg["layers"]).split(","))
    except ValueError as exc:
        raise UsageError(f"--layers must be comma-separated integers: {exc}") from exc
    estimators = tuple(e.strip() for e in str(cfg["estimators"]).split(","))
    if cfg["ablation"]:
        specs = bench_mod.ablation_matrix(layers, estimators)
    else:
        specs = bench_mod.default_matrix(layers, estimators)
    if cfg["mask_skip"]:
        specs += [PipelineSpec("mask-skip", layer=l) for l in layers]
    bg = tuple(ckpt.meta.get("background", ds.background))
    rows = bench_mod.bench(
        specs, coarse, fine, cams, imgs, ds.near, ds.far, _opts(cfg, bg),
        repeats=cfg["repeats"], threads=cfg["threads"], chunk=cfg["chunk"],
        scene=Path(cfg["data"]).name,
    )
    bench_mod.write_csv(out / "bench.csv", rows)
    bench_mod.write_json(out / "bench.json", rows)
    print(bench_mod.format_table(rows))
    return ["bench.csv", "bench.json"], {}


COMMANDS = {
    "make-scene": cmd_make_scene,
    "train": cmd_train,
    "render": cmd_render,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args.command, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    print(f"actnerf {args.command} config (seed {cfg.get('seed')}):")
    print(json.dumps(cfg, indent=2, sort_keys=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        files, extra = COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good state saved in {out}", file=sys.stderr)
        return EXIT_RUNTIME
    except (
        FileNotFoundError, ckpt_io.CheckpointError, TransformsParseError, ConfigurationError,
        UnsupportedOperationError, ValueError, OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_manifest(out, args.command, cfg, files + ["config.json", "manifest.json"], extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
