"""Reading and writing Blender-style ``transforms.json`` datasets."""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .imageio import read_image, write_png
from .scene import Camera, Dataset

SPLITS = ("train", "val", "test")


class TransformsParseError(ValueError):
    pass


def _orthonormalize(c2w: np.ndarray) -> np.ndarray:
    r = c2w[:3, :3]
    u, _, vt = np.linalg.svd(r)
    fixed = c2w.copy()
    fixed[:3, :3] = u @ vt
    return fixed


def _resolve_image(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.exists():
        return p
    for ext in (".png", ".PNG", ".jpg", ".jpeg"):
        q = root / (file_path + ext)
        if q.exists():
            return q
    raise FileNotFoundError(f"image for frame {file_path!r} not found under {root}")


def _read_frames(path: Path, background):
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TransformsParseError(f"{path}: invalid JSON ({exc})") from exc
    if "camera_angle_x" not in meta:
        raise TransformsParseError(f"{path}: missing field 'camera_angle_x'")
    if "frames" not in meta:
        raise TransformsParseError(f"{path}: missing field 'frames'")
    frames = meta["frames"]
    if not frames:
        raise TransformsParseError(f"{path}: 'frames' is empty")
    fov = float(meta["camera_angle_x"])
    cams, imgs = [], []
    for i, frame in enumerate(frames):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise TransformsParseError(f"{path}: frame {i} missing field '{key}'")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise TransformsParseError(f"{path}: frame {i} 'transform_matrix' is not 4x4")
        r = c2w[:3, :3]
        if np.linalg.norm(r @ r.T - np.eye(3)) >= 1e-4:
            warnings.warn(f"{path}: frame {i} rotation not orthonormal; re-orthonormalized")
            c2w = _orthonormalize(c2w)
        img = read_image(_resolve_image(path.parent, frame["file_path"]), background)
        h, w = img.shape[:2]
        cams.append(Camera(w, h, 0.5 * w / np.tan(0.5 * fov), c2w))
        imgs.append(img)
    return cams, imgs


def load_blender_transforms(
    path,
    near: float = 2.0,
    far: float = 6.0,
    background=(1.0, 1.0, 1.0),
) -> Dataset:
    """Load a dataset from a ``transforms*.json`` file or a directory.

    A directory is read through ``transforms_{train,val,test}.json`` when
    present, else through a single ``transforms.json`` (all frames become
    training views). Focal length is ``0.5 W / tan(0.5 camera_angle_x)``.
    """
    path = Path(path)
    if path.is_dir():
        files = {s: path / f"transforms_{s}.json" for s in SPLITS}
        files = {s: f for s, f in files.items() if f.exists()}
        if not files:
            single = path / "transforms.json"
            if not single.exists():
                raise FileNotFoundError(f"no transforms json in {path}")
            files = {"train": single}
    else:
        split = next((s for s in SPLITS if path.stem == f"transforms_{s}"), "train")
        files = {split: path}

    cams, imgs, splits = [], [], {}
    for split, f in files.items():
        c, im = _read_frames(f, background)
        splits[split] = np.arange(len(cams), len(cams) + len(c))
        cams.extend(c)
        imgs.extend(im)
    for s in SPLITS:
        splits.setdefault(s, np.arange(0))
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise TransformsParseError("all images must share one resolution")
    return Dataset(cams, np.stack(imgs), splits, near, far, tuple(background))


def save_blender_transforms(dataset: Dataset, root) -> dict:
    """Write images and ``transforms_{split}.json`` files; returns the paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = {}
    for split in SPLITS:
        idx = dataset.splits.get(split, [])
        if len(idx) == 0:
            continue
        frames = []
        fov = None
        for j, i in enumerate(idx):
            cam = dataset.cameras[i]
            fov = cam.fov_x
            rel = f"./{split}/r_{j}"
            write_png(root / f"{split}/r_{j}.png", dataset.images[i])
            frames.append(
                {"file_path": rel, "rotation": 0.0, "transform_matrix": cam.c2w.tolist()}
            )
        out = root / f"transforms_{split}.json"
        out.write_text(json.dumps({"camera_angle_x": fov, "frames": frames}, indent=2))
        written[split] = out
    return written
