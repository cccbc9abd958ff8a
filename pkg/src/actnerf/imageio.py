"""PNG/PPM reading and writing for float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def write_png(path, img: np.ndarray, alpha: np.ndarray | None = None):
    """Write an [H, W, 3] float image; with ``alpha`` [H, W] an RGBA PNG."""
    data = _to_uint8(img)
    if alpha is not None:
        data = np.concatenate([data, _to_uint8(alpha)[..., None]], axis=-1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def write_ppm(path, img: np.ndarray):
    """Binary P6 PPM."""
    data = _to_uint8(img)
    h, w = data.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data[..., :3].tobytes())


def write_image(path, img: np.ndarray, alpha: np.ndarray | None = None):
    if str(path).lower().endswith(".ppm"):
        write_ppm(path, img)
    else:
        write_png(path, img, alpha)


def read_image(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Read an 8-bit image as float32 [H, W, 3]; RGBA is composited onto
    ``background``."""
    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA") or "transparency" in im.info:
            data = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
            rgb, a = data[..., :3], data[..., 3:]
            return (rgb * a + np.asarray(background, np.float32) * (1 - a)).astype(np.float32)
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
