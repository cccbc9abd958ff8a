"""Pinhole cameras, procedural scenes with closed-form rendering, and datasets.

Coordinates are right-handed with cameras looking down their local -z axis
and +y up in the image (the Blender/NeRF convention used by
``transforms.json``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import FieldSample
from .sampling import Rays


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    c2w: np.ndarray  # [4, 4] camera-to-world

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError("camera pose must be 4x4")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        r = self.c2w[:3, :3]
        if np.linalg.norm(r @ r.T - np.eye(3)) >= 1e-4:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float, c2w) -> Camera:
        return cls(width, height, 0.5 * width / np.tan(0.5 * fov_x), c2w)

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def fov_x(self) -> float:
        return float(2 * np.arctan(0.5 * self.width / self.focal))

    def scaled(self, factor: float) -> Camera:
        """Same pose and field of view at ``factor`` times the resolution."""
        return Camera(
            int(round(self.width * factor)), int(round(self.height * factor)),
            self.focal * factor, self.c2w,
        )

    def directions(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Unit world-space directions through image points (pixel units)."""
        cam = np.stack(
            [
                (xs - 0.5 * self.width) / self.focal,
                -(ys - 0.5 * self.height) / self.focal,
                -np.ones_like(xs, dtype=np.float64),
            ],
            axis=-1,
        )
        world = cam @ self.c2w[:3, :3].T
        return world / np.linalg.norm(world, axis=-1, keepdims=True)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    z = -forward / np.linalg.norm(forward)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
    return c2w


def ray_for_pixel(camera: Camera, x: int, y: int, near: float = 2.0, far: float = 6.0) -> Rays:
    """The ray through the centre of pixel (x, y)."""
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise IndexError(f"pixel ({x}, {y}) outside {camera.width}x{camera.height} image")
    d = camera.directions(np.array([x + 0.5]), np.array([y + 0.5]))
    return Rays(camera.position[None], d, near, far)


def camera_rays(camera: Camera, near: float, far: float, supersample: int = 1) -> Rays:
    """Rays for every pixel in row-major order (``supersample**2`` per pixel,
    sub-pixel index fastest)."""
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    ys, xs = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    px = (xs[..., None, None] + offs[None, None, None, :]).repeat(s, axis=2)
    py = (ys[..., None, None] + offs[None, None, :, None]).repeat(s, axis=3)
    d = camera.directions(px.reshape(-1), py.reshape(-1))
    o = np.broadcast_to(camera.position, d.shape)
    return Rays(o, d, near, far)


@dataclass
class Sphere:
    center: tuple
    radius: float
    sigma: float
    albedo: tuple
    kind: str = "sphere"

    def intervals(self, o, d):
        c = np.asarray(self.center, dtype=np.float64)
        oc = o - c
        b = (oc * d).sum(-1)
        cc = (oc * oc).sum(-1) - self.radius**2
        disc = b * b - cc
        hit = disc > 0
        s = np.sqrt(np.where(hit, disc, 0))
        return np.where(hit, -b - s, np.inf), np.where(hit, -b + s, -np.inf)

    def contains(self, p):
        c = np.asarray(self.center, dtype=np.float64)
        return ((p - c) ** 2).sum(-1) <= self.radius**2


@dataclass
class Box:
    lo: tuple
    hi: tuple
    sigma: float
    albedo: tuple
    kind: str = "box"

    def intervals(self, o, d):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        # axis-parallel rays: inside the slab means unbounded, outside means miss
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        t0 = np.where(par, np.where(inside, -np.inf, np.inf), t0)
        t1 = np.where(par, np.where(inside, np.inf, -np.inf), t1)
        tmin = np.minimum(t0, t1).max(-1)
        tmax = np.maximum(t0, t1).min(-1)
        hit = tmax > tmin
        return np.where(hit, tmin, np.inf), np.where(hit, tmax, -np.inf)

    def contains(self, p):
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)


@dataclass
class Slab:
    """Region ``lo <= dot(normal, x) <= hi`` between two parallel planes."""

    normal: tuple
    lo: float
    hi: float
    sigma: float
    albedo: tuple
    kind: str = "slab"

    def intervals(self, o, d):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        on = o @ n
        dn = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (self.lo - on) / dn
            t1 = (self.hi - on) / dn
        par = dn == 0
        inside = (on >= self.lo) & (on <= self.hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
        return tmin, tmax

    def contains(self, p):
        n = np.asarray(self.normal, dtype=np.float64)
        s = p @ (n / np.linalg.norm(n))
        return (s >= self.lo) & (s <= self.hi)


_KINDS = {"sphere": Sphere, "box": Box, "slab": Slab}


@dataclass
class AnalyticScene:
    primitives: list = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)
    near: float = 2.0
    far: float = 6.0
    unbounded: bool = False

    def __post_init__(self):
        for p in self.primitives:
            if p.sigma < 0:
                raise ValueError("primitive densities must be non-negative")
            if not all(0.0 <= a <= 1.0 for a in p.albedo):
                raise ValueError("albedos must lie in [0, 1]")

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            d = dict(vars(p))
            prims.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()})
        return {
            "primitives": prims,
            "background": list(self.background),
            "near": self.near,
            "far": self.far,
            "unbounded": self.unbounded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AnalyticScene:
        prims = []
        for p in d.get("primitives", []):
            p = dict(p)
            kind = p.pop("kind")
            prims.append(_KINDS[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
        return cls(
            prims, tuple(d.get("background", (1.0, 1.0, 1.0))),
            d.get("near", 2.0), d.get("far", 6.0), d.get("unbounded", False),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> AnalyticScene:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def evaluate(self, points, dirs=None, tap_through=None) -> FieldSample:
        """Density and colour at points, so the scene can be ray-marched like
        a learned field. Overlaps add densities and mix albedos by density."""
        p = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(p.shape[0])
        rgb = np.zeros((p.shape[0], 3))
        for prim in self.primitives:
            inside = prim.contains(p)
            sigma += np.where(inside, prim.sigma, 0.0)
            rgb += np.where(inside, prim.sigma, 0.0)[:, None] * np.asarray(prim.albedo)
        rgb = np.where(sigma[:, None] > 0, rgb / np.where(sigma > 0, sigma, 1)[:, None], 0.0)
        return FieldSample(sigma.astype(np.float32), rgb.astype(np.float32))

    def render_rays(self, rays: Rays) -> tuple[np.ndarray, np.ndarray]:
        """Exact emission-absorption colour and opacity for each ray.

        Constant-density primitives make the optical depth piecewise linear
        in ``t``, so compositing the segments between intersection events
        front to back is exact.
        """
        o = rays.origins.astype(np.float64)
        d = rays.directions.astype(np.float64)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        near = rays.near.astype(np.float64)
        far = rays.far.astype(np.float64)
        r = o.shape[0]
        if not self.primitives:
            rgb = np.broadcast_to(np.asarray(self.background, dtype=np.float64), (r, 3))
            return rgb.copy(), np.zeros(r)
        t0s, t1s = [], []
        for prim in self.primitives:
            a, b = prim.intervals(o, d)
            t0s.append(np.clip(a, near, far))
            t1s.append(np.clip(b, near, far))
        t0 = np.stack(t0s, -1)  # [R, K]
        t1 = np.stack(t1s, -1)
        events = np.sort(np.concatenate([t0, t1, near[:, None], far[:, None]], -1), -1)
        seg_lo, seg_hi = events[:, :-1], events[:, 1:]
        mid = 0.5 * (seg_lo + seg_hi)
        member = (mid[..., None] >= t0[:, None, :]) & (mid[..., None] < t1[:, None, :])
        sig_k = np.array([p.sigma for p in self.primitives], dtype=np.float64)
        alb_k = np.array([p.albedo for p in self.primitives], dtype=np.float64)
        sig = (member * sig_k).sum(-1)  # [R, S]
        col = np.einsum("rsk,k,kc->rsc", member.astype(np.float64), sig_k, alb_k)
        col = col / np.where(sig > 0, sig, 1)[..., None]
        tau = sig * (seg_hi - seg_lo)
        excl = np.concatenate([np.zeros((r, 1)), np.cumsum(tau, -1)[:, :-1]], -1)
        w = np.exp(-excl) * -np.expm1(-tau)
        alpha = w.sum(-1)
        rgb = (w[..., None] * col).sum(1) + (1 - alpha)[:, None] * np.asarray(self.background)
        return rgb, alpha


def analytic_render(scene: AnalyticScene, camera: Camera, supersample: int = 1) -> np.ndarray:
    """Ground-truth image [H, W, 3], averaging ``supersample**2`` rays per pixel."""
    rays = camera_rays(camera, scene.near, scene.far, supersample)
    rgb, _ = scene.render_rays(rays)
    rgb = rgb.reshape(camera.height, camera.width, supersample * supersample, 3).mean(2)
    return np.clip(rgb, 0.0, 1.0)


def tri_sphere_scene() -> AnalyticScene:
    """Three coloured spheres of different density inside the unit box."""
    return AnalyticScene(
        primitives=[
            Sphere((-0.45, -0.25, 0.0), 0.38, 40.0, (0.9, 0.15, 0.1)),
            Sphere((0.4, -0.2, 0.1), 0.33, 4.0, (0.1, 0.75, 0.2)),
            Sphere((0.0, 0.45, -0.15), 0.42, 12.0, (0.15, 0.25, 0.9)),
        ],
        background=(1.0, 1.0, 1.0),
        near=2.0,
        far=6.0,
    )


def orbit_cameras(
    n_views: int,
    width: int,
    height: int,
    fov_x: float = 0.6911112070083618,
    radius: float = 4.0,
    elevation_deg: float = 30.0,
) -> list[Camera]:
    """Cameras evenly spaced on a circle around the z axis, looking at the origin."""
    cams = []
    elev = np.deg2rad(elevation_deg)
    for i in range(n_views):
        az = 2 * np.pi * i / n_views
        eye = radius * np.array([np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)])
        cams.append(Camera.from_fov(width, height, fov_x, look_at(eye)))
    return cams


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


@dataclass
class Dataset:
    cameras: list
    images: np.ndarray  # [V, H, W, 3] float32 in [0, 1]
    splits: dict  # split name -> array of view indices
    near: float = 2.0
    far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera required")
        for cam, img in zip(self.cameras, self.images):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError("image dims do not match camera")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def split(self, name: str) -> tuple[list, np.ndarray]:
        idx = self.splits[name]
        return [self.cameras[i] for i in idx], self.images[idx]


def make_dataset(
    scene: AnalyticScene,
    n_train: int = 20,
    n_val: int = 5,
    n_test: int = 5,
    width: int = 64,
    height: int = 64,
    seed: int = 0,
    supersample: int = 2,
    quantize: bool = True,
) -> Dataset:
    """Render a posed dataset on an orbit; views are assigned to splits by a
    seeded permutation, so held-out views sit between training views."""
    total = n_train + n_val + n_test
    cams = orbit_cameras(total, width, height)
    imgs = []
    for cam in cams:
        img = analytic_render(scene, cam, supersample)
        if quantize:
            img = to_uint8(img).astype(np.float32) / 255.0
        imgs.append(img.astype(np.float32))
    perm = np.random.default_rng(seed).permutation(total)
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }
    return Dataset(cams, np.stack(imgs), splits, scene.near, scene.far, tuple(scene.background))
