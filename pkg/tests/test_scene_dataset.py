import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from actnerf.blender import TransformsParseError, load_blender_transforms, save_blender_transforms
from actnerf.imageio import read_image, write_image, write_png
from actnerf.scene import (
    AnalyticScene,
    Box,
    Camera,
    Slab,
    Sphere,
    analytic_render,
    camera_rays,
    look_at,
    make_dataset,
    orbit_cameras,
    ray_for_pixel,
    tri_sphere_scene,
)


def test_center_pixel_looks_down_minus_z():
    cam = Camera(4, 4, 2.0, np.eye(4))
    # pixel (2, 2) has its centre at (2.5, 2.5); the exact centre is at the
    # corner shared by pixels 1 and 2, so test the image-centre direction
    d = cam.directions(np.array([2.0]), np.array([2.0]))
    np.testing.assert_allclose(d, [[0, 0, -1]])
    odd = Camera(5, 5, 2.0, np.eye(4))
    np.testing.assert_allclose(ray_for_pixel(odd, 2, 2).directions, [[0, 0, -1]], atol=1e-7)


def test_corner_pixel_geometry_fov90():
    w = h = 2
    cam = Camera.from_fov(w, h, np.pi / 2, np.eye(4))
    assert cam.focal == pytest.approx(1.0)
    d = ray_for_pixel(cam, 0, 0).directions[0]
    # centre of pixel (0, 0) sits at (-0.5, +0.5) in focal units
    np.testing.assert_allclose(d, np.array([-0.5, 0.5, -1.0]) / np.sqrt(1.5), atol=1e-7)
    d = cam.directions(np.array([0.0]), np.array([0.0]))[0]
    np.testing.assert_allclose(d, np.array([-1.0, 1.0, -1.0]) / np.sqrt(3), atol=1e-12)


def test_all_directions_unit():
    cam = orbit_cameras(3, 17, 9)[1]
    r = camera_rays(cam, 2, 6, supersample=2)
    assert len(r) == 17 * 9 * 4
    np.testing.assert_allclose(np.linalg.norm(r.directions, axis=-1), 1.0, atol=1e-6)


def test_camera_validation():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(4, 4, 1.0, bad)
    with pytest.raises(ValueError):
        Camera(4, 4, 0.0, np.eye(4))
    with pytest.raises(IndexError):
        ray_for_pixel(Camera(4, 4, 1.0, np.eye(4)), 4, 0)


def test_look_at_points_camera_at_target():
    c2w = look_at([3.0, 1.0, 2.0])
    cam = Camera(8, 8, 4.0, c2w)
    d = cam.directions(np.array([4.0]), np.array([4.0]))[0]
    to_origin = -c2w[:3, 3] / np.linalg.norm(c2w[:3, 3])
    np.testing.assert_allclose(d, to_origin, atol=1e-12)


def test_empty_scene_is_background():
    cam = Camera(6, 4, 5.0, look_at([0, -4, 0]))
    img = analytic_render(AnalyticScene([], (0.2, 0.4, 0.6)), cam)
    np.testing.assert_allclose(img, np.broadcast_to([0.2, 0.4, 0.6], (4, 6, 3)))


def test_ln2_slab_red_half():
    scene = AnalyticScene([Slab((0, 0, 1.0), -0.5, 0.5, np.log(2), (1.0, 0.0, 0.0))], (0.0, 0.0, 0.0))
    cam = Camera(3, 3, 100.0, look_at([0, 0, 4.0], up=(0, 1.0, 0)))
    rays = camera_rays(cam, 2, 6)
    rgb, alpha = scene.render_rays(rays[4:5])
    np.testing.assert_allclose(rgb, [[0.5, 0.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(alpha, [0.5])


def test_supersampling_invariant_on_interior():
    # a camera inside a huge box sees exactly the same medium through every sub-ray
    scene = AnalyticScene([Box((-50, -50, -50), (50, 50, 50), 0.3, (0.3, 0.7, 0.1))], (1.0, 1.0, 1.0))
    cam = Camera(6, 6, 6.0, look_at([0, -4, 0]))
    a = analytic_render(scene, cam, 1)
    b = analytic_render(scene, cam, 2)
    assert np.abs(a - b).max() < 1e-6


def test_analytic_render_deterministic():
    cam = orbit_cameras(4, 16, 16)[2]
    s = tri_sphere_scene()
    assert np.array_equal(analytic_render(s, cam, 2), analytic_render(s, cam, 2))


def test_scene_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        AnalyticScene([Sphere((0, 0, 0), 1.0, -1.0, (1, 1, 1))])
    with pytest.raises(ValueError):
        AnalyticScene([Sphere((0, 0, 0), 1.0, 1.0, (1.5, 1, 1))])
    s = tri_sphere_scene()
    s.primitives.append(Box((-1, -1, -1), (-0.9, -0.9, -0.9), 2.0, (0.5, 0.5, 0.5)))
    s.primitives.append(Slab((0, 1, 0), 0.1, 0.2, 1.0, (0.1, 0.2, 0.3)))
    s.save(tmp_path / "scene.json")
    assert AnalyticScene.load(tmp_path / "scene.json") == s


def test_dataset_splits_disjoint_and_seeded():
    a = make_dataset(tri_sphere_scene(), 6, 2, 2, 8, 8, seed=3, supersample=1)
    b = make_dataset(tri_sphere_scene(), 6, 2, 2, 8, 8, seed=3, supersample=1)
    sets = [set(a.splits[k].tolist()) for k in ("train", "val", "test")]
    assert sets[0].isdisjoint(sets[1]) and sets[0].isdisjoint(sets[2]) and sets[1].isdisjoint(sets[2])
    assert set().union(*sets) == set(range(10))
    assert all(np.array_equal(a.splits[k], b.splits[k]) for k in a.splits)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_blender_minimal_focal(tmp_path):
    write_png(tmp_path / "f0.png", np.zeros((10, 100, 3)))
    (tmp_path / "transforms.json").write_text(
        json.dumps({"camera_angle_x": np.pi / 2, "frames": [{"file_path": "f0", "transform_matrix": np.eye(4).tolist()}]})
    )
    ds = load_blender_transforms(tmp_path / "transforms.json")
    assert ds.cameras[0].focal == pytest.approx(50.0)
    assert (ds.near, ds.far) == (2.0, 6.0)
    assert len(load_blender_transforms(tmp_path).split("train")[0]) == 1


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"frames": []}, "camera_angle_x"),
        ({"camera_angle_x": 0.7}, "frames"),
        ({"camera_angle_x": 0.7, "frames": [{"file_path": "x"}]}, "transform_matrix"),
        ({"camera_angle_x": 0.7, "frames": [{"transform_matrix": np.eye(4).tolist()}]}, "file_path"),
    ],
)
def test_blender_missing_fields_named(tmp_path, doc, field):
    p = tmp_path / "transforms.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(TransformsParseError, match=field):
        load_blender_transforms(p)


def test_blender_empty_frames(tmp_path):
    p = tmp_path / "transforms.json"
    p.write_text(json.dumps({"camera_angle_x": 0.7, "frames": []}))
    with pytest.raises(TransformsParseError, match="empty"):
        load_blender_transforms(p)


def test_blender_reorthonormalizes_with_warning(tmp_path):
    write_png(tmp_path / "f0.png", np.zeros((4, 4, 3)))
    m = np.eye(4)
    m[:3, :3] *= 1.01
    (tmp_path / "transforms.json").write_text(
        json.dumps({"camera_angle_x": 0.7, "frames": [{"file_path": "f0.png", "transform_matrix": m.tolist()}]})
    )
    with pytest.warns(UserWarning, match="orthonormal"):
        ds = load_blender_transforms(tmp_path)
    r = ds.cameras[0].c2w[:3, :3]
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)


def test_blender_round_trip_rays(tmp_path):
    ds = make_dataset(tri_sphere_scene(), 4, 1, 2, 12, 10, seed=1, supersample=1)
    save_blender_transforms(ds, tmp_path)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = load_blender_transforms(tmp_path)
    for split in ("train", "val", "test"):
        c0, i0 = ds.split(split)
        c1, i1 = back.split(split)
        assert len(c0) == len(c1)
        np.testing.assert_array_equal(i0, i1)
        for a, b in zip(c0, c1):
            ra, rb = camera_rays(a, 2, 6), camera_rays(b, 2, 6)
            np.testing.assert_allclose(ra.origins, rb.origins, atol=1e-6)
            np.testing.assert_allclose(ra.directions, rb.directions, atol=1e-6)


def test_png_rgba_and_ppm(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    alpha = np.zeros((5, 7))
    write_png(tmp_path / "a.png", img, alpha)
    np.testing.assert_allclose(read_image(tmp_path / "a.png", (1.0, 1.0, 1.0)), 1.0)
    write_image(tmp_path / "b.ppm", img)
    raw = (tmp_path / "b.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == len(b"P6\n7 5\n255\n") + 5 * 7 * 3
    write_image(tmp_path / "c.png", img)
    np.testing.assert_allclose(read_image(tmp_path / "c.png"), img, atol=0.5 / 255 + 1e-7)


@given(st.integers(2, 12), st.integers(2, 12), st.floats(0.2, 2.5))
def test_focal_fov_round_trip(w, h, fov):
    cam = Camera.from_fov(w, h, fov, np.eye(4))
    assert cam.fov_x == pytest.approx(fov)
