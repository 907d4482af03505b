import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from facthash.renderer import Camera, look_at
from facthash.scenedata import (
    AnalyticScene,
    Dataset,
    ImageMissingError,
    MalformedPoseError,
    ManifestMissingError,
    Primitive,
    build_dataset,
    desk_scene,
    generate_scene,
    load_dataset,
    load_depth_png,
    oracle_render,
    orbit_cameras,
    save_depth_png,
    subsample_views,
    write_dataset,
)

import oracles


def _write_manifest(root, frames, fov=math.pi / 2):
    with open(os.path.join(root, "transforms_train.json"), "w") as fh:
        json.dump({"camera_angle_x": fov, "frames": frames}, fh)


def _png(root, name, w=8, h=6, mode="RGB"):
    os.makedirs(os.path.join(root, "train"), exist_ok=True)
    arr = np.zeros((h, w, len(mode)), dtype=np.uint8)
    Image.fromarray(arr, mode).save(os.path.join(root, "train", name + ".png"))


def test_identity_pose_frame(tmp_path):
    _png(tmp_path, "r_0")
    _write_manifest(tmp_path, [{"file_path": "./train/r_0", "transform_matrix": np.eye(4).tolist()}])
    ds = load_dataset(str(tmp_path))
    assert len(ds) == 1
    np.testing.assert_array_equal(ds.cameras[0].c2w[:3, :3], np.eye(3))


def test_fov_to_focal(tmp_path):
    _png(tmp_path, "r_0", w=800, h=800)
    _write_manifest(tmp_path, [{"file_path": "./train/r_0", "transform_matrix": np.eye(4).tolist()}])
    assert load_dataset(str(tmp_path)).cameras[0].fx == pytest.approx(400.0)


def test_alpha_composited_on_background(tmp_path):
    os.makedirs(tmp_path / "train")
    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    rgba[..., 0] = 255
    rgba[0, 0, 3] = 255
    Image.fromarray(rgba, "RGBA").save(tmp_path / "train" / "r_0.png")
    _write_manifest(tmp_path, [{"file_path": "./train/r_0", "transform_matrix": np.eye(4).tolist()}])
    img = load_dataset(str(tmp_path), background=(0.0, 0.0, 1.0)).images[0]
    np.testing.assert_allclose(img[0, 0], [1, 0, 0])
    np.testing.assert_allclose(img[1, 1], [0, 0, 1])


def test_distinct_loader_errors(tmp_path):
    with pytest.raises(ManifestMissingError):
        load_dataset(str(tmp_path))
    bad = np.eye(4)
    bad[0, 1] = 0.3
    _png(tmp_path, "r_0")
    _write_manifest(tmp_path, [{"file_path": "./train/r_0", "transform_matrix": bad.tolist()}])
    with pytest.raises(MalformedPoseError):
        load_dataset(str(tmp_path))
    _write_manifest(tmp_path, [{"file_path": "./train/r_9", "transform_matrix": np.eye(4).tolist()}])
    with pytest.raises(ImageMissingError):
        load_dataset(str(tmp_path))
    assert len({ManifestMissingError, MalformedPoseError, ImageMissingError}) == 3


def test_generate_write_load_round_trip(tmp_path):
    scene = desk_scene()
    cams = orbit_cameras(3, 3.0, 0.69, 16, 12)
    ds = build_dataset(scene, cams, "train", 0.02, 0.69)
    write_dataset(ds, str(tmp_path))
    back = load_dataset(str(tmp_path), "train")
    assert len(back) == 3
    for a, b in zip(ds.cameras, back.cameras):
        np.testing.assert_allclose(a.c2w, b.c2w, atol=1e-6)
        assert abs(a.fx - b.fx) < 1e-6 and abs(a.fy - b.fy) < 1e-6
    for a, b in zip(ds.images, back.images):
        assert np.array_equal(a, b)
    np.testing.assert_array_equal(back.aabb, scene.aabb)


def test_depth_png_round_trip(tmp_path):
    d = np.random.default_rng(0).uniform(0, 6, size=(5, 7))
    save_depth_png(str(tmp_path / "d.png"), d)
    np.testing.assert_allclose(load_depth_png(str(tmp_path / "d.png")), d, atol=0.5e-3 + 1e-12)


def test_dataset_rejects_mixed_sizes():
    cam = Camera.from_fov(0.7, 4, 4, np.eye(4))
    with pytest.raises(ValueError):
        Dataset([cam, cam], [np.zeros((4, 4, 3)), np.zeros((5, 4, 3))], "train", np.zeros((2, 3)))


# ---------------------------------------------------------------- scenes


def test_generate_scene_deterministic():
    spec = [{}] * 5
    a = generate_scene(spec, 7)
    b = generate_scene(spec, 7)
    assert a.to_dict() == b.to_dict()
    assert generate_scene(spec, 8).to_dict() != a.to_dict()


def test_single_centered_sphere():
    s = generate_scene([{"kind": "sphere", "center": (0, 0, 0)}], 0)
    assert len(s.primitives) == 1
    assert s.primitives[0].kind == "sphere"
    np.testing.assert_array_equal(s.primitives[0].center, 0.0)


def test_empty_spec_rejected():
    with pytest.raises(ValueError):
        generate_scene([], 0)


@given(st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_ten_primitives_inside_aabb(seed):
    s = generate_scene([{}] * 10, seed)
    assert len(s.primitives) == 10
    for p in s.primitives:
        lo, hi = p.bounds()
        assert (lo >= s.aabb[0] - 1e-12).all() and (hi <= s.aabb[1] + 1e-12).all()
        assert p.density >= 0 and (p.size > 0).all()


def test_scene_dict_round_trip():
    s = desk_scene()
    assert AnalyticScene.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()


# ---------------------------------------------------------------- oracle renders


def test_empty_scene_pure_background():
    s = AnalyticScene([], background=(0.2, 0.3, 0.4))
    cam = Camera.from_fov(0.7, 10, 8, look_at([0, 0, 3.0]))
    rgb, depth = oracle_render(s, cam, 0.01)
    assert np.array_equal(rgb, np.broadcast_to([0.2, 0.3, 0.4], rgb.shape))
    assert depth.max() == 0.0


def test_opaque_sphere_footprint():
    albedo = np.array([0.9, 0.3, 0.1])
    s = AnalyticScene([Primitive("sphere", (0, 0, 0), 0.6, albedo, 1e4)])
    cam = Camera(30.0, 30.0, 20, 20, 40, 40, look_at([0, 0, 3.0], up=(0, 1, 0)))
    rgb, depth = oracle_render(s, cam, 0.005)
    from facthash.renderer import all_pixels, generate_rays
    o, d = generate_rays(cam, all_pixels(cam))
    hits = np.array([oracles.sphere_ray_interval(oi, di, np.zeros(3), 0.6) for oi, di in zip(o, d)], dtype=object)
    for k, iv in enumerate(hits):
        y, x = divmod(k, 40)
        if iv is None:
            np.testing.assert_allclose(rgb[y, x], 1.0)
        elif iv[1] - iv[0] > 0.05:  # away from the silhouette the disk is fully opaque
            np.testing.assert_allclose(rgb[y, x], albedo, atol=1e-6)
            assert abs(depth[y, x] - iv[0]) < 0.01
    corners = rgb[[0, 0, -1, -1], [0, -1, 0, -1]]
    np.testing.assert_allclose(corners, 1.0)


def test_oracle_step_converged():
    scene = desk_scene()
    cam = orbit_cameras(1, 3.0, 0.69, 32, 32)[0]
    a, _ = oracle_render(scene, cam, 0.0085)
    b, _ = oracle_render(scene, cam, 0.0085 / 2)
    assert np.abs(a - b).max() < 1 / 255


def test_oracle_deterministic():
    scene = desk_scene()
    cam = orbit_cameras(2, 3.0, 0.69, 16, 16)[1]
    assert np.array_equal(oracle_render(scene, cam, 0.01)[0], oracle_render(scene, cam, 0.01)[0])


# ---------------------------------------------------------------- few-shot subsets


def _fake(n):
    cam = Camera.from_fov(0.7, 2, 2, np.eye(4))
    return Dataset([cam] * n, [np.full((2, 2, 3), i / n) for i in range(n)], "train", np.zeros((2, 3)),
                   0.7, [f"v{i}" for i in range(n)])


def test_subsample_examples():
    ds = _fake(100)
    assert subsample_views(ds, 100).names == ds.names
    assert subsample_views(ds, 1).names == ["v0"]
    assert subsample_views(ds, 8).names == [f"v{i}" for i in (0, 12, 25, 37, 50, 62, 75, 87)]


@pytest.mark.parametrize("count", [0, 101])
def test_subsample_out_of_range(count):
    with pytest.raises(ValueError):
        subsample_views(_fake(100), count)


@given(st.integers(1, 60), st.data())
@settings(max_examples=60, deadline=None)
def test_subsample_is_ordered_subset(n, data):
    count = data.draw(st.integers(1, n))
    names = subsample_views(_fake(n), count).names
    idx = [int(s[1:]) for s in names]
    assert len(idx) == count and idx == sorted(set(idx)) and all(0 <= i < n for i in idx)
