import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headgrow.errors import EmptyProjection, IoError
from headgrow.geometry import Pose
from headgrow.imageio import read_float_image
from headgrow.mesh import HeadMesh
from headgrow.synth import (
    Light,
    SyntheticScene,
    make_dataset,
    make_scene,
    render_lambertian,
    render_mesh_geometry,
    sample_lights,
    shade,
    uv_sphere,
)

R = 20.0  # sphere radius in pixels


def sphere_scene(light, albedo=1.0):
    return SyntheticScene(uv_sphere(1.0, 96, 192), [light], poses=(0,), image_size=(48, 48), albedo=albedo, pixels_per_unit=R)


def analytic_sphere(shape=(48, 48)):
    """Camera-frame sphere of radius R centred on the image: (inside, nx, ny, nz, z)."""
    h, w = shape
    cx, cy = (w - 1) / 2, (h - 1) / 2
    rows, cols = np.mgrid[:h, :w]
    x, y = cols - cx, cy - rows
    rho2 = x**2 + y**2
    inside = rho2 < R**2
    z = np.sqrt(np.clip(R**2 - rho2, 0, None))
    return inside, x / R, y / R, z / R, z


def test_sphere_frontal_light_follows_lambert():
    photo, normals, depth = render_lambertian(sphere_scene(Light((0.0, 0.0, 1.0), 1.0, 0.0)), 0, 0)
    inside, _, _, nz, _ = analytic_sphere()
    # 48x48 has no exact centre pixel; the four central pixels sit 0.7 px off-centre
    assert photo.pixels[23:25, 23:25].min() >= 254
    core = inside & (nz > 0.3)
    assert np.abs(photo.pixels[core] - 255 * nz[core]).max() <= 2.0


def test_ambient_only_light():
    a, albedo = 0.3, 0.7
    photo, _, _ = render_lambertian(sphere_scene(Light((1.0, 0.0, 0.0), 0.0, a), albedo), 0, 0)
    cov = photo.mask
    assert cov.sum() > 1000
    assert np.all(photo.pixels[cov] == np.rint(255 * albedo * a))


def test_sphere_depth_matches_analytic():
    _, normals, depth = render_lambertian(sphere_scene(Light((0.0, 0.0, 1.0), 1.0, 0.0)), 0, 0)
    inside, nx, ny, nz, z = analytic_sphere()
    both = inside & depth.valid
    assert both.sum() > 0.97 * inside.sum()
    assert np.abs(depth.depth[both] - z[both]).max() < 0.5
    interior = both & (nz > 0.2)
    ang = np.degrees(np.arccos(np.clip((normals.normals[interior] * np.stack([nx, ny, nz], -1)[interior]).sum(-1), -1, 1)))
    assert ang.max() < 2.0


def test_gt_normals_are_unit_length():
    scene = make_scene(n_lights=2, image_size=(48, 48), poses=(0, 60))
    for az in (0, 60):
        _, normals, _ = render_lambertian(scene, az, 1)
        nn = np.linalg.norm(normals.normals[normals.valid], axis=-1)
        np.testing.assert_allclose(nn, 1.0, atol=1e-9)


def _two_planes(near_first):
    quad = np.array([[-10.0, -10.0], [10.0, -10.0], [10.0, 10.0], [-10.0, 10.0]])
    verts, faces = [], []
    for k, z in enumerate((5.0, 0.0) if near_first else (0.0, 5.0)):
        verts.extend([[x, y, z] for x, y in quad])
        o = 4 * k
        faces.extend([[o, o + 1, o + 2], [o, o + 2, o + 3]])
    return HeadMesh(np.array(verts), np.array(faces))


@pytest.mark.parametrize("near_first", [True, False])
def test_zbuffer_keeps_nearer_plane(near_first):
    geo = render_mesh_geometry(_two_planes(near_first), Pose(), (32, 32))
    cov = geo.covered
    assert cov.sum() >= 19 * 19
    np.testing.assert_allclose(geo.depth[cov], 5.0, atol=1e-9)
    np.testing.assert_allclose(geo.normals[cov], np.tile([0.0, 0.0, 1.0], (cov.sum(), 1)), atol=1e-9)


def test_empty_projection():
    mesh = HeadMesh(np.array([[100.0, 100.0, 0], [101.0, 100.0, 0], [100.0, 101.0, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(EmptyProjection):
        render_mesh_geometry(mesh, Pose(), (16, 16))


def test_intensity_bound():
    scene = make_scene(n_lights=20, image_size=(48, 48), poses=(0,), ambient=0.3, intensity=0.9, albedo=0.6)
    for k in range(20):
        photo, _, _ = render_lambertian(scene, 0, k)
        assert photo.pixels.max() <= np.rint(255 * 0.6 * (0.3 + 0.9))


def test_light_linearity_same_direction():
    d = (0.3, -0.2, np.sqrt(1 - 0.13))
    out = []
    for i in (0.3, 0.45, 0.75):
        photo, _, _ = render_lambertian(sphere_scene(Light(d, i, 0.0), 0.9), 0, 0)
        out.append(photo.pixels)
    assert np.abs(out[0] + out[1] - out[2]).max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_light_linearity_property(seed):
    """Two lights shaded separately sum to the combined light where both are lit."""
    r = np.random.default_rng(seed)
    n = r.normal(size=(200, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    l1, l2 = sample_lights(2, seed, ambient=0.0, intensity=0.4)
    a, b = l1.vector4(), l2.vector4()
    lit = (n @ a[1:] > 0) & (n @ b[1:] > 0)
    alb = np.full(200, 0.9)
    cov = np.ones(200, bool)
    s1 = shade(n, alb, a, cov, quantize=True)
    s2 = shade(n, alb, b, cov, quantize=True)
    s12 = shade(n, alb, a + b, cov, quantize=False)
    assert np.abs(s1 + s2 - s12)[lit].max() <= 1.0


def test_lights_are_unit_and_front_facing():
    lights = sample_lights(500, seed=4)
    d = np.array([lt.direction for lt in lights])
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    assert d[:, 2].min() > 0.2


def test_scene_rejects_non_canonical_pose():
    with pytest.raises(ValueError):
        make_scene(n_lights=1, poses=(0, 45))


def test_dataset_one_light_one_pose(tmp_path):
    path = make_dataset(make_scene(n_lights=1, poses=(0,), image_size=(32, 32)), tmp_path)
    doc = json.loads(path.read_text())
    assert len(doc["photos"]) == 1
    gt = read_float_image(tmp_path / doc["photos"][0]["gt_normals"])
    assert gt.shape == (32, 32, 3)


def test_dataset_full_grid_count(tmp_path):
    path = make_dataset(make_scene(n_lights=100, image_size=(16, 16)), tmp_path)
    doc = json.loads(path.read_text())
    assert len(doc["photos"]) == 700
    assert sorted({e["azimuth"] for e in doc["photos"]}) == [-90, -60, -30, 0, 30, 60, 90]


def test_dataset_same_seed_byte_identical(tmp_path):
    a = make_dataset(make_scene(n_lights=5, image_size=(24, 24), seed=9), tmp_path / "a", workers=1)
    b = make_dataset(make_scene(n_lights=5, image_size=(24, 24), seed=9), tmp_path / "b", workers=3)
    assert a.read_bytes() == b.read_bytes()
    for name in ("images/p+000_l003.png", "gt/depth_p+060.hgf", "template_normals.hgf", "scene.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # the seed drives the light sampling, recorded in scene.json
    make_dataset(make_scene(n_lights=5, image_size=(24, 24), seed=10), tmp_path / "c")
    assert (tmp_path / "c" / "scene.json").read_bytes() != (tmp_path / "a" / "scene.json").read_bytes()


def test_dataset_unwritable_target(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        make_dataset(make_scene(n_lights=1, poses=(0,), image_size=(8, 8)), blocker / "sub")
