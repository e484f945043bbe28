import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headgrow.errors import EmptyRegion, NoValidPixels, SolverDivergence
from headgrow.fields import NormalField
from headgrow.integrate import (
    BoundaryConstraint,
    build_gradient_system,
    integrate_normals,
    make_blend_mask,
    objective,
)


def field_from(normals, valid=None):
    return NormalField.from_normals(normals, valid)


def plane_field(a, b, shape=(256, 256)):
    """Plane z = a*x + b*y (x right, y up): normal proportional to (-a, -b, 1)."""
    n = np.broadcast_to(np.array([-a, -b, 1.0]) / np.sqrt(a * a + b * b + 1), shape + (3,)).copy()
    h, w = shape
    rows, cols = np.mgrid[:h, :w]
    z = a * (cols - (w - 1) / 2) + b * ((h - 1) / 2 - rows)
    return field_from(n), z


def hemisphere(r, shape=(256, 256)):
    h, w = shape
    rows, cols = np.mgrid[:h, :w]
    x, y = cols - (w - 1) / 2, (h - 1) / 2 - rows
    inside = x**2 + y**2 < r * r
    z = np.sqrt(np.clip(r * r - x**2 - y**2, 0, None))
    n = np.stack([x, y, z], -1) / r
    n[~inside] = 0.0
    return field_from(n, inside), z, inside


def discrete_field(z_ext):
    """Normals whose forward differences reproduce ``z_ext`` exactly (last row/col dropped)."""
    dzdx = z_ext[:-1, 1:] - z_ext[:-1, :-1]
    dz_down = z_ext[1:, :-1] - z_ext[:-1, :-1]
    # row index grows downward while y grows upward: the y slope is -dz_down
    n = np.stack([-dzdx, dz_down, np.ones_like(dzdx)], -1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return field_from(n), z_ext[:-1, :-1]


# --- gradient system ------------------------------------------------------------


def test_flat_field_has_zero_rhs():
    sys_ = build_gradient_system(field_from(np.tile([0.0, 0.0, 1.0], (8, 9, 1))))
    assert sys_.M.shape[0] > 0
    assert np.all(sys_.v == 0)


def test_plane_rows_demand_slope_a():
    a, b = 0.3, -0.2
    f, z = plane_field(a, b, (12, 14))
    sys_ = build_gradient_system(f)
    M = sys_.M.tocsr()
    x_rows = 0
    for i in range(M.shape[0]):
        cols = M.indices[M.indptr[i] : M.indptr[i + 1]]
        vals = M.data[M.indptr[i] : M.indptr[i + 1]]
        (r0, c0), (r1, c1) = sys_.pixels[cols]
        if r0 == r1:  # horizontal neighbours: coefficient * (z_right - z_left) = v
            right = vals[np.argmax(sys_.pixels[cols][:, 1])]
            assert sys_.v[i] / right == pytest.approx(a, abs=1e-12)
            x_rows += 1
    assert x_rows == 12 * 13
    zc = z[sys_.pixels[:, 0], sys_.pixels[:, 1]]
    np.testing.assert_allclose(M @ zc, sys_.v, atol=1e-12)


def test_grazing_pixel_uses_tangency_row():
    n = np.tile([0.0, 0.0, 1.0], (5, 5, 1))
    n[2, 2] = [np.sqrt(1 - 0.01**2), 0.0, 0.01]
    sys_ = build_gradient_system(field_from(n))
    assert sys_.degenerate_rows == 1
    nnz = np.diff(sys_.M.tocsr().indptr)
    assert nnz.max() == 3 and (nnz == 3).sum() == 1
    k = np.flatnonzero(nnz == 3)[0]
    assert sys_.v[k] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_system_shape_and_nullspace(seed):
    r = np.random.default_rng(seed)
    n = r.normal(size=(10, 11, 3))
    n[..., 2] = np.abs(n[..., 2])
    valid = r.random((10, 11)) > 0.2
    sys_ = build_gradient_system(field_from(n / np.linalg.norm(n, axis=-1, keepdims=True), valid))
    p = int(valid.sum())
    assert sys_.M.shape[1] == p and sys_.M.shape[0] <= 2 * p
    assert np.diff(sys_.M.tocsr().indptr).max(initial=0) <= 3
    np.testing.assert_allclose(sys_.M @ np.ones(p), 0.0, atol=1e-12)


def test_no_valid_pixels():
    with pytest.raises(NoValidPixels):
        build_gradient_system(field_from(np.zeros((4, 4, 3)), np.zeros((4, 4), bool)))


# --- integration oracles --------------------------------------------------------


def test_flat_field_integrates_to_zero():
    d = integrate_normals(field_from(np.tile([0.0, 0.0, 1.0], (16, 16, 1))))
    assert np.abs(d.depth).max() < 1e-12
    assert d.valid.all()


def test_plane_oracle_256():
    f, z = plane_field(0.37, -0.21)
    t0 = time.perf_counter()
    d = integrate_normals(f)
    assert time.perf_counter() - t0 < 30
    err = d.depth - z
    assert np.abs(err - err.mean()).max() < 1e-5


def test_hemisphere_oracle_256():
    r = 120.0
    f, z, inside = hemisphere(r)
    t0 = time.perf_counter()
    d = integrate_normals(f)
    assert time.perf_counter() - t0 < 30
    keep = inside & (f.normals[..., 2] >= 0.05)
    err = d.depth[keep] - z[keep]
    rmse = np.sqrt(np.mean((err - err.mean()) ** 2))
    assert rmse < 0.01 * r


def test_sign_flag_mirrors_x_slope():
    f, z = plane_field(0.25, 0.0, (10, 10))
    d = integrate_normals(f, sign=+1.0)
    assert np.allclose(np.diff(d.depth, axis=1), -0.25)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_exact_consistency_on_integrable_fields(seed):
    r = np.random.default_rng(seed)
    h, w = 14, 17
    rows, cols = np.mgrid[: h + 1, : w + 1] / 10.0
    c = r.normal(scale=0.8, size=6)
    z_ext = c[0] * cols + c[1] * rows + c[2] * cols * rows + c[3] * np.sin(2 * cols) + c[4] * rows**2 + c[5]
    f, z = discrete_field(z_ext)
    assert np.abs(f.normals[..., 2]).min() >= 0.05
    sys_ = build_gradient_system(f)
    d = integrate_normals(f, system=sys_)
    assert sys_.residual(d.depth[sys_.pixels[:, 0], sys_.pixels[:, 1]]) < 1e-8
    err = d.depth - z
    assert np.abs(err - err.mean()).max() < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_gauge_freedom(seed, c):
    r = np.random.default_rng(seed)
    n = r.normal(size=(9, 9, 3))
    n[..., 2] = np.abs(n[..., 2]) + 0.5
    f = field_from(n / np.linalg.norm(n, axis=-1, keepdims=True))
    sys_ = build_gradient_system(f)
    z = integrate_normals(f, system=sys_).depth[sys_.pixels[:, 0], sys_.pixels[:, 1]]
    assert sys_.residual(z + c) == pytest.approx(sys_.residual(z), rel=1e-9, abs=1e-9)
    assert abs(z.mean()) < 1e-9


# --- Dirichlet blend ------------------------------------------------------------


def test_flat_field_with_left_edge_fixed():
    f = field_from(np.tile([0.0, 0.0, 1.0], (12, 15, 1)))
    z0 = np.full((12, 15), np.nan)
    z0[:, 0] = 5.0
    wts = np.zeros((12, 15))
    wts[:, 0] = 1.0
    d = integrate_normals(f, BoundaryConstraint(z0, wts))
    np.testing.assert_allclose(d.depth, 5.0, atol=1e-8)


def test_dirichlet_dominance():
    """Deviation from z0 on the constrained region shrinks as the weight grows."""
    f, z, inside = hemisphere(12.0, (32, 32))
    region = np.zeros((32, 32), bool)
    region[:, :10] = True
    z0 = np.where(region, 3.0, np.nan)
    devs = []
    for wv in (0.01, 0.1, 0.5, 1.0):
        d = integrate_normals(f, BoundaryConstraint(z0, np.where(region, wv, 0.0)))
        m = region & d.valid
        devs.append(np.sqrt(np.mean((d.depth[m] - 3.0) ** 2)))
    assert all(b < a for a, b in zip(devs, devs[1:]))


def test_warm_start_does_not_increase_objective():
    f, z, inside = hemisphere(12.0, (32, 32))
    bc = BoundaryConstraint(np.where(inside, z + 1.0, np.nan), np.where(inside, 0.3, 0.0))
    sys_ = build_gradient_system(f)
    d1 = integrate_normals(f, bc, system=sys_)
    d2 = integrate_normals(f, bc, x0=d1.depth, system=sys_)
    assert objective(sys_, d2.depth, bc) <= objective(sys_, d1.depth, bc) * (1 + 1e-12) + 1e-12
    cold = integrate_normals(f, bc, x0=np.full((32, 32), 40.0), system=sys_)
    np.testing.assert_allclose(cold.depth, d1.depth, atol=1e-6)


def test_weights_require_defined_reference():
    with pytest.raises(ValueError):
        BoundaryConstraint(np.full((3, 3), np.nan), np.ones((3, 3)))


def test_unanchored_pieces_can_be_dropped():
    n = np.tile([0.0, 0.0, 1.0], (6, 9, 1))
    valid = np.ones((6, 9), bool)
    valid[:, 4] = False  # two disconnected halves
    f = field_from(n, valid)
    z0 = np.where(np.arange(9)[None, :] < 4, 2.0, np.nan) * np.ones((6, 1))
    wts = np.where(np.isfinite(z0), 1.0, 0.0)
    d = integrate_normals(f, BoundaryConstraint(z0, wts), drop_unanchored=True)
    assert d.valid[:, :4].all() and not d.valid[:, 5:].any()
    kept = integrate_normals(f, BoundaryConstraint(z0, wts))
    assert kept.valid[:, 5:].all() and np.allclose(kept.depth[:, 5:], 0.0)


def test_unreachable_tolerance_reports_divergence():
    f, _, _ = hemisphere(10.0, (24, 24))
    with pytest.raises(SolverDivergence):
        integrate_normals(f, tol=0.0)


# --- blend mask ------------------------------------------------------------------


def brute_distance(region):
    """Distance from every region pixel to the nearest non-region pixel, by enumeration."""
    out_pts = np.argwhere(~region)
    d = np.zeros(region.shape)
    if len(out_pts) == 0:
        d[region] = np.inf
        return d
    for r, c in np.argwhere(region):
        d[r, c] = np.sqrt(((out_pts - [r, c]) ** 2).sum(1)).min()
    return d


def test_band_zero_gives_indicator():
    region = np.zeros((10, 10), bool)
    region[2:7, 3:9] = True
    np.testing.assert_array_equal(make_blend_mask(region, 0), region.astype(float))


def test_half_plane_ramp():
    region = np.zeros((20, 40), bool)
    region[:, 15:] = True
    W = make_blend_mask(region, 10)
    expected = np.zeros(40)
    depth_in = np.arange(40) - 14  # 1 for the first region column
    expected[15:] = np.minimum(1.0, depth_in[15:] / 10.0)
    for row in W:
        np.testing.assert_allclose(row, expected, atol=1e-12)


def test_full_image_region():
    np.testing.assert_array_equal(make_blend_mask(np.ones((8, 8), bool), 10), 1.0)


def test_empty_region():
    with pytest.raises(EmptyRegion):
        make_blend_mask(np.zeros((5, 5), bool), 10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 8.0))
def test_blend_mask_matches_brute_force(seed, band):
    r = np.random.default_rng(seed)
    region = np.zeros((14, 14), bool)
    for _ in range(3):
        r0, c0 = r.integers(0, 10, 2)
        region[r0 : r0 + r.integers(2, 9), c0 : c0 + r.integers(2, 9)] = True
    if region.all():
        return
    W = make_blend_mask(region, band)
    d = brute_distance(region)
    np.testing.assert_allclose(W, np.where(region, np.minimum(1.0, d / band), 0.0), atol=1e-12)
    # monotone in distance from the region edge, zero outside
    order = np.argsort(d[region], kind="stable")
    assert np.all(np.diff(W[region][order]) >= -1e-12)
    assert np.all(W[~region] == 0) and W.max() <= 1.0
