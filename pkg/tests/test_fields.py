import numpy as np
import pytest

from dvc.fields import (
    Box,
    Capsule,
    Cylinder,
    Difference,
    EmptySet,
    GridField,
    NoConvergence,
    Sphere,
    Torus,
    TorusSegment,
    TransformedField,
    Union,
    ZeroUnion,
    chamfer_l1,
    eval_gradient,
    eval_sdf,
    grid_from_field,
    occupancy_iou,
    project_to_surface,
    rigid_transform_field,
    sample_surface_points,
)
from dvc.geometry import Pose
from dvc.objects import ObjectSpec, make_mug, random_mug_spec, scaled_spec


# --- independent point-classification oracle (containment + boolean logic) ---

def mug_inside_oracle(spec: ObjectSpec, pts):
    """Inside test for the mug built from per-primitive containment only."""
    s = scaled_spec(spec)
    pts = np.atleast_2d(pts)
    rho = np.hypot(pts[:, 0], pts[:, 1])
    z = pts[:, 2]
    in_outer = (rho <= s.outer_radius) & (np.abs(z) <= 0.5 * s.height)
    cavity_lo = -0.5 * s.height + s.wall
    in_cavity = (rho <= s.outer_radius - s.wall) & (z >= cavity_lo)
    # handle: nearest point on the vertical arc within tube radius
    arc_center_x = (s.outer_radius - 0.5 * s.wall
                    - s.handle_arc_radius * np.cos(0.5 * s.handle_span))
    rel = pts - np.array([arc_center_x, 0.0, s.handle_z_offset])
    # local arc plane coords: (x, z) of the mug frame; plane normal is y
    phi = np.arctan2(rel[:, 2], rel[:, 0])
    phi = np.clip(phi, -0.5 * s.handle_span, 0.5 * s.handle_span)
    nearest = np.stack([s.handle_arc_radius * np.cos(phi),
                        np.zeros(len(pts)),
                        s.handle_arc_radius * np.sin(phi)], axis=1)
    in_handle = np.linalg.norm(rel - nearest, axis=1) <= s.handle_tube_radius
    return (in_outer & ~in_cavity) | in_handle


def test_sphere_values():
    s = Sphere(radius=1.0)
    assert eval_sdf(s, [0.0, 0.0, 2.0]) == pytest.approx(1.0)
    assert eval_sdf(s, [0.0, 0.0, 0.0]) == pytest.approx(-1.0)


def test_mug_sign_matches_classification_oracle():
    rng = np.random.default_rng(0)
    spec = random_mug_spec(3)
    mug = make_mug(spec)
    pts = rng.uniform(-0.16, 0.16, size=(1000, 3))
    d = eval_sdf(mug, pts)
    inside = mug_inside_oracle(spec, pts)
    clear = np.abs(d) > 1e-9  # surface-grazing points are ambiguous
    assert np.array_equal(d[clear] < 0.0, inside[clear])


def test_gradient_radial_on_sphere():
    g = eval_gradient(Sphere(radius=1.0), [0.0, 0.0, 2.0])
    np.testing.assert_allclose(g, [0, 0, 1], atol=1e-12)


@pytest.mark.parametrize("prim", [
    Sphere(radius=0.7),
    Capsule(half_height=0.4, radius=0.2),
    Cylinder(radius=0.5, half_height=0.3),
    Box(half_extents=(0.3, 0.4, 0.5)),
    Torus(major=0.5, minor=0.15),
    TorusSegment(major=0.5, minor=0.15, half_angle=2.0),
])
def test_primitive_gradient_matches_fd(prim):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1.0, 1.0, size=(200, 3))
    # skip points near gradient kinks (axes, corners, caps) of each primitive
    g = eval_gradient(prim, pts)
    h = 1e-6
    fd = np.empty_like(g)
    for i in range(3):
        dp = np.zeros(3)
        dp[i] = h
        fd[:, i] = (eval_sdf(prim, pts + dp) - eval_sdf(prim, pts - dp)) / (2 * h)
    err = np.linalg.norm(g - fd, axis=1)
    smooth = np.linalg.norm(fd, axis=1) > 0.99  # FD magnitude ~1 away from kinks
    assert np.mean(smooth) > 0.8
    assert np.max(err[smooth]) < 1e-6 * 10


def test_transformed_gradient_is_rotated():
    base = Box(half_extents=(0.3, 0.2, 0.5))
    dq = Pose.from_axis_angle([0, 1, 0], 0.7, t=[0.2, -0.1, 0.3])
    f = rigid_transform_field(base, dq)
    p = np.array([0.5, 0.3, 0.9])
    g = eval_gradient(f, p)
    g_base = eval_gradient(base, dq.inverse().apply(p))
    np.testing.assert_allclose(g, dq.rotation_matrix() @ g_base, atol=1e-12)


def test_rigid_transform_identity_and_translation():
    mug = make_mug(ObjectSpec())
    rng = np.random.default_rng(2)
    probes = rng.uniform(-0.2, 0.2, size=(50, 3))
    same = rigid_transform_field(mug, Pose.identity())
    np.testing.assert_allclose(eval_sdf(same, probes), eval_sdf(mug, probes), atol=0)

    moved = rigid_transform_field(Sphere(radius=1.0), Pose.from_translation([1, 0, 0]))
    assert eval_sdf(moved, [1.0, 0.0, 0.0]) == pytest.approx(-1.0)


def test_nested_transforms_compose():
    rng = np.random.default_rng(3)
    f = make_mug(ObjectSpec())
    a = Pose.from_axis_angle(rng.normal(size=3), 0.8, t=rng.normal(size=3) * 0.1)
    b = Pose.from_axis_angle(rng.normal(size=3), -0.5, t=rng.normal(size=3) * 0.1)
    nested = rigid_transform_field(rigid_transform_field(f, b), a)
    direct = rigid_transform_field(f, a.compose(b))
    probes = rng.uniform(-0.3, 0.3, size=(100, 3))
    np.testing.assert_allclose(eval_sdf(nested, probes), eval_sdf(direct, probes),
                               atol=1e-12)


def test_project_to_surface_sphere():
    p = project_to_surface(Sphere(radius=1.0), [0.0, 0.0, 2.0], tol=1e-9)
    np.testing.assert_allclose(p, [0, 0, 1], atol=1e-8)
    q = project_to_surface(Sphere(radius=1.0), [0.0, 0.0, 1.0], tol=1e-9)
    np.testing.assert_allclose(q, [0, 0, 1], atol=1e-12)


def test_project_to_surface_mug_batch():
    mug = make_mug(random_mug_spec(1))
    rng = np.random.default_rng(4)
    probes = rng.uniform(-0.15, 0.15, size=(1000, 3))
    pts = project_to_surface(mug, probes, tol=1e-6)
    assert np.max(np.abs(eval_sdf(mug, pts))) <= 1e-6


def test_sample_surface_points_sphere():
    pts = sample_surface_points(Sphere(radius=1.0), 1000, seed=5)
    r = np.linalg.norm(pts, axis=1)
    np.testing.assert_allclose(r, 1.0, atol=1e-6)
    again = sample_surface_points(Sphere(radius=1.0), 1000, seed=5)
    np.testing.assert_array_equal(pts, again)


def test_sample_surface_points_mean_near_center():
    pts = sample_surface_points(Sphere(radius=1.0), 10000, seed=6)
    assert np.linalg.norm(pts.mean(axis=0)) < 0.05


def test_grid_field_node_exact_and_accurate():
    f = Sphere(radius=1.0)
    grid = grid_from_field(f, [-1.5] * 3, [1.5] * 3, 64)
    # node-exact
    xs = np.linspace(-1.5, 1.5, 64)
    node = np.array([xs[10], xs[20], xs[30]])
    assert grid.distance(node) == pytest.approx(f.distance(node), abs=1e-12)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1.4, 1.4, size=(1000, 3))
    err = np.abs(grid.distance(pts) - f.distance(pts))
    # the SDF is non-smooth at the sphere center; trilinear error is only
    # O(cell^2) away from that skeleton point
    away = np.linalg.norm(pts, axis=1) > 0.25
    assert err[away].max() <= 2e-3
    assert err.max() <= 2e-2
    assert occupancy_iou(grid, f, [-1.5] * 3, [1.5] * 3, 64) >= 0.99


def test_grid_field_roundtrip(tmp_path):
    mug = make_mug(ObjectSpec())
    grid = grid_from_field(mug, [-0.16] * 3, [0.16] * 3, 24)
    path = tmp_path / "mug.dvcf"
    grid.save(path)
    loaded = GridField.load(path)
    np.testing.assert_allclose(loaded.lo, grid.lo)
    np.testing.assert_allclose(loaded.hi, grid.hi)
    np.testing.assert_allclose(loaded.values, grid.values.astype(np.float32), atol=0)


def test_iou_trivial_cases():
    f = Sphere(radius=1.0)
    assert occupancy_iou(f, f, [-1.5] * 3, [1.5] * 3, 50) == pytest.approx(1.0)
    g = Sphere(radius=0.3, pose=Pose.from_translation([5, 0, 0]))
    assert occupancy_iou(f, g, [-1.5] * 3, [1.5] * 3, 50) == 0.0
    with pytest.raises(ZeroUnion):
        occupancy_iou(Sphere(radius=0.1, pose=Pose.from_translation([9, 9, 9])),
                      Sphere(radius=0.1, pose=Pose.from_translation([9, 9, 9])),
                      [-1] * 3, [1] * 3, 20)


def test_iou_matches_lens_volume():
    # two unit spheres offset by d=1: lens volume pi (4R + d)(2R - d)^2 / 12
    a = Sphere(radius=1.0)
    b = Sphere(radius=1.0, pose=Pose.from_translation([1.0, 0, 0]))
    lens = np.pi * (4 + 1) * (2 - 1) ** 2 / 12
    union = 2 * (4 * np.pi / 3) - lens
    expected = lens / union
    got = occupancy_iou(a, b, [-1.5, -1.5, -1.5], [2.5, 1.5, 1.5], 100)
    assert abs(got - expected) < 0.02


def test_chamfer_trivial_and_symmetric():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert chamfer_l1(a, a) == 0.0
    assert chamfer_l1(a, b) == pytest.approx(1.0)
    rng = np.random.default_rng(8)
    A = rng.normal(size=(40, 3))
    B = rng.normal(size=(60, 3))
    assert chamfer_l1(A, B) == pytest.approx(chamfer_l1(B, A), abs=1e-15)
    with pytest.raises(EmptySet):
        chamfer_l1(np.zeros((0, 3)), b)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(50, 3))
    B = rng.normal(size=(70, 3))
    d_ab = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    brute = 0.5 * (d_ab.min(axis=1).mean() + d_ab.min(axis=0).mean())
    assert chamfer_l1(A, B) == pytest.approx(brute, abs=1e-12)


def test_mug_is_hollow_with_handle_hole():
    spec = ObjectSpec()
    s = scaled_spec(spec)
    mug = make_mug(spec)
    # cavity above the floor is outside the solid
    assert eval_sdf(mug, [0.0, 0.0, 0.3 * s.height]) > 0.0
    # inside the wall
    wall_mid = np.array([s.outer_radius - 0.5 * s.wall, 0.0, 0.0])
    assert eval_sdf(mug, wall_mid) < 0.0
    # the gap between handle arc center and the wall contains free space
    arc_center_x = (s.outer_radius - 0.5 * s.wall
                    - s.handle_arc_radius * np.cos(0.5 * s.handle_span))
    arc_center = np.array([arc_center_x, 0.0, s.handle_z_offset])
    ts = np.linspace(0.0, 1.0, 50)[:, None]
    seg = wall_mid * (1 - ts) + arc_center * ts
    assert np.max(eval_sdf(mug, seg)) > s.handle_tube_radius * 0.5


def test_default_mugs_fit_bounding_radius():
    for seed in range(5):
        spec = random_mug_spec(seed)
        mug = make_mug(spec)
        pts = sample_surface_points(mug, 2000, seed=seed)
        r = np.linalg.norm(pts, axis=1).max()
        assert r <= spec.bounding_radius + 1e-6
        assert r >= 0.9 * spec.bounding_radius


def test_project_weak_gradient_raises():
    # midpoint between two equal spheres has a vanishing gradient
    f = Union(children=(Sphere(radius=0.4, pose=Pose.from_translation([-1, 0, 0])),
                        Sphere(radius=0.4, pose=Pose.from_translation([1, 0, 0]))))
    with pytest.raises(NoConvergence):
        project_to_surface(f, [0.0, 0.0, 0.0], tol=1e-9)
