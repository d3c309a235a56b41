"""Dataset generation: sdf samples, antipodal grasp sampling, hang-pose
sampling, the geometric feasibility checkers, and on-disk dataset layout.

Dataset layout (one directory per object):
    spec.txt      key=value object parameters
    views.dvcv    posed channel images
    sdf.bin       f32 points + signed distances
    grasp.poses   raw little-endian f64 rows of 7 (t, quaternion)
    hang.poses    same format
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import Field, eval_gradient, eval_sdf, sample_surface_points, try_project_to_surface
from .geometry import Pose, quat_exp
from .objects import GripperModel, HookModel, ObjectSpec, default_gripper, default_hook, make_mug
from .rendering import PosedImageSet, load_image_set, render_view, sample_view_sphere, save_image_set
from .seeding import child_seed, rng_for


class DataGenError(Exception):
    pass


class SamplingExhausted(DataGenError):
    pass


# ---------------------------------------------------------------------------
# sdf samples
# ---------------------------------------------------------------------------

def sample_sdf_data(f: Field, n: int, seed: int):
    """Surface-biased sdf regression data: 80% jittered surface points (half
    at sigma 0.01 m, half at 0.05 m), 20% uniform in 1.5x the bounding box."""
    rng = np.random.default_rng(seed)
    n_surf = int(0.8 * n)
    n_near = n_surf // 2
    n_far = n_surf - n_near
    n_uni = n - n_surf
    surf = sample_surface_points(f, n_surf, seed=child_seed(seed, "surface"))
    pts = np.concatenate([
        surf[:n_near] + rng.normal(0.0, 0.01, size=(n_near, 3)),
        surf[n_near:] + rng.normal(0.0, 0.05, size=(n_far, 3)),
        _uniform_box(f, n_uni, rng, margin=1.5),
    ])
    return pts, eval_sdf(f, pts)


def _uniform_box(f: Field, n: int, rng, margin=1.5):
    lo, hi = f.bounds()
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * margin
    return center + rng.uniform(-1.0, 1.0, size=(n, 3)) * half


# ---------------------------------------------------------------------------
# grasp feasibility
# ---------------------------------------------------------------------------

FRICTION_CONE_HALF_ANGLE = np.deg2rad(30.0)
CONTACT_MARGIN_LO = -1e-3
CONTACT_MARGIN_HI = 2e-3
APPROACH_CLEARANCE = -1e-3


def _cloud_margins(f: Field, q: Pose, cloud: np.ndarray) -> np.ndarray:
    centers = q.apply(cloud[:, :3])
    return eval_sdf(f, centers) - cloud[:, 3]


def _close_fingers(f: Field, q: Pose, gripper: GripperModel):
    """Symmetric parallel-jaw closing along the gripper x axis.

    Returns (travel, margin1, margin2, idx1, idx2): the first contact travel
    and each finger's closest-sphere margin and index there, or None if the
    fingers never make contact within their travel.
    """
    axis = q.rotation_matrix()[:, 0]  # world closing axis (local +x)

    def margins(travel):
        c1 = q.apply(gripper.finger1[:, :3]) - axis * travel
        c2 = q.apply(gripper.finger2[:, :3]) + axis * travel
        m1 = eval_sdf(f, c1) - gripper.finger1[:, 3]
        m2 = eval_sdf(f, c2) - gripper.finger2[:, 3]
        return m1, m2

    max_travel = 0.5 * gripper.max_opening
    lo, hi = 0.0, max_travel
    m1, m2 = margins(0.0)
    if min(m1.min(), m2.min()) <= 0.0:
        travel = 0.0
    else:
        mh1, mh2 = margins(max_travel)
        if min(mh1.min(), mh2.min()) > 0.0:
            return None  # nothing between the fingers
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            mm1, mm2 = margins(mid)
            if min(mm1.min(), mm2.min()) <= 0.0:
                hi = mid
            else:
                lo = mid
        travel = hi
    m1, m2 = margins(travel)
    return travel, float(m1.min()), float(m2.min()), int(m1.argmin()), int(m2.argmin())


def check_grasp_feasible(f: Field, gripper: GripperModel, q: Pose) -> bool:
    """Geometric stand-in for a physics grasp test: symmetric closing must
    bring both finger pads onto the surface nearly simultaneously (margins in
    [-1, +2] mm), contact normals must oppose the closing axis within the 30
    degree friction cone, and the open gripper must be collision-free."""
    # (c) approach pose collision
    if _cloud_margins(f, q, gripper.cloud()).min() < APPROACH_CLEARANCE:
        return False
    closed = _close_fingers(f, q, gripper)
    if closed is None:
        return False
    travel, m1, m2, i1, i2 = closed
    # (a) both fingers contact within the margin window
    for m in (m1, m2):
        if not (CONTACT_MARGIN_LO <= m <= CONTACT_MARGIN_HI):
            return False
    # (b) contact normals antipodal within the friction cone
    axis = q.rotation_matrix()[:, 0]
    c1 = q.apply(gripper.finger1[i1, :3]) - axis * travel
    c2 = q.apply(gripper.finger2[i2, :3]) + axis * travel
    n1 = eval_gradient(f, c1)
    n2 = eval_gradient(f, c2)
    n1 = n1 / (np.linalg.norm(n1) + 1e-12)
    n2 = n2 / (np.linalg.norm(n2) + 1e-12)
    cone = np.cos(FRICTION_CONE_HALF_ANGLE)
    # finger1 closes along -axis, so its contact normal should point +axis
    if n1 @ axis < cone or n2 @ -axis < cone:
        return False
    return True


def sample_antipodal_grasps(f: Field, gripper: GripperModel, n: int, seed: int,
                            max_attempts_factor: int = 1000):
    """Antipodal scheme: surface point + inward ray to the opposing surface;
    accept when the normals oppose within the cone, the width fits the
    opening, and the resulting pose passes the feasibility checker."""
    rng = np.random.default_rng(seed)
    out = []
    attempts = 0
    max_attempts = max_attempts_factor * n
    cone = np.cos(FRICTION_CONE_HALF_ANGLE)
    while len(out) < n and attempts < max_attempts:
        batch = 64
        attempts += batch
        probes = _uniform_box(f, batch, rng, margin=1.2)
        p1s, ok = try_project_to_surface(f, probes, tol=1e-7)
        for p1 in p1s[ok]:
            n1 = eval_gradient(f, p1)
            nr = np.linalg.norm(n1)
            if nr < 0.5:
                continue
            n1 = n1 / nr
            p2 = _opposing_hit(f, p1, -n1, gripper.max_opening)
            if p2 is None:
                continue
            n2 = eval_gradient(f, p2)
            n2 = n2 / (np.linalg.norm(n2) + 1e-12)
            if n1 @ -n2 < cone:
                continue
            width = np.linalg.norm(p1 - p2)
            if width > gripper.max_opening - 2e-3:
                continue
            center = 0.5 * (p1 + p2)
            x_axis = (p1 - p2) / width
            roll = rng.uniform(0.0, 2.0 * np.pi)
            q = _pose_from_closing_axis(center, x_axis, roll)
            if check_grasp_feasible(f, gripper, q):
                out.append(q)
                if len(out) >= n:
                    break
    if len(out) < n:
        raise SamplingExhausted(
            f"accepted {len(out)}/{n} grasps in {max_attempts} attempts")
    return out


def _opposing_hit(f: Field, p1, direction, max_span, step=5e-4):
    """First surface crossing (inside -> outside) along `direction` from p1."""
    ts = np.arange(step, max_span + step, step)
    pts = p1 + ts[:, None] * direction
    d = eval_sdf(f, pts)
    inside = d < 0.0
    if not np.any(inside):
        return None
    first_in = int(np.argmax(inside))
    after = np.nonzero(~inside & (np.arange(len(d)) > first_in))[0]
    if len(after) == 0:
        return None
    k = int(after[0])
    # bisect the exit crossing between samples k-1 (inside) and k (outside)
    lo, hi = ts[k - 1], ts[k]
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if eval_sdf(f, p1 + mid * direction) < 0.0:
            lo = mid
        else:
            hi = mid
    return p1 + 0.5 * (lo + hi) * direction


def _pose_from_closing_axis(center, x_axis, roll) -> Pose:
    """Gripper pose with local x aligned to `x_axis` and uniform roll about it."""
    ref = np.array([0.0, 0.0, 1.0])
    if abs(x_axis @ ref) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    y = np.cross(ref, x_axis)
    y /= np.linalg.norm(y)
    z = np.cross(x_axis, y)
    R = np.stack([x_axis, y, z], axis=1)
    base = Pose.from_rt(R, center)
    spin = Pose(t=np.zeros(3), q=quat_exp(np.array([roll, 0.0, 0.0])))
    return base.compose(spin)


# ---------------------------------------------------------------------------
# hang feasibility
# ---------------------------------------------------------------------------

TRAP_DIRECTIONS = 36
TRAP_STEP = 2e-3
HOOK_CLEARANCE = 5e-4


def _trap_sweep(f: Field, hook: HookModel, q: Pose, n_dirs: int) -> bool:
    """True iff every one of n_dirs in-plane escape directions is blocked."""
    cloud = hook.axis_cloud()
    R = q.rotation_matrix()
    lo, hi = f.bounds()
    center = 0.5 * (lo + hi)
    escape = (0.5 * np.linalg.norm(hi - lo) + hook.length
              + np.linalg.norm(q.t - center))
    n_steps = int(np.ceil(escape / TRAP_STEP))
    angles = np.linspace(0.0, 2.0 * np.pi, n_dirs, endpoint=False)
    dirs = np.cos(angles)[:, None] * R[:, 0] + np.sin(angles)[:, None] * R[:, 1]
    centers = q.apply(cloud[:, :3])  # (K, 3)
    steps = np.arange(1, n_steps + 1) * TRAP_STEP
    probe = (centers[None, None, :, :]
             + dirs[:, None, None, :] * steps[None, :, None, None])
    d = eval_sdf(f, probe.reshape(-1, 3)).reshape(n_dirs, n_steps, len(cloud))
    margins = d - cloud[:, 3][None, None, :]
    blocked = (margins.min(axis=2) < 0.0).any(axis=1)
    return bool(np.all(blocked))


def check_trapped(f: Field, hook: HookModel, q: Pose) -> bool:
    """True iff the hook is collision-free at q and cannot translate out of
    the object in any direction perpendicular to its axis.

    Sweep: 36 in-plane directions, 2 mm steps, escape radius spanning the
    object extent plus the hook length; a direction is blocked when some
    axis sphere penetrates before the hook escapes."""
    cloud = hook.axis_cloud()
    if _cloud_margins(f, q, cloud).min() < HOOK_CLEARANCE:
        return False
    # a cheap 4-direction sweep rejects most free candidates early
    if not _trap_sweep(f, hook, q, 4):
        return False
    return _trap_sweep(f, hook, q, TRAP_DIRECTIONS)


def sample_hang_poses(f: Field, hook: HookModel, n: int, seed: int,
                      max_attempts_factor: int = 1000,
                      handle_hint=None):
    """Collision-free hook poses that the trap check accepts.

    Proposals mix uniform positions in the bounding box with positions near
    `handle_hint` (when given), which keeps rejection tractable for mugs."""
    rng = np.random.default_rng(seed)
    out = []
    attempts = 0
    max_attempts = max_attempts_factor * n
    lo, hi = f.bounds()
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    while len(out) < n and attempts < max_attempts:
        attempts += 1
        if handle_hint is not None and rng.uniform() < 0.7:
            pos = np.asarray(handle_hint) + rng.normal(0.0, 0.02, size=3)
        else:
            pos = center + rng.uniform(-1.1, 1.1, size=3) * half
        q_rot = rng.normal(size=4)
        q = Pose(t=pos, q=q_rot)
        cloud = hook.axis_cloud()
        if _cloud_margins(f, q, cloud).min() < HOOK_CLEARANCE:
            continue
        if check_trapped(f, hook, q):
            out.append(q)
    if len(out) < n:
        raise SamplingExhausted(
            f"accepted {len(out)}/{n} hang poses in {max_attempts} attempts")
    return out


def mug_handle_hint(spec: ObjectSpec) -> np.ndarray:
    """Arc center of the mug handle: a good hang-pose proposal center."""
    from .objects import scaled_spec

    s = scaled_spec(spec)
    x = (s.outer_radius - 0.5 * s.wall
         - s.handle_arc_radius * np.cos(0.5 * s.handle_span))
    return np.array([x, 0.0, s.handle_z_offset])


# ---------------------------------------------------------------------------
# dataset build / io
# ---------------------------------------------------------------------------

@dataclass
class ObjectData:
    spec: ObjectSpec
    views: PosedImageSet
    sdf_points: np.ndarray
    sdf_targets: np.ndarray
    grasp_poses: np.ndarray  # (n, 7)
    hang_poses: np.ndarray  # (n, 7)
    split: str = "train"

    def field(self) -> Field:
        return make_mug(self.spec)


@dataclass
class DatasetCounts:
    n_views: int = 100
    image_size: int = 128
    n_sdf: int = 12500
    n_grasp: int = 1000
    n_hang: int = 1000
    dist_range: tuple = (0.4, 0.7)


def split_counts(n: int):
    """Train/val/test proportions 78/25/28 scaled to n; floor for train and
    val, remainder to test."""
    n_train = int(np.floor(n * 78 / 131))
    n_val = int(np.floor(n * 25 / 131))
    return n_train, n_val, n - n_train - n_val


def generate_object(spec: ObjectSpec, counts: DatasetCounts, seed: int,
                    gripper: GripperModel = None,
                    hook: HookModel = None) -> ObjectData:
    gripper = gripper or default_gripper()
    hook = hook or default_hook()
    f = make_mug(spec)
    radius = spec.bounding_radius
    views = sample_view_sphere(counts.n_views, counts.dist_range, [0, 0, 0],
                               radius, child_seed(seed, "views"),
                               width=counts.image_size, height=counts.image_size)
    imgs = [render_view(f, v, counts.image_size, counts.image_size,
                        bound_radius=radius) for v in views]
    image_set = PosedImageSet(images=imgs, center=np.zeros(3), radius=radius)
    pts, targets = sample_sdf_data(f, counts.n_sdf, child_seed(seed, "sdf"))
    grasps = sample_antipodal_grasps(f, gripper, counts.n_grasp,
                                     child_seed(seed, "grasp"))
    hangs = sample_hang_poses(f, hook, counts.n_hang, child_seed(seed, "hang"),
                              handle_hint=mug_handle_hint(spec))
    return ObjectData(
        spec=spec, views=image_set, sdf_points=pts, sdf_targets=targets,
        grasp_poses=np.stack([g.as_vector7() for g in grasps]),
        hang_poses=np.stack([h.as_vector7() for h in hangs]))


def build_dataset(specs, counts: DatasetCounts, out_dir, seed: int,
                  gripper: GripperModel = None, hook: HookModel = None):
    """Generate, split and persist a dataset; returns the object directories."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    order = rng_for(seed, "split").permutation(len(specs))
    n_train, n_val, _ = split_counts(len(specs))
    splits = {}
    for rank, idx in enumerate(order):
        splits[int(idx)] = ("train" if rank < n_train
                            else "val" if rank < n_train + n_val else "test")
    dirs = []
    for i, spec in enumerate(specs):
        data = generate_object(spec, counts, child_seed(seed, "object", i),
                               gripper=gripper, hook=hook)
        data.split = splits[i]
        obj_dir = out_dir / f"object_{i:03d}"
        save_object(data, obj_dir)
        dirs.append(obj_dir)
    return dirs


def save_object(data: ObjectData, obj_dir):
    obj_dir = Path(obj_dir)
    obj_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v!r}" for k, v in dataclasses.asdict(data.spec).items()]
    lines.append(f"split={data.split!r}")
    (obj_dir / "spec.txt").write_text("\n".join(lines) + "\n")
    save_image_set(data.views, obj_dir / "views.dvcv")
    with open(obj_dir / "sdf.bin", "wb") as fh:
        fh.write(struct.pack("<I", len(data.sdf_points)))
        fh.write(data.sdf_points.astype("<f4").tobytes())
        fh.write(data.sdf_targets.astype("<f4").tobytes())
    _save_poses(obj_dir / "grasp.poses", data.grasp_poses)
    _save_poses(obj_dir / "hang.poses", data.hang_poses)


def load_object(obj_dir) -> ObjectData:
    obj_dir = Path(obj_dir)
    fields = {}
    for line in (obj_dir / "spec.txt").read_text().splitlines():
        k, v = line.split("=", 1)
        fields[k] = eval(v)  # noqa: S307 - trusted local artifact
    split = fields.pop("split", "train")
    spec = ObjectSpec(**fields)
    views = load_image_set(obj_dir / "views.dvcv")
    with open(obj_dir / "sdf.bin", "rb") as fh:
        (n,) = struct.unpack("<I", fh.read(4))
        pts = np.frombuffer(fh.read(12 * n), dtype="<f4").astype(float).reshape(n, 3)
        targets = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(float)
    return ObjectData(
        spec=spec, views=views, sdf_points=pts, sdf_targets=targets,
        grasp_poses=_load_poses(obj_dir / "grasp.poses"),
        hang_poses=_load_poses(obj_dir / "hang.poses"), split=split)


def _save_poses(path, poses7: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(np.asarray(poses7, dtype="<f8").tobytes())


def _load_poses(path) -> np.ndarray:
    data = np.fromfile(path, dtype="<f8")
    return data.reshape(-1, 7)
