"""Kinematic chains: forward kinematics with analytic Jacobians in the local
pose chart, joint limits, named frames and link collision clouds."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import Pose


class KinematicsError(Exception):
    pass


class UnknownFrame(KinematicsError):
    pass


@dataclass(frozen=True)
class Joint:
    origin: Pose  # fixed transform from the previous joint frame
    axis: np.ndarray  # unit rotation axis in the joint frame
    lower: float
    upper: float

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, "axis", a / np.linalg.norm(a))


@dataclass(frozen=True)
class KinematicTree:
    """Serial revolute chain with frames attached after given joint counts."""

    joints: tuple
    base: Pose = dc_field(default_factory=Pose.identity)
    frames: dict = dc_field(default_factory=dict)  # name -> (joint_count, Pose)
    link_clouds: dict = dc_field(default_factory=dict)  # frame -> (n, 4) spheres

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def limits(self):
        lo = np.array([j.lower for j in self.joints])
        hi = np.array([j.upper for j in self.joints])
        return lo, hi

    def clamp(self, x):
        lo, hi = self.limits()
        return np.clip(x, lo, hi)


def forward_kinematics(tree: KinematicTree, x, frame: str) -> Pose:
    pose, _ = _fk_chain(tree, x, frame)
    return pose


def fk_jacobian(tree: KinematicTree, x, frame: str):
    """(pose, J (6, n)) with J in the right chart: pose' ~ pose o exp(J dx).

    Column i: [R^T (a_i x (t - o_i)); R^T a_i] for world joint axis a_i at
    origin o_i and frame pose (R, t).
    """
    pose, origins = _fk_chain(tree, x, frame)
    n = tree.n_joints
    count = tree.frames[frame][0] if frame in tree.frames else n
    R = pose.rotation_matrix()
    J = np.zeros((6, n))
    for i in range(count):
        a_w, o_w = origins[i]
        J[:3, i] = R.T @ np.cross(a_w, pose.t - o_w)
        J[3:, i] = R.T @ a_w
    return pose, J


def _fk_chain(tree: KinematicTree, x, frame: str):
    if frame not in tree.frames:
        raise UnknownFrame(f"unknown frame {frame!r}; have {sorted(tree.frames)}")
    x = np.asarray(x, dtype=float)
    if x.shape != (tree.n_joints,):
        raise KinematicsError(f"expected {tree.n_joints} joint values, got {x.shape}")
    count, offset = tree.frames[frame]
    T = tree.base
    origins = []
    for i in range(count):
        joint = tree.joints[i]
        T = T.compose(joint.origin)
        a_w = T.rotation_matrix() @ joint.axis
        origins.append((a_w, T.t.copy()))
        T = T.compose(Pose.from_axis_angle(joint.axis, x[i]))
    return T.compose(offset), origins


def frame_cloud_world(tree: KinematicTree, x, frame: str) -> np.ndarray:
    """Link collision spheres (n, 4) of one frame, centers in world space."""
    cloud = tree.link_clouds[frame]
    pose = forward_kinematics(tree, x, frame)
    out = cloud.copy()
    out[:, :3] = pose.apply(cloud[:, :3])
    return out


def all_clouds_world(tree: KinematicTree, x):
    """Concatenated world-space link spheres plus per-frame slices."""
    parts, slices = [], {}
    start = 0
    for frame in tree.link_clouds:
        c = frame_cloud_world(tree, x, frame)
        parts.append(c)
        slices[frame] = slice(start, start + len(c))
        start += len(c)
    return np.concatenate(parts), slices


def default_arm(base: Pose = None) -> KinematicTree:
    """7-revolute desk-scale arm with alternating z/y axes, a gripper frame
    whose -z approach direction points out along the flange, and coarse
    sphere clouds on each link."""
    base = base or Pose.identity()
    z = (0.0, 0.0, 1.0)
    y = (0.0, 1.0, 0.0)
    joints = (
        Joint(Pose.from_translation([0.0, 0.0, 0.20]), z, -2.8, 2.8),
        Joint(Pose.identity(), y, -1.9, 1.9),
        Joint(Pose.from_translation([0.0, 0.0, 0.25]), z, -2.8, 2.8),
        Joint(Pose.identity(), y, -2.3, 2.3),
        Joint(Pose.from_translation([0.0, 0.0, 0.25]), z, -2.8, 2.8),
        Joint(Pose.identity(), y, -2.0, 2.0),
        Joint(Pose.from_translation([0.0, 0.0, 0.08]), z, -2.8, 2.8),
    )
    # gripper: origin between the fingertips, approach along local -z, which
    # points away from the flange (the frame is flipped about x)
    flip = Pose.from_axis_angle([1.0, 0.0, 0.0], np.pi)
    gripper = Pose(t=[0.0, 0.0, 0.16], q=flip.q)
    frames = {
        "base": (0, Pose.identity()),
        "shoulder": (2, Pose.identity()),
        "elbow": (4, Pose.identity()),
        "wrist": (6, Pose.identity()),
        "flange": (7, Pose.identity()),
        "gripper": (7, gripper),
    }
    link_clouds = {
        "shoulder": _segment_cloud([0, 0, -0.20], [0, 0, 0.0], 0.06, 4),
        "elbow": _segment_cloud([0, 0, -0.25], [0, 0, 0.0], 0.055, 4),
        "wrist": _segment_cloud([0, 0, -0.25], [0, 0, 0.0], 0.05, 4),
        "flange": _segment_cloud([0, 0, -0.06], [0, 0, 0.02], 0.045, 2),
        "gripper": np.array([
            [0.045, 0.0, 0.030, 0.012],
            [-0.045, 0.0, 0.030, 0.012],
            [0.045, 0.0, 0.008, 0.010],
            [-0.045, 0.0, 0.008, 0.010],
            [0.0, 0.0, 0.055, 0.030],
        ]),
    }
    return KinematicTree(joints=joints, base=base, frames=frames,
                         link_clouds=link_clouds)


def _segment_cloud(a, b, radius, n):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ts = np.linspace(0.0, 1.0, n)[:, None]
    centers = a * (1 - ts) + b * ts
    return np.concatenate([centers, np.full((n, 1), radius)], axis=1)


# ready posture: gripper at ~(0.41, 0, 0.36) approaching down-forward
HOME_CONFIG = np.array([0.0, 0.397, 0.0, 0.557, 0.0, 1.70, 0.0])
