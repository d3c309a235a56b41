"""Procedural object family (mugs) and the gripper/hook interaction models."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fields import Cylinder, Difference, Field, TorusSegment, Union
from .geometry import Pose


class InvalidSpec(Exception):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    """Mug parameters in meters/radians, in the mug's body-centered frame.

    ``bounding_radius`` is the target radius of the minimal origin-centered
    bounding sphere; ``make_mug`` rescales all lengths to hit it.
    """

    outer_radius: float = 0.042
    height: float = 0.10
    wall: float = 0.006
    handle_tube_radius: float = 0.007
    handle_arc_radius: float = 0.028
    handle_span: float = 3.9  # full arc angle
    handle_z_offset: float = 0.0
    bounding_radius: float = 0.13
    seed: int = 0

    def validate(self):
        if not (0.0 < self.wall < self.outer_radius):
            raise InvalidSpec("wall thickness must lie in (0, outer_radius)")
        if self.height <= 2.0 * self.wall:
            raise InvalidSpec("height must exceed twice the wall thickness")
        if not (0.10 <= self.bounding_radius <= 0.15):
            raise InvalidSpec("bounding radius must lie in [0.10, 0.15] m")
        if self.handle_span <= np.pi or self.handle_span >= 1.9 * np.pi:
            raise InvalidSpec("handle span must lie in (pi, 1.9 pi)")
        reach = self.handle_arc_radius * np.sin(0.5 * self.handle_span)
        if abs(self.handle_z_offset) + reach + self.handle_tube_radius > 0.5 * self.height:
            raise InvalidSpec("handle endpoints fall outside the body height")


def random_mug_spec(seed: int) -> ObjectSpec:
    rng = np.random.default_rng(seed)
    height = rng.uniform(0.085, 0.125)
    outer = rng.uniform(0.036, 0.050)
    wall = rng.uniform(0.0045, 0.0070)
    tube = rng.uniform(0.0055, 0.0080)
    span = rng.uniform(3.6, 4.6)
    arc = rng.uniform(0.022, 0.032)
    # keep handle endpoints comfortably inside the body height
    max_arc = (0.5 * height - tube - 0.004) / np.sin(0.5 * span)
    arc = min(arc, 0.95 * max_arc)
    z_off = rng.uniform(-0.2, 0.2) * (0.5 * height - arc * np.sin(0.5 * span) - tube)
    return ObjectSpec(
        outer_radius=outer, height=height, wall=wall,
        handle_tube_radius=tube, handle_arc_radius=arc, handle_span=span,
        handle_z_offset=z_off,
        bounding_radius=rng.uniform(0.105, 0.142), seed=seed)


def _handle_pose(spec: ObjectSpec) -> Pose:
    # arc plane local-xy mapped into world xz (vertical), bulging along +x
    arc_center_x = (spec.outer_radius - 0.5 * spec.wall
                    - spec.handle_arc_radius * np.cos(0.5 * spec.handle_span))
    rot = Pose.from_axis_angle([1.0, 0.0, 0.0], np.pi / 2)
    return Pose(t=[arc_center_x, 0.0, spec.handle_z_offset], q=rot.q)


def _raw_bounding_radius(spec: ObjectSpec) -> float:
    body = np.hypot(spec.outer_radius, 0.5 * spec.height)
    pose = _handle_pose(spec)
    phi = np.linspace(-0.5 * spec.handle_span, 0.5 * spec.handle_span, 256)
    arc_local = np.stack([spec.handle_arc_radius * np.cos(phi),
                          spec.handle_arc_radius * np.sin(phi),
                          np.zeros_like(phi)], axis=1)
    arc_world = pose.apply(arc_local)
    handle = np.max(np.linalg.norm(arc_world, axis=1)) + spec.handle_tube_radius
    return float(max(body, handle))


def make_mug(spec: ObjectSpec) -> Field:
    """Hollow body (outer minus raised inner cylinder) plus a torus-segment handle."""
    spec.validate()
    scale = spec.bounding_radius / _raw_bounding_radius(spec)
    s = replace(
        spec,
        outer_radius=spec.outer_radius * scale,
        height=spec.height * scale,
        wall=spec.wall * scale,
        handle_tube_radius=spec.handle_tube_radius * scale,
        handle_arc_radius=spec.handle_arc_radius * scale,
        handle_z_offset=spec.handle_z_offset * scale,
    )
    body = Cylinder(radius=s.outer_radius, half_height=0.5 * s.height)
    # cavity floor sits `wall` above the base; the carve extends far past the
    # rim so its phantom cap cannot distort distances near the opening
    cavity = Cylinder(
        radius=s.outer_radius - s.wall,
        half_height=s.height,
        pose=Pose.from_translation([0.0, 0.0, s.wall + 0.5 * s.height]),
    )
    handle = TorusSegment(
        major=s.handle_arc_radius, minor=s.handle_tube_radius,
        half_angle=0.5 * s.handle_span, pose=_handle_pose(s))
    return Union(children=(Difference(a=body, b=cavity), handle))


def scaled_spec(spec: ObjectSpec) -> ObjectSpec:
    """The spec with all lengths rescaled to the target bounding radius."""
    scale = spec.bounding_radius / _raw_bounding_radius(spec)
    return replace(
        spec,
        outer_radius=spec.outer_radius * scale,
        height=spec.height * scale,
        wall=spec.wall * scale,
        handle_tube_radius=spec.handle_tube_radius * scale,
        handle_arc_radius=spec.handle_arc_radius * scale,
        handle_z_offset=spec.handle_z_offset * scale,
    )


# ---------------------------------------------------------------------------
# gripper / hook
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GripperModel:
    """Parallel-jaw gripper as sphere clouds in its own frame.

    The frame origin sits between the fingertips, the closing axis is local x
    and the approach direction is local -z (fingers extend toward -z from the
    palm). ``finger1``/``finger2``/``palm`` are (n, 4) arrays of
    (x, y, z, radius) at the fully open configuration.
    """

    finger1: np.ndarray
    finger2: np.ndarray
    palm: np.ndarray
    max_opening: float
    keypoints: np.ndarray  # (27, 3) grid around the gripper center
    keypoint_pitch: float

    def cloud(self) -> np.ndarray:
        return np.concatenate([self.finger1, self.finger2, self.palm])


def default_gripper(max_opening: float = 0.08, pitch: float = 0.025) -> GripperModel:
    pad_r = 0.004
    zs = np.array([0.002, 0.012, 0.022, 0.032])
    ys = np.array([-0.006, 0.006])
    x_in = 0.5 * max_opening + pad_r  # inner sphere surface at +-opening/2
    f1 = np.array([[x_in, y, z, pad_r] for y in ys for z in zs])
    f2 = f1.copy()
    f2[:, 0] = -f2[:, 0]
    palm = np.array([[x, y, 0.052, 0.010]
                     for x in (-0.025, 0.0, 0.025) for y in (-0.012, 0.012)])
    grid = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1)
                     for k in (-1, 0, 1)], dtype=float) * pitch
    return GripperModel(finger1=f1, finger2=f2, palm=palm,
                        max_opening=max_opening, keypoints=grid,
                        keypoint_pitch=pitch)


@dataclass(frozen=True)
class HookModel:
    """Straight hook: a capsule-like segment along local z with 5 axis keypoints."""

    length: float
    radius: float
    mount_offset: np.ndarray  # hook frame expressed from its mounting frame
    keypoints: np.ndarray  # (5, 3)

    def axis_cloud(self, n: int = 11) -> np.ndarray:
        zs = np.linspace(-0.5 * self.length, 0.5 * self.length, n)
        return np.array([[0.0, 0.0, z, self.radius] for z in zs])


def default_hook(length: float = 0.12, radius: float = 0.005) -> HookModel:
    zs = np.linspace(-0.5 * length, 0.5 * length, 5)
    kps = np.stack([np.zeros(5), np.zeros(5), zs], axis=1)
    return HookModel(length=length, radius=radius,
                     mount_offset=np.array([0.0, 0.0, 0.5 * length]),
                     keypoints=kps)
