"""SE(3) poses, pinhole cameras, projection and homography warping.

Conventions used throughout the package:

- Quaternions are scalar-first (w, x, y, z) and kept unit-norm.
- Camera frames are right-handed with x right, y up and -z forward
  (the view direction), so image u runs along +x and image v along -y.
- Pixel coordinates are continuous, measured from the top-left corner,
  with pixel (i, j) centered at (u, v) = (j + 0.5, i + 0.5).
- Camera poses are stored camera-to-world; world-to-camera is derived.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    pass


class BehindCamera(GeometryError):
    """A projected point lies at or behind the camera plane."""


class DegenerateFrame(GeometryError):
    """look-at construction with parallel view/up directions."""


class InvalidGeometry(GeometryError):
    """Inconsistent geometric parameters (e.g. sphere larger than distance)."""


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # fix the double-cover sign so logs/blends behave predictably
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


def quat_exp(w):
    """Unit quaternion for a rotation vector (axis * angle)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]]))
    axis = w / theta
    h = 0.5 * theta
    return quat_normalize(np.concatenate([[np.cos(h)], np.sin(h) * axis]))


def quat_log(q):
    """Rotation vector of a unit quaternion (angle < pi maps uniquely)."""
    q = quat_normalize(q)
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return (angle / s) * q[1:]


def quat_rotate(q, pts):
    pts = np.asarray(pts, dtype=float)
    return pts @ quat_to_matrix(q).T


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    return quat_to_matrix(quat_exp(w))


def so3_log(R):
    return quat_log(quat_from_matrix(R))


def so3_right_jacobian_inv(phi):
    """d/de log(Exp(phi) Exp(e)) at e=0, the inverse right Jacobian of SO(3)."""
    theta = np.linalg.norm(phi)
    S = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * S + S @ S / 12.0
    cot_half = 1.0 / np.tan(0.5 * theta)
    coeff = (1.0 / theta**2) - cot_half / (2.0 * theta)
    return np.eye(3) + 0.5 * S + coeff * (S @ S)


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation plus scalar-first unit quaternion."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())
        object.__setattr__(self, "q", quat_normalize(self.q))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(t=np.asarray(t, dtype=float))

    @staticmethod
    def from_axis_angle(axis, angle, t=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return Pose(t=np.asarray(t, dtype=float), q=quat_exp(axis * angle))

    @staticmethod
    def from_rt(R, t) -> "Pose":
        return Pose(t=np.asarray(t, dtype=float), q=quat_from_matrix(R))

    @staticmethod
    def from_vector7(v) -> "Pose":
        v = np.asarray(v, dtype=float).reshape(7)
        return Pose(t=v[:3], q=v[3:])

    def as_vector7(self) -> np.ndarray:
        return np.concatenate([self.t, self.q])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(t=self.t + quat_rotate(self.q, other.t),
                    q=quat_multiply(self.q, other.q))

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        return Pose(t=-quat_rotate(qi, self.t), q=qi)

    def apply(self, pts) -> np.ndarray:
        """Map one (3,) point or an (N, 3) batch through the rigid transform."""
        pts = np.asarray(pts, dtype=float)
        return quat_rotate(self.q, pts) + self.t


def pose_exp(v) -> Pose:
    """Chart from a 6-vector (translation, rotation-vector) to a Pose.

    The chart is the product R^3 x SO(3): translation enters linearly,
    rotation through the quaternion exponential.
    """
    v = np.asarray(v, dtype=float).reshape(6)
    return Pose(t=v[:3], q=quat_exp(v[3:]))


def pose_log(p: Pose) -> np.ndarray:
    return np.concatenate([p.t, quat_log(p.q)])


def pose_retract(p: Pose, delta) -> Pose:
    """Right-chart update p * exp(delta); the optimizer's retraction."""
    return p.compose(pose_exp(delta))


def left_to_right_jacobian(b: Pose) -> np.ndarray:
    """6x6 map J with: exp(eps) o b = b o exp(J eps) to first order.

    Lets derivative code convert a left (world-side) perturbation of a pose
    into the right (body-side) chart used everywhere else.
    """
    Rt = b.rotation_matrix().T
    J = np.zeros((6, 6))
    J[:3, :3] = Rt
    J[:3, 3:] = -Rt @ skew(b.t)
    J[3:, 3:] = Rt
    return J


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fov: float
    width: int
    height: int
    cx: float = None
    cy: float = None

    def __post_init__(self):
        if not (0.0 < self.fov < np.pi):
            raise InvalidGeometry(f"fov must lie in (0, pi): {self.fov}")
        if self.width < 1 or self.height < 1:
            raise InvalidGeometry("image dimensions must be >= 1")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    @property
    def focal(self) -> float:
        # fov spans the smaller image dimension
        return 0.5 * min(self.width, self.height) / np.tan(0.5 * self.fov)

    def matrix(self) -> np.ndarray:
        """Maps projective camera coords (x, y, w), ray = (x, y, -w), to pixels."""
        f = self.focal
        return np.array([[f, 0.0, self.cx],
                         [0.0, -f, self.cy],
                         [0.0, 0.0, 1.0]])


def fov_intrinsics(camera_distance: float, sphere_radius: float,
                   width: int = 128, height: int = 128) -> CameraIntrinsics:
    """Field of view that makes a bounding sphere span the image exactly."""
    if not (0.0 < sphere_radius < camera_distance):
        raise InvalidGeometry(
            f"need 0 < radius ({sphere_radius}) < distance ({camera_distance})")
    return CameraIntrinsics(fov=2.0 * np.arcsin(sphere_radius / camera_distance),
                            width=width, height=height)


@dataclass(frozen=True)
class CameraView:
    pose: Pose  # camera-to-world
    intrinsics: CameraIntrinsics

    @property
    def position(self) -> np.ndarray:
        return self.pose.t

    def optical_axis(self) -> np.ndarray:
        """World-space view direction (camera -z)."""
        return -self.pose.rotation_matrix()[:, 2]


def look_at_camera(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose with -z toward `target` and y along the projected `up`."""
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    view = target - position
    dist = np.linalg.norm(view)
    if dist < 1e-12:
        raise DegenerateFrame("camera position equals target")
    z = -view / dist
    up = np.asarray(up, dtype=float)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DegenerateFrame("up direction parallel to view direction")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Pose.from_rt(R, position)


DEPTH_EPS = 1e-6


def project(points, view: CameraView):
    """Project world points to (u, v, depth along the optical axis).

    Accepts (3,) or (N, 3); raises BehindCamera if any depth <= 1e-6 m.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    R = view.pose.rotation_matrix()
    pc = (pts - view.pose.t) @ R
    depth = -pc[:, 2]
    if np.any(depth <= DEPTH_EPS):
        raise BehindCamera("point at or behind the camera plane")
    K = view.intrinsics
    f = K.focal
    u = K.cx + f * pc[:, 0] / depth
    v = K.cy - f * pc[:, 1] / depth
    out = np.stack([u, v, depth], axis=1)
    return out[0] if single else out


def project_with_validity(points, view: CameraView):
    """Batch projection that flags invalid rows instead of raising.

    Returns (uvd (N, 3), valid (N,)); invalid rows (behind the camera or
    projecting outside the image) hold zeros.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    R = view.pose.rotation_matrix()
    pc = (pts - view.pose.t) @ R
    depth = -pc[:, 2]
    safe = np.where(depth > DEPTH_EPS, depth, 1.0)
    K = view.intrinsics
    f = K.focal
    u = K.cx + f * pc[:, 0] / safe
    v = K.cy - f * pc[:, 1] / safe
    valid = (depth > DEPTH_EPS) & (u >= 0.0) & (u <= K.width) \
        & (v >= 0.0) & (v <= K.height)
    uvd = np.stack([u, v, depth], axis=1)
    uvd[~valid] = 0.0
    return uvd, valid


def projection_point_jacobian(point, view: CameraView) -> np.ndarray:
    """3x3 Jacobian of (u, v, depth) with respect to the world point."""
    R = view.pose.rotation_matrix()
    pc = R.T @ (np.asarray(point, dtype=float) - view.pose.t)
    depth = -pc[2]
    if depth <= DEPTH_EPS:
        raise BehindCamera("point at or behind the camera plane")
    f = view.intrinsics.focal
    # rows: d(u, v, depth) / d(pc)
    J_pc = np.array([
        [f / depth, 0.0, f * pc[0] / depth**2],
        [0.0, -f / depth, -f * pc[1] / depth**2],
        [0.0, 0.0, -1.0],
    ])
    return J_pc @ R.T


# ---------------------------------------------------------------------------
# homography
# ---------------------------------------------------------------------------

_FLIP = np.diag([1.0, 1.0, -1.0])  # (x, y, w) <-> camera ray (x, y, -w)


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3).copy()
        if abs(np.linalg.det(m)) < 1e-15:
            raise InvalidGeometry("homography matrix is singular")
        object.__setattr__(self, "matrix", m)

    def apply(self, uv) -> np.ndarray:
        """Map pixel coordinates (..., 2) through the homography."""
        uv = np.asarray(uv, dtype=float)
        single = uv.ndim == 1
        uv = np.atleast_2d(uv)
        h = np.concatenate([uv, np.ones((len(uv), 1))], axis=1) @ self.matrix.T
        out = h[:, :2] / h[:, 2:3]
        return out[0] if single else out

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def homography_for(R: np.ndarray, K: CameraIntrinsics,
                   R_new: np.ndarray, K_new: CameraIntrinsics) -> Homography:
    """Pixel map between two views sharing a camera position.

    Source pixels are lifted to camera rays through K^-1, re-expressed in the
    new camera via R_new^T R, and projected back through K_new.
    """
    M = K_new.matrix() @ _FLIP @ R_new.T @ R @ _FLIP @ np.linalg.inv(K.matrix())
    return Homography(M)


# ---------------------------------------------------------------------------
# image resampling
# ---------------------------------------------------------------------------

def bilinear_sample(channels: np.ndarray, u, v) -> np.ndarray:
    """Sample (C, H, W) channels at continuous pixel coords, clamped at borders.

    Pixel centers sit at half-integers; u, v may be scalars or arrays.
    Returns shape (C,) + broadcast shape of u.
    """
    C, H, W = channels.shape
    u = np.asarray(u, dtype=float) - 0.5
    v = np.asarray(v, dtype=float) - 0.5
    u = np.clip(u, 0.0, W - 1.0)
    v = np.clip(v, 0.0, H - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, W - 2) if W > 1 else np.zeros_like(u, dtype=int)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 2) if H > 1 else np.zeros_like(v, dtype=int)
    fu = u - u0
    fv = v - v0
    c00 = channels[:, v0, u0]
    c01 = channels[:, v0, u0 + 1] if W > 1 else c00
    c10 = channels[:, v0 + 1, u0] if H > 1 else c00
    c11 = channels[:, v0 + 1, u0 + 1] if W > 1 and H > 1 else c00
    return (c00 * (1 - fu) * (1 - fv) + c01 * fu * (1 - fv)
            + c10 * (1 - fu) * fv + c11 * fu * fv)


def bilinear_sample_with_gradient(channels: np.ndarray, u, v):
    """Values plus d/du and d/dv of the bilinear interpolant (within a cell)."""
    C, H, W = channels.shape
    uc = np.clip(np.asarray(u, dtype=float) - 0.5, 0.0, W - 1.0)
    vc = np.clip(np.asarray(v, dtype=float) - 0.5, 0.0, H - 1.0)
    u0 = np.clip(np.floor(uc).astype(int), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(vc).astype(int), 0, max(H - 2, 0))
    fu = uc - u0
    fv = vc - v0
    c00 = channels[:, v0, u0]
    c01 = channels[:, v0, np.minimum(u0 + 1, W - 1)]
    c10 = channels[:, np.minimum(v0 + 1, H - 1), u0]
    c11 = channels[:, np.minimum(v0 + 1, H - 1), np.minimum(u0 + 1, W - 1)]
    val = c00 * (1 - fu) * (1 - fv) + c01 * fu * (1 - fv) + c10 * (1 - fu) * fv + c11 * fu * fv
    dyu = (c01 - c00) * (1 - fv) + (c11 - c10) * fv
    dyv = (c10 - c00) * (1 - fu) + (c11 - c01) * fu
    return val, dyu, dyv


def warp_image(channels: np.ndarray, hom: Homography) -> np.ndarray:
    """Forward-warp (C, H, W) channels; dest pixel p takes the source value at
    H^-1 p by bilinear interpolation, zero where the source location falls
    outside the image.
    """
    C, H, W = channels.shape
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    dest = np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)
    src = hom.inverse().apply(dest)
    u, v = src[:, 0], src[:, 1]
    inside = (u >= 0.0) & (u <= W) & (v >= 0.0) & (v <= H)
    out = bilinear_sample(channels, u, v)
    out[:, ~inside] = 0.0
    return out.reshape(C, H, W)
