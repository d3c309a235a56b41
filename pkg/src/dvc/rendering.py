"""Sphere-traced rendering of implicit objects into posed channel images,
multi-view centering/normalization, and homography-based augmentation.

Channel layout of a PosedImage (C = 6):
  0 mask (1 where a ray hit the object)
  1 depth along the optical axis, divided by 2 * declared bounding radius
  2:5 surface normal in the rendering camera's frame
  5 ray hit flag (identical to the mask for rendered images; kept separate
    so externally supplied segmentation masks can differ from renderer hits)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .fields import Field
from .geometry import (
    CameraIntrinsics,
    CameraView,
    Pose,
    fov_intrinsics,
    homography_for,
    look_at_camera,
    warp_image,
)
from .seeding import child_seed

N_CHANNELS = 6
NORMALIZED_RADIUS = 0.15

MAX_STEPS = 128
SURFACE_TOL = 1e-5
MAX_RAY_LENGTH = 10.0


class RenderError(Exception):
    pass


class EmptyMask(RenderError):
    pass


@dataclass(frozen=True)
class PosedImage:
    channels: np.ndarray  # (C, H, W)
    view: CameraView

    @property
    def mask(self) -> np.ndarray:
        return self.channels[0]

    @property
    def depth(self) -> np.ndarray:
        return self.channels[1]


@dataclass(frozen=True)
class PosedImageSet:
    images: tuple
    center: np.ndarray  # declared bounding-sphere center
    radius: float  # declared bounding-sphere radius (normalization scale)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if len(self.images) == 0:
            raise RenderError("a posed image set needs at least one view")

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class AugmentationConfig:
    roll_range: float = 0.5  # radians, uniform in +-range
    center_jitter: float = 0.01  # meters, uniform per axis in +-range
    normalized_radius: float = NORMALIZED_RADIUS
    cutout_count: int = 0
    cutout_max_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.cutout_max_fraction <= 0.5):
            raise ValueError("cutout fraction must lie in [0, 0.5]")


def _pixel_rays(view: CameraView, H: int, W: int):
    """Unit world-space ray directions through every pixel center."""
    K = view.intrinsics
    f = K.focal
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    x = (jj + 0.5 - K.cx) / f
    y = -(ii + 0.5 - K.cy) / f
    d = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ view.pose.rotation_matrix().T


def render_view(f: Field, view: CameraView, height: int = 128, width: int = 128,
                bound_radius: float = None) -> PosedImage:
    """Sphere trace one view. Misses leave mask = 0; `bound_radius` sets the
    depth normalization (defaults to the field's own bounding radius)."""
    if bound_radius is None:
        bound_radius = f.bounding_radius()
    origin = view.pose.t
    dirs = _pixel_rays(view, height, width)
    n = len(dirs)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(MAX_STEPS):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        pos = origin + t[idx, None] * dirs[idx]
        d = f.distance(pos)
        arrived = d < SURFACE_TOL
        hit[idx[arrived]] = True
        active[idx[arrived]] = False
        t[idx] += np.maximum(d, 0.0)
        overshoot = t[idx] > MAX_RAY_LENGTH
        active[idx[overshoot]] = False
    channels = np.zeros((N_CHANNELS, height * width))
    if np.any(hit):
        pts = origin + t[hit, None] * dirs[hit]
        axis = view.optical_axis()
        depth = (pts - origin) @ axis
        normals = f.gradient(pts)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norms > 1e-12, norms, 1.0)
        normals_cam = normals @ view.pose.rotation_matrix()
        channels[0, hit] = 1.0
        channels[1, hit] = depth / (2.0 * bound_radius)
        channels[2:5, hit] = normals_cam.T
        channels[5, hit] = 1.0
    return PosedImage(channels=channels.reshape(N_CHANNELS, height, width), view=view)


def fibonacci_directions(n: int) -> np.ndarray:
    """Area-uniform unit directions from the Fibonacci lattice."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sample_view_sphere(n: int, dist_range, center, radius: float, seed: int,
                       width: int = 128, height: int = 128):
    """Seeded upright cameras on a randomly rotated Fibonacci lattice, facing
    `center`, with fov fit to the given bounding radius."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=float)
    dirs = fibonacci_directions(n)
    spin = Pose(t=np.zeros(3), q=rng.normal(size=4)).rotation_matrix()
    dirs = dirs @ spin.T
    dists = rng.uniform(dist_range[0], dist_range[1], size=n)
    views = []
    for d, dist in zip(dirs, dists):
        pos = center + d * dist
        up = (0.0, 0.0, 1.0) if abs(d[2]) < 0.999 else (0.0, 1.0, 0.0)
        pose = look_at_camera(pos, center, up=up)
        views.append(CameraView(pose, fov_intrinsics(dist, radius, width, height)))
    return views


# ---------------------------------------------------------------------------
# multi-view preprocessing
# ---------------------------------------------------------------------------

def _mask_rays(image_set: PosedImageSet):
    """(origins, unit dirs) of every mask pixel's viewing ray across all views."""
    origins, dirs = [], []
    for img in image_set.images:
        m = img.mask > 0.5
        if not np.any(m):
            continue
        H, W = m.shape
        d = _pixel_rays(img.view, H, W).reshape(H, W, 3)[m]
        origins.append(np.repeat(img.view.pose.t[None, :], len(d), axis=0))
        dirs.append(d)
    if not origins:
        raise EmptyMask("no mask pixels in any view")
    return np.concatenate(origins), np.concatenate(dirs)


def required_radius(center, origins, dirs) -> float:
    """Smallest sphere radius at `center` containing all viewing rays;
    equals the max point-to-ray-line distance."""
    w = np.asarray(center, dtype=float) - origins
    cross = np.cross(w, dirs)
    return float(np.linalg.norm(cross, axis=1).max())


def minimal_bounding_sphere(image_set: PosedImageSet):
    """Center and radius of the smallest sphere whose silhouette covers every
    mask pixel in every view: exact closed-form inner radius, Nelder-Mead
    over the center."""
    origins, dirs = _mask_rays(image_set)

    # initial guess: average pairwise closest point of the per-view mean rays
    per_view = []
    for img in image_set.images:
        m = img.mask > 0.5
        if np.any(m):
            H, W = m.shape
            d = _pixel_rays(img.view, H, W).reshape(H, W, 3)[m].mean(axis=0)
            per_view.append((img.view.pose.t, d / np.linalg.norm(d)))
    if len(per_view) == 1:
        o, d = per_view[0]
        init = o + d * 1.0
    else:
        mids = []
        for i in range(len(per_view)):
            for j in range(i + 1, len(per_view)):
                (o1, d1), (o2, d2) = per_view[i], per_view[j]
                # closest points of two lines
                b = d1 @ d2
                w = o1 - o2
                denom = 1.0 - b * b
                if abs(denom) < 1e-9:
                    continue
                s = (b * (d2 @ w) - (d1 @ w)) / denom
                t = ((d2 @ w) - b * (d1 @ w)) / denom
                mids.append(0.5 * (o1 + s * d1 + o2 + t * d2))
        init = np.mean(mids, axis=0) if mids else per_view[0][0] + per_view[0][1]

    min_dist = min(np.linalg.norm(img.view.pose.t - init) for img in image_set.images)

    def objective(c):
        # keep the center well in front of every camera
        for img in image_set.images:
            depth = (c - img.view.pose.t) @ -img.view.pose.rotation_matrix()[:, 2]
            if depth < 0.05 * min_dist:
                return 1e6
        return required_radius(c, origins, dirs)

    res = minimize(objective, init, method="Nelder-Mead",
                   options={"xatol": 1e-5, "fatol": 1e-7, "maxiter": 400})
    center = res.x
    return center, required_radius(center, origins, dirs)


def center_warp_set(image_set: PosedImageSet, sphere=None,
                    normalized_radius: float = NORMALIZED_RADIUS) -> PosedImageSet:
    """Re-aim every camera at the bounding-sphere center and re-scale the
    intrinsics as if the sphere had `normalized_radius`, warping images by the
    induced homography. Non-mask pixels are zeroed after warping."""
    if sphere is None:
        sphere = minimal_bounding_sphere(image_set)
    center, _ = sphere
    center = np.asarray(center, dtype=float)
    depth_scale = image_set.radius / normalized_radius
    out = []
    for img in image_set.images:
        cam = img.view.pose.t
        dist = np.linalg.norm(cam - center)
        view_dir = (center - cam) / dist
        up = (0.0, 0.0, 1.0) if abs(view_dir[2]) < 0.999 else (0.0, 1.0, 0.0)
        pose_new = look_at_camera(cam, center, up=up)
        H, W = img.channels.shape[1:]
        K_new = fov_intrinsics(dist, normalized_radius, W, H)
        hom = homography_for(img.view.pose.rotation_matrix(), img.view.intrinsics,
                             pose_new.rotation_matrix(), K_new)
        warped = warp_image(img.channels, hom)
        warped[1] *= depth_scale
        warped[:, warped[0] < 0.5] = 0.0
        out.append(PosedImage(channels=warped, view=CameraView(pose_new, K_new)))
    return PosedImageSet(images=tuple(out), center=center, radius=normalized_radius)


def augment_view(img: PosedImage, cfg: AugmentationConfig, seed: int,
                 center, declared_radius: float) -> PosedImage:
    """Roll + look-at jitter re-warp of one view with optional cutouts.

    The camera position never moves; the view metadata is updated to the new
    orientation and intrinsics (radius fixed to cfg.normalized_radius)."""
    rng = np.random.default_rng(child_seed(cfg.seed, "view", seed))
    center = np.asarray(center, dtype=float)
    cam = img.view.pose.t
    target = center + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=3)
    roll = rng.uniform(-cfg.roll_range, cfg.roll_range)
    dist = np.linalg.norm(cam - target)
    view_dir = (target - cam) / dist
    up = (0.0, 0.0, 1.0) if abs(view_dir[2]) < 0.999 else (0.0, 1.0, 0.0)
    aimed = look_at_camera(cam, target, up=up)
    R_new = aimed.rotation_matrix() @ Pose.from_axis_angle([0, 0, 1.0], roll).rotation_matrix()
    pose_new = Pose.from_rt(R_new, cam)
    H, W = img.channels.shape[1:]
    K_new = fov_intrinsics(dist, cfg.normalized_radius, W, H)
    hom = homography_for(img.view.pose.rotation_matrix(), img.view.intrinsics,
                         R_new, K_new)
    warped = warp_image(img.channels, hom)
    warped[1] *= declared_radius / cfg.normalized_radius
    for _ in range(cfg.cutout_count):
        w = rng.uniform(0.0, cfg.cutout_max_fraction) * W
        h = rng.uniform(0.0, cfg.cutout_max_fraction) * H
        u0 = rng.uniform(0.0, W - w)
        v0 = rng.uniform(0.0, H - h)
        warped[:, int(v0):int(v0 + h) + 1, int(u0):int(u0 + w) + 1] = 0.0
    return PosedImage(channels=warped, view=CameraView(pose_new, K_new))


def augment_set(image_set: PosedImageSet, cfg: AugmentationConfig,
                seed: int) -> PosedImageSet:
    out = [augment_view(img, cfg, child_seed(seed, i), image_set.center,
                        image_set.radius)
           for i, img in enumerate(image_set.images)]
    return PosedImageSet(images=tuple(out), center=image_set.center,
                         radius=cfg.normalized_radius)


def backproject_depth(img: PosedImage, bound_radius: float, n: int,
                      rng) -> np.ndarray:
    """World points of up to n random mask pixels, from the depth channel.

    `bound_radius` must be the declared radius of the set the image belongs
    to (the depth channel stores depth / (2 * radius))."""
    m = img.mask > 0.5
    if not np.any(m):
        raise EmptyMask("no mask pixels to backproject")
    H, W = m.shape
    idx = np.nonzero(m.ravel())[0]
    if len(idx) > n:
        idx = rng.choice(idx, size=n, replace=False)
    dirs = _pixel_rays(img.view, H, W)[idx]
    axis = img.view.optical_axis()
    along = dirs @ axis
    depth = img.depth.ravel()[idx] * 2.0 * bound_radius
    return img.view.pose.t + dirs * (depth / along)[:, None]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_image_set(image_set: PosedImageSet, path):
    with open(path, "wb") as fh:
        fh.write(b"DVCV")
        first = image_set.images[0].channels
        fh.write(struct.pack("<IIIII", 1, len(image_set.images), *first.shape))
        fh.write(struct.pack("<3d", *image_set.center))
        fh.write(struct.pack("<d", image_set.radius))
        for img in image_set.images:
            fh.write(struct.pack("<7d", *img.view.pose.as_vector7()))
            K = img.view.intrinsics
            fh.write(struct.pack("<dddII", K.fov, K.cx, K.cy, K.width, K.height))
            fh.write(img.channels.astype("<f4").tobytes())


def load_image_set(path) -> PosedImageSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"DVCV":
            raise RenderError(f"bad image-set magic: {magic!r}")
        version, n_views, C, H, W = struct.unpack("<IIIII", fh.read(20))
        if version != 1:
            raise RenderError(f"unsupported image-set version {version}")
        center = np.array(struct.unpack("<3d", fh.read(24)))
        (radius,) = struct.unpack("<d", fh.read(8))
        images = []
        for _ in range(n_views):
            pose = Pose.from_vector7(struct.unpack("<7d", fh.read(56)))
            fov, cx, cy, width, height = struct.unpack("<dddII", fh.read(32))
            K = CameraIntrinsics(fov=fov, width=width, height=height, cx=cx, cy=cy)
            data = np.frombuffer(fh.read(4 * C * H * W), dtype="<f4").astype(float)
            images.append(PosedImage(channels=data.reshape(C, H, W),
                                     view=CameraView(pose, K)))
    return PosedImageSet(images=tuple(images), center=center, radius=radius)


def dump_ppm(channel: np.ndarray, path):
    """Write one channel as a grayscale P6 pixmap for quick inspection."""
    lo, hi = float(channel.min()), float(channel.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    gray = ((channel - lo) * scale).astype(np.uint8)
    H, W = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(np.repeat(gray[..., None], 3, axis=2).tobytes())
