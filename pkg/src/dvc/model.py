"""Trainable interaction-feature model.

A shared backbone turns (query point, posed image set) into a representation
vector by projecting the point into every view, bilinearly sampling the
channel images, appending a learned depth embedding, running a per-view MLP
and averaging over views. Task heads map representation vectors at rigidly
attached keypoints to a scalar feature that is zero on the feasible manifold.

Everything is plain numpy with hand-written reverse-mode gradients; the
backbone also exposes analytic query-point gradients so features can serve as
differentiable constraints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import Pose, bilinear_sample_with_gradient, skew
from .rendering import PosedImageSet
from .seeding import rng_for

REPRESENTATION_DIM = 128
COORD_FEATURE_DIM = 32
DEPTH_SCALE = 0.30  # meters; 2 x the 0.15 m normalization radius
N_VIEW_INPUT = 7  # mask, depth, normal (3), hit flag, validity

TASKS = ("sdf", "grasp", "hang")


class ModelError(Exception):
    pass


class UnknownTask(ModelError):
    pass


class EmptyViewSet(ModelError):
    pass


class NonFiniteLoss(ModelError):
    pass


class EmptyFeasibleSet(ModelError):
    pass


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class Mlp:
    weights: list
    biases: list
    activations: list  # 'relu' or 'linear' per layer

    @staticmethod
    def create(dims, rng, final_linear=True):
        weights, biases, acts = [], [], []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                      size=(dims[i + 1], dims[i])))
            biases.append(np.zeros(dims[i + 1]))
            last = i == len(dims) - 2
            acts.append("linear" if (last and final_linear) else "relu")
        return Mlp(weights=weights, biases=biases, activations=acts)

    def forward(self, X):
        """X (N, d_in) -> (out (N, d_out), cache for backward)."""
        cache = []
        A = X
        for W, b, act in zip(self.weights, self.biases, self.activations):
            Z = A @ W.T + b
            cache.append((A, Z))
            A = _relu(Z) if act == "relu" else Z
        return A, cache

    def backward(self, cache, d_out, grads=None):
        """Returns (d_input, grads); accumulates into `grads` if given."""
        if grads is None:
            grads = [(np.zeros_like(W), np.zeros_like(b))
                     for W, b in zip(self.weights, self.biases)]
        dA = d_out
        for i in reversed(range(len(self.weights))):
            A_prev, Z = cache[i]
            dZ = dA * (Z > 0.0) if self.activations[i] == "relu" else dA
            grads[i][0][...] += dZ.T @ A_prev
            grads[i][1][...] += dZ.sum(axis=0)
            dA = dZ @ self.weights[i]
        return dA, grads

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def zero_grads(self):
        return [(np.zeros_like(W), np.zeros_like(b))
                for W, b in zip(self.weights, self.biases)]


@dataclass
class DvcModel:
    per_view_mlp: Mlp
    coord_mlp: Mlp
    heads: dict  # task -> (keypoints (K, 3), Mlp)
    sdf_baseline: bool = False
    depth_scale: float = DEPTH_SCALE

    def all_mlps(self):
        out = {"per_view": self.per_view_mlp, "coord": self.coord_mlp}
        for task, (_, mlp) in self.heads.items():
            out[f"head_{task}"] = mlp
        return out

    def params(self):
        out = []
        for mlp in self.all_mlps().values():
            out.extend(mlp.params())
        return out


def make_model(seed: int = 0, gripper_keypoints=None, hook_keypoints=None,
               sdf_baseline: bool = False) -> DvcModel:
    """Default architecture: per-view MLP (input -> 256 -> 128 representation),
    depth embedding (1 -> 32), sdf head (128 -> 128 -> 1), grasp/hang heads
    (K*128 -> 256 -> 128 -> 1). In sdf-baseline mode the grasp/hang heads see
    only the keypoints' detached sdf-feature values (K -> 256 -> 128 -> 1)."""
    from .objects import default_gripper, default_hook

    if gripper_keypoints is None:
        gripper_keypoints = default_gripper().keypoints
    if hook_keypoints is None:
        hook_keypoints = default_hook().keypoints
    rng = rng_for(seed, "model")
    d = REPRESENTATION_DIM
    per_view = Mlp.create([N_VIEW_INPUT + COORD_FEATURE_DIM, 256, d], rng,
                          final_linear=False)
    coord = Mlp.create([1, COORD_FEATURE_DIM], rng, final_linear=False)
    sdf_kp = np.zeros((1, 3))
    heads = {}
    heads["sdf"] = (sdf_kp, Mlp.create([d, d, 1], rng))
    g_in = len(gripper_keypoints) * (1 if sdf_baseline else d)
    h_in = len(hook_keypoints) * (1 if sdf_baseline else d)
    heads["grasp"] = (np.asarray(gripper_keypoints, dtype=float),
                      Mlp.create([g_in, 256, 128, 1], rng))
    heads["hang"] = (np.asarray(hook_keypoints, dtype=float),
                     Mlp.create([h_in, 256, 128, 1], rng))
    return DvcModel(per_view_mlp=per_view, coord_mlp=coord, heads=heads,
                    sdf_baseline=sdf_baseline)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def _project_batch(view, pts):
    """uvd (N, 3), validity mask and the (N, 3, 3) d(uvd)/d(point) Jacobian."""
    R = view.pose.rotation_matrix()
    pc = (pts - view.pose.t) @ R
    depth = -pc[:, 2]
    ok = depth > 1e-6
    safe = np.where(ok, depth, 1.0)
    K = view.intrinsics
    f = K.focal
    u = K.cx + f * pc[:, 0] / safe
    v = K.cy - f * pc[:, 1] / safe
    valid = ok & (u >= 0.0) & (u <= K.width) & (v >= 0.0) & (v <= K.height)
    uvd = np.stack([u, v, depth], axis=1)
    uvd[~valid] = 0.0
    n = len(pts)
    J_pc = np.zeros((n, 3, 3))
    J_pc[:, 0, 0] = f / safe
    J_pc[:, 0, 2] = f * pc[:, 0] / safe**2
    J_pc[:, 1, 1] = -f / safe
    J_pc[:, 1, 2] = -f * pc[:, 1] / safe**2
    J_pc[:, 2, 2] = -1.0
    J = np.einsum("nij,kj->nik", J_pc, R)
    J[~valid] = 0.0
    return uvd, valid, J


def backbone_forward(model: DvcModel, image_set: PosedImageSet, pts):
    """Representation vectors (M, d) for query points plus the caches needed
    for parameter and point gradients."""
    if len(image_set.images) == 0:
        raise EmptyViewSet("backbone query needs at least one view")
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    M = len(pts)
    chan_scale = 2.0 * image_set.radius / model.depth_scale
    caches = []
    y_sum = np.zeros((M, REPRESENTATION_DIM))
    for img in image_set.images:
        uvd, valid, J = _project_batch(img.view, pts)
        chan, dcu, dcv = bilinear_sample_with_gradient(
            img.channels, uvd[:, 0], uvd[:, 1])
        feat = np.empty((M, N_VIEW_INPUT))
        feat[:, 0] = chan[0]
        feat[:, 1] = chan[1] * chan_scale
        feat[:, 2:5] = chan[2:5].T
        feat[:, 5] = chan[5]
        feat[:, 6] = 1.0
        coord_in = uvd[:, 2:3] / model.depth_scale
        coord_out, coord_cache = model.coord_mlp.forward(coord_in)
        X = np.concatenate([feat, coord_out], axis=1)
        X[~valid] = 0.0
        y_n, mlp_cache = model.per_view_mlp.forward(X)
        y_sum += y_n
        caches.append({"valid": valid, "J": J, "dcu": dcu, "dcv": dcv,
                       "coord_cache": coord_cache, "mlp_cache": mlp_cache,
                       "chan_scale": chan_scale})
    n_views = len(image_set.images)
    return y_sum / n_views, {"views": caches, "n_views": n_views, "M": M}


def backbone_backward_params(model: DvcModel, cache, dY, grads):
    """Accumulate parameter gradients of the backbone given dL/dY."""
    d_per = dY / cache["n_views"]
    for vc in cache["views"]:
        dX, _ = model.per_view_mlp.backward(vc["mlp_cache"], d_per,
                                            grads["per_view"])
        dX = dX.copy()
        dX[~vc["valid"]] = 0.0
        model.coord_mlp.backward(vc["coord_cache"], dX[:, N_VIEW_INPUT:],
                                 grads["coord"])


def backbone_backward_points(model: DvcModel, cache, dY):
    """World-point gradients (M, 3) of a scalar with dL/dY given."""
    M = cache["M"]
    dP = np.zeros((M, 3))
    d_per = dY / cache["n_views"]
    for vc in cache["views"]:
        dX, _ = model.per_view_mlp.backward(vc["mlp_cache"], d_per)
        dX = dX.copy()
        dX[~vc["valid"]] = 0.0
        dfeat = dX[:, :N_VIEW_INPUT]
        dcoord_out = dX[:, N_VIEW_INPUT:]
        # channel part: chain through the bilinear interpolant
        w = np.ones(N_VIEW_INPUT - 1)
        w[1] = vc["chan_scale"]
        du = np.einsum("mc,cm->m", dfeat[:, :6] * w, vc["dcu"])
        dv = np.einsum("mc,cm->m", dfeat[:, :6] * w, vc["dcv"])
        # coordinate part: chain through the depth embedding
        dcoord_in, _ = model.coord_mlp.backward(vc["coord_cache"], dcoord_out)
        dd = dcoord_in[:, 0] / model.depth_scale
        duvd = np.stack([du, dv, dd], axis=1)
        dP += np.einsum("mi,mij->mj", duvd, vc["J"])
    return dP


def query_backbone(model: DvcModel, image_set: PosedImageSet, pts):
    """Representation vector(s) at one (3,) point or an (N, 3) batch."""
    arr = np.asarray(pts, dtype=float)
    y, _ = backbone_forward(model, image_set, arr)
    return y[0] if arr.ndim == 1 else y


# ---------------------------------------------------------------------------
# task features
# ---------------------------------------------------------------------------

def _check_task(model, task):
    if task not in model.heads:
        raise UnknownTask(f"unknown task {task!r}; have {sorted(model.heads)}")


def _head_forward(model: DvcModel, image_set, task, kp_world):
    """kp_world (N, K, 3) -> (h (N,), caches). Handles the sdf-baseline mode
    where grasp/hang heads consume detached keypoint sdf values."""
    N, K, _ = kp_world.shape
    flat = kp_world.reshape(N * K, 3)
    y, bb_cache = backbone_forward(model, image_set, flat)
    if model.sdf_baseline and task in ("grasp", "hang"):
        sdf_head = model.heads["sdf"][1]
        sdf_vals, sdf_cache = sdf_head.forward(y)
        head_in = sdf_vals.reshape(N, K)
        extra = {"detached": True}
    else:
        head_in = y.reshape(N, K * REPRESENTATION_DIM)
        extra = {"detached": False}
    head = model.heads[task][1]
    h, head_cache = head.forward(head_in)
    return h[:, 0], {"bb": bb_cache, "head": head_cache, "head_in_shape": head_in.shape,
                     "y_shape": y.shape, **extra}


def _head_backward_to_y(model, task, cache, dh):
    """dL/dh (N,) -> dL/dY on the backbone output, or None if detached."""
    head = model.heads[task][1]
    dIn, _ = head.backward(cache["head"], dh[:, None])
    if cache["detached"]:
        return None
    return dIn.reshape(cache["y_shape"])


def task_keypoints_world(model: DvcModel, task, q) -> np.ndarray:
    _check_task(model, task)
    kps = model.heads[task][0]
    if task == "sdf":
        p = np.asarray(q, dtype=float).reshape(3)
        return p[None, :] + kps
    return q.apply(kps)


def task_feature(model: DvcModel, image_set: PosedImageSet, task, q) -> float:
    """Scalar interaction feature; `q` is a Pose (grasp/hang) or point (sdf)."""
    _check_task(model, task)
    kp = task_keypoints_world(model, task, q)
    h, _ = _head_forward(model, image_set, task, kp[None])
    return float(h[0])


def task_feature_batch(model, image_set, task, poses):
    _check_task(model, task)
    if task == "sdf":
        pts = np.atleast_2d(np.asarray(poses, dtype=float))
        kp = pts[:, None, :]
    else:
        kp = np.stack([p.apply(model.heads[task][0]) for p in poses])
    h, _ = _head_forward(model, image_set, task, kp)
    return h


def task_point_grads(model, image_set, task, kp_world):
    """(h, dh/d(keypoint) (K, 3)) for keypoints given directly in world space."""
    _check_task(model, task)
    kp_world = np.asarray(kp_world, dtype=float)
    h, cache = _head_forward(model, image_set, task, kp_world[None])
    dY = _head_backward_to_y(model, task, cache, np.ones(1))
    if dY is None:
        raise ModelError("point gradients unavailable for detached baseline heads")
    dP = backbone_backward_points(model, cache["bb"], dY)
    return float(h[0]), dP.reshape(kp_world.shape)


def task_feature_jacobian(model, image_set, task, q):
    """(h, 6-vector gradient) in the right chart of the pose q.

    For q' = q o exp(delta): d(keypoint)/d(delta) = [R | -R [kp_local]x].
    """
    _check_task(model, task)
    if task == "sdf":
        p = np.asarray(q, dtype=float).reshape(3)
        h, grad = sdf_point_gradient(model, image_set, p[None])
        return float(h[0]), grad[0]
    kps_local = model.heads[task][0]
    kp_world = q.apply(kps_local)
    h, dP = task_point_grads(model, image_set, task, kp_world)
    # q' = q o exp(d): dp/dv = R, dp/dw = -R [kp]x, so the pullbacks are
    # R^T dP and +[kp]x R^T dP
    R = q.rotation_matrix()
    grad = np.zeros(6)
    for k in range(len(kps_local)):
        local = R.T @ dP[k]
        grad[:3] += local
        grad[3:] += skew(kps_local[k]) @ local
    return h, grad


def sdf_point_gradient(model, image_set, pts):
    """Learned sdf feature values and world gradients at (N, 3) points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    h, cache = _head_forward(model, image_set, "sdf", pts[:, None, :])
    dY = _head_backward_to_y(model, "sdf", cache, np.ones(len(pts)))
    dP = backbone_backward_points(model, cache["bb"], dY)
    return h, dP


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sdf_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction/target length mismatch")
    return float(np.mean(np.abs(pred - target)))


def sign_agnostic_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction/target length mismatch")
    return float(np.mean(np.abs(np.abs(pred) - target)))


def total_loss(l_sdf, l_grasp, l_hang) -> float:
    return float(l_sdf + l_grasp + l_hang)


def _l1_grad(pred, target):
    return np.sign(pred - target) / len(pred)


def _sign_agnostic_grad(pred, target):
    return np.sign(np.abs(pred) - target) * np.sign(pred) / len(pred)


# ---------------------------------------------------------------------------
# pose sampling for training targets
# ---------------------------------------------------------------------------

def se3_distance_to_set(pose7, feasible7) -> float:
    """Min 7-vector Euclidean distance with sign-aligned quaternions."""
    pose7 = np.asarray(pose7, dtype=float)
    feasible7 = np.atleast_2d(np.asarray(feasible7, dtype=float))
    if len(feasible7) == 0:
        raise EmptyFeasibleSet("no feasible poses")
    q = feasible7[:, 3:]
    sign = np.where(q @ pose7[3:] < 0.0, -1.0, 1.0)
    dq = q * sign[:, None] - pose7[3:]
    dt = feasible7[:, :3] - pose7[:3]
    return float(np.sqrt((dt * dt).sum(axis=1) + (dq * dq).sum(axis=1)).min())


def sample_training_pose(feasible7, rng, sigma_t: float = 0.15):
    """Blend of a random feasible pose and a random pose, with its unsigned
    distance to the feasible set.

    Translations blend linearly; quaternions are sign-aligned then linearly
    interpolated and renormalized.
    """
    feasible7 = np.atleast_2d(np.asarray(feasible7, dtype=float))
    if len(feasible7) == 0:
        raise EmptyFeasibleSet("no feasible poses")
    j = rng.integers(len(feasible7))
    t = rng.uniform()
    t_rand = rng.normal(0.0, sigma_t, size=3)
    q_rand = rng.normal(size=4)
    q_rand /= np.linalg.norm(q_rand)
    base = feasible7[j]
    q_feas = base[3:]
    if q_feas @ q_rand < 0.0:
        q_rand = -q_rand
    trans = t * base[:3] + (1.0 - t) * t_rand
    quat = t * q_feas + (1.0 - t) * q_rand
    quat /= np.linalg.norm(quat)
    pose7 = np.concatenate([trans, quat])
    return Pose.from_vector7(pose7), se3_distance_to_set(pose7, feasible7)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    """One object's contribution to a train step."""

    views: PosedImageSet
    sdf_points: np.ndarray
    sdf_targets: np.ndarray
    grasp_poses: list
    grasp_targets: np.ndarray
    hang_poses: list
    hang_targets: np.ndarray


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = dc_field(default_factory=list)
    v: list = dc_field(default_factory=list)

    def ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def make_grads(model: DvcModel):
    grads = {"per_view": model.per_view_mlp.zero_grads(),
             "coord": model.coord_mlp.zero_grads()}
    for task, (_, mlp) in model.heads.items():
        grads[f"head_{task}"] = mlp.zero_grads()
    return grads


def train_step(model: DvcModel, batch, opt: AdamState):
    """One Adam update over a list of TrainSamples. Returns per-task losses."""
    grads = make_grads(model)
    losses = {"sdf": 0.0, "grasp": 0.0, "hang": 0.0}
    for sample in batch:
        ls = _object_forward_backward_full(model, sample, grads)
        for k in losses:
            losses[k] += ls[k] / len(batch)
    losses["total"] = total_loss(losses["sdf"], losses["grasp"], losses["hang"])
    if not np.isfinite(losses["total"]):
        raise NonFiniteLoss(f"non-finite training loss: {losses}")
    params = model.params()
    flat_grads = _flatten_grads(model, grads, scale=1.0 / len(batch))
    opt.ensure(params)
    opt.step += 1
    b1c = 1.0 - opt.beta1 ** opt.step
    b2c = 1.0 - opt.beta2 ** opt.step
    for p, g, m, v in zip(params, flat_grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / b1c) / (np.sqrt(v / b2c) + opt.eps)
    return model, losses


def _flatten_grads(model, grads, scale=1.0):
    out = []
    keys = ["per_view", "coord"] + [f"head_{t}" for t in model.heads]
    for key in keys:
        for dW, db in grads[key]:
            out.append(dW * scale)
            out.append(db * scale)
    return out


def _object_forward_backward_full(model, sample: TrainSample, grads):
    """Forward + backward for one object, accumulating head and backbone grads."""
    losses = {}
    image_set = sample.views

    # sdf task
    pts = np.asarray(sample.sdf_points, dtype=float)
    h_sdf, cache = _head_forward(model, image_set, "sdf", pts[:, None, :])
    losses["sdf"] = sdf_loss(h_sdf, sample.sdf_targets)
    dh = _l1_grad(h_sdf, sample.sdf_targets)
    model.heads["sdf"][1].backward(cache["head"], dh[:, None], grads["head_sdf"])
    dY = _head_backward_to_y(model, "sdf", cache, dh)
    backbone_backward_params(model, cache["bb"], dY, grads)

    for task, poses, targets in (("grasp", sample.grasp_poses, sample.grasp_targets),
                                 ("hang", sample.hang_poses, sample.hang_targets)):
        if len(poses) == 0:
            losses[task] = 0.0
            continue
        kp = np.stack([p.apply(model.heads[task][0]) for p in poses])
        h, cache = _head_forward(model, image_set, task, kp)
        losses[task] = sign_agnostic_loss(h, np.asarray(targets, dtype=float))
        dh = _sign_agnostic_grad(h, np.asarray(targets, dtype=float))
        model.heads[task][1].backward(cache["head"], dh[:, None],
                                      grads[f"head_{task}"])
        dY = _head_backward_to_y(model, task, cache, dh)
        if dY is not None:
            backbone_backward_params(model, cache["bb"], dY, grads)
    return losses


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model: DvcModel, path):
    with open(path, "wb") as fh:
        fh.write(b"DVCM")
        fh.write(struct.pack("<IBd", 1, int(model.sdf_baseline), model.depth_scale))
        tasks = sorted(model.heads)
        fh.write(struct.pack("<I", len(tasks)))
        named = [("per_view", model.per_view_mlp), ("coord", model.coord_mlp)]
        for task in tasks:
            kps, mlp = model.heads[task]
            name = task.encode()
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", len(kps)))
            fh.write(np.asarray(kps, dtype="<f8").tobytes())
            named.append((f"head_{task}", mlp))
        for _, mlp in named:
            fh.write(struct.pack("<I", len(mlp.weights)))
            for W, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
                fh.write(struct.pack("<IIB", W.shape[0], W.shape[1],
                                     1 if act == "relu" else 0))
                fh.write(W.astype("<f4").tobytes())
                fh.write(b.astype("<f4").tobytes())


def load_model(path) -> DvcModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"DVCM":
            raise ModelError(f"bad checkpoint magic: {magic!r}")
        version, baseline, depth_scale = struct.unpack("<IBd", fh.read(13))
        if version != 1:
            raise ModelError(f"unsupported checkpoint version {version}")
        (n_tasks,) = struct.unpack("<I", fh.read(4))
        keypoints = {}
        order = []
        for _ in range(n_tasks):
            (nlen,) = struct.unpack("<I", fh.read(4))
            task = fh.read(nlen).decode()
            (nk,) = struct.unpack("<I", fh.read(4))
            kps = np.frombuffer(fh.read(8 * 3 * nk), dtype="<f8").reshape(nk, 3)
            keypoints[task] = kps.copy()
            order.append(task)

        def read_mlp():
            (n_layers,) = struct.unpack("<I", fh.read(4))
            weights, biases, acts = [], [], []
            for _ in range(n_layers):
                rows, cols, act = struct.unpack("<IIB", fh.read(9))
                W = np.frombuffer(fh.read(4 * rows * cols), dtype="<f4")
                b = np.frombuffer(fh.read(4 * rows), dtype="<f4")
                weights.append(W.astype(float).reshape(rows, cols))
                biases.append(b.astype(float))
                acts.append("relu" if act else "linear")
            return Mlp(weights=weights, biases=biases, activations=acts)

        per_view = read_mlp()
        coord = read_mlp()
        heads = {}
        for task in order:
            heads[task] = (keypoints[task], read_mlp())
    return DvcModel(per_view_mlp=per_view, coord_mlp=coord, heads=heads,
                    sdf_baseline=bool(baseline), depth_scale=depth_scale)
