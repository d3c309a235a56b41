"""Interaction constraints compiled from discrete action skeletons.

Each skeleton action (grasp / hang / posefcp) contributes its feature
equality at the phase keyframe, a zero-impact joint-velocity constraint, an
approach-acceleration constraint, and attachment (static joint) constraints
for every phase where an object is held or hung. Collision hinge residuals
cover robot-object, hook-object, object-table and robot-table pairs along
the whole path.

All Jacobians are analytic in the right pose chart; finite differences only
validate them in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import Field, eval_gradient, eval_sdf
from .geometry import (
    Pose,
    left_to_right_jacobian,
    pose_log,
    skew,
    so3_right_jacobian_inv,
    quat_log,
)
from .kinematics import KinematicTree, fk_jacobian, forward_kinematics
from .optimizer import Term, acceleration_residual


class ConstraintError(Exception):
    pass


class InconsistentSkeleton(ConstraintError):
    pass


class IndexOutOfPhase(ConstraintError):
    pass


class EmptyCloud(ConstraintError):
    pass


class ZeroGradient(ConstraintError):
    pass


# ---------------------------------------------------------------------------
# collision features (pointwise)
# ---------------------------------------------------------------------------

def collision_sphere(f: Field, center, radius: float) -> float:
    """Signed clearance between a sphere and the field's solid."""
    return float(eval_sdf(f, center)) - radius


def collision_capsule(f: Field, a, b, radius: float) -> float:
    """Min field value along segment a-b minus the radius: 64-sample bracket
    plus golden-section refinement to 1e-6 m."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = np.linalg.norm(b - a)
    ts = np.linspace(0.0, 1.0, 64)
    d = eval_sdf(f, a[None] + ts[:, None] * (b - a))
    k = int(np.argmin(d))
    lo = ts[max(k - 1, 0)]
    hi = ts[min(k + 1, len(ts) - 1)]
    if length > 0.0:
        gr = (np.sqrt(5.0) - 1.0) / 2.0
        c = hi - gr * (hi - lo)
        dpt = lo + gr * (hi - lo)
        fc = float(eval_sdf(f, a + c * (b - a)))
        fd = float(eval_sdf(f, a + dpt * (b - a)))
        while (hi - lo) * length > 1e-6:
            if fc < fd:
                hi, dpt, fd = dpt, c, fc
                c = hi - gr * (hi - lo)
                fc = float(eval_sdf(f, a + c * (b - a)))
            else:
                lo, c, fc = c, dpt, fd
                dpt = lo + gr * (hi - lo)
                fd = float(eval_sdf(f, a + dpt * (b - a)))
        best = min(fc, fd, float(d[k]))
    else:
        best = float(d[k])
    return best - radius


def collision_sphere_cloud(f: Field, cloud) -> float:
    """Min clearance over an (n, 4) sphere cloud."""
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    if len(cloud) == 0:
        raise EmptyCloud("empty sphere cloud")
    return float((eval_sdf(f, cloud[:, :3]) - cloud[:, 3]).min())


def oppose_feature(f: Field, finger1, finger2):
    """Sum of the two finger-to-surface pull vectors; zero when the fingers
    pinch the surface symmetrically."""
    out = np.zeros(3)
    for center, radius in (finger1, finger2):
        center = np.asarray(center, dtype=float)
        margin = float(eval_sdf(f, center)) - radius
        g = eval_gradient(f, center)
        n = np.linalg.norm(g)
        if n < 1e-6:
            raise ZeroGradient("field gradient vanished at a finger center")
        out += margin * (-g / n)
    return out


# ---------------------------------------------------------------------------
# feature providers
# ---------------------------------------------------------------------------

class LearnedFeatures:
    """Task features and learned-sdf collision queries from a trained model
    and a world-aligned posed image set."""

    def __init__(self, model, image_set):
        self.model = model
        self.image_set = image_set

    def task(self, task, q: Pose):
        from .model import task_feature_jacobian

        return task_feature_jacobian(self.model, self.image_set, task, q)

    def sdf(self, pts):
        from .model import sdf_point_gradient

        return sdf_point_gradient(self.model, self.image_set, pts)


class GroundTruthFeatures:
    """Analytic-field stand-in with the same query surface (oracle runs)."""

    def __init__(self, field: Field, gripper=None, hook=None):
        self.field = field
        self.gripper = gripper
        self.hook = hook

    def sdf(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return eval_sdf(self.field, pts), eval_gradient(self.field, pts)

    def task(self, task, q: Pose):
        if task != "sdf":
            raise ConstraintError(
                "ground-truth provider exposes only the sdf feature; "
                "hand-engineered grasp residuals live in oppose_residual_term")
        d = float(eval_sdf(self.field, q.t))
        g = eval_gradient(self.field, q.t)
        grad = np.zeros(6)
        grad[:3] = q.rotation_matrix().T @ g
        return d, grad


def pose_collision_term(sdf_fn, cloud, floor: float = 0.0):
    """Pose -> (hinge clearance residuals, analytic jacobian) for a sphere
    cloud rigidly attached to the pose; `sdf_fn(pts) -> (vals, grads)`."""
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))

    def term(q: Pose):
        centers = q.apply(cloud[:, :3])
        vals, grads = sdf_fn(centers)
        margins = vals - cloud[:, 3]
        r = np.maximum(floor - margins, 0.0)
        J = np.zeros((len(cloud), 6))
        R = q.rotation_matrix()
        for i in range(len(cloud)):
            if r[i] <= 0.0:
                continue
            dC = np.concatenate([R, -R @ skew(cloud[i, :3])], axis=1)
            J[i] = -(grads[i] @ dC)
        return r, J

    return term


def oppose_residual_term(f: Field, gripper, align_weight: float = 0.05):
    """Pose -> (5-vector residual, FD jacobian): the hand-engineered grasp
    feature. Rows 0:3 are the oppose pull sum; rows 3:5 vanish when the
    contact normals sit in the closing-axis friction cone, which aligns the
    gripper the way finger-body pulls would."""
    tip1 = gripper.finger1[:, :3].mean(axis=0), float(gripper.finger1[:, 3].mean())
    tip2 = gripper.finger2[:, :3].mean(axis=0), float(gripper.finger2[:, 3].mean())

    def value(p: Pose):
        c1 = p.apply(tip1[0])
        c2 = p.apply(tip2[0])
        r = np.zeros(5)
        r[:3] = oppose_feature(f, (c1, tip1[1]), (c2, tip2[1]))
        axis = p.rotation_matrix()[:, 0]
        n1 = eval_gradient(f, c1)
        n2 = eval_gradient(f, c2)
        n1 = n1 / (np.linalg.norm(n1) + 1e-12)
        n2 = n2 / (np.linalg.norm(n2) + 1e-12)
        r[3] = align_weight * (1.0 - n1 @ axis)
        r[4] = align_weight * (1.0 + n2 @ axis)
        return r

    def term(q: Pose):
        r = value(q)
        J = np.zeros((5, 6))
        h = 1e-6
        from .geometry import pose_exp

        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            J[:, i] = (value(q.compose(pose_exp(d)))
                       - value(q.compose(pose_exp(-d)))) / (2 * h)
        return r, J

    return term


# ---------------------------------------------------------------------------
# skeleton / scene state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonAction:
    verb: str  # grasp | hang | posefcp
    actor: str  # "robot/frame" for grasp, static frame name for hang
    obj: str
    target: Pose = None  # resolved posefcp target transform

    def __post_init__(self):
        if self.verb not in ("grasp", "hang", "posefcp"):
            raise InconsistentSkeleton(f"unknown verb {self.verb!r}")


@dataclass(frozen=True)
class Skeleton:
    actions: tuple
    steps_per_phase: int = 10

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    @property
    def n_phases(self):
        return len(self.actions)

    @property
    def n_steps(self):
        return self.n_phases * self.steps_per_phase


@dataclass
class SceneObject:
    name: str
    field: Field  # ground-truth field at the initial world placement
    center: np.ndarray  # initial world center of the object
    features: object  # task-feature provider (learned or ground-truth)
    cloud: np.ndarray  # (n, 4) surface spheres, initial world coords
    coll_features: object = None  # sdf provider for collision (defaults to features)

    def __post_init__(self):
        if self.coll_features is None:
            self.coll_features = self.features


@dataclass
class SceneRobot:
    name: str
    tree: KinematicTree
    home: np.ndarray


@dataclass
class StaticFrame:
    name: str
    pose: Pose
    cloud: np.ndarray = None  # (n, 4) world spheres (e.g. the hook shaft)
    hook: object = None


@dataclass
class TrajState:
    """Trajectory decision state: joint paths and per-object transforms.

    Object transforms exist from their activation step onward; earlier steps
    are implicit identities ("static before first grasp")."""

    x: dict  # robot -> (KT, n) array
    dq: dict  # obj -> {t: Pose}
    home: dict  # robot -> (n,)

    def x_at(self, robot, t):
        if t <= 0:
            return self.home[robot]
        return self.x[robot][t - 1]

    def dq_at(self, obj, t):
        return self.dq.get(obj, {}).get(t, Pose.identity())

    def copy(self):
        return TrajState(x={k: v.copy() for k, v in self.x.items()},
                         dq={k: dict(v) for k, v in self.dq.items()},
                         home=self.home)


def make_retract(layout):
    def retract(state: TrajState, delta):
        out = state.copy()
        for key, (off, width) in layout.index.items():
            d = delta[off:off + width]
            if key[0] == "x":
                _, robot, t = key
                out.x[robot][t - 1] = out.x[robot][t - 1] + d
            else:
                _, obj, t = key
                from .geometry import pose_exp

                out.dq[obj][t] = out.dq[obj][t].compose(pose_exp(d))
        return out

    return retract


# ---------------------------------------------------------------------------
# term builders
# ---------------------------------------------------------------------------

def _fk_J(tree, x, frame):
    return fk_jacobian(tree, x, frame)


def path_cost_terms(robot: SceneRobot, KT: int):
    n = robot.tree.n_joints
    terms = []
    for t in range(1, KT + 1):
        blocks = [("x", robot.name, s) for s in range(max(t - 2, 1), t + 1)]

        def ev(state, t=t, robot=robot.name):
            r = acceleration_residual(state.x_at(robot, t - 2),
                                      state.x_at(robot, t - 1),
                                      state.x_at(robot, t))
            jac = {("x", robot, t): np.eye(n)}
            if t - 1 >= 1:
                jac[("x", robot, t - 1)] = -2.0 * np.eye(n)
            if t - 2 >= 1:
                jac[("x", robot, t - 2)] = np.eye(n)
            return r, jac

        terms.append(Term(name=f"accel/{robot.name}/{t}", kind="cost", dim=n,
                          blocks=blocks, eval=ev))
    return terms


def joint_limit_term(robot: SceneRobot, KT: int, weight: float = 1.0):
    """Hinge equality pushing joints inside their limits along the path."""
    lo, hi = robot.tree.limits()
    n = robot.tree.n_joints

    def ev(state):
        r = np.zeros(KT * n)
        jac = {}
        for t in range(1, KT + 1):
            x = state.x_at(robot.name, t)
            low = np.maximum(lo - x, 0.0)
            high = np.maximum(x - hi, 0.0)
            seg = slice((t - 1) * n, t * n)
            r[seg] = weight * (high - low)
            J = np.zeros((KT * n, n))
            active = np.zeros(n)
            active[x > hi] = 1.0
            active[x < lo] = -1.0
            J[seg] = weight * np.diag(active)
            if np.any(active):
                jac[("x", robot.name, t)] = J
        return r, jac

    blocks = [("x", robot.name, t) for t in range(1, KT + 1)]
    return Term(name=f"limits/{robot.name}", kind="eq", dim=KT * n,
                blocks=blocks, eval=ev)


def zero_impact_term(robot: SceneRobot, t: int):
    n = robot.tree.n_joints

    def ev(state):
        r = state.x_at(robot.name, t) - state.x_at(robot.name, t - 1)
        jac = {("x", robot.name, t): np.eye(n)}
        if t - 1 >= 1:
            jac[("x", robot.name, t - 1)] = -np.eye(n)
        return r, jac

    blocks = [("x", robot.name, s) for s in range(max(t - 1, 1), t + 1)]
    return Term(name=f"zero_impact/{robot.name}/{t}", kind="eq", dim=n,
                blocks=blocks, eval=ev)


def feature_eq_term(action: SkeletonAction, robot: SceneRobot, frame: str,
                    obj: SceneObject, t: int, obj_active,
                    static_pose: Pose = None):
    """Learned-feature equality h(dq^-1 o actor_pose) = 0 at the keyframe."""
    task = action.verb

    def ev(state):
        if robot is not None:
            P, Jfk = _fk_J(robot.tree, state.x_at(robot.name, t), frame)
        else:
            P, Jfk = static_pose, None
        D = state.dq_at(obj.name, t)
        Q = D.inverse().compose(P)
        h, g = obj.features.task(task, Q)
        jac = {}
        if Jfk is not None:
            jac[("x", robot.name, t)] = (g @ Jfk)[None, :]
        if obj_active(t):
            L = left_to_right_jacobian(Q)
            jac[("dq", obj.name, t)] = (-(L.T @ g))[None, :]
        return np.array([h]), jac

    blocks = ([("x", robot.name, t)] if robot is not None else []) \
        + ([("dq", obj.name, t)] if obj_active(t) else [])
    return Term(name=f"{task}/{obj.name}/{t}", kind="eq", dim=1, blocks=blocks,
                eval=ev)


def static_pin_term(obj: SceneObject, t: int):
    """dq_t = identity: the object has not moved by its grasp keyframe."""

    def ev(state):
        D = state.dq_at(obj.name, t)
        r = pose_log(D)
        J = np.zeros((6, 6))
        J[:3, :3] = D.rotation_matrix()
        J[3:, 3:] = so3_right_jacobian_inv(quat_log(D.q))
        return r, {("dq", obj.name, t): J}

    return Term(name=f"static_pin/{obj.name}/{t}", kind="eq", dim=6,
                blocks=[("dq", obj.name, t)], eval=ev)


def attachment_term(obj: SceneObject, t: int, robot: SceneRobot, frame: str,
                    obj_active, static_pose: Pose = None):
    """Static joint: relative pose of dq w.r.t. the parent frame constant
    between steps t-1 and t."""

    def chart_jacobians(A, B):
        """r = pose_log(A^-1 B); returns (r, dr/d(right chart of A),
        dr/d(right chart of B))."""
        C = A.inverse().compose(B)
        r = pose_log(C)
        Rc = C.rotation_matrix()
        Jr_inv = so3_right_jacobian_inv(quat_log(C.q))
        dB = np.zeros((6, 6))
        dB[:3, :3] = Rc
        dB[3:, 3:] = Jr_inv
        # A e^a perturbs C from the left: t' = Exp(-a_w)(t_C - a_v) and the
        # left inverse rotation Jacobian is Jr_inv at -phi
        dA = np.zeros((6, 6))
        dA[:3, :3] = -np.eye(3)
        dA[:3, 3:] = skew(C.t)
        dA[3:, 3:] = -so3_right_jacobian_inv(-quat_log(C.q))
        return r, dA, dB

    def ev(state):
        if robot is not None:
            P0, J0 = _fk_J(robot.tree, state.x_at(robot.name, t - 1), frame)
            P1, J1 = _fk_J(robot.tree, state.x_at(robot.name, t), frame)
        else:
            P0 = P1 = static_pose
            J0 = J1 = None
        D0 = state.dq_at(obj.name, t - 1)
        D1 = state.dq_at(obj.name, t)
        A = P0.inverse().compose(D0)
        B = P1.inverse().compose(D1)
        r, dA, dB = chart_jacobians(A, B)
        jac = {}
        # dq charts map through identity: (D e^n) gives A e^n / B e^n
        if obj_active(t - 1):
            jac[("dq", obj.name, t - 1)] = dA
        if obj_active(t):
            jac[("dq", obj.name, t)] = dB
        if J0 is not None:
            # P e^p: A' = (P e^p)^-1 D = e^{-p} A -> right chart of A is
            # L(A) (-p) with e^{m} A = A e^{L m}
            LA = left_to_right_jacobian(A)
            LB = left_to_right_jacobian(B)
            if t - 1 >= 1:
                jac_x0 = dA @ (-LA @ J0)
                jac[("x", robot.name, t - 1)] = jac_x0
            jac[("x", robot.name, t)] = dB @ (-LB @ J1)
        return r, jac

    blocks = []
    if robot is not None:
        blocks += [("x", robot.name, s) for s in range(max(t - 1, 1), t + 1)]
    blocks += [("dq", obj.name, s) for s in (t - 1, t) if obj_active(s)]
    return Term(name=f"attach/{obj.name}/{t}", kind="eq", dim=6, blocks=blocks,
                eval=ev)


def approach_term(action, robot, frame, obj: SceneObject, t: int, obj_active,
                  a_approach: float, axis_sign: float, static_pose: Pose = None):
    """Object-center acceleration in the actor frame equals
    a_approach * (0, 0, axis_sign) over the final three phase steps."""

    def center_and_jac(state, s):
        D = state.dq_at(obj.name, s)
        c0 = obj.center
        c = D.apply(c0)
        # d c / d(dq chart): D e^n applied to c0
        Rd = D.rotation_matrix()
        dc = np.concatenate([Rd, -Rd @ skew(c0)], axis=1)  # (3, 6)
        return c, dc

    def ev(state):
        r = np.zeros(3)
        jac = {}
        coeffs = {t: 1.0, t - 1: -2.0, t - 2: 1.0}
        for s, w in coeffs.items():
            if robot is not None:
                P, Jfk = _fk_J(robot.tree, state.x_at(robot.name, s), frame)
            else:
                P, Jfk = static_pose, None
            c, dc = center_and_jac(state, s)
            R = P.rotation_matrix()
            p_local = R.T @ (c - P.t)
            r += w * p_local
            if obj_active(s):
                block = ("dq", obj.name, s)
                jac[block] = jac.get(block, 0.0) + w * (R.T @ dc)
            if Jfk is not None and s >= 1:
                # P e^p: p_local' = Exp(-p_w) (p_local - p_v)
                dP = np.concatenate([-np.eye(3), skew(p_local)], axis=1)
                block = ("x", robot.name, s)
                jac[block] = jac.get(block, 0.0) + w * (dP @ Jfk)
        r -= a_approach * np.array([0.0, 0.0, axis_sign])
        return r, jac

    blocks = []
    for s in (t - 2, t - 1, t):
        if robot is not None and s >= 1:
            blocks.append(("x", robot.name, s))
        if obj_active(s):
            blocks.append(("dq", obj.name, s))
    return Term(name=f"approach/{obj.name}/{t}", kind="eq", dim=3,
                blocks=sorted(set(blocks), key=str), eval=ev)


def pose_target_term(obj: SceneObject, t: int, target: Pose, name: str,
                     weight: float = 1.0, kind: str = "eq"):
    """6-dim residual pose_log(target^-1 dq_t); posefcp keyframes and pose
    regularizers share this shape."""

    def ev(state):
        D = state.dq_at(obj.name, t)
        C = target.inverse().compose(D)
        r = weight * pose_log(C)
        J = np.zeros((6, 6))
        J[:3, :3] = C.rotation_matrix()
        J[3:, 3:] = so3_right_jacobian_inv(quat_log(C.q))
        return r, {("dq", obj.name, t): weight * J}

    return Term(name=name, kind=kind, dim=6, blocks=[("dq", obj.name, t)],
                eval=ev)


# ---------------------------------------------------------------------------
# collision terms
# ---------------------------------------------------------------------------

def robot_object_collision_term(robot: SceneRobot, obj: SceneObject, KT: int,
                                obj_active, exempt, floor: float = 2e-3,
                                frames=None, weight: float = 1.0):
    """Hinge clearance between robot link spheres and an object's field over
    the whole path: r = weight * max(0, floor - margin), one row per
    (step, sphere)."""
    tree = robot.tree
    frames = frames if frames is not None else list(tree.link_clouds)
    counts = [len(tree.link_clouds[fr]) for fr in frames]
    n_sph = sum(counts)

    def ev(state):
        r = np.zeros(KT * n_sph)
        jac = {}
        # first pass: gather every queried point so the field/model is hit once
        steps = [t for t in range(1, KT + 1) if not exempt(t)]
        if not steps or n_sph == 0:
            return r, jac
        locals_all = np.empty((len(steps) * n_sph, 3))
        geo = []
        for si, t in enumerate(steps):
            x = state.x_at(robot.name, t)
            D = state.dq_at(obj.name, t)
            per_frame = []
            off = 0
            for fr, cnt in zip(frames, counts):
                cloud = tree.link_clouds[fr]
                P, Jfk = _fk_J(tree, x, fr)
                centers = P.apply(cloud[:, :3])
                local = D.inverse().apply(centers)
                locals_all[si * n_sph + off: si * n_sph + off + cnt] = local
                per_frame.append((fr, cnt, cloud, P, Jfk))
                off += cnt
            geo.append((t, D, per_frame))
        vals, grads = obj.coll_features.sdf(locals_all)
        for si, (t, D, per_frame) in enumerate(geo):
            Rd = D.rotation_matrix()
            Jx = np.zeros((KT * n_sph, tree.n_joints))
            Jd = np.zeros((KT * n_sph, 6))
            any_active = False
            off = 0
            for fr, cnt, cloud, P, Jfk in per_frame:
                Rp = P.rotation_matrix()
                for i in range(cnt):
                    qi = si * n_sph + off + i
                    m = vals[qi] - cloud[i, 3]
                    if m >= floor:
                        continue
                    any_active = True
                    row = (t - 1) * n_sph + off + i
                    r[row] = weight * (floor - m)
                    g_local = grads[qi]
                    g_world = Rd @ g_local
                    dC = np.concatenate(
                        [Rp, -Rp @ skew(cloud[i, :3])], axis=1) @ Jfk
                    Jx[row] = -weight * (g_world @ dC)
                    dW = np.concatenate(
                        [-np.eye(3), skew(locals_all[qi])], axis=1)
                    Jd[row] = -weight * (g_local @ dW)
                off += cnt
            if any_active:
                jac[("x", robot.name, t)] = Jx
                if obj_active(t):
                    jac[("dq", obj.name, t)] = Jd
        return r, jac

    blocks = [("x", robot.name, t) for t in range(1, KT + 1)]
    blocks += [("dq", obj.name, t) for t in range(1, KT + 1) if obj_active(t)]
    return Term(name=f"coll/{robot.name}:{obj.name}", kind="eq",
                dim=KT * n_sph, blocks=blocks, eval=ev)


def cloud_object_collision_term(name: str, cloud_world: np.ndarray,
                                obj: SceneObject, KT: int, obj_active,
                                floor: float = 5e-4, weight: float = 1.0):
    """Static world sphere cloud (e.g. a hook) vs a moving object field."""
    n_sph = len(cloud_world)

    def ev(state):
        r = np.zeros(KT * n_sph)
        jac = {}
        steps = [t for t in range(1, KT + 1) if obj_active(t)]
        if not steps or n_sph == 0:
            return r, jac
        locals_all = np.empty((len(steps) * n_sph, 3))
        for si, t in enumerate(steps):
            D = state.dq_at(obj.name, t)
            locals_all[si * n_sph:(si + 1) * n_sph] = \
                D.inverse().apply(cloud_world[:, :3])
        vals, grads = obj.coll_features.sdf(locals_all)
        for si, t in enumerate(steps):
            Jd = np.zeros((KT * n_sph, 6))
            any_active = False
            for i in range(n_sph):
                qi = si * n_sph + i
                m = vals[qi] - cloud_world[i, 3]
                if m >= floor:
                    continue
                any_active = True
                row = (t - 1) * n_sph + i
                r[row] = weight * (floor - m)
                dW = np.concatenate([-np.eye(3), skew(locals_all[qi])], axis=1)
                Jd[row] = -weight * (grads[qi] @ dW)
            if any_active:
                jac[("dq", obj.name, t)] = Jd
        return r, jac

    blocks = [("dq", obj.name, t) for t in range(1, KT + 1) if obj_active(t)]
    return Term(name=name, kind="eq", dim=KT * n_sph, blocks=blocks, eval=ev)


def object_table_collision_term(obj: SceneObject, KT: int, obj_active,
                                floor: float = 2e-3, weight: float = 1.0):
    """Object surface spheres above the z=0 table plane."""
    cloud = obj.cloud
    n_sph = len(cloud)

    def ev(state):
        r = np.zeros(KT * n_sph)
        jac = {}
        for t in range(1, KT + 1):
            if not obj_active(t):
                continue
            D = state.dq_at(obj.name, t)
            Rd = D.rotation_matrix()
            world = D.apply(cloud[:, :3])
            margins = world[:, 2] - cloud[:, 3]
            Jd = np.zeros((KT * n_sph, 6))
            any_active = False
            for i in range(n_sph):
                if margins[i] >= floor:
                    continue
                any_active = True
                row = (t - 1) * n_sph + i
                r[row] = weight * (floor - margins[i])
                dC = np.concatenate([Rd, -Rd @ skew(cloud[i, :3])], axis=1)
                Jd[row] = -weight * dC[2]
            if any_active:
                jac[("dq", obj.name, t)] = Jd
        return r, jac

    blocks = [("dq", obj.name, t) for t in range(1, KT + 1) if obj_active(t)]
    return Term(name=f"table/{obj.name}", kind="eq", dim=KT * n_sph,
                blocks=blocks, eval=ev)


def robot_table_collision_term(robot: SceneRobot, KT: int, floor: float = 5e-3,
                               frames=None, weight: float = 1.0):
    tree = robot.tree
    frames = frames if frames is not None else [
        f for f in tree.link_clouds if f not in ("shoulder",)]
    counts = [len(tree.link_clouds[fr]) for fr in frames]
    n_sph = sum(counts)

    def ev(state):
        r = np.zeros(KT * n_sph)
        jac = {}
        for t in range(1, KT + 1):
            x = state.x_at(robot.name, t)
            Jx = np.zeros((KT * n_sph, tree.n_joints))
            any_active = False
            off = 0
            for fr, cnt in zip(frames, counts):
                cloud = tree.link_clouds[fr]
                P, Jfk = _fk_J(tree, x, fr)
                centers = P.apply(cloud[:, :3])
                margins = centers[:, 2] - cloud[:, 3]
                Rp = P.rotation_matrix()
                for i in range(cnt):
                    if margins[i] >= floor:
                        continue
                    any_active = True
                    row = (t - 1) * n_sph + off + i
                    r[row] = weight * (floor - margins[i])
                    dC = np.concatenate(
                        [Rp, -Rp @ skew(cloud[i, :3])], axis=1) @ Jfk
                    Jx[row] = -weight * dC[2]
                off += cnt
            if any_active:
                jac[("x", robot.name, t)] = Jx
        return r, jac

    blocks = [("x", robot.name, t) for t in range(1, KT + 1)]
    return Term(name=f"table/{robot.name}", kind="eq", dim=KT * n_sph,
                blocks=blocks, eval=ev)


# ---------------------------------------------------------------------------
# skeleton compilation
# ---------------------------------------------------------------------------

APPROACH_ACCEL = 0.1  # m / step^2


@dataclass
class CompiledProblem:
    modes: list  # per phase: {obj: ("static",) | ("grasped", robot, frame) | ("hung", frame)}
    terms: list
    collision_terms: list
    layout_entries: list
    activation: dict  # obj -> first variable step
    KT: int
    steps_per_phase: int

    @property
    def all_terms(self):
        return self.terms + self.collision_terms


def compile_skeleton(skeleton: Skeleton, robots, objects, statics,
                     a_approach: float = APPROACH_ACCEL,
                     collision_weight: float = 1.0,
                     pose_regularizers=None):
    """Compile actions into residual terms.

    robots: dict name -> SceneRobot; objects: dict name -> SceneObject;
    statics: dict name -> StaticFrame. Returns a CompiledProblem whose
    layout entries are ordered per step: robot joints then active object
    tangents (the paper-style variable accounting)."""
    T = skeleton.steps_per_phase
    KT = skeleton.n_steps

    # resolve activations and modes
    activation = {}
    holder = {}
    modes = []
    state_now = {o: ("static",) for o in objects}
    for k, action in enumerate(skeleton.actions, start=1):
        if action.obj not in objects:
            raise InconsistentSkeleton(f"unknown object {action.obj!r}")
        if action.verb == "grasp":
            robot_name, frame = _split_actor(action.actor, robots)
            if state_now[action.obj][0] != "static":
                raise InconsistentSkeleton(
                    f"object {action.obj} grasped twice without release")
            activation.setdefault(action.obj, k * T)
            state_now = dict(state_now)
            state_now[action.obj] = ("grasped", robot_name, frame)
            holder[action.obj] = (robot_name, frame)
        elif action.verb in ("hang", "posefcp"):
            if state_now[action.obj][0] != "grasped":
                raise InconsistentSkeleton(
                    f"{action.verb} of {action.obj} before it is grasped")
            if action.verb == "hang":
                if action.actor not in statics:
                    raise InconsistentSkeleton(
                        f"unknown static frame {action.actor!r}")
                state_now = dict(state_now)
                state_now[action.obj] = ("hung", action.actor)
        modes.append(state_now)

    def obj_active_fn(obj):
        start = activation.get(obj, KT + 1)
        return lambda t, start=start: start <= t <= KT

    terms = []
    for robot in robots.values():
        terms.extend(path_cost_terms(robot, KT))
        terms.append(joint_limit_term(robot, KT))

    for k, action in enumerate(skeleton.actions, start=1):
        t_k = k * T
        obj = objects[action.obj]
        active = obj_active_fn(action.obj)
        if action.verb == "grasp":
            robot_name, frame = _split_actor(action.actor, robots)
            robot = robots[robot_name]
            terms.append(feature_eq_term(action, robot, frame, obj, t_k, active))
            terms.append(zero_impact_term(robot, t_k))
            terms.append(approach_term(action, robot, frame, obj, t_k, active,
                                       a_approach, -1.0))
            terms.append(static_pin_term(obj, t_k))
        elif action.verb == "hang":
            hook_frame = statics[action.actor]
            carrier_name, carrier_frame = holder[action.obj]
            carrier = robots[carrier_name]
            terms.append(feature_eq_term(action, None, None, obj, t_k, active,
                                         static_pose=hook_frame.pose))
            terms.append(zero_impact_term(carrier, t_k))
            terms.append(approach_term(action, None, None, obj, t_k, active,
                                       a_approach, +1.0,
                                       static_pose=hook_frame.pose))
        else:  # posefcp
            carrier_name, _ = holder[action.obj]
            terms.append(pose_target_term(obj, t_k, action.target,
                                          name=f"posefcp/{action.obj}/{t_k}"))
            terms.append(zero_impact_term(robots[carrier_name], t_k))

    # attachments: mode of phase k applies over the following phase's steps
    for k in range(1, skeleton.n_phases):
        mode = modes[k - 1]
        for obj_name, state_tuple in mode.items():
            if state_tuple[0] == "static":
                continue
            obj = objects[obj_name]
            active = obj_active_fn(obj_name)
            for t in range(k * T + 1, (k + 1) * T + 1):
                if state_tuple[0] == "grasped":
                    _, robot_name, frame = state_tuple
                    terms.append(attachment_term(obj, t, robots[robot_name],
                                                 frame, active))
                else:
                    hook_frame = statics[state_tuple[1]]
                    terms.append(attachment_term(obj, t, None, None, active,
                                                 static_pose=hook_frame.pose))

    # optional keyframe regularizers toward stage-wise pose-only solutions
    for reg in (pose_regularizers or []):
        terms.append(reg)

    collision_terms = []
    for robot in robots.values():
        collision_terms.append(robot_table_collision_term(robot, KT))
        for obj_name, obj in objects.items():
            active = obj_active_fn(obj_name)
            exempt_windows = _gripper_exempt_windows(skeleton, obj_name, T, KT)
            # near/holding frames are exempt while approaching or carrying
            near = {"gripper", "flange"}
            coll_frames = [f for f in robot.tree.link_clouds if f not in near]
            collision_terms.append(robot_object_collision_term(
                robot, obj, KT, active, exempt=lambda t: False,
                frames=coll_frames, weight=collision_weight))
            collision_terms.append(robot_object_collision_term(
                robot, obj, KT, active,
                exempt=lambda t, w=exempt_windows: any(a <= t <= b for a, b in w),
                frames=sorted(near & set(robot.tree.link_clouds)),
                weight=collision_weight))
    for st in statics.values():
        if st.cloud is None:
            continue
        for obj_name, obj in objects.items():
            collision_terms.append(cloud_object_collision_term(
                f"coll/{st.name}:{obj_name}", st.cloud, obj, KT,
                obj_active_fn(obj_name), weight=collision_weight))
    for obj_name, obj in objects.items():
        collision_terms.append(object_table_collision_term(
            obj, KT, obj_active_fn(obj_name), weight=collision_weight))

    entries = []
    for t in range(1, KT + 1):
        for robot in robots.values():
            entries.append((("x", robot.name, t), robot.tree.n_joints))
        for obj_name in objects:
            if activation.get(obj_name, KT + 1) <= t:
                entries.append((("dq", obj_name, t), 6))

    return CompiledProblem(modes=modes, terms=terms,
                           collision_terms=collision_terms,
                           layout_entries=entries, activation=activation,
                           KT=KT, steps_per_phase=T)


def _split_actor(actor: str, robots):
    if "/" not in actor:
        raise InconsistentSkeleton(
            f"grasp actor must be 'robot/frame', got {actor!r}")
    robot_name, frame = actor.split("/", 1)
    if robot_name not in robots:
        raise InconsistentSkeleton(f"unknown robot {robot_name!r}")
    if frame not in robots[robot_name].tree.frames:
        raise InconsistentSkeleton(f"unknown frame {frame!r}")
    return robot_name, frame


def _gripper_exempt_windows(skeleton: Skeleton, obj_name: str, T: int, KT: int):
    """Steps where the gripper may legitimately touch the object: from two
    steps before its grasp keyframe until it is released (hung) or the end."""
    windows = []
    start = None
    for k, action in enumerate(skeleton.actions, start=1):
        if action.obj != obj_name:
            continue
        if action.verb == "grasp":
            start = k * T - 2
        elif action.verb == "hang" and start is not None:
            windows.append((start, k * T))
            start = None
    if start is not None:
        windows.append((start, KT))
    return windows


def initial_state(robots, objects, activation, KT) -> TrajState:
    x = {r.name: np.tile(r.home, (KT, 1)) for r in robots.values()}
    dq = {}
    for obj_name, start in activation.items():
        dq[obj_name] = {t: Pose.identity() for t in range(start, KT + 1)}
    home = {r.name: r.home.copy() for r in robots.values()}
    return TrajState(x=x, dq=dq, home=home)
