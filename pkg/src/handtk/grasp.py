"""Grasp capability evaluation.

Provides thumb-opposition pinch checks, the maximum parallel-sided object
width the hand can span, palm-up sphere-grasp synthesis, and a quasi-static
disturbance-resistance protocol.  Wrench feasibility is decided with a
linear program over 8-edge friction pyramids, with per-contact normal-force
caps derived from motor stall torque through the tendon transmission.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize

from . import geometry as geo
from . import model as M
from . import transmission as TR

GRAVITY = 9.81  # m/s^2
DEFAULT_FRICTION = 0.8
DEFAULT_SPHERE_MASS = 0.1  # kg
DEFAULT_PALM_TILT = 0.15  # rad, palm-up tilt lowering the ulnar side
CONE_EDGES = 8
CONTACT_TOLERANCE = 1.0  # mm, patch-to-surface distance counted as touching
PLATE_NORMAL_CONE = math.radians(30.0)
RESULTS_SCHEMA_VERSION = 1


class GraspError(ValueError):
    """Invalid grasp-evaluation input."""


class EmptyGraspError(GraspError):
    """Sphere-grasp synthesis produced no contacts."""


class DegenerateModelError(GraspError):
    """The hand cannot realize opposing contacts even at zero width."""


# ---------------------------------------------------------------------------
# contact sets


@dataclass(frozen=True)
class ObjectSpec:
    kind: str  # "sphere" | "parallel_plates"
    size: float  # sphere diameter or plate separation, mm

    def __post_init__(self):
        if self.kind not in ("sphere", "parallel_plates"):
            raise GraspError(f"unknown object kind {self.kind!r}")
        if self.size < 0:
            raise GraspError("object size must be >= 0")


@dataclass(frozen=True)
class Contact:
    position: np.ndarray  # mm, palm frame
    normal: np.ndarray  # unit, pointing into the object
    mu: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float))
        if self.position.shape != (3,) or self.normal.shape != (3,):
            raise GraspError("contact position/normal must be 3-vectors")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise GraspError("contact normal must be unit length")
        if self.mu < 0:
            raise GraspError("friction coefficient must be >= 0")


@dataclass(frozen=True)
class ContactSet:
    contacts: tuple[Contact, ...]
    object: ObjectSpec
    pose: np.ndarray  # 4x4 object pose in the palm frame
    normal_caps: tuple[float, ...] | None = None  # N, per contact

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple(self.contacts))
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))
        if not self.contacts:
            raise GraspError("a contact set needs at least one contact")
        if self.pose.shape != (4, 4):
            raise GraspError("object pose must be a 4x4 transform")
        if self.normal_caps is not None:
            caps = tuple(float(c) for c in self.normal_caps)
            if len(caps) != len(self.contacts):
                raise GraspError("normal_caps must match the contact count")
            if any(c <= 0 for c in caps):
                raise GraspError("normal-force caps must be positive")
            object.__setattr__(self, "normal_caps", caps)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()


# ---------------------------------------------------------------------------
# shared posture-optimization helpers


def _world_patches(model: M.HandModel, fr: dict[str, np.ndarray]):
    """(frame, world center, world normal) for every contact patch."""
    out = []
    for p in model.contact_patches:
        T = fr[p.frame]
        out.append((p.frame, geo.apply(T, p.center), T[:3, :3] @ p.normal))
    return out


def _optimize(objective, lo, hi, starts, maxiter=3000):
    """Multistart Nelder-Mead over a box; returns (best x, best value)."""
    best_x, best_f = None, np.inf
    for x0 in starts:
        res = minimize(
            lambda x: objective(np.clip(x, lo, hi)),
            np.clip(np.asarray(x0, dtype=float), lo, hi),
            method="Nelder-Mead",
            options={"maxiter": maxiter, "xatol": 1e-6, "fatol": 1e-9},
        )
        if res.fun < best_f:
            best_x, best_f = np.clip(res.x, lo, hi), res.fun
    return best_x, best_f


def _joint_box(model: M.HandModel, names, overrides=None):
    lo, hi = [], []
    for n in names:
        a, b = model.joint(n).limits
        if overrides and n in overrides:
            oa, ob = overrides[n]
            if oa < a - 1e-12 or ob > b + 1e-12 or oa > ob:
                raise GraspError(f"ROM override for {n!r} outside joint limits")
            a, b = oa, ob
        lo.append(a)
        hi.append(b)
    return np.asarray(lo), np.asarray(hi)


# ---------------------------------------------------------------------------
# pinch opposition


@dataclass(frozen=True)
class PinchCheck:
    achievable: bool
    q: M.JointVector
    residual: float  # mm


def pinch_check(model: M.HandModel, digit: int) -> PinchCheck:
    """Can the thumb tip meet the given digit's tip (residual <= 2 mm)?"""
    if digit not in (2, 3, 4, 5):
        raise GraspError("digit must be one of 2, 3, 4, 5")
    dname = f"digit{digit}"
    names = [j.name for j in model.digit_chain_joints("digit1")]
    names += [j.name for j in model.digit_chain_joints(dname)
              if j.name in model.independent_joints and j.name not in names]
    names = [n for n in names if n in model.independent_joints]
    lo, hi = _joint_box(model, names)

    def objective(x):
        q = M.joint_vector(model, dict(zip(names, x)))
        fr = M.frames(model, q)
        tips = {}
        for d in ("digit1", dname):
            last = model.digits[d][-1].name
            tips[d] = geo.apply(fr[last], model.fingertip_points[d])
        return float(np.linalg.norm(tips["digit1"] - tips[dname]))

    rng = np.random.default_rng(12345)
    starts = [0.5 * (lo + hi)] + [rng.uniform(lo, hi) for _ in range(5)]
    x, f = _optimize(objective, lo, hi, starts, maxiter=2500)
    q = M.joint_vector(model, dict(zip(names, x)))
    return PinchCheck(achievable=f <= 2.0, q=q, residual=float(f))


# ---------------------------------------------------------------------------
# maximum parallel-sided object width


def _plate_value(vals: np.ndarray, k: int, side: str) -> float:
    """Best plate coordinate supported by >=k contacts within a 1 mm slab.

    side "high": plate faces -u at the largest coordinate; side "low": plate
    faces +u at the smallest coordinate.
    """
    if len(vals) < k:
        return -np.inf if side == "high" else np.inf
    vals = np.sort(vals)
    if side == "high":
        best = -np.inf
        for i in range(len(vals) - k + 1):
            window = vals[i:i + k]
            if window[-1] - window[0] <= CONTACT_TOLERANCE:
                best = max(best, float(window[0]))
        return best
    best = np.inf
    for i in range(len(vals) - k + 1):
        window = vals[i:i + k]
        if window[-1] - window[0] <= CONTACT_TOLERANCE:
            best = min(best, float(window[-1]))
    return best


def _patch_arrays(model, names, x):
    q = M.joint_vector(model, dict(zip(names, x)))
    fr = M.frames(model, q)
    pts, nrm = [], []
    for _, c, n in _world_patches(model, fr):
        pts.append(c)
        nrm.append(n)
    return np.asarray(pts), np.asarray(nrm)


def _hard_span(pts, nrm, U, k):
    """Per plate azimuth, the largest separation with >=k patches per plate
    inside the 30-degree normal cone; -inf where a side is missing."""
    cos_lim = math.cos(PLATE_NORMAL_CONE) - 1e-9
    proj = pts @ U.T  # (patches, az)
    ndot = nrm @ U.T
    out = np.full(U.shape[0], -np.inf)
    for a in range(U.shape[0]):
        hi_vals = proj[ndot[:, a] <= -cos_lim, a]
        lo_vals = proj[ndot[:, a] >= cos_lim, a]
        h = _plate_value(hi_vals, k, "high")
        lo = _plate_value(lo_vals, k, "low")
        if np.isfinite(h) and np.isfinite(lo):
            out[a] = h - lo
    return out


def _soft_span(pts, nrm, U):
    """Smooth surrogate of the 1-per-side span: misaligned normals are
    penalized instead of excluded, keeping the objective finite everywhere."""
    # penalty engages slightly inside the cone so optima sit strictly within
    cos_lim = math.cos(PLATE_NORMAL_CONE) + 0.02
    K = 150.0
    proj = pts @ U.T
    ndot = nrm @ U.T
    hi = np.max(proj - K * np.maximum(0.0, ndot + cos_lim), axis=0)
    lo = np.min(proj + K * np.maximum(0.0, cos_lim - ndot), axis=0)
    return hi - lo


def max_parallel_grasp_distance(
    model: M.HandModel,
    min_contacts_per_side: int = 1,
    rom_override: dict[str, tuple[float, float]] | None = None,
    azimuth_steps: int = 24,
    restarts: int = 6,
    tolerance: float = 0.5,
) -> float:
    """Maximum plate separation graspable with >=k patches per plate.

    Plate normals are searched over palm-plane azimuths; the posture is
    optimized to maximize the realizable span (soft objective, verified with
    the exact 30-degree cone test) and the answer is located by bisection
    over the separation with warm-started feasibility re-optimization.
    """
    if min_contacts_per_side < 1:
        raise GraspError("min_contacts_per_side must be >= 1")
    names = [n for n in model.independent_joints if n != "wrist"]
    lo, hi = _joint_box(model, names, rom_override)
    k = min_contacts_per_side
    rng = np.random.default_rng(2024)
    U = np.array([[math.cos(a), math.sin(a), 0.0]
                  for a in np.linspace(0.0, math.pi, azimuth_steps, endpoint=False)])

    state = {"span": -np.inf, "x": None}

    def hard_best(x):
        pts, nrm = _patch_arrays(model, names, x)
        return float(np.max(_hard_span(pts, nrm, U, k)))

    def objective(x):
        pts, nrm = _patch_arrays(model, names, x)
        return -float(np.max(_soft_span(pts, nrm, U)))

    def improve(starts, maxiter=1500):
        x, _ = _optimize(objective, lo, hi, starts, maxiter=maxiter)
        s = hard_best(x)
        if s > state["span"]:
            state["span"], state["x"] = s, x
        return state["span"]

    starts = [0.5 * (lo + hi)] + [rng.uniform(lo, hi) for _ in range(restarts)]
    improve(starts)
    if not np.isfinite(state["span"]):
        raise DegenerateModelError(
            "no posture produces opposing contact patches at any azimuth")

    def feasible(d: float) -> bool:
        if state["span"] >= d:
            return True
        return improve([state["x"], rng.uniform(lo, hi)], maxiter=2000) >= d

    if not feasible(0.0):
        raise DegenerateModelError("infeasible even at zero separation")
    lo_d = state["span"]
    hi_d = max(2.0 * lo_d, 1.0)
    while feasible(hi_d):
        lo_d = hi_d
        hi_d = 2.0 * hi_d
    while hi_d - lo_d > tolerance:
        mid = 0.5 * (lo_d + hi_d)
        if feasible(mid):
            lo_d = mid
        else:
            hi_d = mid
    return float(lo_d)


# ---------------------------------------------------------------------------
# sphere-grasp synthesis


def _contact_normal_caps(model, tmap, q, frames_map, contacts, sources):
    """Per-contact normal-force cap (N) from stall torque via the tendons.

    For every independent joint proximal to the contact, available joint
    torque is tendon tension (stall torque / spool radius) times the tendon
    moment arm; the contact's normal force is capped by the weakest joint's
    torque divided by the lever of the contact normal about that joint axis.
    """
    agonist_of: dict[str, TR.TendonRoute] = {}
    for m in tmap.motors.values():
        if m.kind == "simple":
            agonist_of[m.drives[0]] = m.agonist
        elif m.kind == "crosswise":
            flex = [j for j in m.drives if j.endswith("_flex")]
            abd = [j for j in m.drives if j.endswith("_abd")]
            if m.side == "adduct" and flex:
                agonist_of[flex[0]] = m.agonist
            if m.side == "abduct" and abd:
                agonist_of[abd[0]] = m.agonist
    act = tmap.motors[next(iter(tmap.motors))].actuator
    tension = act.stall_torque * 1000.0 / act.spool_radius_agonist  # N
    full = M.apply_couplings(model, q)

    caps = []
    for contact, frame in zip(contacts, sources):
        if frame is None:  # palm support: structural, not tendon-limited
            caps.append(1e6)
            continue
        digit = model.digit_of_frame(frame)
        chain = [j.name for j in model.digit_chain_joints(digit)]
        chain = chain[: chain.index(frame) + 1] if frame in chain else chain
        cap = 1e6
        for jn in chain:
            route = agonist_of.get(jn)
            if route is None or jn not in model.independent_joints:
                continue
            arm = abs(TR._moment_arm(model, route, jn, full[jn], base=full))
            torque = tension * arm  # N*mm about the joint axis
            Tp = frames_map.get(_parent_frame_name(model, jn), np.eye(4))
            Tj = Tp @ model.joint(jn).origin
            origin_w = Tj[:3, 3]
            axis_w = Tj[:3, :3] @ model.joint(jn).axis
            lever = abs(axis_w @ np.cross(contact.position - origin_w,
                                          contact.normal))
            if lever > 1e-6:
                cap = min(cap, torque / lever)
        caps.append(max(cap, 1e-6))
    return tuple(caps)


def _parent_frame_name(model: M.HandModel, joint_name: str) -> str:
    for d in M.DIGITS:
        chain = model.digit_chain_joints(d)
        for i, j in enumerate(chain):
            if j.name == joint_name:
                return chain[i - 1].name if i > 0 else "palm"
    return "palm"


def synthesize_sphere_grasp(
    model: M.HandModel,
    diameter: float,
    use_combined_abd: bool = True,
    palm_tilt: float = DEFAULT_PALM_TILT,
    mu: float = DEFAULT_FRICTION,
) -> ContactSet:
    """Palm-up sphere grasp maximizing the number of touching patches.

    The sphere rests on the palm plane (z = 0); its in-plane position and the
    finger posture are optimized jointly.  With use_combined_abd false the
    ring/pinky abduction branch is frozen at its neutral angle.  Contact
    normals point toward the sphere center; per-contact normal-force caps are
    derived from the transmission at the resulting posture.
    """
    if diameter <= 0:
        raise GraspError("sphere diameter must be > 0")
    r = diameter / 2.0
    names = [n for n in model.independent_joints if n != "wrist"]
    overrides = None
    if not use_combined_abd:
        nb = model.branch.neutral
        overrides = {model.branch.name: (nb, nb)}
    jlo, jhi = _joint_box(model, names, overrides)
    lo = np.concatenate([[-20.0, 10.0], jlo])
    hi = np.concatenate([[45.0, 90.0], jhi])

    def score(x):
        c = np.array([x[0], x[1], r])
        q = M.joint_vector(model, dict(zip(names, x[2:])))
        fr = M.frames(model, q)
        total = 0.0
        for _, p, n in _world_patches(model, fr):
            to_c = c - p
            dist = float(np.linalg.norm(to_c))
            err = abs(dist - r)
            align = float(n @ to_c) / max(dist, 1e-9)
            # reward proximity to the surface and normals facing the center
            total += min(err, 25.0) + 4.0 * max(0.0, 0.5 - align)
        return total

    rng = np.random.default_rng(777)
    starts = []
    for frac in (0.15, 0.3, 0.5):
        s = jlo + frac * (jhi - jlo)
        starts.append(np.concatenate([[5.0, 45.0], s]))
    starts += [rng.uniform(lo, hi) for _ in range(4)]
    x, _ = _optimize(score, lo, hi, starts, maxiter=6000)

    c = np.array([x[0], x[1], r])
    q = M.joint_vector(model, dict(zip(names, x[2:])))
    fr = M.frames(model, q)
    contacts, sources = [], []
    for frame, p, n in _world_patches(model, fr):
        dist = float(np.linalg.norm(c - p))
        if abs(dist - r) <= CONTACT_TOLERANCE:
            normal = (c - p) / max(dist, 1e-9)
            contacts.append(Contact(p, normal, mu))
            sources.append(frame)
    # palm support where the sphere rests on the palm plane
    if abs(c[2] - r) <= CONTACT_TOLERANCE:
        contacts.append(Contact(np.array([c[0], c[1], 0.0]),
                                np.array([0.0, 0.0, 1.0]), mu))
        sources.append(None)
    if not any(s is not None for s in sources):
        raise EmptyGraspError(
            f"no phalanx contact achievable on a {diameter:g} mm sphere")
    tmap = TR.build_transmission(model)
    caps = _contact_normal_caps(model, tmap, q, fr, contacts, sources)
    return ContactSet(
        contacts=tuple(contacts),
        object=ObjectSpec("sphere", float(diameter)),
        pose=geo.translation(c),
        normal_caps=caps,
    )


def coverage_gap_opposite_thumb(cs: ContactSet, half_angle: float = math.radians(60)) -> bool:
    """True when no contact covers the ulnar sector opposite the thumb.

    Contacts are binned by the palm-plane azimuth of their offset from the
    object center; the sector is centered on -x (away from the thumb side).
    """
    c = cs.center
    for contact in cs.contacts:
        d = contact.position - c
        planar = np.array([d[0], d[1]])
        if np.linalg.norm(planar) < 1e-9:
            continue
        ang = math.atan2(planar[1], planar[0])
        # angular distance from the -x direction (pi)
        dist = abs((ang - math.pi + math.pi) % (2 * math.pi) - math.pi)
        if dist <= half_angle:
            return False
    return True


# ---------------------------------------------------------------------------
# wrench feasibility


def _gravity_force(sphere_mass: float, palm_tilt: float) -> np.ndarray:
    """Gravity on the object in the palm frame, palm facing up and tilted so
    the ulnar (-x) side sits lower."""
    g = GRAVITY * sphere_mass
    return g * np.array([-math.sin(palm_tilt), 0.0, -math.cos(palm_tilt)])


def _cone_edges(contact: Contact) -> np.ndarray:
    """Rows: 8 friction-pyramid edge directions, unit normal component."""
    n = contact.normal
    a = np.array([1.0, 0.0, 0.0])
    if abs(n @ a) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    if contact.mu == 0.0:
        return n[None, :]
    k = np.arange(CONE_EDGES)
    ang = 2.0 * np.pi * k / CONE_EDGES
    return n[None, :] + contact.mu * (
        np.cos(ang)[:, None] * t1[None, :] + np.sin(ang)[:, None] * t2[None, :]
    )


def _wrench_matrix(cs: ContactSet):
    """(6 x m) matrix of edge wrenches about the object center plus per-contact
    column slices for the cap constraints. Torques are scaled by a
    characteristic length for conditioning."""
    c = cs.center
    L = max(10.0, cs.object.size / 2.0 if cs.object.size > 0 else 10.0)
    cols, slices, start = [], [], 0
    for contact in cs.contacts:
        E = _cone_edges(contact)
        arm = (contact.position - c) / L
        for e in E:
            cols.append(np.concatenate([e, np.cross(arm, e)]))
        slices.append((start, start + len(E)))
        start += len(E)
    return np.array(cols).T, slices


def resistance_margin(
    cs: ContactSet,
    force: np.ndarray,
    sphere_mass: float = DEFAULT_SPHERE_MASS,
    palm_tilt: float = DEFAULT_PALM_TILT,
    include_gravity: bool = True,
) -> float:
    """Signed feasibility margin: s* - 1 where s* is the largest scale of the
    required wrench still inside the contact wrench cone (capped).  The
    external force acts at the object center; >= 0 means resisted."""
    f_ext = np.asarray(force, dtype=float)
    if include_gravity:
        f_ext = f_ext + _gravity_force(sphere_mass, palm_tilt)
    w_req = np.concatenate([-f_ext, np.zeros(3)])
    if np.linalg.norm(w_req) < 1e-12:
        return np.inf
    A, slices = _wrench_matrix(cs)
    m = A.shape[1]
    S_MAX = 1e6
    # variables [lambda (m), s]; maximize s with A lam = s * w_req
    c_obj = np.zeros(m + 1)
    c_obj[-1] = -1.0
    A_eq = np.hstack([A, -w_req[:, None]])
    b_eq = np.zeros(6)
    A_ub = None
    b_ub = None
    if cs.normal_caps is not None:
        rows = []
        for (a, b), cap in zip(slices, cs.normal_caps):
            row = np.zeros(m + 1)
            row[a:b] = 1.0
            rows.append(row)
        A_ub = np.array(rows)
        b_ub = np.array(cs.normal_caps, dtype=float)
    bounds = [(0.0, None)] * m + [(0.0, S_MAX)]
    res = linprog(c_obj, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if not res.success:
        return -1.0
    return float(res.x[-1]) - 1.0


def disturbance_resistance(
    cs: ContactSet,
    force: np.ndarray,
    sphere_mass: float = DEFAULT_SPHERE_MASS,
    palm_tilt: float = DEFAULT_PALM_TILT,
    include_gravity: bool = True,
) -> bool:
    """Quasi-static test: can the contacts balance the external force (applied
    at the object center) plus gravity on the object?"""
    return (
        resistance_margin(cs, force, sphere_mass, palm_tilt, include_gravity)
        >= -1e-9
    )


# ---------------------------------------------------------------------------
# disturbance protocol


@dataclass(frozen=True)
class DisturbanceProtocolConfig:
    force_range: tuple[float, float] = (0.0, 5.0)
    resample_interval: float = 1.0  # s
    episode_steps: int = 600
    hold_reward: float = 0.016
    drop_reward: float = -1.0
    sphere_diameters: tuple[float, ...] = (70.0, 80.0, 90.0, 100.0)
    seed: int = 0
    episodes_per_diameter: int = 10
    steps_per_second: float = 60.0
    sphere_mass: float = DEFAULT_SPHERE_MASS
    palm_tilt: float = DEFAULT_PALM_TILT
    friction: float = DEFAULT_FRICTION
    force_bin_width: float = 1.0  # N

    def __post_init__(self):
        lo, hi = self.force_range
        if lo > hi or lo < 0:
            raise GraspError("force_range must satisfy 0 <= lo <= hi")
        if self.episode_steps <= 0:
            raise GraspError("episode_steps must be > 0")
        if self.episodes_per_diameter < 1:
            raise GraspError("episodes_per_diameter must be >= 1")
        if not self.sphere_diameters:
            raise GraspError("at least one sphere diameter required")

    @property
    def intervals_per_episode(self) -> int:
        per = self.steps_per_second * self.resample_interval
        return max(1, int(round(self.episode_steps / per)))

    @property
    def force_bins(self) -> tuple[float, ...]:
        """Upper edges of the force bins."""
        hi = self.force_range[1]
        if hi <= 0:
            return (0.0,)
        n = max(1, int(math.ceil(hi / self.force_bin_width - 1e-9)))
        return tuple(min(hi, (i + 1) * self.force_bin_width) for i in range(n))


@dataclass(frozen=True)
class EpisodeRecord:
    seed: int
    diameter: float
    use_combined_abd: bool
    draws: tuple[tuple[float, float, float, float], ...]  # (fx, fy, fz, |f|)
    success: bool
    steps_survived: int
    score: float


@dataclass(frozen=True)
class ProtocolResult:
    config: DisturbanceProtocolConfig
    use_combined_abd: bool
    episodes: tuple[EpisodeRecord, ...]
    # (diameter, bin upper edge N) -> success rate over resampled directions
    success_table: dict[tuple[float, float], float] = field(repr=False)
    episode_success: dict[float, float] = field(repr=False)
    mean_score: dict[float, float] = field(repr=False)


def _episode_draws(cfg: DisturbanceProtocolConfig, diameter: float, seed: int):
    """Force draws for one episode; shared across abduction arms (common
    random numbers) because they depend only on (seed, diameter)."""
    rng = np.random.default_rng([int(seed), int(round(diameter))])
    draws = []
    for _ in range(cfg.intervals_per_episode):
        v = rng.normal(size=3)
        nv = np.linalg.norm(v)
        direction = v / nv if nv > 1e-12 else np.array([0.0, 0.0, 1.0])
        mag = rng.uniform(cfg.force_range[0], cfg.force_range[1])
        draws.append((direction, float(mag)))
    return draws


def run_disturbance_protocol(
    model: M.HandModel,
    cfg: DisturbanceProtocolConfig,
    use_combined_abd: bool,
) -> ProtocolResult:
    """Seeded sphere-holding protocol: per episode, a fresh disturbance force
    (uniform direction, uniform magnitude in force_range) is drawn every
    resample interval; the episode succeeds when every draw is resisted.

    Also reports, per (diameter, force-bin upper edge), the fraction of drawn
    directions resisted when scaled to that edge -- monotone in the edge by
    convexity of the resistible wrench set."""
    episodes = []
    table_hits: dict[tuple[float, float], list[bool]] = {}
    steps_per_interval = int(round(cfg.episode_steps / cfg.intervals_per_episode))
    for diameter in cfg.sphere_diameters:
        cs = synthesize_sphere_grasp(
            model, diameter, use_combined_abd=use_combined_abd,
            palm_tilt=cfg.palm_tilt, mu=cfg.friction)
        for e in range(cfg.episodes_per_diameter):
            seed = cfg.seed + e
            draws = _episode_draws(cfg, diameter, seed)
            success = True
            steps = cfg.episode_steps
            recorded = []
            for i, (direction, mag) in enumerate(draws):
                f = mag * direction
                recorded.append((float(f[0]), float(f[1]), float(f[2]), mag))
                ok = disturbance_resistance(
                    cs, f, sphere_mass=cfg.sphere_mass, palm_tilt=cfg.palm_tilt)
                if success and not ok:
                    success = False
                    steps = i * steps_per_interval
                for edge in cfg.force_bins:
                    hit = disturbance_resistance(
                        cs, edge * direction, sphere_mass=cfg.sphere_mass,
                        palm_tilt=cfg.palm_tilt)
                    table_hits.setdefault((diameter, edge), []).append(hit)
            score = steps * cfg.hold_reward + (0.0 if success else cfg.drop_reward)
            episodes.append(EpisodeRecord(
                seed=seed, diameter=diameter, use_combined_abd=use_combined_abd,
                draws=tuple(recorded), success=success,
                steps_survived=steps, score=score))
    success_table = {k: float(np.mean(v)) for k, v in table_hits.items()}
    episode_success = {}
    mean_score = {}
    for diameter in cfg.sphere_diameters:
        eps = [ep for ep in episodes if ep.diameter == diameter]
        episode_success[diameter] = float(np.mean([ep.success for ep in eps]))
        mean_score[diameter] = float(np.mean([ep.score for ep in eps]))
    return ProtocolResult(
        config=cfg, use_combined_abd=use_combined_abd,
        episodes=tuple(episodes), success_table=success_table,
        episode_success=episode_success, mean_score=mean_score)


def format_protocol_report(result: ProtocolResult) -> str:
    """Human-readable success table."""
    cfg = result.config
    lines = []
    lines.append(f"disturbance protocol  (combined abduction: "
                 f"{'on' if result.use_combined_abd else 'off'})")
    lines.append(f"episodes/diameter: {cfg.episodes_per_diameter}  "
                 f"intervals/episode: {cfg.intervals_per_episode}  "
                 f"force range: {cfg.force_range[0]:g}-{cfg.force_range[1]:g} N")
    edges = cfg.force_bins
    header = "diameter | " + " | ".join(f"<={e:g}N" for e in edges) + \
        " | episode success | mean score"
    lines.append(header)
    lines.append("-" * len(header))
    for d in cfg.sphere_diameters:
        cells = " | ".join(
            f"{result.success_table[(d, e)]:6.2%}" for e in edges)
        lines.append(
            f"{d:7.0f}mm | {cells} | {result.episode_success[d]:6.2%} "
            f"| {result.mean_score[d]:+.3f}")
    return "\n".join(lines)


def protocol_results_payload(result: ProtocolResult) -> dict:
    """Versioned machine-readable results: one row per episode."""
    return {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "use_combined_abd": result.use_combined_abd,
        "config": dataclasses.asdict(result.config),
        "episodes": [
            {
                "seed": ep.seed,
                "diameter": ep.diameter,
                "use_combined_abd": ep.use_combined_abd,
                "force_draws": [list(d) for d in ep.draws],
                "success": ep.success,
                "steps_survived": ep.steps_survived,
                "score": ep.score,
            }
            for ep in result.episodes
        ],
        "success_table": [
            {"diameter": d, "force_bin_upper": e, "rate": rate}
            for (d, e), rate in sorted(result.success_table.items())
        ],
        "episode_success": {str(k): v for k, v in result.episode_success.items()},
        "mean_score": {str(k): v for k, v in result.mean_score.items()},
    }


def write_protocol_results(result: ProtocolResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(protocol_results_payload(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
