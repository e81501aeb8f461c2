"""Motor-space <-> joint-space mapping through tendon geometry.

Tendons are polylines over via points attached to link frames (no wrapping
surfaces).  Each motor winds an agonist tendon on a spool; the antagonist
spool is spring loaded and takes up slack.  Crosswise MCP pairs drive
flexion with the sum of the two motor angles and abduction with the
difference, each through its own angle-dependent length balance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from . import geometry as geo
from . import model as M
from .model import HandModel, JointVector, UnknownJointError

ROUTE_ROLES = ("flex_adduct", "flex_abduct", "ext_adduct", "ext_abduct", "flexor", "extensor", "link")

_FD_STEP = 1e-5  # rad, central difference for moment arms
_ARM_EPS = 1e-9  # mm/rad, below this the transmission is singular


class TransmissionError(ValueError):
    pass


class SingularTransmissionError(TransmissionError):
    pass


@dataclass(frozen=True)
class ActuatorSpec:
    stall_torque: float  # N*m
    no_load_speed: float  # rpm
    current_limit: float  # mA
    spool_radius_agonist: float  # mm
    spool_radius_antagonist: float  # mm

    def __post_init__(self):
        for name in ("stall_torque", "no_load_speed", "current_limit",
                     "spool_radius_agonist", "spool_radius_antagonist"):
            if getattr(self, name) <= 0:
                raise TransmissionError(f"ActuatorSpec.{name} must be > 0")


@dataclass(frozen=True)
class SpringSpec:
    rate: float  # mN*m per degree
    pretension: float  # mN*m
    max_deflection: float  # degrees

    def __post_init__(self):
        if self.rate <= 0:
            raise TransmissionError("SpringSpec.rate must be > 0")
        if self.max_deflection <= 0:
            raise TransmissionError("SpringSpec.max_deflection must be > 0")


@dataclass(frozen=True)
class TendonRoute:
    name: str
    role: str
    via: tuple  # ((frame, local point mm), ...)
    crossed: tuple  # ((joint name, moment sign), ...); sign 0 = passive crossing

    def __post_init__(self):
        if self.role not in ROUTE_ROLES:
            raise TransmissionError(f"route {self.name!r}: unknown role {self.role!r}")
        if len(self.via) < 2:
            raise TransmissionError(f"route {self.name!r}: needs at least 2 via points")
        if not self.crossed and self.role != "link":
            raise TransmissionError(f"route {self.name!r}: no crossed joints")

    @property
    def driven_joint(self) -> str | None:
        for name, sign in self.crossed:
            if sign != 0:
                return name
        return None


@dataclass(frozen=True)
class MotorPairing:
    name: str
    kind: str  # simple | crosswise | linkage
    drives: tuple  # joint names
    agonist: TendonRoute | None
    antagonist: TendonRoute | None
    actuator: ActuatorSpec
    spring: SpringSpec
    ratio: float = 1.0  # linkage motors only
    pair: str | None = None  # crosswise group id
    side: str | None = None  # adduct | abduct


@dataclass(frozen=True)
class TransmissionMap:
    model: HandModel
    motors: dict[str, MotorPairing]
    routes: dict[str, TendonRoute]
    rest_lengths: dict[str, float] = field(repr=False)

    @property
    def motor_names(self) -> tuple[str, ...]:
        return tuple(self.motors)

    def crosswise_pairs(self) -> dict[str, tuple[MotorPairing, MotorPairing]]:
        """Crosswise pairing table: pair id -> (adduct-side, abduct-side)."""
        groups: dict[str, dict[str, MotorPairing]] = {}
        for m in self.motors.values():
            if m.kind == "crosswise":
                groups.setdefault(m.pair, {})[m.side] = m
        return {k: (v["adduct"], v["abduct"]) for k, v in groups.items()}


@dataclass(frozen=True)
class MotorToJointResult:
    q: JointVector
    clamped: bool


@dataclass(frozen=True)
class SpoolCompensation:
    spring_deflection: float  # degrees, positive = slack taken up
    within_range: bool


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def build_transmission(model: HandModel) -> TransmissionMap:
    doc = model.transmission_doc
    if not doc:
        raise TransmissionError("hand description has no transmission section")
    actuator = ActuatorSpec(**doc["actuator_default"])
    spring = SpringSpec(**doc["spring_default"])
    known_frames = {"palm"} | {j.name for j in model.all_joints() if j.name != model.wrist.name}

    routes: dict[str, TendonRoute] = {}
    for name, rdoc in doc["routes"].items():
        via = tuple((f, np.asarray(p, dtype=float)) for f, p in rdoc["via"])
        for f, _ in via:
            if f not in known_frames:
                raise TransmissionError(f"route {name!r}: unknown frame {f!r}")
        crossed = tuple((j, int(s)) for j, s in rdoc["crossed"])
        for j, _ in crossed:
            model.joint(j)
        routes[name] = TendonRoute(name, rdoc["role"], via, crossed)

    motors: dict[str, MotorPairing] = {}
    for mdoc in doc["motors"]:
        kind = mdoc["kind"]
        drives = mdoc["drives"]
        drives = tuple(drives) if isinstance(drives, list) else (drives,)
        for j in drives:
            model.joint(j)
        ag = routes[mdoc["agonist"]] if "agonist" in mdoc else None
        ant = routes[mdoc["antagonist"]] if "antagonist" in mdoc else None
        motors[mdoc["name"]] = MotorPairing(
            name=mdoc["name"], kind=kind, drives=drives, agonist=ag, antagonist=ant,
            actuator=actuator, spring=spring, ratio=float(mdoc.get("ratio", 1.0)),
            pair=mdoc.get("pair"), side=mdoc.get("side"),
        )

    reachable: dict[str, set] = {}
    for m in motors.values():
        for j in m.drives:
            reachable.setdefault(j, set()).add(m.name)
    for j in model.independent_joints:
        if j not in reachable:
            raise TransmissionError(f"joint {j!r} is not driven by any motor")

    rest = dict(model.neutral_vector().values)
    q0 = JointVector({k: 0.0 for k in rest}, model.model_id)
    full0 = M.apply_couplings(model, M.clamp_to_limits(model, q0))
    rest_lengths = {name: _route_length(model, r, full0) for name, r in routes.items()}
    return TransmissionMap(model, motors, routes, rest_lengths)


# --------------------------------------------------------------------------
# tendon geometry
# --------------------------------------------------------------------------


def _joint_T(joint, theta: float) -> np.ndarray:
    # like model.joint_transform but without the range check, so that root
    # finders may probe just past a limit during iteration
    if joint.kind != "rolling_contact":
        return joint.origin @ geo.rot_transform(joint.axis, theta)
    off = np.array([0.0, 2.0 * joint.rolling_radius, 0.0])
    half = geo.rot_transform(joint.axis, theta / 2.0)
    return joint.origin @ geo.translation(-off) @ half @ geo.translation(off) @ half


def _route_length(model: HandModel, route: TendonRoute, full: Mapping[str, float]) -> float:
    """Polyline length of a route, computing only the frames it touches."""
    cache: dict[str, np.ndarray] = {"palm": np.eye(4)}

    def frame_T(name: str) -> np.ndarray:
        if name in cache:
            return cache[name]
        if name == model.branch.name:
            chain = [model.branch]
        else:
            digit = model.digit_of_frame(name)
            if digit is None:
                raise KeyError(f"unknown frame {name!r}")
            chain = model.digit_chain_joints(digit)
        T = np.eye(4)
        for j in chain:
            T = T @ _joint_T(j, full[j.name])
            cache[j.name] = T
            if j.name == name:
                break
        return cache[name]

    total = 0.0
    prev = None
    for fname, local in route.via:
        p = geo.apply(frame_T(fname), local)
        if prev is not None:
            total += float(np.linalg.norm(p - prev))
        prev = p
    return total


def tendon_length(model: HandModel, route: TendonRoute, q: JointVector) -> float:
    """Polyline length (mm) of a tendon route at posture q."""
    full = M.apply_couplings(model, q)
    return _route_length(model, route, full)


def _full_at(model: HandModel, overrides: Mapping[str, float]) -> dict[str, float]:
    vals = {k: 0.0 for k in model.independent_joints}
    vals.update(overrides)
    q = M.clamp_to_limits(model, JointVector(vals, model.model_id))
    return M.apply_couplings(model, q)


def _moment_arm(model: HandModel, route: TendonRoute, joint: str, theta: float,
                base: Mapping[str, float] | None = None, step: float = _FD_STEP) -> float:
    """Signed dL/dtheta (mm/rad) of a route about one joint, central FD."""
    full = dict(base) if base is not None else _full_at(model, {})

    def L(t: float) -> float:
        full[joint] = t
        for c in model.couplings:
            if c.driver == joint:
                full[c.driven] = c.factor * t
        return _route_length(model, route, full)

    lo, hi = model.joint(joint).limits
    a = max(lo, theta - step)
    b = min(hi, theta + step)
    return (L(b) - L(a)) / (b - a)


def transmission_ratio(map_or_model, pairing: MotorPairing, joint: str, theta: float) -> float:
    """Spool-to-joint ratio at angle theta: spool radius / moment arm."""
    model = map_or_model.model if isinstance(map_or_model, TransmissionMap) else map_or_model
    lo, hi = model.joint(joint).limits
    if theta < lo - 1e-12 or theta > hi + 1e-12:
        raise TransmissionError(f"{joint}: angle {theta} outside limits [{lo}, {hi}]")
    if pairing.agonist is None:
        if pairing.kind == "linkage":
            return 1.0 / pairing.ratio
        raise TransmissionError(f"motor {pairing.name!r} has no agonist route")
    arm = abs(_moment_arm(model, pairing.agonist, joint, theta))
    if arm < _ARM_EPS:
        raise SingularTransmissionError(
            f"zero moment arm for joint {joint!r} at theta={theta}")
    return pairing.actuator.spool_radius_agonist / arm


# --------------------------------------------------------------------------
# motor space <-> joint space
# --------------------------------------------------------------------------
#
# Single-tendon-pair joints: the motor angle is the agonist length deficit
# over the spool radius, m = (L0 - L(theta)) / r.  Crosswise MCP pairs use
# sum/difference coordinates: flexion is driven by (m1 + m2)/2 through the
# symmetric length deficit at zero abduction, abduction by (m1 - m2)/2
# through the antisymmetric deficit at zero flexion.  Both are exact
# integrals of the angle-dependent ratio maps, so the inverse is a 1-D root
# find per coordinate.


def _simple_deficit(tmap: TransmissionMap, motor: MotorPairing, theta: float,
                    context: Mapping[str, float]) -> float:
    full = dict(context)
    joint = motor.drives[0]
    full[joint] = theta
    for c in tmap.model.couplings:
        if c.driver == joint:
            full[c.driven] = c.factor * theta
    return tmap.rest_lengths[motor.agonist.name] - _route_length(tmap.model, motor.agonist, full)


def _cross_flex_deficit(tmap: TransmissionMap, add: MotorPairing, abd: MotorPairing,
                        theta_flex: float) -> float:
    flex_joint = add.drives[1]
    full = _full_at(tmap.model, {flex_joint: theta_flex, add.drives[0]: 0.0})
    la = _route_length(tmap.model, add.agonist, full)
    lb = _route_length(tmap.model, abd.agonist, full)
    l0 = tmap.rest_lengths[add.agonist.name] + tmap.rest_lengths[abd.agonist.name]
    return (l0 - la - lb) / 2.0


def _cross_abd_deficit(tmap: TransmissionMap, add: MotorPairing, abd: MotorPairing,
                       theta_abd: float) -> float:
    abd_joint = add.drives[0]
    full = _full_at(tmap.model, {abd_joint: theta_abd, add.drives[1]: 0.0})
    la = _route_length(tmap.model, add.agonist, full)
    lb = _route_length(tmap.model, abd.agonist, full)
    # antisymmetric part; zero at theta_abd = 0 by mirror symmetry
    return (lb - la) / 2.0


def _invert_monotone(fn, target: float, lo: float, hi: float) -> tuple[float, bool]:
    f_lo, f_hi = fn(lo), fn(hi)
    increasing = f_hi >= f_lo
    lo_v, hi_v = (f_lo, f_hi) if increasing else (f_hi, f_lo)
    if target < lo_v:
        return (lo if increasing else hi), True
    if target > hi_v:
        return (hi if increasing else lo), True
    if target == f_lo:
        return lo, False
    if target == f_hi:
        return hi, False
    theta = brentq(lambda t: fn(t) - target, lo, hi, xtol=1e-13, rtol=8.9e-16)
    return float(theta), False


def motor_to_joint(tmap: TransmissionMap, motor_angles: Mapping[str, float]) -> MotorToJointResult:
    """Joint posture reached by the given motor angles (rad at the spool).

    Out-of-range targets are clamped to the joint limits and flagged.
    """
    missing = [m for m in tmap.motors if m not in motor_angles]
    if missing:
        raise KeyError(f"missing motor angles: {missing}")
    extra = [m for m in motor_angles if m not in tmap.motors]
    if extra:
        raise KeyError(f"unknown motors: {extra}")

    model = tmap.model
    out: dict[str, float] = {}
    clamped = False

    # pass 1: linkage and self-contained simple motors; passive crossings
    # (e.g. digit-4/5 flexors over the branch joint) are resolved after
    # their context joints are known.
    deferred = []
    for motor in tmap.motors.values():
        if motor.kind == "linkage":
            joint = motor.drives[0]
            lo, hi = model.joint(joint).limits
            theta = motor.ratio * motor_angles[motor.name]
            if theta < lo or theta > hi:
                clamped = True
            out[joint] = float(np.clip(theta, lo, hi))
        elif motor.kind == "simple":
            context_joints = [j for j, s in motor.agonist.crossed if s == 0]
            if context_joints:
                deferred.append(motor)
            else:
                joint = motor.drives[0]
                lo, hi = model.joint(joint).limits
                target = motor.actuator.spool_radius_agonist * motor_angles[motor.name]
                ctx = _full_at(model, {})
                theta, cl = _invert_monotone(
                    lambda t: _simple_deficit(tmap, motor, t, ctx), target, lo, hi)
                out[joint] = theta
                clamped = clamped or cl

    for add, abd in tmap.crosswise_pairs().values():
        r = add.actuator.spool_radius_agonist
        s = r * (motor_angles[add.name] + motor_angles[abd.name]) / 2.0
        d = r * (motor_angles[add.name] - motor_angles[abd.name]) / 2.0
        abd_joint, flex_joint = add.drives
        if motor_angles[add.name] == motor_angles[abd.name]:
            theta_a, cl_a = 0.0, False  # difference term vanishes: pure flexion
        else:
            lo, hi = model.joint(abd_joint).limits
            theta_a, cl_a = _invert_monotone(
                lambda t: _cross_abd_deficit(tmap, add, abd, t), d, lo, hi)
        if motor_angles[add.name] == -motor_angles[abd.name]:
            theta_f, cl_f = 0.0, False
        else:
            lo, hi = model.joint(flex_joint).limits
            theta_f, cl_f = _invert_monotone(
                lambda t: _cross_flex_deficit(tmap, add, abd, t), s, lo, hi)
        out[abd_joint] = theta_a
        out[flex_joint] = theta_f
        clamped = clamped or cl_a or cl_f

    for motor in deferred:
        joint = motor.drives[0]
        lo, hi = model.joint(joint).limits
        context = {j: out[j] for j, sgn in motor.agonist.crossed if sgn == 0}
        ctx = _full_at(model, context)
        target = motor.actuator.spool_radius_agonist * motor_angles[motor.name]
        theta, cl = _invert_monotone(
            lambda t: _simple_deficit(tmap, motor, t, ctx), target, lo, hi)
        out[joint] = theta
        clamped = clamped or cl

    return MotorToJointResult(JointVector(out, model.model_id), clamped)


def joint_to_motor(tmap: TransmissionMap, q: JointVector | Mapping[str, float]) -> dict[str, float]:
    """Motor angles (rad) that reach posture q.  Exact inverse of motor_to_joint."""
    model = tmap.model
    values = q.values if isinstance(q, JointVector) else dict(q)
    driven = model.driven_joints
    for name in values:
        if name in driven:
            raise UnknownJointError(
                f"{name!r} is driven by a coupling, not an independent DoF")
    qv = M.joint_vector(model, values)
    for name, v in (values or {}).items():
        lo, hi = model.joint(name).limits
        if v < lo - 1e-12 or v > hi + 1e-12:
            raise TransmissionError(f"{name}: angle {v} outside limits [{lo}, {hi}]")

    out: dict[str, float] = {}
    crosswise_joints = set()
    for add, abd in tmap.crosswise_pairs().values():
        abd_joint, flex_joint = add.drives
        crosswise_joints.update(add.drives)
        r = add.actuator.spool_radius_agonist
        s = _cross_flex_deficit(tmap, add, abd, qv.values[flex_joint]) / r
        d = _cross_abd_deficit(tmap, add, abd, qv.values[abd_joint]) / r
        out[add.name] = s + d
        out[abd.name] = s - d

    for motor in tmap.motors.values():
        if motor.kind == "linkage":
            out[motor.name] = qv.values[motor.drives[0]] / motor.ratio
        elif motor.kind == "simple":
            joint = motor.drives[0]
            context = {j: qv.values[j] for j, sgn in motor.agonist.crossed if sgn == 0}
            ctx = _full_at(model, context)
            deficit = _simple_deficit(tmap, motor, qv.values[joint], ctx)
            out[motor.name] = deficit / motor.actuator.spool_radius_agonist
    return out


# --------------------------------------------------------------------------
# spring-loaded spool compensation & parasitic coupling
# --------------------------------------------------------------------------


def spool_compensation(tmap: TransmissionMap, pairing: MotorPairing,
                       q_from: JointVector, q_to: JointVector) -> SpoolCompensation:
    """Spring deflection needed to take up agonist+antagonist slack between
    two postures."""
    if pairing.agonist is None or pairing.antagonist is None:
        return SpoolCompensation(0.0, True)
    model = tmap.model
    f_from = M.apply_couplings(model, M.clamp_to_limits(model, q_from))
    f_to = M.apply_couplings(model, M.clamp_to_limits(model, q_to))
    d_ag = (_route_length(model, pairing.agonist, f_to)
            - _route_length(model, pairing.agonist, f_from))
    d_ant = (_route_length(model, pairing.antagonist, f_to)
             - _route_length(model, pairing.antagonist, f_from))
    slack_rad = -(d_ag + d_ant) / pairing.actuator.spool_radius_antagonist
    deflection = float(np.degrees(slack_rad))
    return SpoolCompensation(deflection, deflection <= pairing.spring.max_deflection)


def parasitic_coupling(model: HandModel, route: TendonRoute, joint: str,
                       theta_range: tuple[float, float], samples: int = 41) -> float:
    """Disturbance ratio: how strongly motion of `joint` tugs on `route`.

    Max |dL/dθ| of the route over the sweep, normalized by the route's own
    moment arm about its driven joint at rest.
    """
    driven = route.driven_joint
    if driven is None:
        raise TransmissionError(f"route {route.name!r} drives no joint")
    own_arm = abs(_moment_arm(model, route, driven, 0.0))
    if own_arm < _ARM_EPS:
        raise SingularTransmissionError(f"route {route.name!r} has zero drive arm")
    lo, hi = theta_range
    worst = 0.0
    for t in np.linspace(lo, hi, samples):
        worst = max(worst, abs(_moment_arm(model, route, joint, float(t))))
    return worst / own_arm
