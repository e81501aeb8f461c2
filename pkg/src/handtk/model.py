"""Kinematic model of the 16-DoF combined-abduction hand.

The hand is a branching tree: palm -> {thumb (digit1), digit2, digit3,
branch joint -> {digit4, digit5}}.  A wrist joint sits proximal to the
palm frame, so palm-frame quantities do not depend on it.  Rolling
contact joints are modeled as two sequential half-angle rotations about
parallel axes separated by twice the rolling radius along the link
direction (local +y).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping

import numpy as np

from . import geometry as geo


class DescriptionError(ValueError):
    """Schema violation in a hand-description document (carries the path)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ModelValidationError(ValueError):
    """A structural invariant of the hand model is violated."""


class UnknownJointError(KeyError):
    pass


SCHEMA_VERSION = "1.0"

DIGITS = ("digit1", "digit2", "digit3", "digit4", "digit5")
BRANCH_DIGITS = ("digit4", "digit5")


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str  # "rolling_contact" | "revolute"
    axis: np.ndarray  # unit vector, in the joint frame
    origin: np.ndarray  # 4x4 transform from parent frame
    limits: tuple[float, float]
    rolling_radius: float = 0.0
    neutral: float = 0.0

    def __post_init__(self):
        lo, hi = self.limits
        if lo > hi:
            raise ModelValidationError(f"joint {self.name}: limit interval lo > hi")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ModelValidationError(f"joint {self.name}: axis is not unit length")
        if self.kind == "rolling_contact":
            if self.rolling_radius <= 0:
                raise ModelValidationError(
                    f"joint {self.name}: rolling_contact requires rolling_radius > 0"
                )
        elif self.kind == "revolute":
            if self.rolling_radius != 0:
                raise ModelValidationError(
                    f"joint {self.name}: revolute joint must not set rolling_radius"
                )
        else:
            raise ModelValidationError(f"joint {self.name}: unknown kind {self.kind!r}")
        if not (lo <= self.neutral <= hi):
            raise ModelValidationError(f"joint {self.name}: neutral outside limits")


@dataclass(frozen=True)
class CouplingSpec:
    driver: str
    driven: str
    factor: float

    def __post_init__(self):
        if self.driver == self.driven:
            raise ModelValidationError(f"coupling {self.driver}: driver equals driven")


@dataclass(frozen=True)
class ContactPatch:
    frame: str  # joint (phalanx) frame the disc is attached to
    center: np.ndarray  # mm, in that frame
    normal: np.ndarray  # unit, in that frame
    radius: float  # mm


@dataclass(frozen=True)
class HandModel:
    model_id: str
    palm_frame: np.ndarray  # 4x4, root transform
    wrist: JointSpec
    branch: JointSpec
    digits: dict[str, tuple[JointSpec, ...]]
    couplings: tuple[CouplingSpec, ...]
    fingertip_points: dict[str, np.ndarray]  # per digit, distal frame, mm
    contact_patches: tuple[ContactPatch, ...]
    transmission_doc: dict = field(repr=False, default_factory=dict)
    effective_limit_overlay: dict[str, tuple[float, float]] = field(default_factory=dict)

    # --- lookup helpers -------------------------------------------------
    def all_joints(self) -> list[JointSpec]:
        out = [self.wrist]
        for d in ("digit1", "digit2", "digit3"):
            out.extend(self.digits[d])
        out.append(self.branch)
        for d in BRANCH_DIGITS:
            out.extend(self.digits[d])
        return out

    def joint(self, name: str) -> JointSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownJointError(f"unknown joint {name!r}") from None

    @property
    def _by_name(self) -> dict[str, JointSpec]:
        cached = object.__getattribute__(self, "__dict__").get("_by_name_cache")
        if cached is None:
            cached = {j.name: j for j in self.all_joints()}
            object.__getattribute__(self, "__dict__")["_by_name_cache"] = cached
        return cached

    @property
    def driven_joints(self) -> dict[str, CouplingSpec]:
        return {c.driven: c for c in self.couplings}

    @property
    def independent_joints(self) -> tuple[str, ...]:
        driven = self.driven_joints
        return tuple(j.name for j in self.all_joints() if j.name not in driven)

    def dof_count(self) -> int:
        return len(self.independent_joints)

    def digit_chain_joints(self, digit: str) -> list[JointSpec]:
        """Joints from palm to the digit's distal frame, branch included."""
        chain = list(self.digits[digit])
        if digit in BRANCH_DIGITS:
            chain = [self.branch] + chain
        return chain

    def digit_of_frame(self, frame: str) -> str | None:
        for d in DIGITS:
            if any(j.name == frame for j in self.digits[d]):
                return d
        return None

    def neutral_vector(self) -> "JointVector":
        return JointVector(
            {name: self.joint(name).neutral for name in self.independent_joints},
            self.model_id,
        )

    def content_hash(self) -> str:
        import hashlib

        payload = repr(
            [
                (j.name, j.kind, j.axis.tolist(), j.origin.tolist(), j.limits, j.rolling_radius)
                for j in self.all_joints()
            ]
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class JointVector:
    values: dict[str, float]
    model_id: str

    def as_array(self, order: Iterable[str]) -> np.ndarray:
        return np.array([self.values[n] for n in order])


@dataclass(frozen=True)
class FingertipPoses:
    transforms: dict[str, np.ndarray]  # per digit: distal frame pose, palm frame
    positions: dict[str, np.ndarray]  # per digit: fingertip point, palm frame, mm


# --------------------------------------------------------------------------
# loading & validation
# --------------------------------------------------------------------------


def _req(doc: Mapping, key: str, path: str):
    if key not in doc:
        raise DescriptionError(path, f"missing required field {key!r}")
    return doc[key]


def _parse_joint(doc: Mapping, path: str) -> JointSpec:
    name = _req(doc, "name", path)
    kind = _req(doc, "kind", path)
    axis = np.asarray(_req(doc, "axis", path), dtype=float)
    if axis.shape != (3,):
        raise DescriptionError(f"{path}.axis", "expected 3 components")
    origin_doc = _req(doc, "origin", path)
    xyz = np.asarray(_req(origin_doc, "xyz", f"{path}.origin"), dtype=float)
    rpy = np.asarray(origin_doc.get("rpy", [0.0, 0.0, 0.0]), dtype=float)
    limits = _req(doc, "limits", path)
    if not (isinstance(limits, (list, tuple)) and len(limits) == 2):
        raise DescriptionError(f"{path}.limits", "expected [lo, hi]")
    try:
        return JointSpec(
            name=name,
            kind=kind,
            axis=axis,
            origin=geo.pose_transform(xyz, rpy),
            limits=(float(limits[0]), float(limits[1])),
            rolling_radius=float(doc.get("rolling_radius", 0.0)),
            neutral=float(doc.get("neutral", 0.0)),
        )
    except ModelValidationError as e:
        raise DescriptionError(path, str(e)) from None


def load_hand_description(source) -> HandModel:
    """Load and validate a hand-description document.

    ``source`` may be a path, a JSON string, or an already-parsed dict.
    """
    if isinstance(source, Mapping):
        doc = source
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
        else:
            with open(text) as f:
                doc = json.load(f)

    version = _req(doc, "schema_version", "$")
    if version != SCHEMA_VERSION:
        raise DescriptionError("$.schema_version", f"unsupported version {version!r}")
    model_id = _req(doc, "model_id", "$")

    wrist = _parse_joint(_req(doc, "wrist", "$"), "$.wrist")
    if "branch" not in doc:
        raise DescriptionError("$", "missing combined abduction (branch) joint")
    branch = _parse_joint(doc["branch"], "$.branch")

    digits_doc = _req(doc, "digits", "$")
    digits: dict[str, tuple[JointSpec, ...]] = {}
    tips: dict[str, np.ndarray] = {}
    patches: list[ContactPatch] = []
    for d in DIGITS:
        ddoc = _req(digits_doc, d, "$.digits")
        chain = tuple(
            _parse_joint(j, f"$.digits.{d}.joints[{i}]")
            for i, j in enumerate(_req(ddoc, "joints", f"$.digits.{d}"))
        )
        if not chain:
            raise DescriptionError(f"$.digits.{d}.joints", "empty chain")
        digits[d] = chain
        tips[d] = np.asarray(_req(ddoc, "fingertip_point", f"$.digits.{d}"), dtype=float)
        for i, p in enumerate(ddoc.get("contact_patches", [])):
            normal = np.asarray(_req(p, "normal", f"$.digits.{d}.contact_patches[{i}]"), dtype=float)
            n = np.linalg.norm(normal)
            if n < 1e-12:
                raise DescriptionError(
                    f"$.digits.{d}.contact_patches[{i}].normal", "zero-length normal"
                )
            patches.append(
                ContactPatch(
                    frame=_req(p, "frame", f"$.digits.{d}.contact_patches[{i}]"),
                    center=np.asarray(p["center"], dtype=float),
                    normal=normal / n,
                    radius=float(p.get("radius", 5.0)),
                )
            )

    couplings = tuple(
        CouplingSpec(c["driver"], c["driven"], float(c["factor"]))
        for c in doc.get("couplings", [])
    )
    driven_seen: set[str] = set()
    for c in couplings:
        if c.driven in driven_seen:
            raise ModelValidationError(f"joint {c.driven} driven by more than one coupling")
        driven_seen.add(c.driven)

    overlay = {
        k: (float(v[0]), float(v[1]))
        for k, v in doc.get("effective_limit_overlay", {}).items()
    }

    model = HandModel(
        model_id=model_id,
        palm_frame=geo.pose_transform(
            doc.get("palm_frame", {}).get("xyz", [0, 0, 0]),
            doc.get("palm_frame", {}).get("rpy", [0, 0, 0]),
        ),
        wrist=wrist,
        branch=branch,
        digits=digits,
        couplings=couplings,
        fingertip_points=tips,
        contact_patches=tuple(patches),
        transmission_doc=doc.get("transmission", {}),
        effective_limit_overlay=overlay,
    )
    _validate(model)
    return model


def _validate(model: HandModel):
    names = [j.name for j in model.all_joints()]
    if len(set(names)) != len(names):
        raise ModelValidationError("duplicate joint names")
    by_name = set(names)
    for c in model.couplings:
        if c.driver not in by_name or c.driven not in by_name:
            raise ModelValidationError(f"coupling references unknown joint {c.driver}/{c.driven}")
    if model.dof_count() != 16:
        raise ModelValidationError(
            f"model must expose 16 independent DoFs, found {model.dof_count()}"
        )
    lo, hi = model.branch.limits
    if not (lo <= 0.0 and hi >= 1.48):
        raise ModelValidationError(
            "combined abduction limits must span at least [0, 1.48] rad"
        )
    chain_frames = {j.name for d in DIGITS for j in model.digits[d]}
    for p in model.contact_patches:
        if p.frame not in chain_frames:
            raise ModelValidationError(f"contact patch references unknown frame {p.frame!r}")


def load_default_model() -> HandModel:
    """The bundled nominal description ("sabd_default" scale values)."""
    text = resources.files("handtk.data").joinpath("default_hand.json").read_text()
    return load_hand_description(text)


# --------------------------------------------------------------------------
# joint-space operations
# --------------------------------------------------------------------------


def joint_vector(model: HandModel, values: Mapping[str, float] | None = None) -> JointVector:
    """Build a JointVector over the independent DoFs (missing ones default to 0,
    clamped into limits)."""
    values = dict(values or {})
    out = {}
    for name in model.independent_joints:
        lo, hi = model.joint(name).limits
        out[name] = float(np.clip(values.pop(name, np.clip(0.0, lo, hi)), lo, hi))
    if values:
        extra = sorted(values)
        raise UnknownJointError(f"not independent DoFs of this model: {extra}")
    return JointVector(out, model.model_id)


def apply_couplings(model: HandModel, q: JointVector) -> dict[str, float]:
    """Full per-joint angle map: driven joints set to factor * driver angle."""
    full = dict(q.values)
    for name in model.independent_joints:
        if name not in full:
            raise UnknownJointError(f"missing independent DoF {name!r}")
    for c in model.couplings:
        if c.driver not in full:
            raise UnknownJointError(f"coupling driver {c.driver!r} missing from vector")
        full[c.driven] = c.factor * full[c.driver]
    return full


def clamp_to_limits(model: HandModel, q: JointVector) -> JointVector:
    out = {}
    for name, v in q.values.items():
        lo, hi = model.joint(name).limits
        out[name] = float(np.clip(v, lo, hi))
    return JointVector(out, q.model_id)


# --------------------------------------------------------------------------
# forward kinematics
# --------------------------------------------------------------------------


def rolling_contact_transform(joint: JointSpec, theta: float) -> np.ndarray:
    """Child transform for a rolling contact joint.

    Two half-angle rotations about parallel axes separated by
    2 * rolling_radius along the link direction (+y); equals joint.origin
    at theta == 0.
    """
    if joint.kind != "rolling_contact":
        raise ValueError(f"{joint.name} is not a rolling_contact joint")
    lo, hi = joint.limits
    if theta < lo - 1e-12 or theta > hi + 1e-12:
        raise ValueError(f"{joint.name}: angle {theta} outside limits [{lo}, {hi}]")
    off = np.array([0.0, 2.0 * joint.rolling_radius, 0.0])
    half = geo.rot_transform(joint.axis, theta / 2.0)
    return joint.origin @ geo.translation(-off) @ half @ geo.translation(off) @ half


def joint_transform(joint: JointSpec, theta: float) -> np.ndarray:
    if joint.kind == "rolling_contact":
        return rolling_contact_transform(joint, theta)
    return joint.origin @ geo.rot_transform(joint.axis, theta)


def frames(model: HandModel, q: JointVector) -> dict[str, np.ndarray]:
    """Pose of every joint child frame in the palm frame.

    Includes a "palm" identity entry.  The wrist is proximal to the palm,
    so it does not appear here.
    """
    full = apply_couplings(model, q)
    out: dict[str, np.ndarray] = {"palm": np.eye(4)}
    branch_T = joint_transform(model.branch, full[model.branch.name])
    out[model.branch.name] = branch_T
    for d in DIGITS:
        T = branch_T if d in BRANCH_DIGITS else np.eye(4)
        for j in model.digits[d]:
            T = T @ joint_transform(j, full[j.name])
            out[j.name] = T
    return out


def forward_kinematics(model: HandModel, q: JointVector) -> FingertipPoses:
    fr = frames(model, q)
    transforms = {}
    positions = {}
    for d in DIGITS:
        distal = fr[model.digits[d][-1].name]
        transforms[d] = distal
        positions[d] = geo.apply(distal, model.fingertip_points[d])
    return FingertipPoses(transforms, positions)


# --------------------------------------------------------------------------
# batched FK for one digit (used by workspace sampling)
# --------------------------------------------------------------------------


def _batch_rot(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """N x 4 x 4 rotation transforms about a fixed unit axis."""
    n = angles.shape[0]
    x, y, z = axis
    c = np.cos(angles)
    s = np.sin(angles)
    C = 1.0 - c
    T = np.zeros((n, 4, 4))
    T[:, 0, 0] = c + x * x * C
    T[:, 0, 1] = x * y * C - z * s
    T[:, 0, 2] = x * z * C + y * s
    T[:, 1, 0] = y * x * C + z * s
    T[:, 1, 1] = c + y * y * C
    T[:, 1, 2] = y * z * C - x * s
    T[:, 2, 0] = z * x * C - y * s
    T[:, 2, 1] = z * y * C + x * s
    T[:, 2, 2] = c + z * z * C
    T[:, 3, 3] = 1.0
    return T


def _batch_joint_transform(joint: JointSpec, angles: np.ndarray) -> np.ndarray:
    if joint.kind == "revolute":
        return joint.origin[None] @ _batch_rot(joint.axis, angles)
    off = np.array([0.0, 2.0 * joint.rolling_radius, 0.0])
    half = _batch_rot(joint.axis, angles / 2.0)
    pre = joint.origin @ geo.translation(-off)
    return pre[None] @ half @ geo.translation(off)[None] @ half


def fingertip_positions_batch(
    model: HandModel, digit: str, q_columns: Mapping[str, np.ndarray]
) -> np.ndarray:
    """Fingertip point positions (N x 3, palm frame) for batched joint angles.

    ``q_columns`` maps every independent joint in the digit's chain
    (branch included for digits four and five) to an angle array; driven
    joints are filled in from couplings.
    """
    chain = model.digit_chain_joints(digit)
    driven = model.driven_joints
    n = len(next(iter(q_columns.values())))
    T = None
    for j in chain:
        if j.name in q_columns:
            ang = np.asarray(q_columns[j.name], dtype=float)
        elif j.name in driven:
            c = driven[j.name]
            ang = c.factor * np.asarray(q_columns[c.driver], dtype=float)
        else:
            ang = np.full(n, j.neutral)
        Tj = _batch_joint_transform(j, ang)
        T = Tj if T is None else T @ Tj
    tip = np.append(model.fingertip_points[digit], 1.0)
    return (T @ tip)[:, :3]
