"""Human-hand keypoint retargeting to robot joint space.

A 21-landmark keypoint frame (wrist + 4 per digit) is normalized into the
palm frame, digit flexion/abduction angles are recovered from landmark
segment directions, and the thumb base plus the combined ring/pinky
abduction are solved by minimizing a weighted keyvector energy.  The
combined-abduction gain is applied on the human side, about the neutral
pose, so joint-limit clamping still guarantees feasible output.

Keyvector defaults (fingertip-to-wrist and fingertip-to-thumbtip) are an
assumption; the upstream approach does not pin a specific set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import geometry as geo
from . import model as M
from .model import HandModel, JointVector

LANDMARK_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)
LM = {n: i for i, n in enumerate(LANDMARK_NAMES)}

_FINGER_OF_DIGIT = {"digit1": "thumb", "digit2": "index", "digit3": "middle",
                    "digit4": "ring", "digit5": "pinky"}

OPTIMIZED_JOINTS_DEFAULT = ("th_cmc", "th_mcp_abd", "branch_abd")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class KeypointFrame:
    timestamp: float
    landmarks: np.ndarray  # (21, 3) mm

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=np.float64)
        if lm.shape != (21, 3):
            raise GeometryError(f"expected 21 landmarks, got shape {lm.shape}")
        if not np.all(np.isfinite(lm)):
            raise GeometryError("landmarks contain non-finite values")
        object.__setattr__(self, "landmarks", lm)

    def point(self, name: str) -> np.ndarray:
        return self.landmarks[LM[name]]


@dataclass(frozen=True)
class KeyVectorDef:
    name: str
    source: tuple[str, str]  # human landmark labels (from, to)
    target: tuple[str, str]  # robot anchors: "palm" or digit name (from, to)
    weight: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0:
            raise GeometryError(f"keyvector {self.name!r}: weight must be finite and >= 0")
        if self.source[0] == self.source[1] or self.target[0] == self.target[1]:
            raise GeometryError(f"keyvector {self.name!r}: pairs must be distinct")


def default_keyvectors() -> tuple[KeyVectorDef, ...]:
    """Fingertip-to-wrist and fingertip-to-thumbtip vectors, plus a
    thumb-IP anchor that disambiguates the two thumb base rotations
    (their axes are nearly parallel, so the tip alone is elbow-ambiguous)."""
    out = []
    for finger in _FINGER_OF_DIGIT.values():
        pair = ("wrist", f"{finger}_tip")
        out.append(KeyVectorDef(f"{finger}_tip_to_wrist", pair, pair, 1.0))
    for finger in ("index", "middle", "ring", "pinky"):
        pair = ("thumb_tip", f"{finger}_tip")
        out.append(KeyVectorDef(f"{finger}_tip_to_thumbtip", pair, pair, 1.0))
    out.append(KeyVectorDef("thumb_ip_to_wrist", ("wrist", "thumb_ip"),
                            ("wrist", "thumb_ip"), 1.0))
    return tuple(out)


@dataclass(frozen=True)
class RetargetConfig:
    abduction_gain: float = 1.0
    keyvectors: tuple[KeyVectorDef, ...] = field(default_factory=default_keyvectors)
    optimized_joints: tuple[str, ...] = OPTIMIZED_JOINTS_DEFAULT
    tolerance: float = 1e-6
    max_iterations: int = 200
    smoothing: float = 0.0  # alpha in [0, 1]: q_out = (1-a) q_new + a q_prev

    def __post_init__(self):
        if self.abduction_gain < 0:
            raise GeometryError("abduction_gain must be >= 0")
        if not 0.0 <= self.smoothing <= 1.0:
            raise GeometryError("smoothing must be in [0, 1]")


@dataclass(frozen=True)
class RetargetResult:
    q: JointVector
    converged: bool
    energy: float


# --------------------------------------------------------------------------
# synthetic landmark generation (FK -> keypoints), also the test oracle
# --------------------------------------------------------------------------


def landmark_positions(model: HandModel, q: JointVector) -> np.ndarray:
    """Robot-side positions of the 21 landmark anchors (mm, palm frame)."""
    fr = M.frames(model, q)
    out = np.zeros((21, 3))

    def joint_anchor(digit: str, idx: int) -> np.ndarray:
        chain = model.digits[digit]
        j = chain[idx]
        if idx == 0:
            parent = fr[model.branch.name] if digit in M.BRANCH_DIGITS else np.eye(4)
        else:
            parent = fr[chain[idx - 1].name]
        return geo.apply(parent, j.origin[:3, 3])

    def tip(digit: str) -> np.ndarray:
        return geo.apply(fr[model.digits[digit][-1].name], model.fingertip_points[digit])

    out[LM["thumb_cmc"]] = joint_anchor("digit1", 0)
    out[LM["thumb_mcp"]] = joint_anchor("digit1", 1)
    out[LM["thumb_ip"]] = joint_anchor("digit1", 3)
    out[LM["thumb_tip"]] = tip("digit1")
    for digit in ("digit2", "digit3"):
        f = _FINGER_OF_DIGIT[digit]
        out[LM[f + "_mcp"]] = joint_anchor(digit, 0)
        out[LM[f + "_pip"]] = joint_anchor(digit, 2)
        out[LM[f + "_dip"]] = joint_anchor(digit, 3)
        out[LM[f + "_tip"]] = tip(digit)
    for digit in ("digit4", "digit5"):
        f = _FINGER_OF_DIGIT[digit]
        out[LM[f + "_mcp"]] = joint_anchor(digit, 0)
        out[LM[f + "_pip"]] = joint_anchor(digit, 1)
        out[LM[f + "_dip"]] = joint_anchor(digit, 2)
        out[LM[f + "_tip"]] = tip(digit)
    return out


def synthetic_frame(model: HandModel, q: JointVector, timestamp: float = 0.0) -> KeypointFrame:
    """Keypoint frame as if the operator's hand matched the robot exactly."""
    return KeypointFrame(timestamp, landmark_positions(model, q))


def max_spread_frame(model: HandModel, spread: float = 0.25) -> KeypointFrame:
    """Canonical frame with ring/pinky abducted `spread` rad past neutral
    (roughly a human's maximal combined abduction)."""
    branch = model.branch
    target = min(branch.limits[1], branch.neutral + spread)
    q = M.joint_vector(model, {branch.name: target})
    return synthetic_frame(model, q)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

_PALM_LANDMARKS = ("wrist", "index_mcp", "middle_mcp", "ring_mcp", "pinky_mcp")


def _middle_mcp_reference(model: HandModel) -> float:
    return float(np.linalg.norm(model.digits["digit3"][0].origin[:3, 3]))


def normalize_human_hand(frame: KeypointFrame, model: HandModel | None = None) -> KeypointFrame:
    """Wrist to origin, palm plane to z=0 (palmar +z, distal +y, thumb +x),
    scaled so the middle-finger MCP distance matches the robot's."""
    if model is None:
        model = M.load_default_model()
    pts = frame.landmarks - frame.point("wrist")
    palm = np.array([pts[LM[n]] for n in _PALM_LANDMARKS])
    centered = palm - palm.mean(axis=0)
    _, s, vt = np.linalg.svd(centered)
    if s[1] < 1e-9 * max(s[0], 1.0):
        raise GeometryError("palm landmarks are collinear")
    normal = vt[2]
    hint = np.cross(pts[LM["index_mcp"]], pts[LM["pinky_mcp"]])
    if np.linalg.norm(hint) < 1e-12:
        raise GeometryError("palm landmarks are degenerate")
    if normal @ hint < 0:
        normal = -normal
    mid = pts[LM["middle_mcp"]]
    y = mid - (mid @ normal) * normal
    ny = np.linalg.norm(y)
    if ny < 1e-12:
        raise GeometryError("middle MCP coincides with the wrist axis")
    y = y / ny
    x = np.cross(y, normal)
    R = np.stack([x, y, normal])  # rows: world directions of new axes
    pts = pts @ R.T
    # in-plane: align the middle-MCP azimuth with the robot's, so a frame
    # that matches the robot layout is a fixed point of normalization
    ref = model.digits["digit3"][0].origin[:3, 3]
    phi = np.arctan2(ref[0], ref[1])  # robot middle-MCP azimuth from +y
    c, s = np.cos(phi), np.sin(phi)
    Rz = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # rotation by -phi
    pts = pts @ Rz.T
    scale = _middle_mcp_reference(model) / np.linalg.norm(pts[LM["middle_mcp"]])
    return KeypointFrame(frame.timestamp, pts * scale)


# --------------------------------------------------------------------------
# vector-based angle extraction
# --------------------------------------------------------------------------


def _seg_dir(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    n = np.linalg.norm(d)
    if n < 1e-9:
        raise GeometryError("zero-length landmark segment")
    return d / n


def _axis_angle_residual(pred: np.ndarray, obs: np.ndarray, axis: np.ndarray) -> float:
    """Rotation about `axis` best mapping direction pred toward obs."""
    p = pred - (pred @ axis) * axis
    u = obs - (obs @ axis) * axis
    np_, nu = np.linalg.norm(p), np.linalg.norm(u)
    if np_ < 1e-9 or nu < 1e-9:
        return 0.0
    p, u = p / np_, u / nu
    return float(np.arctan2(np.cross(p, u) @ axis, np.clip(p @ u, -1.0, 1.0)))


def _clamp(model: HandModel, name: str, v: float) -> float:
    lo, hi = model.joint(name).limits
    return float(np.clip(v, lo, hi))


def vector_angles(frame: KeypointFrame, model: HandModel,
                  base: dict[str, float] | None = None,
                  iterations: int = 4) -> dict[str, float]:
    """Digit flexion (and digit-2/3 Add/Abd) angles from landmark segments.

    Angles are refined against the model's own chain geometry so rolling
    offsets don't bias the estimate.  `base` fixes joints solved elsewhere
    (thumb base, combined abduction); missing entries default to neutral.
    """
    base = dict(base or {})
    est: dict[str, float] = {n: model.joint(n).neutral for n in OPTIMIZED_JOINTS_DEFAULT}
    est.update(base)

    # (digit, observed segments as (from landmark, to landmark),
    #  unknown joints adjusted against each segment)
    plan = {
        "digit1": ((("thumb_mcp", "thumb_ip"), ("th_mcp_flex",)),
                   (("thumb_ip", "thumb_tip"), ("th_ip",))),
        "digit2": ((("index_mcp", "index_pip"), ("d2_mcp_abd", "d2_mcp_flex")),
                   (("index_pip", "index_dip"), ("d2_pip",))),
        "digit3": ((("middle_mcp", "middle_pip"), ("d3_mcp_abd", "d3_mcp_flex")),
                   (("middle_pip", "middle_dip"), ("d3_pip",))),
        "digit4": ((("ring_mcp", "ring_pip"), ("d4_mcp_flex",)),
                   (("ring_pip", "ring_dip"), ("d4_pip",))),
        "digit5": ((("pinky_mcp", "pinky_pip"), ("d5_mcp_flex",)),
                   (("pinky_pip", "pinky_dip"), ("d5_pip",))),
    }
    out: dict[str, float] = {}
    unknowns = [j for segs in plan.values() for _, joints in segs for j in joints]
    vals = {j: 0.0 for j in unknowns}
    vals.update({k: v for k, v in est.items()})

    obs = {}
    for digit, segs in plan.items():
        for (a, b), joints in segs:
            obs[(a, b)] = _seg_dir(frame.point(a), frame.point(b))

    for _ in range(iterations):
        q = M.joint_vector(model, {k: _clamp(model, k, v) for k, v in vals.items()
                                   if k in model.independent_joints})
        fr = M.frames(model, q)
        lms = landmark_positions(model, q)

        def pred_dir(a: str, b: str) -> np.ndarray:
            return _seg_dir(lms[LM[a]], lms[LM[b]])

        for digit, segs in plan.items():
            for (a, b), joints in segs:
                for jname in joints:
                    j = model.joint(jname)
                    parent = _parent_frame(model, fr, jname)
                    axis = parent[:3, :3] @ (j.origin[:3, :3] @ j.axis)
                    delta = _axis_angle_residual(pred_dir(a, b), obs[(a, b)], axis)
                    vals[jname] = _clamp(model, jname, vals[jname] + delta)
            # keep predictions current within the sweep
            q = M.joint_vector(model, {k: _clamp(model, k, v) for k, v in vals.items()
                                       if k in model.independent_joints})
            fr = M.frames(model, q)
            lms = landmark_positions(model, q)

    for j in unknowns:
        out[j] = vals[j]
    return out


def _parent_frame(model: HandModel, fr: dict, jname: str) -> np.ndarray:
    if jname == model.branch.name:
        return np.eye(4)
    digit = model.digit_of_frame(jname)
    chain = model.digit_chain_joints(digit)
    idx = [j.name for j in chain].index(jname)
    if idx == 0:
        return np.eye(4)
    return fr[chain[idx - 1].name]


# --------------------------------------------------------------------------
# energy & retarget
# --------------------------------------------------------------------------


def _axis_azimuth(pts: np.ndarray, pivot: np.ndarray, axis: np.ndarray) -> float:
    m = pts.mean(axis=0) if pts.ndim == 2 else pts
    m = m - pivot
    m = m - (m @ axis) * axis
    ref = np.array([0.0, 1.0, 0.0])
    ref = ref - (ref @ axis) * axis
    ref /= np.linalg.norm(ref)
    side = np.cross(axis, ref)
    return float(np.arctan2(m @ side, m @ ref))


def _branch_spread(frame: KeypointFrame, model: HandModel) -> float:
    """Apparent combined-abduction angle past neutral, from the ring/pinky
    MCP landmarks (which move rigidly with the branch joint)."""
    pivot = model.branch.origin[:3, 3]
    axis = model.branch.origin[:3, :3] @ model.branch.axis
    neutral_lms = landmark_positions(model, model.neutral_vector())
    sel = [LM["ring_mcp"], LM["pinky_mcp"]]
    phi_n = _axis_azimuth(neutral_lms[sel], pivot, axis)
    phi_h = _axis_azimuth(frame.landmarks[sel], pivot, axis)
    return phi_h - phi_n


def _apply_gain(frame: KeypointFrame, gain: float, model: HandModel) -> KeypointFrame:
    """Rotate the ring/pinky landmark block about the branch pivot so the
    apparent human abduction is scaled by `gain` about neutral."""
    if gain == 1.0:
        return frame
    pivot = model.branch.origin[:3, 3]
    axis = model.branch.origin[:3, :3] @ model.branch.axis
    block = [LM[n + "_" + p] for n in ("ring", "pinky") for p in ("mcp", "pip", "dip", "tip")]
    delta = (gain - 1.0) * _branch_spread(frame, model)
    Rm = geo.rotation_about_axis(axis, delta)
    pts = frame.landmarks.copy()
    pts[block] = (pts[block] - pivot) @ Rm.T + pivot
    return KeypointFrame(frame.timestamp, pts)


def _geometric_base_estimate(frame: KeypointFrame, model: HandModel) -> dict[str, float]:
    """Direct estimates for the optimized base joints from landmarks that
    move rigidly with them; used to seed the simplex descent."""
    out = {}
    branch = model.branch
    out[branch.name] = _clamp(model, branch.name, branch.neutral + _branch_spread(frame, model))

    cmc = model.digits["digit1"][0]
    pivot = cmc.origin[:3, 3]
    axis = cmc.origin[:3, :3] @ cmc.axis
    neutral_lms = landmark_positions(model, model.neutral_vector())
    phi_n = _axis_azimuth(neutral_lms[LM["thumb_mcp"]], pivot, axis)
    phi_h = _axis_azimuth(frame.point("thumb_mcp"), pivot, axis)
    cmc_est = cmc.neutral + (phi_h - phi_n)
    out[cmc.name] = _clamp(model, cmc.name, cmc_est)

    # thumb MCP Add/Abd: azimuth of the proximal phalanx about the (nearly
    # vertical) abduction axis, net of the CMC rotation; biased slightly by
    # flexion, which the optimizer then cleans up
    abd = model.digits["digit1"][1]
    seg_n = neutral_lms[LM["thumb_ip"]] - neutral_lms[LM["thumb_mcp"]]
    seg_h = frame.point("thumb_ip") - frame.point("thumb_mcp")
    axis_abd = np.array([0.0, 0.0, 1.0])
    psi_n = _axis_azimuth(seg_n, np.zeros(3), axis_abd)
    psi_h = _axis_azimuth(seg_h, np.zeros(3), axis_abd)
    abd_est = abd.neutral + (psi_h - psi_n) - (cmc_est - cmc.neutral)
    out[abd.name] = _clamp(model, abd.name, abd_est)
    return out


def retarget_energy(q_subset: dict[str, float], frame: KeypointFrame,
                    config: RetargetConfig, model: HandModel,
                    base_q: dict[str, float] | None = None) -> float:
    """Weighted squared keyvector mismatch at the given joint subset.

    `base_q` supplies the joints not in the subset (default neutral); the
    frame is expected to be normalized and gain-adjusted already.  Robot
    anchors are the model's landmark positions (same labels as the human
    side), so identical layouts give zero energy exactly.
    """
    vals = dict(base_q or {})
    vals.update(q_subset)
    q = M.joint_vector(model, {k: _clamp(model, k, v) for k, v in vals.items()})
    lms = landmark_positions(model, q)
    total = 0.0
    for kv in config.keyvectors:
        if kv.weight == 0.0:
            continue
        v_robot = lms[LM[kv.target[1]]] - lms[LM[kv.target[0]]]
        v_human = frame.point(kv.source[1]) - frame.point(kv.source[0])
        d = v_robot - v_human
        total += kv.weight * float(d @ d)
    return total


def retarget(frame: KeypointFrame, config: RetargetConfig, model: HandModel,
             prev_q: JointVector | None = None) -> RetargetResult:
    """Full keypoint-frame to joint-vector retargeting step.

    Never raises on solver trouble: a best-effort clamped posture is
    returned with converged=False so a teleoperation loop can keep running.
    """
    norm = normalize_human_hand(frame, model)
    gained = _apply_gain(norm, config.abduction_gain, model)

    branch = model.branch.name
    warm = dict(prev_q.values) if prev_q is not None else {}
    seed = _geometric_base_estimate(gained, model)
    base = {j: seed.get(j, warm.get(j, model.joint(j).neutral))
            for j in config.optimized_joints}

    optimized = list(config.optimized_joints)
    pinned: dict[str, float] = {}
    if config.abduction_gain == 0.0 and branch in optimized:
        optimized.remove(branch)
        base.pop(branch, None)
        pinned[branch] = model.branch.neutral

    converged = True
    energy = 0.0
    solved = dict(base)
    if optimized:
        try:
            # alternate flexion extraction and base optimization: the digit
            # flexions and the base joints explain the same landmarks, so one
            # pass with a stale base biases both
            for round_ in range(2):
                angles = vector_angles(gained, model, base={**solved, **pinned})
                x0 = np.array([solved[j] for j in optimized])
                fun = lambda x: retarget_energy(
                    dict(zip(optimized, x)), gained, config, model,
                    base_q={**angles, **pinned})
                res = minimize(fun, x0, method="Nelder-Mead",
                               options={"maxiter": config.max_iterations,
                                        "fatol": config.tolerance, "xatol": 1e-6})
                solved = {j: _clamp(model, j, v) for j, v in zip(optimized, res.x)}
                converged = bool(res.success)
                energy = float(res.fun)
        except Exception:
            converged = False
            energy = float("inf")

    # re-extract flexions with the solved base (branch moves digits 4/5)
    angles = vector_angles(gained, model, base={**solved, **pinned})
    vals = {**angles, **solved, **pinned}
    q_new = M.clamp_to_limits(model, M.joint_vector(model, vals))

    a = config.smoothing
    if prev_q is not None and a > 0.0:
        mixed = {k: (1.0 - a) * q_new.values[k] + a * prev_q.values.get(k, q_new.values[k])
                 for k in q_new.values}
        q_new = M.clamp_to_limits(model, JointVector(mixed, model.model_id))
    return RetargetResult(q_new, converged, energy)


# --------------------------------------------------------------------------
# keypoint stream files: one frame per line, timestamp + 63 floats
# (x y z per landmark in LANDMARK_NAMES order), whitespace-separated
# --------------------------------------------------------------------------


def read_keypoint_stream(path) -> list[KeypointFrame]:
    frames = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 64:
                raise GeometryError(f"{path}:{lineno}: expected 64 fields, got {len(parts)}")
            vals = [float(p) for p in parts]
            frames.append(KeypointFrame(vals[0], np.array(vals[1:]).reshape(21, 3)))
    return frames


def write_keypoint_stream(frames, path) -> None:
    with open(path, "w") as f:
        for fr in frames:
            flat = " ".join(f"{v:.6f}" for v in fr.landmarks.reshape(-1))
            f.write(f"{fr.timestamp:.6f} {flat}\n")
