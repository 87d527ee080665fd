"""Deterministic synthetic data: locomotion with analytic foot contacts, and part-feature scenes.

Locomotion: the root follows a piecewise-constant yaw-rate heading curve at
speed ``stride * cadence``. Stance ankles are pinned to ground anchors and the
legs are solved by two-bone IK, so contact labels are exact by construction.

Scenes: a posed, shaped body is projected with a weak-perspective camera and
point-splatted into per-level part masks. Each covered pixel carries a feature
made of the part one-hot and a sin/cos code of the part's pose, plus noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import body_model as bm
from .camera import project, rasterize_part_masks
from .hierarchy import LEVELS, PART_COUNTS, PartitionTable, default_partition

SCHEMA_VERSION = 1
GROUND_ANKLE_HEIGHT = 0.07  # ankle height with the foot flat on y = 0


@dataclass(frozen=True)
class GaitSpec:
    stride: float = 1.2           # meters per full gait cycle
    cadence: float = 1.0          # gait cycles per second
    n_frames: int = 60
    fps: float = 30.0
    heading: float = 0.0          # initial yaw, radians; 0 walks along +z
    yaw_rates: tuple = ((0.0, 0.0),)  # (start time s, yaw rate rad/s) segments
    duty: float = 0.6             # stance fraction of the cycle per foot
    clearance: float = 0.1        # swing apex above stance ankle height, meters
    arm_swing: float = 0.35       # radians
    seed: int = 0

    def __post_init__(self):
        if self.stride < 0 or self.cadence <= 0:
            raise ValueError("stride must be non-negative and cadence positive")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if not 0.5 <= self.duty < 1.0:
            raise ValueError("duty must lie in [0.5, 1)")

    @property
    def speed(self) -> float:
        return self.stride * self.cadence


@dataclass
class MotionSequence:
    r: np.ndarray         # N x 3 root (pelvis) world positions
    p: np.ndarray         # N x 24 x 3 joints relative to the root, world axes
    fps: float
    contacts: np.ndarray | None = None  # (N - 1) x 2, left/right foot

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        n = self.r.shape[0]
        if n < 2 or self.r.shape != (n, 3) or self.p.shape != (n, 24, 3):
            raise ValueError(f"bad sequence shapes r {self.r.shape}, p {self.p.shape}")
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.p))):
            raise ValueError("sequence contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.r.shape[0]

    def world_joints(self) -> np.ndarray:
        return self.p + self.r[:, None, :]

    def foot_positions(self) -> np.ndarray:
        return self.world_joints()[:, list(bm.FOOT_JOINTS), :]


# ---------------------------------------------------------------- locomotion

def _segments(spec: GaitSpec):
    segs = sorted((float(t), float(w)) for t, w in spec.yaw_rates)
    if not segs or segs[0][0] > 0:
        segs.insert(0, (0.0, 0.0))
    return segs


def heading_at(spec: GaitSpec, t: float) -> float:
    psi = spec.heading
    segs = _segments(spec)
    for (t0, w), nxt in zip(segs, segs[1:] + [(np.inf, 0.0)]):
        if t <= t0:
            break
        psi += w * (min(t, nxt[0]) - t0)
    if t < 0:
        psi += segs[0][1] * t
    return psi


def root_xz(spec: GaitSpec, t: float) -> np.ndarray:
    """Exact integral of the heading curve at constant speed from time 0 to t."""
    v = spec.speed
    segs = _segments(spec)
    pos = np.zeros(2)
    psi = spec.heading
    if t < 0:
        w = segs[0][1]
        return _arc(v, psi, w, t)
    for (t0, w), nxt in zip(segs, segs[1:] + [(np.inf, 0.0)]):
        if t <= t0:
            break
        dt = min(t, nxt[0]) - t0
        pos = pos + _arc(v, psi, w, dt)
        psi += w * dt
    return pos


def _arc(v: float, psi: float, w: float, dt: float) -> np.ndarray:
    if abs(w) < 1e-12:
        return v * dt * np.array([np.sin(psi), np.cos(psi)])
    psi1 = psi + w * dt
    return v / w * np.array([np.cos(psi) - np.cos(psi1), np.sin(psi1) - np.sin(psi)])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _bone_frame(u: np.ndarray, forward: np.ndarray) -> np.ndarray:
    # maps the rest bone direction -y onto u, keeping +z as close to forward as possible
    b2 = -u
    b3 = _unit(forward - (forward * u).sum(-1, keepdims=True) * u)
    return np.stack([np.cross(b2, b3), b2, b3], axis=-1)


def _two_bone(hip, ankle, forward, l1, l2):
    """Thigh and shank directions (n x 3 each) with the knee bending toward ``forward``."""
    d = ankle - hip
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    bad = (dist > l1 + l2 - 1e-9) | (dist < abs(l1 - l2) + 1e-9)
    if bad.any():
        worst = float(dist[bad][0])
        raise ValueError(f"IK target out of reach ({worst:.4f} m for legs {l1}+{l2})")
    dh = d / dist
    cos_a = (l1 * l1 + dist * dist - l2 * l2) / (2 * l1 * dist)
    a = np.arccos(np.clip(cos_a, -1.0, 1.0))
    fp = _unit(forward - (forward * dh).sum(-1, keepdims=True) * dh)
    u_thigh = np.cos(a) * dh + np.sin(a) * fp
    knee = hip + l1 * u_thigh
    return u_thigh, _unit(ankle - knee)


def _stance_intervals(spec: GaitSpec, side: int, t_end: float):
    """(t_start, t_end, t_mid) of every stance that overlaps [-1 cycle, t_end]."""
    T = 1.0 / spec.cadence
    if spec.stride == 0:
        # standing still: one stance spanning the whole clip
        return [(-T, t_end + T, 0.0)]
    off = 0.0 if side == 0 else 0.5
    out = []
    k = -2
    while (k + off) * T <= t_end + T:
        t0 = (k + off) * T
        out.append((t0, t0 + spec.duty * T, t0 + 0.5 * spec.duty * T))
        k += 1
    return out


def _foot_state(spec, side, t, stances, anchors, yaws):
    for i, (a, b, _) in enumerate(stances):
        if a <= t < b:
            return anchors[i].copy(), yaws[i], True
        if i + 1 < len(stances) and b <= t < stances[i + 1][0]:
            s = (t - b) / (stances[i + 1][0] - b)
            pos = (1 - s) * anchors[i] + s * anchors[i + 1]
            pos[1] += spec.clearance * np.sqrt(1.0 - abs(2.0 * s - 1.0))
            return pos, (1 - s) * yaws[i] + s * yaws[i + 1], False
    raise RuntimeError("time outside generated stance schedule")


def gen_locomotion(spec: GaitSpec, body: bm.BodyTemplate | None = None):
    """Generate a walking sequence and its exact per-transition foot contacts.

    Frame i is sampled at time (i + 1) / fps; the root starts at the origin at
    time 0, so after N frames it has travelled ``speed * N / fps`` along the
    heading curve. Returns ``(MotionSequence, contacts)`` with contacts of shape
    (N - 1) x 2: 1 where a foot is in the same stance at both frames.
    """
    body = body or bm.default_template()
    rest = body.rest_joints()
    offs = body.rest_offsets
    l_thigh = float(np.linalg.norm(offs[4]))
    l_shank = float(np.linalg.norm(offs[7]))
    rng = np.random.default_rng(spec.seed)
    n = spec.n_frames
    times = (np.arange(n) + 1) / spec.fps
    t_end = times[-1]

    # per-sequence style jitter, deterministic in the seed
    still = 0.0 if spec.stride == 0 else 1.0
    arm_amp = still * spec.arm_swing * (1.0 + 0.1 * rng.uniform(-1, 1))
    spine_amp = still * 0.05 * (1.0 + 0.2 * rng.uniform(-1, 1))
    phase0 = 0.0

    stances, anchors, yaws = [], [], []
    hip_off = [offs[1], offs[2]]
    for side in (0, 1):
        st = _stance_intervals(spec, side, t_end)
        anc, yw = [], []
        for _, _, tm in st:
            psi = heading_at(spec, tm)
            xz = root_xz(spec, tm)
            lateral = bm.yaw_matrix(psi) @ np.array([hip_off[side][0], 0.0, 0.0])
            anc.append(np.array([xz[0] + lateral[0], GROUND_ANKLE_HEIGHT, xz[1] + lateral[2]]))
            yw.append(psi)
        stances.append(st)
        anchors.append(anc)
        yaws.append(yw)

    psis = np.array([heading_at(spec, t) for t in times])
    xzs = np.array([root_xz(spec, t) for t in times])
    feet = [[_foot_state(spec, s, t, stances[s], anchors[s], yaws[s]) for t in times] for s in (0, 1)]

    # lowest root height keeping every ankle target within reach
    reach = 0.995 * (l_thigh + l_shank)
    need = rest[0, 1]
    for i in range(n):
        R0 = bm.yaw_matrix(psis[i])
        for s in (0, 1):
            hip_rel = R0 @ hip_off[s]
            ank = feet[s][i][0]
            dx = ank[0] - (xzs[i, 0] + hip_rel[0])
            dz = ank[2] - (xzs[i, 1] + hip_rel[2])
            horiz = dx * dx + dz * dz
            if horiz >= reach * reach:
                raise ValueError("stride too long for the leg length")
            max_h = ank[1] - hip_rel[1] + np.sqrt(reach * reach - horiz)
            need = min(need, max_h)
    root_h = need

    R_local = np.broadcast_to(np.eye(3), (n, 24, 3, 3)).copy()
    R0 = bm.yaw_matrix(psis)
    fwd = R0[:, :, 2]
    r = np.stack([xzs[:, 0], np.full(n, root_h), xzs[:, 1]], axis=-1)
    R_local[:, 0] = R0
    R0t = np.swapaxes(R0, -1, -2)
    for s, (hip_j, knee_j, ank_j) in enumerate(((1, 4, 7), (2, 5, 8))):
        hip_w = r + R0 @ hip_off[s]
        ank_w = np.stack([f[0] for f in feet[s]])
        u_th, u_sh = _two_bone(hip_w, ank_w, fwd, l_thigh, l_shank)
        Rh = _bone_frame(u_th, fwd)
        Rk = _bone_frame(u_sh, fwd)
        Ra = bm.yaw_matrix(np.array([f[1] for f in feet[s]]))
        R_local[:, hip_j] = R0t @ Rh
        R_local[:, knee_j] = np.swapaxes(Rh, -1, -2) @ Rk
        R_local[:, ank_j] = np.swapaxes(Rk, -1, -2) @ Ra

    # counter-rotating upper body
    phase = 2 * np.pi * (spec.cadence * times + phase0)
    zero = np.zeros(n)
    twist = spine_amp * np.sin(phase)
    R_local[:, 3] = bm.axis_angle_to_rotmat(np.stack([zero, -twist, zero], axis=-1))
    for s, (sh, el) in enumerate(((16, 18), (17, 19))):
        sign = 1.0 if s == 0 else -1.0
        swing = sign * arm_amp * np.sin(phase)
        down = bm.axis_angle_to_rotmat(np.array([0.0, 0.0, -sign * 1.25]))
        fwd_swing = bm.axis_angle_to_rotmat(np.stack([swing, zero, zero], axis=-1))
        R_local[:, sh] = fwd_swing @ down
        bend = sign * (0.25 + 0.15 * np.maximum(0.0, -swing))
        R_local[:, el] = bm.axis_angle_to_rotmat(np.stack([zero, bend, zero], axis=-1))

    _, joints = bm.forward_kinematics(body, R_local, rest)
    p = joints - joints[:, :1, :]
    contacts = np.zeros((n - 1, 2), dtype=np.int64)
    for s in (0, 1):
        for i in range(n - 1):
            same = False
            for a, b, _ in stances[s]:
                if a <= times[i] < b and a <= times[i + 1] < b:
                    same = True
                    break
            contacts[i, s] = int(same)
    seq = MotionSequence(r=r, p=p, fps=spec.fps, contacts=contacts)
    return seq, contacts


def random_gait_spec(rng: np.random.Generator, n_frames: int = 60, fps: float = 30.0) -> GaitSpec:
    """Draw a varied but reachable gait: speed, cadence, heading and turning."""
    n_seg = int(rng.integers(1, 4))
    dur = n_frames / fps
    starts = np.sort(rng.uniform(0, dur, size=n_seg - 1)) if n_seg > 1 else np.array([])
    rates = rng.uniform(-0.5, 0.5, size=n_seg)
    segs = tuple([(0.0, float(rates[0]))] + [(float(s), float(w)) for s, w in zip(starts, rates[1:])])
    return GaitSpec(
        stride=float(rng.uniform(0.6, 1.3)),
        cadence=float(rng.uniform(0.75, 1.15)),
        n_frames=n_frames,
        fps=fps,
        heading=float(rng.uniform(-np.pi, np.pi)),
        yaw_rates=segs,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def gen_gait_dataset(n: int, seed: int, n_frames: int = 60, fps: float = 30.0, body=None) -> list[MotionSequence]:
    rng = np.random.default_rng(seed)
    return [gen_locomotion(random_gait_spec(rng, n_frames, fps), body)[0] for _ in range(n)]


# ---------------------------------------------------------------- feature scenes

@dataclass(frozen=True)
class SceneSpec:
    height: int = 16
    width: int = 16
    channels: int = 64
    noise: float = 0.0
    seed: int = 0
    levels: tuple = LEVELS

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("scene dimensions must be positive")


@dataclass
class FeatureScene:
    features: dict[str, np.ndarray]   # level -> H x W x C

    @property
    def height(self) -> int:
        return next(iter(self.features.values())).shape[0]

    @property
    def width(self) -> int:
        return next(iter(self.features.values())).shape[1]

    @property
    def channels(self) -> int:
        return next(iter(self.features.values())).shape[2]

    def copy(self) -> "FeatureScene":
        return FeatureScene({k: v.copy() for k, v in self.features.items()})


@dataclass
class SceneSample:
    scene: FeatureScene
    masks: dict[str, np.ndarray]
    theta: np.ndarray   # 24 x 6
    beta: np.ndarray    # 10
    cam: np.ndarray     # 3
    j3d: np.ndarray     # 24 x 3
    j2d: np.ndarray     # 24 x 2


_SIG_DIM = 24 + 24


def _projection(channels: int) -> np.ndarray:
    if channels >= _SIG_DIM:
        return np.eye(_SIG_DIM, channels)
    rng = np.random.default_rng(12345)
    q, _ = np.linalg.qr(rng.normal(size=(_SIG_DIM, _SIG_DIM)))
    return q[:, :channels] * np.sqrt(_SIG_DIM / channels)


def pose_code(r6: np.ndarray) -> np.ndarray:
    """sin/cos code of a rot6d vector at two frequencies (24 values)."""
    x = np.asarray(r6)[..., None] * np.array([np.pi, 2 * np.pi])
    return np.concatenate([np.sin(x), np.cos(x)], axis=-1).reshape(*np.shape(r6)[:-1], 24)


def part_signatures(theta: np.ndarray, level: str, table: PartitionTable, channels: int) -> np.ndarray:
    """Feature vector per part (P x C): one-hot part id and pose code of its mean rot6d."""
    n = PART_COUNTS[level]
    sig = np.zeros((n, _SIG_DIM))
    for part in range(n):
        sig[part, part] = 1.0
        sig[part, 24:] = pose_code(theta[table.members(level, part)].mean(axis=0))
    return sig @ _projection(channels)


# per-joint rotation axes and amplitude; joints in one FulCo group share a latent
_rng_axes = np.random.default_rng(7)
_JOINT_AXES = _rng_axes.normal(size=(24, 3))
_JOINT_AXES /= np.linalg.norm(_JOINT_AXES, axis=1, keepdims=True)


def sample_body_params(rng: np.random.Generator, table: PartitionTable | None = None,
                       amplitude: float = 0.6, jitter: float = 0.05):
    """Pose with strong within-limb correlation, mild shape, centred camera."""
    table = table or default_partition()
    latent = rng.uniform(-1, 1, size=PART_COUNTS["FulCo"])
    aa = _JOINT_AXES * (amplitude * latent[table["FulCo"]])[:, None] + jitter * rng.normal(size=(24, 3))
    aa[0] *= 0.3
    theta = bm.rotmat_to_rot6d(bm.axis_angle_to_rotmat(aa))
    beta = 0.5 * rng.normal(size=10)
    s = rng.uniform(0.4, 0.46)
    cam = np.array([s, 0.5, 0.5 - s * 0.9])
    return theta, beta, cam


def gen_feature_scene(spec: SceneSpec, theta, beta, cam, body=None, table=None) -> SceneSample:
    body = body or bm.default_template()
    table = table or default_partition()
    out = bm.body_forward(body, theta, beta)
    mesh2d = project(out.vertices, cam)
    depth = -out.vertices[:, 2]
    masks = rasterize_part_masks(mesh2d, depth, body.vertex_joint(), spec.height, spec.width, table, spec.levels)
    rng = np.random.default_rng(spec.seed)
    feats = {}
    for level in spec.levels:
        sig = part_signatures(np.asarray(theta), level, table, spec.channels)
        m = masks[level]
        f = np.zeros((spec.height, spec.width, spec.channels))
        on = m > 0
        f[on] = sig[m[on] - 1]
        if spec.noise > 0:
            f = f + spec.noise * rng.normal(size=f.shape)
        feats[level] = f
    return SceneSample(
        scene=FeatureScene(feats),
        masks=masks,
        theta=np.asarray(theta, dtype=np.float64),
        beta=np.asarray(beta, dtype=np.float64),
        cam=np.asarray(cam, dtype=np.float64),
        j3d=out.joints,
        j2d=project(out.joints, cam),
    )


def gen_scene_dataset(n: int, seed: int, spec: SceneSpec | None = None, body=None, table=None) -> list[SceneSample]:
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        theta, beta, cam = sample_body_params(rng, table)
        sub = SceneSpec(spec.height, spec.width, spec.channels, spec.noise, int(rng.integers(2**31 - 1)), spec.levels)
        out.append(gen_feature_scene(sub, theta, beta, cam, body, table))
    return out


def apply_occluder(scene: FeatureScene, region, mode: str = "zero", seed: int = 0) -> FeatureScene:
    """Overwrite features inside ``region`` = (row0, col0, row1, col1), end-exclusive."""
    r0, c0, r1, c1 = (int(v) for v in region)
    if not (0 <= r0 <= r1 <= scene.height and 0 <= c0 <= c1 <= scene.width):
        raise ValueError(f"occluder {region} outside the {scene.height}x{scene.width} scene")
    out = scene.copy()
    rng = np.random.default_rng(seed)
    for f in out.features.values():
        if mode == "zero":
            f[r0:r1, c0:c1] = 0.0
        elif mode == "noise":
            f[r0:r1, c0:c1] = rng.normal(size=f[r0:r1, c0:c1].shape)
        else:
            raise ValueError(f"unknown occluder mode {mode!r}")
    return out


# ---------------------------------------------------------------- serialization

class SchemaError(ValueError):
    pass


def _seq_record(seq: MotionSequence) -> dict:
    rec = {"schema": SCHEMA_VERSION, "kind": "motion", "fps": seq.fps, "r": seq.r.tolist(), "p": seq.p.tolist()}
    rec["contacts"] = None if seq.contacts is None else np.asarray(seq.contacts).tolist()
    return rec


def _scene_record(s: SceneSample) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "scene",
        "features": {k: v.tolist() for k, v in s.scene.features.items()},
        "masks": {k: v.tolist() for k, v in s.masks.items()},
        "theta": s.theta.tolist(), "beta": s.beta.tolist(), "cam": s.cam.tolist(),
        "j3d": s.j3d.tolist(), "j2d": s.j2d.tolist(),
    }


def dataset_text(items) -> str:
    """JSON-lines, one record per item; float64 values round-trip exactly."""
    lines = []
    for it in items:
        rec = _seq_record(it) if isinstance(it, MotionSequence) else _scene_record(it)
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def save_dataset(items, path) -> None:
    Path(path).write_text(dataset_text(items))


def _field(rec, name, lineno, shape=None, dtype=np.float64):
    if name not in rec:
        raise SchemaError(f"line {lineno}: missing field '{name}'")
    try:
        arr = np.asarray(rec[name], dtype=dtype)
    except (TypeError, ValueError):
        raise SchemaError(f"line {lineno}: field '{name}' is not a numeric array") from None
    if shape is not None and (arr.ndim != len(shape) or any(s is not None and a != s for a, s in zip(arr.shape, shape))):
        raise SchemaError(f"line {lineno}: field '{name}' has shape {arr.shape}, expected {shape}")
    return arr


def load_dataset(path) -> list:
    items = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"line {lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise SchemaError(f"line {lineno}: record is not an object")
        if rec.get("schema") != SCHEMA_VERSION:
            raise SchemaError(f"line {lineno}: field 'schema' must be {SCHEMA_VERSION}, got {rec.get('schema')!r}")
        kind = rec.get("kind")
        if kind == "motion":
            r = _field(rec, "r", lineno, (None, 3))
            p = _field(rec, "p", lineno, (r.shape[0], 24, 3))
            if "fps" not in rec or not isinstance(rec["fps"], (int, float)):
                raise SchemaError(f"line {lineno}: field 'fps' must be a number")
            contacts = rec.get("contacts")
            if contacts is not None:
                contacts = _field(rec, "contacts", lineno, (r.shape[0] - 1, None), dtype=np.int64)
            try:
                items.append(MotionSequence(r=r, p=p, fps=float(rec["fps"]), contacts=contacts))
            except ValueError as e:
                raise SchemaError(f"line {lineno}: {e}") from None
        elif kind == "scene":
            feats = {k: np.asarray(v, dtype=np.float64) for k, v in _dict_field(rec, "features", lineno).items()}
            masks = {k: np.asarray(v, dtype=np.int64) for k, v in _dict_field(rec, "masks", lineno).items()}
            items.append(SceneSample(
                scene=FeatureScene(feats), masks=masks,
                theta=_field(rec, "theta", lineno, (24, 6)), beta=_field(rec, "beta", lineno, (10,)),
                cam=_field(rec, "cam", lineno, (3,)), j3d=_field(rec, "j3d", lineno, (24, 3)),
                j2d=_field(rec, "j2d", lineno, (24, 2)),
            ))
        else:
            raise SchemaError(f"line {lineno}: field 'kind' must be 'motion' or 'scene', got {kind!r}")
    return items


def _dict_field(rec, name, lineno) -> dict:
    val = rec.get(name)
    if not isinstance(val, dict):
        raise SchemaError(f"line {lineno}: field '{name}' must be an object keyed by level")
    bad = sorted(set(val) - set(LEVELS))
    if bad:
        raise SchemaError(f"line {lineno}: field '{name}' has unknown levels {bad}")
    return val
