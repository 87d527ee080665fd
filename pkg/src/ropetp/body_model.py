"""Differentiable SMPL-style body: shape blendshapes, kinematic tree, LBS, joint regression.

Joint order follows the standard 24-joint SMPL convention (``JOINT_NAMES``).
World frame is y-up, meters. The shipped template is a procedural tube body;
full-size templates with the same JSON schema load through :func:`load_template`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)
NUM_JOINTS = 24
NUM_BETAS = 10
PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)
FOOT_JOINTS = (10, 11)
ANKLE_JOINTS = (7, 8)

# child position relative to parent, meters; root entry is absolute
REST_OFFSETS = np.array([
    [0.0, 0.95, 0.0],
    [0.09, -0.08, 0.0], [-0.09, -0.08, 0.0], [0.0, 0.11, 0.0],
    [0.0, -0.40, 0.0], [0.0, -0.40, 0.0], [0.0, 0.13, 0.0],
    [0.0, -0.40, 0.0], [0.0, -0.40, 0.0], [0.0, 0.06, 0.0],
    [0.0, -0.06, 0.12], [0.0, -0.06, 0.12], [0.0, 0.22, 0.0],
    [0.07, 0.12, 0.0], [-0.07, 0.12, 0.0], [0.0, 0.09, 0.03],
    [0.10, 0.03, 0.0], [-0.10, 0.03, 0.0],
    [0.26, 0.0, 0.0], [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0],
    [0.08, 0.0, 0.0], [-0.08, 0.0, 0.0],
])

_RING = 8
_RADIUS = np.array([
    0.12, 0.08, 0.08, 0.11, 0.06, 0.06, 0.11, 0.045, 0.045, 0.12, 0.03, 0.03,
    0.05, 0.05, 0.05, 0.09, 0.05, 0.05, 0.04, 0.04, 0.035, 0.035, 0.03, 0.03,
])


class DegenerateRotationError(ValueError):
    pass


@dataclass(frozen=True)
class BodyTemplate:
    vertices: np.ndarray        # V x 3
    shape_basis: np.ndarray     # 10 x V x 3
    weights: np.ndarray         # V x 24
    parents: np.ndarray         # 24
    rest_offsets: np.ndarray    # 24 x 3
    joint_regressor: np.ndarray  # 24 x V
    vertex_radial: np.ndarray | None = None

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def rest_joints(self) -> np.ndarray:
        return offsets_to_positions(self.rest_offsets, self.parents)

    def vertex_joint(self) -> np.ndarray:
        """Dominant skinning joint per vertex (the Indep-level part label)."""
        return np.argmax(self.weights, axis=1)

    def validate(self) -> None:
        v = self.vertices.shape[0]
        _expect(self.vertices.shape == (v, 3), "vertices", f"V x 3, got {self.vertices.shape}")
        _expect(self.shape_basis.shape == (NUM_BETAS, v, 3), "shape_basis",
                f"{NUM_BETAS} x {v} x 3, got {self.shape_basis.shape}")
        _expect(self.weights.shape == (v, NUM_JOINTS), "weights", f"{v} x 24, got {self.weights.shape}")
        _expect(self.joint_regressor.shape == (NUM_JOINTS, v), "joint_regressor",
                f"24 x {v}, got {self.joint_regressor.shape}")
        _expect(self.rest_offsets.shape == (NUM_JOINTS, 3), "rest_offsets", "24 x 3")
        for name in ("vertices", "shape_basis", "weights", "rest_offsets", "joint_regressor"):
            _expect(np.all(np.isfinite(getattr(self, name))), name, "finite values")
        _expect(np.all(self.weights >= 0) and np.allclose(self.weights.sum(1), 1.0, atol=1e-9),
                "weights", "non-negative rows summing to 1")
        _expect(np.all(self.joint_regressor >= 0) and np.allclose(self.joint_regressor.sum(1), 1.0, atol=1e-9),
                "joint_regressor", "non-negative rows summing to 1")
        check_tree(self.parents)

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "weights": self.weights.tolist(),
            "parents": [int(p) for p in self.parents],
            "rest_offsets": self.rest_offsets.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
        }


def _expect(ok: bool, field: str, what: str) -> None:
    if not ok:
        raise ValueError(f"template field {field!r}: expected {what}")


def check_tree(parents) -> None:
    parents = np.asarray(parents)
    if parents.shape != (NUM_JOINTS,):
        raise ValueError(f"template field 'parents': expected 24 entries, got {parents.shape}")
    roots = np.flatnonzero(parents == -1)
    if roots.tolist() != [0]:
        raise ValueError("template field 'parents': joint 0 must be the only root")
    for j in range(NUM_JOINTS):
        seen, k = set(), j
        while k != -1:
            if k in seen or not -1 <= parents[k] < NUM_JOINTS:
                raise ValueError(f"template field 'parents': joint {j} does not reach the root")
            seen.add(k)
            k = int(parents[k])
    # FK walks joints in index order, so parents must come first
    if np.any(parents[1:] >= np.arange(1, NUM_JOINTS)):
        raise ValueError("template field 'parents': parent index must precede child index")


def offsets_to_positions(offsets: np.ndarray, parents=PARENTS) -> np.ndarray:
    pos = np.zeros_like(offsets)
    for j in range(len(parents)):
        pos[j] = offsets[j] if parents[j] < 0 else pos[parents[j]] + offsets[j]
    return pos


def load_template(path) -> BodyTemplate:
    doc = json.loads(Path(path).read_text())
    keys = ("vertices", "shape_basis", "weights", "parents", "rest_offsets", "joint_regressor")
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ValueError(f"template missing fields {missing}")
    tpl = BodyTemplate(
        vertices=np.asarray(doc["vertices"], dtype=np.float64),
        shape_basis=np.asarray(doc["shape_basis"], dtype=np.float64),
        weights=np.asarray(doc["weights"], dtype=np.float64),
        parents=np.asarray(doc["parents"], dtype=np.int64),
        rest_offsets=np.asarray(doc["rest_offsets"], dtype=np.float64),
        joint_regressor=np.asarray(doc["joint_regressor"], dtype=np.float64),
    )
    tpl.validate()
    return tpl


def save_template(tpl: BodyTemplate, path) -> None:
    Path(path).write_text(json.dumps(tpl.to_json()))


def _perp_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    a = np.cross(d, ref)
    a /= np.linalg.norm(a)
    return a, np.cross(d, a)


def make_template(num_vertices: int = 512, seed: int = 0) -> BodyTemplate:
    """Procedural tube body: a vertex ring around each joint plus spirals along bones."""
    joints = offsets_to_positions(REST_OFFSETS)
    n_ring = NUM_JOINTS * _RING
    n_head = 24
    n_bones = num_vertices - n_ring - n_head
    if n_bones < NUM_JOINTS - 1:
        raise ValueError(f"num_vertices must be at least {n_ring + n_head + NUM_JOINTS - 1}")
    verts, weights, radial = [], [], []

    def w_row(pairs):
        row = np.zeros(NUM_JOINTS)
        for j, w in pairs:
            row[j] += w
        return row

    for j in range(NUM_JOINTS):
        p = PARENTS[j]
        if p >= 0:
            d = joints[j] - joints[p]
            d /= np.linalg.norm(d)
        else:
            d = np.array([0.0, 1.0, 0.0])
        a, b = _perp_basis(d)
        row = w_row([(j, 1.0)]) if p < 0 else w_row([(j, 0.5), (p, 0.5)])
        for k in range(_RING):
            ang = 2 * np.pi * k / _RING
            rad = np.cos(ang) * a + np.sin(ang) * b
            verts.append(joints[j] + _RADIUS[j] * rad)
            weights.append(row)
            radial.append(rad)

    children = [j for j in range(1, NUM_JOINTS)]
    lengths = np.array([np.linalg.norm(REST_OFFSETS[c]) for c in children])
    share = lengths / lengths.sum() * n_bones
    counts = np.floor(share).astype(int)
    for i in np.argsort(-(share - counts))[: n_bones - counts.sum()]:
        counts[i] += 1
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for c, n in zip(children, counts):
        p = PARENTS[c]
        d = joints[c] - joints[p]
        d /= np.linalg.norm(d)
        a, b = _perp_basis(d)
        gp = PARENTS[p]
        for k in range(n):
            f = (k + 0.5) / n
            ang = golden * k
            rad = np.cos(ang) * a + np.sin(ang) * b
            r = (1 - f) * _RADIUS[p] + f * _RADIUS[c]
            verts.append(joints[p] + f * (joints[c] - joints[p]) + r * rad)
            if gp >= 0 and f < 0.2:
                wg = 0.5 * (1 - f / 0.2)
                weights.append(w_row([(gp, wg), (p, 1 - wg)]))
            else:
                weights.append(w_row([(p, 1.0)]))
            radial.append(rad)

    head = joints[15] + np.array([0.0, 0.08, 0.0])
    for k in range(n_head):
        z = 1 - 2 * (k + 0.5) / n_head
        rr = np.sqrt(1 - z * z)
        ang = golden * k
        rad = np.array([rr * np.cos(ang), z, rr * np.sin(ang)])
        verts.append(head + 0.1 * rad)
        weights.append(w_row([(15, 1.0)]))
        radial.append(rad)

    verts = np.array(verts)
    weights = np.array(weights)
    radial = np.array(radial)
    regressor = np.zeros((NUM_JOINTS, num_vertices))
    for j in range(NUM_JOINTS):
        regressor[j, j * _RING:(j + 1) * _RING] = 1.0 / _RING

    rng = np.random.default_rng(seed)
    basis = np.zeros((NUM_BETAS, num_vertices, 3))
    basis[0] = 0.1 * (verts - np.array([0.0, 0.0, 0.0]))  # overall stature
    basis[1] = 0.02 * radial  # girth
    for k in range(2, NUM_BETAS):
        lin = rng.normal(size=(3, 3)) * 0.03
        basis[k] = (verts - joints[0]) @ lin
    tpl = BodyTemplate(verts, basis, weights, PARENTS.copy(), REST_OFFSETS.copy(), regressor, radial)
    tpl.validate()
    return tpl


_DEFAULT: dict[int, BodyTemplate] = {}


def default_template(num_vertices: int = 512) -> BodyTemplate:
    if num_vertices not in _DEFAULT:
        _DEFAULT[num_vertices] = make_template(num_vertices)
    return _DEFAULT[num_vertices]


# ---------------------------------------------------------------- rotations

def rot6d_to_rotmat(r6, eps: float = 1e-8):
    """Gram-Schmidt decode of (..., 6) into (..., 3, 3); columns are b1, b2, b1 x b2.

    Accepts numpy arrays or Tensors; the Tensor path is differentiable.
    """
    is_t = isinstance(r6, Tensor)
    raw = r6.data if is_t else np.asarray(r6, dtype=np.float64)
    if raw.shape[-1] != 6:
        raise ValueError(f"rot6d input must have last extent 6, got {raw.shape}")
    a1, a2 = raw[..., :3], raw[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 < eps):
        raise DegenerateRotationError(f"rot6d first column near zero (norm {n1.min():.3e})")
    b1 = a1 / n1[..., None]
    resid = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    n2 = np.linalg.norm(resid, axis=-1)
    cond = n2 / np.maximum(np.linalg.norm(a2, axis=-1), 1e-300)
    if np.any(n2 < eps) or np.any(cond < eps):
        raise DegenerateRotationError(
            f"rot6d columns near parallel (residual norm {n2.min():.3e}, ratio {cond.min():.3e})"
        )
    if not is_t:
        b2 = resid / n2[..., None]
        return np.stack([b1, b2, np.cross(b1, b2)], axis=-1)
    a1t, a2t = T.slice_axis(r6, 0, 3), T.slice_axis(r6, 3, 6)
    b1t = a1t / T.sqrt(T.tsum(a1t * a1t, -1, keepdims=True))
    rt = a2t - T.tsum(b1t * a2t, -1, keepdims=True) * b1t
    b2t = rt / T.sqrt(T.tsum(rt * rt, -1, keepdims=True))
    return T.stack([b1t, b2t, T.cross3(b1t, b2t)], axis=-1)


def rotmat_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_to_rotmat(aa: np.ndarray) -> np.ndarray:
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    k = np.where(theta > 1e-12, aa / np.maximum(theta, 1e-300), 0.0)
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def yaw_matrix(angle) -> np.ndarray:
    """Rotation about +y; heading angle 0 faces +z."""
    a = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 0, 0], R[..., 0, 2] = c, s
    R[..., 1, 1] = 1.0
    R[..., 2, 0], R[..., 2, 2] = -s, c
    return R


# ---------------------------------------------------------------- body ops

def shape_mesh(template: BodyTemplate, betas):
    """Template plus the beta-weighted sum of shape basis vectors."""
    if isinstance(betas, Tensor):
        if betas.shape[-1] != NUM_BETAS:
            raise ValueError(f"betas must have {NUM_BETAS} entries, got {betas.shape}")
        flat = template.shape_basis.reshape(NUM_BETAS, -1)
        off = T.matmul(betas.reshape(-1, 1, NUM_BETAS), Tensor(flat)).reshape(
            *betas.shape[:-1], template.num_vertices, 3
        )
        return off + template.vertices
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape[-1] != NUM_BETAS:
        raise ValueError(f"betas must have {NUM_BETAS} entries, got {betas.shape}")
    return template.vertices + np.einsum("...k,kvc->...vc", betas, template.shape_basis)


def regress_joints(mesh, regressor: np.ndarray):
    """J = W M for (..., V, 3) meshes."""
    if isinstance(mesh, Tensor):
        return T.matmul(Tensor(regressor), mesh)
    return np.asarray(regressor) @ np.asarray(mesh)


def forward_kinematics(template: BodyTemplate, rotmats, rest_joints=None):
    """World rotations (..., 24, 3, 3) and positions (..., 24, 3) of each joint.

    ``rotmats`` are local rotations, e.g. from :func:`rot6d_to_rotmat`.
    ``rest_joints`` defaults to the template rest pose; pass the regressed joints
    of a shaped mesh to make bone lengths follow shape.
    """
    parents = template.parents
    if isinstance(rotmats, Tensor) or isinstance(rest_joints, Tensor):
        return _fk_tensor(parents, T.as_tensor(rotmats), rest_joints if rest_joints is not None else template.rest_joints())
    R = np.asarray(rotmats, dtype=np.float64)
    J = np.asarray(rest_joints if rest_joints is not None else template.rest_joints())
    J = np.broadcast_to(J, R.shape[:-2] + (3,))
    Rw = np.empty_like(R)
    tw = np.empty(R.shape[:-2] + (3,))
    for j in range(len(parents)):
        p = parents[j]
        if p < 0:
            Rw[..., j, :, :] = R[..., j, :, :]
            tw[..., j, :] = J[..., j, :]
        else:
            Rw[..., j, :, :] = Rw[..., p, :, :] @ R[..., j, :, :]
            off = J[..., j, :] - J[..., p, :]
            tw[..., j, :] = (Rw[..., p, :, :] @ off[..., None])[..., 0] + tw[..., p, :]
    return Rw, tw


def _fk_tensor(parents, R: Tensor, J):
    J = T.as_tensor(J)
    target = R.shape[:-2] + (3,)
    if J.shape != target:
        J = T.broadcast_to(J, target)
    Rl = [R[..., j, :, :] for j in range(len(parents))]
    Jl = [J[..., j, :] for j in range(len(parents))]
    Rw, tw = [], []
    for j, p in enumerate(parents):
        if p < 0:
            Rw.append(Rl[j])
            tw.append(Jl[j])
        else:
            off = Jl[j] - Jl[p]
            Rw.append(T.matmul(Rw[p], Rl[j]))
            moved = T.matmul(Rw[p], off.reshape(*off.shape, 1)).reshape(*tw[p].shape)
            tw.append(moved + tw[p])
    return T.stack(Rw, axis=-3), T.stack(tw, axis=-2)


def skin_mesh(shaped, world_rot, world_pos, rest_joints, weights: np.ndarray):
    """Linear blend skinning relative to the rest pose (rest joint frames are translations)."""
    if any(isinstance(a, Tensor) for a in (shaped, world_rot, world_pos, rest_joints)):
        shaped, world_rot, world_pos, rest_joints = map(T.as_tensor, (shaped, world_rot, world_pos, rest_joints))
        At = world_pos - T.matmul(world_rot, rest_joints.reshape(*rest_joints.shape, 1)).reshape(*world_pos.shape)
        lead = world_rot.shape[:-3]
        W = Tensor(weights)
        MR = T.matmul(W, world_rot.reshape(*lead, NUM_JOINTS, 9)).reshape(*lead, weights.shape[0], 3, 3)
        Mt = T.matmul(W, At)
        v = T.matmul(MR, shaped.reshape(*shaped.shape, 1)).reshape(*Mt.shape)
        return v + Mt
    shaped = np.asarray(shaped)
    At = world_pos - (world_rot @ np.asarray(rest_joints)[..., None])[..., 0]
    MR = np.einsum("vj,...jab->...vab", weights, world_rot)
    Mt = np.einsum("vj,...ja->...va", weights, At)
    return (MR @ shaped[..., None])[..., 0] + Mt


@dataclass
class BodyOutput:
    vertices: object
    joints: object
    world_rot: object
    world_pos: object


def body_forward(template: BodyTemplate, pose6d, betas) -> BodyOutput:
    """rot6d pose (..., 24, 6) and betas (..., 10) to posed mesh and regressed joints."""
    shaped = shape_mesh(template, betas)
    rest = regress_joints(shaped, template.joint_regressor)
    R = rot6d_to_rotmat(pose6d)
    Rw, tw = forward_kinematics(template, R, rest)
    verts = skin_mesh(shaped, Rw, tw, rest, template.weights)
    joints = regress_joints(verts, template.joint_regressor)
    return BodyOutput(verts, joints, Rw, tw)
