import json

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ropetp import body_model as bm
from ropetp import tensor as T
from ropetp.body_model import DegenerateRotationError, Tensor
from ropetp.tensor import grad_check

TPL = bm.default_template(256)
ID6 = np.tile([1.0, 0, 0, 0, 1, 0], (24, 1))


def small_rot6d(rng, n=24, scale=0.4):
    return bm.rotmat_to_rot6d(bm.axis_angle_to_rotmat(rng.normal(scale=scale, size=(n, 3))))


# ---------------------------------------------------------------- template

def test_default_template_satisfies_invariants():
    TPL.validate()
    assert TPL.num_vertices == 256
    assert len(bm.JOINT_NAMES) == 24 and bm.PARENTS[0] == -1


def test_template_json_round_trip(tmp_path):
    bm.save_template(TPL, tmp_path / "t.json")
    back = bm.load_template(tmp_path / "t.json")
    for name in ("vertices", "shape_basis", "weights", "rest_offsets", "joint_regressor"):
        np.testing.assert_array_equal(getattr(back, name), getattr(TPL, name))


def test_loader_rejects_bad_weights(tmp_path):
    doc = TPL.to_json()
    doc["weights"][3][0] += 0.5
    (tmp_path / "t.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="weights"):
        bm.load_template(tmp_path / "t.json")


def test_loader_names_missing_field(tmp_path):
    doc = TPL.to_json()
    del doc["joint_regressor"]
    (tmp_path / "t.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="joint_regressor"):
        bm.load_template(tmp_path / "t.json")


def test_cyclic_parents_rejected():
    p = bm.PARENTS.copy()
    p[1] = 4
    with pytest.raises(ValueError, match="parents"):
        bm.check_tree(p)


# ---------------------------------------------------------------- rot6d

def test_rot6d_identity_and_scale_invariance():
    np.testing.assert_array_equal(bm.rot6d_to_rotmat(np.array([1.0, 0, 0, 0, 1, 0])), np.eye(3))
    np.testing.assert_allclose(bm.rot6d_to_rotmat(np.array([2.0, 0, 0, 0, 3, 0])), np.eye(3), atol=1e-15)


@pytest.mark.parametrize("r6", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1e-12, 0, 0, 0, 1, 0]])
def test_rot6d_degenerate_inputs_rejected(r6):
    with pytest.raises(DegenerateRotationError, match="norm|ratio"):
        bm.rot6d_to_rotmat(np.array(r6, dtype=float))


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_rot6d_output_in_so3(r6):
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    assume(n1 > 1e-3 and np.linalg.norm(np.cross(a1, a2)) > 1e-3 * n1 * max(np.linalg.norm(a2), 1e-3))
    R = bm.rot6d_to_rotmat(r6)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(R) - 1.0) < 1e-10


def test_rot6d_tensor_path_matches_numpy(rng):
    r6 = rng.normal(size=(5, 6))
    np.testing.assert_allclose(bm.rot6d_to_rotmat(Tensor(r6)).data, bm.rot6d_to_rotmat(r6), atol=1e-14)


# ---------------------------------------------------------------- shape / regress

def test_shape_mesh_cases(rng):
    np.testing.assert_array_equal(bm.shape_mesh(TPL, np.zeros(10)), TPL.vertices)
    e1 = np.eye(10)[0]
    np.testing.assert_allclose(bm.shape_mesh(TPL, e1), TPL.vertices + TPL.shape_basis[0], atol=1e-15)
    beta = rng.normal(size=10)
    want = TPL.vertices.copy()
    for k in range(10):
        want = want + beta[k] * TPL.shape_basis[k]
    np.testing.assert_allclose(bm.shape_mesh(TPL, beta), want, atol=1e-13)


def test_shape_mesh_rejects_wrong_length():
    with pytest.raises(ValueError, match="10"):
        bm.shape_mesh(TPL, np.zeros(9))


def test_regress_joints_cases(rng):
    M = rng.normal(size=(6, 3))
    onehot = np.zeros((24, 6))
    onehot[np.arange(24), np.arange(24) % 6] = 1
    np.testing.assert_array_equal(bm.regress_joints(M, onehot), M[np.arange(24) % 6])
    np.testing.assert_allclose(bm.regress_joints(M, np.full((24, 6), 1 / 6))[5], M.mean(0), atol=1e-15)
    W = rng.random((24, 6))
    W /= W.sum(1, keepdims=True)
    want = np.array([[sum(W[j, v] * M[v, c] for v in range(6)) for c in range(3)] for j in range(24)])
    np.testing.assert_allclose(bm.regress_joints(M, W), want, atol=1e-14)


# ---------------------------------------------------------------- kinematics

def test_fk_identity_pose_accumulates_offsets():
    _, pos = bm.forward_kinematics(TPL, np.tile(np.eye(3), (24, 1, 1)))
    want = np.zeros((24, 3))
    for j in range(24):
        p = bm.PARENTS[j]
        want[j] = TPL.rest_offsets[j] + (want[p] if p >= 0 else 0)
    np.testing.assert_allclose(pos, want, atol=1e-15)


def test_fk_root_rotation_is_rigid(rng):
    R = bm.axis_angle_to_rotmat(rng.normal(size=3))
    rots = np.tile(np.eye(3), (24, 1, 1))
    rots[0] = R
    _, pos = bm.forward_kinematics(TPL, rots)
    rest = TPL.rest_joints()
    np.testing.assert_allclose(pos, (rest - rest[0]) @ R.T + rest[0], atol=1e-14)


def test_fk_planar_elbow():
    # root at origin, joint 1 one unit along x, joint 4 (child of 1) another unit along x
    rest = np.zeros((24, 3))
    rest[1] = [1.0, 0, 0]
    rest[4] = [2.0, 0, 0]
    rots = np.tile(np.eye(3), (24, 1, 1))
    rots[1] = bm.axis_angle_to_rotmat(np.array([0, 0, np.pi / 2]))
    _, pos = bm.forward_kinematics(TPL, rots, rest)
    np.testing.assert_allclose(pos[4], [1.0, 1.0, 0.0], atol=1e-15)


# ---------------------------------------------------------------- skinning

def _rigid(Rw, tw, rest, j, v):
    return Rw[j] @ (v - rest[j]) + tw[j]


def test_skin_identity_pose_unchanged():
    shaped = bm.shape_mesh(TPL, np.zeros(10))
    rest = bm.regress_joints(shaped, TPL.joint_regressor)
    Rw, tw = bm.forward_kinematics(TPL, np.tile(np.eye(3), (24, 1, 1)), rest)
    np.testing.assert_allclose(bm.skin_mesh(shaped, Rw, tw, rest, TPL.weights), shaped, atol=1e-14)


def test_skin_single_and_blended_weights(rng):
    shaped = rng.normal(size=(3, 3))
    rest = TPL.rest_joints()
    Rw, tw = bm.forward_kinematics(TPL, bm.axis_angle_to_rotmat(rng.normal(scale=0.5, size=(24, 3))), rest)
    W = np.zeros((3, 24))
    W[0, 5] = 1.0
    W[1, 0] = 1.0
    W[2, 7] = W[2, 20] = 0.5
    out = bm.skin_mesh(shaped, Rw, tw, rest, W)
    np.testing.assert_allclose(out[0], _rigid(Rw, tw, rest, 5, shaped[0]), atol=1e-14)
    np.testing.assert_allclose(out[1], _rigid(Rw, tw, rest, 0, shaped[1]), atol=1e-14)
    mean = 0.5 * (_rigid(Rw, tw, rest, 7, shaped[2]) + _rigid(Rw, tw, rest, 20, shaped[2]))
    np.testing.assert_allclose(out[2], mean, atol=1e-14)


def test_skin_root_only_weights_are_rigid(rng):
    shaped = bm.shape_mesh(TPL, rng.normal(size=10))
    rest = bm.regress_joints(shaped, TPL.joint_regressor)
    Rw, tw = bm.forward_kinematics(TPL, bm.axis_angle_to_rotmat(rng.normal(size=(24, 3))), rest)
    W = np.zeros_like(TPL.weights)
    W[:, 0] = 1
    out = bm.skin_mesh(shaped, Rw, tw, rest, W)
    np.testing.assert_allclose(out, (shaped - rest[0]) @ Rw[0].T + tw[0], atol=1e-13)


# ---------------------------------------------------------------- end to end

@given(st.integers(0, 2**32 - 1))
def test_root_prerotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    theta, beta = small_rot6d(rng), rng.normal(scale=0.5, size=10)
    R = bm.axis_angle_to_rotmat(rng.normal(size=3))
    base = bm.body_forward(TPL, theta, beta)
    rot = theta.copy()
    rot[0] = bm.rotmat_to_rot6d(R @ bm.rot6d_to_rotmat(theta[0]))
    out = bm.body_forward(TPL, rot, beta)
    root = base.world_pos[0]
    np.testing.assert_allclose(out.vertices, (base.vertices - root) @ R.T + root, atol=1e-9)
    np.testing.assert_allclose(out.joints, (base.joints - root) @ R.T + root, atol=1e-9)


def test_batched_forward_matches_single(rng):
    theta = np.stack([small_rot6d(rng) for _ in range(3)])
    beta = rng.normal(size=(3, 10))
    batch = bm.body_forward(TPL, theta, beta)
    one = bm.body_forward(TPL, theta[1], beta[1])
    np.testing.assert_allclose(batch.joints[1], one.joints, atol=1e-13)


def test_tensor_forward_matches_numpy(rng):
    theta, beta = small_rot6d(rng), rng.normal(size=10)
    a = bm.body_forward(TPL, theta, beta)
    b = bm.body_forward(TPL, Tensor(theta), Tensor(beta))
    np.testing.assert_allclose(b.vertices.data, a.vertices, atol=1e-13)
    np.testing.assert_allclose(b.joints.data, a.joints, atol=1e-13)


def test_identity_pose_zero_shape_joints_are_regressed_template():
    out = bm.body_forward(TPL, ID6, np.zeros(10))
    np.testing.assert_allclose(out.joints, TPL.joint_regressor @ TPL.vertices, atol=1e-13)


def test_grad_check_through_pose_and_shape(rng):
    theta, beta = small_rot6d(rng), rng.normal(scale=0.3, size=10)
    w = rng.normal(size=(24, 3))
    assert grad_check(lambda t: T.tsum(bm.body_forward(TPL, t, beta).joints * w), theta) < 1e-5
    assert grad_check(lambda b: T.tsum(bm.body_forward(TPL, theta, b).joints * w), beta) < 1e-5
