import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ropetp import tensor as T
from ropetp.hierarchy import (LEVELS, PART_COUNTS, PartitionTable, default_partition,
                              expand_to_joints, pool_joint_errors, pool_joints)

TABLE = default_partition()


def random_table(seed):
    rng = np.random.default_rng(seed)
    maps = {"Indep": np.arange(24)}
    for level in ("Inter", "FulCo"):
        n = PART_COUNTS[level]
        m = np.concatenate([np.arange(n), rng.integers(0, n, 24 - n)])
        maps[level] = rng.permutation(m)
    return PartitionTable(maps)


def test_part_counts():
    assert PART_COUNTS == {"Indep": 24, "Inter": 11, "FulCo": 6, "WhoBo": 1}
    for level in LEVELS:
        assert len(np.unique(TABLE[level])) == PART_COUNTS[level]


def test_indep_is_identity_and_every_joint_assigned_once():
    np.testing.assert_array_equal(TABLE["Indep"], np.arange(24))
    for level in LEVELS:
        parts = [TABLE.members(level, p) for p in range(PART_COUNTS[level])]
        assert sorted(np.concatenate(parts).tolist()) == list(range(24))


def test_fulco_arm_token_reaches_shoulder_elbow_wrist():
    # left shoulder 16, left elbow 18, left wrist 20 share one FulCo part
    assert len({TABLE["FulCo"][j] for j in (16, 18, 20, 22)}) == 1
    tokens = np.arange(6.0)[:, None] * np.ones((1, 4))
    out = expand_to_joints(tokens, "FulCo", TABLE)
    arm = TABLE["FulCo"][16]
    for j in (16, 18, 20):
        np.testing.assert_array_equal(out[j], tokens[arm])


def test_whobo_expands_to_identical_rows(rng):
    tok = rng.normal(size=(1, 5))
    out = expand_to_joints(tok, "WhoBo", TABLE)
    assert out.shape == (24, 5) and np.all(out == tok)


def test_expand_rejects_wrong_token_count():
    with pytest.raises(ValueError, match="11 tokens"):
        expand_to_joints(np.zeros((6, 3)), "Inter", TABLE)


def test_table_validation():
    bad = dict(TABLE.maps)
    bad["FulCo"] = np.where(TABLE["FulCo"] == 5, 4, TABLE["FulCo"])
    with pytest.raises(ValueError, match="without joints"):
        PartitionTable(bad)
    bad = dict(TABLE.maps)
    bad["Indep"] = np.roll(np.arange(24), 1)
    with pytest.raises(ValueError, match="identity"):
        PartitionTable(bad)


def test_json_round_trip():
    back = PartitionTable.from_json(TABLE.to_json())
    for level in LEVELS:
        np.testing.assert_array_equal(back[level], TABLE[level])


@given(st.integers(0, 10**6), st.sampled_from(LEVELS), st.integers(1, 5))
def test_expand_then_pool_is_identity(seed, level, channels):
    table = random_table(seed)
    tok = np.random.default_rng(seed).normal(size=(PART_COUNTS[level], channels))
    out = expand_to_joints(tok, level, table)
    assert out.shape == (24, channels)
    np.testing.assert_allclose(pool_joints(out, level, table), tok, atol=1e-14)


def test_expand_tensor_path_is_differentiable(rng):
    tok = T.Tensor(rng.normal(size=(2, 11, 3)), requires_grad=True)
    out = expand_to_joints(tok, "Inter", TABLE)
    g = T.backward(T.tsum(out))[tok]
    counts = np.bincount(TABLE["Inter"], minlength=11)
    np.testing.assert_array_equal(g, np.broadcast_to(counts[None, :, None], (2, 11, 3)))


def test_pool_constant_and_one_hot():
    np.testing.assert_array_equal(pool_joint_errors(np.full(24, 3.5), "Inter", TABLE), np.full(11, 3.5))
    e = np.zeros(24)
    e[19] = 7.0
    out = pool_joint_errors(e, "FulCo", TABLE, "max")
    want = np.zeros(6)
    want[TABLE["FulCo"][19]] = 7.0
    np.testing.assert_array_equal(out, want)


@pytest.mark.parametrize("reducer", ["mean", "max"])
def test_pool_matches_loop(rng, reducer):
    v = rng.normal(size=24)
    got = pool_joint_errors(v, "Inter", TABLE, reducer)
    for p in range(11):
        vals = [v[j] for j in range(24) if TABLE["Inter"][j] == p]
        want = sum(vals) / len(vals) if reducer == "mean" else max(vals)
        assert got[p] == pytest.approx(want, abs=1e-14)


def test_pool_rejects_unknown_reducer():
    with pytest.raises(ValueError, match="reducer"):
        pool_joint_errors(np.zeros(24), "Inter", TABLE, "median")


def test_permuted_table_relabels_joints():
    perm = np.random.default_rng(3).permutation(24)
    p = TABLE.permuted(perm)
    for level in ("Inter", "FulCo"):
        np.testing.assert_array_equal(p[level], TABLE[level][perm])
