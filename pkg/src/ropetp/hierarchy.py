"""Four-level body hierarchy (Indep / Inter / FulCo / WhoBo) and joint<->part maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .body_model import NUM_JOINTS
from .tensor import Tensor

LEVELS = ("Indep", "Inter", "FulCo", "WhoBo")
PART_COUNTS = {"Indep": 24, "Inter": 11, "FulCo": 6, "WhoBo": 1}

# Part membership by joint index (see JOINT_NAMES). Inter: head+neck, upper torso,
# pelvis+hips, L upper arm+shoulder, L forearm+hand, R upper arm+shoulder,
# R forearm+hand, L thigh, L shank+foot, R thigh, R shank+foot.
INTER_GROUPS = (
    (12, 15), (3, 6, 9, 13, 14), (0, 1, 2), (16, 18), (20, 22),
    (17, 19), (21, 23), (4,), (7, 10), (5,), (8, 11),
)
# FulCo: head+neck, torso (spine chain + collars + pelvis), L arm, R arm, L leg, R leg.
FULCO_GROUPS = (
    (12, 15), (0, 3, 6, 9, 13, 14), (16, 18, 20, 22), (17, 19, 21, 23),
    (1, 4, 7, 10), (2, 5, 8, 11),
)


def _groups_to_map(groups) -> np.ndarray:
    m = np.full(NUM_JOINTS, -1, dtype=np.int64)
    for part, joints in enumerate(groups):
        m[list(joints)] = part
    return m


@dataclass(frozen=True)
class PartitionTable:
    """joint index -> part index for every level."""

    maps: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for level in LEVELS:
            if level not in self.maps:
                if level == "WhoBo":
                    self.maps[level] = np.zeros(NUM_JOINTS, dtype=np.int64)
                else:
                    raise ValueError(f"partition table lacks level {level}")
            self.maps[level] = np.asarray(self.maps[level], dtype=np.int64)
        self.validate()

    def __getitem__(self, level: str) -> np.ndarray:
        return self.maps[level]

    def validate(self) -> None:
        for level in LEVELS:
            m = self.maps[level]
            n = PART_COUNTS[level]
            if m.shape != (NUM_JOINTS,):
                raise ValueError(f"{level} map must assign all 24 joints, got shape {m.shape}")
            if m.min() < 0 or m.max() >= n:
                raise ValueError(f"{level} map has part indices outside 0..{n - 1}")
            if len(np.unique(m)) != n:
                missing = sorted(set(range(n)) - set(m.tolist()))
                raise ValueError(f"{level} map leaves parts {missing} without joints")
        if not np.array_equal(self.maps["Indep"], np.arange(NUM_JOINTS)):
            raise ValueError("Indep map must be the identity")

    def members(self, level: str, part: int) -> np.ndarray:
        return np.flatnonzero(self.maps[level] == part)

    def to_json(self) -> dict:
        return {lvl: self.maps[lvl].tolist() for lvl in ("Inter", "FulCo")}

    @classmethod
    def from_json(cls, doc: dict) -> "PartitionTable":
        return cls({
            "Indep": np.arange(NUM_JOINTS),
            "Inter": np.asarray(doc["Inter"]),
            "FulCo": np.asarray(doc["FulCo"]),
        })

    def permuted(self, perm: np.ndarray) -> "PartitionTable":
        """Table for joints relabelled so that new joint i is old joint perm[i]."""
        perm = np.asarray(perm)
        maps = {lvl: self.maps[lvl][perm] for lvl in ("Inter", "FulCo")}
        maps["Indep"] = np.arange(NUM_JOINTS)
        return PartitionTable(maps)


def default_partition() -> PartitionTable:
    return PartitionTable({
        "Indep": np.arange(NUM_JOINTS),
        "Inter": _groups_to_map(INTER_GROUPS),
        "FulCo": _groups_to_map(FULCO_GROUPS),
    })


def expand_to_joints(tokens, level: str, table: PartitionTable):
    """Copy each part token to the joints it contains: (..., P, C) -> (..., 24, C)."""
    n = PART_COUNTS[level]
    shape = tokens.shape
    if len(shape) < 2 or shape[-2] != n:
        raise ValueError(f"{level} expects {n} tokens, got shape {tuple(shape)}")
    idx = table[level]
    if isinstance(tokens, Tensor):
        return T.getitem(tokens, (Ellipsis, idx, slice(None)))
    return np.asarray(tokens)[..., idx, :]


def pool_joints(values: np.ndarray, level: str, table: PartitionTable, reducer: str = "mean") -> np.ndarray:
    """Reduce per-joint rows (..., 24[, C]) into per-part rows."""
    values = np.asarray(values, dtype=np.float64)
    m = table[level]
    n = PART_COUNTS[level]
    squeeze = values.ndim == 1
    v = values[:, None] if squeeze else values
    if reducer == "mean":
        out = np.stack([v[np.flatnonzero(m == p)].mean(axis=0) for p in range(n)])
    elif reducer == "max":
        out = np.stack([v[np.flatnonzero(m == p)].max(axis=0) for p in range(n)])
    else:
        raise ValueError(f"unknown reducer {reducer!r}")
    return out[:, 0] if squeeze else out


def pool_joint_errors(per_joint, level: str, table: PartitionTable, reducer: str = "mean") -> np.ndarray:
    per_joint = np.asarray(per_joint, dtype=np.float64)
    if per_joint.shape != (NUM_JOINTS,):
        raise ValueError(f"expected 24 per-joint values, got {per_joint.shape}")
    return pool_joints(per_joint, level, table, reducer)
