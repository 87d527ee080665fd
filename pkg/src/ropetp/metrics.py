"""Pose and trajectory error metrics. Inputs in meters, outputs in millimeters."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

GRAVITY_AXIS = 1  # +y is up


class AlignmentError(ValueError):
    pass


class AlignmentFallbackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation


def _check_same(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def mpjpe(pred, gt) -> float:
    """Mean Euclidean joint error over all frames and joints, in mm."""
    pred, gt = _check_same(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def mpvpe(pred, gt) -> float:
    """Mean per-vertex error in mm; same computation as :func:`mpjpe` over vertices."""
    return mpjpe(pred, gt)


def procrustes_align(pred, gt) -> SimilarityTransform:
    """Least-squares similarity mapping ``pred`` (J x 3) onto ``gt``."""
    pred, gt = _check_same(pred, gt)
    if pred.ndim != 2 or pred.shape[1] != 3 or pred.shape[0] < 3:
        raise AlignmentError(f"need J >= 3 points of dimension 3, got {pred.shape}")
    mp, mg = pred.mean(0), gt.mean(0)
    X, Y = pred - mp, gt - mg
    sx = np.linalg.svd(X, compute_uv=False)
    rank = int((sx > 1e-10 * max(1.0, sx[0])).sum())
    if rank < 2:
        raise AlignmentError(f"pred points are rank-deficient (rank {rank})")
    if np.array_equal(pred, gt):
        # the SVD route leaves ~1e-13 of round-off; the exact minimizer is known
        return SimilarityTransform(1.0, np.eye(3), np.zeros(3))
    U, S, Vt = np.linalg.svd(Y.T @ X)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    s = float((S * np.diag(D)).sum() / (X * X).sum())
    t = mg - s * R @ mp
    return SimilarityTransform(s, R, t)


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame Procrustes alignment; accepts J x 3 or N x J x 3."""
    pred, gt = _check_same(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    aligned = np.stack([procrustes_align(p, g).apply(p) for p, g in zip(pred, gt)])
    return mpjpe(aligned, gt)


def fit_yaw_translation(pred: np.ndarray, gt: np.ndarray):
    """Rotation about the gravity axis plus translation minimizing squared error.

    Returns (R, t, ok); ok is False when the yaw is undetermined and only a
    translation was fitted.
    """
    P = pred.reshape(-1, 3)
    G = gt.reshape(-1, 3)
    mp, mg = P.mean(0), G.mean(0)
    X, Y = P - mp, G - mg
    a = float((Y[:, 0] * X[:, 0] + Y[:, 2] * X[:, 2]).sum())
    b = float((Y[:, 0] * X[:, 2] - Y[:, 2] * X[:, 0]).sum())
    ok = np.hypot(a, b) > 1e-12 * max(1.0, float((X * X).sum()))
    phi = np.arctan2(b, a) if ok else 0.0
    c, s = np.cos(phi), np.sin(phi)
    R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    t = mg - R @ mp
    return R, t, ok


def _world_error(pred, gt, window: int | None) -> float:
    pred, gt = _check_same(pred, gt)
    if pred.ndim != 3 or pred.shape[0] < 2:
        raise ValueError(f"expected N x J x 3 with N >= 2, got {pred.shape}")
    sel = slice(None) if window is None else slice(0, window)
    R, t, ok = fit_yaw_translation(pred[sel], gt[sel])
    if not ok:
        warnings.warn("yaw undetermined by the alignment frames; translation-only alignment",
                      AlignmentFallbackWarning, stacklevel=3)
    return mpjpe(pred @ R.T + t, gt)


def w_mpjpe(pred, gt, window: int = 2) -> float:
    """World MPJPE after yaw+translation alignment fitted on the first ``window`` frames."""
    return _world_error(pred, gt, window)


def wa_mpjpe(pred, gt) -> float:
    """World MPJPE after one yaw+translation alignment over the whole sequence."""
    return _world_error(pred, gt, None)


def occlusion_sensitivity_map(predict_joints, scene, gt_joints, occluder, stride: int, occlude=None) -> np.ndarray:
    """Slide a zeroing occluder over the scene; record the max per-joint 3D error (mm).

    ``predict_joints(scene) -> 24 x 3`` runs the model. ``occluder`` is (h, w) in
    pixels. Grid cell (a, b) has its occluder's top-left corner at
    (a * stride, b * stride).
    """
    if occlude is None:
        from .synth_data import apply_occluder as occlude
    H, W = scene.height, scene.width
    oh, ow = occluder
    if oh > H or ow > W:
        raise ValueError(f"occluder {occluder} larger than scene {H}x{W}")
    rows = range(0, H - oh + 1, stride)
    cols = range(0, W - ow + 1, stride)
    gt_joints = np.asarray(gt_joints)
    grid = np.zeros((len(rows), len(cols)))
    for a, r in enumerate(rows):
        for b, c in enumerate(cols):
            occluded = occlude(scene, (r, c, r + oh, c + ow), "zero")
            err = np.linalg.norm(np.asarray(predict_joints(occluded)) - gt_joints, axis=-1)
            grid[a, b] = err.max() * 1000.0
    return grid
