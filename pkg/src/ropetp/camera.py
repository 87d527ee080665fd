"""Weak-perspective camera, 2D/3D camera fitting, and point-splat part-mask rasterization.

Image coordinates are normalized to [0, 1]^2; pixel (i, j) covers
[j/W, (j+1)/W) x [i/H, (i+1)/H), with u running along columns and v along rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .hierarchy import LEVELS, PART_COUNTS, PartitionTable
from .tensor import Tensor


@dataclass(frozen=True)
class WeakPerspectiveCam:
    s: float
    tx: float
    ty: float

    def __post_init__(self):
        if not (np.isfinite(self.s) and np.isfinite(self.tx) and np.isfinite(self.ty)):
            raise ValueError("camera parameters must be finite")
        if self.s <= 0:
            raise ValueError(f"camera scale must be positive, got {self.s}")

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.tx, self.ty])

    @classmethod
    def from_array(cls, a) -> "WeakPerspectiveCam":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]))


class DegenerateFitError(ValueError):
    pass


def project(points, cam):
    """(u, v) = s * (x, y) + t. ``cam`` is a WeakPerspectiveCam or (..., 3) array/Tensor."""
    if isinstance(cam, WeakPerspectiveCam):
        cam = cam.as_array()
    if isinstance(points, Tensor) or isinstance(cam, Tensor):
        points, cam = T.as_tensor(points), T.as_tensor(cam)
        s = T.slice_axis(cam, 0, 1).reshape(*cam.shape[:-1], 1, 1)
        t = T.slice_axis(cam, 1, 3).reshape(*cam.shape[:-1], 1, 2)
        return T.slice_axis(points, 0, 2) * s + t
    points = np.asarray(points, dtype=np.float64)
    cam = np.asarray(cam, dtype=np.float64)
    return points[..., :2] * cam[..., None, :1] + cam[..., None, 1:3]


def fit_cam(points2d, points3d, eps: float = 1e-12) -> WeakPerspectiveCam:
    """Closed-form least squares for (s, t) from K >= 2 correspondences."""
    uv = np.asarray(points2d, dtype=np.float64)
    xy = np.asarray(points3d, dtype=np.float64)[:, :2]
    if uv.ndim != 2 or uv.shape[1] != 2 or len(uv) != len(xy):
        raise ValueError(f"expected K x 2 and K x 3 inputs, got {uv.shape} and {np.shape(points3d)}")
    if len(uv) < 2:
        raise DegenerateFitError("need at least two correspondences")
    xc = xy - xy.mean(0)
    uc = uv - uv.mean(0)
    spread = float((xc * xc).sum())
    if spread <= eps * max(1.0, float((xy * xy).sum())):
        raise DegenerateFitError(f"3D points have no xy spread (sum of squares {spread:.3e})")
    s = float((xc * uc).sum()) / spread
    if s <= 0:
        raise DegenerateFitError(f"fitted scale {s:.6g} is not positive; correspondences are mirrored or noise-dominated")
    t = uv.mean(0) - s * xy.mean(0)
    return WeakPerspectiveCam(s, float(t[0]), float(t[1]))


def rasterize(points2d, depth, labels, height: int, width: int) -> np.ndarray:
    """Point-splat z-buffer: each pixel takes the label of its nearest-depth point.

    Smaller depth is nearer; equal depths go to the lower point index. Empty
    pixels are 0, so ``labels`` should already be offset past background.
    """
    uv = np.asarray(points2d, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.zeros((height, width), dtype=np.int64)
    col = np.floor(uv[:, 0] * width)
    row = np.floor(uv[:, 1] * height)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height) & np.isfinite(depth)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return mask
    pix = row[idx].astype(np.int64) * width + col[idx].astype(np.int64)
    order = np.lexsort((idx, depth[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = idx[order[first]]
    mask.reshape(-1)[pix_sorted[first]] = labels[winners]
    return mask


def rasterize_part_masks(
    mesh2d, depth, vertex_joint, height: int, width: int, table: PartitionTable, levels=LEVELS
) -> dict[str, np.ndarray]:
    """Per-level label grids: 0 background, part index + 1 elsewhere."""
    vertex_joint = np.asarray(vertex_joint, dtype=np.int64)
    out = {}
    for level in levels:
        labels = table[level][vertex_joint] + 1
        if labels.max(initial=0) > PART_COUNTS[level]:
            raise ValueError(f"labels exceed the {level} part count")
        out[level] = rasterize(mesh2d, depth, labels, height, width)
    return out


# ---------------------------------------------------------------- serialization

def save_mask(mask: np.ndarray, path, fmt: str | None = None) -> None:
    """Write a label grid as JSON or as a 16-bit grayscale PNG.

    JSON also carries real-valued grids such as occlusion maps; floats are
    written with full repr precision, so the round trip is exact.
    """
    path = Path(path)
    fmt = fmt or ("png" if path.suffix.lower() == ".png" else "json")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected an H x W grid, got shape {mask.shape}")
    if fmt == "json":
        path.write_text(mask_json(mask))
    elif fmt == "png":
        from PIL import Image

        if not np.issubdtype(mask.dtype, np.integer):
            raise ValueError("PNG holds integer labels only; use JSON for real-valued grids")
        if mask.min() < 0 or mask.max() > 65535:
            raise ValueError("PNG masks hold labels in 0..65535")
        Image.fromarray(mask.astype(np.uint16)).save(path)
    else:
        raise ValueError(f"unknown mask format {fmt!r}")


def mask_json(mask: np.ndarray) -> str:
    mask = np.asarray(mask)
    kind = "int" if np.issubdtype(mask.dtype, np.integer) else "float"
    return json.dumps({"height": mask.shape[0], "width": mask.shape[1], "dtype": kind, "labels": mask.tolist()})


def load_mask(path, fmt: str | None = None) -> np.ndarray:
    path = Path(path)
    fmt = fmt or ("png" if path.suffix.lower() == ".png" else "json")
    if fmt == "json":
        doc = json.loads(path.read_text())
        dtype = np.float64 if doc.get("dtype") == "float" else np.int64
        return np.asarray(doc["labels"], dtype=dtype).reshape(doc["height"], doc["width"])
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)
