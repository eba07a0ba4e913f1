"""Overlap and surface-distance metrics, error volumes and error projection maps."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    EmptyComparison,
    EmptyGroundTruth,
    EmptyMask,
    NoBackground,
    ShapeMismatch,
)
from .volgrid import ValueKind, Volume, axis_index

METRIC_NAMES = ("dice", "sensitivity", "specificity", "hausdorff_mm", "mean_dist_mm")
OVERLAP_METRICS = METRIC_NAMES[:3]
DISTANCE_METRICS = METRIC_NAMES[3:]
CSV_HEADER = ("subject", "method") + METRIC_NAMES


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvalRecord:
    dice: float
    sensitivity: float
    specificity: float
    hausdorff_mm: float
    mean_dist_mm: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def as_tuple(self) -> tuple:
        return astuple(self)


def _mask_array(m) -> np.ndarray:
    data = m.data if isinstance(m, Volume) else np.asarray(m)
    return data.astype(bool, copy=False)


def _pair(g, s) -> tuple:
    a, b = _mask_array(g), _mask_array(s)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask dims differ: {a.shape} vs {b.shape}")
    return a, b


def confusion_counts(g, s) -> ConfusionCounts:
    """Contingency counts with *g* as ground truth."""
    a, b = _pair(g, s)
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(b & ~a))
    fn = int(np.count_nonzero(a & ~b))
    return ConfusionCounts(tp, fp, a.size - tp - fp - fn, fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        raise EmptyComparison("both masks are empty")
    return 2 * c.tp / denom


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise EmptyGroundTruth("ground truth has no foreground")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise NoBackground("ground truth has no background")
    return c.tn / (c.tn + c.fp)


_FACE_OFFSETS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def surface_voxels(m) -> np.ndarray:
    """Boolean map of foreground voxels with a background (or off-grid) face neighbour."""
    a = _mask_array(m)
    padded = np.pad(a, 1, constant_values=False)
    interior = np.ones_like(a)
    nx, ny, nz = a.shape
    for dx, dy, dz in _FACE_OFFSETS:
        interior &= padded[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz]
    return a & ~interior


def extract_surface(m, spacing=None) -> np.ndarray:
    """Surface voxel centres in mm as an ``(n, 3)`` array, in x-fastest voxel order."""
    if spacing is None:
        spacing = m.spacing if isinstance(m, Volume) else (1.0, 1.0, 1.0)
    surf = surface_voxels(m)
    if not surf.any():
        raise EmptyMask("mask has no foreground voxels")
    idx = np.argwhere(surf.transpose(2, 1, 0))[:, ::-1]
    return idx * np.asarray(spacing, dtype=np.float64)


def _resolve_spacing(g, s, spacing):
    if spacing is not None:
        return tuple(float(x) for x in spacing)
    if isinstance(g, Volume) and isinstance(s, Volume) and g.spacing != s.spacing:
        raise ShapeMismatch(f"mask spacings differ: {g.spacing} vs {s.spacing}")
    for m in (g, s):
        if isinstance(m, Volume):
            return m.spacing
    return (1.0, 1.0, 1.0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(dst).query(src, k=1)
    return dist


def surface_distances(g, s, spacing=None) -> tuple:
    """Nearest-surface distances from each point of G to S and from each point of S to G."""
    _pair(g, s)
    sp = _resolve_spacing(g, s, spacing)
    pg = extract_surface(g, sp)
    ps = extract_surface(s, sp)
    return _directed(pg, ps), _directed(ps, pg)


def hausdorff(g, s, spacing=None) -> float:
    g_to_s, s_to_g = surface_distances(g, s, spacing)
    return float(max(g_to_s.max(), s_to_g.max()))


def mean_surface_distance(g, s, spacing=None) -> float:
    g_to_s, s_to_g = surface_distances(g, s, spacing)
    return float((g_to_s.sum() + s_to_g.sum()) / (g_to_s.size + s_to_g.size))


def evaluate(g, s, spacing=None) -> EvalRecord:
    """All five metrics for one ground truth / segmentation pair.

    Metrics that are undefined for the inputs (empty masks and the like) are
    reported as NaN instead of raising.
    """
    c = confusion_counts(g, s)
    values = []
    for fn in (dice, sensitivity, specificity):
        try:
            values.append(fn(c))
        except (EmptyComparison, EmptyGroundTruth, NoBackground):
            values.append(math.nan)
    try:
        g_to_s, s_to_g = surface_distances(g, s, spacing)
        values.append(float(max(g_to_s.max(), s_to_g.max())))
        values.append(float((g_to_s.sum() + s_to_g.sum()) / (g_to_s.size + s_to_g.size)))
    except EmptyMask:
        values.extend([math.nan, math.nan])
    return EvalRecord(*values)


def error_volumes(g, s) -> tuple:
    """(false-positive mask, false-negative mask) of *s* against ground truth *g*."""
    a, b = _pair(g, s)
    spacing = s.spacing if isinstance(s, Volume) else (g.spacing if isinstance(g, Volume) else (1.0, 1.0, 1.0))
    return (Volume(b & ~a, spacing, ValueKind.BINARY), Volume(a & ~b, spacing, ValueKind.BINARY))


def projection_heatmap(err_masks: Sequence, axis) -> np.ndarray:
    """Mean error frequency projected along *axis*, scaled so the maximum is 1.

    The returned plane uses the same row/column convention as
    :func:`consensus_seg.volgrid.extract_slice`.  An all-zero stack yields an
    all-zero map.
    """
    if len(err_masks) == 0:
        raise ValueError("need at least one error mask")
    ax = axis_index(axis)
    arrays = [_mask_array(m) for m in err_masks]
    for i, a in enumerate(arrays[1:], 1):
        if a.shape != arrays[0].shape:
            raise ShapeMismatch(f"error mask {i} has dims {a.shape}, mask 0 has {arrays[0].shape}")
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for a in arrays:
        acc += a
    acc /= len(arrays)
    plane = acc.mean(axis=ax).T
    peak = plane.max()
    if peak > 0:
        plane = plane / peak
    return plane
