"""Intensity normalisation, patch sampling and tri-planar probability handling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConstantVolume, OutOfRange, PatchTooLarge, ShapeMismatch
from .volgrid import AXES, ValueKind, Volume, axis_index, extract_slice

# (height, width, patches per slice)
PATCH_PRESETS = {
    "consnet": (128, 128, 3),
    "lpba40": (96, 96, 10),
    "oasis": (144, 144, 10),
}


def normalize_intensity(vol: Volume, lo: float = 0.0, hi: float = 1000.0) -> Volume:
    """Min-max rescale so the volume spans exactly ``[lo, hi]``."""
    if not lo < hi:
        raise ValueError("lo must be < hi")
    a = vol.data.astype(np.float64)
    vmin, vmax = a.min(), a.max()
    if vmin == vmax:
        raise ConstantVolume("cannot normalise a constant volume")
    out = (a - vmin) / (vmax - vmin) * (hi - lo) + lo
    out = np.clip(out, lo, hi)
    out[a == vmin] = lo
    out[a == vmax] = hi
    return Volume(out, vol.spacing, ValueKind.INTENSITY)


@dataclass(frozen=True)
class PatchSpec:
    size: tuple = (128, 128)
    patches_per_slice: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.size) != 2 or min(self.size) < 1:
            raise ValueError(f"patch size must be two positive ints, got {self.size}")
        if self.patches_per_slice < 1:
            raise ValueError("patches_per_slice must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "PatchSpec":
        h, w, k = PATCH_PRESETS[name]
        return cls((h, w), k, seed)


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray
    mask_pixels: np.ndarray
    origin: tuple  # (axis, slice_index, row0, col0)

    def __eq__(self, other):
        if not isinstance(other, Patch):
            return NotImplemented
        return (self.origin == other.origin
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.mask_pixels, other.mask_pixels))

    __hash__ = None


def slice_rng(seed: int, axis, slice_index: int) -> np.random.Generator:
    """Philox generator keyed by the seed, with (axis, slice) in the high counter words.

    Each slice gets its own stream, so results do not depend on the order in
    which slices are visited.
    """
    counter = [0, 0, axis_index(axis), int(slice_index)]
    return np.random.Generator(np.random.Philox(key=int(seed), counter=counter))


def sample_patches(vol: Volume, brain: Volume, axis, spec: PatchSpec) -> list:
    """Random in-bounds patches from every slice of *axis* that contains brain."""
    if vol.dims != brain.dims:
        raise ShapeMismatch(f"image dims {vol.dims} differ from brain mask dims {brain.dims}")
    ax = axis_index(axis)
    h, w = spec.size
    patches = []
    for k in range(vol.dims[ax]):
        mplane = extract_slice(brain, ax, k).pixels
        if k == 0:
            rows, cols = mplane.shape
            if h > rows or w > cols:
                raise PatchTooLarge(f"patch {h}x{w} does not fit slices of {rows}x{cols} on axis {AXES[ax]}")
        if not mplane.any():
            continue
        iplane = extract_slice(vol, ax, k).pixels
        rng = slice_rng(spec.seed, ax, k)
        r0 = rng.integers(0, rows - h + 1, size=spec.patches_per_slice)
        c0 = rng.integers(0, cols - w + 1, size=spec.patches_per_slice)
        for r, c in zip(r0.tolist(), c0.tolist()):
            patches.append(Patch(
                iplane[r:r + h, c:c + w].copy(),
                mplane[r:r + h, c:c + w].copy(),
                (AXES[ax], k, r, c),
            ))
    return patches


def _check_probabilities(*vols: Volume) -> None:
    first = vols[0]
    for i, v in enumerate(vols):
        if v.dims != first.dims or v.spacing != first.spacing:
            raise ShapeMismatch(f"probability volume {i} is on grid {v.dims}/{v.spacing}, "
                                f"expected {first.dims}/{first.spacing}")
        d = v.data
        if not ((d >= 0) & (d <= 1)).all():
            raise OutOfRange(f"probability volume {i} has values outside [0, 1]")


def fuse_triplanar(p_ax: Volume, p_cor: Volume, p_sag: Volume) -> Volume:
    """Voxel-wise mean of the three per-plane probability maps."""
    _check_probabilities(p_ax, p_cor, p_sag)
    a, b, c = (v.data.astype(np.float64) for v in (p_ax, p_cor, p_sag))
    mean = (a + b + c) / 3.0
    # keep fuse(p, p, p) == p exact where rounding of 3p/3 would drift
    same = (a == b) & (b == c)
    mean[same] = a[same]
    return Volume(np.clip(mean, 0.0, 1.0), p_ax.spacing, ValueKind.PROBABILITY)


def threshold_prob(p: Volume, t: float = 0.5) -> Volume:
    """Foreground iff probability >= t."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return Volume(p.data >= t, p.spacing, ValueKind.BINARY)


def stack_autocontext(p_ax: Volume, p_cor: Volume, p_sag: Volume, axis="x") -> Iterator[np.ndarray]:
    """Iterate over one ``(3, rows, cols)`` array per slice along *axis*.

    Channel order is (axial model, coronal model, sagittal model).  *axis*
    defaults to x, taken here as the sagittal direction.
    """
    for i, v in enumerate((p_cor, p_sag), 1):
        if v.dims != p_ax.dims:
            raise ShapeMismatch(f"probability volume {i} has dims {v.dims}, expected {p_ax.dims}")
    ax = axis_index(axis)
    vols = (p_ax, p_cor, p_sag)
    return (np.stack([extract_slice(v, ax, k).pixels for v in vols]) for k in range(p_ax.dims[ax]))
