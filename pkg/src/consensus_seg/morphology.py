"""Connected components, largest-component cleanup and max-tree area opening."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask
from .volgrid import ValueKind, Volume


def neighbor_offsets(ndim: int, connectivity: int | None = None) -> list:
    """Offsets of the neighbourhood: face neighbours (2*ndim) or the full 3**ndim - 1 block."""
    low, high = 2 * ndim, 3 ** ndim - 1
    if connectivity is None:
        connectivity = high
    if connectivity not in (low, high):
        raise ValueError(f"connectivity for {ndim}-D must be {low} or {high}, got {connectivity}")
    offs = [o for o in itertools.product((-1, 0, 1), repeat=ndim) if any(o)]
    if connectivity == low:
        offs = [o for o in offs if sum(map(abs, o)) == 1]
    return offs


def _forward_offsets(ndim: int, connectivity: int) -> list:
    # one offset of each +/- pair
    return [o for o in neighbor_offsets(ndim, connectivity) if o > (0,) * ndim]


def _shifted(shape, off):
    src, dst = [], []
    for n, d in zip(shape, off):
        src.append(slice(0, n - d) if d >= 0 else slice(-d, n))
        dst.append(slice(d, n) if d >= 0 else slice(0, n + d))
    return tuple(src), tuple(dst)


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray  # int32, 0 = background, components 1..K
    component_sizes: dict
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def count(self) -> int:
        return len(self.component_sizes)


def _resolve(parent: np.ndarray) -> np.ndarray:
    while True:
        grand = parent[parent]
        if np.array_equal(grand, parent):
            return parent
        parent = grand


def label_components(m, connectivity: int = 26) -> LabelVolume:
    """Label connected foreground components.

    Union-find with min-label hooking and pointer jumping, vectorised over all
    edges at once.  Labels are assigned in the order each component is first
    met in x-fastest raster order.
    """
    data = m.data if isinstance(m, Volume) else np.asarray(m)
    spacing = m.spacing if isinstance(m, Volume) else (1.0,) * data.ndim
    fg = data.astype(bool)
    shape = fg.shape
    # raster (x-fastest) rank of every voxel
    rank = np.arange(fg.size, dtype=np.int64).reshape(shape, order="F")

    us, vs = [], []
    for off in _forward_offsets(fg.ndim, connectivity):
        src, dst = _shifted(shape, off)
        both = fg[src] & fg[dst]
        us.append(rank[src][both])
        vs.append(rank[dst][both])
    u = np.concatenate(us) if us else np.empty(0, np.int64)
    v = np.concatenate(vs) if vs else np.empty(0, np.int64)

    parent = np.arange(fg.size, dtype=np.int64)
    while u.size:
        pu, pv = parent[u], parent[v]
        live = pu != pv
        if not live.any():
            break
        lo, hi = np.minimum(pu[live], pv[live]), np.maximum(pu[live], pv[live])
        np.minimum.at(parent, hi, lo)
        parent = _resolve(parent)
        u, v = u[live], v[live]

    # roots are the smallest raster rank in each component, so sorting them gives first-visit order
    fg_rank = rank[fg]
    roots = parent[fg_rank]
    uniq, inverse, counts = np.unique(roots, return_inverse=True, return_counts=True)
    labels = np.zeros(shape, dtype=np.int32)
    labels[fg] = (inverse + 1).astype(np.int32)
    sizes = {i + 1: int(c) for i, c in enumerate(counts)}
    return LabelVolume(labels, sizes, tuple(spacing))


def largest_component(m, connectivity: int = 26) -> Volume:
    """Keep only the largest connected component; ties go to the raster-first component."""
    lab = label_components(m, connectivity)
    if lab.count == 0:
        raise EmptyMask("mask has no foreground voxels")
    best = max(lab.component_sizes, key=lambda k: (lab.component_sizes[k], -k))
    spacing = m.spacing if isinstance(m, Volume) else lab.spacing
    return Volume(lab.labels == best, spacing, ValueKind.BINARY)


# --------------------------------------------------------------------------
# max-tree


def quantize_16bit(img) -> np.ndarray:
    """Map an arbitrary-valued image onto integer levels 0..65535 (min-max scaled)."""
    a = np.asarray(img, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros(a.shape, dtype=np.int64)
    return np.round((a - lo) / (hi - lo) * 65535).astype(np.int64)


def _integer_levels(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == bool:
        return a.astype(np.int64)
    if np.issubdtype(a.dtype, np.integer):
        return a.astype(np.int64)
    if np.all(a == np.round(a)):
        return a.astype(np.int64)
    raise TypeError("max-tree needs integer levels; quantize the image first (quantize_16bit)")


class MaxTree:
    """Max-tree of an integer image (any dimension), built by union-find.

    Pixels are referred to by their C-order flat index.  ``parent`` is
    canonical: every pixel points at the canonical pixel of its node, and a
    canonical pixel points at the canonical pixel of its parent node.
    """

    def __init__(self, img, connectivity: int | None = None):
        levels = _integer_levels(img)
        self.shape = levels.shape
        self.connectivity = connectivity or 3 ** levels.ndim - 1
        self.levels = levels.ravel()
        n = self.levels.size

        padded_shape = tuple(s + 2 for s in self.shape)
        strides = np.cumprod((1,) + padded_shape[::-1])[:-1][::-1]
        deltas = [int(np.dot(o, strides)) for o in neighbor_offsets(levels.ndim, self.connectivity)]
        outside = np.pad(np.zeros(self.shape, dtype=bool), 1, constant_values=True)
        inside = ~outside
        pidx = np.flatnonzero(inside.ravel())  # padded index of each pixel in C order
        to_orig = np.full(inside.size, -1, dtype=np.int64)
        to_orig[pidx] = np.arange(n)
        to_orig_l = to_orig.tolist()

        # decreasing level, raster order within a level
        order = np.argsort(-self.levels, kind="stable")
        parent = [-1] * n
        zpar = [-1] * n
        pidx_l = pidx.tolist()
        for p in order.tolist():
            parent[p] = p
            zpar[p] = p
            base = pidx_l[p]
            for d in deltas:
                nb = to_orig_l[base + d]
                if nb < 0 or zpar[nb] < 0:
                    continue
                # find root with path compression
                r = nb
                while zpar[r] != r:
                    r = zpar[r]
                while zpar[nb] != r:
                    zpar[nb], nb = r, zpar[nb]
                if r != p:
                    parent[r] = p
                    zpar[r] = p

        lv = self.levels.tolist()
        rev = order[::-1].tolist()
        for p in rev:
            q = parent[p]
            if lv[parent[q]] == lv[q]:
                parent[p] = parent[q]

        area = [1] * n
        for p in order.tolist()[:-1]:
            area[parent[p]] += area[p]

        self.order = order
        self.parent = np.asarray(parent, dtype=np.int64)
        self.area = np.asarray(area, dtype=np.int64)
        self.root = int(order[-1])

    def is_canonical(self) -> np.ndarray:
        par = self.parent
        return (par == np.arange(par.size)) | (self.levels[par] != self.levels)

    @property
    def nodes(self) -> np.ndarray:
        """Canonical pixel of every node, in raster order."""
        return np.flatnonzero(self.is_canonical())

    @property
    def node_level(self) -> np.ndarray:
        return self.levels[self.nodes]

    @property
    def node_area(self) -> np.ndarray:
        return self.area[self.nodes]

    @property
    def node_parent(self) -> np.ndarray:
        return self.parent[self.nodes]

    def components(self) -> set:
        """Construction-independent view: ``{(level, frozenset(pixels))}`` over all nodes."""
        canon = self.is_canonical()
        node_of = np.where(canon, np.arange(self.levels.size), self.parent)
        members = {int(c): [] for c in np.flatnonzero(canon)}
        for p, c in enumerate(node_of.tolist()):
            members[c].append(p)
        for p in self.order.tolist():
            if canon[p] and p != self.root:
                members[int(self.parent[p])].extend(members[p])
        return {(int(self.levels[c]), frozenset(px)) for c, px in members.items()}

    def area_open(self, lam: int) -> np.ndarray:
        """Lower every node of area < lam to the level of its nearest ancestor with area >= lam."""
        if lam < 1:
            raise ValueError("lambda must be >= 1")
        lv = self.levels.tolist()
        par = self.parent.tolist()
        area = self.area.tolist()
        out = [0] * len(lv)
        for p in self.order[::-1].tolist():
            q = par[p]
            if p == q:
                out[p] = lv[p]
            elif lv[q] != lv[p]:
                out[p] = lv[p] if area[p] >= lam else out[q]
            else:
                out[p] = out[q]
        return np.asarray(out, dtype=np.int64).reshape(self.shape)


def build_maxtree(img, connectivity: int | None = None) -> MaxTree:
    return MaxTree(img, connectivity)


def area_open(img, lam: int, connectivity: int | None = None):
    """Grayscale area opening.  Binary :class:`Volume` inputs come back as binary Volumes."""
    if isinstance(img, Volume):
        out = MaxTree(img.data, connectivity).area_open(lam)
        if img.kind is ValueKind.BINARY:
            return Volume(out.astype(bool), img.spacing, ValueKind.BINARY)
        return Volume(out, img.spacing, img.kind)
    a = np.asarray(img)
    out = MaxTree(a, connectivity).area_open(lam)
    return out.astype(a.dtype, copy=False)
