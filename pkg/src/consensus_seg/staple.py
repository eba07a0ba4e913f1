"""STAPLE consensus for binary rater masks, plus majority vote and thresholding.

EM over the latent true segmentation: the E-step computes the posterior
foreground probability ``W`` per voxel from the current rater sensitivities
``p`` and specificities ``q``; the M-step re-estimates ``p`` and ``q`` from
``W``.  The foreground prior is a single scalar held fixed across iterations.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .errors import DegenerateInput, ShapeMismatch
from .volgrid import ValueKind, Volume

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class RaterPerformance:
    p: float  # sensitivity
    q: float  # specificity


@dataclass(frozen=True)
class StapleConfig:
    init_p: float = 0.99999
    init_q: float = 0.99999
    prior_mode: str = "global_mean"
    max_iters: int = 100
    tol: float = 1e-6
    threshold: float = 0.5
    # "bbox": padded bounding box of the union of rater foregrounds; "full": whole grid
    region: str = "bbox"
    # overrides the global-mean prior when set
    prior: float | None = None

    def __post_init__(self):
        if not (0 < self.init_p < 1 and 0 < self.init_q < 1):
            raise ValueError("init_p and init_q must lie in (0, 1)")
        if self.prior_mode != "global_mean":
            raise ValueError(f"unsupported prior_mode {self.prior_mode!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.region not in ("bbox", "full"):
            raise ValueError(f"region must be 'bbox' or 'full', got {self.region!r}")
        if self.prior is not None and not 0 < self.prior < 1:
            raise ValueError("prior must lie in (0, 1)")

    def to_lines(self) -> list[str]:
        """Flat ``key = value`` lines, readable back with :meth:`from_mapping`."""
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self) if getattr(self, f.name) is not None]

    @classmethod
    def from_mapping(cls, mapping) -> "StapleConfig":
        casts = {"init_p": float, "init_q": float, "prior_mode": str, "max_iters": int,
                 "tol": float, "threshold": float, "region": str, "prior": float}
        kwargs = {}
        for key, value in mapping.items():
            if key not in casts:
                raise ValueError(f"unknown STAPLE option {key!r}")
            kwargs[key] = casts[key](value)
        return cls(**kwargs)


@dataclass
class StapleResult:
    weights: Volume
    performances: list
    prior: float
    iterations: int
    converged: bool
    log_likelihood: list = field(default_factory=list)
    region: tuple = ()
    degenerate: list = field(default_factory=list)


def _check_masks(masks: Sequence[Volume], minimum: int) -> None:
    if len(masks) < minimum:
        raise ValueError(f"need at least {minimum} masks, got {len(masks)}")
    first = masks[0]
    for i, m in enumerate(masks[1:], 1):
        if m.dims != first.dims:
            raise ShapeMismatch(f"mask {i} has dims {m.dims}, mask 0 has {first.dims}")
        if m.spacing != first.spacing:
            raise ShapeMismatch(f"mask {i} has spacing {m.spacing}, mask 0 has {first.spacing}")


def computation_region(masks: Sequence[Volume], mode: str = "bbox") -> tuple:
    """Slices of the grid that STAPLE runs on."""
    shape = masks[0].dims
    if mode == "full":
        return tuple(slice(0, n) for n in shape)
    union = np.zeros(shape, dtype=bool)
    for m in masks:
        union |= m.data.astype(bool)
    if not union.any():
        return tuple(slice(0, n) for n in shape)
    region = []
    for ax, n in enumerate(shape):
        other = tuple(a for a in range(3) if a != ax)
        hit = np.flatnonzero(union.any(axis=other))
        region.append(slice(max(int(hit[0]) - 1, 0), min(int(hit[-1]) + 2, n)))
    return tuple(region)


def _e_step(d: np.ndarray, p: np.ndarray, q: np.ndarray, log_f: float, log_1mf: float):
    # d: (raters, voxels) float; log-space products over raters
    log_a = log_f + np.log(p) @ d + np.log1p(-p) @ (1.0 - d)
    log_b = log_1mf + np.log1p(-q) @ d + np.log(q) @ (1.0 - d)
    hi = np.maximum(log_a, log_b)
    log_norm = hi + np.log(np.exp(log_a - hi) + np.exp(log_b - hi))
    w = np.exp(log_a - log_norm)
    return w, float(log_norm.sum())


def staple_fuse(masks: Sequence[Volume], cfg: StapleConfig | None = None) -> StapleResult:
    """Run STAPLE EM over binary rater masks.

    Raters are processed in a canonical order (sorted by mask content) so the
    floating point result does not depend on the order they were passed in;
    ``performances`` is returned in the caller's order.
    """
    cfg = cfg or StapleConfig()
    _check_masks(masks, 2)
    for i, m in enumerate(masks):
        if m.kind is not ValueKind.BINARY:
            raise ValueError(f"mask {i} is not a binary volume")

    region = computation_region(masks, cfg.region)
    packed = [np.packbits(m.data[region]).tobytes() for m in masks]
    order = sorted(range(len(masks)), key=lambda j: packed[j])
    d = np.stack([masks[j].data[region].ravel() for j in order]).astype(np.float64)
    n_raters, n_vox = d.shape

    prior = float(d.mean()) if cfg.prior is None else float(cfg.prior)
    prior = min(max(prior, EPS), 1 - EPS)
    log_f, log_1mf = np.log(prior), np.log1p(-prior)

    fg = d.sum(axis=1)
    degenerate = [order[k] for k in range(n_raters) if fg[k] == 0 or fg[k] == n_vox]
    for j in degenerate:
        warnings.warn(f"rater {j} is constant over the computation region", DegenerateInput, stacklevel=2)

    p = np.full(n_raters, cfg.init_p)
    q = np.full(n_raters, cfg.init_q)
    w_prev = None
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        w, loglik = _e_step(d, p, q, log_f, log_1mf)
        history.append(loglik)
        if w_prev is not None and np.abs(w - w_prev).mean() < cfg.tol:
            converged = True
            break
        w_prev = w
        sw = w.sum()
        sv = n_vox - sw
        p = (d @ w) / sw if sw > 0 else np.full(n_raters, EPS)
        q = ((1.0 - d) @ (1.0 - w)) / sv if sv > 0 else np.full(n_raters, EPS)
        p = np.clip(p, EPS, 1 - EPS)
        q = np.clip(q, EPS, 1 - EPS)
    log.debug("STAPLE stopped after %d iterations (converged=%s)", iterations, converged)

    full = np.zeros(masks[0].dims, dtype=np.float64)
    full[region] = np.clip(w, 0.0, 1.0).reshape(full[region].shape)
    perf = [None] * n_raters
    for k, j in enumerate(order):
        perf[j] = RaterPerformance(float(p[k]), float(q[k]))
    return StapleResult(
        weights=Volume(full, masks[0].spacing, ValueKind.PROBABILITY),
        performances=perf,
        prior=prior,
        iterations=iterations,
        converged=converged,
        log_likelihood=history,
        region=region,
        degenerate=degenerate,
    )


def binarize(weights: Volume, threshold: float = 0.5) -> Volume:
    """Foreground iff weight >= threshold."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return Volume(weights.data >= threshold, weights.spacing, ValueKind.BINARY)


def majority_vote(masks: Sequence[Volume]) -> Volume:
    """Foreground iff strictly more than half of the raters mark the voxel."""
    _check_masks(masks, 1)
    votes = np.zeros(masks[0].dims, dtype=np.int64)
    for m in masks:
        votes += m.data.astype(bool)
    return Volume(2 * votes > len(masks), masks[0].spacing, ValueKind.BINARY)
