"""Synthetic sphere phantoms and simulated raters with known sensitivity/specificity."""
from __future__ import annotations

import numpy as np

from .volgrid import ValueKind, Volume

# (sensitivity, specificity) of the five reference raters
DEFAULT_RATERS = ((0.95, 0.99), (0.90, 0.98), (0.85, 0.99), (0.92, 0.97), (0.97, 0.995))


def sphere(n: int = 64, radius: float = 20.0, center=None, spacing=(1.0, 1.0, 1.0)) -> Volume:
    if center is None:
        center = ((n - 1) / 2.0,) * 3
    idx = np.indices((n, n, n), dtype=np.float64)
    dist2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
    return Volume(dist2 <= radius * radius, spacing, ValueKind.BINARY)


def corrupt(truth: Volume, p: float, q: float, rng: np.random.Generator) -> Volume:
    """Keep each foreground voxel with probability p and each background voxel with probability q."""
    t = truth.data.astype(bool)
    u = rng.random(t.shape)
    return Volume(np.where(t, u < p, u >= q), truth.spacing, ValueKind.BINARY)


def simulated_raters(truth: Volume, params=DEFAULT_RATERS, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [corrupt(truth, p, q, rng) for p, q in params]
