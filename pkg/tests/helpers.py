"""On-disk fixtures shared by the CLI and acceptance tests."""
from pathlib import Path

import numpy as np

from consensus_seg.io import save_volume
from consensus_seg.phantom import DEFAULT_RATERS, simulated_raters, sphere
from consensus_seg.volgrid import intensity_volume


def write_phantom_batch(root: Path, subjects=("sub01", "sub02"), n=32, radius=10.0) -> Path:
    """Truth, five rater masks and an intensity image per subject under *root*."""
    for role in ["truth", "image"] + [f"r{i}" for i in range(len(DEFAULT_RATERS))]:
        (root / role).mkdir(parents=True, exist_ok=True)
    for s_idx, subject in enumerate(subjects):
        truth = sphere(n, radius - s_idx)
        save_volume(root / "truth" / f"{subject}.nii", truth)
        for i, rater in enumerate(simulated_raters(truth, DEFAULT_RATERS, seed=s_idx)):
            save_volume(root / f"r{i}" / f"{subject}.nii", rater)
        rng = np.random.default_rng(s_idx)
        image = truth.data * 500.0 + rng.normal(100.0, 10.0, truth.dims)
        save_volume(root / "image" / f"{subject}.nii", intensity_volume(image))
    return root


def rater_flags(root: Path) -> list:
    out = []
    for i in range(len(DEFAULT_RATERS)):
        out += ["--rater", f"r{i}={root / f'r{i}' / '*.nii'}"]
    return out


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}
