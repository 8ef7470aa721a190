"""Dual-teacher pseudo labels: region-weighted fusion of two probability maps."""
from dataclasses import dataclass

import numpy as np

from .volume import LabelMap, ProbMap, argmax_labels, largest_foreground_component


@dataclass(frozen=True)
class FusionConfig:
    w0: float = 0.8               # teacher A weight inside the head region
    w1: float = 0.6               # teacher B weight outside it
    head_fraction: float = 0.6
    axis: int = 0                 # sagittal axis
    direction: str = "ascending"

    def __post_init__(self):
        if not (0 <= self.w0 <= 1 and 0 <= self.w1 <= 1):
            raise ValueError("fusion weights must lie in [0, 1]")
        if not 0 < self.head_fraction < 1:
            raise ValueError("head fraction must lie in (0, 1)")
        if self.axis not in (0, 1, 2) or self.direction not in ("ascending", "descending"):
            raise ValueError("bad axis/direction")


def head_slab(foreground, cfg=FusionConfig()):
    """(start, end) slice indices, inclusive, of the head prefix; None for an empty foreground."""
    arr = foreground.array if isinstance(foreground, LabelMap) else np.asarray(foreground)
    other = tuple(a for a in range(3) if a != cfg.axis)
    counts = (arr > 0).sum(axis=other)
    n = len(counts)
    if cfg.direction == "descending":
        counts = counts[::-1]
    total = counts.sum()
    if total == 0:
        return None
    # tolerance keeps exact products such as 0.6 * 10 from spilling into an extra slice
    target = cfg.head_fraction * total - 1e-9 * total
    k = int(np.searchsorted(np.cumsum(counts), target)) + 1
    if cfg.direction == "ascending":
        return 0, k - 1
    return n - k, n - 1


def head_region_mask(foreground, cfg=FusionConfig()):
    """Whole sagittal slices forming the smallest prefix holding ``head_fraction`` of the foreground."""
    arr = foreground.array if isinstance(foreground, LabelMap) else np.asarray(foreground)
    mask = np.zeros(arr.shape, dtype=bool)
    slab = head_slab(arr, cfg)
    if slab is not None:
        sl = [slice(None)] * 3
        sl[cfg.axis] = slice(slab[0], slab[1] + 1)
        mask[tuple(sl)] = True
    return mask


def fuse_probabilities(pA, pB, head, cfg=FusionConfig()):
    """Convex combination: w0*A + (1-w0)*B inside ``head``, (1-w1)*A + w1*B elsewhere."""
    if pA.data.shape != pB.data.shape or pA.classes != pB.classes:
        raise ValueError("teacher maps differ in shape or class table")
    head = np.asarray(head, dtype=bool)
    if head.shape != pA.dims:
        raise ValueError("head mask shape does not match the maps")
    a = pA.data.astype(np.float64)
    b = pB.data.astype(np.float64)
    wa = np.where(head, cfg.w0, 1.0 - cfg.w1)
    fused = wa * a + (1.0 - wa) * b
    return ProbMap(fused, pA.classes, pA.spacing)


def make_pseudo_labels(pA, pB, cfg=FusionConfig()):
    """Hard pseudo labels from two teachers' maps, plus a diagnostics dict."""
    mean = ProbMap(0.5 * pA.data.astype(np.float64) + 0.5 * pB.data.astype(np.float64), pA.classes, pA.spacing)
    extent = argmax_labels(mean)
    head = head_region_mask(extent, cfg)
    fused = fuse_probabilities(pA, pB, head, cfg)
    pseudo = largest_foreground_component(argmax_labels(fused))
    slab = head_slab(extent, cfg)
    counts = np.bincount(pseudo.array.ravel(), minlength=len(pA.classes))
    diag = {"head_slab": list(slab) if slab is not None else None,
            "class_voxels": {name: int(counts[i]) for i, name in enumerate(pA.classes.names)},
            "weights": {"w0": cfg.w0, "w1": cfg.w1}}
    return pseudo, diag
