"""Evaluation metrics: Chamfer, Hausdorff, point-to-surface, uniformity.

These are value-level (non-differentiable) computations, chunked so large
clouds never materialize a full distance matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import (
    farthest_point_sample,
    normalize_patch,
    points_to_surface,
    square_distances,
)


def _directed_min_sqdist(a, b, row_chunk=256, col_chunk=4096):
    """Per row of a, the squared distance to its nearest row of b."""
    mins = np.full(len(a), np.inf)
    for lo in range(0, len(a), row_chunk):
        hi = min(lo + row_chunk, len(a))
        block = np.full(hi - lo, np.inf)
        for clo in range(0, len(b), col_chunk):
            chi = min(clo + col_chunk, len(b))
            diff = a[lo:hi, None, :] - b[None, clo:chi, :]
            np.minimum(block, np.einsum("ijk,ijk->ij", diff, diff).min(axis=1), out=block)
        mins[lo:hi] = block
    return mins


def chamfer_distance(a, b):
    """Symmetric mean squared nearest-neighbor distance, as a plain float."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 1 or len(b) < 1:
        raise ContractError("chamfer_distance requires nonempty point sets")
    return float(_directed_min_sqdist(a, b).mean() + _directed_min_sqdist(b, a).mean())


def hausdorff(a, b):
    """max(max_a min_b, max_b min_a) over unsquared distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 1 or len(b) < 1:
        raise ContractError("hausdorff requires nonempty point sets")
    forward = _directed_min_sqdist(a, b).max()
    backward = _directed_min_sqdist(b, a).max()
    return float(np.sqrt(max(forward, backward)))


def p2f_mean(points, surface):
    """Mean unsigned distance from each point to the reference surface."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 1:
        raise ContractError("p2f_mean requires a nonempty point set")
    return float(points_to_surface(pts, surface).mean())


def uniformity(points, p=0.02):
    """Deviation of local point counts and spacings from uniformity; lower
    is better.

    On the unit-ball-normalized cloud, seeds are chosen by farthest point
    sampling (M = min(n/8, 64)) and each opens a disk of radius 2*sqrt(p)
    (the radius holding the fraction p of an area-uniform spread over the
    unit sphere). Per disk the score is the chi-square deviation of its
    count from the mean disk count (self-calibrating, so flat patches and
    closed surfaces are treated alike) plus the relative variance
    (var/mean^2) of nearest-neighbor spacings inside the disk. The result
    averages over seeds and is fully deterministic.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 32:
        raise ContractError(f"uniformity requires at least 32 points, got {n}")
    if not 0.0 < p < 1.0:
        raise ContractError(f"uniformity: disk fraction p={p} must be in (0, 1)")
    normed, _, _ = normalize_patch(pts)
    m = min(n // 8, 64)
    seeds = farthest_point_sample(normed, m, start=0)
    radius_sq = p * 4.0
    # hexagonal-packing spacing for n_j points on a flat disk of this radius
    hex_patch = np.sqrt(2.0 * np.pi / np.sqrt(3.0)) * np.sqrt(radius_sq)

    counts = []
    spacing_scores = []
    for s in seeds:
        d2 = ((normed - normed[s]) ** 2).sum(axis=1)
        inside = np.flatnonzero(d2 <= radius_sq)
        counts.append(len(inside))
        score = 0.0
        if len(inside) >= 2:
            local = square_distances(normed[inside], normed[inside])
            np.fill_diagonal(local, np.inf)
            spacing = np.sqrt(local.min(axis=1))
            ideal = hex_patch / np.sqrt(len(inside))
            score = float(((spacing - ideal) ** 2).mean() / ideal**2)
        spacing_scores.append(score)
    counts = np.asarray(counts, dtype=np.float64)
    expected = counts.mean()  # every disk holds its seed, so this is >= 1
    count_terms = (counts - expected) ** 2 / expected
    return float(np.mean(count_terms + np.asarray(spacing_scores)))


@dataclass
class MetricsReport:
    """One evaluation run; fields are in normalized-frame units and the CSV
    form scales them by 1e3."""

    cd: float
    hd: float
    p2f_mean: float
    uniformity: float

    def __post_init__(self):
        for name in ("cd", "hd", "p2f_mean", "uniformity"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ContractError(f"metrics report: {name}={value} invalid")

    def csv_row(self, name):
        values = (self.cd, self.hd, self.p2f_mean, self.uniformity)
        return name + "," + ",".join(f"{v * 1e3:.6g}" for v in values)

    @staticmethod
    def csv_header():
        return "name,cd,hd,p2f,uniformity"
