"""Point-set kernels: sampling, neighbor search, patch frames, resampling
into capacity-constrained subsets, and point-to-surface distances.

All functions are pure and deterministic given (inputs, seed); distance
ties break toward the lowest index throughout so results are reproducible.
Brute-force O(n*m) distances are fine at the point counts this package
targets (a few thousand per call).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class PointCloud:
    """An ordered set of 3D points; the value every file and CLI boundary uses."""

    points: np.ndarray
    source: str | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ContractError(f"point cloud must be (n, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ContractError("point cloud must contain at least one point")
        if not np.isfinite(self.points).all():
            raise ContractError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


def square_distances(a, b, chunk=1024):
    """Squared distance matrix between rows of a and b, chunked over a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    for lo in range(0, len(a), chunk):
        hi = min(lo + chunk, len(a))
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def farthest_point_sample(points, m, start=0):
    """Greedy max-min subset selection; returns m indices.

    Each step selects the not-yet-chosen point farthest from the chosen
    set, ties broken by lowest index. Deterministic given `start`.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= m <= n:
        raise ContractError(f"farthest_point_sample: m={m} out of range for n={n}")
    if not 0 <= start < n:
        raise ContractError(f"farthest_point_sample: start={start} out of range")
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = start
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    mind[start] = -1.0  # chosen points never win again
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1), out=mind)
        mind[nxt] = -1.0
    return chosen


def knn(queries, refs, k):
    """Per query, the k nearest reference indices, ascending by distance.

    Ties break toward the lower reference index.
    """
    refs = np.asarray(refs, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if k > len(refs):
        raise ContractError(f"knn: k={k} exceeds reference count {len(refs)}")
    out = np.empty((len(queries), k), dtype=np.intp)
    chunk = 512
    for lo in range(0, len(queries), chunk):
        hi = min(lo + chunk, len(queries))
        d = square_distances(queries[lo:hi], refs)
        out[lo:hi] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def random_subsample(points, m, seed):
    """m distinct points chosen by a seeded shuffle."""
    pts = np.asarray(points, dtype=np.float64)
    if m > len(pts):
        raise ContractError(f"random_subsample: m={m} exceeds point count {len(pts)}")
    rng = np.random.default_rng(seed)
    return pts[rng.permutation(len(pts))[:m]].copy()


def normalize_patch(points):
    """Center on the centroid and scale into the unit ball.

    Returns (normalized, centroid, scale) where scale is the max distance
    from the centroid; `denormalize_patch` inverts it.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise ContractError("normalize_patch needs at least 2 points")
    centroid = pts.mean(axis=0)
    shifted = pts - centroid
    scale = float(np.sqrt((shifted**2).sum(axis=1).max()))
    if scale == 0.0:
        raise ContractError("normalize_patch: all points identical")
    return shifted / scale, centroid, scale


def denormalize_patch(points, centroid, scale):
    return np.asarray(points, dtype=np.float64) * scale + np.asarray(centroid)


def resample_into_subsets(q0, p, alpha):
    """Partition the dense set q0 into alpha sparse subsets aligned with p.

    Assignment is greedy over all (input, generated) pairs in ascending
    distance order (ties by input index, then generated index) with a
    capacity of alpha generated points per input point. Subset j holds
    each input point's j-th nearest assigned generated point.

    Returns (subsets, assignment): subsets is a list of alpha (n, 3)
    arrays, assignment an (n, alpha) index matrix into q0.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    total = alpha * n
    if len(q0) != total:
        raise ContractError(
            f"resample_into_subsets: |q0|={len(q0)} != alpha*|p|={total}"
        )
    d = square_distances(p, q0)
    order = np.argsort(d, axis=None, kind="stable").tolist()
    owner = np.full(total, -1, dtype=np.intp)
    capacity = np.full(n, alpha, dtype=np.intp)
    assigned = 0
    for flat in order:
        i, g = divmod(flat, total)
        if owner[g] >= 0 or capacity[i] == 0:
            continue
        owner[g] = i
        capacity[i] -= 1
        assigned += 1
        if assigned == total:
            break
    assignment = np.empty((n, alpha), dtype=np.intp)
    for i in range(n):
        mine = np.flatnonzero(owner == i)
        assignment[i] = mine[np.argsort(d[i, mine], kind="stable")]
    subsets = [q0[assignment[:, j]].copy() for j in range(alpha)]
    return subsets, assignment


# ---------------------------------------------------------------------------
# Surfaces
# ---------------------------------------------------------------------------

@dataclass
class Sphere:
    radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractError("sphere radius must be positive")
        self.center = np.asarray(self.center, dtype=np.float64)


@dataclass
class Torus:
    """Ring around the local +z axis: major radius to the tube center,
    minor radius of the tube."""

    major_radius: float
    minor_radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray | None = None  # local->world, None = identity

    def __post_init__(self):
        if self.major_radius <= 0 or self.minor_radius <= 0:
            raise ContractError("torus radii must be positive")
        if self.minor_radius >= self.major_radius:
            raise ContractError("torus minor radius must be below the major radius")
        self.center = np.asarray(self.center, dtype=np.float64)


@dataclass
class Plane:
    """Square patch of the local z=0 plane; distance is to the infinite plane."""

    half_extent: float = 1.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray | None = None

    def __post_init__(self):
        if self.half_extent <= 0:
            raise ContractError("plane half extent must be positive")
        self.center = np.asarray(self.center, dtype=np.float64)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.intp)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ContractError("mesh triangles must be (t, 3) indices")
        if self.triangles.min(initial=0) < 0 or self.triangles.max(
            initial=-1
        ) >= len(self.vertices):
            raise ContractError("mesh triangle indices out of range")


def _to_local(points, center, rotation):
    shifted = np.asarray(points, dtype=np.float64) - center
    if rotation is None:
        return shifted
    return shifted @ rotation  # R^T from the right


def points_to_surface(points, surface):
    """Unsigned distances from each point to the surface; (n,) array."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if isinstance(surface, Sphere):
        return np.abs(
            np.linalg.norm(pts - surface.center, axis=1) - surface.radius
        )
    if isinstance(surface, Torus):
        local = _to_local(pts, surface.center, surface.rotation)
        ring = np.linalg.norm(local[:, :2], axis=1) - surface.major_radius
        return np.abs(np.hypot(ring, local[:, 2]) - surface.minor_radius)
    if isinstance(surface, Plane):
        local = _to_local(pts, surface.center, surface.rotation)
        return np.abs(local[:, 2])
    if isinstance(surface, TriangleMesh):
        return _points_to_mesh(pts, surface)
    raise ContractError(f"unknown surface descriptor {type(surface).__name__}")


def point_to_surface(p, surface):
    return float(points_to_surface(np.asarray(p)[None, :], surface)[0])


def _points_to_mesh(pts, mesh):
    """Exact min distance to any triangle.

    The closest point on a triangle is either the in-triangle projection
    onto its plane or lies on one of the three edge segments, so taking
    the min over those four candidates is exact.
    """
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    normal = np.cross(b - a, c - a)
    nn = (normal**2).sum(axis=1)

    best = np.full(len(pts), np.inf)
    for seg_a, seg_b in ((a, b), (b, c), (c, a)):
        ab = seg_b - seg_a  # (t, 3)
        denom = (ab**2).sum(axis=1)
        ap = pts[:, None, :] - seg_a[None, :, :]  # (n, t, 3)
        t = np.clip(np.einsum("ntk,tk->nt", ap, ab) / denom, 0.0, 1.0)
        closest = seg_a[None, :, :] + t[..., None] * ab[None, :, :]
        d2 = ((pts[:, None, :] - closest) ** 2).sum(axis=2)
        np.minimum(best, d2.min(axis=1), out=best)

    # in-triangle plane projections, via barycentric coordinates
    ap = pts[:, None, :] - a[None, :, :]
    dist_plane = np.einsum("ntk,tk->nt", ap, normal) / np.sqrt(nn)
    proj = pts[:, None, :] - dist_plane[..., None] * (normal / np.sqrt(nn)[:, None])
    v0 = c - a
    v1 = b - a
    v2 = proj - a[None, :, :]
    d00 = (v0**2).sum(axis=1)
    d01 = np.einsum("tk,tk->t", v0, v1)
    d11 = (v1**2).sum(axis=1)
    d20 = np.einsum("ntk,tk->nt", v2, v0)
    d21 = np.einsum("ntk,tk->nt", v2, v1)
    denom = d00 * d11 - d01 * d01
    u = (d11 * d20 - d01 * d21) / denom
    v = (d00 * d21 - d01 * d20) / denom
    inside = (u >= 0) & (v >= 0) & (u + v <= 1)
    plane_d2 = np.where(inside, dist_plane**2, np.inf)
    np.minimum(best, plane_d2.min(axis=1), out=best)
    return np.sqrt(best)
