"""Shared test utilities: reference oracles and small mesh builders.

Oracles here are deliberately naive (loops, exhaustive scans, repeated
argmin) so they stay independent of the library's vectorized paths.
"""

import numpy as np


def fps_oracle(points, m, start):
    """O(m*n) greedy max-min reference; ties to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(float(((points[i] - points[j]) ** 2).sum()) for j in chosen)
            if d > best_d:
                best_d, best = d, i
        chosen.append(best)
    return np.array(chosen, dtype=np.intp)


def knn_oracle(queries, refs, k):
    """Exhaustive sort of (distance, index) pairs per query."""
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    out = []
    for q in queries:
        pairs = sorted(
            (float(((q - r) ** 2).sum()), i) for i, r in enumerate(refs)
        )
        out.append([i for _, i in pairs[:k]])
    return np.array(out, dtype=np.intp)


def chamfer_oracle(a, b):
    """Double loop over all pairs; squared distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fwd = sum(min(float(((p - q) ** 2).sum()) for q in b) for p in a) / len(a)
    bwd = sum(min(float(((p - q) ** 2).sum()) for p in a) for q in b) / len(b)
    return fwd + bwd


def hausdorff_oracle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fwd = max(min(float(((p - q) ** 2).sum()) for q in b) for p in a)
    bwd = max(min(float(((p - q) ** 2).sum()) for p in a) for q in b)
    return float(np.sqrt(max(fwd, bwd)))


def resample_oracle(q0, p, alpha):
    """Repeated masked argmin instead of a presorted sweep.

    At each step the globally smallest remaining (input, generated)
    distance wins, ties resolved by (input index, generated index); a
    generated point leaves the pool once assigned and an input point's
    row is masked once it holds alpha points.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n, total = len(p), len(q0)
    d = ((p[:, None, :] - q0[None, :, :]) ** 2).sum(axis=2)
    masked = d.copy()
    owner = np.full(total, -1, dtype=np.intp)
    remaining = np.full(n, alpha, dtype=np.intp)
    for _ in range(total):
        flat = int(np.argmin(masked))  # first occurrence = lowest (i, g)
        i, g = divmod(flat, total)
        owner[g] = i
        remaining[i] -= 1
        masked[:, g] = np.inf
        if remaining[i] == 0:
            masked[i, :] = np.inf
    assignment = np.empty((n, alpha), dtype=np.intp)
    for i in range(n):
        mine = sorted(np.flatnonzero(owner == i), key=lambda g: (d[i, g], g))
        assignment[i] = mine
    subsets = [q0[assignment[:, j]] for j in range(alpha)]
    return subsets, assignment


def make_icosphere(subdivisions=1):
    """Unit icosphere mesh: (vertices, triangles)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                mid = (verts[i] + verts[j]) / 2.0
                verts.append(mid / np.linalg.norm(mid))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.intp)


def sample_mesh_surface(vertices, triangles, n, rng):
    """Area-weighted uniform samples on a triangle mesh (test oracle use)."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    pick = rng.choice(len(triangles), size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    return a[pick] + u * (b[pick] - a[pick]) + v * (c[pick] - a[pick])


def fibonacci_sphere(n):
    """Near-uniform deterministic spread on the unit sphere."""
    i = np.arange(n, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    theta = golden * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
