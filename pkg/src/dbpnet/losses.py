"""Differentiable training losses over point sets."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import square_distances


def chamfer(a, b):
    """Symmetric mean of squared nearest-neighbor distances (differentiable).

    Nearest-neighbor ties pick the first index; gradient flows to that
    single pair.
    """
    a = ad.as_tensor(a)
    b = ad.as_tensor(b)
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ContractError("chamfer requires nonempty point sets")
    d = ad.pairwise_sqdist(a, b)
    return ad.add(
        ad.mean_all(ad.min_rows(d)),
        ad.mean_all(ad.min_rows(ad.transpose(d))),
    )


def uniform_loss(q, k=5, h=None):
    """Hinge repulsion: mean over points and their k nearest neighbors of
    max(0, h - d)^2.

    `h` defaults to the expected spacing sqrt(4/n) in the unit frame. The
    distance carries a 1e-12 floor inside the square root so coincident
    points contribute h^2 with a zero (not undefined) gradient.
    """
    q = ad.as_tensor(q)
    n = q.shape[0]
    if n <= k:
        raise ContractError(f"uniform_loss: need more than k={k} points, got {n}")
    if h is None:
        h = float(np.sqrt(4.0 / n))

    # only the neighbor *set* matters here, so a partition selection beats
    # a full sort; the diagonal is masked to exclude each point itself
    d = square_distances(q.data, q.data)
    np.fill_diagonal(d, np.inf)
    neighbors = np.argpartition(d, k - 1, axis=1)[:, :k]

    qi = ad.gather_rows(q, np.repeat(np.arange(n), k))
    qj = ad.gather_rows(q, neighbors.ravel())
    diff = ad.sub(qi, qj)
    dist = ad.sqrt(ad.add_scalar(ad.sum_cols(ad.mul(diff, diff)), 1e-12))
    gap = ad.relu(ad.add_scalar(ad.scale(dist, -1.0), h))
    return ad.mean_all(ad.mul(gap, gap))


def total_loss(pred, target, uniform_weight=0.2, uniform_k=5, uniform_h=None):
    """Chamfer fidelity plus weighted uniform repulsion on the prediction."""
    fidelity = chamfer(pred, target)
    if uniform_weight == 0.0:
        return fidelity
    spread = uniform_loss(ad.as_tensor(pred), k=uniform_k, h=uniform_h)
    return ad.add(fidelity, ad.scale(spread, uniform_weight))
