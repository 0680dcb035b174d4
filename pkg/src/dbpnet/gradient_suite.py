"""Finite-difference verification of every differentiable operation.

Each entry builds a small scalar-valued problem around one operation and
reports the max relative disagreement between backprop and central
differences. Used by the `grad-check` CLI command and the acceptance
tests; everything runs in a few seconds at the default sizes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Tensor
from .losses import chamfer, total_loss, uniform_loss
from .network import (
    coordinate_back_projection,
    coordinate_regress,
    dbpnet_forward,
    extract_features,
    feature_back_projection,
    feature_downsample,
    feature_upsample,
    init_model_params,
    position_aware_attention,
)


def _sumsq(t):
    return ad.sum_all(ad.mul(t, t))


def run_gradient_suite(n=8, up_ratio=2, channels=8, seed=0, eps=1e-5):
    """Gradient checks for all differentiable operations plus the full
    network loss; returns [(name, max_relative_error)]."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, f, inputs):
        results.append((name, ad.grad_check(f, inputs, eps=eps)))

    a = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(rng.normal(size=(3, 5)))
    check("matmul", lambda x, y: _sumsq(ad.matmul(x, y)), [a, b])

    x = Tensor(rng.normal(size=(5, 5)))
    w = Tensor(rng.normal(size=(5, 5)))  # fixed mixing so gradients vary per entry
    check("softmax_rows", lambda m: ad.sum_all(ad.mul(ad.softmax_rows(m), w)), [x])

    layers = [
        Linear(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=4))),
        Linear(Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2))),
    ]
    mlp_in = Tensor(rng.normal(size=(5, 3)))
    check(
        "mlp_forward",
        lambda *ts: _sumsq(ad.mlp_forward(layers, mlp_in)),
        [mlp_in] + [t for l in layers for t in (l.weight, l.bias)],
    )

    mix = Tensor(rng.normal(size=(6, 4)))
    check(
        "elementwise_kernels",
        lambda m: ad.mean_all(
            ad.sqrt(ad.add_scalar(ad.sum_cols(ad.mul(ad.relu(m), ad.relu(m))), 0.1))
        ),
        [mix],
    )

    stacked = Tensor(rng.normal(size=(8, 3)))
    check(
        "structural_kernels",
        lambda m: _sumsq(
            ad.concat_cols(
                [
                    ad.group_mean_rows(ad.tile_rows(m, 2), 2),
                    ad.gather_rows(m, np.arange(8)[::-1]),
                    ad.group_max_rows(ad.tile_rows(m, 2), 2),
                ]
            )
        ),
        [stacked],
    )

    ca = Tensor(rng.normal(size=(6, 3)))
    cb = Tensor(rng.normal(size=(9, 3)))
    check("chamfer", lambda p, q: chamfer(p, q), [ca, cb])

    spread = Tensor(rng.uniform(-1, 1, size=(12, 3)))
    check("uniform_loss", lambda q: uniform_loss(q, k=3), [spread])

    pred = Tensor(rng.uniform(-1, 1, size=(10, 3)))
    target = Tensor(rng.uniform(-1, 1, size=(14, 3)))
    check(
        "total_loss",
        lambda p, t: total_loss(p, t, uniform_weight=0.2, uniform_k=3),
        [pred, target],
    )

    params = init_model_params(
        n_points=n, up_ratio=up_ratio, channels=channels, k_edge=min(4, n),
        seed=seed, zero_heads=False,
    )
    tensors = params.tensors()
    patch = rng.uniform(-1, 1, size=(n, 3))
    coords_dense = np.tile(patch, (up_ratio, 1))

    feats = Tensor(rng.normal(size=(n, channels)))
    check(
        "position_aware_attention",
        lambda *ts: _sumsq(position_aware_attention(feats, patch, params)),
        [feats] + tensors,
    )
    check(
        "extract_features",
        lambda *ts: _sumsq(extract_features(patch, params)),
        tensors,
    )
    check(
        "feature_upsample",
        lambda *ts: _sumsq(feature_upsample(feats, params.up_primary)),
        [feats] + tensors,
    )
    dense_feats = Tensor(rng.normal(size=(up_ratio * n, channels)))
    check(
        "feature_downsample",
        lambda f: _sumsq(feature_downsample(f, up_ratio)),
        [dense_feats],
    )
    check(
        "feature_back_projection",
        lambda *ts: _sumsq(feature_back_projection(feats, patch, params)),
        [feats] + tensors,
    )
    check(
        "coordinate_regress",
        lambda *ts: _sumsq(coordinate_regress(dense_feats, params)),
        [dense_feats] + tensors,
    )
    q0 = Tensor(coords_dense + 0.05 * rng.normal(size=coords_dense.shape))
    check(
        "coordinate_back_projection",
        lambda *ts: _sumsq(coordinate_back_projection(patch, q0, dense_feats, params)),
        [q0, dense_feats] + tensors,
    )

    target_patch = Tensor(rng.uniform(-1, 1, size=(up_ratio * n, 3)))
    check(
        "dbpnet_total_loss",
        lambda *ts: total_loss(
            dbpnet_forward(patch, params), target_patch, uniform_weight=0.2, uniform_k=3
        ),
        tensors,
    )
    return results
