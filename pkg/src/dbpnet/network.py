"""The upsampling network: dense feature extraction, feature-space
back-projection with position-aware attention, coordinate regression, and
coordinate-space back-projection refinement.

Patch points are processed in a canonical (lexicographic) order internally
and mapped back afterwards, so the forward pass commutes exactly with any
permutation of its input rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Tensor
from .errors import ContractError
from .geometry import knn, resample_into_subsets


@dataclass
class UpUnit:
    """Feature expansion unit: per-copy learned codes plus a shared MLP."""

    codes: Tensor  # (up_ratio, channels)
    mlp: list[Linear]


@dataclass
class ModelParams:
    """All learnable tensors plus the hyperparameters that shape them."""

    n_points: int
    up_ratio: int
    channels: int
    k_edge: int
    point_mlp: list[Linear]
    edge_mlp: list[Linear]
    pos_mlp: list[Linear]
    attn_query: Linear
    attn_key: Tensor  # weight only: a key bias shifts whole softmax rows, i.e. does nothing
    attn_value: Linear
    attn_out: Tensor  # (channels, channels); zero at init so the block starts as identity
    up_primary: UpUnit
    up_residual: UpUnit
    regress_head: list[Linear]
    refine_mlp: list[Linear]
    refine_up: UpUnit
    refine_head: list[Linear]
    use_feature_bp: bool = True
    use_coordinate_bp: bool = True
    bp_iterations: int = 1  # up-down-up rounds inside the feature block

    def named_tensors(self):
        """Deterministically ordered (name, tensor) pairs."""
        out = []

        def mlp(prefix, layers):
            for i, layer in enumerate(layers):
                out.append((f"{prefix}.{i}.weight", layer.weight))
                out.append((f"{prefix}.{i}.bias", layer.bias))

        mlp("point_mlp", self.point_mlp)
        mlp("edge_mlp", self.edge_mlp)
        mlp("pos_mlp", self.pos_mlp)
        out.append(("attn_query.weight", self.attn_query.weight))
        out.append(("attn_query.bias", self.attn_query.bias))
        out.append(("attn_key.weight", self.attn_key))
        out.append(("attn_value.weight", self.attn_value.weight))
        out.append(("attn_value.bias", self.attn_value.bias))
        out.append(("attn_out", self.attn_out))
        for name, unit in (("up_primary", self.up_primary), ("up_residual", self.up_residual)):
            out.append((f"{name}.codes", unit.codes))
            mlp(f"{name}.mlp", unit.mlp)
        mlp("regress_head", self.regress_head)
        mlp("refine_mlp", self.refine_mlp)
        out.append(("refine_up.codes", self.refine_up.codes))
        mlp("refine_up.mlp", self.refine_up.mlp)
        mlp("refine_head", self.refine_head)
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def _glorot(rng, d_in, d_out):
    lim = np.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-lim, lim, size=(d_in, d_out)))


def _layer(rng, d_in, d_out, zero=False):
    if zero:
        return Linear(Tensor(np.zeros((d_in, d_out))), Tensor(np.zeros(d_out)))
    return Linear(_glorot(rng, d_in, d_out), Tensor(np.zeros(d_out)))


def _up_unit(rng, up_ratio, channels):
    return UpUnit(
        codes=_glorot(rng, up_ratio, channels),
        mlp=[_layer(rng, 2 * channels, channels), _layer(rng, channels, channels)],
    )


def init_model_params(
    n_points=256,
    up_ratio=16,
    channels=64,
    k_edge=8,
    seed=0,
    use_feature_bp=True,
    use_coordinate_bp=True,
    bp_iterations=1,
    zero_heads=True,
):
    """Fresh parameters; weights uniform in +-sqrt(6/(fan_in+fan_out)).

    With `zero_heads` (the default) the attention output transform and the
    final layer of both coordinate heads start at zero, which makes the
    untrained network an exact replicator of its input.
    """
    c = channels
    rng = np.random.default_rng(seed)
    return ModelParams(
        n_points=n_points,
        up_ratio=up_ratio,
        channels=c,
        k_edge=k_edge,
        point_mlp=[_layer(rng, 3, c), _layer(rng, c, c)],
        edge_mlp=[_layer(rng, 2 * c, c), _layer(rng, c, c)],
        pos_mlp=[_layer(rng, 3, c), _layer(rng, c, c)],
        attn_query=_layer(rng, c, c),
        attn_key=_glorot(rng, c, c),
        attn_value=_layer(rng, c, c),
        attn_out=Tensor(np.zeros((c, c))) if zero_heads else _glorot(rng, c, c),
        up_primary=_up_unit(rng, up_ratio, c),
        up_residual=_up_unit(rng, up_ratio, c),
        regress_head=[_layer(rng, c, c), _layer(rng, c, 3, zero=zero_heads)],
        refine_mlp=[_layer(rng, 3 * (up_ratio + 1), c), _layer(rng, c, c)],
        refine_up=_up_unit(rng, up_ratio, c),
        refine_head=[_layer(rng, c, c), _layer(rng, c, 3, zero=zero_heads)],
        use_feature_bp=use_feature_bp,
        use_coordinate_bp=use_coordinate_bp,
        bp_iterations=bp_iterations,
    )


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def extract_features(patch, params):
    """Per-point MLP followed by one max-pooled edge-aggregation layer."""
    pts = np.asarray(patch, dtype=np.float64)
    n = len(pts)
    if n < params.k_edge:
        raise ContractError(f"extract_features: {n} points < k_edge={params.k_edge}")
    f = ad.mlp_forward(params.point_mlp, Tensor(pts))
    nbr = knn(pts, pts, params.k_edge)
    fi = ad.gather_rows(f, np.repeat(np.arange(n), params.k_edge))
    fj = ad.gather_rows(f, nbr.ravel())
    edge = ad.mlp_forward(params.edge_mlp, ad.concat_cols([fi, ad.sub(fj, fi)]))
    return ad.group_max_rows(edge, params.k_edge)


def positional_encoding(coords, params):
    """Geometric position code: an MLP of coordinates relative to the
    patch centroid, added to point features by the caller."""
    return ad.mlp_forward(params.pos_mlp, ad.as_tensor(coords))


def position_aware_attention(x, coords, params):
    """Self-attention over position-encoded features with a skip connection.

    z = x + pos(coords); weights = softmax(query(z) key(z)^T / sqrt(c));
    output = (weights value(z)) W_out + x. W_out starts at zero, so the
    block is the identity at initialization.
    """
    if x.shape[0] != np.asarray(coords).shape[0]:
        raise ContractError(
            f"attention rows mismatch: features {x.shape} vs coords "
            f"{np.asarray(coords).shape}"
        )
    z = ad.add(x, positional_encoding(coords, params))
    q = ad.mlp_forward([params.attn_query], z)
    k = ad.matmul(z, params.attn_key)
    v = ad.mlp_forward([params.attn_value], z)
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(params.channels))
    attended = ad.matmul(ad.softmax_rows(logits), v)
    return ad.add(ad.matmul(attended, params.attn_out), x)


def feature_upsample(f, unit):
    """Expand n rows to up_ratio*n rows, copy-major: duplicate the features,
    concatenate each copy's learned code, and apply the shared MLP."""
    n = f.shape[0]
    up_ratio = unit.codes.shape[0]
    rep = ad.tile_rows(f, up_ratio)
    codes = ad.gather_rows(unit.codes, np.repeat(np.arange(up_ratio), n))
    return ad.mlp_forward(unit.mlp, ad.concat_cols([rep, codes]))


def feature_downsample(f_dense, up_ratio):
    """Average the copy-major copies back to one row per original point."""
    return ad.group_mean_rows(f_dense, up_ratio)


def feature_back_projection(f, coords, params):
    """Up-down-up feature refinement followed by position-aware attention.

    The dense features are downsampled and compared against the input
    features; the residual is upsampled (separate parameters) and added
    back. `bp_iterations` controls how many residual rounds run before
    the attention block.
    """
    h = feature_upsample(f, params.up_primary)
    for _ in range(params.bp_iterations):
        down = feature_downsample(h, params.up_ratio)
        residual = ad.sub(f, down)
        h = ad.add(h, feature_upsample(residual, params.up_residual))
    rep_coords = np.tile(np.asarray(coords, dtype=np.float64), (params.up_ratio, 1))
    return position_aware_attention(h, rep_coords, params)


def coordinate_regress(f_dense, params):
    """Per-row offset head; the caller adds these to replicated coordinates."""
    return ad.mlp_forward(params.regress_head, f_dense)


def coordinate_back_projection(patch, q0, f_stage1, params):
    """Refine stage-1 points by back-projecting coordinate residuals.

    The dense points are resampled into up_ratio subsets aligned with the
    input points; each input point's residual stack (its coordinates plus
    the offsets to its assigned dense points) becomes the feature channel
    of a correction MLP. The correction is expanded back to dense
    resolution, merged with the stage-1 features, and a zero-initialized
    head emits per-point offsets routed through the assignment map.
    """
    pts = np.asarray(patch, dtype=np.float64)
    n = len(pts)
    up_ratio = params.up_ratio
    if q0.shape[0] != up_ratio * n:
        raise ContractError(
            f"coordinate_back_projection: |q0|={q0.shape[0]} != "
            f"up_ratio*|patch|={up_ratio * n}"
        )
    _, assignment = resample_into_subsets(q0.data, pts, up_ratio)

    anchor = Tensor(pts)
    cols = [anchor]
    for j in range(up_ratio):
        cols.append(ad.sub(ad.gather_rows(q0, assignment[:, j]), anchor))
    correction = ad.mlp_forward(params.refine_mlp, ad.concat_cols(cols))

    dense = feature_upsample(correction, params.refine_up)
    offsets = ad.mlp_forward(params.refine_head, ad.add(dense, f_stage1))

    # offsets row j*n+i belongs to the dense point assigned as input i's
    # j-th nearest; route it back to that point's row in q0
    route = np.empty(up_ratio * n, dtype=np.intp)
    route[assignment] = np.arange(up_ratio)[None, :] * n + np.arange(n)[:, None]
    return ad.add(q0, ad.gather_rows(offsets, route))


def dbpnet_forward(patch, params):
    """Full two-stage forward pass: n input points -> up_ratio*n points.

    Output is copy-major: row j*n+i descends from input point i. Points
    run through the network in lexicographic order and are mapped back at
    the end, which makes the whole pass exactly permutation-equivariant.
    """
    pts = np.asarray(patch, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractError(f"dbpnet_forward: patch must be (n, 3), got {pts.shape}")
    n = len(pts)
    up_ratio = params.up_ratio

    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    inverse = np.empty(n, dtype=np.intp)
    inverse[order] = np.arange(n)
    canon = pts[order]

    f = extract_features(canon, params)
    if params.use_feature_bp:
        f_dense = feature_back_projection(f, canon, params)
    else:
        f_dense = feature_upsample(f, params.up_primary)

    replicated = Tensor(np.tile(canon, (up_ratio, 1)))
    q0 = ad.add(replicated, coordinate_regress(f_dense, params))

    if params.use_coordinate_bp:
        q_star = coordinate_back_projection(canon, q0, f_dense, params)
    else:
        q_star = q0

    back = (np.arange(up_ratio)[:, None] * n + inverse[None, :]).ravel()
    return ad.gather_rows(q_star, back)
