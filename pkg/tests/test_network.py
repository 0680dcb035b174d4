import numpy as np
import pytest

from dbpnet import autodiff as ad
from dbpnet.autodiff import Linear, Tensor
from dbpnet.errors import ContractError
from dbpnet.losses import total_loss
from dbpnet.network import (
    UpUnit,
    coordinate_back_projection,
    coordinate_regress,
    dbpnet_forward,
    extract_features,
    feature_back_projection,
    feature_downsample,
    feature_upsample,
    init_model_params,
    position_aware_attention,
    positional_encoding,
)
from helpers import resample_oracle


def toy_params(n=8, alpha=2, channels=8, k_edge=4, seed=0, zero_heads=True):
    return init_model_params(
        n_points=n, up_ratio=alpha, channels=channels, k_edge=k_edge,
        seed=seed, zero_heads=zero_heads,
    )


def mlp_oracle(layers, x):
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(layers):
        h = h @ layer.weight.data + layer.bias.data
        if i + 1 < len(layers):
            h = np.maximum(h, 0.0)
    return h


def upsample_oracle(f, unit):
    n = len(f)
    rows = []
    for j in range(unit.codes.shape[0]):
        for i in range(n):
            rows.append(np.concatenate([f[i], unit.codes.data[j]]))
    return mlp_oracle(unit.mlp, np.array(rows))


def attention_oracle(x, coords, params):
    z = x + mlp_oracle(params.pos_mlp, coords)
    q = z @ params.attn_query.weight.data + params.attn_query.bias.data
    k = z @ params.attn_key.data
    v = z @ params.attn_value.weight.data + params.attn_value.bias.data
    logits = q @ k.T / np.sqrt(params.channels)
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights = shifted / shifted.sum(axis=1, keepdims=True)
    return (weights @ v) @ params.attn_out.data + x, weights


def extract_oracle(patch, params):
    n = len(patch)
    f = mlp_oracle(params.point_mlp, patch)
    out = np.empty((n, params.channels))
    for i in range(n):
        d = ((patch - patch[i]) ** 2).sum(axis=1)
        nbr = sorted(range(n), key=lambda j: (d[j], j))[: params.k_edge]
        edges = [
            mlp_oracle(params.edge_mlp, np.concatenate([f[i], f[j] - f[i]])[None, :])[0]
            for j in nbr
        ]
        out[i] = np.max(edges, axis=0)
    return out


class TestExtractFeatures:
    def test_output_shape(self):
        params = toy_params()
        patch = np.random.default_rng(0).uniform(-1, 1, (8, 3))
        assert extract_features(patch, params).shape == (8, 8)

    def test_permutation_equivariance_exact(self):
        params = toy_params()
        rng = np.random.default_rng(1)
        patch = rng.uniform(-1, 1, (8, 3))
        perm = rng.permutation(8)
        base = extract_features(patch, params).data
        permuted = extract_features(patch[perm], params).data
        assert np.array_equal(permuted, base[perm])

    def test_matches_straight_line_oracle(self):
        params = toy_params(seed=3)
        patch = np.random.default_rng(2).uniform(-1, 1, (8, 3))
        got = extract_features(patch, params).data
        assert np.abs(got - extract_oracle(patch, params)).max() <= 1e-12

    def test_too_few_points(self):
        params = toy_params(k_edge=4)
        with pytest.raises(ContractError):
            extract_features(np.zeros((3, 3)), params)


class TestPositionalEncoding:
    def test_zero_coords_zero_bias_gives_zero(self):
        params = toy_params()
        out = positional_encoding(np.zeros((5, 3)), params)
        assert np.array_equal(out.data, np.zeros((5, 8)))

    def test_shape(self):
        params = toy_params()
        assert positional_encoding(np.zeros((6, 3)), params).shape == (6, 8)

    def test_identical_coords_identical_rows(self):
        params = toy_params(seed=5)
        coords = np.random.default_rng(4).uniform(-1, 1, (4, 3))
        coords[2] = coords[0]
        out = positional_encoding(coords, params).data
        assert np.array_equal(out[2], out[0])


class TestAttention:
    def test_single_point_weight_is_one(self):
        params = toy_params(seed=6, zero_heads=False)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 8))
        coords = rng.uniform(-1, 1, (1, 3))
        got = position_aware_attention(Tensor(x), coords, params).data
        z = x + mlp_oracle(params.pos_mlp, coords)
        gz = z @ params.attn_value.weight.data + params.attn_value.bias.data
        manual = gz @ params.attn_out.data + x
        assert np.abs(got - manual).max() <= 1e-12

    def test_zero_output_transform_is_identity(self):
        params = toy_params(seed=7)  # zero_heads zeroes attn_out
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 8))
        out = position_aware_attention(Tensor(x), rng.uniform(-1, 1, (6, 3)), params)
        assert np.array_equal(out.data, x)

    def test_matches_direct_formula(self):
        params = toy_params(seed=8, zero_heads=False)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 8))
        coords = rng.uniform(-1, 1, (6, 3))
        got = position_aware_attention(Tensor(x), coords, params).data
        expected, weights = attention_oracle(x, coords, params)
        assert np.abs(weights.sum(axis=1) - 1.0).max() <= 1e-12
        assert np.abs(got - expected).max() <= 1e-12

    def test_shape_mismatch(self):
        params = toy_params()
        with pytest.raises(ContractError):
            position_aware_attention(Tensor(np.zeros((4, 8))), np.zeros((5, 3)), params)


class TestFeatureUpDown:
    def test_single_copy_shape(self):
        params = toy_params(alpha=1)
        f = Tensor(np.random.default_rng(9).normal(size=(4, 8)))
        assert feature_upsample(f, params.up_primary).shape == (4, 8)

    def test_rows_depend_only_on_their_source_row(self):
        params = toy_params(seed=10)
        rng = np.random.default_rng(10)
        f = rng.normal(size=(4, 8))
        base = feature_upsample(Tensor(f), params.up_primary).data
        bumped = f.copy()
        bumped[1] += 0.5
        moved = feature_upsample(Tensor(bumped), params.up_primary).data
        changed = np.flatnonzero(np.abs(moved - base).max(axis=1) > 0)
        assert set(changed) == {1, 5}  # row i and its copy at n + i

    def test_matches_per_row_oracle(self):
        params = toy_params(seed=11)
        f = np.random.default_rng(11).normal(size=(4, 8))
        got = feature_upsample(Tensor(f), params.up_primary).data
        assert np.abs(got - upsample_oracle(f, params.up_primary)).max() <= 1e-12

    def test_downsample_identity_at_alpha_one(self):
        f = np.random.default_rng(12).normal(size=(6, 8))
        assert np.array_equal(feature_downsample(Tensor(f), 1).data, f)

    def test_down_of_up_with_identity_extension(self):
        channels = 8
        codes = Tensor(np.tile(np.random.default_rng(13).normal(size=channels), (2, 1)))
        ident_ext = np.vstack([np.eye(channels), np.zeros((channels, channels))])
        unit = UpUnit(codes=codes, mlp=[Linear(Tensor(ident_ext), Tensor(np.zeros(channels)))])
        f = np.random.default_rng(14).normal(size=(5, channels))
        up = feature_upsample(Tensor(f), unit)
        down = feature_downsample(up, 2)
        assert np.array_equal(down.data, f)

    def test_downsample_matches_group_mean_loop(self):
        rng = np.random.default_rng(15)
        dense = rng.normal(size=(12, 4))
        got = feature_downsample(Tensor(dense), 3).data
        for i in range(4):
            expected = (dense[i] + dense[4 + i] + dense[8 + i]) / 3.0
            assert np.abs(got[i] - expected).max() <= 1e-12

    def test_downsample_indivisible(self):
        with pytest.raises(ContractError):
            feature_downsample(Tensor(np.zeros((7, 4))), 2)


def _identity_extension_unit(channels, copies, codes_value):
    ident_ext = np.vstack([np.eye(channels), np.zeros((channels, channels))])
    return UpUnit(
        codes=Tensor(np.tile(codes_value, (copies, 1))),
        mlp=[Linear(Tensor(ident_ext), Tensor(np.zeros(channels)))],
    )


class TestFeatureBackProjection:
    def test_zero_residual_collapses_to_attention_of_h0(self):
        rng = np.random.default_rng(16)
        channels = 8
        params = toy_params(seed=16, zero_heads=False)
        params.up_primary = _identity_extension_unit(channels, 2, rng.normal(size=channels))
        params.up_residual = _identity_extension_unit(channels, 2, np.zeros(channels))
        f = rng.normal(size=(5, channels))
        coords = rng.uniform(-1, 1, (5, 3))
        got = feature_back_projection(Tensor(f), coords, params).data
        h0 = feature_upsample(Tensor(f), params.up_primary)
        expected = position_aware_attention(h0, np.tile(coords, (2, 1)), params).data
        assert np.array_equal(got, expected)

    def test_output_shape(self):
        params = toy_params()
        f = Tensor(np.random.default_rng(17).normal(size=(8, 8)))
        out = feature_back_projection(f, np.random.default_rng(18).uniform(-1, 1, (8, 3)), params)
        assert out.shape == (16, 8)

    def test_matches_step_by_step_oracle(self):
        params = toy_params(n=4, seed=19, zero_heads=False)
        rng = np.random.default_rng(19)
        f = rng.normal(size=(4, 8))
        coords = rng.uniform(-1, 1, (4, 3))
        h0 = upsample_oracle(f, params.up_primary)
        down = (h0[:4] + h0[4:]) / 2.0
        h1 = h0 + upsample_oracle(f - down, params.up_residual)
        expected, _ = attention_oracle(h1, np.tile(coords, (2, 1)), params)
        got = feature_back_projection(Tensor(f), coords, params).data
        assert np.abs(got - expected).max() <= 1e-12


class TestCoordinateStage:
    def test_zero_head_regress_gives_zero_offsets(self):
        params = toy_params(seed=20)
        dense = Tensor(np.random.default_rng(20).normal(size=(16, 8)))
        out = coordinate_regress(dense, params)
        assert np.array_equal(out.data, np.zeros((16, 3)))
        assert out.shape == (16, 3)

    def test_regress_matches_per_row_oracle(self):
        params = toy_params(seed=21, zero_heads=False)
        dense = np.random.default_rng(21).normal(size=(16, 8))
        got = coordinate_regress(Tensor(dense), params).data
        assert np.abs(got - mlp_oracle(params.regress_head, dense)).max() <= 1e-12

    def test_zero_refine_head_returns_q0_exactly(self):
        params = toy_params(seed=22)  # refine head zero at init
        rng = np.random.default_rng(22)
        patch = rng.uniform(-1, 1, (8, 3))
        q0 = Tensor(np.tile(patch, (2, 1)) + 0.05 * rng.normal(size=(16, 3)))
        dense = Tensor(rng.normal(size=(16, 8)))
        out = coordinate_back_projection(patch, q0, dense, params)
        assert np.array_equal(out.data, q0.data)

    def test_alpha_one_residuals_are_zero(self):
        params = toy_params(alpha=1, seed=23, zero_heads=False)
        rng = np.random.default_rng(23)
        patch = rng.uniform(-1, 1, (6, 3))
        q0 = Tensor(patch.copy())
        dense = Tensor(rng.normal(size=(6, 8)))
        _, assignment = resample_oracle(patch, patch, 1)
        residuals = patch[assignment[:, 0]] - patch
        assert np.abs(residuals).max() == 0.0
        got = coordinate_back_projection(patch, q0, dense, params).data
        stack = np.hstack([patch, residuals])
        correction = mlp_oracle(params.refine_mlp, stack)
        up = upsample_oracle(correction, params.refine_up)
        offsets = mlp_oracle(params.refine_head, up + dense.data)
        expected = patch + offsets[assignment[:, 0].argsort()]
        assert np.abs(got - expected).max() <= 1e-12

    def test_matches_composed_oracle(self):
        params = toy_params(n=4, seed=24, zero_heads=False)
        rng = np.random.default_rng(24)
        patch = rng.uniform(-1, 1, (4, 3))
        q0_data = np.tile(patch, (2, 1)) + 0.1 * rng.normal(size=(8, 3))
        dense = rng.normal(size=(8, 8))
        got = coordinate_back_projection(
            patch, Tensor(q0_data), Tensor(dense), params
        ).data

        _, assignment = resample_oracle(q0_data, patch, 2)
        stack = np.hstack(
            [patch] + [q0_data[assignment[:, j]] - patch for j in range(2)]
        )
        correction = mlp_oracle(params.refine_mlp, stack)
        up = upsample_oracle(correction, params.refine_up)
        offsets_cm = mlp_oracle(params.refine_head, up + dense)
        routed = np.empty_like(offsets_cm)
        for i in range(4):
            for j in range(2):
                routed[assignment[i, j]] = offsets_cm[j * 4 + i]
        assert np.abs(got - (q0_data + routed)).max() <= 1e-12

    def test_size_mismatch(self):
        params = toy_params()
        with pytest.raises(ContractError):
            coordinate_back_projection(
                np.zeros((8, 3)), Tensor(np.zeros((10, 3))), Tensor(np.zeros((10, 8))), params
            )


class TestFullForward:
    def test_output_count(self):
        for n, alpha in ((8, 2), (12, 3)):
            params = toy_params(n=n, alpha=alpha)
            patch = np.random.default_rng(25).uniform(-1, 1, (n, 3))
            assert dbpnet_forward(patch, params).shape == (alpha * n, 3)

    def test_identity_at_init_bit_exact(self):
        params = toy_params(seed=26)
        patch = np.random.default_rng(26).uniform(-1, 1, (8, 3))
        out = dbpnet_forward(patch, params).data
        assert np.array_equal(out, np.tile(patch, (2, 1)))

    def test_permutation_equivariance_exact(self):
        params = toy_params(seed=27, zero_heads=False)
        rng = np.random.default_rng(27)
        patch = rng.uniform(-1, 1, (8, 3))
        perm = rng.permutation(8)
        base = dbpnet_forward(patch, params).data
        permuted = dbpnet_forward(patch[perm], params).data
        for j in range(2):
            assert np.array_equal(
                permuted[j * 8:(j + 1) * 8], base[j * 8:(j + 1) * 8][perm]
            )

    def test_every_parameter_gets_gradient(self):
        params = toy_params(seed=28, zero_heads=False)
        rng = np.random.default_rng(28)
        patch = rng.uniform(-1, 1, (8, 3))
        target = rng.uniform(-1, 1, (16, 3))
        tensors = params.tensors()
        ad.zero_grads(tensors)
        loss = total_loss(dbpnet_forward(patch, params), Tensor(target), 0.2, 3)
        ad.backward(loss, leaves=tensors)
        for name, tensor in params.named_tensors():
            assert np.abs(tensor.grad).max() > 0.0, f"dead branch: {name}"

    def test_gradients_match_finite_differences_on_key_tensors(self):
        params = toy_params(seed=29, zero_heads=False)
        rng = np.random.default_rng(29)
        patch = rng.uniform(-1, 1, (8, 3))
        target = rng.uniform(-1, 1, (16, 3))

        def f(*_):
            return total_loss(dbpnet_forward(patch, params), Tensor(target), 0.2, 3)

        probes = [
            params.attn_out,
            params.up_primary.codes,
            params.regress_head[1].weight,
            params.refine_head[1].weight,
        ]
        assert ad.grad_check(f, probes) <= 1e-4

    def test_ablation_flags_change_the_path(self):
        rng = np.random.default_rng(30)
        patch = rng.uniform(-1, 1, (8, 3))
        full = toy_params(seed=31, zero_heads=False)
        bare = toy_params(seed=31, zero_heads=False)
        bare.use_feature_bp = False
        bare.use_coordinate_bp = False
        out_full = dbpnet_forward(patch, full).data
        out_bare = dbpnet_forward(patch, bare).data
        assert out_full.shape == out_bare.shape
        assert not np.array_equal(out_full, out_bare)
