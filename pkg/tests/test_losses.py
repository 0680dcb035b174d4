import numpy as np
import pytest

from dbpnet import autodiff as ad
from dbpnet.autodiff import Tensor
from dbpnet.errors import ContractError
from dbpnet.losses import chamfer, total_loss, uniform_loss
from helpers import chamfer_oracle, fibonacci_sphere


def _line(xs):
    return np.array([[x, 0.0, 0.0] for x in xs])


class TestChamfer:
    def test_identical_sets(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert chamfer(Tensor(pts), Tensor(pts.copy())).item() == 0.0

    def test_two_singletons(self):
        assert chamfer(Tensor(_line([0.0])), Tensor(_line([3.0]))).item() == 18.0

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(20, 3))
        b = rng.normal(size=(30, 3))
        got = chamfer(Tensor(a), Tensor(b)).item()
        assert abs(got - chamfer_oracle(a, b)) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(6, 3)))
        b = Tensor(rng.normal(size=(9, 3)))
        assert ad.grad_check(lambda p, q: chamfer(p, q), [a, b]) <= 1e-4

    def test_symmetry_is_exact(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(7, 3)), rng.normal(size=(11, 3))
        assert chamfer(Tensor(a), Tensor(b)).item() == chamfer(Tensor(b), Tensor(a)).item()

    def test_zero_iff_same_positions(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(6, 3))
        shuffled = pts[rng.permutation(6)]
        assert chamfer(Tensor(pts), Tensor(shuffled)).item() == 0.0
        moved = pts.copy()
        moved[0] += 0.5
        assert chamfer(Tensor(pts), Tensor(moved)).item() > 0.0

    def test_scaling_by_power_of_two_is_exact(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(8, 3)), rng.normal(size=(12, 3))
        base = chamfer(Tensor(a), Tensor(b)).item()
        scaled = chamfer(Tensor(2.0 * a), Tensor(2.0 * b)).item()
        assert scaled == 4.0 * base

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            chamfer(Tensor(np.zeros((0, 3))), Tensor(np.zeros((3, 3))))


class TestUniformLoss:
    def test_zero_when_spacing_exceeds_threshold(self):
        pts = _line([0.0, 10.0, 20.0, 30.0, 40.0, 50.0])
        assert uniform_loss(Tensor(pts), k=2, h=1.0).item() == 0.0

    def test_coincident_pair_contributes_h_squared(self):
        pts = np.vstack([_line([0.0, 0.0]), _line([100.0, 200.0, 300.0])])
        h = 0.5
        loss = uniform_loss(Tensor(pts), k=1, h=h).item()
        # only the two coincident points violate the margin, h^2 each
        assert loss == pytest.approx(2 * h**2 / 5, rel=1e-4)

    def test_gradient_away_from_hinge(self):
        rng = np.random.default_rng(6)
        q = Tensor(rng.uniform(-1, 1, size=(12, 3)))
        assert ad.grad_check(lambda t: uniform_loss(t, k=3), [q]) <= 1e-4

    def test_fibonacci_sphere_beats_clustered(self):
        n = 64
        even = fibonacci_sphere(n)
        rng = np.random.default_rng(7)
        clustered = rng.normal(size=(n, 3)) * 0.05
        clustered /= max(1.0, np.abs(clustered).max())
        assert uniform_loss(Tensor(even), k=4).item() < uniform_loss(
            Tensor(clustered), k=4
        ).item()

    def test_too_few_points(self):
        with pytest.raises(ContractError):
            uniform_loss(Tensor(np.zeros((3, 3))), k=3)


class TestTotalLoss:
    def test_zero_weight_equals_chamfer(self):
        rng = np.random.default_rng(8)
        pred = Tensor(rng.normal(size=(10, 3)))
        target = Tensor(rng.normal(size=(12, 3)))
        assert (
            total_loss(pred, target, uniform_weight=0.0).item()
            == chamfer(pred, target).item()
        )

    def test_perfect_well_spaced_prediction_is_near_zero(self):
        pts = fibonacci_sphere(64)
        loss = total_loss(Tensor(pts), Tensor(pts.copy()), 0.2, uniform_k=4).item()
        assert loss <= 1e-4

    def test_compositional_sum(self):
        rng = np.random.default_rng(9)
        pred = Tensor(rng.uniform(-1, 1, (16, 3)))
        target = Tensor(rng.uniform(-1, 1, (20, 3)))
        lam = 0.2
        combined = total_loss(pred, target, lam, uniform_k=4).item()
        parts = chamfer(pred, target).item() + lam * uniform_loss(pred, k=4).item()
        assert combined == pytest.approx(parts, rel=1e-15)
