import math

import numpy as np
import pytest

from stica.augment import ViewSet
from stica.losses import (
    LossWeights,
    cosine_sim,
    cross_modal_loss,
    enumerate_crop_pairs,
    multicrop_baseline_loss,
    nce_loss,
    total_loss,
    within_modal_loss,
    within_modal_terms,
)
from stica.tensor import NumericError, ShapeError, Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


def nce_oracle(za, zb, tau):
    """From-scratch scalar evaluation of the contrastive loss."""
    za = za / np.linalg.norm(za, axis=1, keepdims=True)
    zb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
    sims = za @ zb.T / tau
    total = 0.0
    for i in range(za.shape[0]):
        total -= math.log(math.exp(sims[i, i]) / sum(math.exp(s) for s in sims[i]))
    return total / za.shape[0]


class TestCosineSim:
    def test_self_is_one(self):
        z = rng(0).normal(size=8)
        assert cosine_sim(z, z) == 1.0

    def test_antipodal_is_minus_one(self):
        z = rng(1).normal(size=8)
        assert cosine_sim(z, -z) == -1.0

    def test_analytic_value(self):
        assert abs(cosine_sim(np.array([1.0, 0.0]), np.array([1.0, 1.0])) - 0.70711) < 1e-5

    def test_zero_vector_rejected(self):
        with pytest.raises(NumericError):
            cosine_sim(np.zeros(4), np.ones(4))


class TestNceLoss:
    def test_single_instance_is_exactly_zero(self):
        z = Tensor(rng(0).normal(size=(1, 8)))
        assert nce_loss(z, z, 0.1).item() == 0.0

    def test_uniform_similarities_give_log_n(self):
        for n in (2, 4, 8, 64):
            za = Tensor(np.tile(rng(1).normal(size=8), (n, 1)))
            zb = Tensor(np.tile(rng(2).normal(size=8), (n, 1)))
            assert abs(nce_loss(za, zb, 0.5).item() - math.log(n)) < 1e-9

    def test_two_instances_orthonormal_worked_example(self):
        # diag sims 1, off-diag 0, tau 0.5 -> log(1 + e^-2)
        z = Tensor(np.eye(2))
        expected = math.log(1.0 + math.exp(-2.0))
        got = nce_loss(z, z, 0.5).item()
        assert abs(got - 0.126928) < 1e-6
        assert abs(got - expected) < 1e-12
        assert abs(got - nce_oracle(np.eye(2), np.eye(2), 0.5)) < 1e-12

    def test_matches_scalar_oracle_on_random_batches(self):
        za = rng(3).normal(size=(6, 16))
        zb = rng(4).normal(size=(6, 16))
        got = nce_loss(Tensor(za), Tensor(zb), 0.2).item()
        assert abs(got - nce_oracle(za, zb, 0.2)) < 1e-10

    def test_asymmetric_in_arguments(self):
        za = rng(5).normal(size=(4, 8))
        zb = rng(6).normal(size=(4, 8))
        ab = nce_loss(Tensor(za), Tensor(zb), 0.5).item()
        ba = nce_loss(Tensor(zb), Tensor(za), 0.5).item()
        assert ab != ba

    def test_nonnegative_and_monotone_in_positive_similarity(self):
        g = rng(7)
        base = g.normal(size=(4, 8))
        zb = g.normal(size=(4, 8))
        losses = []
        for scale in (0.0, 1.0, 3.0):
            za = base + scale * zb  # pull rows toward their positives
            val = nce_loss(Tensor(za), Tensor(zb), 0.5).item()
            assert val >= 0.0
            losses.append(val)
        assert losses[0] > losses[1] > losses[2]

    def test_per_instance_scaling_never_changes_loss(self):
        za = rng(8).normal(size=(5, 8))
        zb = rng(9).normal(size=(5, 8))
        scales = rng(10).uniform(0.1, 10.0, size=(5, 1))
        a = nce_loss(Tensor(za), Tensor(zb), 0.3).item()
        b = nce_loss(Tensor(za * scales), Tensor(zb * 2.0), 0.3).item()
        assert abs(a - b) < 1e-12

    def test_shape_and_temperature_errors(self):
        z = Tensor(np.ones((2, 4)))
        with pytest.raises(ShapeError):
            nce_loss(z, Tensor(np.ones((3, 4))), 0.5)
        with pytest.raises(ValueError):
            nce_loss(z, z, 0.0)

    def test_gradients_match_finite_differences(self):
        za = Tensor(rng(11).normal(size=(3, 4)), requires_grad=True)
        zb = Tensor(rng(12).normal(size=(3, 4)), requires_grad=True)
        assert grad_check(lambda a, b: nce_loss(a, b, 0.5), [za, zb]) < 1e-5


class TestPairEnumeration:
    @staticmethod
    def brute_force_directed_count(m, n):
        cls = ["medium"] * m + ["small"] * n
        count = 0
        for i in range(m + n):
            for j in range(m + n):
                if cls[i] == "small" and cls[j] == "small":
                    continue
                count += 2
        return count

    @pytest.mark.parametrize("m", range(5))
    @pytest.mark.parametrize("n", range(5))
    def test_directed_count_law(self, m, n):
        pairs = enumerate_crop_pairs(m, n)
        directed = 2 * len(pairs)
        assert directed == self.brute_force_directed_count(m, n)
        assert directed == 2 * ((m + n) ** 2 - n ** 2)

    def test_zero_zero(self):
        assert enumerate_crop_pairs(0, 0) == []

    def test_examples(self):
        assert 2 * len(enumerate_crop_pairs(1, 2)) == 10
        assert 2 * len(enumerate_crop_pairs(2, 4)) == 40


def make_view_sets(m, n, N=3, d=8, seed=0, identical=False):
    g = rng(seed)

    def views(source):
        out = [("large", Tensor(g.normal(size=(N, d))))]
        out += [("medium", Tensor(g.normal(size=(N, d)))) for _ in range(m)]
        out += [("small", Tensor(g.normal(size=(N, d)))) for _ in range(n)]
        return out

    v1 = views(1)
    v2 = [(cls, Tensor(z.data.copy())) for cls, z in v1] if identical else views(2)
    return ViewSet(1, v1), ViewSet(2, v2)


class TestWithinModalLoss:
    def test_identical_single_instance_sets_give_zero(self):
        v1, v2 = make_view_sets(1, 2, N=1, identical=True)
        assert within_modal_loss(v1, v2, 0.5).item() == 0.0

    def test_term_count_matches_enumeration(self):
        for m, n in [(1, 2), (2, 4), (0, 1), (3, 0)]:
            v1, v2 = make_view_sets(m, n)
            assert len(within_modal_terms(v1, v2)) == 2 * len(enumerate_crop_pairs(m, n))

    def test_scale_invariance(self):
        v1, v2 = make_view_sets(1, 2, seed=3)
        base = within_modal_loss(v1, v2, 0.5).item()
        doubled_1 = ViewSet(1, [(c, z * 2.0) for c, z in v1.views])
        doubled_2 = ViewSet(2, [(c, z * 2.0) for c, z in v2.views])
        assert abs(within_modal_loss(doubled_1, doubled_2, 0.5).item() - base) < 1e-12

    def test_empty_pair_list_returns_zero_with_warning(self):
        v1, v2 = make_view_sets(0, 0)
        with pytest.warns(RuntimeWarning, match="no crop pairs"):
            assert within_modal_loss(v1, v2, 0.5).item() == 0.0

    def test_normalization_flag(self):
        v1, v2 = make_view_sets(1, 1, seed=4)
        terms = len(within_modal_terms(v1, v2))
        normalized = within_modal_loss(v1, v2, 0.5).item()
        raw = within_modal_loss(v1, v2, 0.5, normalize=False).item()
        assert abs(raw - terms * normalized) < 1e-10

    def test_matches_oracle_sum(self):
        v1, v2 = make_view_sets(1, 2, seed=5)
        expected = 0.0
        for za, zb in within_modal_terms(v1, v2):
            expected += nce_oracle(za.data, zb.data, 0.5)
        expected /= len(within_modal_terms(v1, v2))
        assert abs(within_modal_loss(v1, v2, 0.5).item() - expected) < 1e-10


class TestCrossModalLoss:
    def test_identical_batches_single_instance_zero(self):
        z = Tensor(rng(0).normal(size=(1, 8)))
        assert cross_modal_loss(z, z, z, 0.1).item() == 0.0

    def test_symmetric_under_large_view_swap(self):
        zl1 = Tensor(rng(1).normal(size=(4, 8)))
        zl2 = Tensor(rng(2).normal(size=(4, 8)))
        za = Tensor(rng(3).normal(size=(4, 8)))
        a = cross_modal_loss(zl1, zl2, za, 0.1).item()
        b = cross_modal_loss(zl2, zl1, za, 0.1).item()
        assert abs(a - b) < 1e-12

    def test_matches_independent_oracle(self):
        zl1 = rng(4).normal(size=(5, 8))
        zl2 = rng(5).normal(size=(5, 8))
        za = rng(6).normal(size=(5, 8))
        expected = (nce_oracle(zl1, za, 0.1) + nce_oracle(zl2, za, 0.1)
                    + nce_oracle(za, zl1, 0.1) + nce_oracle(za, zl2, 0.1))
        got = cross_modal_loss(Tensor(zl1), Tensor(zl2), Tensor(za), 0.1).item()
        assert abs(got - expected) < 1e-10

    def test_gradcheck(self):
        zl1 = Tensor(rng(7).normal(size=(2, 4)), requires_grad=True)
        zl2 = Tensor(rng(8).normal(size=(2, 4)), requires_grad=True)
        za = Tensor(rng(9).normal(size=(2, 4)), requires_grad=True)
        err = grad_check(lambda a, b, c: cross_modal_loss(a, b, c, 0.1), [zl1, zl2, za])
        assert err < 1e-4


class TestTotalLoss:
    def test_cross_modal_only(self):
        w = LossWeights(lambda_vv=0.0, lambda_va=2.0)
        assert total_loss(Tensor(5.0), Tensor(3.0), w).item() == 6.0

    def test_within_only(self):
        w = LossWeights(lambda_vv=1.0, lambda_va=0.0)
        assert total_loss(Tensor(2.0), Tensor(3.0), w).item() == 2.0

    def test_unit_weights(self):
        w = LossWeights(lambda_vv=1.0, lambda_va=1.0)
        assert total_loss(Tensor(2.0), Tensor(3.0), w).item() == 5.0

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_vv=-1.0)
        with pytest.raises(ValueError):
            LossWeights(tau_cross=0.0)


class TestMulticropBaseline:
    def test_identical_single_instance_zero(self):
        z = Tensor(rng(0).normal(size=(1, 8)))
        assert multicrop_baseline_loss(z, z, z, 0.5).item() == 0.0

    def test_matches_independent_oracle(self):
        zl1 = rng(1).normal(size=(4, 8))
        zl2 = rng(2).normal(size=(4, 8))
        zs = rng(3).normal(size=(4, 8))
        expected = (nce_oracle(zl1, zl2, 0.5) + nce_oracle(zl2, zl1, 0.5)
                    + nce_oracle(zl1, zs, 0.5) + nce_oracle(zl2, zs, 0.5))
        got = multicrop_baseline_loss(Tensor(zl1), Tensor(zl2), Tensor(zs), 0.5).item()
        assert abs(got - expected) < 1e-10
