import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from automac.losses import LossConfig, cross_entropy_loss, ntxent_loss, supcon_loss
from automac.types import ConfigError, DataError
from oracles import ntxent_double_loop, supcon_double_loop


def _t(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)


class TestSupCon:
    def test_pair_of_same_label_is_zero(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(2, 5))
        assert float(supcon_loss(_t(z), [1, 1], 1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_two_by_two_is_ln3(self):
        z = np.eye(4)
        assert float(supcon_loss(_t(z), [0, 0, 1, 1], 1.0)) == pytest.approx(math.log(3), abs=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        d = int(rng.integers(1, 5))
        labels = rng.integers(0, 3, size=n)
        # every anchor needs a positive
        for i in range(n):
            if np.sum(labels == labels[i]) < 2:
                labels[i] = labels[(i + 1) % n]
        if any(np.sum(labels == labels[i]) < 2 for i in range(n)):
            labels[:] = 0
        z = rng.normal(size=(n, d))
        tau = float(rng.choice([0.07, 0.5, 1.0]))
        got = float(supcon_loss(_t(z), torch.tensor(labels), tau))
        assert got == pytest.approx(supcon_double_loop(z, labels, tau), abs=1e-6)

    def test_anchor_without_positive_names_label(self):
        with pytest.raises(DataError, match="label 2"):
            supcon_loss(_t(np.eye(3)), [0, 0, 2], 0.5)

    @pytest.mark.parametrize("c", [0.1, 10.0])
    def test_scale_invariant(self, c):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(6, 4))
        y = [0, 0, 1, 1, 2, 2]
        assert float(supcon_loss(_t(c * z), y, 0.2)) == pytest.approx(float(supcon_loss(_t(z), y, 0.2)), abs=1e-6)

    def test_row_rescaling_of_single_sample(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(6, 4))
        y = [0, 0, 1, 1, 2, 2]
        z2 = z.copy()
        z2[3] *= 7.5
        assert float(supcon_loss(_t(z2), y, 0.2)) == pytest.approx(float(supcon_loss(_t(z), y, 0.2)), abs=1e-6)

    def test_moving_positives_closer_lowers_loss(self):
        far = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        near = np.array([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0], [-0.9, -0.1]])
        y = [0, 0, 1, 1]
        assert float(supcon_loss(_t(near), y, 0.5)) < float(supcon_loss(_t(far), y, 0.5))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(8, 3))
        y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
        perm = rng.permutation(8)
        a = float(supcon_loss(_t(z), torch.tensor(y), 0.3))
        b = float(supcon_loss(_t(z[perm]), torch.tensor(y[perm]), 0.3))
        assert a == pytest.approx(b, abs=1e-9)

    def test_gradient_is_finite(self):
        z = torch.randn(8, 4, dtype=torch.float64, requires_grad=True)
        supcon_loss(z, [0, 0, 1, 1, 2, 2, 0, 1], 0.07).backward()
        assert torch.all(torch.isfinite(z.grad))


class TestNtXent:
    def test_single_pair_is_zero(self):
        assert float(ntxent_loss(_t([[1.0, 2.0]]), _t([[3.0, -1.0]]), 0.5)) == pytest.approx(0.0, abs=1e-12)

    def test_identical_pairs_orthogonal_across(self):
        a = np.eye(2)
        assert float(ntxent_loss(_t(a), _t(a), 1.0)) == pytest.approx(math.log(1 + 2 / math.e), abs=1e-9)
        # the six-place literal 0.551446 is a rounding of 0.5514447...
        assert math.log(1 + 2 / math.e) == pytest.approx(0.551446, abs=5e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(1, 7))
        d = int(rng.integers(1, 5))
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        tau = float(rng.choice([0.07, 0.5, 1.0]))
        assert float(ntxent_loss(_t(a), _t(b), tau)) == pytest.approx(ntxent_double_loop(a, b, tau), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            ntxent_loss(_t(np.ones((3, 2))), _t(np.ones((2, 2))), 0.5)

    def test_pair_permutation_invariant(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        perm = rng.permutation(5)
        assert float(ntxent_loss(_t(a[perm]), _t(b[perm]), 0.2)) == pytest.approx(
            float(ntxent_loss(_t(a), _t(b), 0.2)), abs=1e-9
        )


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert float(cross_entropy_loss(torch.zeros(5, 3, dtype=torch.float64), [0, 1, 2, 2, 0])) == pytest.approx(math.log(3), abs=1e-9)

    def test_margin_closed_form(self):
        # logits m on the true class, 0 elsewhere: -log(e^m / (e^m + 2))
        m = 2.0
        logits = torch.tensor([[m, 0.0, 0.0], [0.0, m, 0.0]], dtype=torch.float64)
        expected = -math.log(math.exp(m) / (math.exp(m) + 2))
        assert float(cross_entropy_loss(logits, [0, 1])) == pytest.approx(expected, abs=1e-12)

    def test_permutation_invariant(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(7, 3, generator=g, dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 1, 0, 2, 2])
        perm = torch.randperm(7, generator=g)
        assert float(cross_entropy_loss(logits[perm], y[perm])) == pytest.approx(float(cross_entropy_loss(logits, y)))

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy_loss(torch.zeros(2, 3), [0, 3])


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(2, 8),
    tau=st.sampled_from([1e-3, 0.07, 1.0]),
    seed=st.integers(0, 10_000),
)
def test_losses_finite_for_small_temperature(n, tau, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 3))
    assert math.isfinite(float(supcon_loss(_t(z), [0] * n, tau)))
    assert math.isfinite(float(ntxent_loss(_t(z), _t(rng.normal(size=(n, 3))), tau)))


def test_loss_config_rejects_bad_temperature():
    with pytest.raises(ConfigError):
        LossConfig(temperature=0)
