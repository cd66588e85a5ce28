import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cppf.autodiff import DegenerateInputError, ParameterError, Tape, Tensor
from cppf.esr import DEFAULT_ALPHA_STAGES, AlphaSchedule, CenterSplit, constraint_satisfaction, esr_loss, split_centers

from .conftest import gradcheck


def cos(a, b):
    return float(np.dot(a, b)) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))


def sims(f, c, split):
    return [(max(cos(x, c[k]) for k in split.chosen), max(cos(x, c[k]) for k in split.reserved)) for x in f]


def esr_oracle(f, c, split, lam):
    return sum(max(0.0, lam * s2 - s1) for s1, s2 in sims(f, c, split)) / len(f)


def satisfaction_oracle(f, c, split, lam):
    return sum(1 for s1, s2 in sims(f, c, split) if s1 >= lam * s2) / len(f)


SPLIT_3_3 = CenterSplit(chosen=(0, 2, 4), reserved=(1, 3, 5), proportion=0.5, seed=0)
BASIS = np.eye(4)
# chosen centers e0, e2; reserved e1, e3
SPLIT_BASIS = CenterSplit(chosen=(0, 2), reserved=(1, 3), proportion=0.5, seed=0)


class TestSplit:
    def test_half_of_32(self):
        s = split_centers(32, 0.5, seed=7)
        assert len(s.chosen) == 16 and len(s.reserved) == 16

    def test_partition(self):
        for seed in range(20):
            s = split_centers(10, 0.4, seed)
            assert set(s.chosen) | set(s.reserved) == set(range(10))
            assert not set(s.chosen) & set(s.reserved)
            assert len(s.chosen) == 4

    def test_same_seed(self):
        assert split_centers(32, 0.5, 3) == split_centers(32, 0.5, 3)

    def test_all_balanced_partitions_occur(self):
        # with element 0 fixed, its partner in the chosen-or-reserved pair has 3 options
        partners = set()
        for seed in range(200):
            s = split_centers(4, 0.5, seed)
            group = s.chosen if 0 in s.chosen else s.reserved
            partners.add(next(i for i in group if i != 0))
        assert partners == {1, 2, 3}

    @pytest.mark.parametrize("n_c,p", [(1, 0.5), (4, 0.0), (4, 1.0), (4, 0.1), (4, 0.9)])
    def test_empty_group(self, n_c, p):
        with pytest.raises(ParameterError):
            split_centers(n_c, p, 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 64), st.floats(0.01, 0.99), st.integers(0, 2**32))
    def test_rounding_rule(self, n_c, p, seed):
        k = math.floor(p * n_c + 0.5)
        if k < 1 or k > n_c - 1:
            with pytest.raises(ParameterError):
                split_centers(n_c, p, seed)
        else:
            assert len(split_centers(n_c, p, seed).chosen) == k


class TestEsrLoss:
    def test_satisfied(self):
        assert esr_loss(Tensor(BASIS[[0]]), Tensor(BASIS), SPLIT_BASIS, 2.0).item() == 0.0

    def test_maximally_violated(self):
        assert esr_loss(Tensor(BASIS[[1]]), Tensor(BASIS), SPLIT_BASIS, 2.0).item() == pytest.approx(2.0)

    def test_oracle(self, rng):
        for _ in range(100):
            f, c = rng.standard_normal((8, 4)), rng.standard_normal((6, 4))
            lam = rng.uniform(1, 4)
            assert esr_loss(Tensor(f), Tensor(c), SPLIT_3_3, lam).item() == pytest.approx(esr_oracle(f, c, SPLIT_3_3, lam), abs=1e-9)

    def test_centers_get_no_gradient(self, rng):
        f = Tensor(rng.standard_normal((8, 4)), requires_grad=True)
        c = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        with Tape() as tape:
            loss = esr_loss(f, c, SPLIT_3_3, 2.0)
        tape.backward(loss)
        assert c.grad is None and f.grad is not None

    def test_gradient(self, rng):
        c = rng.standard_normal((6, 4))
        for _ in range(10):
            f = rng.standard_normal((8, 4))
            assert gradcheck(lambda x: esr_loss(x, Tensor(c), SPLIT_3_3, 2.0), f) < 1e-4

    def test_monotone_in_lambda(self, rng):
        for _ in range(20):
            f, c = rng.standard_normal((8, 4)), rng.standard_normal((6, 4))
            vals = [esr_loss(Tensor(f), Tensor(c), SPLIT_3_3, lam).item() for lam in (1, 1.5, 2, 3, 4)]
            assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_within_group_permutation_and_rescale(self, rng):
        f, c = rng.standard_normal((8, 4)), rng.standard_normal((6, 4))
        c2 = c[[4, 3, 0, 5, 2, 1]] * np.array([[2.0], [1.0], [0.5], [3.0], [1.0], [7.0]])
        base = esr_loss(Tensor(f), Tensor(c), SPLIT_3_3, 2.0).item()
        assert esr_loss(Tensor(f), Tensor(c2), SPLIT_3_3, 2.0).item() == pytest.approx(base, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            esr_loss(Tensor(np.zeros((1, 4))), Tensor(BASIS), SPLIT_BASIS, 2.0)


class TestSatisfaction:
    def test_all_on_chosen(self):
        assert constraint_satisfaction(BASIS[[0, 2, 0]], BASIS, SPLIT_BASIS, 2.0) == 1.0

    def test_oracle_exact(self, rng):
        for _ in range(100):
            f, c = rng.standard_normal((8, 4)), rng.standard_normal((6, 4))
            assert constraint_satisfaction(f, c, SPLIT_3_3, 2.0) == satisfaction_oracle(f, c, SPLIT_3_3, 2.0)

    def test_zero_loss_iff_full_satisfaction(self, rng):
        hits = 0
        for _ in range(300):
            # small batches near chosen centers make both outcomes common
            f = BASIS[rng.choice([0, 2], 3)] + rng.normal(0, 0.4, (3, 4))
            loss = esr_loss(Tensor(f), Tensor(BASIS), SPLIT_BASIS, 2.0).item()
            full = constraint_satisfaction(f, BASIS, SPLIT_BASIS, 2.0) == 1.0
            assert (loss <= 1e-12) == full
            hits += full
        assert 0 < hits < 300


class TestAlphaSchedule:
    def test_constant(self):
        assert [AlphaSchedule()(e, 60) for e in (0, 30, 59)] == [0.1, 0.1, 0.1]

    def test_staged_boundaries(self):
        a = AlphaSchedule.staged()
        assert [a(e, 60) for e in (0, 14, 15, 29, 30, 44, 45, 59)] == [0.0, 0.0, 1e-3, 1e-3, 1e-2, 1e-2, 1e-1, 1e-1]
        assert DEFAULT_ALPHA_STAGES == ((0.0, 0.0), (0.25, 1e-3), (0.5, 1e-2), (0.75, 1e-1))

    def test_every_stage_is_hit(self):
        for epochs in (4, 8, 10, 60, 100, 500):
            a = AlphaSchedule.staged()
            assert {a(e, epochs) for e in range(epochs)} == {0.0, 1e-3, 1e-2, 1e-1}

    def test_validation(self):
        with pytest.raises(ParameterError):
            AlphaSchedule(-0.1)
        with pytest.raises(ParameterError):
            AlphaSchedule.staged(((0.5, 0.1), (0.0, 0.2)))
