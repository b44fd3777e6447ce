import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltfe import diffcore as dc
from ltfe.align import (LAMBDA_INTER, LAMBDA_INTRA, ProposalBatch, ToyHeadParams, compute_losses,
                        cross_entropy, head_losses, inter_loss, intra_loss, total_loss)
from ltfe.errors import DomainError, NumericalError, ShapeError
from oracles import cross_entropy_loops, inter_loss_loops


def batch(features, labels=None, boxes=None):
    features = np.asarray(features, dtype=float)
    if labels is None:
        labels = np.zeros(len(features), dtype=int)
    return ProposalBatch(features, labels, boxes)


class TestIntra:
    def test_identical(self, rng):
        p = batch(rng.standard_normal((4, 6)))
        assert intra_loss(p, p).item() == 0.0

    def test_three_four_five(self):
        assert intra_loss(batch([[3.0, 4.0]]), batch([[0.0, 0.0]])).item() == 25.0

    def test_loop_oracle(self, rng):
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        ref = math.fsum(math.fsum((a[i, j] - b[i, j]) ** 2 for j in range(6)) for i in range(4)) / 4
        assert abs(intra_loss(batch(a), batch(b)).item() - ref) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.booleans())
    def test_zero_iff_identical(self, seed, same):
        r = np.random.default_rng(seed)
        a = r.standard_normal((3, 4))
        b = a.copy() if same else a + r.standard_normal((3, 4)) * 1e-3
        value = intra_loss(batch(a), batch(b)).item()
        assert value >= 0.0
        assert (value == 0.0) == same

    def test_errors(self):
        with pytest.raises(DomainError):
            intra_loss(batch(np.zeros((0, 3))), batch(np.zeros((0, 3))))
        with pytest.raises(ShapeError):
            intra_loss(batch(np.zeros((2, 3))), batch(np.zeros((3, 3))))


class TestInter:
    def test_symmetric_pair(self):
        p = batch([[1.0, 0.0], [0.0, 1.0]])
        q = batch([[1.0, 1.0], [1.0, 1.0]])
        assert abs(inter_loss(p, q).item()) < 1e-15

    def test_uniform_with_positive(self):
        m = 5
        p = batch(np.ones((m, 3)))
        assert inter_loss(p, p, include_positive=True).item() == pytest.approx(math.log(m), abs=1e-14)

    @pytest.mark.parametrize("include_positive", [False, True])
    def test_loop_oracle(self, rng, include_positive):
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        got = inter_loss(batch(a), batch(b), include_positive).item()
        assert abs(got - inter_loss_loops(a.tolist(), b.tolist(), include_positive)) < 1e-12

    def test_literal_form_can_be_negative(self):
        p = batch(np.eye(3))
        assert inter_loss(p, p).item() < 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_scale_invariance(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.standard_normal((4, 5)), r.standard_normal((4, 5))
        base = inter_loss(batch(a), batch(b)).item()
        sa = a * r.uniform(1e-3, 1e3, (4, 1))
        sb = b * r.uniform(1e-3, 1e3, (4, 1))
        assert abs(inter_loss(batch(sa), batch(sb)).item() - base) < 1e-10

    def test_errors(self):
        with pytest.raises(DomainError):
            inter_loss(batch([[1.0, 2.0]]), batch([[1.0, 2.0]]))
        with pytest.raises(NumericalError):
            inter_loss(batch([[1.0, 2.0], [0.0, 0.0]]), batch([[1.0, 2.0], [1.0, 1.0]]))


class TestHeads:
    def test_uniform_logits(self):
        for c in (2, 3, 7):
            got = cross_entropy(np.zeros((4, c)), np.arange(4) % c).item()
            assert abs(got - math.log(c)) < 1e-12

    def test_cross_entropy_oracle(self, rng):
        logits = 3 * rng.standard_normal((6, 3))
        labels = rng.integers(0, 3, 6)
        got = cross_entropy(logits, labels).item()
        assert abs(got - cross_entropy_loops(logits.tolist(), labels.tolist())) < 1e-12

    def test_both_batches_contribute(self, rng):
        heads = ToyHeadParams.init(4, 3, rng)
        labels = np.array([0, 2])
        p = batch(rng.standard_normal((2, 4)), labels)
        q = batch(rng.standard_normal((2, 4)), labels)
        l_cls, l_reg = head_losses(p, q, heads)
        both = np.vstack([p.features.data, q.features.data])
        ref = cross_entropy_loops((both @ heads.w_cls.data).tolist(), [0, 2, 0, 2])
        assert abs(l_cls.item() - ref) < 1e-12
        assert l_reg.item() == 0.0

    def test_box_loss(self):
        heads = ToyHeadParams(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 4)), np.zeros(4))
        boxes = np.array([[0.5, -2.0, 0.0, 1.0]])
        p = batch([[1.0, 1.0]], [0], boxes)
        _, l_reg = head_losses(p, None, heads)
        assert l_reg.item() == pytest.approx(0.125 + 1.5 + 0.0 + 0.5)

    def test_label_range(self, rng):
        with pytest.raises(DomainError):
            cross_entropy(np.zeros((2, 3)), [0, 3])


class TestTotal:
    def test_example(self):
        b = total_loss(2.0, 3.0, 1.0, 0.0)
        assert (LAMBDA_INTRA, LAMBDA_INTER) == (1.0, 0.1)
        assert b.l_align.item() == pytest.approx(2.3, abs=1e-15)
        assert b.l_total.item() == pytest.approx(3.3, abs=1e-15)

    def test_alignment_disabled(self):
        b = total_loss(2.0, 3.0, 1.25, 0.5, 0.0, 0.0)
        assert b.l_total.item() == 1.75

    @settings(max_examples=60, deadline=None)
    @given(*[st.floats(0, 10) for _ in range(4)], st.floats(0, 5), st.floats(0, 5))
    def test_linear_identities(self, intra, inter, cls, reg, l1, l2):
        b = total_loss(intra, inter, cls, reg, l1, l2)
        assert b.l_align.item() == l1 * intra + l2 * inter
        assert b.l_total.item() == cls + reg + (l1 * intra + l2 * inter)

    def test_negative_weights(self):
        with pytest.raises(DomainError):
            total_loss(1.0, 1.0, 1.0, 1.0, -1.0, 0.1)

    @pytest.mark.parametrize("include_positive", [False, True])
    def test_grad_check(self, rng, include_positive):
        labels = np.array([0, 1, 2])
        boxes = 0.3 * rng.standard_normal((3, 4))
        heads = ToyHeadParams(*(0.5 * rng.standard_normal(s) for s in [(4, 3), (3,), (4, 4), (4,)]))

        def f(ts):
            p = ProposalBatch(ts[0], labels, boxes)
            q = ProposalBatch(ts[1], labels, boxes)
            return compute_losses(p, q, ToyHeadParams(*ts[2:]), include_positive=include_positive).l_total

        start = [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))] + \
                [t.data for t in heads.tensors().values()]
        assert dc.grad_check(f, start) < 1e-6
