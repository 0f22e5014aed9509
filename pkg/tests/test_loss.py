import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetrep.errors import NumericError, ValidationError
from hetrep.loss import (LossBatch, PairSource, ScoreParams, TaskWeights, chunked_softmax_backward, corrected_score,
                         feature_loss, future_action_loss, next_action_loss, pair_loss, sampled_softmax_loss,
                         softmax_loss, total_loss)


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_batch(rng, b=4, k=8, d=16, ids=False):
    kw = {}
    if ids:
        kw = dict(pos_ids=rng.integers(0, 6, b), neg_ids=rng.integers(0, 6, k))
    return LossBatch(unit(rng, b, d), unit(rng, b, d), unit(rng, k, d),
                     np.log(rng.uniform(0.001, 0.1, b)), np.log(rng.uniform(0.001, 0.1, k)), **kw)


def row_loss_oracle(q, p, negs, lq_p, lq_n, lam, allowed=None):
    """-log softmax of the positive, written out term by term."""
    sp = lam * sum(a * b for a, b in zip(q, p)) - lq_p
    terms = [sp]
    for j, n in enumerate(negs):
        if allowed is None or allowed[j]:
            terms.append(lam * sum(a * b for a, b in zip(q, n)) - lq_n[j])
    m = max(terms)
    return -(sp - m - math.log(sum(math.exp(t - m) for t in terms)))


def batch_oracle(batch, lam, weights=None):
    b = batch.b
    w = [1.0 / b] * b if weights is None else weights
    total = 0.0
    for i in range(b):
        allowed = None
        if batch.neg_ids is not None:
            allowed = [batch.neg_ids[j] != batch.pos_ids[i] for j in range(batch.k)]
        if batch.allowed is not None:
            allowed = [(allowed is None or allowed[j]) and batch.allowed[i, j] for j in range(batch.k)]
        total += w[i] * row_loss_oracle(batch.Q[i], batch.P[i], batch.N, batch.logq_pos[i], batch.logq_neg,
                                        lam, allowed)
    return total


def test_corrected_score():
    e1 = np.array([1.0, 0.0])
    assert corrected_score(e1, e1, 0.0, ScoreParams(1.0)) == 1.0
    assert corrected_score(e1, np.array([0.0, 1.0]), -2.0, ScoreParams(7.0)) == 2.0
    q = np.array([0.9, math.sqrt(1 - 0.81)])
    assert corrected_score(q, e1, math.log(0.01), ScoreParams(20.0)) == pytest.approx(18 + 4.60517, abs=1e-5)
    with pytest.raises(ValidationError):
        ScoreParams(0.0)


def test_hand_value():
    b = LossBatch([[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]], [0.0], [0.0])
    loss, *_ = sampled_softmax_loss(b, ScoreParams(1.0))
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_no_negatives():
    rng = np.random.default_rng(0)
    b = LossBatch(unit(rng, 3, 4), unit(rng, 3, 4), np.zeros((0, 4)), np.zeros(3), np.zeros(0))
    loss, dQ, dP, dN = sampled_softmax_loss(b, ScoreParams(5.0))
    assert loss == 0.0 and not dQ.any() and not dP.any() and dN.shape == (0, 4)


def test_matches_oracle_and_masks_ids():
    rng = np.random.default_rng(1)
    for _ in range(5):
        batch = make_batch(rng, ids=True)
        loss, *_ = sampled_softmax_loss(batch, ScoreParams(20.0))
        assert loss == pytest.approx(batch_oracle(batch, 20.0), rel=1e-12)


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        dn = f()
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def test_gradients_finite_differences():
    rng = np.random.default_rng(2)
    params = ScoreParams(3.0)
    for _ in range(3):
        batch = make_batch(rng, ids=True)
        batch.allowed = rng.random((batch.b, batch.k)) < 0.8
        _, dQ, dP, dN = sampled_softmax_loss(batch, params)
        for name, analytic in (("Q", dQ), ("P", dP), ("N", dN)):
            num = _fd(lambda: sampled_softmax_loss(batch, params)[0], getattr(batch, name))
            np.testing.assert_allclose(analytic, num, rtol=1e-6, atol=1e-9)


def test_chunked_equals_reference():
    rng = np.random.default_rng(3)
    batch = make_batch(rng, b=20, k=30, ids=True)
    ref = sampled_softmax_loss(batch, ScoreParams(20.0))
    full = chunked_softmax_backward(batch, ScoreParams(20.0), 20)
    assert full[0] == ref[0]
    for a, b in zip(full[1:], ref[1:]):
        assert np.array_equal(a, b)
    for c in (1, 7):
        got = chunked_softmax_backward(batch, ScoreParams(20.0), c)
        assert abs(got[0] - ref[0]) <= 1e-12
        for a, b in zip(got[1:], ref[1:]):
            assert np.abs(a - b).max() <= 1e-12


def test_chunk_telemetry():
    rng = np.random.default_rng(4)
    batch = make_batch(rng, b=20, k=30)
    for c in (1, 7):
        tel = {}
        chunked_softmax_backward(batch, ScoreParams(20.0), c, tel)
        assert tel["peak_logits"] == c * batch.k
        assert tel["chunks"] == math.ceil(20 / c)
    with pytest.raises(ValidationError):
        chunked_softmax_backward(batch, ScoreParams(20.0), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10), st.integers(1, 13), st.integers(0, 10**6))
def test_chunking_invariance_property(b, k, c, seed):
    rng = np.random.default_rng(seed)
    batch = make_batch(rng, b=b, k=k, d=5, ids=True)
    ref = softmax_loss(batch, ScoreParams(20.0))
    got = softmax_loss(batch, ScoreParams(20.0), c)
    assert abs(got[0] - ref[0]) <= 1e-12
    for a, r in zip(got[1:], ref[1:]):
        assert np.abs(a - r).max(initial=0) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(-30, 30), st.integers(0, 10**6))
def test_uniform_logq_shift_invariance(b, k, shift, seed):
    rng = np.random.default_rng(seed)
    batch = make_batch(rng, b=b, k=k, d=4)
    moved = LossBatch(batch.Q, batch.P, batch.N, batch.logq_pos + shift, batch.logq_neg + shift)
    assert softmax_loss(moved, ScoreParams(20.0))[0] == pytest.approx(softmax_loss(batch, ScoreParams(20.0))[0],
                                                                      rel=1e-9, abs=1e-12)


def test_batch_validation():
    rng = np.random.default_rng(5)
    with pytest.raises(ValidationError):
        LossBatch(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), [], [])
    with pytest.raises(ValidationError):
        LossBatch(unit(rng, 2, 3), unit(rng, 3, 3), unit(rng, 1, 3), [0, 0], [0])
    with pytest.raises(ValidationError):
        LossBatch(unit(rng, 2, 3), unit(rng, 2, 3), unit(rng, 1, 3), [0, 0], [0], allowed=np.ones((2, 2), bool))
    bad = LossBatch(unit(rng, 1, 3), unit(rng, 1, 3), unit(rng, 1, 3), [np.nan], [0])
    with pytest.raises(NumericError):
        sampled_softmax_loss(bad, ScoreParams())


def test_pair_loss_sources():
    rng = np.random.default_rng(6)
    a, b = make_batch(rng), make_batch(rng)
    params = ScoreParams(20.0)
    la = sampled_softmax_loss(a, params)[0]
    lb = sampled_softmax_loss(b, params)[0]
    assert pair_loss([PairSource("x", 1.0, [a])], params)[0] == la
    assert pair_loss([PairSource("x", 1.0, [a]), PairSource("y", 1.0, [a])], params)[0] == pytest.approx(2 * la)
    loss, grads = pair_loss([PairSource("x", 0.3, [a]), PairSource("y", 0.7, [b])], params)
    assert loss == pytest.approx(0.3 * la + 0.7 * lb, rel=1e-14)
    np.testing.assert_allclose(grads[0][0][0], 0.3 * sampled_softmax_loss(a, params)[1])
    with pytest.raises(ValidationError):
        pair_loss([PairSource("x", -1.0, [a])], params)


def test_feature_loss():
    rng = np.random.default_rng(7)
    params = ScoreParams(20.0)
    batch = make_batch(rng)
    batch.query_ids = np.arange(batch.b)
    one, _ = feature_loss({"visual": batch}, params)
    assert one == pytest.approx(sampled_softmax_loss(batch, params)[0], rel=1e-14)
    two, _ = feature_loss({"visual": batch, "title": batch}, params)
    assert two == pytest.approx(one, rel=1e-14)
    # node 0 has two feature types, nodes 1 and 2 one each: weights 1/6, 1/6, 1/3, 1/3
    g1 = make_batch(rng, b=2)
    g1.query_ids = np.array([0, 1])
    g2 = make_batch(rng, b=2)
    g2.query_ids = np.array([0, 2])
    got, _ = feature_loss({"a": g1, "b": g2}, params)
    want = (batch_oracle(g1, 20.0, [1 / 6, 1 / 3]) + batch_oracle(g2, 20.0, [1 / 6, 1 / 3]))
    assert got == pytest.approx(want, rel=1e-12)


def test_next_action_loss():
    rng = np.random.default_rng(8)
    params = ScoreParams(20.0)
    U1 = unit(rng, 1, 1, 4)
    assert next_action_loss(U1, U1, np.ones((1, 1), bool), unit(rng, 3, 4), np.zeros((1, 1)), np.zeros(3),
                            params)[0] == 0.0
    U2, P2 = unit(rng, 1, 2, 4), unit(rng, 1, 2, 4)
    assert next_action_loss(U2, P2, np.ones((1, 2), bool), np.zeros((0, 4)), np.zeros((1, 2)), np.zeros(0),
                            params)[0] == 0.0
    U, Pq, N = unit(rng, 2, 3, 4), unit(rng, 2, 3, 4), unit(rng, 5, 4)
    lq, lqn = np.log(rng.uniform(0.01, 0.1, (2, 3))), np.log(rng.uniform(0.01, 0.1, 5))
    mask = np.array([[True, True, True], [True, True, False]])
    loss, g = next_action_loss(U, Pq, mask, N, lq, lqn, params)
    terms = [(0, 0), (0, 1), (1, 0)]
    want = sum(row_loss_oracle(U[b, t], Pq[b, t + 1], N, lq[b, t + 1], lqn, 20.0) for b, t in terms) / 3
    assert loss == pytest.approx(want, rel=1e-12)
    assert g.terms == 3 and not g.dU[1, 1].any() and not g.dU[0, 2].any()


def test_future_action_loss():
    rng = np.random.default_rng(9)
    params = ScoreParams(20.0)
    U, F, N = unit(rng, 2, 3, 4), unit(rng, 2, 4), unit(rng, 5, 4)
    lqf, lqn = np.log([0.05, 0.02]), np.log(rng.uniform(0.01, 0.1, 5))
    mask = np.array([[True, True, True], [True, False, False]])
    loss, g = future_action_loss(U, mask, F, N, lqf, lqn, params)
    terms = [(0, 0), (0, 1), (0, 2), (1, 0)]
    want = sum(row_loss_oracle(U[b, t], F[b], N, lqf[b], lqn, 20.0) for b, t in terms) / 4
    assert loss == pytest.approx(want, rel=1e-12)
    # t_max = 1 is one plain softmax term
    one, _ = future_action_loss(U[:1, :1], np.ones((1, 1), bool), F[:1], N, lqf[:1], lqn, params)
    assert one == pytest.approx(row_loss_oracle(U[0, 0], F[0], N, lqf[0], lqn, 20.0), rel=1e-12)
    # permuting steps within a sequence leaves the total unchanged
    perm = U[:, [2, 0, 1]]
    full = np.ones((2, 3), bool)
    assert future_action_loss(perm, full, F, N, lqf, lqn, params)[0] == pytest.approx(
        future_action_loss(U, full, F, N, lqf, lqn, params)[0], rel=1e-12)


def test_task_weights_and_total():
    comps = {"pair": 1.0, "feat": 2.0, "next": 3.0, "fut": 4.0}
    assert total_loss(comps, TaskWeights(1, 0, 0)) == 1.0
    assert total_loss(comps, TaskWeights(0, 0, 1)) == 7.0
    assert total_loss(comps, TaskWeights(0.5, 0.25, 0.25)) == pytest.approx(0.5 + 0.5 + 1.75)
    with pytest.raises(ValidationError):
        TaskWeights(0, 0, 0)
    with pytest.raises(ValidationError):
        TaskWeights(-1, 1, 1)
    assert TaskWeights(source_weights={"a": 2.0}).source_weight("a") == 2.0
    assert TaskWeights().source_weight("b") == 1.0
