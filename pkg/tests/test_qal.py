from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conquer import tensor as T
from conquer.qal import (PooledQueryFeature, QueryAwareLearning, TrilinearWeights, assemble_qal, mask_similarity,
                         q2v_attend, similarity_matrix, v2q_attend)


def weights(w1, w2, w3):
    return SimpleNamespace(w1=T.tensor(w1), w2=T.tensor(w2), w3=T.tensor(w3))


def test_similarity_zero_weights(rng, f64):
    a = similarity_matrix(T.tensor(rng.normal(size=(1, 3, 4))), T.tensor(rng.normal(size=(1, 5, 4))),
                          weights(np.zeros(4), np.zeros(4), np.zeros(4)))
    assert a.shape == (1, 3, 5) and not a.data.any()


def test_similarity_hand_value(f64):
    a = similarity_matrix(T.tensor([[[1.0, 0.0]]]), T.tensor([[[0.0, 1.0]]]),
                          weights([1.0, 1.0], [2.0, 2.0], [5.0, 5.0]))
    assert a.data[0, 0, 0] == pytest.approx(3.0)


def test_similarity_matches_loop(rng, f64):
    g, p = rng.normal(size=(2, 4, 3)), rng.normal(size=(1, 5, 3))
    w = [rng.normal(size=3) for _ in range(3)]
    a = similarity_matrix(T.tensor(g), T.tensor(p), weights(*w)).data
    for b in range(2):
        for i in range(4):
            for j in range(5):
                ref = w[0] @ g[b, i] + w[1] @ p[0, j] + w[2] @ (g[b, i] * p[0, j])
                assert a[b, i, j] == pytest.approx(ref, abs=1e-12)


def test_v2q_examples(rng, f64):
    phi = rng.normal(size=(1, 2, 3))
    eta = v2q_attend(T.tensor(np.zeros((1, 1, 2))), T.tensor(phi)).data
    np.testing.assert_allclose(eta[0, 0], phi[0].mean(0))
    a = np.array([[[-1e6, 1e6]]])
    np.testing.assert_allclose(v2q_attend(T.tensor(a), T.tensor(phi)).data[0, 0], phi[0, 1])
    a = rng.normal(size=(1, 3, 2))
    ref = np.stack([(np.exp(r) / np.exp(r).sum()) @ phi[0] for r in a[0]])
    np.testing.assert_allclose(v2q_attend(T.tensor(a), T.tensor(phi)).data[0], ref, atol=1e-12)


def test_q2v_examples(rng, f64):
    gamma = rng.normal(size=(1, 1, 3))
    qv = q2v_attend(T.tensor(rng.normal(size=(1, 1, 4))), T.tensor(gamma)).data
    np.testing.assert_allclose(qv[0, 0], gamma[0, 0])
    gamma = rng.normal(size=(1, 2, 3))
    a = np.array([[[1e6, 0.0], [-1e6, -1e6]]])
    np.testing.assert_allclose(q2v_attend(T.tensor(a), T.tensor(gamma)).data[0, 0], gamma[0, 0])
    gamma, a = rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 3, 2))
    b = a[0].max(axis=1)
    p = np.exp(b) / np.exp(b).sum()
    np.testing.assert_allclose(q2v_attend(T.tensor(a), T.tensor(gamma)).data[0, 0], p @ gamma[0], atol=1e-12)


def test_assemble_layout(f64):
    g, e, q = np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])
    out = assemble_qal(T.tensor(g[None, None]), T.tensor(e[None, None]), T.tensor(q[None, None])).data[0, 0]
    np.testing.assert_array_equal(out, [1, 2, 3, 4, 3, 8, 5, 12])
    out = assemble_qal(T.tensor(np.zeros((1, 1, 2))), T.tensor(e[None, None]), T.tensor(q[None, None])).data[0, 0]
    np.testing.assert_array_equal(out, [0, 0, 3, 4, 0, 0, 0, 0])


def qal_inputs(rng, B=2, Lv=5, Lq=4, H=6):
    gamma = rng.normal(size=(B, Lv, H))
    phi = rng.normal(size=(1, Lq, H))
    cm = np.ones((B, Lv), bool)
    cm[0, 3:] = False
    tm = np.ones((1, Lq), bool)
    tm[0, 3:] = False
    return gamma, phi, cm, tm


def test_qal_width_masking_and_convexity(rng, f64):
    gamma, phi, cm, tm = qal_inputs(rng)
    qal = QueryAwareLearning(6, rng)
    out = qal(T.tensor(gamma), T.tensor(phi), cm, tm).data
    assert out.shape == (2, 5, 24)
    assert not out[0, 3:].any()
    eta = out[..., 6:12]
    valid = phi[0, :3]
    # eta lies in the componentwise hull of the unmasked tokens
    assert (eta[cm] >= valid.min(0) - 1e-9).all() and (eta[cm] <= valid.max(0) + 1e-9).all()


def test_qal_ignores_masked_positions(rng, f64):
    gamma, phi, cm, tm = qal_inputs(rng)
    qal = QueryAwareLearning(6, rng)
    ref = qal(T.tensor(gamma), T.tensor(phi), cm, tm).data
    gamma2, phi2 = gamma.copy(), phi.copy()
    gamma2[0, 3:] = rng.normal(size=(2, 6)) * 10
    phi2[0, 3:] = rng.normal(size=(1, 6)) * 10
    out = qal(T.tensor(gamma2), T.tensor(phi2), cm, tm).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_qal_errors(rng):
    gamma, phi, cm, tm = qal_inputs(rng)
    qal = QueryAwareLearning(6, rng)
    with pytest.raises(ValueError):
        qal(T.tensor(gamma), T.tensor(phi), np.zeros_like(cm), tm)
    with pytest.raises(ValueError):
        qal(T.tensor(gamma), T.tensor(phi), cm, np.zeros_like(tm))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_q_v_identical_across_clips(seed):
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        gamma, phi, cm, tm = qal_inputs(rng)
        w = TrilinearWeights(6, rng)
        a = mask_similarity(similarity_matrix(T.tensor(gamma), T.tensor(phi), w), cm, tm)
        qv = q2v_attend(a, T.tensor(gamma)).data
        out = assemble_qal(T.tensor(gamma), v2q_attend(a, T.tensor(phi)), T.tensor(qv), cm).data
        for b in range(2):
            rows = out[b, cm[b], 18:] / gamma[b, cm[b]]
            np.testing.assert_allclose(rows, np.broadcast_to(qv[b], rows.shape), rtol=1e-9)


def test_pooled_ablation_shape(rng, f64):
    gamma, phi, cm, tm = qal_inputs(rng)
    out = PooledQueryFeature(6, rng)(T.tensor(gamma), T.tensor(phi), cm, tm).data
    assert out.shape == gamma.shape and not out[0, 3:].any()
