import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddap_sim.model import (
    DivergenceError,
    LossOptions,
    ModelParams,
    backward,
    ce_batch,
    forward_features,
    forward_logits,
    init_params,
    loss_ce,
    loss_cpcl,
    loss_dpa,
    loss_total,
    sgd_step,
)
from feddap_sim.prototypes import PrototypeTable

from conftest import central_diff, py_cosine, random_table


def oracle_features(params, x):
    """Independent forward pass written with explicit loops."""
    h = list(map(float, x))
    for li, (W, b) in enumerate(params.layers):
        out = [sum(W[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(W.shape[0])]
        if li < len(params.layers) - 1:
            out = [math.tanh(v) for v in out]
        h = out
    return np.array(h)


def oracle_ce(s, y):
    e = [math.exp(v) for v in s]
    return -math.log(e[y] / sum(e))


def oracle_cpcl(cos_pos, cos_neg, tau):
    num = sum(math.exp(c / tau) for c in cos_pos)
    den = num + sum(math.exp(c / tau) for c in cos_neg)
    return -math.log(num / den)


def small_instance(seed, I=4, C=3, D=2, B=5, raw=6, hidden=(5,)):
    rs = np.random.default_rng(seed)
    p = init_params((raw, *hidden, I), C, seed)
    p = p.map(lambda a: a + 0.3 * rs.standard_normal(a.shape))
    X = rs.standard_normal((B, raw))
    y = rs.integers(0, C, B)
    table = random_table(rs, D, C, I, p_present=0.85)
    return p, X, y, table, int(rs.integers(0, D))


# ---- forward


def test_zero_network_gives_zero_features():
    p = init_params((3, 4, 2), 3, seed=0).map(np.zeros_like)
    np.testing.assert_array_equal(forward_features(p, [1.0, -2.0, 5.0]), np.zeros(2))
    np.testing.assert_array_equal(forward_logits(p, np.zeros(2)), np.zeros(3))


def test_identity_layer():
    p = ModelParams([(np.eye(3), np.zeros(3))], np.eye(3), np.zeros(3))
    x = np.array([0.5, -1.5, 2.0])
    np.testing.assert_array_equal(forward_features(p, x), x)
    np.testing.assert_array_equal(forward_logits(p, x), x)


def test_zero_classifier_returns_bias():
    p = init_params((3, 2), 3, seed=0)
    p = ModelParams(p.layers, np.zeros((3, 2)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(forward_logits(p, [4.0, 5.0]), [1.0, 2.0, 3.0])


def test_forward_matches_loop_oracle(rs):
    p = init_params((6, 7, 5, 4), 3, seed=3)
    for _ in range(5):
        x = rs.standard_normal(6)
        z = forward_features(p, x)
        np.testing.assert_allclose(z, oracle_features(p, x), atol=1e-12, rtol=0)
        s_oracle = [sum(p.cls_w[c, i] * z[i] for i in range(4)) + p.cls_b[c] for c in range(3)]
        np.testing.assert_allclose(forward_logits(p, z), s_oracle, atol=1e-12, rtol=0)


def test_batch_and_single_forward_agree(rs):
    p = init_params((6, 5, 4), 3, seed=1)
    X = rs.standard_normal((7, 6))
    Z = forward_features(p, X)
    for i in range(7):
        np.testing.assert_allclose(Z[i], forward_features(p, X[i]), atol=1e-14)


def test_params_shape_checks():
    with pytest.raises(ValueError):
        ModelParams([(np.zeros((3, 2)), np.zeros(3)), (np.zeros((2, 4)), np.zeros(2))], np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        ModelParams([(np.zeros((3, 2)), np.zeros(3))], np.zeros((2, 4)), np.zeros(2))


# ---- cross-entropy


def test_ce_uniform_logits():
    assert loss_ce(np.zeros(7), 3) == pytest.approx(math.log(7), abs=1e-14)


def test_ce_margin_limit():
    values = [loss_ce([m, 0.0, 0.0], 0) for m in (1, 5, 10, 20, 50)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert 0 <= values[-1] < 1e-20


def test_ce_oracle():
    assert abs(loss_ce([1.0, 2.0, 3.0], 0) - oracle_ce([1, 2, 3], 0)) < 1e-12


def test_ce_batch_is_mean(rs):
    S = rs.standard_normal((6, 4)) * 3
    y = rs.integers(0, 4, 6)
    loss, _ = ce_batch(S, y)
    assert abs(loss - np.mean([oracle_ce(S[i], y[i]) for i in range(6)])) < 1e-12


# ---- alignment


def one_domain_table(protos):
    protos = np.asarray(protos, dtype=float)
    return PrototypeTable(protos[None], np.ones((1, protos.shape[0]), bool))


def test_dpa_perfect_alignment():
    P = np.array([[1.0, 2.0], [-1.0, 0.5]])
    batch = [(2 * P[0], 0), (P[1] * 0.5, 1), (P[0], 0)]
    assert abs(loss_dpa(batch, one_domain_table(P), 0)) < 1e-15


def test_dpa_orthogonal_single_class():
    table = one_domain_table([[1.0, 0.0], [0.0, 1.0]])
    assert loss_dpa([(np.array([0.0, 3.0]), 0)], table, 0) == pytest.approx(1.0, abs=1e-15)


def test_dpa_two_class_oracle():
    P = [[1.0, 0.0, 1.0], [0.0, 2.0, -1.0], [5.0, 5.0, 5.0]]
    batch = [(np.array([1.0, 1.0, 0.0]), 0), (np.array([3.0, -1.0, 2.0]), 0), (np.array([0.5, 0.2, 0.1]), 1)]
    zbar0 = [(1 + 3) / 2, (1 - 1) / 2, (0 + 2) / 2]
    expected = ((1 - py_cosine(zbar0, P[0])) + (1 - py_cosine([0.5, 0.2, 0.1], P[1]))) / 2
    assert abs(loss_dpa(batch, one_domain_table(P), 0) - expected) < 1e-12
    unnorm = loss_dpa(batch, one_domain_table(P), 0, LossOptions(dpa_normalize=False))
    assert abs(unnorm - 2 * expected) < 1e-12
    per_sample = loss_dpa(batch, one_domain_table(P), 0, LossOptions(dpa_per_sample=True))
    terms = [1 - py_cosine(z, P[c]) for z, c in batch]
    assert abs(per_sample - sum(terms) / 3) < 1e-12


def test_dpa_skips_absent_cells():
    P = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    table = PrototypeTable(P, np.array([[True, False]]))
    # class 1 has no prototype, so only class 0 counts
    batch = [(np.array([0.0, 1.0]), 0), (np.array([1.0, 0.0]), 1)]
    assert loss_dpa(batch, table, 0) == pytest.approx(1.0)
    assert loss_dpa([(np.array([1.0, 0.0]), 1)], table, 0) == 0.0


# ---- contrastive


def two_domain_table(own, other, mask_other=None):
    values = np.stack([np.asarray(own, float), np.asarray(other, float)])
    mask = np.ones(values.shape[:2], bool)
    if mask_other is not None:
        mask[1] = mask_other
    return PrototypeTable(values, mask)


def test_cpcl_no_negatives_is_zero():
    table = two_domain_table([[1, 0], [0, 1]], [[0.3, 0.9], [1, 1]], mask_other=[True, False])
    assert loss_cpcl(np.array([1.0, 0.2]), 0, 0, table, 0.07) == pytest.approx(0.0, abs=1e-15)


def test_cpcl_symmetric_pair_is_ln2():
    # z on the bisector of the positive and the negative prototype
    table = two_domain_table([[9, 9], [9, 9]], [[1, 0], [0, 1]])
    assert loss_cpcl(np.array([1.0, 1.0]), 0, 0, table, 0.07) == pytest.approx(math.log(2), abs=1e-12)


def test_cpcl_oracle_two_pos_three_neg():
    # domain 0 is the client's; domains 1 and 2 provide 2 positives (class 0) and 3 negatives
    rs = np.random.default_rng(4)
    values = rs.standard_normal((3, 3, 4))
    mask = np.ones((3, 3), bool)
    mask[2, 2] = False
    table = PrototypeTable(values, mask)
    z = rs.standard_normal(4)
    pos = [py_cosine(z, values[1, 0]), py_cosine(z, values[2, 0])]
    neg = [py_cosine(z, values[1, 1]), py_cosine(z, values[1, 2]), py_cosine(z, values[2, 1])]
    expected = oracle_cpcl(pos, neg, 0.07)
    assert abs(loss_cpcl(z, 0, 0, table, 0.07) - expected) < 1e-10
    # own-domain negatives variant adds domain-0 classes 1 and 2
    neg_own = neg + [py_cosine(z, values[0, 1]), py_cosine(z, values[0, 2])]
    got = loss_cpcl(z, 0, 0, table, 0.07, LossOptions(negatives_include_own_domain=True))
    assert abs(got - oracle_cpcl(pos, neg_own, 0.07)) < 1e-10


def test_cpcl_without_positives_is_flagged():
    table = PrototypeTable(np.ones((1, 2, 3)), np.ones((1, 2), bool))  # single domain
    bd = loss_total(init_params((3, 3), 2, 0), np.ones((2, 3)), np.array([0, 1]), table, 0, 1.0, 1.0, 0.07)
    assert bd.cpcl == 0.0 and bd.cpcl_flagged == 2


def test_cpcl_rejects_bad_tau():
    table = two_domain_table([[1, 0]], [[0, 1]])
    with pytest.raises(ValueError):
        loss_cpcl(np.ones(2), 0, 0, table, 0.0)


# ---- composite objective


def test_total_reduces_to_ce_without_lambdas():
    p, X, y, table, d = small_instance(0)
    bd = loss_total(p, X, y, table, d, 0.0, 0.0, 0.07)
    assert bd.total == bd.ce


def test_empty_table_is_ce_only():
    p, X, y, _, d = small_instance(1)
    empty = PrototypeTable.empty(2, 3, 4)
    bd = loss_total(p, X, y, empty, d, 10.0, 1.0, 0.07)
    assert bd.dpa == 0.0 and bd.cpcl == 0.0 and bd.total == bd.ce and bd.dpa_empty
    bd_none = loss_total(p, X, y, None, d, 10.0, 1.0, 0.07)
    assert bd_none.total == bd.ce


def test_total_matches_independent_terms():
    p, X, y, table, d = small_instance(2)
    Z = [oracle_features(p, x) for x in X]
    S = [forward_logits(p, z) for z in Z]
    ce = np.mean([oracle_ce(s, c) for s, c in zip(S, y)])
    dpa_terms = []
    for c in sorted(set(y.tolist())):
        if table.mask[d, c]:
            zbar = np.mean([z for z, yy in zip(Z, y) if yy == c], axis=0)
            dpa_terms.append(1 - py_cosine(zbar, table.values[d, c]))
    dpa = np.mean(dpa_terms) if dpa_terms else 0.0
    cp = []
    for z, c in zip(Z, y):
        pos = [py_cosine(z, table.values[e, c]) for e in range(2) if e != d and table.mask[e, c]]
        neg = [py_cosine(z, table.values[e, k]) for e in range(2) for k in range(3)
               if e != d and k != c and table.mask[e, k]]
        cp.append(oracle_cpcl(pos, neg, 0.07) if pos else 0.0)
    cpcl = np.mean(cp)
    bd = loss_total(p, X, y, table, d, 10.0, 1.0, 0.07)
    assert abs(bd.ce - ce) < 1e-10 and abs(bd.dpa - dpa) < 1e-10 and abs(bd.cpcl - cpcl) < 1e-10
    assert abs(bd.total - (ce + 10 * dpa + cpcl)) < 1e-10
    assert abs(bd.total - (bd.ce + 10 * bd.dpa + 1.0 * bd.cpcl)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_loss_properties(seed, k):
    p, X, y, table, d = small_instance(seed)
    bd = loss_total(p, X, y, table, d, 1.0, 1.0, 0.1)
    assert bd.ce >= 0 and bd.cpcl >= 0 and 0 <= bd.dpa <= 2
    scaled = loss_total(p, X, y, table.scaled(k), d, 1.0, 1.0, 0.1)
    assert abs(scaled.dpa - bd.dpa) < 1e-10 and abs(scaled.cpcl - bd.cpcl) < 1e-10
    perm = np.random.default_rng(seed).permutation(len(y))
    shuffled = loss_total(p, X[perm], y[perm], table, d, 1.0, 1.0, 0.1)
    assert abs(shuffled.total - bd.total) < 1e-12


# ---- gradients


def fd_check(p, X, y, table, d, lam1, lam2, tau, options=LossOptions(), key="total"):
    _, grads = backward(p, X, y, table, d, lam1, lam2, tau, options)
    worst = 0.0
    for (name, a), g in zip(p.named_arrays(), grads.arrays()):
        num = central_diff(lambda: getattr(loss_total(p, X, y, table, d, lam1, lam2, tau, options), key), a)
        scale = max(np.max(np.abs(num)), np.max(np.abs(g)), 1e-8)
        worst = max(worst, float(np.max(np.abs(num - g)) / scale))
    return worst


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("lams", [(1.0, 0.0), (0.0, 1.0), (10.0, 1.0)])
def test_gradients_match_finite_differences(seed, lams):
    p, X, y, table, d = small_instance(seed)
    assert fd_check(p, X, y, table, d, *lams, 0.07) < 1e-4


@pytest.mark.parametrize("options", [LossOptions(dpa_normalize=False), LossOptions(dpa_per_sample=True),
                                     LossOptions(negatives_include_own_domain=True)])
def test_gradient_variants(options):
    p, X, y, table, d = small_instance(7)
    assert fd_check(p, X, y, table, d, 2.0, 1.5, 0.2, options) < 1e-4


def test_gradient_reduces_to_ce():
    p, X, y, table, d = small_instance(3)
    _, g0 = backward(p, X, y, table, d, 0.0, 0.0, 0.07)
    _, g_ce = backward(p, X, y, None, d, 0.0, 0.0, 0.07)
    for a, b in zip(g0.arrays(), g_ce.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_gradient_vanishes_at_large_margin():
    # linear extractor, logits separate the single sample by a margin of 50
    p = ModelParams([(np.eye(2), np.zeros(2))], np.array([[25.0, 0.0], [-25.0, 0.0]]), np.zeros(2))
    _, g = backward(p, np.array([[1.0, 0.0]]), np.array([0]), None, 0, 0.0, 0.0, 0.07)
    assert np.sqrt(sum(np.sum(a ** 2) for a in g.arrays())) < 1e-6


def test_non_finite_gradient_raises():
    p = init_params((3, 2), 2, 0)
    p = ModelParams(p.layers, np.full((2, 2), np.nan), p.cls_b)
    with pytest.raises(DivergenceError, match="classifier|extractor"):
        backward(p, np.ones((1, 3)), np.array([0]), None, 0, 0.0, 0.0, 0.07)


# ---- optimizer / init


def test_sgd_step():
    p = init_params((3, 4, 2), 3, seed=0)
    zero = p.map(np.zeros_like)
    for a, b in zip(sgd_step(p, zero, 0.5).arrays(), p.arrays()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(sgd_step(p, p, 0.0).arrays(), p.arrays()):
        np.testing.assert_array_equal(a, b)


def test_sgd_on_scalar_quadratic():
    # f(w) = (w - 3)^2, w0 = 1, lr = 0.1: w1 = 1 - 0.1 * 2 * (1 - 3) = 1.4
    p = ModelParams([(np.array([[1.0]]), np.zeros(1))], np.zeros((1, 1)), np.zeros(1))
    g = ModelParams([(np.array([[2 * (1.0 - 3.0)]]), np.zeros(1))], np.zeros((1, 1)), np.zeros(1))
    assert sgd_step(p, g, 0.1).layers[0][0][0, 0] == pytest.approx(1.4, abs=1e-15)


def test_init_is_seeded_and_bounded():
    a = init_params((6, 8, 4), 3, seed=5)
    b = init_params((6, 8, 4), 3, seed=5)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    W0 = a.layers[0][0]
    assert np.all(np.abs(W0) <= np.sqrt(3 / 6))
    assert not np.array_equal(W0, init_params((6, 8, 4), 3, seed=6).layers[0][0])


def test_params_dict_round_trip():
    p = init_params((5, 4, 3), 2, seed=0)
    q = ModelParams.from_dict(p.to_dict())
    for x, y in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(x, y)
