"""Numeric kernel tests: loop oracles, invariants and hand-derived gradients
checked against central finite differences."""

import numpy as np
import pytest

from crossmodal import kernels as K

from conftest import central_difference, rel_error, seeded_rng


# ---------------------------------------------------------------------------
# cosine similarity
# ---------------------------------------------------------------------------

def test_cosine_identical():
    v = np.array([1.0, 0, 0, 0])
    assert K.cosine_similarity(v, v) == pytest.approx(1.0)


def test_cosine_orthogonal():
    assert K.cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)


def test_cosine_hand_value():
    # 32 / (sqrt(14) * sqrt(77))
    assert K.cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(
        0.974631846, abs=1e-9)


def test_cosine_zero_norm_flags_zero(caplog):
    with caplog.at_level("WARNING"):
        assert K.cosine_similarity([0, 0], [1, 2]) == 0.0
    assert any("zero-norm" in r.message for r in caplog.records)


@pytest.mark.parametrize("k", [0.5, 3.0])
def test_cosine_scale_invariance(k, rng):
    a = rng.uniform(-1, 1, 7)
    b = rng.uniform(-1, 1, 7)
    assert abs(K.cosine_similarity(k * a, b) - K.cosine_similarity(a, b)) < 1e-12


def test_cosine_symmetry(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    assert K.cosine_similarity(a, b) == pytest.approx(K.cosine_similarity(b, a))
    assert -1.0 <= K.cosine_similarity(a, b) <= 1.0


# ---------------------------------------------------------------------------
# pairwise similarity
# ---------------------------------------------------------------------------

def test_pairwise_identity():
    eye = np.eye(3)
    assert np.allclose(K.pairwise_similarity(eye, eye), np.eye(3))


def test_pairwise_matches_loop_oracle(rng):
    V = rng.normal(size=(4, 6))
    S = rng.normal(size=(4, 6))
    got = K.pairwise_similarity(V, S)
    for i in range(4):
        for j in range(4):
            assert got[i, j] == pytest.approx(K.cosine_similarity(V[i], S[j]),
                                              abs=1e-12)


def test_pairwise_scale_invariance(rng):
    V = rng.normal(size=(3, 5))
    S = rng.normal(size=(3, 5))
    assert np.allclose(K.pairwise_similarity(2 * V, S),
                       K.pairwise_similarity(V, S), atol=1e-12)


def test_pairwise_dim_mismatch():
    with pytest.raises(ValueError):
        K.pairwise_similarity(np.ones((2, 3)), np.ones((2, 4)))


# ---------------------------------------------------------------------------
# region-word similarity
# ---------------------------------------------------------------------------

def test_region_word_identity():
    eye = np.eye(2)
    assert np.allclose(K.region_word_similarity(eye, eye), np.eye(2))


def test_region_word_zero_row(rng):
    w = rng.normal(size=(3, 4))
    w[1] = 0
    m = K.region_word_similarity(w, rng.normal(size=(5, 4)))
    assert np.all(m[1] == 0)


def test_region_word_loop_oracle(rng):
    w = rng.normal(size=(3, 2))
    r = rng.normal(size=(4, 2))
    m = K.region_word_similarity(w, r)
    for i in range(3):
        for j in range(4):
            assert abs(m[i, j] - float(np.dot(w[i], r[j]))) < 1e-12


# ---------------------------------------------------------------------------
# normalize over words
# ---------------------------------------------------------------------------

def test_normalize_constant_rows():
    m = np.ones((5, 3))
    mask = np.array([True, True, True, False, False])
    out = K.normalize_over_words(m, mask)
    assert np.allclose(out[:3], 1 / 3)
    assert np.all(out[3:] == 0)


def test_normalize_single_word():
    m = seeded_rng(0).normal(size=(4, 3))
    mask = np.array([False, True, False, False])
    out = K.normalize_over_words(m, mask)
    assert np.allclose(out[1], 1.0)


def test_normalize_matches_exp_oracle(rng):
    m = rng.normal(size=(4, 3)) * 3
    mask = np.array([True, True, False, True])
    out = K.normalize_over_words(m, mask)
    for j in range(3):
        col = m[mask, j]
        e = np.exp(col - col.max())
        expect = e / e.sum()
        assert np.allclose(out[mask, j], expect, atol=1e-10)
        assert out[:, j].sum() == pytest.approx(1.0, abs=1e-6)


def test_normalize_all_masked_rejected():
    with pytest.raises(ValueError):
        K.normalize_over_words(np.ones((2, 2)), np.array([False, False]))


# ---------------------------------------------------------------------------
# attention context
# ---------------------------------------------------------------------------

def test_attention_context_uniform_gives_mean(rng):
    r = rng.normal(size=(4, 5))
    m_norm = np.full((3, 4), 0.25)
    mask = np.ones(3, bool)
    res = K.attention_context(m_norm, r, 1.0, mask)
    assert np.allclose(res.context, r.mean(axis=0))
    assert np.allclose(res.attention.sum(axis=1), 1.0, atol=1e-6)


def test_attention_context_sharp_gamma_argmax(rng):
    # unique max per row with a clear margin so gamma1=500 saturates
    m_norm = rng.uniform(0, 0.5, size=(3, 4))
    for i in range(3):
        m_norm[i, rng.integers(4)] += 0.4
    r = rng.normal(size=(4, 5))
    mask = np.ones(3, bool)
    res = K.attention_context(m_norm, r, 500.0, mask)
    for i in range(3):
        assert np.allclose(res.context[i], r[m_norm[i].argmax()], atol=1e-3)


def test_attention_context_loop_oracle(rng):
    m_norm = rng.uniform(0, 1, size=(4, 3))
    r = rng.normal(size=(3, 6))
    mask = np.array([True, False, True, True])
    g1 = 2.5
    res = K.attention_context(m_norm, r, g1, mask)
    for i in range(4):
        if not mask[i]:
            assert np.all(res.attention[i] == 0)
            continue
        e = np.exp(g1 * m_norm[i])
        alpha = e / e.sum()
        c = sum(alpha[j] * r[j] for j in range(3))
        assert np.allclose(res.attention[i], alpha, atol=1e-10)
        assert np.allclose(res.context[i], c, atol=1e-10)


def test_attention_permutation_equivariance(rng):
    w = rng.normal(size=(4, 5))
    r = rng.normal(size=(6, 5))
    mask = np.ones(4, bool)
    perm = seeded_rng(7).permutation(6)
    res = K.word_region_attention(w, r, 1.5, mask)
    res_p = K.word_region_attention(w, r[perm], 1.5, mask)
    assert np.allclose(res_p.attention, res.attention[:, perm], atol=1e-10)
    s = K.attention_matching_score(res.context, w, 2.0, mask)
    s_p = K.attention_matching_score(res_p.context, w, 2.0, mask)
    assert abs(s - s_p) < 1e-10


# ---------------------------------------------------------------------------
# attention matching score
# ---------------------------------------------------------------------------

def test_score_single_identical_word():
    c = np.array([[1.0, 2.0, 3.0]])
    assert K.attention_matching_score(c, c.copy(), 5.0, np.array([True])) == (
        pytest.approx(1.0))


def test_score_equal_cosines_closed_form(rng):
    # k valid words with identical per-word cosine v: S = v + log(k)/gamma2
    base = rng.normal(size=4)
    c = np.stack([base] * 3)
    w = np.stack([2 * base] * 3)
    g2 = 3.0
    got = K.attention_matching_score(c, w, g2, np.ones(3, bool))
    assert got == pytest.approx(1.0 + np.log(3) / g2, abs=1e-10)


def test_score_matches_naive_high_precision(rng):
    c = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 4))
    mask = np.array([True, True, False, True, True])
    g2 = 4.0
    naive = np.log(sum(np.exp(g2 * K.cosine_similarity(c[i], w[i]))
                       for i in range(5) if mask[i])) / g2
    assert K.attention_matching_score(c, w, g2, mask) == pytest.approx(
        naive, abs=1e-9)


def test_score_stable_at_extreme_cosines():
    c = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 1e-8]])
    w = np.array([[2.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    got = K.attention_matching_score(c, w, 10.0, np.ones(3, bool))
    assert np.isfinite(got)
    import mpmath
    sims = [K.cosine_similarity(c[i], w[i]) for i in range(3)]
    ref = float(mpmath.log(sum(mpmath.exp(10 * s) for s in sims)) / 10)
    assert got == pytest.approx(ref, abs=1e-8)


def test_score_empty_valid_set_rejected():
    with pytest.raises(ValueError):
        K.attention_matching_score(np.ones((2, 2)), np.ones((2, 2)), 1.0,
                                   np.zeros(2, bool))


# ---------------------------------------------------------------------------
# hand-derived gradients vs central finite differences
# ---------------------------------------------------------------------------

TOL = 1e-4


def test_grad_cosine(rng):
    a = rng.uniform(-1, 1, 6)
    b = rng.uniform(-1, 1, 6)
    da, db = K.cosine_similarity_grad(a, b)
    fd_a = central_difference(lambda x: K.cosine_similarity(x, b), a)
    fd_b = central_difference(lambda x: K.cosine_similarity(a, x), b)
    assert rel_error(da, fd_a) < TOL
    assert rel_error(db, fd_b) < TOL


def test_grad_pairwise(rng):
    V = rng.uniform(-1, 1, (3, 4))
    S = rng.uniform(-1, 1, (3, 4))
    G = rng.normal(size=(3, 3))
    dV, dS = K.pairwise_similarity_grad(V, S, G)
    fd_V = central_difference(lambda x: (G * K.pairwise_similarity(x, S)).sum(), V)
    fd_S = central_difference(lambda x: (G * K.pairwise_similarity(V, x)).sum(), S)
    assert rel_error(dV, fd_V) < TOL
    assert rel_error(dS, fd_S) < TOL


def test_grad_region_word(rng):
    w = rng.uniform(-1, 1, (3, 4))
    r = rng.uniform(-1, 1, (5, 4))
    G = rng.normal(size=(3, 5))
    dw, dr = K.region_word_similarity_grad(w, r, G)
    assert rel_error(dw, central_difference(
        lambda x: (G * K.region_word_similarity(x, r)).sum(), w)) < TOL
    assert rel_error(dr, central_difference(
        lambda x: (G * K.region_word_similarity(w, x)).sum(), r)) < TOL


def test_grad_normalize_over_words(rng):
    m = rng.uniform(-1, 1, (4, 3))
    mask = np.array([True, True, False, True])
    G = rng.normal(size=(4, 3))
    dm = K.normalize_over_words_grad(m, mask, G)
    fd = central_difference(lambda x: (G * K.normalize_over_words(x, mask)).sum(), m)
    assert rel_error(dm, fd) < TOL


def test_grad_attention_context(rng):
    m_norm = rng.uniform(0, 1, (3, 4))
    r = rng.uniform(-1, 1, (4, 5))
    mask = np.array([True, False, True])
    G = rng.normal(size=(3, 5))
    dm, dr = K.attention_context_grad(m_norm, r, 1.7, mask, G)
    fd_m = central_difference(
        lambda x: (G * K.attention_context(x, r, 1.7, mask).context).sum(), m_norm)
    fd_r = central_difference(
        lambda x: (G * K.attention_context(m_norm, x, 1.7, mask).context).sum(), r)
    assert rel_error(dm, fd_m) < TOL
    assert rel_error(dr, fd_r) < TOL


def test_grad_attention_matching_score(rng):
    c = rng.uniform(-1, 1, (4, 5))
    w = rng.uniform(-1, 1, (4, 5))
    mask = np.array([True, True, True, False])
    dc, dw = K.attention_matching_score_grad(c, w, 3.0, mask)
    fd_c = central_difference(
        lambda x: K.attention_matching_score(x, w, 3.0, mask), c)
    fd_w = central_difference(
        lambda x: K.attention_matching_score(c, x, 3.0, mask), w)
    assert rel_error(dc, fd_c) < TOL
    assert rel_error(dw, fd_w) < TOL


# ---------------------------------------------------------------------------
# config and container types
# ---------------------------------------------------------------------------

def test_loss_config_defaults():
    cfg = K.LossConfig()
    assert (cfg.gamma, cfg.gamma1, cfg.gamma2) == (2.0, 1.0, 1.0)
    assert (cfg.eta_s, cfg.eta_w) == (0.5, 0.5)
    assert (cfg.lambda_cem, cfg.lambda_tm) == (2.0, 1.0)


@pytest.mark.parametrize("bad", [
    dict(gamma=0), dict(gamma1=-1), dict(eta_s=-0.1), dict(lambda_cem=-1)])
def test_loss_config_validation(bad):
    with pytest.raises(ValueError):
        K.LossConfig(**bad)


def test_feature_matrix_validation():
    with pytest.raises(ValueError):
        K.FeatureMatrix(np.array([[np.inf, 1.0]]))
    fm = K.FeatureMatrix(np.ones((3, 2)))
    assert (fm.rows, fm.dim) == (3, 2)
