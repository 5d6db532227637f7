import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sumrec.metrics import (
    ScoredGroup,
    UndefinedMetric,
    evaluate,
    group_auc,
    group_by_user,
    log_loss,
    ndcg_at_k,
)
from sumrec.ranker import loss


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def exhaustive_ndcg(scores, labels, k):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])  # sorted() is stable
    dcg = sum(labels[i] / math.log2(r + 2) for r, i in enumerate(order[:k]))
    best = max(
        sum(labels[i] / math.log2(r + 2) for r, i in enumerate(perm[:k]))
        for perm in itertools.permutations(range(len(scores)))
    )
    return dcg / best


def random_group(rng, n, uid="u"):
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 1, 0
    scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.normal(size=n)
    return ScoredGroup(uid, scores, labels)


def test_gauc_examples():
    assert group_auc([ScoredGroup("a", [0.9, 0.1], [1, 0])]) == 1.0
    groups = [ScoredGroup("a", [0.9, 0.1], [1, 0]), ScoredGroup("b", [0.1, 0.9], [1, 0])]
    assert group_auc(groups) == 0.5


def test_gauc_skips_single_class_users():
    groups = [ScoredGroup("a", [0.9, 0.1], [1, 0]), ScoredGroup("b", [0.3, 0.2], [0, 0])]
    assert group_auc(groups) == 1.0
    with pytest.raises(UndefinedMetric):
        group_auc([ScoredGroup("b", [0.3], [1])])


def test_gauc_matches_pairwise_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = random_group(rng, 20)
        assert group_auc([g]) == pairwise_auc(list(g.scores), list(g.labels))


def test_ndcg_closed_forms():
    assert ndcg_at_k([ScoredGroup("a", [0.9, 0.5, 0.1], [1, 0, 0])], 3) == 1.0
    assert ndcg_at_k([ScoredGroup("a", [0.9, 0.5, 0.1], [0, 1, 0])], 3) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k([ScoredGroup("a", [0.9, 0.5, 0.4, 0.1], [0, 0, 0, 1])], 3) == 0.0


def test_ndcg_ties_keep_input_order():
    assert ndcg_at_k([ScoredGroup("a", [0.5, 0.5], [1, 0])], 1) == 1.0
    assert ndcg_at_k([ScoredGroup("a", [0.5, 0.5], [0, 1])], 1) == 0.0


def test_ndcg_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        g = random_group(rng, 6)
        expected = exhaustive_ndcg(list(g.scores), list(g.labels), 3)
        assert ndcg_at_k([g], 3) == pytest.approx(expected, abs=1e-12)


def test_ndcg_undefined_without_positives():
    with pytest.raises(UndefinedMetric):
        ndcg_at_k([ScoredGroup("a", [0.1, 0.2], [0, 0])])


def test_log_loss_examples():
    assert log_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))
    assert log_loss([1.0, 0.0], [1, 0]) <= 1e-6
    with pytest.raises(UndefinedMetric):
        log_loss([], [])
    p, y = [0.2, 0.7, 0.9], [0, 1, 0]
    assert log_loss(p, y) == loss(p, y, lam=0.0)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.sampled_from(["exp", "cube", "affine"]))
def test_rank_metrics_invariant_under_monotone_transform(seed, kind):
    rng = np.random.default_rng(seed)
    groups = [random_group(rng, 8, str(i)) for i in range(5)]
    f = {"exp": np.exp, "cube": lambda s: s ** 3, "affine": lambda s: 3 * s - 7}[kind]
    moved = [ScoredGroup(g.user_id, f(g.scores), g.labels) for g in groups]
    assert group_auc(moved) == pytest.approx(group_auc(groups), abs=1e-12)
    assert ndcg_at_k(moved) == pytest.approx(ndcg_at_k(groups), abs=1e-12)
    assert 0 <= group_auc(groups) <= 1 and 0 <= ndcg_at_k(groups) <= 1


def test_random_labels_give_half():
    rng = np.random.default_rng(2)
    groups = [ScoredGroup(str(i), rng.random(5), [1, 0, 0, 0, 0]) for i in range(1000)]
    assert abs(group_auc(groups) - 0.5) < 0.05


def test_evaluate_groups_by_user():
    report = evaluate(["a", "a", "b", "b"], [0.9, 0.1, 0.2, 0.8], [1, 0, 1, 0])
    assert report.gauc == 0.5 and report.n_users == 2 and report.n_instances == 4
    assert [g.user_id for g in group_by_user(["b", "a", "b"], [1, 2, 3], [0, 1, 1])] == ["b", "a"]
    assert "gAUC" in report.table()
