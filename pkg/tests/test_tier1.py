import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echelon import tier1
from echelon.exceptions import DegenerateDataset
from echelon.tier1 import NEVER, lock_threshold, rates_at, select_threshold_for_fpr


def brute_threshold(scores, labels, target, base_fp=0, n_neg=None):
    """Try every distinct score and one value above all of them; keep the smallest feasible."""
    scores = list(map(float, scores))
    n_neg = n_neg if n_neg is not None else base_fp + sum(1 for y in labels if y == 0)
    above = max([NEVER] + [float(np.nextafter(max(scores), 2.0))])
    feasible = []
    for t in sorted(set(scores)) + [above]:
        fp = base_fp + sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
        if fp / n_neg <= target:
            feasible.append(t)
    return min(feasible) if feasible else above


def test_separable_target_zero():
    scores = [0.1, 0.2, 0.8, 0.9]
    labels = [0, 0, 1, 1]
    t = select_threshold_for_fpr(scores, labels, 0.0)
    assert t == 0.8
    assert rates_at(scores, labels, t) == (1.0, 0.0)


def test_adversarial_order_gives_sentinel():
    scores = [0.9, 0.95, 0.1, 0.2]
    labels = [0, 0, 1, 1]
    t = select_threshold_for_fpr(scores, labels, 0.0)
    assert t > max(scores) and t >= NEVER
    assert rates_at(scores, labels, t) == (0.0, 0.0)


def test_unconstrained_target():
    scores = [0.3, 0.7, 0.2, 0.9]
    assert select_threshold_for_fpr(scores, [0, 0, 1, 1], 1.0) == 0.2


def test_sentinel_exceeds_saturated_scores():
    # float32 probabilities can round to exactly 1.0
    t = select_threshold_for_fpr([1.0, 1.0], [0, 1], 0.0)
    assert t > 1.0


def test_needs_benign():
    with pytest.raises(DegenerateDataset):
        select_threshold_for_fpr([0.5], [1], 0.1)


def test_base_fp_consumes_budget():
    # 2 of 100 negatives already spent at a 2% target: nothing else may fire
    t = lock_threshold([0.4, 0.6, 0.5], [0, 0, 1], 0.02, base_fp=2, n_negatives=100)
    assert t > 0.6


def test_strict_mode_admits_no_new_positives():
    scores = [0.1, 0.5, 0.6, 0.7]
    labels = [0, 0, 1, 1]
    assert lock_threshold(scores, labels, 0.5, strict=True) == 0.6
    assert lock_threshold(scores, labels, 0.5) == 0.5


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20).map(lambda v: v / 20), st.integers(0, 1)),
                min_size=1, max_size=30),
       st.sampled_from([0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0]))
def test_matches_brute_force(pairs, target):
    scores, labels = zip(*pairs)
    if 0 not in labels:
        labels = (0,) + labels[1:]
    assert select_threshold_for_fpr(scores, labels, target) == brute_threshold(scores, labels, target)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=40), st.data())
def test_locked_rate_never_exceeds_target(scores, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    if 0 not in labels:
        labels[0] = 0
    target = data.draw(st.floats(0, 1))
    t = select_threshold_for_fpr(scores, labels, target)
    _, fpr = rates_at(scores, labels, t)
    assert fpr <= target
    # one candidate lower would either break the target or not exist
    lower = [s for s in set(scores) if s < t]
    if lower:
        _, worse = rates_at(scores, labels, max(lower))
        assert worse > target


def test_partition_uses_inclusive_threshold(small_corpus):
    ids = small_corpus[:3]
    b1, m1 = tier1.partition(ids, [0.2, 0.5, 0.7], 0.5)
    assert b1 == [ids[0].id] and m1 == [ids[1].id, ids[2].id]


def test_run_tier1_locks_validation_fpr(small_corpus, quick_config):
    from echelon.pipeline import split
    train, val, _ = split(small_corpus, seed=1)
    r = tier1.run_tier1(train, val, 0.05, quick_config)
    labels = np.array([s.label for s in val])
    _, fpr = rates_at(r.val_scores, labels, r.thd1)
    assert fpr <= 0.05 and r.tier1_fpr == fpr
    assert set(r.b1_val) | set(r.m1_val) == {s.id for s in val}
    assert all(sc < r.thd1 for s, sc in zip(val, r.val_scores) if s.id in set(r.b1_val))
    again = tier1.run_tier1(train, val, 0.05, quick_config)
    assert again.b1_val == r.b1_val and again.thd1 == r.thd1


def test_run_tier1_target_one_flags_everything(small_corpus, quick_config):
    from echelon.pipeline import split
    train, val, _ = split(small_corpus, seed=1)
    r = tier1.run_tier1(train, val, 1.0, quick_config)
    assert r.thd1 == pytest.approx(min(r.val_scores))
    assert r.b1_val == [] and len(r.m1_val) == len(val)
