import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from descmine.loss import (
    APConfig,
    EmptyListError,
    RankedList,
    TripletConfig,
    ap_loss_batch,
    backprop_similarities,
    exact_ap,
    soft_binned_ap,
    triplet_loss,
    triplet_loss_batch,
)
from oracles import central_diff, rel_err, separated_values


def away_from_kinks(rng, n, cfg, gap=1e-4):
    """Uniform similarities in (-1, 1) at least *gap* from every bin center."""
    out = []
    while len(out) < n:
        s = rng.uniform(-1, 1)
        if np.min(np.abs(s - cfg.centers)) > gap:
            out.append(s)
    return np.array(out)


def ap_value(s_pos, s_negs, cfg):
    return soft_binned_ap(RankedList(s_pos, s_negs), cfg)[0]


def test_bin_layout():
    cfg = APConfig(25)
    assert cfg.delta == pytest.approx(2 / 24)
    assert cfg.centers[0] == 1.0 and cfg.centers[-1] == pytest.approx(-1.0)


def test_separated_positive_scores_one():
    cfg = APConfig(25)
    negs = np.random.default_rng(0).uniform(-1, 1 - 2 * cfg.delta, 30)
    assert ap_value(1.0, negs, cfg) == 1.0


def test_positive_below_one_negative():
    for m in (3, 5, 25):
        assert abs(ap_value(-1.0, [1.0], APConfig(m)) - 0.5) < 1e-12


def test_exact_ap_examples():
    assert exact_ap(RankedList(0.9, [0.1, 0.5])) == 1.0
    assert exact_ap(RankedList(0.3, [0.9, 0.5, 0.4, 0.1])) == 0.25


def test_exact_ap_ties_rank_positive_last():
    assert exact_ap(RankedList(0.5, [0.5])) == 0.5


def test_ranked_list_sorts_negatives():
    lst = RankedList(0.0, [0.1, 0.7, 0.3], negative_indices=[4, 5, 6])
    assert lst.s_negs.tolist() == [0.7, 0.3, 0.1]
    assert lst.negative_indices.tolist() == [5, 6, 4]


def test_empty_negatives_rejected():
    with pytest.raises(EmptyListError):
        soft_binned_ap(RankedList(0.5, []))
    with pytest.raises(EmptyListError):
        ap_loss_batch([])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60), m=st.integers(2, 50))
def test_ap_in_unit_interval(seed, n, m):
    rng = np.random.default_rng(seed)
    v = ap_value(rng.uniform(-1, 1), rng.uniform(-1, 1, n), APConfig(m))
    assert 0.0 <= v <= 1.0


def test_fine_bins_match_exact_ap_when_separated():
    cfg = APConfig(401)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        vals = separated_values(rng, int(rng.integers(2, 40)), 2 * cfg.delta)
        assert np.min(np.diff(np.sort(vals))) > 2 * cfg.delta
        lst = RankedList(vals[0], vals[1:])
        worst = max(worst, abs(soft_binned_ap(lst, cfg)[0] - exact_ap(lst)))
    assert worst < 1e-9


def test_soft_ap_gradient_matches_finite_differences():
    cfg = APConfig(25)
    rng = np.random.default_rng(1)
    for _ in range(10):
        s_pos = away_from_kinks(rng, 1, cfg)[0]
        negs = away_from_kinks(rng, 50, cfg)
        _, d_pos, d_neg = soft_binned_ap(RankedList(s_pos, negs), cfg)
        h = 1e-5
        num_pos = (ap_value(s_pos + h, negs, cfg) - ap_value(s_pos - h, negs, cfg)) / (2 * h)
        num_neg = np.zeros(50)
        order = np.argsort(-negs, kind="stable")
        for j in range(50):
            up, dn = negs.copy(), negs.copy()
            up[j] += h
            dn[j] -= h
            num_neg[j] = (ap_value(s_pos, up, cfg) - ap_value(s_pos, dn, cfg)) / (2 * h)
        assert rel_err(num_pos, d_pos) < 1e-6
        # analytic negatives come back in descending order
        assert rel_err(num_neg[order], d_neg) < 1e-6


def test_batch_loss_examples():
    cfg = APConfig(25)
    perfect = RankedList(1.0, [-0.5, 0.2])
    half = RankedList(-1.0, [1.0])
    assert ap_loss_batch([perfect, perfect], cfg).value == 0.0
    assert abs(ap_loss_batch([perfect, half], cfg).value - 0.25) < 1e-12


def test_batch_loss_gradient():
    cfg = APConfig(25)
    rng = np.random.default_rng(2)
    lists = [RankedList(away_from_kinks(rng, 1, cfg)[0], away_from_kinks(rng, k, cfg)) for k in (5, 9, 3)]
    out = ap_loss_batch(lists, cfg)
    h = 1e-5

    def value(i, which, j, delta):
        ls = [RankedList(l.s_pos, l.s_negs.copy()) for l in lists]
        if which == "pos":
            ls[i].s_pos += delta
        else:
            ls[i].s_negs[j] += delta
        return ap_loss_batch(ls, cfg).value

    for i, l in enumerate(lists):
        num = (value(i, "pos", 0, h) - value(i, "pos", 0, -h)) / (2 * h)
        assert rel_err(num, out.d_s_pos[i]) < 1e-6
        for j in range(len(l.s_negs)):
            num = (value(i, "neg", j, h) - value(i, "neg", j, -h)) / (2 * h)
            assert rel_err(num, out.d_s_negs[i][j]) < 1e-6


def test_triplet_examples():
    cfg = TripletConfig(0.5)
    assert triplet_loss(0.9, 0.1, cfg) == (0.0, 0.0, 0.0)
    v, gp, gn = triplet_loss(0.2, 0.4, cfg)
    assert abs(v - 0.7) < 1e-12 and (gp, gn) == (-1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(sp=st.floats(-1, 1), sn=st.floats(-1, 1), margin=st.floats(0.01, 2))
def test_triplet_range(sp, sn, margin):
    v = triplet_loss(sp, sn, TripletConfig(margin))[0]
    assert 0.0 <= v <= margin + 2 + 1e-12


def test_triplet_batch_mean():
    out = triplet_loss_batch([0.9, 0.2], [0.1, 0.4], TripletConfig(0.5))
    assert abs(out.value - 0.35) < 1e-12
    assert out.d_s_pos.tolist() == [0.0, -0.5]


def test_backprop_single_pair():
    a, b = np.eye(3)[0], np.eye(3)[1]
    rows = np.stack([a, b])
    g = backprop_similarities(rows, [0], [1], [1.0], [np.zeros(0, int)], [np.zeros(0)])
    assert np.array_equal(g[0], b) and np.array_equal(g[1], a)


def test_backprop_sums_shared_rows():
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(4, 5))
    both = backprop_similarities(rows, [0, 1], [2, 2], [0.0, 0.0], [[3], [3]], [[0.5], [2.0]])
    first = backprop_similarities(rows, [0], [2], [0.0], [[3]], [[0.5]])
    second = backprop_similarities(rows, [1], [2], [0.0], [[3]], [[2.0]])
    assert np.allclose(both, first + second)


def test_backprop_matches_numeric_gradient():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(6, 4))
    anchors, positives = [0, 1], [2, 3]
    negs = [np.array([4, 5, 3]), np.array([5, 2])]
    weights_pos = np.array([0.7, -1.2])
    weights_neg = [np.array([0.3, -0.1, 2.0]), np.array([1.5, -0.4])]

    def f():
        total = sum(w * rows[a] @ rows[p] for w, a, p in zip(weights_pos, anchors, positives))
        for a, idx, w in zip(anchors, negs, weights_neg):
            total += sum(wj * rows[a] @ rows[j] for wj, j in zip(w, idx))
        return total

    g = backprop_similarities(rows, anchors, positives, weights_pos, negs, weights_neg)
    assert rel_err(central_diff(f, rows, 1e-6), g) < 1e-7


def test_backprop_index_check():
    with pytest.raises(IndexError):
        backprop_similarities(np.eye(2), [0], [5], [1.0], [[]], [[]])
