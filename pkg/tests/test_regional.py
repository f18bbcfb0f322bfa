import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import best_partition_inertia
from twgcn import autodiff as ad
from twgcn.regional import (
    RegionHeads,
    assign_region,
    init_region_heads,
    kmeans,
    predict,
    replicate_head,
    write_assignments_csv,
)


def two_blobs(seed, n=8):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n // 2, 2)) * 0.3
    b = rng.normal(size=(n - n // 2, 2)) * 0.3 + [5.0, 5.0]
    return np.vstack([a, b])


def test_k1_is_the_mean():
    x = np.random.default_rng(0).normal(size=(10, 3))
    c = kmeans(x, 1)
    assert np.allclose(c.centroids[0], x.mean(axis=0), atol=1e-14)
    assert c.inertia == pytest.approx(x.var(axis=0).sum() * len(x), rel=1e-12)


def test_k_equals_n_distinct_points():
    x = np.random.default_rng(1).normal(size=(6, 2))
    c = kmeans(x, 6)
    assert c.inertia == 0.0
    assert sorted(c.assignments.tolist()) == list(range(6))


@pytest.mark.parametrize("seed", range(5))
def test_two_blobs_match_exhaustive_partition(seed):
    x = two_blobs(seed)
    assert kmeans(x, 2, seed=seed).inertia == pytest.approx(best_partition_inertia(x), rel=1e-12)


def test_kmeans_rejects_bad_k():
    x = np.zeros((3, 2))
    for k in (0, 4):
        with pytest.raises(ValueError):
            kmeans(x, k)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 2**31))
def test_lloyd_properties(n, k, seed):
    k = min(k, n)
    x = np.random.default_rng(seed).normal(size=(n, 2))
    c = kmeans(x, k, seed=seed)
    hist = np.array(c.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))
    # no single-point move lowers inertia
    d2 = ((x[:, None] - c.centroids[None]) ** 2).sum(axis=2)
    assert np.all(d2[np.arange(n), c.assignments] <= d2.min(axis=1) + 1e-12)
    again = kmeans(x, k, seed=seed)
    assert np.array_equal(again.assignments, c.assignments)


def test_duplicate_points_do_not_leave_empty_clusters():
    x = np.array([[0.0, 0.0]] * 4 + [[1.0, 1.0]])
    c = kmeans(x, 3, seed=0)
    assert np.isfinite(c.centroids).all()


def test_assign_region_examples():
    cents = np.array([[0.0, 0.0], [5.0, 5.0], [2.0, 0.0]])
    assert assign_region([[5.0, 5.0]], cents).tolist() == [1]
    assert assign_region([[1.0, 0.0]], cents).tolist() == [0]  # tie between 0 and 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_assign_region_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    cents, pts = rng.normal(size=(3, 4)), rng.normal(size=(7, 4))
    want = []
    for p in pts:
        best, arg = np.inf, -1
        for j, c in enumerate(cents):
            d = sum((p[i] - c[i]) ** 2 for i in range(4))
            if d < best:
                best, arg = d, j
        want.append(arg)
    assert assign_region(pts, cents).tolist() == want


def test_write_assignments(tmp_path):
    write_assignments_csv(["a", "b"], np.array([1, 0]), tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["station_id,region", "a,1", "b,0"]


# -- heads ----------------------------------------------------------------


def hand_head(w1, b1, w2, b2):
    return {"W1": ad.leaf(w1), "b1": ad.leaf(b1), "W2": ad.leaf(w2), "b2": ad.leaf(b2)}


def test_negative_preactivation_clamps_to_zero():
    h = hand_head(np.eye(2), np.zeros(2), [[1.0], [1.0]], [-100.0])
    out = predict(np.ones((3, 2)), np.zeros(3, dtype=int), RegionHeads([h]))
    assert np.array_equal(out.value, np.zeros(3))


def test_hand_evaluated_mlp():
    h = hand_head([[1.0, -1.0], [2.0, 0.5]], [0.1, -0.2], [[0.5], [2.0]], [0.3])
    z = np.array([[1.0, 2.0], [-1.0, 0.5]])
    # station 0: hidden = relu([1+4+.1, -1+1-.2]) = [5.1, 0]; out = 2.55 + .3
    # station 1: hidden = relu([-1+1+.1, 1+.25-.2]) = [.1, 1.05]; out = .05 + 2.1 + .3
    out = predict(z, np.array([0, 0]), RegionHeads([h])).value
    assert np.allclose(out, [2.85, 2.45], atol=1e-15)


def test_single_region_equals_shared_mlp():
    rng = np.random.default_rng(0)
    heads = init_region_heads(1, 4, rng)
    z = rng.normal(size=(5, 3, 4))
    h = heads.heads[0]
    hidden = np.maximum(z @ h["W1"].value + h["b1"].value, 0)
    want = np.maximum((hidden @ h["W2"].value + h["b2"].value)[..., 0], 0)
    assert np.allclose(predict(z, np.zeros(3, dtype=int), heads).value, want, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 0))
def test_predictions_respect_floor(seed, floor):
    rng = np.random.default_rng(seed)
    heads = init_region_heads(3, 4, rng)
    for h in heads.heads:
        for t in h.values():
            t.value = rng.normal(size=t.shape) * 3
    out = predict(rng.normal(size=(6, 5, 4)) * 3, rng.integers(0, 3, 5), heads, floor=floor).value
    assert np.all(out >= floor)


def test_head_changes_only_its_stations():
    rng = np.random.default_rng(2)
    heads = init_region_heads(2, 4, rng)
    for h in heads.heads:
        h["b2"].value[:] = 2.0
    z = rng.normal(size=(3, 4, 4))
    a = np.array([0, 1, 1, 0])
    before = predict(z, a, heads).value
    heads.heads[1]["W1"].value += 0.5
    heads.heads[1]["b2"].value += 1.0
    after = predict(z, a, heads).value
    assert np.array_equal(before[:, a == 0], after[:, a == 0])
    assert not np.allclose(before[:, a == 1], after[:, a == 1])


def test_predict_needs_valid_assignment():
    heads = init_region_heads(2, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        predict(np.zeros((3, 4)), np.array([0, 2, 1]), heads)
    with pytest.raises(ValueError):
        predict(np.zeros((3, 4)), np.array([0, 1]), heads)


def test_replicate_head_copies_values_independently():
    heads = init_region_heads(1, 4, np.random.default_rng(0))
    rep = replicate_head(heads, 3)
    assert rep.k == 3
    rep.heads[0]["W1"].value[0, 0] += 1.0
    assert rep.heads[1]["W1"].value[0, 0] == heads.heads[0]["W1"].value[0, 0]
