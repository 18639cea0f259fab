import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from cilforge import losses as L


def scalar_cbc(logits, label, classes_old, pool_counts, alpha):
    """Straight-line evaluation of the CIL-balanced loss for one sample."""
    total = sum(pool_counts)
    r = [q / total for q in pool_counts]
    gamma = [alpha if old else 1.0 for old in classes_old]
    num = gamma[label] * math.exp(logits[label])
    den = sum(
        gamma[j] * math.exp(logits[j] + math.log(r[j]) - math.log(r[label])) for j in range(len(logits))
    )
    return -math.log(num / den)


def random_table(rng, k=None):
    k = k or int(rng.integers(2, 7))
    n_old = int(rng.integers(0, k))
    m = int(rng.integers(1, 40))
    new_counts = {c: int(rng.integers(1, 300)) for c in range(n_old, k)}
    return L.category_frequency(new_counts, range(n_old), m)


def test_category_frequency_example():
    t = L.category_frequency({2: 100, 3: 40}, [0, 1], 20)
    assert t.pool_size == 180
    np.testing.assert_allclose(t.r, [1 / 9, 1 / 9, 5 / 9, 2 / 9], rtol=1e-15)


def test_single_new_class():
    t = L.category_frequency({7: 50}, [], 20)
    assert t.frequency() == {7: 1.0}


def test_empty_step_rejected():
    with pytest.raises(ValueError):
        L.category_frequency({}, [0], 20)


def test_old_old_adjustment_is_zero():
    t = L.category_frequency({3: 90}, [0, 1, 2], 20)
    assert L.logit_adjustment(t, 0, 2) == 0.0


def test_adjustment_examples():
    t = L.category_frequency({2: 100, 3: 40}, [0, 1], 20)
    assert L.logit_adjustment(t, 0, 2) == pytest.approx(math.log(5), abs=1e-12)
    assert L.logit_adjustment(t, 3, 1) == pytest.approx(math.log(20 / 40), abs=1e-12)
    assert L.logit_adjustment(t, 3, 3) == 0.0
    with pytest.raises(KeyError):
        L.logit_adjustment(t, 0, 9)


def test_table_invariants(rng):
    for _ in range(50):
        t = random_table(rng)
        assert t.r.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diag(t.v) == 0)
        np.testing.assert_allclose(t.v, -t.v.T, atol=1e-12)


def test_old_counts_override():
    t = L.category_frequency({2: 100}, [0, 1], 20, old_counts={1: 7})
    assert list(t.pool_counts) == [20, 7, 100]


def test_symmetric_two_class():
    t = L.category_frequency({0: 30, 1: 30}, [], 20)
    for alpha in (0.0, 0.3, 1.0):
        loss, _ = L.cil_balanced_loss(np.array([[1.3, 1.3]]), [0], t, alpha)
        assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_cbc_worked_example():
    t = L.category_frequency({1: 100}, [0], 20)
    loss, _ = L.cil_balanced_loss(np.array([[2.0, 1.0]]), [0], t, 0.5)
    expected = -math.log(0.5 * math.e**2 / (0.5 * math.e**2 + math.exp(1 + math.log(5))))
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(1.5430, abs=5e-5)


def test_cbc_matches_scalar_oracle(rng):
    for _ in range(200):
        t = random_table(rng)
        k = len(t.classes)
        logits = rng.normal(0, 4, size=(3, k))
        labels = rng.integers(0, k, size=3)
        alpha = float(rng.uniform(0.05, 1.0))
        loss, _ = L.cil_balanced_loss(logits, labels, t, alpha)
        ref = np.mean([scalar_cbc(logits[i], labels[i], t.is_old, list(t.pool_counts), alpha) for i in range(3)])
        assert loss == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_alpha_out_of_range():
    t = L.category_frequency({1: 10}, [0], 5)
    with pytest.raises(ValueError):
        L.cil_balanced_loss(np.zeros((1, 2)), [0], t, 1.5)


def test_alpha_one_reduces_to_logit_balanced(rng):
    for _ in range(100):
        t = random_table(rng)
        logits = rng.normal(0, 5, size=(4, len(t.classes)))
        labels = rng.integers(0, len(t.classes), size=4)
        a, ga = L.cil_balanced_loss(logits, labels, t, 1.0)
        b, gb = L.logit_balanced_loss(logits, labels, t)
        assert abs(a - b) <= 1e-12
        np.testing.assert_allclose(ga, gb, atol=1e-12)


def test_uniform_frequencies_reduce_to_cross_entropy(rng):
    t = L.uniform_table(range(5))
    logits = rng.normal(0, 3, size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    lse = np.log(np.exp(logits).sum(axis=1))
    ce = np.mean(lse - logits[np.arange(6), labels])
    assert abs(L.logit_balanced_loss(logits, labels, t)[0] - ce) <= 1e-12


def test_single_class_loss_is_zero():
    t = L.category_frequency({4: 12}, [], 3)
    assert L.logit_balanced_loss(np.array([[3.0], [-1.0]]), [0, 0], t)[0] == 0.0


def test_two_forms_agree(rng):
    for _ in range(200):
        t = random_table(rng)
        logits = rng.normal(0, 5, size=(5, len(t.classes)))
        labels = rng.integers(0, len(t.classes), size=5)
        a, _ = L.logit_balanced_loss(logits, labels, t, verify=True)
        b, _ = L.logit_balanced_loss_pairwise(logits, labels, t)
        assert abs(a - b) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_alpha_monotonicity(seed):
    r = np.random.default_rng(seed)
    t = L.category_frequency({2: int(r.integers(1, 200)), 3: int(r.integers(1, 200))}, [0, 1], int(r.integers(1, 50)))
    logits = r.normal(0, 4, size=(1, 4))
    grid = np.linspace(0.0, 1.0, 11)[1:]
    old = [L.cil_balanced_loss(logits, [0], t, a)[0] for a in grid]
    new = [L.cil_balanced_loss(logits, [3], t, a)[0] for a in grid]
    assert all(x >= y - 1e-12 for x, y in zip(old, old[1:]))
    assert all(x <= y + 1e-12 for x, y in zip(new, new[1:]))


def test_old_label_emphasis(rng):
    for _ in range(50):
        m = int(rng.integers(1, 30))
        t = L.category_frequency({2: m + int(rng.integers(1, 200))}, [0, 1], m)
        logits = rng.normal(0, 3, size=(1, 3))
        adjusted = L.logit_balanced_loss(logits, [0], t)[0]
        plain = L.softmax_cross_entropy(logits, [0])[0]
        assert adjusted > plain


def test_margin_hinge_examples():
    # unit vectors with prescribed cosines to h = e0
    def unit(c):
        return np.array([c, math.sqrt(1 - c * c)])

    h = np.array([[1.0, 0.0]])
    w = np.stack([unit(0.9), unit(0.3)])
    assert L.vanilla_margin_loss(h, w, [0], [1], 0.4)[0] == 0.0
    w = np.stack([unit(0.5), unit(0.6)])
    assert L.vanilla_margin_loss(h, w, [0], [1], 0.4)[0] == pytest.approx(0.5, abs=1e-12)
    empty = L.vanilla_margin_loss(np.zeros((0, 2)), w, [], [1], 0.4)
    assert empty[0] == 0.0


def test_margin_rejects_new_anchor():
    with pytest.raises(ValueError):
        L.vanilla_margin_loss(np.ones((1, 2)), np.eye(2), [1], [1])


def test_perturb_weight():
    w = np.array([1.0, 0.0])
    np.testing.assert_array_equal(L.perturb_weight(w, 0.0, np.array([3.0, 4.0])), w)
    np.testing.assert_array_equal(L.perturb_weight(w, 0.7, np.zeros(2)), w)
    np.testing.assert_array_equal(L.perturb_weight(w, 0.5, np.array([0.0, 1.0])), [1.0, 0.5])


def straight_line_dm(h, w, labels, new_cols, rhat, neg, pos, margin):
    """Loop-based evaluation of the distribution margin loss."""

    def cos(a, b):
        return float(a @ b / ((np.linalg.norm(a) + 1e-12) * (np.linalg.norm(b) + 1e-12)))

    total = 0.0
    for i, y in enumerate(labels):
        for k, c in enumerate(new_cols):
            total += max(0.0, cos(h[i], w[c] + neg[i, k] * rhat[c]) - cos(h[i], w[y]) + margin)
        total += max(0.0, cos(w[y] + pos[i] * rhat[y], w[y]) - cos(h[i], w[y]))
    return total


def _dm_instance(rng, n=4, k_old=3, k_new=2, dim=5):
    h = rng.standard_normal((n, dim))
    w = rng.standard_normal((k_old + k_new, dim))
    labels = rng.integers(0, k_old, size=n)
    new_cols = np.arange(k_old, k_old + k_new)
    rhat = rng.dirichlet(np.ones(k_old + k_new))
    ranges = L.DistributionRanges.draw(rhat, n, k_new, dim, rng)
    return h, w, labels, new_cols, ranges


def test_dm_matches_straight_line_oracle(rng):
    for _ in range(50):
        h, w, labels, new_cols, ranges = _dm_instance(rng)
        got = L.distribution_margin_loss(h, w, labels, new_cols, ranges, 0.4)[0]
        ref = straight_line_dm(h, w, labels, new_cols, ranges.rhat, ranges.negative_noise, ranges.positive_noise, 0.4)
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_dm_two_class_toy():
    r = np.random.default_rng(2024)
    h = np.array([[1.0, 0.2]])
    w = np.array([[0.8, 0.1], [0.3, 0.9]])
    ranges = L.DistributionRanges.draw(np.array([0.25, 0.75]), 1, 1, 2, r)
    got = L.distribution_margin_loss(h, w, [0], [1], ranges, 0.4)[0]
    ref = straight_line_dm(h, w, [0], [1], ranges.rhat, ranges.negative_noise, ranges.positive_noise, 0.4)
    assert got == pytest.approx(ref, abs=1e-14)


def test_dm_zero_noise_reduces(rng):
    for _ in range(30):
        h, w, labels, new_cols, _ = _dm_instance(rng)
        zero = L.DistributionRanges.zero(len(w), len(h), len(new_cols), w.shape[1])
        dm = L.distribution_margin_loss(h, w, labels, new_cols, zero, 0.4)[0]
        term1 = L.distribution_margin_loss(h, w, labels, new_cols, zero, 0.4, intra_term=False)[0]
        vanilla = L.vanilla_margin_loss(h, w, labels, new_cols, 0.4)[0]
        cos_pos = np.array([np.dot(h[i], w[y]) / np.linalg.norm(h[i]) / np.linalg.norm(w[y]) for i, y in enumerate(labels)])
        assert term1 == vanilla
        assert dm - term1 == pytest.approx(np.sum(np.maximum(0, 1 - cos_pos)), abs=1e-9)


def test_dm_parallel_anchor_has_no_intra_term():
    w = np.array([[2.0, 0.0], [0.0, 1.0]])
    zero = L.DistributionRanges.zero(2, 1, 1, 2)
    loss = L.distribution_margin_loss(np.array([[5.0, 0.0]]), w, [0], [1], zero, 0.0)[0]
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_kd_examples():
    a = np.array([[1.0, 2.0]])
    assert L.kd_loss(a, a)[0] == 0.0
    cur = np.array([[0.5, -0.25], [0.0, 0.25]])
    assert L.kd_loss(cur, np.zeros((2, 2)))[0] == pytest.approx(0.5)
    assert L.kd_loss(np.zeros((4, 0)), np.zeros((4, 0)))[0] == 0.0
    with pytest.raises(ValueError):
        L.kd_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_total_loss_combination(rng):
    cfg0 = L.LossConfig(0.5, 0.0, 0.0)
    g = {"logits": rng.standard_normal((2, 3))}
    assert L.total_loss((1.7, g), (2.0, {}), (3.0, {}), cfg0)[0] == 1.7
    cfg = L.LossConfig(0.5, 0.3, 0.5)
    assert L.total_loss((1.0, {}), (2.0, {}), (3.0, {}), cfg)[0] == pytest.approx(3.1)
    gc, gd, gk = (rng.standard_normal((2, 3)) for _ in range(3))
    ge = rng.standard_normal((2, 4))
    _, grads = L.total_loss((0, {"logits": gc}), (0, {"embeddings": ge, "logits": gd}), (0, {"logits": gk}), cfg)
    np.testing.assert_allclose(grads["logits"], gc + 0.3 * gd + 0.5 * gk, atol=1e-15)
    np.testing.assert_allclose(grads["embeddings"], 0.3 * ge)
    with pytest.raises(ValueError):
        L.LossConfig(lambda_d=-1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_margin_and_kd_non_negative(seed):
    r = np.random.default_rng(seed)
    h, w, labels, new_cols, ranges = _dm_instance(r)
    assert L.distribution_margin_loss(h, w, labels, new_cols, ranges, 0.4)[0] >= 0
    assert L.vanilla_margin_loss(h, w, labels, new_cols, 0.4)[0] >= 0
    assert L.kd_loss(r.standard_normal((3, 2)), r.standard_normal((3, 2)))[0] >= 0
    t = random_table(r)
    logits = r.normal(0, 3, size=(2, len(t.classes)))
    assert L.cil_balanced_loss(logits, r.integers(0, len(t.classes), 2), t, 1.0)[0] >= 0


def test_logit_loss_gradients(rng):
    for _ in range(20):
        t = random_table(rng)
        k = len(t.classes)
        logits = rng.normal(0, 3, size=(3, k))
        labels = rng.integers(0, k, size=3)
        alpha = float(rng.uniform(0.1, 1.0))
        for fn in (
            lambda: L.cil_balanced_loss(logits, labels, t, alpha),
            lambda: L.logit_balanced_loss(logits, labels, t),
            lambda: L.softmax_cross_entropy(logits, labels),
        ):
            assert rel_error(fn()[1], numeric_grad(lambda: fn()[0], logits)) < 1e-5


def test_margin_gradients(rng):
    done = 0
    while done < 20:
        h, w, labels, new_cols, ranges = _dm_instance(rng)
        loss, gh, gw = L.distribution_margin_loss(h, w, labels, new_cols, ranges, 0.4)
        f = lambda: L.distribution_margin_loss(h, w, labels, new_cols, ranges, 0.4)[0]
        nh, nw = numeric_grad(f, h), numeric_grad(f, w)
        if not _away_from_dm_kinks(h, w, labels, new_cols, ranges, 0.4):
            continue
        assert rel_error(gh, nh) < 1e-5 and rel_error(gw, nw) < 1e-5
        done += 1


def _away_from_dm_kinks(h, w, labels, new_cols, ranges, margin, tol=1e-3):
    cos = lambda a, b: np.sum(a * b, -1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    wy = w[labels]
    pos = cos(h, wy)
    wt = w[new_cols][None] + ranges.negative_noise * ranges.rhat[new_cols][None, :, None]
    neg = cos(h[:, None, :], wt)
    intra = cos(wy + ranges.positive_noise * ranges.rhat[labels][:, None], wy) - pos
    return np.min(np.abs(neg - pos[:, None] + margin)) > tol and np.min(np.abs(intra)) > tol
