import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from cilforge.model import (
    SGD,
    CosineClassifier,
    FeatureExtractor,
    GradientSet,
    Model,
    backward,
    cosine_logits,
    expand_classifier,
    load_checkpoint,
    save_checkpoint,
    snapshot,
)


def test_identity_layer():
    ext = FeatureExtractor([np.eye(3)], [np.zeros(3)])
    v = np.array([[1.5, -2.0, 0.25]])
    np.testing.assert_array_equal(ext.forward(v)[0], v)


def test_single_linear_layer():
    ext = FeatureExtractor([np.array([[1.0, 2.0], [3.0, 4.0]])], [np.zeros(2)])
    np.testing.assert_array_equal(ext.forward(np.array([[1.0, 1.0]]))[0], [[3.0, 7.0]])


def test_relu_hidden_layer():
    ext = FeatureExtractor([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
    out, inputs = ext.forward(np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(inputs[1], [[0.0, 2.0]])
    np.testing.assert_array_equal(out, [[0.0, 2.0]])


def test_dimension_mismatch():
    ext = FeatureExtractor([np.eye(2)], [np.zeros(2)])
    with pytest.raises(ValueError):
        ext.forward(np.ones((1, 3)))


def test_cosine_logits_examples():
    clf = CosineClassifier(np.array([[2.0, 0.0], [0.0, 1.0]]), [0, 1], scale=10.0)
    p = cosine_logits(clf, np.array([[3.0, 0.0]]))
    np.testing.assert_allclose(p, [[10.0, 0.0]], atol=1e-10)
    clf = CosineClassifier(np.array([[1.0, 1.0]]), [0], scale=2.0)
    np.testing.assert_allclose(cosine_logits(clf, np.array([[1.0, 0.0]])), [[2 / np.sqrt(2)]], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 50.0))
def test_logit_bound(seed, scale):
    r = np.random.default_rng(seed)
    clf = CosineClassifier(r.standard_normal((4, 3)), range(4), scale)
    p = cosine_logits(clf, r.standard_normal((6, 3)) * 100)
    assert np.all(np.abs(p) <= scale * (1 + 1e-12))


def test_expand_classifier(rng):
    clf = CosineClassifier(rng.standard_normal((3, 4)), [5, 1, 2], 7.0)
    big = expand_classifier(clf, [0, 9], np.random.default_rng(1))
    assert big.classes == (5, 1, 2, 0, 9)
    assert big.weight[:3].tobytes() == clf.weight.tobytes() and big.scale == 7.0
    same = expand_classifier(clf, [], np.random.default_rng(1))
    assert same.weight.tobytes() == clf.weight.tobytes()
    again = expand_classifier(clf, [0, 9], np.random.default_rng(1))
    assert again.weight.tobytes() == big.weight.tobytes()
    with pytest.raises(ValueError):
        expand_classifier(clf, [1], rng)
    h = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(cosine_logits(big, h)[:, :3], cosine_logits(clf, h))


def _model(rng, sizes=(2, 2, 2), k=2):
    ext = FeatureExtractor.init(list(sizes), rng)
    for b in ext.biases:
        b[:] = rng.standard_normal(b.shape) * 0.1
    clf = CosineClassifier(rng.standard_normal((k, sizes[-1])), range(k), 3.0)
    return Model(ext, clf)


def test_zero_upstream_gives_zero_gradients(rng):
    m = _model(rng)
    x = rng.standard_normal((3, 2))
    p, h, cache = m.forward(x)
    g = backward(m, cache, np.zeros_like(p), np.zeros_like(h))
    assert all(np.all(a == 0) for a in g.arrays())


def _check_model_gradients(m, x, gp, gh, gw):
    def loss():
        p, h, _ = m.forward(x)
        return np.sum(gp * p) + np.sum(gh * h) + np.sum(gw * m.classifier.weight)

    _, _, cache = m.forward(x)
    g = backward(m, cache, gp, gh, gw)
    errs = [rel_error(ga, numeric_grad(loss, p)) for ga, p in zip(g.arrays()[:-1], m.parameters())]

    def scaled(s):
        m.classifier.scale = s
        return loss()

    s0 = m.classifier.scale
    num_scale = (scaled(s0 + 1e-5) - scaled(s0 - 1e-5)) / 2e-5
    m.classifier.scale = s0
    errs.append(rel_error(g.scale, num_scale))
    return max(errs)


def _away_from_relu_kinks(m, x, tol=1e-3):
    _, inputs = m.extractor.forward(x)
    pre = [a @ w.T + b for a, w, b in zip(inputs, m.extractor.weights, m.extractor.biases)][:-1]
    return all(np.min(np.abs(z)) > tol for z in pre)


def test_gradients_small_network(rng):
    checked = 0
    while checked < 20:
        m = _model(rng)
        x = rng.standard_normal((3, 2))
        if not _away_from_relu_kinks(m, x):
            continue
        gp, gh, gw = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
        assert _check_model_gradients(m, x, gp, gh, gw) < 1e-5
        checked += 1


def test_gradients_deeper_network(rng):
    m = _model(rng, (5, 7, 6, 4), k=3)
    x = rng.standard_normal((4, 5))
    assert _away_from_relu_kinks(m, x)
    err = _check_model_gradients(m, x, rng.standard_normal((4, 3)), rng.standard_normal((4, 4)), rng.standard_normal((3, 4)))
    assert err < 1e-5


def test_scale_gradient_is_cosine_weighted_sum(rng):
    m = _model(rng, (3, 4), k=3)
    x = rng.standard_normal((1, 3))
    p, h, cache = m.forward(x)
    up = rng.standard_normal((1, 3))
    g = backward(m, cache, up)
    np.testing.assert_allclose(g.scale, np.sum(up * p / m.classifier.scale), rtol=1e-12)


def _scalar_model(value):
    ext = FeatureExtractor([np.array([[value]])], [np.array([0.0])])
    return Model(ext, CosineClassifier(np.array([[1.0]]), [0], 10.0))


def _grads(wgrad):
    return GradientSet([np.array([[wgrad]])], [np.array([0.0])], np.array([[0.0]]), 0.0)


def test_sgd_fixed_point():
    m = _scalar_model(1.0)
    SGD(0.1, 0.9, 0.0).step(m, _grads(0.0))
    assert m.extractor.weights[0][0, 0] == 1.0


def test_sgd_plain_step():
    m = _scalar_model(1.0)
    SGD(0.1, 0.0, 0.0).step(m, _grads(1.0))
    assert m.extractor.weights[0][0, 0] == pytest.approx(0.9)


def test_sgd_momentum_recursion():
    m = _scalar_model(1.0)
    opt = SGD(0.1, 0.9, 0.0)
    opt.step(m, _grads(1.0))
    assert m.extractor.weights[0][0, 0] == pytest.approx(0.9)
    opt.step(m, _grads(1.0))
    assert m.extractor.weights[0][0, 0] == pytest.approx(0.71)


def test_sgd_scale_not_decayed_and_clamped():
    m = _scalar_model(1.0)
    opt = SGD(1.0, 0.0, 0.5)
    g = _grads(0.0)
    opt.step(m, g)
    assert m.classifier.scale == 10.0
    g.scale = 1e6
    opt.step(m, g)
    assert m.classifier.scale == pytest.approx(1e-3)


def test_sgd_rejects_non_finite():
    m = _scalar_model(1.0)
    with pytest.raises(FloatingPointError, match="layer0.weight"):
        SGD(0.1).step(m, _grads(np.nan))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20), st.floats(1e-4, 10.0))
def test_scale_stays_positive(scale_grads, lr):
    m = _scalar_model(1.0)
    opt = SGD(lr)
    for s in scale_grads:
        g = _grads(0.0)
        g.scale = s
        opt.step(m, g)
        assert m.classifier.scale > 0


def test_snapshot_is_frozen(rng):
    m = Model.init(3, (5,), 4, rng)
    m.expand([0, 1, 2], rng)
    probe = rng.standard_normal((4, 3))
    teacher = snapshot(m)
    before = teacher.predict_logits(probe)
    x = rng.standard_normal((8, 3))
    opt = SGD(0.5)
    for _ in range(3):
        p, h, cache = m.forward(x)
        opt.step(m, backward(m, cache, np.ones_like(p)))
    assert not np.allclose(m.predict_logits(probe), before)
    np.testing.assert_array_equal(teacher.predict_logits(probe), before)
    np.testing.assert_array_equal(snapshot(teacher).predict_logits(probe), before)
    with pytest.raises(ValueError):
        teacher.extractor.weights[0][0, 0] = 1.0


def test_checkpoint_round_trip(tmp_path, rng):
    m = Model.init(3, (5,), 4, rng)
    m.expand([4, 2], rng)
    m.classifier.scale = 7.25
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, m)
    assert path.read_text().startswith("CILFORGE-CKPT-1\n")
    back = load_checkpoint(path)
    assert back.classifier.classes == (4, 2) and back.classifier.scale == 7.25
    x = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(back.predict_logits(x), m.predict_logits(x))


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad"
    path.write_text("hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
