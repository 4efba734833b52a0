import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchnet.network import BatchNorm, BranchNetModel, backward, forward, predict, sigmoid, softmax
from branchnet.training import combined_loss

from oracles import central_difference, random_small_model, relative_error


def test_sigmoid_stable_at_extremes():
    z = np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])
    with np.errstate(over="raise", invalid="raise"):
        s = sigmoid(z)
    assert s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5
    np.testing.assert_allclose(s[1] + s[3], 1.0)


def test_softmax_rows_sum_to_one():
    z = np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]])
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert p[0, 0] == 1.0


def test_batchnorm_train_matches_formula(rng):
    bn = BatchNorm(3, eps=1e-5, momentum=0.1)
    x = rng.normal(2.0, 3.0, size=(10, 3))
    out, _ = bn.forward(x, train=True)
    mu, var = x.mean(0), x.var(0)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5))
    np.testing.assert_allclose(bn.running_mean, 0.1 * mu)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(0, ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    bn = BatchNorm(2)
    bn.running_mean = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 0.25])
    bn.gamma = np.array([2.0, 1.0])
    bn.beta = np.array([0.5, 0.0])
    out, cache = bn.forward(np.array([[3.0, 0.0]]), train=False)
    assert cache is None
    np.testing.assert_allclose(out, [[2.0 * 2 / np.sqrt(4 + 1e-5) + 0.5, 1 / np.sqrt(0.25 + 1e-5)]])


def test_batchnorm_no_update_flag(rng):
    bn = BatchNorm(2)
    bn.forward(rng.normal(size=(5, 2)), train=True, update_running=False)
    assert bn.running_mean.tolist() == [0, 0] and bn.running_var.tolist() == [1, 1]


def test_batchnorm_rejects_bad_settings():
    with pytest.raises(ValueError):
        BatchNorm(2, eps=0)
    with pytest.raises(ValueError):
        BatchNorm(2, momentum=0)


def test_model_applies_mask_and_freezes_w2(rng):
    m = random_small_model(rng, 5, 7, 3)
    assert np.all(m.w1[m.mask_m1 == 0] == 0)
    with pytest.raises(ValueError):
        m.w2[0, 0] = 1.0
    with pytest.raises(ValueError):
        m.mask_m1[0, 0] = 1.0
    m.set_parameter("w1", np.ones_like(m.w1))
    np.testing.assert_array_equal(m.w1, m.mask_m1)


def test_model_rejects_inconsistent_shapes():
    with pytest.raises(ValueError):
        BranchNetModel(np.zeros((3, 2)), np.ones((3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        BranchNetModel(np.zeros((3, 3)), np.full((3, 3), 0.5), np.zeros((2, 3)))


def test_forward_shapes_and_checks(rng):
    m = random_small_model(rng, 4, 6, 3)
    tr = forward(m, rng.normal(size=(8, 4)))
    assert tr.probs.shape == (8, 3) and tr.s.shape == (8, 6)
    np.testing.assert_allclose(tr.probs.sum(1), 1.0)
    with pytest.raises(ValueError):
        forward(m, rng.normal(size=(1, 4)))
    with pytest.raises(ValueError):
        forward(m, rng.normal(size=(4, 5)))
    with pytest.raises(ValueError):
        forward(m, np.full((3, 4), np.nan))


def test_backward_needs_train_trace(rng):
    m = random_small_model(rng, 4, 6, 3)
    m.eval()
    tr = forward(m, rng.normal(size=(3, 4)))
    with pytest.raises(ValueError):
        backward(m, tr, np.zeros((3, 3)))


def test_predict_needs_eval_mode(rng):
    m = random_small_model(rng, 4, 6, 3)
    with pytest.raises(ValueError):
        predict(m, rng.normal(size=(3, 4)))


def test_eval_output_independent_of_batching(rng):
    m = random_small_model(rng, 6, 20, 4)
    forward(m, rng.normal(size=(32, 6)))  # move running stats away from the defaults
    m.eval()
    X = rng.normal(size=(257, 6))
    _, full = predict(m, X)
    for chunk in (1, 7, 64):
        _, part = predict(m, X, chunk=chunk)
        assert part.tobytes() == full.tobytes()


def _loss_fn(model, X, y):
    def f():
        # probe from pristine running statistics each time so state does not drift
        return combined_loss(forward(model, X, update_running=False).probs, y)[0]
    return f


@settings(max_examples=25, deadline=None)
@given(
    d=st.integers(3, 8),
    H=st.integers(4, 16),
    C=st.integers(2, 4),
    affine=st.booleans(),
    seed=st.integers(0, 10**6),
)
def test_gradients_match_finite_differences(d, H, C, affine, seed):
    r = np.random.default_rng(seed)
    model = random_small_model(r, d, H, C, affine)
    X = r.normal(size=(8, d))
    y = r.integers(0, C, 8)
    trace = forward(model, X, update_running=False)
    _, dlogits = combined_loss(trace.probs, y)
    grads = backward(model, trace, dlogits)
    f = _loss_fn(model, X, y)
    assert set(grads) == set(model.parameters())
    for name, p in model.parameters().items():
        num = central_difference(f, p)
        if name == "w1":
            num = num * model.mask_m1
        assert relative_error(grads[name], num).max() < 1e-4, name


def test_gradients_against_torch(rng):
    torch = pytest.importorskip("torch")
    model = random_small_model(rng, 5, 9, 3, affine_trainable=True)
    X = rng.normal(size=(12, 5))
    y = rng.integers(0, 3, 12)
    trace = forward(model, X, update_running=False)
    loss, dlogits = combined_loss(trace.probs, y)
    grads = backward(model, trace, dlogits)

    t = {k: torch.tensor(np.array(v), dtype=torch.float64, requires_grad=True)
         for k, v in model.parameters().items()}
    mask = torch.tensor(model.mask_m1)

    def bn(x, name):
        return torch.nn.functional.batch_norm(x, None, None, t[f"{name}.gamma"], t[f"{name}.beta"],
                                              training=True, eps=1e-5)

    a0 = bn(torch.tensor(X), "bn_in")
    s = torch.sigmoid(bn(a0 @ (t["w1"] * mask).T, "bn_pre"))
    logits = bn(s, "bn_post") @ torch.tensor(np.array(model.w2)).T
    logp = torch.log_softmax(logits, dim=1)
    lpt = logp[torch.arange(12), torch.tensor(y)]
    pt = lpt.exp()
    tl = (0.6 * -lpt + 0.4 * -0.5 * (1 - pt) ** 2.5 * lpt).mean()
    tl.backward()
    assert abs(tl.item() - loss) < 1e-12
    for k, v in t.items():
        np.testing.assert_allclose(grads[k], v.grad.numpy(), rtol=1e-9, atol=1e-12)


def test_save_load_round_trip(tmp_path, rng):
    m = random_small_model(rng, 4, 6, 3)
    forward(m, rng.normal(size=(10, 4)))
    m.eval()
    m.meta = {"class_names": ["a", "b", "c"]}
    m.save(tmp_path / "m")
    back = BranchNetModel.load(tmp_path / "m")
    assert back.mode == "eval" and back.meta == m.meta
    X = rng.normal(size=(9, 4))
    assert predict(back, X)[1].tobytes() == predict(m, X)[1].tobytes()
    assert back.w1.tobytes() == m.w1.tobytes()


def test_snapshot_restore(rng):
    m = random_small_model(rng, 4, 6, 3)
    snap = m.snapshot()
    forward(m, rng.normal(size=(10, 4)))
    m.set_parameter("w1", m.w1 + 1)
    m.restore(snap)
    np.testing.assert_array_equal(m.w1, snap["w1"])
    np.testing.assert_array_equal(m.bn_in.running_mean, np.zeros(4))


def test_frozen_affine_has_only_w1(rng):
    m = random_small_model(rng, 4, 6, 3, affine_trainable=False)
    assert list(m.parameters()) == ["w1"]
    tr = forward(m, rng.normal(size=(5, 4)))
    assert list(backward(m, tr, np.zeros((5, 3)))) == ["w1"]
