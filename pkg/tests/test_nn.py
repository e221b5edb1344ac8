import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cim.errors import ConfigError, ContractError, NumericError, ShapeError
from cim.nn import Adam, Mlp, ParamTensor, load_checkpoint, mlp_init, save_checkpoint

from oracles import fd_grad, rel_err


def straight_line_forward(net, x):
    h = np.asarray(x, float)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for j in range(w.shape[1]):
            acc = b.values[j]
            for k in range(w.shape[0]):
                acc += h[k] * w.values[k, j]
            out.append(acc)
        h = np.array(out)
        if i < len(net.weights) - 1:
            h = np.tanh(h)
    return h


def test_init_deterministic():
    a, b = mlp_init([2, 4, 2], 0), mlp_init([2, 4, 2], 0)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.values, q.values)


@pytest.mark.parametrize("dims", [[3], [], [2, 0, 1]])
def test_init_rejects_degenerate(dims):
    with pytest.raises(ConfigError):
        mlp_init(dims, 0)


def test_param_count():
    assert mlp_init([2, 8, 8, 2], 1).n_params == 114


def test_biases_start_at_zero():
    net = mlp_init([3, 5, 2], 4)
    assert all(not b.values.any() for b in net.biases)


def test_zero_net_outputs_zero():
    net = Mlp.from_arrays([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))])
    assert np.array_equal(net(np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_layer():
    net = Mlp.from_arrays([(np.eye(3), np.zeros(3))])
    x = np.array([0.5, -1.5, 2.0])
    assert np.array_equal(net(x), x)


def test_forward_matches_straight_line():
    rng = np.random.default_rng(0)
    net = mlp_init([4, 7, 5, 3], 3)
    for b in net.biases:
        b.assign(rng.standard_normal(b.shape))
    x = rng.standard_normal(4)
    np.testing.assert_allclose(net(x), straight_line_forward(net, x), rtol=1e-12, atol=1e-14)


def test_batch_and_single_agree():
    net = mlp_init([3, 6, 2], 2)
    xs = np.random.default_rng(1).standard_normal((5, 3))
    batch = net(xs)
    for i, x in enumerate(xs):
        np.testing.assert_allclose(net(x), batch[i], rtol=1e-13, atol=1e-15)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        mlp_init([3, 2], 0)(np.zeros(4))


def test_zero_grad_output_gives_zero_grads():
    net = mlp_init([2, 4, 2], 0)
    out, cache = net.forward(np.array([0.3, -0.2]))
    net.backward(cache, np.zeros(2))
    assert all(not p.grad.any() for p in net.parameters())


def test_linear_layer_weight_grad_is_outer_product():
    w = np.random.default_rng(0).standard_normal((3, 2))
    net = Mlp.from_arrays([(w, np.zeros(2))])
    x, g = np.array([1.0, 2.0, -1.0]), np.array([0.5, -3.0])
    _, cache = net.forward(x)
    gin = net.backward(cache, g)
    np.testing.assert_allclose(net.weights[0].grad, np.outer(x, g))
    np.testing.assert_allclose(gin, w @ g)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = mlp_init([2, 16, 2], seed)
    for b in net.biases:
        b.assign(0.1 * rng.standard_normal(b.shape))
    x = rng.standard_normal((6, 2))
    c = rng.standard_normal((6, 2))

    def loss():
        return float(np.sum(net(x) * c))

    _, cache = net.forward(x)
    gin = net.backward(cache, c)
    for p in net.parameters():
        assert rel_err(p.grad, fd_grad(loss, p.values)) < 1e-4
    assert rel_err(gin, fd_grad(loss, x)) < 1e-4


def test_gradients_accumulate():
    net = mlp_init([2, 3, 1], 0)
    x = np.array([0.1, 0.2])
    _, cache = net.forward(x)
    net.backward(cache, np.ones(1))
    once = [p.grad.copy() for p in net.parameters()]
    net.backward(cache, np.ones(1))
    for p, g in zip(net.parameters(), once):
        np.testing.assert_allclose(p.grad, 2 * g)


def test_stale_cache_rejected():
    net = mlp_init([2, 3, 1], 0)
    _, cache = net.forward(np.ones(2))
    opt = Adam(net.parameters())
    net.weights[0].grad[...] = 1.0
    opt.step()
    with pytest.raises(ContractError):
        net.backward(cache, np.ones(1))
    other = mlp_init([2, 3, 1], 0)
    _, cache = other.forward(np.ones(2))
    with pytest.raises(ContractError):
        net.backward(cache, np.ones(1))


def test_adam_zero_grad_keeps_params():
    net = mlp_init([2, 3, 1], 0)
    before = [p.values.copy() for p in net.parameters()]
    Adam(net.parameters()).step()
    for p, b in zip(net.parameters(), before):
        assert np.array_equal(p.values, b)


def test_adam_first_step_is_lr_times_sign():
    p = ParamTensor(np.array([1.0, -2.0, 0.5]))
    p.grad[...] = [3.0, -0.2, 1e-3]
    Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.values, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], rtol=0, atol=1e-6)
    assert not p.grad.any()


def test_adam_rejects_non_finite():
    p = ParamTensor(np.zeros(2))
    p.grad[...] = [np.nan, 1.0]
    with pytest.raises(NumericError):
        Adam([p]).step()
    assert np.array_equal(p.values, np.zeros(2))
    assert not p.grad.any()


def test_adam_clips_global_norm():
    p = ParamTensor(np.zeros(2))
    opt = Adam([p], lr=1.0, max_grad_norm=1.0)
    p.grad[...] = [30.0, 40.0]
    opt.step()
    # with bias correction the first step is lr * sign regardless of scale
    np.testing.assert_allclose(p.values, [-1.0, -1.0], atol=1e-6)
    np.testing.assert_allclose(opt.m[0], 0.1 * np.array([0.6, 0.8]))


def test_adam_runs_are_reproducible():
    def run():
        net = mlp_init([3, 4, 2], 7)
        opt = Adam(net.parameters(), lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal((8, 3))
            out, cache = net.forward(x)
            net.backward(cache, out)
            opt.step()
        return [p.values.copy() for p in net.parameters()]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.standard_normal((3, 4)),
        "scalar": np.array(np.pi),
        "tiny": np.array([5e-324, -0.0, 1e308]),
        "ünï": rng.standard_normal(7),
    }
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:8] == b"CIMCKPT1"
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.astype("<f8").tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    expected = (b"CIMCKPT1" + (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
                + (1).to_bytes(8, "little") + (2).to_bytes(8, "little") + np.array([1.0, 2.0], "<f8").tobytes())
    assert raw == expected


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT")
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc.ckpt"
    save_checkpoint(trunc, {"w": np.ones(4)})
    trunc.write_bytes(trunc.read_bytes()[:-5])
    with pytest.raises(ConfigError):
        load_checkpoint(trunc)


def test_named_arrays_round_trip():
    a, b = mlp_init([2, 5, 3], 0), mlp_init([2, 5, 3], 9)
    b.load_named(a.named_arrays("enc."), "enc.")
    x = np.array([0.3, 0.9])
    assert np.array_equal(a(x), b(x))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31 - 1))
def test_forward_is_pure_and_finite(dims, seed):
    net = mlp_init(dims, seed)
    x = np.random.default_rng(seed).standard_normal((3, dims[0])) * 100
    y1, y2 = net(x), net(x)
    assert np.array_equal(y1, y2)
    assert np.all(np.isfinite(y1))
    assert net.n_params == sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
