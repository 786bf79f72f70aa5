import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flextrain.losses import base_loss
from flextrain.nn import (DivergenceError, GradientSet, ResidualNet, SGD, StaleTraceError,
                          backward_prefix, forward_prefix, init_net, load_checkpoint,
                          save_checkpoint, sgd_step)


def make_batch(net, n=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, net.input_dim)), rng.integers(0, net.num_classes, n)


def randomize_branches(net, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for name, v in net.params.items():
        net.params[name] = rng.standard_normal(v.shape) * scale
    net.touch()
    return net


def ce_at_depth(net, x, y, k):
    return base_loss(forward_prefix(net, x, k).logits, y)[0].base_term


# -- init ---------------------------------------------------------------------

def test_init_deterministic():
    a = init_net(2, 8, 3, 4, seed=7)
    b = init_net(2, 8, 3, 4, seed=7)
    for n in a.params:
        assert np.array_equal(a.params[n], b.params[n])


def test_init_seed_sensitive():
    a = init_net(2, 8, 3, 4, seed=7)
    b = init_net(2, 8, 3, 4, seed=8)
    assert not np.array_equal(a.params["pre.W"], b.params["pre.W"])


def test_prefix_counts_monotone():
    net = init_net(2, 8, 3, 6, seed=0)
    counts = [net.prefix_param_count(k) for k in range(1, 7)]
    assert all(b > a for a, b in zip(counts, counts[1:]))
    assert net.prefix_param_count(6) > net.prefix_param_count(1)


@pytest.mark.parametrize("dims", [(0, 8, 3, 4), (2, 0, 3, 4), (2, 8, -1, 4), (2, 8, 3, 0)])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        init_net(*dims, seed=0)


def test_fresh_blocks_are_identity():
    net = init_net(3, 6, 2, 5, seed=1)
    x, _ = make_batch(net)
    t = forward_prefix(net, x, 5)
    for h in t.stream[1:]:
        assert np.array_equal(h, t.stream[0])


# -- forward ------------------------------------------------------------------

def test_zero_branches_give_depth_independent_logits():
    net = randomize_branches(init_net(2, 8, 3, 4, seed=0))
    for m in range(1, 5):
        for n in ("W1", "b1", "W2", "b2"):
            net.params[f"block{m}.{n}"][...] = 0.0
    x, _ = make_batch(net)
    assert np.array_equal(forward_prefix(net, x, 1).logits, forward_prefix(net, x, 4).logits)


def test_prefix_consistency_with_zeroed_tail():
    net = randomize_branches(init_net(2, 8, 3, 5, seed=0), seed=3)
    for m in (4, 5):
        for n in ("W2", "b2"):
            net.params[f"block{m}.{n}"][...] = 0.0
    x, _ = make_batch(net)
    assert np.array_equal(forward_prefix(net, x, 3).logits, forward_prefix(net, x, 5).logits)


def test_hand_computed_logits_single_block():
    net = ResidualNet(2, 2, 2, 1)
    net.params = {
        "pre.W": np.array([[1.0, -1.0], [2.0, 0.5]]), "pre.b": np.array([0.5, 0.0]),
        "block1.W1": np.array([[1.0, 0.0], [-1.0, 1.0]]), "block1.b1": np.array([0.0, -0.5]),
        "block1.W2": np.array([[2.0, 1.0], [0.0, -1.0]]), "block1.b2": np.array([0.1, 0.2]),
        "head.W": np.array([[1.0, 2.0], [-1.0, 0.0]]), "head.b": np.array([0.0, 1.0]),
    }
    x = np.array([[1.0, 1.0]])
    # pre: [1+2+0.5, -1+0.5] = [3.5, -0.5] -> relu [3.5, 0]
    # z1 = [3.5, 0] @ W1 + b1 = [3.5, -0.5] -> relu [3.5, 0]
    # h1 = [3.5, 0] + [7.1, 3.7] = [10.6, 3.7]
    # norm: mean 7.15, centered [3.45, -3.45], std sqrt(3.45^2 + eps)
    c = 3.45 / np.sqrt(3.45 ** 2 + 1e-5)
    f = np.array([c, -c])
    expected = np.array([f[0] - f[1], 2 * f[0] + 1.0])
    np.testing.assert_allclose(forward_prefix(net, x, 1).logits[0], expected, rtol=1e-14)
    np.testing.assert_allclose(forward_prefix(net, x, 1).stream[1][0], [10.6, 3.7], rtol=1e-14)


def test_forward_rejects_bad_depth_and_shape():
    net = init_net(2, 4, 3, 3, seed=0)
    with pytest.raises(ValueError):
        forward_prefix(net, np.zeros((2, 2)), 4)
    with pytest.raises(ValueError):
        forward_prefix(net, np.zeros((2, 2)), 0)
    with pytest.raises(ValueError):
        forward_prefix(net, np.zeros((2, 3)), 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(1, 5), data=st.data())
def test_prefix_nesting(seed, K, data):
    net = randomize_branches(init_net(3, 5, 2, K, seed=seed), seed=seed)
    k = data.draw(st.integers(1, K))
    k2 = data.draw(st.integers(k, K))
    x, _ = make_batch(net, seed=seed)
    a, b = forward_prefix(net, x, k), forward_prefix(net, x, k2)
    for j in range(k + 1):
        assert np.array_equal(a.stream[j], b.stream[j])
        assert np.array_equal(a.features[j], b.features[j])


# -- backward -----------------------------------------------------------------

def finite_difference(f, net, name, eps=1e-5):
    grad = np.zeros_like(net.params[name])
    it = np.nditer(grad, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = net.params[name][i]
        net.params[name][i] = orig + eps
        up = f()
        net.params[name][i] = orig - eps
        down = f()
        net.params[name][i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


@pytest.mark.parametrize("K,k,hidden,seed", [(1, 1, 4, 0), (3, 2, 6, 1), (4, 4, 8, 2), (4, 1, 8, 3)])
def test_backward_matches_finite_differences(K, k, hidden, seed):
    net = randomize_branches(init_net(3, hidden, 3, K, seed=seed), seed=seed)
    x, y = make_batch(net, n=6, seed=seed)
    trace = forward_prefix(net, x, k)
    _, dlogits = base_loss(trace.logits, y)
    grads = backward_prefix(net, trace, dlogits, k)
    for name in net.param_names(k):
        fd = finite_difference(lambda: ce_at_depth(net, x, y, k), net, name)
        assert rel_err(grads[name], fd) <= 1e-4, name


def test_zero_upstream_gives_zero_gradients():
    net = randomize_branches(init_net(2, 4, 3, 3, seed=0))
    x, _ = make_batch(net)
    trace = forward_prefix(net, x, 3)
    grads = backward_prefix(net, trace, np.zeros_like(trace.logits), 3)
    assert all(not np.any(g) for g in grads.grads.values())


def test_inactive_blocks_get_zero_gradient():
    net = randomize_branches(init_net(2, 4, 3, 3, seed=0))
    x, y = make_batch(net)
    trace = forward_prefix(net, x, 1)
    grads = backward_prefix(net, trace, base_loss(trace.logits, y)[1], 1)
    for m in (2, 3):
        for n in ("W1", "b1", "W2", "b2"):
            assert not np.any(grads[f"block{m}.{n}"])
    assert np.any(grads["block1.W1"])


def test_stale_trace_rejected():
    net = init_net(2, 4, 3, 2, seed=0)
    x, y = make_batch(net)
    trace = forward_prefix(net, x, 2)
    dl = base_loss(trace.logits, y)[1]
    sgd_step(net, backward_prefix(net, trace, dl, 2), lr=0.1)
    with pytest.raises(StaleTraceError):
        backward_prefix(net, trace, dl, 2)


# -- SGD ----------------------------------------------------------------------

def constant_grads(net, k, value=1.0):
    grads = {n: np.zeros_like(v) for n, v in net.params.items()}
    for n in net.param_names(k):
        grads[n] = np.full_like(net.params[n], value)
    return GradientSet(grads, k, net.param_names(k))


def test_plain_sgd_update():
    net = randomize_branches(init_net(2, 4, 3, 2, seed=0))
    before = {n: v.copy() for n, v in net.params.items()}
    g = constant_grads(net, 2, 0.5)
    sgd_step(net, g, lr=0.1)
    for n in net.params:
        np.testing.assert_array_equal(net.params[n], before[n] - 0.1 * g[n])


def test_zero_lr_leaves_net_unchanged():
    net = randomize_branches(init_net(2, 4, 3, 2, seed=0))
    before = {n: v.copy() for n, v in net.params.items()}
    SGD(0.0, momentum=0.9, weight_decay=0.1).step(net, constant_grads(net, 2), 2)
    for n in net.params:
        np.testing.assert_array_equal(net.params[n], before[n])


def test_momentum_two_steps_by_hand():
    net = ResidualNet(1, 1, 1, 1)
    net.params = {n: np.array([[1.0]]) if n.endswith("W") or n.endswith(("W1", "W2"))
                  else np.array([1.0]) for n in net.param_names()}
    opt = SGD(lr=0.1, momentum=0.9, weight_decay=0.0)
    g = constant_grads(net, 1, 2.0)
    opt.step(net, g, 1)
    opt.step(net, g, 1)
    # v1 = 2, w1 = 1 - 0.2 = 0.8; v2 = 0.9*2 + 2 = 3.8, w2 = 0.8 - 0.38 = 0.42
    for n in net.params:
        np.testing.assert_allclose(net.params[n], 0.42, rtol=1e-15)


def test_weight_decay_enters_velocity():
    net = ResidualNet(1, 1, 1, 1)
    net.params = {n: np.array([[2.0]]) if "W" in n else np.array([2.0]) for n in net.param_names()}
    SGD(lr=0.5, momentum=0.0, weight_decay=0.1).step(net, constant_grads(net, 1, 1.0), 1)
    # v = 1 + 0.1*2 = 1.2; w = 2 - 0.6
    for n in net.params:
        np.testing.assert_allclose(net.params[n], 1.4, rtol=1e-15)


def test_sgd_touches_only_prefix():
    net = randomize_branches(init_net(2, 4, 3, 3, seed=0))
    before = {n: v.copy() for n, v in net.params.items()}
    opt = SGD(0.1, momentum=0.9, weight_decay=0.01)
    opt.step(net, constant_grads(net, 1), 1)
    for m in (2, 3):
        for n in ("W1", "b1", "W2", "b2"):
            assert np.array_equal(net.params[f"block{m}.{n}"], before[f"block{m}.{n}"])
            assert f"block{m}.{n}" not in opt.velocity


def test_nan_gradient_aborts():
    net = init_net(2, 4, 3, 2, seed=0)
    g = constant_grads(net, 2)
    g.grads["block2.W1"][0, 0] = np.nan
    with pytest.raises(DivergenceError, match="block2.W1"):
        sgd_step(net, g, lr=0.1)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = randomize_branches(init_net(3, 5, 4, 3, seed=11), seed=5)
    net.seed = 11
    save_checkpoint(net, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert (back.K, back.input_dim, back.hidden_dim, back.num_classes, back.seed) == (3, 3, 5, 4, 11)
    for n in net.params:
        assert net.params[n].tobytes() == back.params[n].tobytes()
    manifest = (tmp_path / "ck" / "manifest.txt").read_text()
    assert "format_version=1" in manifest and "arrays=pre.W:3x5,pre.b:5," in manifest
    assert (tmp_path / "ck" / "weights.bin").stat().st_size == 8 * net.n_params


def test_checkpoint_truncated_rejected(tmp_path):
    net = init_net(2, 4, 3, 2, seed=0)
    save_checkpoint(net, tmp_path / "ck")
    raw = (tmp_path / "ck" / "weights.bin").read_bytes()
    (tmp_path / "ck" / "weights.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "ck")
