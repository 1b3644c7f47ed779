import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ob2i import DimensionError, TrainingDivergence
from ob2i.ensemble import (
    AdamState, adam_step, backprop_mse, forward_all, forward_batch, global_norm, head_std, init_net,
    load_checkpoint, optimistic_q, save_checkpoint, sync_target, ucb_bonus,
)


def naive_forward(net, x):
    """Loop-based forward pass, one head at a time."""
    h = np.asarray(x, dtype=float)
    for i in range(net.n_trunk):
        W, b = net.params[f"trunk.{i}.W"], net.params[f"trunk.{i}.b"]
        h = np.array([max(sum(h[r] * W[r, c] for r in range(W.shape[0])) + b[c], 0.0) for c in range(W.shape[1])])
    out = []
    for k in range(net.n_heads):
        z = h
        for i in range(net.n_head_layers):
            W, b = net.params[f"head.{i}.W"][k], net.params[f"head.{i}.b"][k]
            z = np.array([sum(z[r] * W[r, c] for r in range(W.shape[0])) + b[c] for c in range(W.shape[1])])
            if i < net.n_head_layers - 1:
                z = np.maximum(z, 0.0)
        out.append(z)
    return np.array(out)


def loss_fn(net, X, actions, y):
    Q = forward_batch(net, X)
    T = X.shape[0]
    return float(np.sum((y - Q[:, np.arange(T), actions]) ** 2) / T)


def finite_difference_check(net, X, actions, y, h=1e-5):
    _, grads = backprop_mse(net, X, actions, y, clip_norm=None)
    K = net.n_heads
    worst = 0.0
    for name, p in net.params.items():
        scale = 1.0 / K if name.startswith("trunk") else 1.0
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn(net, X, actions, y)
            p[idx] = old - h
            down = loss_fn(net, X, actions, y)
            p[idx] = old
            fd = scale * (up - down) / (2 * h)
            an = grads[name][idx]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-7 / 1e-4)
            worst = max(worst, err)
    return worst


class TestInit:
    def test_deterministic(self):
        a, b = init_net(6, (8,), 4, 3, seed=1), init_net(6, (8,), 4, 3, seed=1)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_ten_heads_distinct(self):
        net = init_net(20, (16, 16), 4, 10, seed=0)
        W = net.params["head.0.W"]
        assert W.shape == (10, 16, 4)
        assert len({W[k].tobytes() for k in range(10)}) == 10

    def test_seed_sensitivity(self):
        a, b = init_net(6, (8,), 4, 3, seed=1), init_net(6, (8,), 4, 3, seed=2)
        assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)


class TestForward:
    def test_zero_weights(self):
        net = init_net(5, (4,), 3, 2, seed=0)
        for p in net.params.values():
            p[...] = 0
        np.testing.assert_array_equal(forward_all(net, np.ones(5)), np.zeros((2, 3)))

    def test_linear_head(self):
        net = init_net(3, (), 3, 2, seed=0)
        net.params["head.0.W"][:] = np.eye(3)
        net.params["head.0.b"][:] = [[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]
        x = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(forward_all(net, x), [x + [1, 2, 3], x])

    @pytest.mark.parametrize("trunk,head", [((7, 5), ()), ((6,), (4,)), ((), (5, 3))])
    def test_matches_naive(self, trunk, head):
        net = init_net(4, trunk, 3, 3, seed=9, head_widths=head)
        x = np.random.default_rng(0).normal(size=4)
        np.testing.assert_allclose(forward_all(net, x), naive_forward(net, x), atol=1e-10)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            forward_all(init_net(4, (3,), 2, 2), np.ones(5))


class TestBonus:
    def test_identical_heads(self):
        net = init_net(4, (5,), 3, 4, seed=0)
        for name in ("head.0.W", "head.0.b"):
            net.params[name][:] = net.params[name][0]
        x = np.random.default_rng(1).normal(size=4)
        assert ucb_bonus(net, x, 1) == 0.0
        assert optimistic_q(net, x, 1, alpha=3.0) == pytest.approx(forward_all(net, x)[0, 1])

    def test_two_heads(self):
        net = init_net(1, (), 1, 2, seed=0)
        net.params["head.0.W"][:] = 0
        net.params["head.0.b"][:] = [[1.0], [3.0]]
        assert ucb_bonus(net, np.zeros(1), 0) == 1.0
        assert optimistic_q(net, np.zeros(1), 0, 0.0) == 2.0
        assert optimistic_q(net, np.zeros(1), 0, 2.0) == 4.0

    def test_matches_two_pass(self):
        net = init_net(6, (8,), 4, 10, seed=3)
        x = np.random.default_rng(2).normal(size=6)
        q = forward_all(net, x)[:, 2]
        mean = sum(q) / len(q)
        var = sum((v - mean) ** 2 for v in q) / len(q)
        assert ucb_bonus(net, x, 2) == pytest.approx(np.sqrt(var), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=10), st.integers(0, 1000))
    def test_permutation_invariance_and_zero_iff_agree(self, vals, seed):
        v = np.array(vals)
        perm = np.random.default_rng(seed).permutation(len(v))
        assert head_std(v) == pytest.approx(head_std(v[perm]), abs=1e-12)
        assert (head_std(v) == 0.0) == bool(np.all(v == v[0]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.floats(0, 5), st.floats(0, 5))
    def test_optimism_monotone_in_alpha(self, seed, a1, a2):
        net = init_net(3, (4,), 2, 5, seed=seed)
        x = np.random.default_rng(seed).normal(size=3)
        lo, hi = sorted((a1, a2))
        assert optimistic_q(net, x, 0, lo) <= optimistic_q(net, x, 0, hi)
        assert optimistic_q(net, x, 0, 0.0) == pytest.approx(forward_all(net, x)[:, 0].mean())


class TestBackprop:
    def test_zero_at_optimum(self):
        net = init_net(4, (6,), 3, 3, seed=0)
        rng = np.random.default_rng(0)
        X, acts = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
        y = forward_batch(net, X)[:, np.arange(5), acts]
        loss, grads = backprop_mse(net, X, acts, y)
        assert loss == 0.0 and global_norm(grads) == 0.0

    def test_scalar_chain_rule(self):
        net = init_net(1, (), 1, 1, seed=0)
        net.params["head.0.W"][:] = 0.7
        net.params["head.0.b"][:] = 0.0
        x, y = 2.0, 3.0
        _, grads = backprop_mse(net, np.array([[x]]), [0], np.array([[y]]))
        q = 0.7 * x
        assert grads["head.0.W"][0, 0, 0] == pytest.approx(2 * (q - y) * x)

    @pytest.mark.parametrize("trunk,head,K", [((6,), (), 3), ((5, 4), (), 2), ((4,), (3,), 2), ((), (6,), 3)])
    def test_finite_differences(self, trunk, head, K):
        net = init_net(3, trunk, 2, K, seed=4, head_widths=head)
        assert net.n_params <= 200
        rng = np.random.default_rng(5)
        X, acts = rng.normal(size=(6, 3)), rng.integers(0, 2, size=6)
        y = rng.normal(size=(K, 6))
        assert finite_difference_check(net, X, acts, y) <= 1e-4

    def test_clipping(self):
        net = init_net(4, (6,), 3, 3, seed=0)
        rng = np.random.default_rng(0)
        X, acts = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
        y = np.full((3, 5), 1e4)
        _, grads = backprop_mse(net, X, acts, y)
        assert global_norm(grads) <= 10 + 1e-9
        _, raw = backprop_mse(net, X, acts, y, clip_norm=None)
        assert global_norm(raw) > 10

    def test_divergence(self):
        net = init_net(2, (3,), 2, 2, seed=0)
        with pytest.raises(TrainingDivergence):
            backprop_mse(net, np.ones((1, 2)), [0], np.array([[np.inf], [0.0]]))


class TestAdam:
    def test_zero_gradient_moments_decay(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.for_params(params)
        state.m["w"][:] = [0.5, 0.5]
        state.v["w"][:] = [0.2, 0.2]
        adam_step(params, {"w": np.zeros(2)}, state)
        assert state.step == 1
        np.testing.assert_allclose(state.m["w"], [0.45, 0.45])
        np.testing.assert_allclose(state.v["w"], [0.2 * 0.999] * 2)

    def test_zero_gradient_fresh_moments_unchanged(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_sign(self):
        params = {"w": np.array([1.0, 1.0, 1.0])}
        g = np.array([0.3, -2.0, 1e-3])
        adam_step(params, {"w": g}, AdamState.for_params(params, lr=1e-3))
        np.testing.assert_allclose(params["w"], 1.0 - 1e-3 * np.sign(g), atol=1e-3 * 1e-3)

    def test_quadratic_bowl(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=5)
        params = {"w": np.zeros(5)}
        state = AdamState.for_params(params, lr=0.01)
        losses = []
        for _ in range(100):
            diff = params["w"] - target
            losses.append(float(diff @ diff))
            adam_step(params, {"w": 2 * diff}, state)
        assert all(b < a for a, b in zip(losses[5:], losses[6:]))


class TestTargetAndCheckpoint:
    def test_sync_decouples(self):
        net = init_net(4, (5,), 3, 3, seed=0)
        target = sync_target(net)
        x = np.ones(4)
        np.testing.assert_array_equal(forward_all(net, x), forward_all(target, x))
        X, acts, y = np.ones((2, 4)), [0, 1], np.ones((3, 2)) * 5
        _, grads = backprop_mse(net, X, acts, y)
        adam_step(net.params, grads, AdamState.for_params(net.params))
        assert not np.array_equal(forward_all(net, x), forward_all(target, x))
        again = sync_target(sync_target(net))
        np.testing.assert_array_equal(forward_all(again, x), forward_all(net, x))

    def test_checkpoint_round_trip(self, tmp_path):
        net = init_net(4, (5,), 3, 3, seed=2)
        adam = AdamState.for_params(net.params)
        _, grads = backprop_mse(net, np.ones((2, 4)), [0, 1], np.ones((3, 2)))
        adam_step(net.params, grads, adam)
        save_checkpoint(net, tmp_path / "ckpt", adam, extra={"frame": 7})
        net2, adam2, manifest = load_checkpoint(tmp_path / "ckpt")
        assert manifest["n_heads"] == 3 and manifest["extra"] == {"frame": 7}
        for n in net.params:
            np.testing.assert_array_equal(net.params[n], net2.params[n])
            np.testing.assert_array_equal(adam.v[n], adam2.v[n])
        assert adam2.step == 1
