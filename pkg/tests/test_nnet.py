import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsbridge.nnet import (
    AdamConfig,
    NonFiniteError,
    ParameterSet,
    StructuralError,
    init_optimizer,
    init_params,
    loss_and_grad,
    net_forward,
    optimizer_step,
    time_embedding,
    zeros_like,
)

from conftest import fd_gradient, max_rel_error


def hand_forward(params, x, t, T):
    """Row-by-row re-evaluation with explicit loops, independent of the vectorised path."""
    half = params.time_embed_dim // 2
    freqs = [np.exp(k * np.log(200.0) / (half - 1)) for k in range(half)]
    s = t / T
    emb = [np.sin(s * f) for f in freqs] + [np.cos(s * f) for f in freqs]
    out = []
    for row in x:
        h = list(row) + emb
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            z = [sum(w[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(w.shape[0])]
            if k < len(params.weights) - 1:
                z = [max(v, 0.0) for v in z]
            h = z
        out.append(h)
    return np.array(out)


class TestForward:
    def test_zero_net_gives_zero(self):
        p = zeros_like(init_params(np.random.default_rng(0)))
        x = np.random.default_rng(1).normal(size=(5, 2))
        assert np.array_equal(net_forward(p, x, 3, 8), np.zeros((5, 2)))

    def test_deterministic(self, small_net):
        x = np.random.default_rng(1).normal(size=(7, 2))
        assert np.array_equal(net_forward(small_net, x, 0, 8), net_forward(small_net, x, 0, 8))

    def test_matches_hand_rolled_relu(self):
        p = init_params(np.random.default_rng(5), hidden=(16,), time_embed_dim=8, activation="relu", zero_last=False)
        x = np.array([[1.0, 1.0]])
        np.testing.assert_allclose(net_forward(p, x, 0, 8), hand_forward(p, x, 0, 8), rtol=1e-12, atol=1e-14)
        x = np.random.default_rng(2).normal(size=(3, 2))
        np.testing.assert_allclose(net_forward(p, x, 5, 8), hand_forward(p, x, 5, 8), rtol=1e-12, atol=1e-14)

    def test_per_row_timesteps(self, small_net):
        x = np.random.default_rng(1).normal(size=(4, 2))
        t = np.array([0, 3, 3, 8])
        rows = np.concatenate([net_forward(small_net, x[i : i + 1], int(t[i]), 8) for i in range(4)])
        np.testing.assert_allclose(net_forward(small_net, x, t, 8), rows, rtol=1e-13, atol=1e-15)

    def test_dimension_mismatch(self, small_net):
        with pytest.raises(StructuralError):
            net_forward(small_net, np.zeros((3, 3)), 0, 8)

    def test_timestep_out_of_range(self, small_net):
        with pytest.raises(ValueError):
            net_forward(small_net, np.zeros((3, 2)), 9, 8)

    def test_embedding_shape(self):
        assert time_embedding(np.arange(5), 8, 32).shape == (5, 32)

    def test_rejects_non_chaining_layers(self):
        w = (np.zeros((4, 10)), np.zeros((2, 5)))
        b = (np.zeros(4), np.zeros(2))
        with pytest.raises(StructuralError):
            ParameterSet(w, b, 8, "silu")

    def test_rejects_non_finite(self):
        w = (np.full((2, 10), np.nan),)
        with pytest.raises(NonFiniteError):
            ParameterSet(w, (np.zeros(2),), 8, "silu")


class TestLossAndGrad:
    def test_targets_equal_predictions(self, small_net):
        x = np.random.default_rng(1).normal(size=(6, 2))
        pred = net_forward(small_net, x, 2, 8)
        loss, grad = loss_and_grad(small_net, x, 2, 8, pred)
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grad.arrays())

    def test_zero_net_unit_target(self):
        p = zeros_like(init_params(np.random.default_rng(0)))
        x = np.tile([1.0, 0.0], (4, 1))
        loss, _ = loss_and_grad(p, x, 0, 8, x.copy())
        assert loss == 1.0

    def test_empty_batch(self, small_net):
        with pytest.raises(ValueError):
            loss_and_grad(small_net, np.zeros((0, 2)), 0, 8, np.zeros((0, 2)))

    @pytest.mark.parametrize("activation", ["silu", "tanh"])
    def test_finite_differences(self, activation):
        rng = np.random.default_rng(11)
        p = init_params(rng, hidden=(16, 16), time_embed_dim=8, activation=activation, zero_last=False)
        assert p.n_params <= 1000
        x = rng.normal(size=(9, 2))
        y = rng.normal(size=(9, 2))
        t = rng.integers(0, 9, size=9)
        _, grad = loss_and_grad(p, x, t, 8, y)
        fd = fd_gradient(lambda q: loss_and_grad(q, x, t, 8, y)[0], p)
        assert max_rel_error(grad.arrays(), fd) < 1e-4

    def test_gradient_deterministic(self, small_net):
        x = np.random.default_rng(1).normal(size=(6, 2))
        y = np.random.default_rng(2).normal(size=(6, 2))
        _, g1 = loss_and_grad(small_net, x, 1, 8, y)
        _, g2 = loss_and_grad(small_net, x, 1, 8, y)
        assert all(np.array_equal(a, b) for a, b in zip(g1.arrays(), g2.arrays()))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 20))
    def test_loss_non_negative(self, seed, n):
        rng = np.random.default_rng(seed)
        p = init_params(rng, hidden=(8,), time_embed_dim=4, zero_last=False)
        loss, _ = loss_and_grad(p, rng.normal(size=(n, 2)) * 5, 1, 4, rng.normal(size=(n, 2)) * 5)
        assert loss >= 0.0


def scalar_params(value):
    # 2+2 -> 1 hidden -> 2: the first weight entry plays the "single scalar parameter"
    w = (np.array([[value, 0.0, 0.0, 0.0]]), np.zeros((2, 1)))
    b = (np.zeros(1), np.zeros(2))
    return ParameterSet(w, b, 2, "tanh")


class TestAdam:
    def test_zero_gradient_keeps_params(self, small_net):
        state = init_optimizer(small_net)
        new, state = optimizer_step(small_net, zeros_like(small_net), state)
        assert all(np.array_equal(a, b) for a, b in zip(new.arrays(), small_net.arrays()))
        assert state.step == 1

    def test_first_step_moves_by_lr(self):
        p = scalar_params(0.7)
        g = p.map(np.zeros_like)
        g.weights[0][0, 0] = 1.0
        state = init_optimizer(p, AdamConfig(lr=0.1))
        new, state = optimizer_step(p, g, state)
        # m_hat = 1, v_hat = 1  ->  step = lr / (1 + eps)
        assert new.weights[0][0, 0] == pytest.approx(0.7 - 0.1, rel=0, abs=1e-9)
        assert state.step == 1

    def test_two_steps_hand_computed(self):
        p = scalar_params(0.0)
        g = p.map(np.zeros_like)
        g.weights[0][0, 0] = 2.0
        hp = AdamConfig(lr=0.01)
        state = init_optimizer(p, hp)
        p1, state = optimizer_step(p, g, state)
        p2, state = optimizer_step(p1, g, state)
        m = (1 - 0.9) * 2.0
        v = (1 - 0.999) * 4.0
        m = 0.9 * m + 0.1 * 2.0
        v = 0.999 * v + 0.001 * 4.0
        assert state.step == 2
        assert state.m.weights[0][0, 0] == pytest.approx(m, rel=1e-15)
        assert state.v.weights[0][0, 0] == pytest.approx(v, rel=1e-15)
        step2 = 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p2.weights[0][0, 0] == pytest.approx(-0.01 * 2.0 / (2.0 + 1e-8) - step2, rel=1e-12)

    def test_non_finite_gradient_raises(self, small_net):
        g = small_net.map(np.zeros_like)
        g.biases[0][0] = np.inf
        with pytest.raises(NonFiniteError):
            optimizer_step(small_net, g, init_optimizer(small_net))
