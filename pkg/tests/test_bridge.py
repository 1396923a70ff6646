import numpy as np
import pytest

from rsbridge import bridge, toydata
from rsbridge.bridge import DivergenceError, DriftRole, TimeGrid, drift_eval, rollout, transition
from rsbridge.nnet import init_params, net_forward

N_MC = 100_000


def moment_bounds(x, mean, var, n_sigma=5.0):
    """Assert per-coordinate sample mean/variance agree with (mean, var) within n_sigma."""
    n = len(x)
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(x.mean(axis=0) - mean) < n_sigma * se_mean)
    assert np.all(np.abs(x.var(axis=0, ddof=1) - var) < n_sigma * se_var)


def discrete_vp_moments(x0, role, grid):
    """Exact mean and variance of the linear Gaussian chain x <- (1 - g beta / 2) x + sqrt(2 g) z."""
    m, v = np.asarray(x0, dtype=np.float64), 0.0
    for t, g in enumerate(grid.gamma):
        a = 1.0 - 0.5 * g * float(bridge.vp_beta(role, t, grid.T))
        m, v = a * m, a * a * v + 2.0 * g
    return m, v


class TestTimeGrid:
    def test_uniform(self):
        g = TimeGrid.uniform(8, 2.0)
        assert g.T == 8 and np.allclose(g.gammas, 0.25)

    @pytest.mark.parametrize("gamma", [(), (0.1, 0.0), (0.1, -1.0), (float("inf"),)])
    def test_rejects_bad_steps(self, gamma):
        with pytest.raises(ValueError):
            TimeGrid(gamma)

    def test_rejects_t_zero(self):
        with pytest.raises(ValueError):
            TimeGrid.uniform(0)


class TestDrift:
    def test_zero(self):
        x = np.random.default_rng(0).normal(size=(5, 2))
        assert np.array_equal(drift_eval(DriftRole.zero(), x, 3, TimeGrid.uniform(8)), np.zeros((5, 2)))

    def test_vp_constant(self):
        role = DriftRole.vp_linear(1.7, 1.7)
        out = drift_eval(role, np.array([[2.0, 0.0]]), 4, TimeGrid.uniform(8))
        np.testing.assert_allclose(out, [[-1.7, 0.0]])

    def test_vp_interpolates(self):
        role = DriftRole.vp_linear(0.1, 3.0)
        grid = TimeGrid.uniform(10)
        out = drift_eval(role, np.array([[1.0, 1.0]]), 5, grid)
        np.testing.assert_allclose(out, -0.5 * (0.1 + 2.9 * 0.5) * np.ones((1, 2)))

    def test_learned_delegates(self):
        p = init_params(np.random.default_rng(1), hidden=(8,), time_embed_dim=4, zero_last=False)
        x = np.random.default_rng(2).normal(size=(6, 2))
        grid = TimeGrid.uniform(8)
        assert np.array_equal(drift_eval(DriftRole.learned(p), x, 5, grid), net_forward(p, x, 5, 8))

    def test_role_validation(self):
        with pytest.raises(ValueError):
            DriftRole.vp_linear(2.0, 1.0)
        with pytest.raises(ValueError):
            DriftRole("learned")

    def test_stamps_distinguish_processes(self):
        p = init_params(np.random.default_rng(1), hidden=(8,), time_embed_dim=4)
        q = init_params(np.random.default_rng(2), hidden=(8,), time_embed_dim=4)
        stamps = {DriftRole.zero().stamp, DriftRole.vp_linear(0.1, 3).stamp, DriftRole.learned(p).stamp, DriftRole.learned(q).stamp}
        assert len(stamps) == 4


class TestTransition:
    def test_vanishing_step(self):
        grid = TimeGrid((1e-30,))
        x = np.random.default_rng(0).normal(size=(10, 2))
        out = transition(DriftRole.vp_linear(1.0, 1.0), x, 0, grid, np.random.default_rng(1))
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-14)

    def test_zero_drift_moments(self):
        grid = TimeGrid((0.5,))
        x = np.tile([[1.0, -2.0]], (N_MC, 1))
        out = transition(DriftRole.zero(), x, 0, grid, np.random.default_rng(3))
        g = 0.5
        assert np.all(np.abs(out.mean(axis=0) - [1.0, -2.0]) < 3 * np.sqrt(2 * g / N_MC))
        np.testing.assert_allclose(out.var(axis=0), 2 * g, rtol=0.05)

    def test_drift_moments(self):
        grid = TimeGrid.uniform(4, 1.0)
        role = DriftRole.vp_linear(2.0, 2.0)
        x = np.tile([[3.0, 1.0]], (N_MC, 1))
        out = transition(role, x, 2, grid, np.random.default_rng(4))
        g = 0.25
        moment_bounds(out, x[0] + g * drift_eval(role, x[:1], 2, grid)[0], 2 * g)

    def test_backward_uses_previous_step_size(self):
        grid = TimeGrid((0.1, 0.7))
        x = np.zeros((N_MC, 2))
        out = transition(DriftRole.zero(), x, 1, grid, np.random.default_rng(5), direction="backward")
        moment_bounds(out, 0.0, 2 * 0.1)

    def test_noise_free_is_mean(self):
        grid = TimeGrid.uniform(4)
        x = np.random.default_rng(6).normal(size=(5, 2))
        role = DriftRole.vp_linear(1.0, 1.0)
        out = transition(role, x, 1, grid, np.random.default_rng(7), noise=False)
        assert np.array_equal(out, x + 0.25 * drift_eval(role, x, 1, grid))

    def test_index_range(self):
        grid = TimeGrid.uniform(4)
        with pytest.raises(ValueError):
            transition(DriftRole.zero(), np.zeros((1, 2)), 4, grid, np.random.default_rng(0))
        with pytest.raises(ValueError):
            transition(DriftRole.zero(), np.zeros((1, 2)), 0, grid, np.random.default_rng(0), direction="backward")

    def test_divergence_reports_timestep(self):
        grid = TimeGrid.uniform(4)
        x = np.full((2, 2), 1e308)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError) as err:
                transition(DriftRole.vp_linear(1e10, 1e10), x, 2, grid, np.random.default_rng(0))
        assert err.value.timestep == 2


class TestRollout:
    def test_single_step_has_two_slices(self):
        traj = rollout(DriftRole.zero(), np.zeros((3, 2)), TimeGrid.uniform(1), np.random.default_rng(0))
        assert traj.states.shape == (2, 3, 2)

    def test_brownian_variance_accumulates(self):
        grid = TimeGrid.uniform(5, 1.5)
        traj = rollout(DriftRole.zero(), np.zeros((N_MC, 2)), grid, np.random.default_rng(1))
        moment_bounds(traj.states[-1] - traj.states[0], 0.0, 2 * 1.5)

    def test_deterministic(self):
        grid = TimeGrid.uniform(8)
        x = np.random.default_rng(2).normal(size=(50, 2))
        a = rollout(DriftRole.vp_linear(0.1, 3.0), x, grid, np.random.default_rng(9))
        b = rollout(DriftRole.vp_linear(0.1, 3.0), x, grid, np.random.default_rng(9))
        assert np.array_equal(a.states, b.states)

    def test_time_order(self):
        grid = TimeGrid.uniform(3)
        x = np.zeros((4, 2))
        f = rollout(DriftRole.zero(), x, grid, np.random.default_rng(0), "forward")
        b = rollout(DriftRole.zero(), x, grid, np.random.default_rng(0), "backward")
        assert np.array_equal(f.time_ordered()[0], x)
        assert np.array_equal(b.time_ordered()[-1], x)

    @pytest.mark.parametrize("direction,expected", [("forward", [0, 1, 2, 3, 4, 5]), ("backward", [6, 5, 4, 3, 2, 1])])
    def test_drift_index_log(self, monkeypatch, direction, expected):
        seen = []
        real = bridge.drift_eval

        def logged(role, x, t, grid):
            seen.append(int(t))
            return real(role, x, t, grid)

        monkeypatch.setattr(bridge, "drift_eval", logged)
        rollout(DriftRole.zero(), np.zeros((2, 2)), TimeGrid.uniform(6), np.random.default_rng(0), direction)
        assert seen == expected

    def test_final_mean_drops_last_noise(self):
        grid = TimeGrid.uniform(2)
        x = np.ones((4, 2))
        traj = rollout(DriftRole.zero(), x, grid, np.random.default_rng(0), final_mean=True)
        assert np.array_equal(traj.states[2], traj.states[1])

    def test_rejects_non_finite_start(self):
        with pytest.raises(ValueError):
            rollout(DriftRole.zero(), np.array([[np.nan, 0.0]]), TimeGrid.uniform(2), np.random.default_rng(0))

    def test_csv(self, tmp_path):
        traj = rollout(DriftRole.zero(), np.zeros((3, 2)), TimeGrid.uniform(2), np.random.default_rng(0))
        path = tmp_path / "traj.csv"
        traj.to_csv(path, scale=2.0)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,sample_id,x,y"
        assert len(lines) == 1 + 3 * 3
        t, i, x, y = lines[-1].split(",")
        assert (t, i) == ("2", "2") and float(x) == 2.0 * traj.states[2, 2, 0]


class TestVPOracle:
    def test_constant_beta_matches_sde_closed_form(self):
        # with beta = 2 the kernel x + g(-x) + sqrt(2g) z is the Euler step of the VP SDE
        horizon = 1.0
        grid = TimeGrid.uniform(1000, horizon)
        x0 = np.array([1.5, -0.5])
        traj = rollout(DriftRole.vp_linear(2.0, 2.0), np.tile(x0, (N_MC, 1)), grid, np.random.default_rng(11))
        mean, var = bridge.vp_closed_form(x0, 2.0, 2.0, horizon)
        moment_bounds(traj.terminal, mean, var)

    def test_linear_schedule_matches_exact_discrete_chain(self):
        grid = TimeGrid.uniform(8, 1.0)
        role = DriftRole.vp_linear(0.1, 3.0)
        x0 = np.array([2.0, 1.0])
        traj = rollout(role, np.tile(x0, (N_MC, 1)), grid, np.random.default_rng(12))
        mean, var = discrete_vp_moments(x0, role, grid)
        moment_bounds(traj.terminal, mean, var)

    def test_closed_form_values(self):
        mean, var = bridge.vp_closed_form(np.array([1.0, 0.0]), 0.0, 0.0, 3.0)
        assert np.array_equal(mean, [1.0, 0.0]) and var == 0.0
        mean, var = bridge.vp_closed_form(np.array([1.0, 0.0]), 2.0, 2.0, 0.5)
        np.testing.assert_allclose(mean, [np.exp(-0.5), 0.0])
        assert var == pytest.approx(1 - np.exp(-1.0))

    def test_data_standardizes_under_long_noising(self):
        spec = toydata.ToySpec.default("eight_gaussians")
        x = toydata.sample(spec, 20_000, np.random.default_rng(13)) / spec.standardizer
        traj = rollout(DriftRole.vp_linear(2.0, 2.0), x, TimeGrid.uniform(200, 6.0), np.random.default_rng(14))
        out = traj.terminal
        n = len(out)
        assert np.all(np.abs(out.mean(axis=0)) < 5 / np.sqrt(n))
        cov = np.cov(out.T)
        assert np.max(np.abs(cov - np.eye(2))) < 5 * np.sqrt(2.0 / n)
