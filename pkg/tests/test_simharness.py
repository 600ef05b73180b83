import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swarmloc.geom3d import log_so3
from swarmloc.sensors import NoiseSpec, SwarmLayout, state_dim
from swarmloc.simharness import (
    GROUPS,
    ScenarioConfig,
    TrajectorySpec,
    average_nees,
    generate_trajectory,
    nees,
    nees_bounds,
    normalized_error_squared,
    rmse,
    run_monte_carlo,
    run_trial,
    with_parallel_baselines,
)

MINIMAL = SwarmLayout(([[0, 0, 0], [0.3, 0, 0]], [[0, 0, 0], [0, 0.3, 0]], [[0, 0, 0]]))
SHORT = TrajectorySpec(duration=5.0, seed=3)


class TestTrajectory:
    def test_zero_amplitudes_static(self):
        spec = TrajectorySpec(duration=2.0, translation_amplitude=0.0, rotation_amplitude=0.0)
        truth = generate_trajectory(spec, 4, 100.0, seed=0)
        np.testing.assert_array_equal(truth.rel_pos, np.broadcast_to(truth.rel_pos[0], truth.rel_pos.shape))
        np.testing.assert_array_equal(truth.rel_vel, 0.0)
        np.testing.assert_array_equal(truth.accel, 0.0)
        np.testing.assert_array_equal(truth.omega, 0.0)

    def test_velocity_matches_finite_differences(self):
        truth = generate_trajectory(TrajectorySpec(), 6, 100.0, seed=1)
        h = truth.t[1] - truth.t[0]
        fd = (truth.rel_pos[2:] - truth.rel_pos[:-2]) / (2 * h)
        ref = truth.rel_vel[1:-1]
        assert np.linalg.norm(fd - ref) / np.linalg.norm(ref) < 1e-6

    def test_body_rate_matches_attitude_increments(self):
        truth = generate_trajectory(TrajectorySpec(duration=10.0), 3, 100.0, seed=2)
        h = truth.t[1] - truth.t[0]
        c = truth.attitudes
        for j in range(3):
            inc = np.array([log_so3(c[k, j].T @ c[k + 2, j]) for k in range(0, len(c) - 2, 7)])
            ref = truth.omega[1:-1:7, j]
            assert np.linalg.norm(inc / (2 * h) - ref) / np.linalg.norm(ref) < 1e-5

    def test_within_workspace_and_separated(self):
        spec = TrajectorySpec()
        truth = generate_trajectory(spec, 6, 100.0, seed=4)
        pos = np.concatenate([np.zeros((len(truth.t), 1, 3)), truth.rel_pos], axis=1)
        d = np.linalg.norm(pos[:, :, None] - pos[:, None], axis=-1) + 1e9 * np.eye(6)
        assert d.min() >= spec.min_separation - 1e-3

    def test_determinism(self):
        a = generate_trajectory(SHORT, 3, 100.0, seed=7)
        b = generate_trajectory(SHORT, 3, 100.0, seed=7)
        c = generate_trajectory(SHORT, 3, 100.0, seed=8)
        np.testing.assert_array_equal(a.rel_pos, b.rel_pos)
        np.testing.assert_array_equal(a.attitudes, b.attitudes)
        assert not np.array_equal(a.rel_pos, c.rel_pos)

    def test_shared_attitude(self):
        spec = TrajectorySpec(duration=3.0, shared_attitude=(0, 2))
        truth = generate_trajectory(spec, 3, 100.0, seed=0)
        np.testing.assert_array_equal(truth.attitudes[:, 0], truth.attitudes[:, 2])
        assert not np.array_equal(truth.attitudes[:, 0], truth.attitudes[:, 1])

    @pytest.mark.parametrize(
        "kwargs", [dict(duration=0.0), dict(frequency_band=(0.1, 0.05)), dict(rotation_amplitude=2.0)]
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrajectorySpec(**kwargs)


class TestRmse:
    def test_zero(self):
        assert rmse(np.zeros((10, 48))) == 0.0

    def test_constant_vector_is_per_axis(self):
        e = np.tile([3.0, 4.0, 0.0], (20, 1))
        assert rmse(e) == pytest.approx(5.0 / math.sqrt(3), abs=1e-15)

    def test_group_selection(self):
        e = np.zeros((5, state_dim(3)))
        e[:, 12:] = 2.0
        assert rmse(e, "position", 3) == 0.0
        assert rmse(e, "attitude", 3) == pytest.approx(2.0)

    def test_matches_two_pass(self):
        e = np.random.default_rng(0).standard_normal((500, 48))
        ref = math.sqrt(math.fsum(float(x) ** 2 for x in e.ravel()) / e.size)
        assert abs(rmse(e) - ref) < 1e-12

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            rmse(np.zeros((3, 48)), "position")

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
    def test_scales_linearly(self, seed, a):
        e = np.random.default_rng(seed).standard_normal((30, 6))
        assert rmse(a * e) == pytest.approx(a * rmse(e), rel=1e-12)


class TestNees:
    def test_zero_error(self):
        r = nees(np.zeros((2, 5, 4)), np.tile(np.eye(4), (2, 5, 1, 1)))
        np.testing.assert_array_equal(r.series, 0.0)

    def test_singular_step_flagged(self):
        p = np.tile(np.eye(2), (3, 1, 1))
        p[1] = 0.0
        out, bad = normalized_error_squared(np.ones((3, 2)), p)
        np.testing.assert_array_equal(bad, [False, True, False])
        assert np.isnan(out[1])
        res = average_nees(out[None], 2)
        assert res.excluded == 1

    def test_bounds_bracket_dimension(self):
        lo, hi = nees_bounds(20, 48)
        assert lo < 48 < hi
        # Wilson-Hilferty approximation of the chi-squared quantile
        dof, z = 20 * 48, 1.959964
        wh = dof * (1 - 2 / (9 * dof) + z * math.sqrt(2 / (9 * dof))) ** 3 / 20
        assert hi == pytest.approx(wh, rel=1e-3)

    def test_overconfidence_scales(self):
        rng = np.random.default_rng(1)
        e = rng.standard_normal((4, 10, 3))
        p = np.tile(np.eye(3), (4, 10, 1, 1))
        np.testing.assert_allclose(nees(e, 0.1 * p).series, 10 * nees(e, p).series, rtol=1e-12)

    def test_consistent_linear_filter(self):
        # constant-velocity Kalman filter whose model matches the simulator
        rng = np.random.default_rng(2)
        dt, q, r = 0.1, 0.05, 0.2
        f = np.array([[1.0, dt], [0.0, 1.0]])
        qm = q * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
        h = np.array([[1.0, 0.0]])
        trials, steps = 100, 80
        errs = np.empty((trials, steps, 2))
        covs = np.empty((trials, steps, 2, 2))
        lq = np.linalg.cholesky(qm)
        for i in range(trials):
            p0 = np.diag([1.0, 0.5])
            x = rng.multivariate_normal([0.0, 0.0], p0)
            xh, p = np.zeros(2), p0.copy()
            for k in range(steps):
                x = f @ x + lq @ rng.standard_normal(2)
                xh, p = f @ xh, f @ p @ f.T + qm
                z = h @ x + math.sqrt(r) * rng.standard_normal(1)
                s = h @ p @ h.T + r
                k_gain = p @ h.T / s
                xh = xh + (k_gain @ (z - h @ xh)).ravel()
                p = (np.eye(2) - k_gain @ h) @ p
                errs[i, k], covs[i, k] = x - xh, p
        res = nees(errs, covs)
        assert res.lower < np.mean(res.series) < res.upper
        assert res.fraction_above_upper() < 0.1


class TestTrials:
    def test_deterministic(self):
        cfg = ScenarioConfig(layout=MINIMAL, trajectory=SHORT)
        a, b = run_trial(cfg, 5), run_trial(cfg, 5)
        np.testing.assert_array_equal(a.errors, b.errors)
        np.testing.assert_array_equal(a.nees, b.nees)

    def test_zero_noise_beats_noisy(self):
        spec = TrajectorySpec(duration=20.0, seed=11)
        clean = run_trial(ScenarioConfig(noise=NoiseSpec.zero(), trajectory=spec), 0)
        noisy = run_trial(ScenarioConfig(trajectory=spec), 0)
        assert clean.rmse["position"] < 1e-2
        for g in GROUPS:
            assert clean.rmse[g] < noisy.rmse[g]

    def test_error_shapes_and_signs(self):
        r = run_trial(ScenarioConfig(layout=MINIMAL, trajectory=SHORT), 0, keep=True)
        assert r.errors.shape == (501, state_dim(3))
        assert np.all(r.sigmas >= 0.0)
        assert np.all(r.nees[np.isfinite(r.nees)] >= 0.0)
        assert r.estimates.shape == r.errors.shape
        assert all(v >= 0.0 for v in r.rmse.values())

    def test_failure_gets_context(self):
        cfg = ScenarioConfig(layout=MINIMAL, trajectory=replace(SHORT, min_separation=100.0))
        with pytest.raises(RuntimeError, match="seed 4"):
            run_trial(cfg, 4)


class TestMonteCarlo:
    def test_single_trial_matches_run_trial(self):
        cfg = ScenarioConfig(layout=MINIMAL, trajectory=SHORT, trials=1, seed=9)
        rep = run_monte_carlo(cfg)
        r = run_trial(cfg, 9)
        assert rep.seeds == [9]
        for g in GROUPS:
            assert rep.rmse[g][0] == r.rmse[g]
        np.testing.assert_array_equal(rep.nees.series, r.nees)

    def test_serial_equals_parallel(self):
        cfg = ScenarioConfig(layout=MINIMAL, trajectory=replace(SHORT, seed=None), trials=3)
        a, b = run_monte_carlo(cfg, workers=1), run_monte_carlo(cfg, workers=2)
        for g in GROUPS:
            np.testing.assert_array_equal(a.rmse[g], b.rmse[g])
        np.testing.assert_array_equal(a.nees.series, b.nees.series)

    def test_failed_trials_reported_batch_continues(self):
        cfg = ScenarioConfig(layout=MINIMAL, trajectory=SHORT, trials=2, edges=((0, 1),))
        rep = run_monte_carlo(cfg)
        assert not rep.failures
        bad = ScenarioConfig(layout=MINIMAL, trajectory=replace(SHORT, min_separation=100.0), trials=2)
        rep = run_monte_carlo(bad)
        assert set(rep.failures) == {0, 1}
        assert np.isnan(rep.average("position"))
        assert rep.nees is None

    def test_box_stats_ordered(self):
        cfg = ScenarioConfig(layout=MINIMAL, trajectory=replace(SHORT, seed=None), trials=4)
        box = run_monte_carlo(cfg).box_stats("position")
        assert box["min"] <= box["q1"] <= box["median"] <= box["q3"] <= box["max"]


def test_parallel_baselines_layout():
    par = with_parallel_baselines(SwarmLayout.standard())
    for k in par.two_tag_agents:
        np.testing.assert_array_equal(par.baseline(k), [0.3, 0.0, 0.0])
    assert par.n_tags == 9


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(trials=0)
    assert len(ScenarioConfig().graph.edges) == 36
