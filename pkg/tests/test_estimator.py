import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmloc.estimator import MEKF, UP, FilterConfig, FilterState, error_state, initialize, prior_covariance
from swarmloc.geom3d import exp_so3, is_rotation, log_so3
from swarmloc.sensors import (
    ImuSample,
    NoiseSpec,
    RangeMeasurement,
    SwarmLayout,
    att_slice,
    predict_range,
    range_jacobian,
    state_dim,
)

LAYOUT = SwarmLayout.standard()
N = LAYOUT.n_agents
DIM = state_dim(N)
CFG = FilterConfig.from_noise(NoiseSpec())


def random_state(rng, cov_scale=0.1):
    a = rng.standard_normal((DIM, DIM))
    rel_pos = rng.uniform(-4, 4, (N - 1, 3))
    rel_vel = rng.uniform(-1, 1, (N - 1, 3))
    att = np.array([exp_so3(rng.uniform(-1.5, 1.5, 3)) for _ in range(N)])
    return FilterState(0.0, rel_pos, rel_vel, att, cov_scale * (a @ a.T / DIM + np.eye(DIM)))


def random_imu(rng, t=0.0):
    acc = rng.normal(0.0, 1.0, (N, 3)) + [0, 0, 9.81]
    return ImuSample(t, acc, rng.normal(0.0, 0.3, (N, 3)), rng.standard_normal((N, 3)))


def boxminus(a: FilterState, b: FilterState):
    """Error-state coordinates of `a` relative to `b` (``a = b [+] dx``)."""
    return error_state(b, a.rel_pos, a.rel_vel, a.attitudes)


def with_increment(state: FilterState, dx):
    s = state.copy()
    s.inject(dx)
    return s


def static_imu(attitudes, t=0.0):
    acc = np.array([c.T @ (9.81 * UP) for c in attitudes])
    mag = np.array([c.T @ CFG.mag_ref for c in attitudes])
    return ImuSample(t, acc, np.zeros((len(attitudes), 3)), mag)


class TestConfig:
    def test_densities_from_noise(self):
        assert CFG.acc_density == pytest.approx(0.026**2 * 0.01)
        assert CFG.gyr_density == pytest.approx(0.0025**2 * 0.01)
        assert CFG.init_pos_std == 0.45

    def test_zero_noise_floors(self):
        cfg = FilterConfig.from_noise(NoiseSpec.zero())
        assert cfg.acc_density == CFG.acc_density
        assert cfg.mag_std == pytest.approx(1e-3)
        assert cfg.init_pos_std == 0.0

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            FilterConfig(acc_density=0.0, gyr_density=1.0, mag_std=1.0, acc_std=1.0)
        with pytest.raises(ValueError):
            FilterConfig(acc_density=1.0, gyr_density=1.0, mag_std=1.0, acc_std=1.0, mag_field=(0, 0, 0))


class TestInitialize:
    truth = (np.arange(15.0).reshape(5, 3), np.ones((5, 3)), np.tile(np.eye(3), (6, 1, 1)))

    def test_zero_sigma_exact(self):
        cfg = FilterConfig.from_noise(NoiseSpec.zero())
        s = initialize(*self.truth, cfg, seed=0)
        np.testing.assert_array_equal(s.rel_pos, self.truth[0])
        np.testing.assert_array_equal(s.rel_vel, self.truth[1])
        np.testing.assert_array_equal(s.attitudes, self.truth[2])
        np.testing.assert_array_equal(s.cov, 0.0)

    def test_position_spread(self):
        errs = np.array([initialize(*self.truth, CFG, seed=k).rel_pos - self.truth[0] for k in range(1000)])
        assert np.std(errs) == pytest.approx(0.45, rel=0.1)

    def test_dimension(self):
        s = initialize(*self.truth, CFG, seed=0)
        assert s.dim == 48
        np.testing.assert_allclose(np.diag(s.cov)[:15], 0.45**2)
        np.testing.assert_allclose(np.diag(s.cov)[30:], 0.1**2)
        np.testing.assert_array_equal(s.cov, prior_covariance(6, CFG))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            initialize(np.zeros((4, 3)), np.zeros((5, 3)), np.tile(np.eye(3), (6, 1, 1)), CFG)

    def test_attitude_error_convention(self):
        s = initialize(*self.truth, CFG, seed=3)
        e = error_state(s, *self.truth)
        # recomposing the estimate with its error recovers the truth
        back = with_increment(s, e)
        np.testing.assert_allclose(back.attitudes, self.truth[2], atol=1e-12)


class TestPredict:
    def test_stationary(self):
        mekf = MEKF(LAYOUT, CFG)
        s = random_state(np.random.default_rng(0))
        s.rel_vel[:] = 0.0
        before = s.copy()
        mekf.predict(s, ImuSample(0.0, np.zeros((N, 3)), np.zeros((N, 3)), np.zeros((N, 3))), 0.01)
        np.testing.assert_array_equal(s.rel_pos, before.rel_pos)
        np.testing.assert_array_equal(s.attitudes, before.attitudes)
        q = mekf.process_noise(s, 0.01)
        a = mekf.transition_matrix(before, ImuSample(0.0, np.zeros((N, 3)), np.zeros((N, 3)), np.zeros((N, 3))), 0.01)
        np.testing.assert_allclose(s.cov, a @ before.cov @ a.T + q, atol=1e-15)
        assert np.trace(s.cov) > np.trace(before.cov)

    def test_constant_rate_rotation(self):
        mekf = MEKF(LAYOUT, CFG)
        s = FilterState(0.0, np.zeros((5, 3)), np.zeros((5, 3)), np.tile(np.eye(3), (6, 1, 1)), np.zeros((DIM, DIM)))
        gyr = np.tile([0.0, 0.0, 0.1], (N, 1))
        sample = ImuSample(0.0, np.zeros((N, 3)), gyr, np.zeros((N, 3)))
        for _ in range(1000):
            mekf.predict(s, sample, 0.01)
        for c in s.attitudes:
            assert np.linalg.norm(log_so3(c.T @ exp_so3([0, 0, 1.0]))) < 1e-3

    def test_relative_velocity_dynamics(self):
        mekf = MEKF(LAYOUT, CFG)
        rng = np.random.default_rng(1)
        s = random_state(rng)
        imu = random_imu(rng)
        before = s.copy()
        mekf.predict(s, imu, 0.01)
        f = np.array([c @ a for c, a in zip(before.attitudes, imu.acc)])
        np.testing.assert_allclose(s.rel_pos, before.rel_pos + 0.01 * before.rel_vel, atol=1e-15)
        np.testing.assert_allclose(s.rel_vel, before.rel_vel + 0.01 * (f[1:] - f[0]), atol=1e-14)
        np.testing.assert_allclose(s.attitudes[2], before.attitudes[2] @ exp_so3(0.01 * imu.gyr[2]), atol=1e-15)

    def test_rejects_nonpositive_dt(self):
        mekf = MEKF(LAYOUT, CFG)
        s = random_state(np.random.default_rng(2))
        with pytest.raises(ValueError):
            mekf.predict(s, random_imu(np.random.default_rng(2)), 0.0)

    def test_transition_matrix_matches_finite_differences(self):
        mekf = MEKF(LAYOUT, CFG)
        rng = np.random.default_rng(3)
        step = 1e-6
        dt = 0.01
        for _ in range(100):
            s = random_state(rng)
            imu = random_imu(rng)
            a = mekf.transition_matrix(s, imu, dt)
            nominal = s.copy()
            mekf.propagate(nominal, imu, dt)
            fd = np.empty((DIM, DIM))
            for c in range(DIM):
                dx = np.zeros(DIM)
                dx[c] = step
                plus, minus = with_increment(s, dx), with_increment(s, -dx)
                mekf.propagate(plus, imu, dt)
                mekf.propagate(minus, imu, dt)
                fd[:, c] = (boxminus(plus, nominal) - boxminus(minus, nominal)) / (2 * step)
            assert np.linalg.norm(a - fd) / np.linalg.norm(fd) < 1e-5

    def test_reference_noise_correlates_velocities(self):
        q = MEKF(LAYOUT, CFG).process_noise(random_state(np.random.default_rng(4)), 0.01)
        blk = CFG.acc_density * 0.01
        assert q[15, 15] == pytest.approx(2 * blk)
        assert q[15, 18] == pytest.approx(blk)
        assert q[15, 16] == 0.0
        assert q[30, 30] == pytest.approx(CFG.gyr_density * 0.01)


class TestRangeUpdate:
    def _meas(self, s, pair, delta=0.0, var=0.01):
        return RangeMeasurement(0.0, pair[0], pair[1], predict_range(s, LAYOUT, pair) + delta, var)

    def test_zero_innovation(self):
        mekf = MEKF(LAYOUT, CFG)
        s = random_state(np.random.default_rng(5))
        before = s.copy()
        pair = ((0, 1), (3, 0))
        mekf.update_range(s, self._meas(s, pair))
        np.testing.assert_array_equal(s.rel_pos, before.rel_pos)
        np.testing.assert_array_equal(s.attitudes, before.attitudes)
        assert np.trace(s.cov) < np.trace(before.cov)
        h = range_jacobian(before, LAYOUT, pair)
        assert h @ s.cov @ h < h @ before.cov @ h

    def test_matches_linear_kalman_step(self):
        mekf = MEKF(LAYOUT, CFG)
        rng = np.random.default_rng(6)
        for pair in [((0, 1), (3, 0)), ((1, 1), (2, 1)), ((4, 0), (5, 0))]:
            s = random_state(rng)
            before = s.copy()
            m = self._meas(s, pair, delta=0.05)
            h = range_jacobian(before, LAYOUT, pair)
            p = before.cov
            k = p @ h / (h @ p @ h + m.variance)
            dx = k * 0.05
            p_ref = (np.eye(DIM) - np.outer(k, h)) @ p
            mekf.update_range(s, m)
            np.testing.assert_allclose(boxminus(s, before), dx, atol=1e-12)
            np.testing.assert_allclose(s.cov, p_ref, atol=1e-12)

    def test_moves_along_covariance_weighted_jacobian(self):
        mekf = MEKF(LAYOUT, CFG)
        s = random_state(np.random.default_rng(7))
        before = s.copy()
        pair = ((2, 1), (5, 0))
        mekf.update_range(s, self._meas(s, pair, delta=0.02))
        d = boxminus(s, before)
        g = before.cov @ range_jacobian(before, LAYOUT, pair)
        assert abs(d @ g) / (np.linalg.norm(d) * np.linalg.norm(g)) == pytest.approx(1.0, abs=1e-10)

    def test_gating_skips_and_counts(self):
        cfg = FilterConfig.from_noise(NoiseSpec(), gating=True)
        mekf = MEKF(LAYOUT, cfg)
        s = random_state(np.random.default_rng(8), cov_scale=1e-4)
        before = s.copy()
        mekf.update_range(s, self._meas(s, ((0, 0), (3, 0)), delta=5.0, var=1e-4))
        assert s.n_gated == 1
        np.testing.assert_array_equal(s.cov, before.cov)

    def test_degenerate_geometry_skipped(self):
        mekf = MEKF(LAYOUT, CFG)
        s = random_state(np.random.default_rng(9))
        s.rel_pos[2] = 0.0  # agent 3 on top of the reference tag
        before = s.copy()
        mekf.update_range(s, RangeMeasurement(0.0, (0, 0), (3, 0), 1.0, 0.01))
        assert s.n_skipped == 1
        assert s.diagnostics
        np.testing.assert_array_equal(s.cov, before.cov)

    def test_order_insensitive_to_first_order(self):
        mekf = MEKF(LAYOUT, CFG)
        rng = np.random.default_rng(10)
        base = random_state(rng)
        pa, pb = ((0, 1), (4, 0)), ((1, 0), (5, 0))
        for delta in (1e-2, 1e-3):
            ma, mb = self._meas(base, pa, delta), self._meas(base, pb, -delta)
            s1, s2 = base.copy(), base.copy()
            mekf.update_range(mekf.update_range(s1, ma), mb)
            mekf.update_range(mekf.update_range(s2, mb), ma)
            assert np.linalg.norm(boxminus(s1, s2)) < 10 * delta**2


class TestDirectionUpdates:
    def test_mag_zero_innovation(self):
        mekf = MEKF(LAYOUT, CFG)
        s = random_state(np.random.default_rng(11))
        before = s.copy()
        mekf.update_mag(s, static_imu(s.attitudes), 2)
        np.testing.assert_allclose(s.attitudes, before.attitudes, atol=1e-15)

    def test_mag_yaw_contracts_monotonically(self):
        cfg = FilterConfig.from_noise(NoiseSpec.zero(init_att=0.3))
        mekf = MEKF(LAYOUT, cfg)
        truth = np.tile(np.eye(3), (N, 1, 1))
        att = truth.copy()
        att[1] = exp_so3([0, 0, 0.2])
        s = FilterState(0.0, np.ones((5, 3)), np.zeros((5, 3)), att, prior_covariance(N, cfg))
        sample = static_imu(truth)
        errs = []
        for _ in range(8):
            mekf.update_mag(s, sample, 1)
            errs.append(np.linalg.norm(log_so3(s.attitudes[1])))
        assert errs[-1] < 1e-3
        assert all(b < a for a, b in zip(errs, errs[1:]))

    @pytest.mark.parametrize("kind", ["mag", "acc"])
    def test_jacobian_matches_finite_differences(self, kind):
        rng = np.random.default_rng(12)
        ref = CFG.mag_ref if kind == "mag" else UP
        from swarmloc.sensors import direction_jacobian

        for _ in range(100):
            c = exp_so3(rng.uniform(-2, 2, 3))
            h = direction_jacobian(c, ref)
            fd = np.empty((3, 3))
            for j in range(3):
                d = np.zeros(3)
                d[j] = 1e-6
                fd[:, j] = ((c @ exp_so3(d)).T @ ref - (c @ exp_so3(-d)).T @ ref) / 2e-6
            assert np.linalg.norm(h - fd) / np.linalg.norm(fd) < 1e-5

    def test_aiding_static_level_no_correction(self):
        mekf = MEKF(LAYOUT, CFG)
        att = np.tile(np.eye(3), (N, 1, 1))
        s = FilterState(0.0, np.ones((5, 3)), np.zeros((5, 3)), att.copy(), prior_covariance(N, CFG))
        mekf.update_acc_aiding_all(s, static_imu(att))
        np.testing.assert_allclose(s.attitudes, att, atol=1e-15)
        assert s.n_aiding_rejected == 0

    def test_aiding_roll_contracts_yaw_unchanged(self):
        mekf = MEKF(LAYOUT, CFG)
        truth = np.tile(np.eye(3), (N, 1, 1))
        att = truth.copy()
        att[4] = exp_so3([0.1, 0, 0])  # roll error
        s = FilterState(0.0, np.ones((5, 3)), np.zeros((5, 3)), att, prior_covariance(N, CFG))
        sample = static_imu(truth)
        prev = 0.1
        for _ in range(20):
            mekf.update_acc_aiding(s, sample, 4)
            phi = log_so3(s.attitudes[4])
            assert abs(phi[0]) < prev
            assert abs(phi[2]) < 1e-12
            prev = abs(phi[0])

    def test_aiding_gate_rejects_maneuver(self):
        mekf = MEKF(LAYOUT, CFG)
        att = np.tile(np.eye(3), (N, 1, 1))
        s = FilterState(0.0, np.ones((5, 3)), np.zeros((5, 3)), att.copy(), prior_covariance(N, CFG))
        before = s.copy()
        sample = static_imu(att)
        sample.acc[0] += [2.0, 0.0, 2.0]
        mekf.update_acc_aiding(s, sample, 0)
        assert s.n_aiding_rejected == 1
        np.testing.assert_array_equal(s.cov, before.cov)
        np.testing.assert_array_equal(s.attitudes, before.attitudes)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.sampled_from(["predict", "range", "mag", "acc", "norm"]), min_size=1, max_size=30))
def test_covariance_stays_symmetric_psd(seed, ops):
    rng = np.random.default_rng(seed)
    mekf = MEKF(LAYOUT, CFG)
    s = random_state(rng)
    for op in ops:
        if op == "predict":
            mekf.predict(s, random_imu(rng), 0.01)
        elif op == "range":
            a, b = (LAYOUT.tag_id(int(x)) for x in rng.choice(9, 2, replace=False))
            mekf.update_range(s, RangeMeasurement(0.0, a, b, abs(rng.normal(3.0, 1.0)), 0.01))
        elif op == "mag":
            mekf.update_mag_all(s, random_imu(rng))
        elif op == "acc":
            sample = static_imu(s.attitudes)
            sample.acc[:] += rng.normal(0, 0.05, (N, 3))
            mekf.update_acc_aiding_all(s, sample)
        else:
            mekf.normalize(s)
        p = s.cov
        assert np.max(np.abs(p - p.T)) <= 1e-12 * np.max(np.abs(p))
        assert np.linalg.eigvalsh(p).min() >= -1e-12 * np.trace(p)
        assert all(is_rotation(c, tol=1e-9) for c in s.attitudes)


def test_injection_stays_on_so3():
    s = random_state(np.random.default_rng(13))
    dx = np.zeros(DIM)
    dx[att_slice(3, N)] = [0.4, -0.2, 0.9]
    s.inject(dx)
    assert is_rotation(s.attitudes[3], tol=1e-12)
