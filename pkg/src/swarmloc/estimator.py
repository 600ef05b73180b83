"""
Centralized multiplicative EKF over relative positions, relative velocities
and the attitudes of all agents.

The nominal attitudes are stored as rotation matrices and the filter carries
a right-multiplied rotation-vector error, ``C_true = C_est @ exp_so3(dphi)``.
Prediction uses forward Euler on the IMU inputs; ranges are fused one at a
time, magnetometer and accelerometer-aiding measurements as 3-vectors, all
with the Joseph-form covariance update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import chi2

from .geom3d import exp_so3, exp_so3_many, log_so3, orthonormalize, skew
from .sensors import (
    GRAVITY,
    MAG_FIELD,
    DegenerateRangeError,
    ImuSample,
    NoiseSpec,
    RangeMeasurement,
    SwarmLayout,
    acc_gate,
    att_slice,
    predict_range,
    range_jacobian,
    state_dim,
)

log = logging.getLogger(__name__)

UP = -GRAVITY / np.linalg.norm(GRAVITY)


@dataclass(frozen=True)
class FilterConfig:
    """
    Filter tuning.

    The accelerometer and gyroscope densities are the per-sample variances
    divided by the IMU rate, so that white per-sample noise of standard
    deviation ``sigma`` maps to ``sigma**2 * dt**2`` per Euler step.
    """

    acc_density: float
    gyr_density: float
    mag_std: float
    acc_std: float
    init_pos_std: float = 0.45
    init_vel_std: float = 0.45
    init_att_std: float = 0.1
    # accelerometer aiding: extra std (m/s^2) covering unmodelled motion
    aiding_std: float = 0.2
    aiding_gate: float = 0.05
    gravity: float = 9.81
    mag_field: tuple[float, float, float] = tuple(MAG_FIELD)
    gating: bool = False
    gate_threshold: float = 10.8
    mag_every: int = 1
    aiding_every: int = 1

    def __post_init__(self) -> None:
        for name in ("acc_density", "gyr_density", "mag_std", "aiding_std"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"filter {name} must be positive")
        if np.linalg.norm(self.mag_field) <= 0.0:
            raise ValueError("reference magnetic field must be nonzero")

    @classmethod
    def from_noise(cls, noise: NoiseSpec, mag_floor: float = 1e-3, **kwargs) -> FilterConfig:
        """
        Derive densities from sensor noise.

        A zero accelerometer or gyroscope std falls back to the nominal
        NoiseSpec value: the process noise then stands for forward-Euler
        model error, which an almost-zero density would leave unmodelled and
        the filter would stop listening to its measurements. A zero
        magnetometer std is replaced by `mag_floor` times the field norm.
        """
        nominal = NoiseSpec()
        acc = noise.acc if noise.acc > 0 else nominal.acc
        gyr = noise.gyr if noise.gyr > 0 else nominal.gyr
        field_norm = float(np.linalg.norm(kwargs.get("mag_field", MAG_FIELD)))
        mag = noise.mag if noise.mag > 0 else mag_floor * field_norm
        dt = 1.0 / noise.imu_rate
        return cls(
            acc_density=acc**2 * dt,
            gyr_density=gyr**2 * dt,
            mag_std=mag,
            acc_std=acc,
            init_pos_std=noise.init_pos,
            init_vel_std=noise.init_vel,
            init_att_std=noise.init_att,
            **kwargs,
        )

    @property
    def mag_ref(self) -> NDArray[np.float64]:
        m = np.asarray(self.mag_field, dtype=float)
        return m / np.linalg.norm(m)

    @property
    def mag_norm(self) -> float:
        return float(np.linalg.norm(self.mag_field))


@dataclass
class FilterState:
    """
    Estimate and covariance of the relative navigation state.

    `rel_pos` and `rel_vel` are ``(N-1, 3)``, `attitudes` is ``(N, 3, 3)``
    and `cov` is the error-state covariance of size ``6(N-1) + 3N``.
    """

    t: float
    rel_pos: NDArray[np.float64]
    rel_vel: NDArray[np.float64]
    attitudes: NDArray[np.float64]
    cov: NDArray[np.float64]
    n_gated: int = 0
    n_skipped: int = 0
    n_aiding_rejected: int = 0
    diagnostics: list[str] = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return self.attitudes.shape[0]

    @property
    def dim(self) -> int:
        return state_dim(self.n_agents)

    def copy(self) -> FilterState:
        return FilterState(
            self.t,
            self.rel_pos.copy(),
            self.rel_vel.copy(),
            self.attitudes.copy(),
            self.cov.copy(),
            self.n_gated,
            self.n_skipped,
            self.n_aiding_rejected,
            list(self.diagnostics),
        )

    def vector(self) -> NDArray[np.float64]:
        """Flat estimate ``[r, v, phi]`` with attitudes as rotation vectors."""
        phis = [log_so3(c, tol=1e-6) for c in self.attitudes]
        return np.concatenate([self.rel_pos.ravel(), self.rel_vel.ravel(), np.ravel(phis)])

    def inject(self, dx: ArrayLike) -> None:
        """Apply an error-state correction in place."""
        dx = np.asarray(dx, dtype=float)
        n = self.n_agents
        k = 3 * (n - 1)
        self.rel_pos = self.rel_pos + dx[:k].reshape(-1, 3)
        self.rel_vel = self.rel_vel + dx[k : 2 * k].reshape(-1, 3)
        self.attitudes = self.attitudes @ exp_so3_many(dx[2 * k :].reshape(n, 3))


def error_state(est: FilterState, rel_pos, rel_vel, attitudes) -> NDArray[np.float64]:
    """Error ``truth - estimate`` in the filter's error-state coordinates."""
    dphi = [log_so3(ce.T @ ct, tol=1e-6) for ce, ct in zip(est.attitudes, attitudes)]
    return np.concatenate(
        [
            (np.asarray(rel_pos) - est.rel_pos).ravel(),
            (np.asarray(rel_vel) - est.rel_vel).ravel(),
            np.ravel(dphi),
        ]
    )


def initialize(
    rel_pos: ArrayLike,
    rel_vel: ArrayLike,
    attitudes: ArrayLike,
    config: FilterConfig,
    seed: int | np.random.SeedSequence | None = None,
    t: float = 0.0,
) -> FilterState:
    """
    Initial estimate: the prior perturbed by Gaussian draws with the configured
    initial standard deviations; the covariance is their diagonal.
    """
    rel_pos = np.array(rel_pos, dtype=float).reshape(-1, 3)
    rel_vel = np.array(rel_vel, dtype=float).reshape(-1, 3)
    attitudes = np.array(attitudes, dtype=float).reshape(-1, 3, 3)
    n = attitudes.shape[0]
    if rel_pos.shape[0] != n - 1 or rel_vel.shape[0] != n - 1:
        raise ValueError(
            f"prior has {rel_pos.shape[0]} positions and {rel_vel.shape[0]} velocities "
            f"for {n} attitudes; expected {n - 1} each"
        )
    rng = np.random.default_rng(seed)
    sp, sv, sa = config.init_pos_std, config.init_vel_std, config.init_att_std
    est_pos = rel_pos + sp * rng.standard_normal(rel_pos.shape)
    est_vel = rel_vel + sv * rng.standard_normal(rel_vel.shape)
    dphi = sa * rng.standard_normal((n, 3))
    # truth = estimate * exp(dphi)
    est_att = np.array([c @ exp_so3(-d) for c, d in zip(attitudes, dphi)])
    return FilterState(t, est_pos, est_vel, est_att, prior_covariance(n, config))


def prior_covariance(n_agents: int, config: FilterConfig) -> NDArray[np.float64]:
    """Diagonal initial covariance from the configured initial standard deviations."""
    n = n_agents
    sp, sv, sa = config.init_pos_std, config.init_vel_std, config.init_att_std
    diag = np.concatenate(
        [np.full(3 * (n - 1), sp**2), np.full(3 * (n - 1), sv**2), np.full(3 * n, sa**2)]
    )
    return np.diag(diag)


def _gate(threshold_1dof: float, dof: int) -> float:
    """Chi-squared threshold for `dof` at the confidence `threshold_1dof` has for 1 dof."""
    if dof == 1:
        return threshold_1dof
    return float(chi2.ppf(chi2.cdf(threshold_1dof, 1), dof))


class MEKF:
    """
    Relative-position and attitude MEKF for one swarm layout.

    All update methods modify the given :class:`FilterState` in place and
    return it.
    """

    def __init__(self, layout: SwarmLayout, config: FilterConfig):
        self.layout = layout
        self.config = config
        self.n = layout.n_agents
        self.dim = state_dim(self.n)
        self._rows = np.arange(self.dim)
        n1 = self.n - 1
        # velocity-block process noise pattern: own accelerometer plus the
        # reference agent's, which correlates every relative velocity
        self._q_vel = np.kron(np.eye(n1) + np.ones((n1, n1)), np.eye(3))

    # ---------------------------------------------------------------- model

    def propagate(self, state: FilterState, imu: ImuSample, dt: float) -> None:
        """Forward-Euler step of the nominal state only."""
        self._propagate(state, imu, dt, exp_so3_many(dt * np.asarray(imu.gyr)))

    def _propagate(self, state, imu, dt, omega_step) -> None:
        f = np.einsum("nij,nj->ni", state.attitudes, imu.acc)
        state.rel_pos = state.rel_pos + dt * state.rel_vel
        state.rel_vel = state.rel_vel + dt * (f[1:] - f[0])
        state.attitudes = state.attitudes @ omega_step
        state.t += dt

    def transition_matrix(
        self, state: FilterState, imu: ImuSample, dt: float, omega_step=None
    ) -> NDArray[np.float64]:
        """Error-state Jacobian of :meth:`propagate` evaluated at the pre-step estimate."""
        n, n1 = self.n, self.n - 1
        if omega_step is None:
            omega_step = exp_so3_many(dt * np.asarray(imu.gyr))
        a = np.eye(self.dim)
        k = 3 * n1
        a[:k, k : 2 * k] += dt * np.eye(k)
        c = state.attitudes
        a[k : 2 * k, 2 * k : 2 * k + 3] = np.tile(dt * c[0] @ skew(imu.acc[0]), (n1, 1))
        for i in range(1, n):
            rows = slice(k + 3 * (i - 1), k + 3 * i)
            a[rows, att_slice(i, n)] = -dt * c[i] @ skew(imu.acc[i])
        for i in range(n):
            s = att_slice(i, n)
            a[s, s] = omega_step[i].T
        return a

    def process_noise(self, state: FilterState, dt: float) -> NDArray[np.float64]:
        """``L Q L^T dt`` for white accelerometer and gyroscope noise."""
        k = 3 * (self.n - 1)
        q = np.zeros((self.dim, self.dim))
        # C C^T = I, so the rotated accelerometer noise is isotropic
        q[k : 2 * k, k : 2 * k] = self.config.acc_density * dt * self._q_vel
        idx = np.arange(2 * k, self.dim)
        q[idx, idx] = self.config.gyr_density * dt
        return q

    def predict(self, state: FilterState, imu: ImuSample, dt: float) -> FilterState:
        if not dt > 0.0:
            raise ValueError(f"prediction step needs dt > 0, got {dt}")
        omega_step = exp_so3_many(dt * np.asarray(imu.gyr))
        a = self.transition_matrix(state, imu, dt, omega_step)
        self._propagate(state, imu, dt, omega_step)
        p = a @ state.cov @ a.T + self.process_noise(state, dt)
        state.cov = 0.5 * (p + p.T)
        return state

    # -------------------------------------------------------------- updates

    def _correct(
        self,
        state: FilterState,
        h: NDArray[np.float64],
        innov: NDArray[np.float64],
        r: NDArray[np.float64],
        gate_dof: int,
    ) -> bool:
        p = state.cov
        ph = p @ h.T
        s = h @ ph + r
        try:
            s_inv = np.linalg.inv(s)
        except np.linalg.LinAlgError:
            state.n_skipped += 1
            state.diagnostics.append(f"t={state.t:.3f}: singular innovation covariance")
            return False
        if self.config.gating:
            nis = float(innov @ s_inv @ innov)
            if nis > _gate(self.config.gate_threshold, gate_dof):
                state.n_gated += 1
                return False
        k = ph @ s_inv
        ikh = np.eye(self.dim) - k @ h
        p = ikh @ p @ ikh.T + k @ r @ k.T
        state.cov = 0.5 * (p + p.T)
        state.inject(k @ innov)
        return True

    def update_range(self, state: FilterState, m: RangeMeasurement) -> FilterState:
        pair = m.pair
        try:
            h = range_jacobian(state, self.layout, pair)
        except DegenerateRangeError as exc:
            state.n_skipped += 1
            state.diagnostics.append(f"t={m.t:.3f}: {exc}")
            return state
        innov = np.array([m.value - predict_range(state, self.layout, pair)])
        self._correct(state, h[None, :], innov, np.array([[m.variance]]), 1)
        return state

    def _direction_update(self, state, agents, ys, ref, std) -> None:
        c = state.attitudes
        m = len(agents)
        h = np.zeros((3 * m, self.dim))
        innov = np.empty(3 * m)
        for row, (agent, y) in enumerate(zip(agents, ys)):
            pred = c[agent].T @ ref
            h[3 * row : 3 * row + 3, att_slice(agent, self.n)] = skew(pred)
            innov[3 * row : 3 * row + 3] = y - pred
        self._correct(state, h, innov, std**2 * np.eye(3 * m), 3 * m)

    def update_mag(self, state: FilterState, sample: ImuSample, agent: int) -> FilterState:
        """Magnetometer update on the reference-field direction of one agent."""
        return self.update_mag_all(state, sample, (agent,))

    def update_mag_all(
        self, state: FilterState, sample: ImuSample, agents: tuple[int, ...] | None = None
    ) -> FilterState:
        """Stacked magnetometer update over `agents` (default: all)."""
        cfg = self.config
        agents = tuple(range(self.n)) if agents is None else agents
        ys = [np.asarray(sample.mag[a], dtype=float) / cfg.mag_norm for a in agents]
        self._direction_update(state, agents, ys, cfg.mag_ref, cfg.mag_std / cfg.mag_norm)
        return state

    def update_acc_aiding(self, state: FilterState, sample: ImuSample, agent: int) -> FilterState:
        """Gravity-direction update, applied only while the agent is quasi-static."""
        return self.update_acc_aiding_all(state, sample, (agent,))

    def update_acc_aiding_all(
        self, state: FilterState, sample: ImuSample, agents: tuple[int, ...] | None = None
    ) -> FilterState:
        """Stacked gravity-direction update over the quasi-static members of `agents`."""
        cfg = self.config
        agents = tuple(range(self.n)) if agents is None else agents
        keep = []
        for a in agents:
            if acc_gate(sample.acc[a], cfg.gravity, cfg.aiding_gate):
                keep.append(a)
            else:
                state.n_aiding_rejected += 1
                log.debug("aiding rejected for agent %d at t=%.3f", a, sample.t)
        if not keep:
            return state
        ys = [np.asarray(sample.acc[a], dtype=float) / cfg.gravity for a in keep]
        std = np.hypot(cfg.acc_std, cfg.aiding_std) / cfg.gravity
        self._direction_update(state, keep, ys, UP, std)
        return state

    def normalize(self, state: FilterState) -> None:
        state.attitudes = np.array([orthonormalize(c) for c in state.attitudes])
