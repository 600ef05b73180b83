"""
Truth trajectories, single trials, Monte-Carlo batches and the evaluation
metrics (per-group RMSE and the averaged NEES test).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import chi2

from .estimator import MEKF, FilterConfig, FilterState, error_state, initialize
from .rigidity import RangeGraph
from .sensors import (
    ImuData,
    NoiseSpec,
    RangeMeasurement,
    SwarmLayout,
    SwarmTruth,
    schedule_ranging,
    simulate_imu,
    simulate_ranges,
    state_dim,
)

log = logging.getLogger(__name__)

GROUPS = ("position", "velocity", "attitude")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySpec:
    """
    Sum-of-sinusoids excitation for every agent.

    Each position axis oscillates about a random centre with amplitude drawn
    in ``[0.5, 1] * translation_amplitude`` (halved on z); each Euler angle
    (yaw, pitch, roll) oscillates with amplitude `rotation_amplitude` about a
    random yaw heading. Frequencies are drawn uniformly from
    `frequency_band`. Agents listed in `shared_attitude` all follow the
    attitude trajectory of the first one listed.
    """

    duration: float = 60.0
    seed: int | None = 0
    workspace: tuple[float, float, float] = (10.0, 10.0, 5.0)
    translation_amplitude: float = 1.0
    rotation_amplitude: float = 0.8
    frequency_band: tuple[float, float] = (1.0 / 60.0, 1.0 / 40.0)
    translation_band: tuple[float, float] | None = None
    min_separation: float = 1.5
    shared_attitude: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.duration > 0.0:
            raise ValueError("trajectory duration must be positive")
        for band in (self.frequency_band, self.translation_band or self.frequency_band):
            lo, hi = band
            if not 0.0 < lo <= hi:
                raise ValueError("frequency band must satisfy 0 < low <= high")
        if self.translation_amplitude < 0.0 or self.rotation_amplitude < 0.0:
            raise ValueError("amplitudes must be non-negative")
        if not 0.0 <= self.rotation_amplitude < np.pi / 2:
            raise ValueError("rotation amplitude must stay below pi/2 (pitch singularity)")


@dataclass(frozen=True)
class ScenarioConfig:
    layout: SwarmLayout = field(default_factory=SwarmLayout.standard)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    trials: int = 1
    seed: int = 0
    edges: tuple[tuple[int, int], ...] | None = None  # None: complete graph
    filter: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")

    @property
    def graph(self) -> RangeGraph:
        n = self.layout.n_tags
        if self.edges is None:
            return RangeGraph.complete(n)
        return RangeGraph(n, self.edges)

    def filter_config(self) -> FilterConfig:
        return FilterConfig.from_noise(self.noise, **self.filter)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _sinusoid(t, amp, freq, phase, offset=0.0):
    """Value and first two derivatives of ``offset + amp * sin(2 pi f t + phase)``."""
    w = 2.0 * np.pi * freq
    arg = w * t + phase
    return offset + amp * np.sin(arg), amp * w * np.cos(arg), -amp * w * w * np.sin(arg)


def attitude_from_angles(yaw, pitch, roll) -> NDArray[np.float64]:
    return _rz(yaw) @ _ry(pitch) @ _rx(roll)


def body_rate_from_angle_rates(pitch, roll, dyaw, dpitch, droll) -> NDArray[np.float64]:
    """Body-frame angular velocity of ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    sp, cp = np.sin(pitch), np.cos(pitch)
    sr, cr = np.sin(roll), np.cos(roll)
    return np.stack(
        [droll - dyaw * sp, dpitch * cr + dyaw * sr * cp, -dpitch * sr + dyaw * cr * cp], -1
    )


def generate_trajectory(
    spec: TrajectorySpec,
    n_agents: int,
    rate: float,
    seed: int | np.random.SeedSequence | None = None,
) -> SwarmTruth:
    """
    Smooth truth for `n_agents` sampled at `rate` Hz over ``spec.duration``.

    Positions, velocities, accelerations and body rates are analytic. Agent
    centres are redrawn until every pair of agents stays at least
    ``spec.min_separation`` apart over the whole run.
    """
    rng = np.random.default_rng(seed)
    k = int(round(spec.duration * rate))
    t = np.arange(k + 1) / rate
    ws = np.asarray(spec.workspace, dtype=float)
    lo_f, hi_f = spec.frequency_band
    amp_scale = np.array([1.0, 1.0, 0.5]) * spec.translation_amplitude

    amps = rng.uniform(0.5, 1.0, (n_agents, 3)) * amp_scale
    tlo, thi = spec.translation_band or spec.frequency_band
    freqs = rng.uniform(tlo, thi, (n_agents, 3))
    phases = rng.uniform(-np.pi, np.pi, (n_agents, 3))
    margin = amps
    for _ in range(1000):
        centres = rng.uniform(margin, ws - margin)
        pos, vel, acc = _sinusoid(t[:, None, None], amps, freqs, phases, centres)
        if n_agents < 2 or spec.min_separation <= 0.0:
            break
        d = pos[::10, :, None, :] - pos[::10, None, :, :]
        dist = np.linalg.norm(d, axis=-1) + np.eye(n_agents) * 1e9
        if dist.min() >= spec.min_separation:
            break
    else:
        raise RuntimeError("could not place agents with the requested separation")

    a_rot = spec.rotation_amplitude
    rfreq = rng.uniform(lo_f, hi_f, (n_agents, 3))
    rphase = rng.uniform(-np.pi, np.pi, (n_agents, 3))
    heading = rng.uniform(-np.pi, np.pi, n_agents)
    offsets = np.stack([heading, np.zeros(n_agents), np.zeros(n_agents)], -1)
    if spec.shared_attitude:
        lead = spec.shared_attitude[0]
        for j in spec.shared_attitude[1:]:
            rfreq[j], rphase[j], offsets[j] = rfreq[lead], rphase[lead], offsets[lead]
    ang, dang, _ = _sinusoid(t[:, None, None], a_rot, rfreq, rphase, offsets)
    yaw, pitch, roll = ang[..., 0], ang[..., 1], ang[..., 2]
    att = attitude_from_angles(yaw, pitch, roll)
    omega = body_rate_from_angle_rates(pitch, roll, dang[..., 0], dang[..., 1], dang[..., 2])

    return SwarmTruth(
        t=t,
        rel_pos=pos[:, 1:] - pos[:, :1],
        rel_vel=vel[:, 1:] - vel[:, :1],
        attitudes=att,
        accel=acc,
        omega=omega,
    )


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def group_slices(n_agents: int) -> dict[str, slice]:
    k = 3 * (n_agents - 1)
    return {
        "position": slice(0, k),
        "velocity": slice(k, 2 * k),
        "attitude": slice(2 * k, state_dim(n_agents)),
    }


def rmse(errors: ArrayLike, group: str | None = None, n_agents: int | None = None) -> float:
    """
    Root of the time-and-component mean of squared errors.

    `errors` is ``(T, dim)``. With `group` (and `n_agents`) only that group's
    columns are used. This is a per-axis figure: a constant error vector
    ``e`` on a 3-vector gives ``|e| / sqrt(3)``.
    """
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("rmse of an empty error series")
    if group is not None:
        if n_agents is None:
            raise ValueError("n_agents is required to select a group")
        e = e[..., group_slices(n_agents)[group]]
        if e.size == 0:
            raise ValueError(f"group {group!r} is empty")
    return float(np.sqrt(np.mean(np.square(e))))


def normalized_error_squared(
    errors: ArrayLike, covariances: ArrayLike
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """
    Per-step ``e^T P^-1 e``.

    Returns the series and a mask of steps whose covariance could not be
    factorized; those entries are NaN.
    """
    e = np.asarray(errors, dtype=float)
    p = np.asarray(covariances, dtype=float)
    out = np.full(e.shape[0], np.nan)
    bad = np.zeros(e.shape[0], dtype=bool)
    for k in range(e.shape[0]):
        try:
            cf = np.linalg.cholesky(p[k])
        except np.linalg.LinAlgError:
            bad[k] = True
            continue
        z = np.linalg.solve(cf, e[k])
        out[k] = z @ z
    return out, bad


def nees_bounds(n_trials: int, dim: int, confidence: float = 0.95) -> tuple[float, float]:
    """Two-sided chi-squared bounds on the trial-averaged NEES."""
    alpha = 1.0 - confidence
    dof = n_trials * dim
    return (
        float(chi2.ppf(alpha / 2.0, dof) / n_trials),
        float(chi2.ppf(1.0 - alpha / 2.0, dof) / n_trials),
    )


@dataclass
class NeesResult:
    series: NDArray[np.float64]
    lower: float
    upper: float
    excluded: int = 0

    def fraction_below_upper(self) -> float:
        s = self.series[np.isfinite(self.series)]
        return float(np.mean(s < self.upper)) if s.size else 0.0

    def fraction_above_upper(self) -> float:
        s = self.series[np.isfinite(self.series)]
        return float(np.mean(s > self.upper)) if s.size else 0.0


def average_nees(per_trial: ArrayLike, dim: int, confidence: float = 0.95) -> NeesResult:
    """Average per-trial NEES series ``(trials, T)``, ignoring flagged (NaN) steps."""
    e = np.atleast_2d(np.asarray(per_trial, dtype=float))
    finite = np.isfinite(e)
    counts = finite.sum(axis=0)
    total = np.where(finite, e, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        series = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    lo, hi = nees_bounds(e.shape[0], dim, confidence)
    return NeesResult(series, lo, hi, int((~finite).sum()))


def nees(errors: ArrayLike, covariances: ArrayLike, confidence: float = 0.95) -> NeesResult:
    """
    Trial-averaged NEES from stacked errors ``(trials, T, dim)`` and
    covariances ``(trials, T, dim, dim)``, with chi-squared bounds.
    """
    e = np.asarray(errors, dtype=float)
    p = np.asarray(covariances, dtype=float)
    if e.ndim == 2:
        e, p = e[None], p[None]
    per_trial = np.array([normalized_error_squared(ei, pi)[0] for ei, pi in zip(e, p)])
    return average_nees(per_trial, e.shape[-1], confidence)


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


@dataclass
class TrialResult:
    seed: int
    t: NDArray[np.float64]
    errors: NDArray[np.float64]  # (T, dim), truth - estimate
    sigmas: NDArray[np.float64]  # (T, dim), sqrt(diag P)
    nees: NDArray[np.float64]  # (T,)
    rmse: dict[str, float]
    n_agents: int
    estimates: NDArray[np.float64] | None = None  # (T, dim) flat estimate vectors
    truth: SwarmTruth | None = None
    imu: ImuData | None = None
    ranges: list[RangeMeasurement] | None = None
    prior: FilterState | None = None
    counters: dict[str, int] = field(default_factory=dict)
    runtime: float = 0.0

    def agent_rmse(self, group: str) -> NDArray[np.float64]:
        sl = group_slices(self.n_agents)[group]
        e = self.errors[:, sl].reshape(len(self.t), -1, 3)
        return np.sqrt(np.mean(e**2, axis=(0, 2)))


def trial_seeds(seed: int) -> dict[str, np.random.SeedSequence]:
    ss = np.random.SeedSequence(seed)
    names = ("trajectory", "imu", "range", "init")
    return dict(zip(names, ss.spawn(len(names))))


def run_filter(
    mekf: MEKF,
    state: FilterState,
    imu: ImuData,
    ranges: list[RangeMeasurement],
    truth: SwarmTruth | None = None,
    keep_estimates: bool = False,
) -> dict:
    """
    Run the filter over a timestamped IMU stream with interleaved ranges.

    At each IMU timestamp the filter first fuses the ranges carrying that
    timestamp and the magnetometer / aiding readings, records the posterior,
    then predicts to the next timestamp with the current IMU sample.
    """
    cfg = mekf.config
    t_imu = imu.t
    n_steps = len(t_imu)
    ranges = sorted(ranges, key=lambda m: m.t)
    slots = np.searchsorted(t_imu, [m.t for m in ranges], side="left")
    if len(ranges):
        # snap to the nearest IMU timestamp
        prev = np.clip(slots - 1, 0, n_steps - 1)
        nxt = np.clip(slots, 0, n_steps - 1)
        rt = np.array([m.t for m in ranges])
        slots = np.where(np.abs(t_imu[prev] - rt) <= np.abs(t_imu[nxt] - rt), prev, nxt)
    by_step: dict[int, list[RangeMeasurement]] = {}
    for s, m in zip(slots, ranges):
        by_step.setdefault(int(s), []).append(m)

    dim = mekf.dim
    errors = np.full((n_steps, dim), np.nan) if truth is not None else None
    sigmas = np.empty((n_steps, dim))
    nees_t = np.full(n_steps, np.nan)
    estimates = np.empty((n_steps, dim)) if keep_estimates else None

    for k in range(n_steps):
        sample = imu.sample(k)
        for m in by_step.get(k, ()):
            mekf.update_range(state, m)
        if k % cfg.mag_every == 0:
            mekf.update_mag_all(state, sample)
        if k % cfg.aiding_every == 0:
            mekf.update_acc_aiding_all(state, sample)

        p = state.cov
        sigmas[k] = np.sqrt(np.clip(np.diag(p), 0.0, None))
        if keep_estimates:
            estimates[k] = state.vector()
        if truth is not None:
            e = error_state(state, truth.rel_pos[k], truth.rel_vel[k], truth.attitudes[k])
            errors[k] = e
            try:
                cf = np.linalg.cholesky(p)
                z = np.linalg.solve(cf, e)
                nees_t[k] = z @ z
            except np.linalg.LinAlgError:
                pass

        if k + 1 < n_steps:
            dt = float(t_imu[k + 1] - t_imu[k])
            mekf.predict(state, sample, dt)
            state.t = float(t_imu[k + 1])
        if k % 100 == 99:
            mekf.normalize(state)

    return {
        "errors": errors,
        "sigmas": sigmas,
        "nees": nees_t,
        "estimates": estimates,
        "state": state,
    }


def simulate_scenario(config: ScenarioConfig, seed: int):
    """Truth, IMU stream, range stream and initial filter state for one seed."""
    seeds = trial_seeds(seed)
    spec = config.trajectory
    traj_seed = spec.seed if spec.seed is not None else seeds["trajectory"]
    noise = config.noise
    truth = generate_trajectory(spec, config.layout.n_agents, noise.imu_rate, traj_seed)
    fcfg = config.filter_config()
    imu = simulate_imu(truth, noise, seeds["imu"], mag_field=fcfg.mag_field)
    schedule = schedule_ranging(
        config.layout, config.graph, noise.uwb_rate, noise.channels, float(truth.t[-1])
    )
    ranges = simulate_ranges(truth, config.layout, schedule, noise, seeds["range"])
    state = initialize(truth.rel_pos[0], truth.rel_vel[0], truth.attitudes[0], fcfg, seeds["init"])
    return truth, imu, ranges, state


def run_trial(config: ScenarioConfig, seed: int, keep: bool = False) -> TrialResult:
    """
    One complete simulated trial: truth, sensors, filter and error metrics.

    With `keep` the truth, measurement streams, initial state and per-step
    estimates are attached to the result (needed for file export).
    """
    t0 = time.perf_counter()
    try:
        truth, imu, ranges, state = simulate_scenario(config, seed)
        mekf = MEKF(config.layout, config.filter_config())
        prior = state.copy() if keep else None
        out = run_filter(mekf, state, imu, ranges, truth, keep_estimates=keep)
    except Exception as exc:
        raise RuntimeError(f"trial seed {seed} failed: {exc}") from exc
    n = config.layout.n_agents
    errors = out["errors"]
    st = out["state"]
    return TrialResult(
        seed=seed,
        t=truth.t,
        errors=errors,
        sigmas=out["sigmas"],
        nees=out["nees"],
        rmse={g: rmse(errors, g, n) for g in GROUPS},
        n_agents=n,
        estimates=out["estimates"],
        truth=truth if keep else None,
        imu=imu if keep else None,
        ranges=ranges if keep else None,
        prior=prior,
        counters={
            "gated": st.n_gated,
            "skipped": st.n_skipped,
            "aiding_rejected": st.n_aiding_rejected,
        },
        runtime=time.perf_counter() - t0,
    )


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    seeds: list[int]
    rmse: dict[str, NDArray[np.float64]]  # group -> per-trial RMSE (NaN when failed)
    t: NDArray[np.float64] | None
    nees: NeesResult | None
    failures: dict[int, str]
    dim: int
    runtime: float = 0.0

    @property
    def ok_trials(self) -> list[int]:
        return [s for s in self.seeds if s not in self.failures]

    def average(self, group: str) -> float:
        v = self.rmse[group]
        return float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")

    def box_stats(self, group: str) -> dict[str, float]:
        v = self.rmse[group]
        v = v[np.isfinite(v)]
        if v.size == 0:
            return {k: float("nan") for k in ("min", "q1", "median", "q3", "max", "mean")}
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        return {
            "min": float(v.min()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": float(v.max()),
            "mean": float(v.mean()),
        }


def _trial_summary(args):
    config, seed = args
    try:
        r = run_trial(config, seed)
    except Exception as exc:  # reported per trial, batch continues
        return seed, None, str(exc)
    return seed, (r.t, r.rmse, r.nees), None


def run_monte_carlo(config: ScenarioConfig, workers: int | None = None) -> MetricsReport:
    """
    Run trials with seeds ``config.seed + i`` and aggregate RMSE and NEES.

    Trials may run in a process pool; results are reduced in seed order so
    serial and parallel batches give identical reports.
    """
    t0 = time.perf_counter()
    workers = config.workers if workers is None else workers
    seeds = [config.seed + i for i in range(config.trials)]
    jobs = [(config, s) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_trial_summary, jobs))
    else:
        results = [_trial_summary(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    dim = state_dim(config.layout.n_agents)
    rmse_tab = {g: np.full(len(seeds), np.nan) for g in GROUPS}
    failures: dict[int, str] = {}
    series = []
    t = None
    for i, (seed, payload, err) in enumerate(results):
        if payload is None:
            failures[seed] = err
            log.warning("trial %d failed: %s", seed, err)
            continue
        t, rm, ne = payload
        for g in GROUPS:
            rmse_tab[g][i] = rm[g]
        series.append(ne)
    nees_res = average_nees(np.array(series), dim) if series else None
    return MetricsReport(
        seeds=seeds,
        rmse=rmse_tab,
        t=t,
        nees=nees_res,
        failures=failures,
        dim=dim,
        runtime=time.perf_counter() - t0,
    )


def with_parallel_baselines(layout: SwarmLayout, baseline: ArrayLike = (0.3, 0.0, 0.0)) -> SwarmLayout:
    """Copy of `layout` in which every two-tag agent carries the same body-frame baseline."""
    b = np.asarray(baseline, dtype=float)
    offsets = []
    for off in layout.offsets:
        if off.shape[0] == 2:
            offsets.append(np.vstack([off[0], off[0] + b]))
        else:
            offsets.append(off.copy())
    return SwarmLayout(tuple(offsets))
