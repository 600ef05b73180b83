"""
Command-line entry point.

Subcommands
-----------
observability  rank test of a layout at one pose, exit 0 / 2 for observable / deficient
simulate       one simulated trial, writing truth, measurement log, estimates and errors
montecarlo     a batch of trials, writing the RMSE table, box statistics and NEES series
replay         run the filter over a recorded measurement log

A single YAML file fully describes a run. Agent and tag numbers in config
files and logs are 1-based; agent 1 is the reference agent. Exit codes: 0
success or observable, 2 deficient verdict, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .estimator import MEKF, FilterConfig, FilterState, prior_covariance
from .geom3d import exp_so3, log_so3
from .rigidity import RangeGraph, check_two_tag_observability
from .sensors import ImuData, NoiseSpec, RangeMeasurement, SwarmLayout
from .simharness import (
    GROUPS,
    ScenarioConfig,
    TrajectorySpec,
    generate_trajectory,
    rmse,
    run_filter,
    run_monte_carlo,
    simulate_scenario,
    trial_seeds,
)

log = logging.getLogger("swarmloc")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DEFICIENT = 2

# filter options a config file may set; densities and initial stds follow the noise block
FILTER_KEYS = ("aiding_std", "aiding_gate", "gating", "gate_threshold", "mag_every", "aiding_every", "mag_field")
NOISE_KEYS = tuple(f.name for f in fields(NoiseSpec))
TRAJECTORY_KEYS = tuple(f.name for f in fields(TrajectorySpec))
TOP_KEYS = ("seed", "trials", "workers", "agents", "edges", "noise", "trajectory", "filter")
LOG_HEADER = "t,kind,ids,values"


class ConfigError(ValueError):
    """Invalid configuration, with the offending line when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one config file describes.

    `positions` and `attitudes` give the pose used by the observability
    subcommand; when absent the first sample of the configured trajectory is
    used instead.
    """

    scenario: ScenarioConfig
    positions: tuple[tuple[float, float, float], ...] | None = None
    attitudes: tuple[tuple[float, float, float], ...] | None = None

    def to_dict(self) -> dict:
        sc = self.scenario
        agents = []
        for k, off in enumerate(sc.layout.offsets):
            a: dict = {"tags": [[float(x) for x in row] for row in off]}
            if self.positions is not None:
                a["position"] = list(self.positions[k])
            if self.attitudes is not None:
                a["attitude"] = list(self.attitudes[k])
            agents.append(a)
        traj = asdict(sc.trajectory)
        for key, val in traj.items():
            if isinstance(val, tuple):
                traj[key] = list(val)
        traj["shared_attitude"] = [k + 1 for k in sc.trajectory.shared_attitude]
        filt = {}
        for key, val in sc.filter.items():
            filt[key] = list(val) if isinstance(val, tuple) else val
        return {
            "seed": sc.seed,
            "trials": sc.trials,
            "workers": sc.workers,
            "agents": agents,
            "edges": "complete" if sc.edges is None else [[i + 1, j + 1] for i, j in sc.edges],
            "noise": asdict(sc.noise),
            "trajectory": traj,
            "filter": filt,
        }


def dump_config(config: RunConfig) -> str:
    """Serialize to YAML text that :func:`parse_config` reads back unchanged."""
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)


def _line_map(node, path=(), out=None) -> dict:
    """Map key paths to 1-based source lines of a composed YAML node tree."""
    if out is None:
        out = {}
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_map(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


class _Checker:
    def __init__(self, lines: dict, source: str | None):
        self.lines = lines
        self.source = source

    def fail(self, path: tuple, message: str):
        p = path
        while p not in self.lines and p:
            p = p[:-1]
        name = ".".join(str(x) for x in path) or "<root>"
        raise ConfigError(f"{name}: {message}", self.lines.get(p), self.source)

    def mapping(self, value, path, allowed) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        for key in value:
            if key not in allowed:
                self.fail(path + (key,), f"unknown key {key!r}")
        return value

    def number(self, value, path, integer=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, "expected a number")
        if integer and not isinstance(value, int):
            self.fail(path, "expected an integer")
        if not np.isfinite(value):
            self.fail(path, "expected a finite number")
        return value

    def vector(self, value, path, length=3) -> tuple[float, ...]:
        if not isinstance(value, list) or len(value) != length:
            self.fail(path, f"expected a list of {length} numbers")
        return tuple(float(self.number(x, path + (i,))) for i, x in enumerate(value))


def _build(data, ck: _Checker) -> RunConfig:
    data = ck.mapping(data, (), TOP_KEYS)
    if "agents" not in data:
        ck.fail(("agents",), "missing required key")
    agents = data["agents"]
    if not isinstance(agents, list) or len(agents) < 2:
        ck.fail(("agents",), "expected a list of at least two agents")

    offsets, positions, attitudes = [], [], []
    for k, a in enumerate(agents):
        path = ("agents", k)
        a = ck.mapping(a, path, ("tags", "position", "attitude"))
        tags = a.get("tags")
        if not isinstance(tags, list) or len(tags) not in (1, 2):
            ck.fail(path + ("tags",), "expected one or two tag offsets")
        off = [ck.vector(t, path + ("tags", i)) for i, t in enumerate(tags)]
        if len(off) == 2 and np.linalg.norm(np.subtract(off[1], off[0])) <= 1e-9:
            ck.fail(path + ("tags",), "two-tag baseline has zero length")
        offsets.append(off)
        positions.append(ck.vector(a["position"], path + ("position",)) if "position" in a else None)
        attitudes.append(ck.vector(a["attitude"], path + ("attitude",)) if "attitude" in a else None)
    layout = SwarmLayout(tuple(np.array(o) for o in offsets))

    pos_given = [p is not None for p in positions]
    att_given = [c is not None for c in attitudes]
    for given, key in ((pos_given, "position"), (att_given, "attitude")):
        if any(given) and not all(given):
            k = given.index(False)
            ck.fail(("agents", k), f"{key} must be given for every agent or for none")

    edges = data.get("edges", "complete")
    n_tags = layout.n_tags
    if edges == "complete":
        edge_list = None
    elif isinstance(edges, list):
        edge_list = []
        for e, pair in enumerate(edges):
            path = ("edges", e)
            if not isinstance(pair, list) or len(pair) != 2:
                ck.fail(path, "expected a pair of tag numbers")
            i, j = (ck.number(x, path + (q,), integer=True) for q, x in enumerate(pair))
            if i == j:
                ck.fail(path, f"self-loop edge [{i}, {j}]")
            if not (1 <= i <= n_tags and 1 <= j <= n_tags):
                ck.fail(path, f"tag number out of range 1..{n_tags}")
            edge_list.append((i - 1, j - 1))
        try:
            RangeGraph(n_tags, edge_list)
        except ValueError as exc:
            ck.fail(("edges",), str(exc))
        edge_list = tuple(edge_list)
    else:
        ck.fail(("edges",), 'expected "complete" or a list of tag pairs')

    noise_in = ck.mapping(data.get("noise"), ("noise",), NOISE_KEYS)
    noise_kw = {}
    for key, val in noise_in.items():
        noise_kw[key] = ck.number(val, ("noise", key), integer=key == "channels")
    try:
        noise = NoiseSpec(**noise_kw)
    except ValueError as exc:
        ck.fail(("noise",), str(exc))

    traj_in = ck.mapping(data.get("trajectory"), ("trajectory",), TRAJECTORY_KEYS)
    traj_kw = {}
    for key, val in traj_in.items():
        path = ("trajectory", key)
        if key == "seed":
            traj_kw[key] = None if val is None else ck.number(val, path, integer=True)
        elif key == "workspace":
            traj_kw[key] = ck.vector(val, path)
        elif key in ("frequency_band", "translation_band"):
            traj_kw[key] = None if val is None and key == "translation_band" else ck.vector(val, path, 2)
        elif key == "shared_attitude":
            if not isinstance(val, list):
                ck.fail(path, "expected a list of agent numbers")
            ids = [ck.number(x, path + (i,), integer=True) for i, x in enumerate(val)]
            if any(not 1 <= x <= layout.n_agents for x in ids):
                ck.fail(path, f"agent number out of range 1..{layout.n_agents}")
            traj_kw[key] = tuple(x - 1 for x in ids)
        else:
            traj_kw[key] = float(ck.number(val, path))
    try:
        traj = TrajectorySpec(**traj_kw)
    except ValueError as exc:
        ck.fail(("trajectory",), str(exc))

    filt_in = ck.mapping(data.get("filter"), ("filter",), FILTER_KEYS)
    filt = {}
    for key, val in filt_in.items():
        path = ("filter", key)
        if key == "gating":
            if not isinstance(val, bool):
                ck.fail(path, "expected true or false")
            filt[key] = val
        elif key == "mag_field":
            filt[key] = ck.vector(val, path)
        elif key in ("mag_every", "aiding_every"):
            filt[key] = ck.number(val, path, integer=True)
            if filt[key] < 1:
                ck.fail(path, "must be >= 1")
        else:
            filt[key] = float(ck.number(val, path))

    top = {}
    for key, default in (("seed", 0), ("trials", 1), ("workers", 1)):
        top[key] = ck.number(data.get(key, default), (key,), integer=True)
    if top["trials"] < 1:
        ck.fail(("trials",), "must be >= 1")
    if top["workers"] < 1:
        ck.fail(("workers",), "must be >= 1")
    if top["seed"] < 0:
        ck.fail(("seed",), "must be >= 0")

    scenario = ScenarioConfig(
        layout=layout,
        noise=noise,
        trajectory=traj,
        trials=top["trials"],
        seed=top["seed"],
        edges=edge_list,
        filter=filt,
        workers=top["workers"],
    )
    try:
        scenario.filter_config()
    except (ValueError, TypeError) as exc:
        ck.fail(("filter",), str(exc))
    return RunConfig(
        scenario,
        tuple(positions) if all(pos_given) else None,
        tuple(attitudes) if all(att_given) else None,
    )


def parse_config(text: str, source: str | None = None) -> RunConfig:
    """Parse and validate YAML config text; errors carry the offending line."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {exc}", mark.line + 1 if mark else None, source) from exc
    if node is None:
        raise ConfigError("empty config", None, source)
    return _build(data, _Checker(_line_map(node), source))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(path)) from exc
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def fmt(x) -> str:
    """Numbers with 17 significant digits, so files round-trip exactly."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return "%.17g" % float(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def state_columns(n_agents: int, prefix: str = "") -> list[str]:
    cols = []
    for group, agents in (("p", range(2, n_agents + 1)), ("v", range(2, n_agents + 1)), ("att", range(1, n_agents + 1))):
        cols += [f"{prefix}{group}{k}_{ax}" for k in agents for ax in "xyz"]
    return cols


def truth_vectors(truth) -> np.ndarray:
    n_steps = len(truth.t)
    phis = np.array([[log_so3(c, tol=1e-6) for c in cs] for cs in truth.attitudes])
    return np.hstack(
        [truth.rel_pos.reshape(n_steps, -1), truth.rel_vel.reshape(n_steps, -1), phis.reshape(n_steps, -1)]
    )


def _out_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Measurement log
# --------------------------------------------------------------------------


def write_measurement_log(path: Path, prior: FilterState, imu: ImuData, ranges: list[RangeMeasurement]) -> None:
    """
    Write the initial estimate, IMU and range streams as comma-separated rows.

    Row shapes after the header line::

        t,prior,agent,px,py,pz,vx,vy,vz,c11,c12,...,c33
        t,imu,agent,ax,ay,az,gx,gy,gz,mx,my,mz
        t,range,agent_a,tag_a,agent_b,tag_b,value,variance

    Ranges follow the IMU rows of the latest IMU timestamp not after them.
    """
    n = prior.n_agents
    ordered = sorted(ranges, key=lambda m: m.t)
    rt = np.array([m.t for m in ordered])
    # index of the IMU step each range row is written after
    slot = np.searchsorted(imu.t, rt, side="right") - 1
    lines = [LOG_HEADER]

    def row(*vals):
        lines.append(",".join(fmt(v) for v in vals))

    for k in range(n):
        p = prior.rel_pos[k - 1] if k else np.zeros(3)
        v = prior.rel_vel[k - 1] if k else np.zeros(3)
        row(prior.t, "prior", k + 1, *p, *v, *prior.attitudes[k].ravel())
    j = 0
    while j < len(ordered) and slot[j] < 0:
        m = ordered[j]
        row(m.t, "range", m.tag_a[0] + 1, m.tag_a[1] + 1, m.tag_b[0] + 1, m.tag_b[1] + 1, m.value, m.variance)
        j += 1
    for s in range(len(imu.t)):
        for k in range(n):
            row(imu.t[s], "imu", k + 1, *imu.acc[s, k], *imu.gyr[s, k], *imu.mag[s, k])
        while j < len(ordered) and slot[j] == s:
            m = ordered[j]
            row(m.t, "range", m.tag_a[0] + 1, m.tag_a[1] + 1, m.tag_b[0] + 1, m.tag_b[1] + 1, m.value, m.variance)
            j += 1
    path.write_text("\n".join(lines) + "\n")


@dataclass
class ParsedLog:
    prior: FilterState | None
    imu: ImuData | None
    ranges: list[RangeMeasurement]
    warnings: list[str]


class LogError(ValueError):
    pass


def read_measurement_log(path: str | Path, layout: SwarmLayout, config: FilterConfig) -> ParsedLog:
    """
    Parse a measurement log, skipping malformed rows with a warning each.

    A row is malformed when its field count, numbers or agent/tag ids are
    invalid, or when its timestamp runs backwards within its stream. IMU
    timestamps missing a reading for some agent are dropped as a whole.
    """
    n = layout.n_agents
    warnings: list[str] = []
    prior_rows: dict[int, tuple[float, np.ndarray]] = {}
    imu_rows: dict[float, dict[int, np.ndarray]] = {}
    imu_order: list[float] = []
    ranges: list[RangeMeasurement] = []
    last_t = {"imu": -np.inf, "range": -np.inf}
    widths = {"prior": 3 + 15, "imu": 3 + 9, "range": 2 + 6}

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LogError(f"cannot read log: {exc}") from exc

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or (lineno == 1 and line.startswith("t,")):
            continue
        parts = line.split(",")
        kind = parts[1].strip() if len(parts) > 1 else ""
        try:
            if kind not in widths:
                raise ValueError(f"unknown row kind {kind!r}")
            if len(parts) != widths[kind]:
                raise ValueError(f"expected {widths[kind]} fields, got {len(parts)}")
            t = float(parts[0])
            if not np.isfinite(t):
                raise ValueError("non-finite timestamp")
            if kind == "range":
                ids = [int(x) for x in parts[2:6]]
                vals = np.array([float(x) for x in parts[6:]])
            else:
                ids = [int(parts[2])]
                vals = np.array([float(x) for x in parts[3:]])
            if not np.all(np.isfinite(vals)):
                raise ValueError("non-finite value")
            if kind == "prior":
                k = ids[0] - 1
                if not 0 <= k < n or k in prior_rows:
                    raise ValueError(f"bad or repeated prior agent {ids[0]}")
                prior_rows[k] = (t, vals)
            elif kind == "imu":
                k = ids[0] - 1
                if not 0 <= k < n:
                    raise ValueError(f"agent {ids[0]} out of range")
                if t < last_t["imu"]:
                    raise ValueError("IMU timestamp runs backwards")
                group = imu_rows.setdefault(t, {})
                if not group:
                    imu_order.append(t)
                if k in group:
                    raise ValueError(f"repeated IMU reading for agent {ids[0]}")
                group[k] = vals
                last_t["imu"] = t
            else:
                a = (ids[0] - 1, ids[1] - 1)
                b = (ids[2] - 1, ids[3] - 1)
                layout.offset(*a)
                layout.offset(*b)
                if a == b:
                    raise ValueError("range between a tag and itself")
                if t < last_t["range"]:
                    raise ValueError("range timestamp runs backwards")
                if not vals[1] > 0.0:
                    raise ValueError("range variance must be positive")
                ranges.append(RangeMeasurement(t, a, b, float(vals[0]), float(vals[1])))
                last_t["range"] = t
        except ValueError as exc:
            warnings.append(f"line {lineno}: skipped malformed row ({exc})")

    prior = None
    if len(prior_rows) == n:
        t0 = prior_rows[0][0]
        vals = np.array([prior_rows[k][1] for k in range(n)])
        prior = FilterState(
            t0,
            vals[1:, 0:3].copy(),
            vals[1:, 3:6].copy(),
            vals[:, 6:15].reshape(n, 3, 3).copy(),
            prior_covariance(n, config),
        )
    elif prior_rows:
        warnings.append(f"prior has {len(prior_rows)} of {n} agents; ignored")

    stamps = [t for t in imu_order if len(imu_rows[t]) == n]
    for t in imu_order:
        if len(imu_rows[t]) != n:
            warnings.append(f"IMU timestamp {fmt(t)} incomplete; dropped")
    imu = None
    if stamps:
        stack = np.array([[imu_rows[t][k] for k in range(n)] for t in stamps])
        imu = ImuData(np.array(stamps), stack[..., 0:3].copy(), stack[..., 3:6].copy(), stack[..., 6:9].copy())
    return ParsedLog(prior, imu, ranges, warnings)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def observability_pose(config: RunConfig):
    """Relative positions and attitudes used by the rank test."""
    sc = config.scenario
    n = sc.layout.n_agents
    if config.positions is not None:
        p = np.array(config.positions)
        rel_pos = p[1:] - p[0]
    else:
        truth = generate_trajectory(sc.trajectory, n, sc.noise.imu_rate, _traj_seed(sc))
        rel_pos = truth.rel_pos[0]
    if config.attitudes is not None:
        attitudes = np.array([exp_so3(a) for a in config.attitudes])
    elif config.positions is not None:
        attitudes = np.array([np.eye(3)] * n)
    else:
        attitudes = truth.attitudes[0]
    return rel_pos, attitudes


def _traj_seed(sc: ScenarioConfig):
    return sc.trajectory.seed if sc.trajectory.seed is not None else trial_seeds(sc.seed)["trajectory"]


def cmd_observability(config: RunConfig, out: Path) -> int:
    sc = config.scenario
    rel_pos, attitudes = observability_pose(config)
    report = check_two_tag_observability(sc.layout, attitudes, sc.graph, rel_pos)
    doc = report.to_dict()
    doc["residual_mode_count"] = len(doc["residual_modes"])
    (out / "observability.yaml").write_text(yaml.safe_dump(doc, sort_keys=False, default_flow_style=None))
    angle = "n/a" if report.baseline_angle is None else "%.6g rad" % report.baseline_angle
    print(f"verdict: {report.verdict_text}  rank {report.rank}/{report.required_rank}  baseline angle {angle}")
    return EXIT_OK if report.ok else EXIT_DEFICIENT


def _write_estimates(path: Path, t, estimates, sigmas, n) -> None:
    header = ["t"] + state_columns(n) + state_columns(n, "sig3_")
    write_csv(path, header, (np.concatenate([[t[k]], estimates[k], 3.0 * sigmas[k]]) for k in range(len(t))))


def cmd_simulate(config: RunConfig, out: Path) -> int:
    sc = config.scenario
    n = sc.layout.n_agents
    truth, imu, ranges, state = simulate_scenario(sc, sc.seed)
    prior = state.copy()
    mekf = MEKF(sc.layout, sc.filter_config())
    res = run_filter(mekf, state, imu, ranges, truth, keep_estimates=True)

    tv = truth_vectors(truth)
    write_csv(out / "truth.csv", ["t"] + state_columns(n), (np.concatenate([[truth.t[k]], tv[k]]) for k in range(len(truth.t))))
    write_measurement_log(out / "measurements.csv", prior, imu, ranges)
    _write_estimates(out / "estimates.csv", truth.t, res["estimates"], res["sigmas"], n)
    header = ["t"] + state_columns(n, "err_") + state_columns(n, "sig3_") + ["nees"]
    e, s, ne = res["errors"], res["sigmas"], res["nees"]
    write_csv(out / "errors.csv", header, (np.concatenate([[truth.t[k]], e[k], 3.0 * s[k], [ne[k]]]) for k in range(len(truth.t))))

    vals = {g: rmse(e, g, n) for g in GROUPS}
    print("rmse: position %.4g m  velocity %.4g m/s  attitude %.4g rad" % tuple(vals[g] for g in GROUPS))
    return EXIT_OK


def cmd_montecarlo(config: RunConfig, out: Path, workers: int | None = None) -> int:
    sc = config.scenario
    rep = run_monte_carlo(sc, workers)
    rows = []
    for i, seed in enumerate(rep.seeds):
        status = "failed" if seed in rep.failures else "ok"
        rows.append([seed] + [rep.rmse[g][i] for g in GROUPS] + [status])
    write_csv(out / "rmse.csv", ["seed", *GROUPS, "status"], rows)
    stats = ["min", "q1", "median", "q3", "max", "mean"]
    write_csv(out / "rmse_box.csv", ["group", *stats], ([g] + [rep.box_stats(g)[k] for k in stats] for g in GROUPS))
    if rep.nees is not None:
        ne = rep.nees
        write_csv(out / "nees.csv", ["t", "nees", "lower", "upper"], ([rep.t[k], ne.series[k], ne.lower, ne.upper] for k in range(len(rep.t))))
    for seed, err in rep.failures.items():
        print(err, file=sys.stderr)
    ok = len(rep.ok_trials)
    print(f"trials ok: {ok}/{len(rep.seeds)}")
    if ok:
        print("average rmse: position %.4g m  velocity %.4g m/s  attitude %.4g rad" % tuple(rep.average(g) for g in GROUPS))
        print("nees below upper bound: %.3f of timesteps" % rep.nees.fraction_below_upper())
    return EXIT_OK if ok else EXIT_ERROR


def cmd_replay(log_path: Path, config: RunConfig, out: Path) -> int:
    sc = config.scenario
    n = sc.layout.n_agents
    fcfg = sc.filter_config()
    parsed = read_measurement_log(log_path, sc.layout, fcfg)
    for w in parsed.warnings:
        log.warning(w)
    print(f"warnings: {len(parsed.warnings)}")
    if parsed.imu is None:
        raise LogError("log contains no complete IMU timestamps")
    if parsed.prior is None:
        raise LogError("log contains no complete prior")
    mekf = MEKF(sc.layout, fcfg)
    res = run_filter(mekf, parsed.prior, parsed.imu, parsed.ranges, keep_estimates=True)
    _write_estimates(out / "estimates.csv", parsed.imu.t, res["estimates"], res["sigmas"], n)
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarmloc", description="Relative localization of UWB/IMU swarms.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_seed=True):
        sp.add_argument("config", help="YAML scenario config")
        sp.add_argument("-o", "--out", default=".", help="output directory")
        if with_seed:
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    common(sub.add_parser("observability", help="rank test of the configured layout"), with_seed=False)
    common(sub.add_parser("simulate", help="one simulated trial"))
    mc = sub.add_parser("montecarlo", help="batch of simulated trials")
    common(mc)
    mc.add_argument("--trials", type=int, default=None, help="override the trial count")
    mc.add_argument("--workers", type=int, default=None, help="worker processes")
    rp = sub.add_parser("replay", help="run the filter over a measurement log")
    rp.add_argument("log", help="measurement log (CSV)")
    common(rp, with_seed=False)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        sc = config.scenario
        if getattr(args, "seed", None) is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            sc = replace(sc, seed=args.seed)
        if getattr(args, "trials", None) is not None:
            sc = replace(sc, trials=args.trials)
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        config = replace(config, scenario=sc)
        out = _out_dir(args.out)
        if args.command == "observability":
            return cmd_observability(config, out)
        if args.command == "simulate":
            return cmd_simulate(config, out)
        if args.command == "montecarlo":
            return cmd_montecarlo(config, out, args.workers)
        return cmd_replay(Path(args.log), config, out)
    except (ConfigError, LogError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
