"""
Measurement models, sensor synthesis and the UWB ranging schedule.

Agents are indexed from 0; agent 0 is the reference agent whose IMU origin
anchors every relative position. A tag is addressed either by the pair
``(agent, tag)`` or by its global index, which enumerates tags agent by agent.

The error state shared by the estimator and the Jacobians here is ordered as
``[dr_1 .. dr_{N-1}, dv_1 .. dv_{N-1}, dphi_0 .. dphi_{N-1}]`` with attitude
errors applied on the right, ``C_true = C_est @ exp_so3(dphi)``.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geom3d import skew

if TYPE_CHECKING:
    from .rigidity import RangeGraph

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
MAG_FIELD = np.array([1.0, 0.0, 0.0])

TagId = tuple[int, int]
TagPair = tuple[TagId, TagId]


class LayoutError(ValueError):
    pass


# --------------------------------------------------------------------------
# Layout and state indexing
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SwarmLayout:
    """
    Agents and the body-frame offsets of their ranging tags.

    Parameters
    ----------
    offsets : sequence of array-like
        One entry per agent, each of shape ``(1, 3)`` or ``(2, 3)``: the
        position of every tag relative to the agent's IMU, resolved in the
        agent's body frame, in metres.
    """

    offsets: tuple[NDArray[np.float64], ...]

    def __post_init__(self) -> None:
        checked = []
        for k, off in enumerate(self.offsets):
            off = np.atleast_2d(np.asarray(off, dtype=float))
            if off.ndim != 2 or off.shape[1] != 3 or off.shape[0] not in (1, 2):
                raise LayoutError(f"agent {k}: expected 1 or 2 tag offsets of length 3")
            if not np.all(np.isfinite(off)):
                raise LayoutError(f"agent {k}: non-finite tag offset")
            if off.shape[0] == 2 and np.linalg.norm(off[1] - off[0]) <= 1e-9:
                raise LayoutError(f"agent {k}: two-tag baseline has zero length")
            off.setflags(write=False)
            checked.append(off)
        if len(checked) < 2:
            raise LayoutError("a swarm needs at least two agents")
        object.__setattr__(self, "offsets", tuple(checked))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SwarmLayout):
            return NotImplemented
        return len(self.offsets) == len(other.offsets) and all(
            np.array_equal(a, b) for a, b in zip(self.offsets, other.offsets)
        )

    def __hash__(self) -> int:
        return hash(tuple(off.tobytes() for off in self.offsets))

    @classmethod
    def standard(cls) -> SwarmLayout:
        """Six agents, the first three carrying two tags 0.3 m apart along x, y and z."""
        return cls(
            (
                [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]],
                [[0.0, 0.0, 0.0], [0.0, 0.3, 0.0]],
                [[0.0, 0.0, 0.0], [0.0, 0.0, 0.3]],
                [[0.0, 0.0, 0.0]],
                [[0.0, 0.0, 0.0]],
                [[0.0, 0.0, 0.0]],
            )
        )

    @property
    def n_agents(self) -> int:
        return len(self.offsets)

    @property
    def n_tags(self) -> int:
        return sum(off.shape[0] for off in self.offsets)

    @property
    def tags(self) -> list[TagId]:
        return [(k, i) for k, off in enumerate(self.offsets) for i in range(off.shape[0])]

    @property
    def two_tag_agents(self) -> list[int]:
        return [k for k, off in enumerate(self.offsets) if off.shape[0] == 2]

    def tag_index(self, tag: TagId) -> int:
        agent, i = tag
        self.offset(agent, i)
        return sum(off.shape[0] for off in self.offsets[:agent]) + i

    def tag_id(self, index: int) -> TagId:
        tags = self.tags
        if not 0 <= index < len(tags):
            raise LayoutError(f"tag index {index} out of range")
        return tags[index]

    def offset(self, agent: int, tag: int) -> NDArray[np.float64]:
        if not 0 <= agent < self.n_agents:
            raise LayoutError(f"unknown agent {agent}")
        off = self.offsets[agent]
        if not 0 <= tag < off.shape[0]:
            raise LayoutError(f"agent {agent} has no tag {tag}")
        return off[tag]

    def baseline(self, agent: int) -> NDArray[np.float64]:
        """Body-frame position of the second tag relative to the first."""
        off = self.offsets[agent]
        if off.shape[0] != 2:
            raise LayoutError(f"agent {agent} is a single-tag agent")
        return off[1] - off[0]


def state_dim(n_agents: int) -> int:
    return 6 * (n_agents - 1) + 3 * n_agents


def pos_slice(agent: int, n_agents: int) -> slice:
    """Error-state slice of the relative position of `agent` (>= 1)."""
    s = 3 * (agent - 1)
    return slice(s, s + 3)


def vel_slice(agent: int, n_agents: int) -> slice:
    s = 3 * (n_agents - 1) + 3 * (agent - 1)
    return slice(s, s + 3)


def att_slice(agent: int, n_agents: int) -> slice:
    s = 6 * (n_agents - 1) + 3 * agent
    return slice(s, s + 3)


class PoseLike(Protocol):
    rel_pos: NDArray[np.float64]
    attitudes: NDArray[np.float64]


@dataclass
class SwarmPose:
    """Relative positions ``(N-1, 3)`` of agents 1..N-1 and attitudes ``(N, 3, 3)``."""

    rel_pos: NDArray[np.float64]
    attitudes: NDArray[np.float64]


def agent_position(state: PoseLike, agent: int) -> NDArray[np.float64]:
    if agent == 0:
        return np.zeros(3)
    return np.asarray(state.rel_pos[agent - 1], dtype=float)


# --------------------------------------------------------------------------
# Deterministic measurement models
# --------------------------------------------------------------------------


def tag_position(state: PoseLike, layout: SwarmLayout, agent: int, tag: int) -> NDArray[np.float64]:
    """Position of a tag relative to the reference agent's IMU, absolute frame."""
    offset = layout.offset(agent, tag)
    return agent_position(state, agent) + state.attitudes[agent] @ offset


def tag_positions(state: PoseLike, layout: SwarmLayout) -> NDArray[np.float64]:
    """All tag positions, ``(n_tags, 3)``, in global tag order."""
    return np.array([tag_position(state, layout, k, i) for k, i in layout.tags])


def predict_range(state: PoseLike, layout: SwarmLayout, pair: TagPair) -> float:
    (k, i), (l, j) = pair
    d = tag_position(state, layout, l, j) - tag_position(state, layout, k, i)
    return float(np.linalg.norm(d))


class DegenerateRangeError(ValueError):
    pass


def range_jacobian(state: PoseLike, layout: SwarmLayout, pair: TagPair) -> NDArray[np.float64]:
    """
    Row Jacobian of a range measurement with respect to the error state.

    The position blocks hold the unit line-of-sight vector (``+u`` for the far
    tag's agent, ``-u`` for the near one). Each attitude block holds
    ``-u^T C skew(offset)`` with the sign of the tag it belongs to.

    Raises
    ------
    DegenerateRangeError
        If the two tags (nearly) coincide.
    """
    (k, i), (l, j) = pair
    n = layout.n_agents
    d = tag_position(state, layout, l, j) - tag_position(state, layout, k, i)
    rng = np.linalg.norm(d)
    if rng <= 1e-9:
        raise DegenerateRangeError(f"tags {pair[0]} and {pair[1]} coincide")
    u = d / rng
    h = np.zeros(state_dim(n))
    for agent, tag, sign in ((l, j, 1.0), (k, i, -1.0)):
        if agent != 0:
            h[pos_slice(agent, n)] += sign * u
        off = layout.offset(agent, tag)
        h[att_slice(agent, n)] += -sign * (u @ state.attitudes[agent] @ skew(off))
    return h


def direction_jacobian(attitude: NDArray[np.float64], reference: NDArray[np.float64]) -> NDArray[np.float64]:
    """Jacobian of ``C^T m`` with respect to a right-multiplied attitude error."""
    return skew(attitude.T @ reference)


def acc_gate(u_acc: ArrayLike, gravity: float = 9.81, tol: float = 0.05) -> bool:
    """True when the specific-force magnitude is within `tol` of `gravity` (quasi-static)."""
    return abs(float(np.linalg.norm(u_acc)) - gravity) <= tol * gravity


# --------------------------------------------------------------------------
# Sensor synthesis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor noise standard deviations, rates and initial-error spreads."""

    acc: float = 0.026  # m/s^2
    gyr: float = 0.0025  # rad/s
    mag: float = 0.85  # field units (same scale as the reference field)
    uwb: float = 0.1  # m
    imu_rate: float = 100.0  # Hz
    uwb_rate: float = 20.0  # Hz
    channels: int = 3
    init_pos: float = 0.45  # m
    init_vel: float = 0.45  # m/s
    init_att: float = 0.1  # rad

    def __post_init__(self) -> None:
        for name in ("acc", "gyr", "mag", "uwb", "init_pos", "init_vel", "init_att"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"noise.{name} must be a finite non-negative number")
        if self.imu_rate <= 0.0 or self.uwb_rate <= 0.0:
            raise ValueError("sensor rates must be positive")
        if int(self.channels) != self.channels or self.channels < 1:
            raise ValueError("channels must be a positive integer")

    @classmethod
    def zero(cls, **kwargs) -> NoiseSpec:
        """All standard deviations zero; rates and other fields keep their defaults unless given."""
        zeros = dict(acc=0.0, gyr=0.0, mag=0.0, uwb=0.0, init_pos=0.0, init_vel=0.0, init_att=0.0)
        zeros.update(kwargs)
        return cls(**zeros)


@dataclass
class SwarmTruth:
    """
    Ground truth sampled on a uniform grid.

    Attributes
    ----------
    t : (K,) timestamps in seconds, strictly increasing.
    rel_pos, rel_vel : (K, N-1, 3) position and velocity of agents 1..N-1
        relative to agent 0, absolute frame.
    attitudes : (K, N, 3, 3) body-to-absolute direction cosine matrices.
    accel : (K, N, 3) absolute-frame acceleration of each agent's IMU.
    omega : (K, N, 3) body-frame angular velocity.
    """

    t: NDArray[np.float64]
    rel_pos: NDArray[np.float64]
    rel_vel: NDArray[np.float64]
    attitudes: NDArray[np.float64]
    accel: NDArray[np.float64]
    omega: NDArray[np.float64]

    @property
    def n_agents(self) -> int:
        return self.attitudes.shape[1]

    def pose(self, k: int) -> SwarmPose:
        return SwarmPose(self.rel_pos[k], self.attitudes[k])

    def index(self, t: float) -> int:
        """Index of the grid timestamp nearest to `t`."""
        k = int(np.searchsorted(self.t, t))
        if k > 0 and (k == len(self.t) or t - self.t[k - 1] <= self.t[k] - t):
            k -= 1
        return k


@dataclass
class ImuSample:
    """IMU readings of every agent at one timestamp, each ``(N, 3)``, body frame."""

    t: float
    acc: NDArray[np.float64]
    gyr: NDArray[np.float64]
    mag: NDArray[np.float64]


@dataclass
class ImuData:
    """Stacked IMU streams, ``(K, N, 3)`` per channel."""

    t: NDArray[np.float64]
    acc: NDArray[np.float64]
    gyr: NDArray[np.float64]
    mag: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.t)

    def sample(self, k: int) -> ImuSample:
        return ImuSample(float(self.t[k]), self.acc[k], self.gyr[k], self.mag[k])


@dataclass(frozen=True)
class RangeMeasurement:
    t: float
    tag_a: TagId
    tag_b: TagId
    value: float
    variance: float

    @property
    def pair(self) -> TagPair:
        return (self.tag_a, self.tag_b)


def simulate_imu(
    truth: SwarmTruth,
    noise: NoiseSpec,
    seed: int | np.random.SeedSequence | None = None,
    gravity: ArrayLike = GRAVITY,
    mag_field: ArrayLike = MAG_FIELD,
) -> ImuData:
    """
    Synthesize accelerometer, gyroscope and magnetometer readings.

    Specific force is ``C^T (a - g)``, angular rate is the body rate and the
    magnetometer reads ``C^T m``; each channel gets white Gaussian noise with
    the corresponding standard deviation of `noise`.
    """
    rng = np.random.default_rng(seed)
    g = np.asarray(gravity, dtype=float)
    m = np.asarray(mag_field, dtype=float)
    att_t = np.swapaxes(truth.attitudes, -1, -2)
    acc = np.einsum("knij,knj->kni", att_t, truth.accel - g)
    mag = np.einsum("knij,j->kni", att_t, m)
    gyr = truth.omega.copy()
    shape = acc.shape
    acc = acc + noise.acc * rng.standard_normal(shape)
    gyr = gyr + noise.gyr * rng.standard_normal(shape)
    mag = mag + noise.mag * rng.standard_normal(shape)
    return ImuData(truth.t.copy(), acc, gyr, mag)


@dataclass(frozen=True)
class ScheduledRange:
    t: float
    pair: TagPair
    channel: int


def schedule_ranging(
    layout: SwarmLayout,
    graph: RangeGraph,
    uwb_rate: float,
    channels: int,
    horizon: float,
    t0: float = 0.0,
) -> list[ScheduledRange]:
    """
    Round-robin TDMA schedule over the edges of `graph`.

    At every epoch ``t0 + k / uwb_rate`` (``t <= horizon``) up to `channels`
    pairs range simultaneously, with no tag used twice in one epoch. Pairs are
    taken from the front of a rotating queue and re-queued at the back, so all
    edges are visited at the same long-run frequency.
    """
    if channels < 1 or uwb_rate <= 0.0:
        raise ValueError("channels must be >= 1 and uwb_rate > 0")
    queue = deque(
        (layout.tag_id(a), layout.tag_id(b)) for a, b in sorted(graph.edges)
    )
    out: list[ScheduledRange] = []
    if not queue:
        return out
    n_epochs = int(np.floor((horizon - t0) * uwb_rate + 1e-9)) + 1
    for k in range(n_epochs):
        t = t0 + k / uwb_rate
        busy: set[TagId] = set()
        picked = []
        for idx, pair in enumerate(queue):
            if len(picked) == channels:
                break
            if pair[0] in busy or pair[1] in busy:
                continue
            busy.update(pair)
            picked.append(idx)
        for ch, idx in enumerate(picked):
            out.append(ScheduledRange(t, queue[idx], ch))
        for idx in reversed(picked):
            pair = queue[idx]
            del queue[idx]
            queue.append(pair)
    return out


def simulate_ranges(
    truth: SwarmTruth,
    layout: SwarmLayout,
    schedule: list[ScheduledRange],
    noise: NoiseSpec,
    seed: int | np.random.SeedSequence | None = None,
    variance_floor: float = 1e-6,
) -> list[RangeMeasurement]:
    """
    Noisy ranges for every scheduled slot, evaluated at the nearest truth sample.

    The reported variance is ``noise.uwb**2`` but never below
    `variance_floor`, so a noiseless stream still carries a usable weight.
    """
    rng = np.random.default_rng(seed)
    var = max(noise.uwb**2, variance_floor)
    out = []
    for slot in schedule:
        k = truth.index(slot.t)
        value = predict_range(truth.pose(k), layout, slot.pair)
        value += noise.uwb * rng.standard_normal()
        out.append(RangeMeasurement(float(truth.t[k]), slot.pair[0], slot.pair[1], max(value, 0.0), var))
    return out
