"""
Rigidity matrices and rank-based observability tests for ranging networks.

Tags are indexed from 0 and tag 0 is the reference tag: the state is the
stack of the ``n - 1`` positions of tags 1..n-1 relative to tag 0, so column
block ``b`` of a rigidity matrix belongs to tag ``b + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geom3d import skew
from .sensors import PoseLike, SwarmLayout, SwarmPose, tag_positions

DEFAULT_RANK_TOL = 1e-10

CAVEATS = (
    "rank tests cover continuous deformations only; discontinuous flex and "
    "flip ambiguities are not detected",
    "with attitude uncertainty, nearly parallel two-tag agents are prone to flip ambiguities",
)


class GraphError(ValueError):
    pass


class DegenerateEdgeError(ValueError):
    def __init__(self, pair: tuple[int, int]):
        super().__init__(f"edge {pair} joins two coincident tags")
        self.pair = pair


class UnsupportedSizeError(ValueError):
    pass


@dataclass(frozen=True)
class RangeGraph:
    """Undirected range-measurement graph over `n` tags, without self-loops."""

    n: int
    edges: frozenset[tuple[int, int]]

    def __init__(self, n: int, edges: Iterable[Sequence[int]]):
        n = int(n)
        if n < 1:
            raise GraphError("a graph needs at least one tag")
        clean = set()
        for e in edges:
            i, j = (int(x) for x in e)
            if i == j:
                raise GraphError(f"self-loop on tag {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) references a tag outside 0..{n - 1}")
            clean.add((min(i, j), max(i, j)))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "edges", frozenset(clean))

    @classmethod
    def complete(cls, n: int) -> RangeGraph:
        return cls(n, combinations(range(n), 2))

    @property
    def m(self) -> int:
        return len(self.edges)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def without(self, *edges: tuple[int, int]) -> RangeGraph:
        drop = {(min(i, j), max(i, j)) for i, j in edges}
        return RangeGraph(self.n, self.edges - drop)


@dataclass(frozen=True)
class RelativeConfiguration:
    """Positions of tags 1..n-1 relative to reference tag 0, shape ``(n - 1, 3)``."""

    positions: NDArray[np.float64]

    def __post_init__(self) -> None:
        p = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("positions must have shape (n - 1, 3)")
        object.__setattr__(self, "positions", p)

    @classmethod
    def from_points(cls, points: ArrayLike) -> RelativeConfiguration:
        """Build from absolute tag positions ``(n, 3)``; row 0 becomes the reference."""
        pts = np.asarray(points, dtype=float)
        return cls(pts[1:] - pts[0])

    @property
    def n(self) -> int:
        return self.positions.shape[0] + 1

    @property
    def dim(self) -> int:
        return 3 * (self.n - 1)

    def point(self, i: int) -> NDArray[np.float64]:
        return np.zeros(3) if i == 0 else self.positions[i - 1]

    def points(self) -> NDArray[np.float64]:
        return np.vstack([np.zeros(3), self.positions])

    def state(self) -> NDArray[np.float64]:
        return self.positions.reshape(-1)


@dataclass(frozen=True)
class RigidityMatrix:
    """Rigidity matrix with its row-to-edge and column-block-to-tag maps."""

    matrix: NDArray[np.float64]
    edges: tuple[tuple[int, int], ...]
    n: int

    @property
    def block_tags(self) -> tuple[int, ...]:
        return tuple(range(1, self.n))

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)


def rigidity_matrix(config: RelativeConfiguration, graph: RangeGraph) -> RigidityMatrix:
    """
    Jacobian of the true ranges with respect to the relative-position state.

    The row for edge ``(i, j)`` holds ``u^T`` in the block of tag `j` and
    ``-u^T`` in the block of tag `i`, where ``u`` is the unit vector from tag
    `i` to tag `j`; the reference tag has no block.
    """
    if graph.n != config.n:
        raise GraphError(f"graph has {graph.n} tags but configuration has {config.n}")
    edges = tuple(graph.sorted_edges())
    r = np.zeros((len(edges), config.dim))
    for row, (i, j) in enumerate(edges):
        d = config.point(j) - config.point(i)
        rng = np.linalg.norm(d)
        if rng <= 1e-12:
            raise DegenerateEdgeError((i, j))
        u = d / rng
        if j:
            r[row, 3 * (j - 1) : 3 * j] = u
        if i:
            r[row, 3 * (i - 1) : 3 * i] = -u
    return RigidityMatrix(r, edges, config.n)


def rotational_null_basis(config: RelativeConfiguration) -> NDArray[np.float64]:
    """
    The three rotational modes, as columns of a ``(3(n-1), 3)`` array.

    Column ``i`` stacks ``-skew(r_k) e_i`` over the relative positions ``r_k``:
    the state velocity produced by a unit rotation rate about axis ``e_i``.
    """
    return np.vstack([-skew(p) for p in config.positions])


def singular_values(m: ArrayLike) -> NDArray[np.float64]:
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return np.zeros(0)
    return np.linalg.svd(m, compute_uv=False)


def rank_tolerance(m: ArrayLike, rel_tol: float = DEFAULT_RANK_TOL) -> float:
    m = np.asarray(m, dtype=float)
    s = singular_values(m)
    smax = s[0] if s.size else 0.0
    return max(m.shape) * smax * rel_tol


def numeric_rank(m: ArrayLike, rel_tol: float = DEFAULT_RANK_TOL, tol: float | None = None) -> int:
    """
    Number of singular values above ``max(shape) * sigma_max * rel_tol``.

    An absolute threshold `tol` overrides the relative rule.
    """
    m = np.asarray(m, dtype=float)
    s = singular_values(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    thresh = tol if tol is not None else max(m.shape) * s[0] * rel_tol
    return int(np.count_nonzero(s > thresh))


@dataclass
class ObservabilityReport:
    """Outcome of a rank test on a (possibly augmented) rigidity matrix."""

    rank: int
    required_rank: int
    verdict: str
    null_basis: NDArray[np.float64]
    singular_values: NDArray[np.float64]
    baseline_angle: float | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def deficiency(self) -> int:
        return self.required_rank - self.rank

    @property
    def ok(self) -> bool:
        return self.verdict in ("rigid", "observable")

    @property
    def verdict_text(self) -> str:
        if self.verdict == "deficient":
            return f"deficient ({self.deficiency})"
        return self.verdict

    def singular_gap(self) -> float:
        """Ratio of the last retained singular value to the first discarded one."""
        s = self.singular_values
        if self.rank == 0 or self.rank >= s.size or s[self.rank] == 0.0:
            return float("inf")
        return float(s[self.rank - 1] / s[self.rank])

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict_text,
            "rank": self.rank,
            "required_rank": self.required_rank,
            "deficiency": self.deficiency,
            "baseline_angle": self.baseline_angle,
            "singular_values": [float(x) for x in self.singular_values],
            "residual_modes": [[float(x) for x in v] for v in self.null_basis],
            "notes": list(self.notes),
        }


def _null_space(m: NDArray[np.float64], rank: int) -> NDArray[np.float64]:
    _, _, vt = np.linalg.svd(m)
    return vt[rank:]


def _report(m: NDArray[np.float64], required: int, ok_verdict: str, rel_tol: float) -> ObservabilityReport:
    rank = numeric_rank(m, rel_tol)
    verdict = ok_verdict if rank >= required else "deficient"
    basis = _null_space(m, rank) if m.size else np.eye(m.shape[1])
    return ObservabilityReport(rank, required, verdict, basis, singular_values(m), notes=list(CAVEATS))


def is_infinitesimally_rigid(
    config: RelativeConfiguration, graph: RangeGraph, rel_tol: float = DEFAULT_RANK_TOL
) -> ObservabilityReport:
    """Rigid iff ``rank R == 3n - 6``; requires at least three tags."""
    if config.n < 3:
        raise UnsupportedSizeError(f"infinitesimal rigidity needs n >= 3 tags, got {config.n}")
    r = rigidity_matrix(config, graph).matrix
    return _report(r, 3 * config.n - 6, "rigid", rel_tol)


MeasuredEdge = Union[int, tuple[int, int]]


def augment_with_position_edges(
    r: RigidityMatrix | ArrayLike, measured: Sequence[MeasuredEdge], n: int | None = None
) -> NDArray[np.float64]:
    """
    Stack selector rows for directly measured relative positions on top of `r`.

    Each entry of `measured` is either a tag index ``j`` (the position of tag
    ``j`` relative to the reference is measured) or a pair ``(i, j)`` (the
    vector from tag ``i`` to tag ``j`` is measured). Each contributes a 3-row
    block: ``I`` in tag ``j``'s column block and ``-I`` in tag ``i``'s.
    """
    if isinstance(r, RigidityMatrix):
        n = r.n
        mat = r.matrix
    else:
        mat = np.asarray(r, dtype=float)
        if n is None:
            n = mat.shape[1] // 3 + 1
    dim = 3 * (n - 1)
    blocks = []
    for item in measured:
        i, j = (0, item) if np.isscalar(item) else item
        i, j = int(i), int(j)
        if i == j:
            raise GraphError(f"measured position edge ({i}, {j}) is a self-loop")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"measured tag index out of range in {item!r}")
        sel = np.zeros((3, dim))
        if j:
            sel[:, 3 * (j - 1) : 3 * j] = np.eye(3)
        if i:
            sel[:, 3 * (i - 1) : 3 * i] = -np.eye(3)
        blocks.append(sel)
    if not blocks:
        return mat.copy()
    return np.vstack(blocks + [mat])


def is_locally_observable(
    config: RelativeConfiguration,
    graph: RangeGraph,
    measured: Sequence[MeasuredEdge] = (),
    rel_tol: float = DEFAULT_RANK_TOL,
) -> ObservabilityReport:
    """Observable iff the (augmented) rigidity matrix has full column rank ``3(n - 1)``."""
    r = rigidity_matrix(config, graph)
    m = augment_with_position_edges(r, measured)
    return _report(m, config.dim, "observable", rel_tol)


def line_angle(a: ArrayLike, b: ArrayLike) -> float:
    """Angle in ``[0, pi/2]`` between the lines spanned by `a` and `b`."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    s = np.linalg.norm(np.cross(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arctan2(s, c))


def check_two_tag_observability(
    layout: SwarmLayout,
    attitudes: ArrayLike,
    graph: RangeGraph,
    rel_pos: ArrayLike,
    rel_tol: float = DEFAULT_RANK_TOL,
) -> ObservabilityReport:
    """
    Local observability of a swarm whose two-tag baselines are known in the absolute frame.

    Each two-tag baseline is rotated into the absolute frame and treated as a
    measured relative-position edge between that agent's two tags. The
    report also carries the largest angle between any two absolute-frame
    baselines; fewer than two two-tag agents gives the verdict
    ``"insufficient-baselines"``.

    Parameters
    ----------
    layout : SwarmLayout
    attitudes : (N, 3, 3) body-to-absolute rotations.
    graph : RangeGraph over the layout's global tag indices.
    rel_pos : (N - 1, 3) IMU positions of agents 1..N-1 relative to agent 0.
    """
    attitudes = np.asarray(attitudes, dtype=float)
    pose = SwarmPose(np.asarray(rel_pos, dtype=float).reshape(-1, 3), attitudes)
    if graph.n != layout.n_tags:
        raise GraphError(f"graph has {graph.n} tags, layout has {layout.n_tags}")
    config = RelativeConfiguration.from_points(tag_positions(pose, layout))

    two_tag = layout.two_tag_agents
    measured = [(layout.tag_index((k, 0)), layout.tag_index((k, 1))) for k in two_tag]
    baselines = [attitudes[k] @ layout.baseline(k) for k in two_tag]

    report = is_locally_observable(config, graph, measured, rel_tol)
    rigid = numeric_rank(rigidity_matrix(config, graph).matrix, rel_tol) == 3 * config.n - 6
    if not rigid:
        report.notes.append("underlying range graph is not infinitesimally rigid")
    if len(baselines) >= 2:
        report.baseline_angle = max(line_angle(a, b) for a, b in combinations(baselines, 2))
    if len(two_tag) < 2:
        report.verdict = "insufficient-baselines"
        report.notes.append(f"{len(two_tag)} two-tag agent(s); at least two are required")
    return report


def absolute_baselines(layout: SwarmLayout, attitudes: ArrayLike) -> NDArray[np.float64]:
    attitudes = np.asarray(attitudes, dtype=float)
    return np.array([attitudes[k] @ layout.baseline(k) for k in layout.two_tag_agents])


def pose_config(state: PoseLike, layout: SwarmLayout) -> RelativeConfiguration:
    return RelativeConfiguration.from_points(tag_positions(state, layout))
