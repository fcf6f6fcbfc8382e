"""Road networks and their time-unrolled spatio-temporal graphs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SensorMeta:
    sensor_id: str
    lat: float | None = None
    lon: float | None = None
    description: str | None = None


@dataclass(frozen=True)
class RoadNetwork:
    """Undirected sensor graph on vertices ``0..n_vertices-1``.

    ``edges`` holds each undirected pair once as ``(min, max)``.  ``costs``
    keeps whatever distance column the source file carried; it is recorded
    but not used, since connectivity is binary.
    """

    n_vertices: int
    edges: frozenset[tuple[int, int]]
    sensors: tuple[SensorMeta, ...] = ()
    costs: dict[tuple[int, int], float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.n_vertices < 1:
            raise ValueError("a road network needs at least one vertex")
        canon = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-edge at vertex {i}")
            if not (0 <= i < self.n_vertices and 0 <= j < self.n_vertices):
                raise ValueError(f"edge ({i}, {j}) out of range for N={self.n_vertices}")
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(canon))
        if not self.sensors:
            object.__setattr__(
                self, "sensors", tuple(SensorMeta(str(k)) for k in range(self.n_vertices))
            )
        elif len(self.sensors) != self.n_vertices:
            raise ValueError("sensor metadata count must equal n_vertices")

    @classmethod
    def from_edges(cls, n_vertices: int, edges, sensors=()) -> "RoadNetwork":
        return cls(n_vertices, frozenset(tuple(e) for e in edges), tuple(sensors))

    @property
    def sensor_ids(self) -> list[str]:
        return [s.sensor_id for s in self.sensors]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_vertices, self.n_vertices))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a


def read_adjacency_csv(path: str | Path, sensors: list[SensorMeta]) -> RoadNetwork:
    """Read a ``from,to,cost`` edge list, remapping sensor ids to dense indices."""
    index = {s.sensor_id: k for k, s in enumerate(sensors)}
    edges, costs = set(), {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"from", "to"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: adjacency header lacks {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            ends = []
            for key in ("from", "to"):
                sid = (row[key] or "").strip()
                if sid not in index:
                    raise ValueError(f"{path}:{lineno}: unknown sensor id {sid!r}")
                ends.append(index[sid])
            i, j = ends
            if i == j:
                continue
            pair = (min(i, j), max(i, j))
            edges.add(pair)
            cost = (row.get("cost") or "").strip()
            if cost:
                try:
                    costs[pair] = float(cost)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad cost {cost!r}") from None
    return RoadNetwork(len(sensors), frozenset(edges), tuple(sensors), costs)


def normalize_adjacency(a: np.ndarray, self_loops: bool = True) -> np.ndarray:
    """Symmetric degree normalization ``D^-1/2 (A + S) D^-1/2``.

    ``S`` is the identity when ``self_loops`` is set.  Rows of zero degree
    stay zero.
    """
    a = np.asarray(a, dtype=np.float64)
    if self_loops:
        a = a + np.eye(a.shape[0])
    deg = a.sum(axis=1)
    scale = np.sqrt(np.outer(deg, deg))
    # one division per entry keeps simple cases exact (K2 gives 0.5, not 0.5 - ulp)
    return np.divide(a, scale, out=np.zeros_like(a), where=scale > 0)


@dataclass(frozen=True, eq=False)
class STGraph:
    """``T`` copies of the road graph linked by temporal edges.

    Node ``t * N + i`` is vertex ``i`` at step ``t`` (time-major).
    """

    n_vertices: int
    horizon: int
    adjacency: np.ndarray
    normalized: np.ndarray
    self_loops: bool

    @property
    def n_nodes(self) -> int:
        return self.n_vertices * self.horizon

    def flatten(self, t: int, i: int) -> int:
        return t * self.n_vertices + i

    def unflatten(self, node: int) -> tuple[int, int]:
        return divmod(node, self.n_vertices)

    def edges(self) -> set[tuple[int, int]]:
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return set(zip(rows.tolist(), cols.tolist()))


def build_st_graph(network: RoadNetwork, horizon: int, self_loops: bool = True) -> STGraph:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = network.n_vertices
    spatial = network.adjacency()
    # block-diagonal spatial copies plus identity links between consecutive blocks
    big = np.kron(np.eye(horizon), spatial)
    if horizon > 1:
        big += np.kron(np.eye(horizon, k=1) + np.eye(horizon, k=-1), np.eye(n))
    big.setflags(write=False)
    norm = normalize_adjacency(big, self_loops)
    norm.setflags(write=False)
    return STGraph(n, horizon, big, norm, self_loops)
