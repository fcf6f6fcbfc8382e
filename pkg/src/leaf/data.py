"""Dataset loading, synthetic traffic generation, windowing, splits and normalization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .stgraph import RoadNetwork, SensorMeta, read_adjacency_csv

STEP = timedelta(minutes=5)
STEPS_PER_DAY = 288


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True, eq=False)
class Dataset:
    flows: np.ndarray  # (T_total, N, F) vehicles per 5-minute bin
    timestamps: np.ndarray  # datetime64[m], uniform 5-minute cadence
    network: RoadNetwork

    def __post_init__(self):
        if self.flows.ndim != 3:
            raise DataError("flows must be (T_total, N, F)")
        if self.flows.shape[1] != self.network.n_vertices:
            raise DataError("flow columns and network vertices disagree")
        if len(self.timestamps) != len(self.flows):
            raise DataError("one timestamp per flow row is required")
        if np.any(self.flows < 0):
            raise DataError("flows must be nonnegative")
        _check_cadence(self.timestamps)

    @property
    def n_steps(self) -> int:
        return self.flows.shape[0]


def _check_cadence(stamps: np.ndarray) -> None:
    if len(stamps) < 2:
        return
    gaps = np.diff(stamps).astype("timedelta64[m]").astype(np.int64)
    if np.any(gaps == 0):
        k = int(np.argmax(gaps == 0)) + 1
        raise DataError(f"duplicate timestamp {stamps[k]}")
    if np.any(gaps != 5):
        k = int(np.argmax(gaps != 5)) + 1
        raise DataError(f"non-uniform timestamp spacing at {stamps[k]} (expected 5 minutes)")


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _read_meta(path) -> list[SensorMeta]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise DataError(f"{path}: meta must be a JSON array")
    out = []
    for k, rec in enumerate(raw):
        if "sensor_id" not in rec:
            raise DataError(f"{path}: entry {k} lacks sensor_id")
        out.append(
            SensorMeta(str(rec["sensor_id"]), rec.get("lat"), rec.get("lon"), rec.get("description"))
        )
    return out


def load_dataset(flow_path, adjacency_path, meta_path=None) -> Dataset:
    """Load a flow CSV (timestamp column + one column per sensor), edge list and optional meta."""
    with open(flow_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{flow_path}: empty file") from None
        ids = [h.strip() for h in header[1:]]
        if not ids:
            raise DataError(f"{flow_path}: no sensor columns")
        if len(set(ids)) != len(ids):
            raise DataError(f"{flow_path}: duplicate sensor ids in header")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{flow_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                stamps.append(np.datetime64(datetime.fromisoformat(row[0].strip()), "m"))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{flow_path}:{lineno}: {exc}") from None
    flows = np.asarray(rows, dtype=np.float64)[:, :, None]
    if np.any(~np.isfinite(flows)) or np.any(flows < 0):
        raise DataError(f"{flow_path}: flows must be finite and nonnegative")

    sensors = [SensorMeta(sid) for sid in ids]
    if meta_path is not None:
        by_id = {m.sensor_id: m for m in _read_meta(meta_path)}
        unknown = set(by_id) - set(ids)
        if unknown:
            raise DataError(f"{meta_path}: unknown sensor ids {sorted(unknown)}")
        sensors = [by_id.get(sid, SensorMeta(sid)) for sid in ids]
    try:
        network = read_adjacency_csv(adjacency_path, sensors)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return Dataset(flows, np.asarray(stamps, dtype="datetime64[m]"), network)


def save_dataset(dataset: Dataset, directory) -> dict[str, Path]:
    """Write ``flows.csv``, ``adjacency.csv`` and ``meta.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = dataset.network.sensor_ids
    paths = {k: directory / f for k, f in
             (("flows", "flows.csv"), ("adjacency", "adjacency.csv"), ("meta", "meta.json"))}
    with open(paths["flows"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *ids])
        for stamp, row in zip(dataset.timestamps, dataset.flows[:, :, 0]):
            w.writerow([str(stamp.astype("datetime64[m]")), *(repr(float(v)) for v in row)])
    with open(paths["adjacency"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "cost"])
        for i, j in sorted(dataset.network.edges):
            w.writerow([ids[i], ids[j], dataset.network.costs.get((i, j), 1.0)])
    with open(paths["meta"], "w") as fh:
        json.dump(
            [{"sensor_id": s.sensor_id, "lat": s.lat, "lon": s.lon, "description": s.description}
             for s in dataset.network.sensors],
            fh, indent=1,
        )
    return paths


# ---------------------------------------------------------------------------
# splits, windows, normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.10
    val_fraction: float = 0.10

    def __post_init__(self):
        if not (0 < self.train_fraction < 1 and 0 < self.val_fraction < 1):
            raise ValueError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.val_fraction >= 1:
            raise ValueError("train + val fractions must leave a test range")

    def ranges(self, n_steps: int) -> tuple[range, range, range]:
        """Contiguous chronological train, val, test index ranges."""
        a = int(round(n_steps * self.train_fraction))
        b = a + int(round(n_steps * self.val_fraction))
        return range(0, a), range(a, b), range(b, n_steps)


@dataclass(frozen=True, eq=False)
class Windows:
    inputs: np.ndarray  # (W, T, N, F) raw flows
    targets: np.ndarray  # (W, T_out, N) raw flow channel
    starts: np.ndarray  # (W,) index of each window's first input step

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Windows":
        return Windows(self.inputs[idx], self.targets[idx], self.starts[idx])


def make_windows(dataset_or_flows, T: int = 12, T_out: int = 12, stride: int = 1,
                 start: int = 0, stop: int | None = None) -> Windows:
    """Slice ``(history, future)`` pairs lying wholly inside ``[start, stop)``."""
    flows = dataset_or_flows.flows if isinstance(dataset_or_flows, Dataset) else dataset_or_flows
    stop = len(flows) if stop is None else stop
    span = stop - start
    if span < T + T_out:
        raise DataError(f"range of {span} steps is shorter than one window ({T + T_out})")
    starts = np.arange(start, stop - T - T_out + 1, stride)
    inputs = np.stack([flows[s : s + T] for s in starts])
    targets = np.stack([flows[s + T : s + T + T_out, :, 0] for s in starts])
    return Windows(inputs, targets, starts)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,)

    @classmethod
    def fit(cls, flows: np.ndarray) -> "NormStats":
        mean = flows.reshape(-1, flows.shape[-1]).mean(axis=0)
        std = np.maximum(flows.reshape(-1, flows.shape[-1]).std(axis=0), 1e-6)
        return cls(mean, std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """z-score the trailing feature axis."""
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def normalize_flow(self, y: np.ndarray) -> np.ndarray:
        """z-score values of the flow channel (channel 0)."""
        return (y - self.mean[0]) / self.std[0]

    def denormalize_flow(self, y: np.ndarray) -> np.ndarray:
        return y * self.std[0] + self.mean[0]


@dataclass(frozen=True, eq=False)
class Prepared:
    """Model-ready view of windows: normalized inputs and ``(W, N, T_out)`` normalized targets."""

    inputs: np.ndarray
    targets_norm: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


def prepare(windows: Windows, stats: NormStats) -> Prepared:
    return Prepared(
        stats.normalize(windows.inputs),
        stats.normalize_flow(np.transpose(windows.targets, (0, 2, 1))),
    )


@dataclass(frozen=True, eq=False)
class Splits:
    train: Windows
    val: Windows
    test: Windows
    stats: NormStats
    ranges: tuple[range, range, range]


def split_windows(dataset: Dataset, split: SplitSpec = SplitSpec(), T: int = 12, T_out: int = 12,
                  val_stride: int = 1, test_limit: int | None = None) -> Splits:
    """Chronological splits; stats come from the training range only; test windows never overlap."""
    tr, va, te = split.ranges(dataset.n_steps)
    stats = NormStats.fit(dataset.flows[tr.start : tr.stop])
    test = make_windows(dataset, T, T_out, T + T_out, te.start, te.stop)
    if test_limit is not None:
        test = test.subset(slice(0, test_limit))
    return Splits(
        make_windows(dataset, T, T_out, 1, tr.start, tr.stop),
        make_windows(dataset, T, T_out, val_stride, va.start, va.stop),
        test,
        stats,
        (tr, va, te),
    )


# ---------------------------------------------------------------------------
# synthetic ring-road traffic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftSpec:
    """Distortion applied to the test range only.

    ``scale`` multiplies every test-range flow; ``trend`` adds a linear ramp
    reaching ``1 + trend`` at the end of the test range.
    """

    scale: float = 1.0
    trend: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.trend == 0.0


def ring_network(n_vertices: int) -> RoadNetwork:
    angles = 2 * np.pi * np.arange(n_vertices) / n_vertices
    sensors = tuple(
        SensorMeta(
            f"S{k:03d}",
            round(37.77 + 0.05 * np.sin(a), 6),
            round(-122.42 + 0.05 * np.cos(a), 6),
            f"Ring road sensor {k}, {int(np.degrees(a))} degrees around the loop",
        )
        for k, a in enumerate(angles)
    )
    edges = {(k, (k + 1) % n_vertices) for k in range(n_vertices) if (k + 1) % n_vertices != k}
    return RoadNetwork.from_edges(n_vertices, edges, sensors)


def synth_generate(n_vertices: int, days: int, shift: ShiftSpec = ShiftSpec(), seed: int = 42,
                   split: SplitSpec = SplitSpec(), start: str = "2024-01-01T00:00") -> Dataset:
    """Ring-road flows: per-vertex base plus morning and evening rush-hour bumps and noise."""
    rng = np.random.default_rng(seed)
    n_steps = days * STEPS_PER_DAY
    hours = (np.arange(n_steps) % STEPS_PER_DAY) / 12.0
    base = rng.uniform(60.0, 120.0, n_vertices)
    morning = rng.uniform(120.0, 220.0, n_vertices)
    evening = rng.uniform(120.0, 220.0, n_vertices)
    phase = 0.75 * np.sin(2 * np.pi * np.arange(n_vertices) / n_vertices)
    width = 1.6

    def bump(center):
        return np.exp(-0.5 * ((hours[:, None] - center - phase[None, :]) / width) ** 2)

    clean = base + morning * bump(8.0) + evening * bump(17.5)
    noise = rng.normal(0.0, 1.0, (n_steps, n_vertices)) * (4.0 + 0.03 * clean)
    flows = clean + noise

    if not shift.is_identity:
        test = split.ranges(n_steps)[2]
        ramp = np.linspace(0.0, 1.0, len(test))
        flows[test.start :] *= (shift.scale * (1.0 + shift.trend * ramp))[:, None]

    flows = np.maximum(flows, 0.0)[:, :, None]
    t0 = np.datetime64(start, "m")
    stamps = t0 + np.arange(n_steps) * np.timedelta64(5, "m")
    return Dataset(flows, stamps, ring_network(n_vertices))
