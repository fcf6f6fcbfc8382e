"""Candidate forecasts built from the branch outputs and five fixed transformations."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class TransformKind(enum.Enum):
    IDENTITY = "identity"
    SMOOTHING = "smoothing"
    UPWARD_TREND = "upward trend"
    DOWNWARD_TREND = "downward trend"
    OVERESTIMATE = "overestimate"
    UNDERESTIMATE = "underestimate"


ALL_TRANSFORMS = (
    TransformKind.SMOOTHING,
    TransformKind.UPWARD_TREND,
    TransformKind.DOWNWARD_TREND,
    TransformKind.OVERESTIMATE,
    TransformKind.UNDERESTIMATE,
)

BRANCH_LABELS = {"graph": "graph branch", "hypergraph": "hypergraph branch"}

DESCRIPTIONS = {
    TransformKind.IDENTITY: "",
    TransformKind.SMOOTHING: "smoothed with a 3-step average filter",
    TransformKind.UPWARD_TREND: "upward trend, +1% rising to +12% over the horizon",
    TransformKind.DOWNWARD_TREND: "downward trend, -1% falling to -12% over the horizon",
    TransformKind.OVERESTIMATE: "overestimate, +5% at every step",
    TransformKind.UNDERESTIMATE: "underestimate, -5% at every step",
}


def parse_transforms(names) -> tuple[TransformKind, ...]:
    """Accept enum values, member names or display names (``"upward trend"``, ``"UPWARD_TREND"``)."""
    out = []
    for name in names:
        if isinstance(name, TransformKind):
            out.append(name)
            continue
        key = str(name).strip()
        try:
            out.append(TransformKind(key.lower().replace("_", " ")))
        except ValueError:
            out.append(TransformKind[key.upper().replace(" ", "_")])
    return tuple(out)


def smooth(y: np.ndarray) -> np.ndarray:
    """Centered 3-point moving average with edge replication."""
    padded = np.concatenate([y[:1], y, y[-1:]])
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def apply_transform(y, kind: TransformKind) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    steps = np.arange(1, len(y) + 1)
    if kind is TransformKind.IDENTITY:
        out = y.copy()
    elif kind is TransformKind.SMOOTHING:
        out = smooth(y)
    elif kind is TransformKind.UPWARD_TREND:
        out = y * (100 + steps) / 100
    elif kind is TransformKind.DOWNWARD_TREND:
        out = y * (100 - steps) / 100
    elif kind is TransformKind.OVERESTIMATE:
        out = y * 105 / 100
    elif kind is TransformKind.UNDERESTIMATE:
        out = y * 95 / 100
    else:  # pragma: no cover
        raise ValueError(kind)
    return np.maximum(out, 0.0)


@dataclass(frozen=True, eq=False)
class Choice:
    label: int
    source: str  # "graph" or "hypergraph"
    transform: TransformKind
    values: np.ndarray

    def describe(self) -> str:
        text = BRANCH_LABELS[self.source]
        if self.transform is not TransformKind.IDENTITY:
            text += " + " + DESCRIPTIONS[self.transform]
        return text


@dataclass(frozen=True, eq=False)
class ChoiceSet:
    vertex: int
    choices: tuple[Choice, ...]

    def __len__(self) -> int:
        return len(self.choices)

    def __getitem__(self, label: int) -> Choice:
        """Look up by 1-based label."""
        if not 1 <= label <= len(self.choices):
            raise IndexError(f"label {label} outside 1..{len(self.choices)}")
        return self.choices[label - 1]

    def values(self) -> np.ndarray:
        return np.stack([c.values for c in self.choices])

    def base_values(self) -> np.ndarray:
        return np.stack([c.values for c in self.choices if c.transform is TransformKind.IDENTITY])


def build_choice_set(forecasts: dict[str, np.ndarray], vertex: int,
                     transforms=ALL_TRANSFORMS) -> ChoiceSet:
    """Untransformed branch outputs first, then each branch's transformed copies.

    ``forecasts`` maps branch name to that vertex's ``T_out`` values in flow
    units; with both branches and all five transforms there are 12 choices.
    Numerically equal candidates are kept so labels map back to provenance.
    """
    sources = [s for s in ("graph", "hypergraph") if s in forecasts]
    if not sources:
        raise ValueError("need at least one branch forecast")
    entries = [(s, TransformKind.IDENTITY) for s in sources]
    entries += [(s, t) for s in sources for t in transforms]
    choices = tuple(
        Choice(k, s, t, apply_transform(forecasts[s], t)) for k, (s, t) in enumerate(entries, start=1)
    )
    return ChoiceSet(vertex, choices)


def build_choice_sets(forecasts: dict[str, np.ndarray], transforms=ALL_TRANSFORMS) -> list[ChoiceSet]:
    """One choice set per vertex from ``(N, T_out)`` branch forecasts."""
    n = next(iter(forecasts.values())).shape[0]
    return [build_choice_set({k: v[i] for k, v in forecasts.items()}, i, transforms) for i in range(n)]
