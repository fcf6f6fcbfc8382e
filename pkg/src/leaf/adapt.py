"""Ranking-loss test-time adaptation and the iterated predict/select/adapt loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .choices import ALL_TRANSFORMS, ChoiceSet, build_choice_sets
from .data import NormStats
from .numerics import Adam, Tensor
from .predictor import Predictor
from .selector import PromptContext, SelectionResult
from .stgraph import RoadNetwork, STGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    K: int = 2
    M: int = 5
    epsilon: float = 0.0
    delta: float = 1.0
    lr: float = 1e-4
    persist_across_windows: bool = True

    def __post_init__(self):
        if self.K < 1 or self.M < 0 or self.epsilon < 0 or self.delta <= 0:
            raise ValueError("AdaptConfig needs K >= 1, M >= 0, epsilon >= 0, delta > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def ranking_terms(forecast: Tensor, candidates: np.ndarray, selected: np.ndarray, others: np.ndarray,
                  epsilon: float, delta: float) -> Tensor:
    """Per-row hinge ``[D(y, sel) - min_{others} D(y, c) + eps]_+``.

    ``forecast`` is ``(N, T)``; ``candidates`` ``(N, C, T)`` constants;
    ``selected`` gives each row's index into the candidates and ``others``
    is a ``(N, C)`` mask of the competitors.
    """
    n, t = forecast.shape
    if not np.asarray(others, bool).any(axis=-1).all():
        raise nx.ContractError("ranking loss needs at least one competing choice per vertex")
    dist = nx.huber(nx.reshape(forecast, (n, 1, t)), Tensor(candidates), delta, axis=-1)
    pos = nx.take(dist, selected)
    neg = nx.masked_min(dist, others)
    return nx.relu(nx.add(nx.sub(pos, neg), epsilon))


def ranking_loss(y_branch, selected, others: Sequence, cfg: AdaptConfig) -> Tensor:
    """Single-forecast form: ``y_branch`` (T,) against the selected choice and the rest."""
    if len(others) == 0:
        raise nx.ContractError("others must be nonempty")
    y = y_branch if isinstance(y_branch, Tensor) else Tensor(y_branch)
    cands = np.stack([np.asarray(selected, float), *(np.asarray(o, float) for o in others)])[None]
    mask = np.ones(cands.shape[:2], bool)
    mask[0, 0] = False
    term = ranking_terms(nx.reshape(y, (1, y.shape[-1])), cands, np.zeros(1, np.int64), mask,
                         cfg.epsilon, cfg.delta)
    return nx.sum(term)


@dataclass(frozen=True, eq=False)
class SupervisionTargets:
    """Choice sets and selections re-expressed in normalized units for the loss."""

    candidates: np.ndarray  # (N, C + 1, T_out); last slot is the selected values
    selected: np.ndarray  # (N,) always C
    others: np.ndarray  # (N, C + 1) competitor mask


def supervision_targets(choice_sets: Sequence[ChoiceSet], selections: Sequence[SelectionResult],
                        stats: NormStats) -> SupervisionTargets:
    n = len(choice_sets)
    c = len(choice_sets[0])
    by_vertex = {s.vertex: s for s in selections}
    missing = [cs.vertex for cs in choice_sets if cs.vertex not in by_vertex]
    if missing:
        raise ValueError(f"selections missing for vertices {missing}")
    cands = np.empty((n, c + 1, choice_sets[0].choices[0].values.shape[0]))
    others = np.ones((n, c + 1), bool)
    others[:, c] = False
    for row, cs in enumerate(choice_sets):
        sel = by_vertex[cs.vertex]
        cands[row, :c] = cs.values()
        cands[row, c] = sel.values
        if not sel.fallback_used:
            others[row, sel.chosen_label - 1] = False
    return SupervisionTargets(stats.normalize_flow(cands), np.full(n, c, np.int64), others)


def _objective(predictor: Predictor, branches, x: np.ndarray, st: STGraph, targets: SupervisionTargets,
               cfg: AdaptConfig) -> tuple[Tensor, dict[str, np.ndarray]]:
    total, per_branch = None, {}
    for name in branches:
        out = predictor.branch(name).forward(x, st)
        y = nx.reshape(out, out.shape[1:])
        terms = ranking_terms(y, targets.candidates, targets.selected, targets.others, cfg.epsilon, cfg.delta)
        per_branch[name] = terms.data.copy()
        part = nx.mean(terms)
        total = part if total is None else nx.add(total, part)
    return total, per_branch


@dataclass
class AdaptOutcome:
    losses: list[float]  # total objective before each of the M steps (and after the last)
    per_vertex: dict[str, np.ndarray]  # hinge values before the first step
    rolled_back: bool = False


def adapt_step(predictor: Predictor, st: STGraph, x: np.ndarray, targets: SupervisionTargets,
               optimizer: Adam, cfg: AdaptConfig, branches=("graph", "hypergraph")) -> AdaptOutcome:
    """``cfg.M`` optimizer steps on the summed per-branch ranking losses, averaged over vertices.

    On a non-finite value the parameters and optimizer state are restored.
    """
    snapshot = predictor.state(), optimizer.state_dict()
    losses, first = [], {}
    try:
        for step in range(cfg.M + 1):
            if step == cfg.M:
                with nx.no_grad():
                    loss, per = _objective(predictor, branches, x, st, targets, cfg)
                losses.append(loss.item())
                break
            loss, per = _objective(predictor, branches, x, st, targets, cfg)
            if step == 0:
                first = per
            losses.append(loss.item())
            nx.backward(loss)
            optimizer.step()
        if not first:
            first = per
    except nx.NonFiniteError as exc:
        nx.current_tape().clear()
        predictor.load_state(snapshot[0])
        optimizer.load_state_dict(snapshot[1])
        optimizer.zero_grad()
        log.warning("adaptation rolled back: %s", exc)
        return AdaptOutcome(losses, first, rolled_back=True)
    return AdaptOutcome(losses, first)


# ---------------------------------------------------------------------------
# inference loop
# ---------------------------------------------------------------------------


def prompt_contexts(raw_window: np.ndarray, times: np.ndarray, network: RoadNetwork, T_out: int,
                    events_text: str | None = None) -> list[PromptContext]:
    """Per-vertex prompt context for a ``(T, N, F)`` raw window whose input steps are at ``times``."""
    step = times[1] - times[0] if len(times) > 1 else np.timedelta64(5, "m")
    start = times[-1] + step
    end = start + (T_out - 1) * step
    out = []
    for i, meta in enumerate(network.sensors):
        lat_lon = (meta.lat, meta.lon) if meta.lat is not None and meta.lon is not None else None
        out.append(PromptContext(meta.sensor_id, raw_window[:, i, 0], times, start, end,
                                 meta.description, lat_lon, events_text))
    return out


@dataclass
class InferenceResult:
    forecast: np.ndarray  # (N, T_out) flow units
    first_pass: dict[str, np.ndarray]  # branch forecasts before any adaptation, flow units
    selections: list[list[SelectionResult]] = field(default_factory=list)  # per iteration
    audit: list[dict] = field(default_factory=list)


def run_inference(raw_window: np.ndarray, times: np.ndarray, st: STGraph, predictor: Predictor, selector,
                  cfg: AdaptConfig, stats: NormStats, network: RoadNetwork, optimizer: Adam | None = None,
                  transforms=ALL_TRANSFORMS, branches=("graph", "hypergraph"), truth: np.ndarray | None = None,
                  events_text: str | None = None, window_index: int = 0) -> InferenceResult:
    """K rounds of forecast, choice-set construction, selection and adaptation for one window.

    ``raw_window`` is ``(T, N, F)`` in flow units and ``truth`` (if given) is
    ``(N, T_out)``; the returned forecast stacks the last round's selections.
    With ``selector=None`` the branches' mean is returned without adaptation.
    """
    x = stats.normalize(raw_window)[None]
    T_out = predictor.cfg.T_out
    if optimizer is None:
        optimizer = Adam([p for b in branches for p in predictor.branch(b).parameters()], lr=cfg.lr)

    def branch_forecasts():
        with nx.no_grad():
            return {b: stats.denormalize_flow(predictor.branch(b).forward(x, st).data[0]) for b in branches}

    first = branch_forecasts()
    if selector is None:
        return InferenceResult(np.mean([first[b] for b in branches], axis=0), first)

    contexts = prompt_contexts(raw_window, times, network, T_out, events_text)
    result = InferenceResult(np.empty(0), first)
    forecasts = first
    for j in range(1, cfg.K + 1):
        if j > 1:
            forecasts = branch_forecasts()
        choice_sets = build_choice_sets(forecasts, transforms)
        selections = selector.select(choice_sets, contexts, truth)
        result.selections.append(selections)
        outcome = None
        if cfg.M > 0:
            targets = supervision_targets(choice_sets, selections, stats)
            outcome = adapt_step(predictor, st, x, targets, optimizer, cfg, branches)
        for cs, sel in zip(choice_sets, selections):
            result.audit.append({
                "window": window_index,
                "vertex": cs.vertex,
                "iteration": j,
                "labels": [c.label for c in cs.choices],
                "chosen": sel.chosen_label,
                "fallback": sel.fallback_used,
                "losses": {b: float(v[cs.vertex]) for b, v in outcome.per_vertex.items()} if outcome else {},
            })
    result.forecast = np.stack([s.values for s in result.selections[-1]])
    return result
