"""Graph and hypergraph forecasting branches, their parameters and pretraining."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Adam, Parameter, Tensor
from .stgraph import STGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BranchConfig:
    d: int = 64
    L: int = 7
    m: int = 8
    T: int = 12
    T_out: int = 12
    F: int = 1
    self_loops: bool = True
    residual: bool = False
    # "mean" divides each hyperedge aggregate by its total incidence; "sum" is the raw I^T X
    hyperedge_norm: str = "mean"
    # "initial" adds the embedded inputs to every hypergraph layer output; "none" stacks layers bare
    hyper_skip: str = "initial"

    def __post_init__(self):
        bad = [k for k, v in asdict(self).items() if isinstance(v, int) and not isinstance(v, bool) and v < 1]
        if bad:
            raise ValueError(f"BranchConfig fields must be positive: {', '.join(bad)}")
        if self.hyperedge_norm not in ("mean", "sum"):
            raise ValueError("hyperedge_norm must be 'mean' or 'sum'")
        if self.hyper_skip not in ("initial", "none"):
            raise ValueError("hyper_skip must be 'initial' or 'none'")

    def to_dict(self) -> dict:
        return asdict(self)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class _Branch:
    """Shared plumbing: input embedding, output head, parameter bookkeeping."""

    kind = ""

    def __init__(self, cfg: BranchConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, T = cfg.d, cfg.T
        p = self.kind
        self.embed = Parameter(glorot(rng, cfg.F, d, (d, cfg.F)), f"{p}.embed")
        self._init_layers(rng)
        self.head_w1 = Parameter(glorot(rng, T * d, d, (T * d, d)), f"{p}.head.w1")
        self.head_b1 = Parameter(np.zeros(d), f"{p}.head.b1")
        self.head_w2 = Parameter(glorot(rng, d, cfg.T_out, (d, cfg.T_out)), f"{p}.head.w2")
        self.head_b2 = Parameter(np.zeros(cfg.T_out), f"{p}.head.b2")

    def _init_layers(self, rng):
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def embed_inputs(self, x) -> Tensor:
        """Map a ``(B, T, N, F)`` (or ``(T, N, F)``) window to ``(B, T*N, d)`` hidden rows."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = nx.reshape(x, (1,) + x.shape)
        B, T, N, F = x.shape
        if T != self.cfg.T or F != self.cfg.F:
            raise nx.ContractError(f"window shape {x.shape} does not match T={self.cfg.T}, F={self.cfg.F}")
        flat = nx.reshape(x, (B, T * N, F))
        return nx.matmul(flat, nx.transpose(self.embed))

    def head(self, hidden: Tensor, n_vertices: int) -> Tensor:
        """Gather each vertex's T hidden rows and map them through the two-layer MLP."""
        B = hidden.shape[0]
        T, d = self.cfg.T, self.cfg.d
        h = nx.reshape(hidden, (B, T, n_vertices, d))
        h = nx.transpose(h, (0, 2, 1, 3))
        h = nx.reshape(h, (B, n_vertices, T * d))
        h = nx.relu(nx.add(nx.matmul(h, self.head_w1), self.head_b1))
        return nx.add(nx.matmul(h, self.head_w2), self.head_b2)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data[...] = state[p.name]


class GraphBranch(_Branch):
    """Stacked convolutions over the normalized spatio-temporal adjacency."""

    kind = "graph"

    def _init_layers(self, rng):
        d = self.cfg.d
        self.layers = [
            Parameter(glorot(rng, d, d, (d, d)), f"graph.layer{l}.w") for l in range(self.cfg.L)
        ]

    def parameters(self) -> list[Parameter]:
        return [self.embed, *self.layers, self.head_w1, self.head_b1, self.head_w2, self.head_b2]

    def propagate(self, hidden: Tensor, st: STGraph) -> Tensor:
        if hidden.shape[-2] != st.n_nodes:
            raise nx.ContractError(f"hidden has {hidden.shape[-2]} rows, graph has {st.n_nodes} nodes")
        a_hat = Tensor(st.normalized)
        for w in self.layers:
            out = nx.relu(nx.matmul(nx.matmul(a_hat, hidden), w))
            hidden = nx.add(hidden, out) if self.cfg.residual else out
        return hidden

    def forward(self, x, st: STGraph) -> Tensor:
        """Return a ``(B, N, T_out)`` forecast in normalized units."""
        return self.head(self.propagate(self.embed_inputs(x), st), st.n_vertices)


class HypergraphBranch(_Branch):
    """Stacked layers over a learned soft incidence between nodes and ``m`` hyperedges."""

    kind = "hypergraph"

    def _init_layers(self, rng):
        d, m = self.cfg.d, self.cfg.m
        self.incidence_weights = [
            Parameter(glorot(rng, d, m, (d, m)), f"hypergraph.layer{l}.w_h") for l in range(self.cfg.L)
        ]
        self.edge_weights = [
            Parameter(glorot(rng, m, m, (m, m)), f"hypergraph.layer{l}.w_e") for l in range(self.cfg.L)
        ]

    def parameters(self) -> list[Parameter]:
        inner = [p for pair in zip(self.incidence_weights, self.edge_weights) for p in pair]
        return [self.embed, *inner, self.head_w1, self.head_b1, self.head_w2, self.head_b2]

    def propagate(self, hidden: Tensor, incidences: list | None = None) -> Tensor:
        # Without a skip, node-specific signal shrinks through the rank-m incidence every
        # layer and the branch degenerates to window-level averages.
        x0 = hidden
        for w_h, w_e in zip(self.incidence_weights, self.edge_weights):
            out, inc = hypergraph_layer(hidden, w_h, w_e, self.cfg.hyperedge_norm)
            if incidences is not None:
                incidences.append(inc)
            if self.cfg.residual:
                out = nx.add(hidden, out)
            hidden = nx.add(out, x0) if self.cfg.hyper_skip == "initial" else out
        return hidden

    def forward(self, x, st: STGraph, incidences: list | None = None) -> Tensor:
        return self.head(self.propagate(self.embed_inputs(x), incidences), st.n_vertices)


def hypergraph_layer(hidden: Tensor, w_h, w_e, norm: str = "sum") -> tuple[Tensor, Tensor]:
    """One hypergraph layer; returns the new hidden rows and the incidence used.

    ``I = softmax(X W_h)`` row-wise, ``E = I^T X``, output ``I (E + relu(W_e E))``.
    With ``norm="mean"`` each row of ``E`` is divided by that hyperedge's
    column sum of ``I``, so ``E`` holds weighted means instead of sums and the
    activation scale no longer grows by roughly ``TN / m`` per layer.
    """
    inc = nx.row_softmax(nx.matmul(hidden, w_h))
    edges = nx.matmul(nx.transpose(inc), hidden)
    if norm == "mean":
        degree = nx.sum(inc, axis=-2)  # (..., m)
        edges = nx.mul(edges, nx.reshape(nx.reciprocal(degree), degree.shape + (1,)))
    mixed = nx.relu(nx.matmul(w_e, edges))
    return nx.matmul(inc, nx.add(edges, mixed)), inc


@dataclass
class Predictor:
    """Both branches built from one config and seed; each owns its embedding and head."""

    cfg: BranchConfig
    graph: GraphBranch
    hypergraph: HypergraphBranch

    @classmethod
    def init(cls, cfg: BranchConfig, seed: int = 42) -> "Predictor":
        rng = np.random.default_rng(seed)
        return cls(cfg, GraphBranch(cfg, rng), HypergraphBranch(cfg, rng))

    def branch(self, name: str) -> _Branch:
        if name not in ("graph", "hypergraph"):
            raise KeyError(name)
        return getattr(self, name)

    def parameters(self) -> list[Parameter]:
        return self.graph.parameters() + self.hypergraph.parameters()

    def state(self) -> dict[str, np.ndarray]:
        return {**self.graph.state(), **self.hypergraph.state()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.graph.load_state(state)
        self.hypergraph.load_state(state)

    def forecast(self, x, st: STGraph) -> dict[str, np.ndarray]:
        """Untaped forward of both branches, normalized units, shape ``(B, N, T_out)``."""
        with nx.no_grad():
            return {
                "graph": self.graph.forward(x, st).data,
                "hypergraph": self.hypergraph.forward(x, st).data,
            }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, predictor: Predictor, extra: dict | None = None) -> None:
    from .io import write_arrays

    write_arrays(path, predictor.state())
    meta = {"branch": predictor.cfg.to_dict(), **(extra or {})}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, default=str)


def load_checkpoint(path) -> Predictor:
    from .io import read_arrays

    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    predictor = Predictor.init(BranchConfig(**meta["branch"]))
    predictor.load_state(read_arrays(path))
    return predictor


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 300
    patience: int = 30
    huber_delta: float = 1.0
    seed: int = 42

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingLog:
    branch: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf


def _val_mae(branch, st, windows, flow_std: float, batch_size: int) -> float:
    """Mean absolute error in flow units (normalized error times std)."""
    total, count = 0.0, 0
    with nx.no_grad():
        for lo in range(0, len(windows.inputs), batch_size):
            x = windows.inputs[lo : lo + batch_size]
            y = windows.targets_norm[lo : lo + batch_size]
            pred = branch.forward(x, st).data
            total += np.abs(pred - y).sum()
            count += pred.size
    return float(total / max(count, 1) * flow_std)


def train_branch(branch, st: STGraph, train, val, cfg: PretrainConfig, flow_std: float) -> TrainingLog:
    """Minimize Huber(forecast, truth) with Adam; keeps the weights with best validation MAE.

    ``train``/``val`` expose ``inputs`` ``(W, T, N, F)`` and ``targets_norm``
    ``(W, N, T_out)`` in normalized units.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(branch.parameters(), lr=cfg.lr)
    tlog = TrainingLog(branch.kind)
    best = branch.state()
    tlog.best_val_mae = _val_mae(branch, st, val, flow_std, cfg.batch_size)
    tlog.epochs.append({"epoch": 0, "train_loss": None, "val_mae": tlog.best_val_mae})
    stale = 0
    n = len(train.inputs)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            try:
                loss = nx.huber(branch.forward(train.inputs[idx], st), Tensor(train.targets_norm[idx]), cfg.huber_delta)
            except nx.NonFiniteError as exc:
                nx.current_tape().clear()
                raise TrainingDivergedError(f"{branch.kind} branch diverged at epoch {epoch}: {exc}") from exc
            nx.backward(loss)
            opt.step()
            losses.append(loss.item())
        val_mae = _val_mae(branch, st, val, flow_std, cfg.batch_size)
        tlog.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mae": val_mae})
        log.debug("%s epoch %d loss %.5f val_mae %.4f", branch.kind, epoch, np.mean(losses), val_mae)
        if val_mae < tlog.best_val_mae:
            tlog.best_val_mae, tlog.best_epoch = val_mae, epoch
            best = branch.state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    branch.load_state(best)
    return tlog


def pretrain(predictor: Predictor, st: STGraph, train, val, cfg: PretrainConfig, flow_std: float,
             branches=("graph", "hypergraph")) -> dict[str, TrainingLog]:
    """Train each requested branch independently; returns the per-branch training logs."""
    return {
        name: train_branch(predictor.branch(name), st, train, val, cfg, flow_std) for name in branches
    }
