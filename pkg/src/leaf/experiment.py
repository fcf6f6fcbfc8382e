"""Metrics, JSON-configured experiment runs and the ablation suite."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, run_inference
from .choices import ALL_TRANSFORMS, parse_transforms
from .data import Dataset, ShiftSpec, SplitSpec, load_dataset, split_windows, synth_generate, prepare
from .io import read_arrays, write_arrays
from .numerics import Adam
from .predictor import BranchConfig, PretrainConfig, Predictor, load_checkpoint, pretrain, save_checkpoint
from .selector import LlmEndpointConfig, make_selector
from .stgraph import build_st_graph

log = logging.getLogger(__name__)

MAPE_MASK = 1.0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: float | None
    per_step_mae: list[float]
    n_windows: int
    config: dict = field(default_factory=dict)
    selector_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(pred, truth, mask_threshold: float = MAPE_MASK) -> MetricsReport:
    """MAE, RMSE and masked MAPE (percent) over ``(windows, N, T_out)`` arrays.

    MAPE skips entries whose truth is at or below ``mask_threshold`` and is
    ``None`` when every entry is masked.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    err = pred - truth
    keep = truth > mask_threshold
    mape = float(np.mean(np.abs(err[keep]) / truth[keep]) * 100) if keep.any() else None
    per_step = np.abs(err).reshape(-1, err.shape[-1]).mean(axis=0)
    return MetricsReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        mape=mape,
        per_step_mae=per_step.tolist(),
        n_windows=int(pred.shape[0]),
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


SELECTORS = ("llm", "oracle", "heuristic", "none")
BRANCHES = ("graph", "hypergraph")


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: {"synth": {"n_vertices": 20, "days": 14, "seed": 42,
                                                           "shift": {"scale": 1.10, "trend": 0.0}}})
    split: dict = field(default_factory=dict)
    branch: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)
    branches: list = field(default_factory=lambda: list(BRANCHES))
    transforms: list = field(default_factory=lambda: [t.name for t in ALL_TRANSFORMS])
    selector: str = "heuristic"
    endpoint: dict = field(default_factory=dict)
    events_text: str | None = None
    test_limit: int | None = None
    val_stride: int = 1
    seed: int = 42
    out: str = "runs/leaf"
    checkpoint: str | None = None

    # typed views, filled by validate()
    def validate(self) -> "ExperimentConfig":
        problems = []

        def build(name, cls, raw):
            try:
                return cls(**raw)
            except TypeError as exc:
                problems.append(f"{name}: {exc}")
            except ValueError as exc:
                problems.append(f"{name}: {exc}")
            return None

        self.split_cfg = build("split", SplitSpec, self.split)
        self.branch_cfg = build("branch", BranchConfig, self.branch)
        self.pretrain_cfg = build("pretrain", PretrainConfig, {"seed": self.seed, **self.pretrain})
        self.adapt_cfg = build("adapt", AdaptConfig, self.adapt)
        self.endpoint_cfg = build("endpoint", LlmEndpointConfig, self.endpoint)
        if self.selector not in SELECTORS:
            problems.append(f"selector: {self.selector!r} not in {SELECTORS}")
        if not self.branches or any(b not in BRANCHES for b in self.branches) or len(set(self.branches)) != len(self.branches):
            problems.append(f"branches: must be a nonempty subset of {BRANCHES}, got {self.branches}")
        try:
            self.transform_kinds = parse_transforms(self.transforms)
        except (KeyError, ValueError) as exc:
            problems.append(f"transforms: unknown transformation {exc}")
            self.transform_kinds = ()
        if self.selector != "none" and len(self.branches) == 1 and not self.transforms:
            problems.append("transforms: a single branch without transformations leaves one choice, nothing to rank")
        if not isinstance(self.data, dict) or not ({"synth"} <= self.data.keys() or {"flows", "adjacency"} <= self.data.keys()):
            problems.append("data: needs either 'synth' or both 'flows' and 'adjacency'")
        if self.test_limit is not None and self.test_limit < 1:
            problems.append("test_limit: must be >= 1")
        if self.val_stride < 1:
            problems.append("val_stride: must be >= 1")
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown key" for k in unknown])
        return cls(**copy.deepcopy(raw)).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def variant(self, **changes) -> "ExperimentConfig":
        """Copy with top-level keys replaced; nested dicts given as dicts are merged."""
        raw = self.to_dict()
        for key, value in changes.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> set[str]:
    """Dotted keys whose values differ between two configs."""
    fa, fb = flatten(a.to_dict()), flatten(b.to_dict())
    return {k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k)}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> Dataset:
    source = cfg.data
    if "synth" in source:
        s = dict(source["synth"])
        shift = ShiftSpec(**s.pop("shift", {}))
        return synth_generate(s.pop("n_vertices", 20), s.pop("days", 14), shift, s.pop("seed", cfg.seed),
                              cfg.split_cfg, **s)
    return load_dataset(source["flows"], source["adjacency"], source.get("meta"))


@dataclass
class RunSetup:
    dataset: Dataset
    splits: object
    st: object
    predictor: Predictor
    training: dict


def prepare_run(cfg: ExperimentConfig, predictor_state: dict | None = None) -> RunSetup:
    """Load data and produce pretrained weights (from a state, a checkpoint or a fresh run)."""
    dataset = load_data(cfg)
    bc = cfg.branch_cfg
    splits = split_windows(dataset, cfg.split_cfg, bc.T, bc.T_out, cfg.val_stride, cfg.test_limit)
    st = build_st_graph(dataset.network, bc.T, bc.self_loops)
    training = {}
    if predictor_state is not None:
        predictor = Predictor.init(bc, cfg.seed)
        predictor.load_state(predictor_state)
    elif cfg.checkpoint and Path(cfg.checkpoint).exists():
        predictor = load_checkpoint(cfg.checkpoint)
    else:
        predictor = Predictor.init(bc, cfg.seed)
        t0 = time.perf_counter()
        logs = pretrain(predictor, st, prepare(splits.train, splits.stats), prepare(splits.val, splits.stats),
                        cfg.pretrain_cfg, float(splits.stats.std[0]))
        training = {k: {"best_epoch": v.best_epoch, "best_val_mae": v.best_val_mae, "epochs": v.epochs}
                    for k, v in logs.items()}
        log.info("pretraining took %.1fs", time.perf_counter() - t0)
    return RunSetup(dataset, splits, st, predictor, training)


@dataclass
class RunOutput:
    report: MetricsReport
    predictions: np.ndarray  # (W, N, T_out)
    truth: np.ndarray
    first_pass: dict
    audit: list
    paths: dict = field(default_factory=dict)


def evaluate_test_range(cfg: ExperimentConfig, prep: RunSetup, selector=None) -> RunOutput:
    splits, predictor = prep.splits, prep.predictor
    ac, bc = cfg.adapt_cfg, cfg.branch_cfg
    pristine = predictor.state()

    def new_optimizer():
        # weights carry over between windows but Adam moments do not: stale momentum from
        # earlier windows' supervision otherwise compounds into a systematic drift
        return Adam([p for b in cfg.branches for p in predictor.branch(b).parameters()], lr=ac.lr)

    if selector is None and cfg.selector != "none":
        selector = make_selector(cfg.selector, cfg.endpoint_cfg, delta=ac.delta,
                                 **({"log_path": Path(cfg.out) / "llm_log.ndjson"} if cfg.selector == "llm" else {}))

    preds, audit = [], []
    first = {b: [] for b in cfg.branches}
    n_sel = n_fallback = attempts = 0
    test = splits.test
    for w in range(len(test)):
        if w and not ac.persist_across_windows:
            predictor.load_state(pristine)
        start = int(test.starts[w])
        times = prep.dataset.timestamps[start : start + bc.T]
        res = run_inference(test.inputs[w], times, prep.st, predictor, selector, ac, splits.stats,
                            prep.dataset.network, new_optimizer(), cfg.transform_kinds, tuple(cfg.branches),
                            truth=test.targets[w].T, events_text=cfg.events_text, window_index=w)
        preds.append(res.forecast)
        for b in cfg.branches:
            first[b].append(res.first_pass[b])
        audit.extend(res.audit)
        for sels in res.selections:
            n_sel += len(sels)
            n_fallback += sum(s.fallback_used for s in sels)
            attempts += sum(s.attempts for s in sels)
    predictor.load_state(pristine)

    predictions = np.stack(preds)
    truth = np.transpose(test.targets, (0, 2, 1))
    report = metrics(predictions, truth)
    report.config = cfg.to_dict()
    report.selector_stats = {
        "kind": cfg.selector,
        "selections": n_sel,
        "fallback_rate": n_fallback / n_sel if n_sel else 0.0,
        "mean_attempts": attempts / n_sel if n_sel else 0.0,
    }
    return RunOutput(report, predictions, truth, {b: np.stack(v) for b, v in first.items()}, audit)


def write_artifacts(out: RunOutput, directory, training: dict | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": directory / "report.json",
        "per_step": directory / "per_step_mae.csv",
        "predictions": directory / "predictions.bin",
        "audit": directory / "audit.ndjson",
    }
    report = out.report.to_dict()
    if training:
        report["training"] = {k: {kk: vv for kk, vv in v.items() if kk != "epochs"} for k, v in training.items()}
    with open(paths["report"], "w") as fh:
        json.dump(report, fh, indent=2)
    first_steps = {b: np.abs(v - out.truth).reshape(-1, v.shape[-1]).mean(axis=0) for b, v in out.first_pass.items()}
    with open(paths["per_step"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "leaf", *(f"{b}_first_pass" for b in first_steps)])
        for k, v in enumerate(out.report.per_step_mae):
            w.writerow([k + 1, repr(v), *(repr(float(s[k])) for s in first_steps.values())])
    write_arrays(paths["predictions"], {"predictions": out.predictions, "truth": out.truth,
                                        **{f"first_pass.{b}": v for b, v in out.first_pass.items()}})
    with open(paths["audit"], "w") as fh:
        for rec in out.audit:
            fh.write(json.dumps(rec) + "\n")
    if training:
        with open(directory / "training_log.json", "w") as fh:
            json.dump(training, fh, indent=1)
    out.paths = paths
    return paths


def run_experiment(cfg: ExperimentConfig | str | Path, predictor_state: dict | None = None,
                   selector=None, write: bool = True) -> RunOutput:
    """Pretrain (or reuse weights), run the test-time loop and write the artifacts to ``cfg.out``."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.load(cfg)
    prep = prepare_run(cfg, predictor_state)
    if write and prep.training:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(cfg.out) / "checkpoint.bin", prep.predictor,
                        {"pretrain": cfg.pretrain_cfg.to_dict(), "seed": cfg.seed})
    out = evaluate_test_range(cfg, prep, selector)
    if write:
        write_artifacts(out, cfg.out, prep.training)
    return out


def eval_predictions(path) -> MetricsReport:
    arrays = read_arrays(path)
    return metrics(arrays["predictions"], arrays["truth"])


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_FIELDS = {
    "E1": ("graph branch alone, no selector", {"branches", "selector"}),
    "E2": ("hypergraph branch alone, no selector", {"branches", "selector"}),
    "E3": ("without the hypergraph branch", {"branches"}),
    "E4": ("without the graph branch", {"branches"}),
    "E5": ("without transformations", {"transforms"}),
    "E6": ("without the ranking loss (K=1)", {"adapt.K"}),
    "LEAF": ("full method", set()),
}


def ablation_arms(cfg: ExperimentConfig) -> dict[str, ExperimentConfig]:
    out = Path(cfg.out)
    arms = {
        "E1": {"branches": ["graph"], "selector": "none"},
        "E2": {"branches": ["hypergraph"], "selector": "none"},
        "E3": {"branches": ["graph"]},
        "E4": {"branches": ["hypergraph"]},
        "E5": {"transforms": []},
        "E6": {"adapt": {"K": 1}},
        "LEAF": {},
    }
    return {name: cfg.variant(**change, out=str(out / name)) for name, change in arms.items()}


def ablate(cfg: ExperimentConfig, predictor_state: dict | None = None, write: bool = True) -> dict:
    """Run E1-E6 and the full method from one shared set of pretrained weights."""
    base = prepare_run(cfg, predictor_state)
    state = base.predictor.state()
    if write and base.training:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(cfg.out) / "checkpoint.bin", base.predictor, {"seed": cfg.seed})
    arms = ablation_arms(cfg)
    rows = {}
    for name, arm_cfg in arms.items():
        base.predictor.load_state(state)
        out = evaluate_test_range(arm_cfg, RunSetup(base.dataset, base.splits, base.st, base.predictor, base.training))
        if write:
            write_artifacts(out, arm_cfg.out)
        desc, expected = ABLATION_FIELDS[name]
        changed = sorted(k for k in config_diff(arm_cfg, arms["LEAF"]) if k != "out")
        rows[name] = {
            "description": desc,
            "changed_fields": changed,
            "mae": out.report.mae,
            "rmse": out.report.rmse,
            "mape": out.report.mape,
            "fallback_rate": out.report.selector_stats["fallback_rate"],
        }
    if write:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        with open(Path(cfg.out) / "ablation_report.json", "w") as fh:
            json.dump({"arms": rows, "base_config": cfg.to_dict(), "training": {
                k: {kk: vv for kk, vv in v.items() if kk != "epochs"} for k, v in base.training.items()}}, fh, indent=2)
    return rows
