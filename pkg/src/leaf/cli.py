"""Command-line entry point: ``leaf {synth,pretrain,run,eval,prompt-dry-run,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adapt import prompt_contexts
from .choices import build_choice_sets
from .data import ShiftSpec, save_dataset, synth_generate
from .experiment import (
    SELECTORS,
    ConfigError,
    ExperimentConfig,
    ablate,
    eval_predictions,
    prepare_run,
    run_experiment,
)
from .predictor import save_checkpoint
from .selector import build_prompt


def _config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    for key in ("seed", "selector", "out", "checkpoint", "test_limit"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return ExperimentConfig.from_dict(raw)


def cmd_synth(args) -> int:
    ds = synth_generate(args.n_vertices, args.days, ShiftSpec(args.scale, args.trend), args.seed)
    paths = save_dataset(ds, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    prep = prepare_run(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    path = Path(cfg.out) / "checkpoint.bin"
    save_checkpoint(path, prep.predictor, {"pretrain": cfg.pretrain_cfg.to_dict(), "seed": cfg.seed})
    with open(Path(cfg.out) / "training_log.json", "w") as fh:
        json.dump(prep.training, fh, indent=1)
    print(json.dumps({k: v["best_val_mae"] for k, v in prep.training.items()}))
    print(path)
    return 0


def cmd_run(args) -> int:
    out = run_experiment(_config(args))
    print(json.dumps({k: getattr(out.report, k) for k in ("mae", "rmse", "mape", "n_windows")}))
    return 0


def cmd_eval(args) -> int:
    report = eval_predictions(args.predictions)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_prompt_dry_run(args) -> int:
    cfg = _config(args)
    prep = prepare_run(cfg)
    test, w = prep.splits.test, args.window
    start = int(test.starts[w])
    times = prep.dataset.timestamps[start : start + cfg.branch_cfg.T]
    x = prep.splits.stats.normalize(test.inputs[w])[None]
    fc = prep.predictor.forecast(x, prep.st)
    forecasts = {b: prep.splits.stats.denormalize_flow(fc[b][0]) for b in cfg.branches}
    sets = build_choice_sets(forecasts, cfg.transform_kinds)
    ctxs = prompt_contexts(test.inputs[w], times, prep.dataset.network, cfg.branch_cfg.T_out, cfg.events_text)
    vertices = range(len(sets)) if args.vertex is None else [args.vertex]
    text = "\n\n".join(f"===== vertex {i} =====\n" + build_prompt(ctxs[i], sets[i]) for i in vertices)
    if args.prompt_out:
        Path(args.prompt_out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_ablate(args) -> int:
    rows = ablate(_config(args))
    for name, row in rows.items():
        mape = "n/a" if row["mape"] is None else f"{row['mape']:.2f}"
        print(f"{name:5s} MAE {row['mae']:8.3f}  RMSE {row['rmse']:8.3f}  MAPE {mape:>6s}  {row['description']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leaf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic ring-road dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-vertices", type=int, default=20)
    s.add_argument("--days", type=int, default=14)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--trend", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_synth)

    def common(sp, selector=True):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--checkpoint")
        sp.add_argument("--test-limit", dest="test_limit", type=int)
        if selector:
            sp.add_argument("--selector", choices=SELECTORS)

    for name, func, helptext in (
        ("pretrain", cmd_pretrain, "pretrain both branches and save a checkpoint"),
        ("run", cmd_run, "run the test-time loop and write the report"),
        ("ablate", cmd_ablate, "run the E1-E6 ablation suite"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp, selector=name != "pretrain")
        sp.set_defaults(func=func)

    e = sub.add_parser("eval", help="metrics from a saved predictions.bin")
    e.add_argument("predictions")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("prompt-dry-run", help="print selector prompts without contacting an endpoint")
    common(d, selector=False)
    d.add_argument("--window", type=int, default=0)
    d.add_argument("--vertex", type=int)
    d.add_argument("--prompt-out")
    d.set_defaults(func=cmd_prompt_dry_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
