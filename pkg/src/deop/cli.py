"""Command-line entry point: ``deop <subcommand> ...``.

Failures print one JSON object ``{"error": kind, "message": text}`` to stderr
and exit with a nonzero status (2 for bad input, 3 for aborted training,
1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "build_parser"]

log = logging.getLogger("deop")

EXIT_INPUT, EXIT_TRAINING, EXIT_OTHER = 2, 3, 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, status: int = EXIT_INPUT):
        super().__init__(message)
        self.kind, self.status = kind, status


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing_file", f"{what} not found: {p}")
    return p


def _load_data(args):
    from .data import read_dataset, split_indices
    ds, man = read_dataset(_require(args.data, "dataset"))
    if args.task != ds.task:
        raise CliError("task_mismatch", f"--task {args.task} but dataset holds {ds.task}")
    idx = split_indices(len(ds), man.split, man.split_seed)
    return ds, idx


def _config(ds, args):
    from .config import run_config
    src = _require(args.config, "config") if getattr(args, "config", None) else None
    return run_config(ds.config, src, task=args.task)


def cmd_gen_data(args):
    from .config import load_config
    from .data import generate_dataset, write_dataset
    src = _require(args.config, "config") if args.config else None
    cfg = load_config(src, task=args.task, seed=args.seed, n_instances=args.n)
    ds = generate_dataset(args.task, args.n, args.seed, cfg)
    man = write_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "n_instances": man.n_instances,
                      "dropped": args.n - man.n_instances}))


def cmd_train_surrogate(args):
    from .data import make_task
    from .pipeline import build_surrogate
    from .surrogate import save_surrogate
    ds, idx = _load_data(args)
    cfg = _config(ds, args)
    task = make_task(cfg)
    model, hist, _ = build_surrogate(task, ds, idx[0], cfg)
    save_surrogate(model, args.out)
    print(json.dumps({"out": str(args.out), "final": hist[-1] if hist else None}))


def cmd_train(args):
    from .data import make_task
    from .pipeline import save_model, train_model
    from .surrogate import load_surrogate
    from .trainer import write_history_csv
    ds, idx = _load_data(args)
    cfg = _config(ds, args)
    task = make_task(cfg)
    surrogate = None
    if args.method == "deop":
        if not args.surrogate:
            raise CliError("missing_argument", "--surrogate is required for --method deop")
        surrogate = load_surrogate(_require(args.surrogate, "surrogate"))
    model = train_model(args.method, task, ds.subset(idx[0]), cfg, surrogate)
    save_model(model, args.out)
    if model.history:
        write_history_csv(model.history, str(args.out) + ".history.csv")
    last = model.history[-1] if model.history else {}
    print(json.dumps({"out": str(args.out), "method": args.method,
                      "final_loss": last.get("loss")}))


def cmd_eval(args):
    from .data import make_task
    from .pipeline import evaluate, load_model
    ds, idx = _load_data(args)
    task = make_task(ds.config)
    models = []
    for path in args.model:
        m = load_model(_require(path, "model"))
        if m.task != args.task:
            raise CliError("task_mismatch", f"model {path} was trained for {m.task}")
        models.append(m)
    test = ds.subset(idx[2]) if len(idx[2]) else ds
    rep = evaluate(models, task, test, repeats=args.repeats, warmup=args.warmup)
    rep.meta["data"] = str(args.data)
    rep.save(args.out)
    print(json.dumps({"out": str(args.out), "methods": sorted(rep.methods)}))


def cmd_report(args):
    from .report import EvalReport, render
    rep = EvalReport.load(_require(args.input, "report"))
    sys.stdout.write(render(rep, args.format))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deop", description="Dynamics-aware optimization proxies")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    tasks = ("portfolio", "power")

    p = sub.add_parser("gen-data", help="generate instances and reference solutions")
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-surrogate", help="pre-train the dynamics surrogate")
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("train", help="train a proxy")
    p.add_argument("--method", choices=("deop", "ld", "mse"), required=True)
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained models on the test split")
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render an evaluation report")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_report)
    return ap


def _fail(kind: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return status


def main(argv=None) -> int:
    from .config import ConfigError
    from .data import DatasetError
    from .nn import TrainingAborted

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.status)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_INPUT)
    except DatasetError as exc:
        return _fail("dataset", str(exc), EXIT_INPUT)
    except TrainingAborted as exc:
        return _fail("training_aborted", str(exc), EXIT_TRAINING)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_OTHER)
    return 0


if __name__ == "__main__":
    sys.exit(main())
