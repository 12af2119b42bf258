"""Command-line driver: ``bnnp gen | train | eval | klgap``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CholeskyError, ConfigError, DatasetFormatError, InputValidationError, TrainingAborted

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

METRICS = ("lppd", "mae", "elbo")

log = logging.getLogger("bnnp")


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _set_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from . import _kernels

    if _kernels.numba_available():
        import numba

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from . import datagen

    spec = datagen.GeneratorSpec.from_dict(_read_json(args.config))
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    tasks = datagen.generate_many(spec, args.count, args.seed)
    tasks = [datagen.random_split(t, spec.context_range, [args.seed, j, 1]) for j, t in enumerate(tasks)]
    if args.dry_run:
        print(f"spec ok: {spec.kind.value}, {args.count} tasks")
        return EXIT_OK
    datagen.save_tasks(tasks, args.out, readable=args.readable)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return EXIT_OK


def _train_configs(path, seed: Optional[int]):
    from . import trainer as T

    raw = _read_json(path)
    _check_keys(raw, {"network", "train"}, str(path))
    if "network" not in raw:
        raise ConfigError(f"{path}: missing 'network' section")
    cfg = T.network_config_from_dict(raw["network"])
    train = dict(raw.get("train", {}))
    if seed is not None:
        train["seed"] = seed
    return cfg, T.train_config_from_dict(train)


def cmd_train(args) -> int:
    from . import datagen
    from . import trainer as T

    cfg, tcfg = _train_configs(args.config, args.seed)
    data = Path(args.data)
    if not data.exists():
        raise UsageError(f"data file {data} does not exist")
    tasks = datagen.load_tasks(data)
    if args.dry_run:
        print(f"config ok: widths={list(cfg.widths)}, steps={tcfg.steps}, tasks={len(tasks)}")
        return EXIT_OK
    out = Path(args.out)
    trace_path = out.with_name(out.stem + ".trace.csv")
    state = None
    mode = "w"
    if args.resume and out.exists():
        cfg_ck, tcfg_ck, state = T.load_checkpoint(out)
        if T.config_hash(cfg_ck, tcfg_ck) != T.config_hash(cfg, tcfg):
            raise ConfigError("checkpoint was written with a different configuration")
        mode = "a"
        print(f"resuming from step {state.step}")
    columns = ["step", "lr", "loss", "log_posterior_predictive", "expected_log_lik_context", "kl_sum", "expected_log_lik_target", "num_samples"]
    if mode == "a" and trace_path.exists():
        _truncate_trace(trace_path, state.step)
    with trace_path.open(mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        if mode == "w" or fh.tell() == 0:
            writer.writeheader()

        def on_step(_, row):
            writer.writerow({k: row[k] for k in columns})

        state, _ = T.train(cfg, tcfg, tasks, state, callback=on_step, checkpoint_path=out)
    T.save_checkpoint(out, cfg, tcfg, state)
    print(f"trained {state.step} steps ({state.nonfinite_total} skipped); checkpoint {out}")
    return EXIT_OK


def _truncate_trace(path: Path, step: int) -> None:
    """Drop trace rows at or beyond ``step`` so a resumed run does not duplicate them."""
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def cmd_eval(args) -> int:
    import jax

    from . import datagen
    from . import evaluation as E
    from . import model as M
    from . import objectives as O
    from . import trainer as T

    metrics = [m for m in (args.metrics or "").split(",") if m]
    if not metrics:
        raise UsageError("--metrics must name at least one metric")
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    data = Path(args.data)
    if not data.exists():
        raise UsageError(f"data file {data} does not exist")
    cfg, _, state = T.load_checkpoint(ckpt)
    tasks = datagen.load_tasks(data)
    params = state.params
    seed = 0 if args.seed is None else args.seed
    sigma = np.exp(np.asarray(params["log_sigma_y"]))
    per_task = {m: [] for m in metrics}
    for j, task in enumerate(tasks):
        xc, yc, xt, yt = task.arrays()
        key = jax.random.fold_in(jax.random.PRNGKey(seed), j)
        _, weights = M.infer(cfg, params, xc, yc, key, args.num_samples)
        pred = np.asarray(M.predict(cfg, weights, xt))
        if "lppd" in metrics:
            per_task["lppd"].append(E.lppd(pred, yt, sigma))
        if "mae" in metrics:
            per_task["mae"].append(E.mae(pred.mean(axis=0), yt) if len(yt) else float("nan"))
        if "elbo" in metrics:
            per_task["elbo"].append(float(O.elbo(cfg, params, xc, yc, key, args.num_samples).value))
    report = {"checkpoint": str(ckpt), "data": str(data), "seed": seed, "metrics": [E.summarise(m, per_task[m]) for m in metrics]}
    Path(args.out).write_text(json.dumps(report, indent=2))
    print(f"wrote metrics for {len(tasks)} tasks to {args.out}")
    return EXIT_OK


def cmd_klgap(args) -> int:
    from . import experiments as X

    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    cfg = X.KLGapConfig.from_dict(raw)
    if args.dry_run:
        n = len(cfg.methods) * len(cfg.sigma_grid) * len(cfg.seeds)
        print(f"config ok: {n} fits")
        return EXIT_OK
    rows = X.run_kl_gap(cfg)
    out = Path(args.out)
    if out.suffix == ".csv":
        with out.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(X.KLGAP_COLUMNS))
            w.writeheader()
            w.writerows(rows)
    else:
        out.write_text(json.dumps({"columns": list(X.KLGAP_COLUMNS), "rows": rows}, indent=2))
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnnp", description="Bayesian neural network processes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, data=False, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--dry-run", action="store_true")
        sp.add_argument("--out", required=out_required)
        if data:
            sp.add_argument("--data", required=True)

    g = sub.add_parser("gen", help="generate a synthetic meta-dataset")
    g.add_argument("--config", required=True, help="generator spec (JSON)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--readable", action="store_true", help="store plain number arrays")
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="meta-train a BNNP")
    t.add_argument("--config", required=True, help='JSON with "network" and "train" sections')
    t.add_argument("--resume", action="store_true")
    common(t, data=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a meta-dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metrics", default="lppd,mae")
    e.add_argument("--num-samples", type=int, default=100)
    common(e, data=True)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("klgap", help="LML-vs-ELBO sweep over likelihood noise levels")
    k.add_argument("--config", default=None)
    common(k)
    k.set_defaults(func=cmd_klgap)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        if args.seed is None and args.command == "gen":
            args.seed = 0
        return args.func(args)
    except (UsageError, ConfigError, DatasetFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CholeskyError, TrainingAborted, InputValidationError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
