"""Command-line entry point: ``unroll {train,bound,experiment,verify,datagen}``.

Exit codes: 0 ok, 1 verification violations, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bounds
from .data import (
    RESULT_COLUMNS, SyntheticSpec, gen_synthetic, write_container, write_results_csv,
)
from .experiments import (
    SUMMARY_COLUMNS, ConfigError, ExperimentConfig, VerifyConfig, apply_full_scale,
    config_from_dict, experiment_tasks, run_trial, run_verify, setup_trial, summarize,
    train_config, trial_seed,
)
from .model import Params
from .numkit import SeededRng, frobenius_norm
from .train import train

log = logging.getLogger("unroll")

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULT_DATAGEN = {"N": 64, "n": 32, "s": 4, "m_train": 2000, "m_test": 5000}


def _global_flags(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="JSON config file")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out", type=Path, default=d if suppress else Path("out"),
                        help="output directory")
    parser.add_argument("--paper-scale", action="store_true",
                        default=d if suppress else False,
                        help="m_train=10000, m_test=50000, N=120")
    parser.add_argument("--threads", type=int, default=d if suppress else 1,
                        help="worker processes for experiment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unroll", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, hlp in (("train", "train one grid point"),
                      ("bound", "evaluate the generalization bound"),
                      ("experiment", "run the full grid x repeats"),
                      ("verify", "gradient, output-bound, perturbation and psi audits"),
                      ("datagen", "write a synthetic dataset container")):
        p = sub.add_parser(name, help=hlp)
        _global_flags(p, suppress=True)
        if name == "bound":
            p.add_argument("--params", type=Path, help="parameter snapshot from train")
    return parser


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_experiment_config(args) -> ExperimentConfig:
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = config_from_dict(ExperimentConfig, raw)
    if args.paper_scale:
        cfg = apply_full_scale(cfg)
    return cfg


def _write_json(path: Path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_experiment_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "config.json", cfg.to_dict())
    point = cfg.points()[0]
    seed = trial_seed(cfg.seed, point, 0)
    st = setup_trial(cfg, point, seed)
    params, hist = train(st.arch, st.spec, st.train.Y, st.train.X, st.test.Y, st.test.X,
                         train_config(cfg, SeededRng(seed).spawn(1).seed))
    snap = {f"W{j}": w.tolist() for j, w in enumerate(params.W)}
    snap.update(tau=params.tau.tolist(), lam=params.lam.tolist())
    _write_json(args.out / "params.json", snap)
    write_results_csv(args.out / "history.csv", hist.rows(),
                      ["epoch", "train_mse", "test_mse", "train_l2", "test_l2"])
    print(f"lr={cfg.lr} epochs={cfg.epochs} seed={cfg.seed}")
    print(f"train_mse={hist.train_mse[-1]:.6g} test_mse={hist.test_mse[-1]:.6g} "
          f"train_l2={hist.train_l2[-1]:.6g} test_l2={hist.test_l2[-1]:.6g}")
    return EXIT_OK


def _load_snapshot(path: Path, J: int) -> Params:
    with open(path) as f:
        d = json.load(f)
    return Params([d[f"W{j}"] for j in range(J)], d["tau"], d["lam"])


def cmd_bound(args) -> int:
    cfg = load_experiment_config(args)
    point = cfg.points()[0]
    st = setup_trial(cfg, point, trial_seed(cfg.seed, point, 0))
    params = None
    if getattr(args, "params", None) is not None:
        params = _load_snapshot(args.params, st.arch.J)
        params.check(st.arch)
    y_fro = cfg.y_fro if cfg.y_fro is not None else frobenius_norm(st.train.Y)
    m = cfg.m_bound if cfg.m_bound is not None else st.train.m
    rep = bounds.bound_report(st.arch, st.spec, y_fro, m, 0.0, params)
    out = rep.to_dict()
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "bound.json", out)
    print(json.dumps(out, indent=2, sort_keys=True))
    if rep.corollary_note:
        print(f"closed form refused: {rep.corollary_note}", file=sys.stderr)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_experiment_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "config.json", cfg.to_dict())
    tasks = experiment_tasks(cfg)
    rows = []
    try:
        if args.threads > 1:
            with ProcessPoolExecutor(max_workers=args.threads) as pool:
                # map preserves task order regardless of completion order
                for row in pool.map(run_trial, tasks):
                    rows.append(row)
        else:
            for task in tasks:
                rows.append(run_trial(task))
    finally:
        write_results_csv(args.out / "results.csv", rows, RESULT_COLUMNS)
        write_results_csv(args.out / "summary.csv", summarize(rows), SUMMARY_COLUMNS)
    print(f"wrote {len(rows)} rows to {args.out / 'results.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    vc = config_from_dict(VerifyConfig, raw)
    results = run_verify(vc)
    report = {"seed": vc.seed, "suites": [r.to_dict() for r in results]}
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "verify.json", report)
    total = 0
    print(f"seed={vc.seed}")
    print(f"{'suite':<20}{'cases':>8}{'violations':>12}{'worst':>14}{'seconds':>10}")
    for r in results:
        total += len(r.violations)
        print(f"{r.name:<20}{r.cases:>8}{len(r.violations):>12}{r.worst:>14.6g}{r.seconds:>10.2f}")
    if total:
        print("violations:")
        for r in results:
            for v in r.violations[:20]:
                print(f"  {r.name}: {v}")
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_datagen(args) -> int:
    raw = _read_config(args.config) or dict(DEFAULT_DATAGEN)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.paper_scale:
        raw.update(m_train=10000, m_test=50000, N=120)
    spec = config_from_dict(SyntheticSpec, raw)
    ds = gen_synthetic(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    write_container(args.out / "dataset.bin", ds)
    _write_json(args.out / "dataset.json", dataclasses.asdict(spec))
    print(f"wrote A{ds.A.shape} X{ds.X.shape} Y{ds.Y.shape} seed={spec.seed}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "bound": cmd_bound, "experiment": cmd_experiment,
            "verify": cmd_verify, "datagen": cmd_datagen}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - surface every runtime failure as exit 3
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
