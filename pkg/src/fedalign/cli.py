"""Command line entry point: ``fedalign run | sweep | kappa-check | prepare-mnist``.

Exit codes: 0 success, 1 a check failed, 2 bad configuration, 3 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .kappa_check import run_kappa_check
from .sim import metrics_csv, run_experiment

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("fedalign")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _csv_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedalign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, default=Path("runs/latest"))
    run.add_argument("--seed", type=_u64)
    run.add_argument("--defense")
    run.add_argument("--attack")

    sweep = sub.add_parser("sweep", help="grid of (attack, defense, beta, r) cells into one CSV")
    sweep.add_argument("--config", required=True, type=Path, help="base experiment config")
    sweep.add_argument("--out", type=Path, default=Path("runs/sweep"))
    sweep.add_argument("--attacks", type=_csv_list)
    sweep.add_argument("--defenses", type=_csv_list)
    sweep.add_argument("--betas", type=_csv_list, help="Dirichlet betas; 'iid' for no skew")
    sweep.add_argument("--poison-ratios", type=_csv_list)
    sweep.add_argument("--seed", type=_u64)

    kc = sub.add_parser("kappa-check", help="randomized check of the robustness bound")
    kc.add_argument("--trials", type=int, default=200)
    kc.add_argument("--seed", type=_u64, default=0)
    kc.add_argument("--epsilon", type=float, default=0.1)
    kc.add_argument("--radius", type=float, default=1.5)
    kc.add_argument("--out", type=Path, help="write the per-trial report as JSON")

    prep = sub.add_parser("prepare-mnist", help="write the mlxtend 5k MNIST sample as IDX files")
    prep.add_argument("--out", type=Path, default=Path("data/mnist5k"))
    return parser


def cmd_run(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, defense=args.defense,
                                                  **{"attack.kind": args.attack})
    record = run_experiment(cfg, args.out)
    summary = {k: None if math.isnan(v) else v for k, v in record.summary.items()}
    print(json.dumps({"out": str(args.out), **summary}))
    return EXIT_OK


def _beta(text: str):
    return None if text.lower() == "iid" else float(text)


def sweep_cells(base: ExperimentConfig, attacks=None, defenses=None, betas=None, ratios=None):
    """Configs for the cartesian product of the given axes (unset axes keep the base value)."""
    attacks = attacks or [base.attack.kind]
    defenses = defenses or [base.defense]
    betas = [_beta(b) for b in betas] if betas else [base.beta]
    ratios = [float(r) for r in ratios] if ratios else [base.attack.poison_ratio]
    for attack, defense, beta, r in itertools.product(attacks, defenses, betas, ratios):
        data = base.model_dump()
        data["attack"]["kind"] = attack
        data["attack"]["poison_ratio"] = r
        data.update(defense=defense, beta=beta)
        yield {"attack": attack, "defense": defense, "beta": "iid" if beta is None else beta,
               "r": r}, parse_config(data)


def cmd_sweep(args) -> int:
    base = load_config(args.config).with_overrides(seed=args.seed)
    try:
        cells = list(sweep_cells(base, args.attacks, args.defenses, args.betas, args.poison_ratios))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    chunks = []
    for i, (cell, cfg) in enumerate(cells):
        record = run_experiment(cfg, args.out / f"cell_{i:03d}")
        text = metrics_csv(record.csv_rows(), extra_columns=cell)
        chunks.append(text if i == 0 else text.split("\n", 1)[1])
        log.info("cell %d/%d %s -> %s", i + 1, len(cells), cell, record.summary)
    (args.out / "sweep.csv").write_text("".join(chunks), encoding="utf-8")
    print(json.dumps({"out": str(args.out / "sweep.csv"), "cells": len(cells)}))
    return EXIT_OK


def cmd_kappa_check(args) -> int:
    report = run_kappa_check(args.trials, args.seed, args.epsilon, args.radius)
    summary = report.summary()
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(report.as_dict(), indent=2), encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK if report.passed() else EXIT_CHECK_FAILED


def cmd_prepare_mnist(args) -> int:
    from .data import write_mnist_subset

    try:
        write_mnist_subset(args.out)
    except ImportError as exc:
        raise ConfigError("prepare-mnist needs mlxtend: pip install --no-deps mlxtend") from exc
    print(json.dumps({"out": str(args.out)}))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "kappa-check": cmd_kappa_check,
            "prepare-mnist": cmd_prepare_mnist}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
