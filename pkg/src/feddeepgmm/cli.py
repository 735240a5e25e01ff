"""Command line entry point: ``feddeepgmm {gen,run,diagnose,summarize}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import RESPONSES, load_datasets, save_datasets
from .diagnostics import DEFAULT_TOL, diagnostics_report, gmm_games, newton_stationary
from .experiment import (
    EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, ConfigError, RunConfig, parse_config, prepare_data, resolve_config,
    run_experiment, run_grid, summarize,
)
from .federation import DivergenceError
from .nn import ParamVector
from .objective import TildeAnchor
from .optim import OPTIMIZERS

log = logging.getLogger("feddeepgmm")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int, help="first seed (run.seed)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--scenario", choices=RESPONSES, help="structural response g0")
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--clients", type=int, help="number of clients N")
    p.add_argument("--alpha", type=float, help="Dirichlet concentration")
    p.add_argument("--rounds", type=int, help="communication rounds T")
    p.add_argument("--local-steps", type=int, help="local steps R")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="feddeepgmm", description="Federated DeepGMM experiments and diagnostics")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate and partition one scenario's datasets")
    _common(p)

    p = sub.add_parser("run", help="run an experiment over all configured seeds")
    _common(p)
    p.add_argument("--n-seeds", type=int, help="number of seeds (run.n_seeds)")
    p.add_argument("--batch-size", type=int, help="minibatch size for sgda")
    p.add_argument("--workers", type=int, help="threads for client execution")
    p.add_argument("--grid", action="store_true", help="sweep the learning-rate grid")

    p = sub.add_parser("diagnose", help="curvature diagnostics at a saved checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, help="dataset prefix written by `gen` (default: regenerate from checkpoint)")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--local-steps", type=int, help="R for the flow Jacobian (default: checkpoint config)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--refine", action="store_true", help="Newton-refine to a stationary point first")
    p.add_argument("--out", type=Path, help="write the JSON report here instead of stdout")

    p = sub.add_parser("summarize", help="re-aggregate summary.json from trace CSVs")
    p.add_argument("out", type=Path)
    return ap


def config_from_args(args) -> RunConfig:
    raw = {}
    if args.config is not None:
        raw = parse_config(args.config).to_json()
    overrides = {
        ("scenario", "response"): args.scenario,
        ("optimizer", "kind"): args.optimizer,
        ("data", "n_clients"): args.clients,
        ("data", "alpha"): args.alpha,
        ("fed", "rounds"): args.rounds,
        ("fed", "local_steps"): args.local_steps,
        ("run", "seed"): args.seed,
        ("run", "output_dir"): str(args.out) if args.out is not None else None,
        ("run", "n_seeds"): getattr(args, "n_seeds", None),
        ("optimizer", "batch_size"): getattr(args, "batch_size", None),
        ("fed", "workers"): getattr(args, "workers", None),
    }
    for (section, key), value in overrides.items():
        if value is not None:
            raw.setdefault(section, {})[key] = value
    return resolve_config(raw)


def cmd_gen(args) -> int:
    cfg = config_from_args(args)
    seed = cfg["run"]["seed"]
    spec, splits, shards = prepare_data(cfg, seed)
    prefix = cfg.output_dir / f"{spec.response}_s{seed}"
    extra = {"alpha": cfg["data"]["alpha"], "partition_seed": seed, "y_standardized": True}
    for p in save_datasets(prefix, splits, spec, shards, extra):
        print(p)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    if args.grid:
        report, code = run_grid(cfg)
        print(json.dumps(report["selected"], indent=2))
        return code
    summary, code = run_experiment(cfg)
    print(json.dumps({k: summary[k] for k in ("n_ok", "n_seeds", "test_mse_mean", "test_mse_std", "partial")},
                     indent=2))
    return code


def load_checkpoint(path: Path):
    ck = json.loads(Path(path).read_text())
    theta = ParamVector.from_dict(ck["theta"])
    tau = ParamVector.from_dict(ck["tau"])
    tilde = ParamVector.from_dict(ck.get("theta_tilde", ck["theta"]))
    return ck, theta, tau, tilde


def diagnose(checkpoint: Path, shards=None, gamma: float = 1.0, local_steps: int | None = None,
             tol: float = DEFAULT_TOL, refine: bool = False) -> dict:
    """Diagnostics JSON for a checkpoint; shards default to regenerating the run's partition."""
    ck, theta, tau, tilde = load_checkpoint(checkpoint)
    cfg = resolve_config(ck["config"]) if "config" in ck else None
    if shards is None:
        if cfg is None:
            raise ConfigError("checkpoint has no config; pass the client shards explicitly")
        _, _, shards = prepare_data(cfg, ck.get("seed", cfg["run"]["seed"]))
    if local_steps is None:
        local_steps = cfg["fed"]["local_steps"] if cfg is not None else 1
    games = gmm_games(theta.spec, tau.spec, TildeAnchor(tilde), shards)
    th, ta = theta.values, tau.values
    if refine:
        th, ta = newton_stationary(th, ta, games)
    report = diagnostics_report(th, ta, games, gamma, local_steps, tol)
    report["checkpoint"] = {"path": str(checkpoint), "round": ck.get("round"), "refined": refine}
    return report


def cmd_diagnose(args) -> int:
    shards = None
    if args.data is not None:
        _, shards, _ = load_datasets(args.data)
        if not shards:
            raise ConfigError(f"{args.data}: dataset has no client shards")
    report = diagnose(args.checkpoint, shards, args.gamma, args.local_steps, args.tol, args.refine)
    text = json.dumps(report, indent=2) + "\n"
    if args.out is not None:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_summarize(args) -> int:
    summary = summarize(args.out)
    print(json.dumps({k: summary[k] for k in ("n_ok", "n_seeds", "test_mse_mean", "test_mse_std", "partial")},
                     indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"gen": cmd_gen, "run": cmd_run, "diagnose": cmd_diagnose, "summarize": cmd_summarize}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
