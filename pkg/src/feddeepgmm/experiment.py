"""Run configuration, multi-seed experiment driver and report files.

A run is configured by a TOML file with the sections below; every key has a
default except ``scenario.response``::

    [scenario]  response, n_train, n_val, n_test, noise_second_param
    [data]      n_clients, alpha
    [fed]       local_steps, rounds, tilde_schedule, tilde_every, persist_opt_state, workers
    [optimizer] kind, lr_tau, gamma, batch_size, beta1, beta2, eps
    [model]     g_widths, f_widths, activation, slope, init, init_scale
    [eval]      every, selection
    [run]       seed, n_seeds, output_dir

Seeds ``seed, seed + 1, ...`` are run one after another.  Each writes
``trace_<run>.csv`` and its best-validation checkpoint; ``summary.json``
aggregates the traces and echoes the resolved configuration.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .data import NOISE_READINGS, RESPONSES, ScenarioSpec, dirichlet_partition, generate, standardize_y
from .federation import Checkpoint, DivergenceError, EvalSets, FedConfig, run_federation
from .metrics import TRACE_COLUMNS, MetricsRecord
from .nn import IDENTITY, LEAKY_RELU, TANH, MlpSpec, init_params
from .objective import TILDE_SCHEDULES
from .optim import OPTIMIZERS, SGDA, OptimizerConfig

log = logging.getLogger(__name__)

BEST_VAL = "best_val"
LAST = "last"
SELECTIONS = (BEST_VAL, LAST)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_PARTIAL = 3

# Learning-rate grid behind --grid: lr_tau values crossed with gamma = lr_tau / lr_theta.
GRID_LR_TAU = (1e-4, 2.5e-4, 5e-4, 1e-3, 5e-3)
GRID_GAMMA = (1.0, 2.0, 5.0)

_REQUIRED = object()

# (section, key) -> (default, accepted python types)
SCHEMA: dict[str, dict[str, tuple[Any, tuple[type, ...]]]] = {
    "scenario": {
        "response": (_REQUIRED, (str,)),
        "n_train": (20000, (int,)),
        "n_val": (20000, (int,)),
        "n_test": (20000, (int,)),
        "noise_second_param": ("variance", (str,)),
    },
    "data": {
        "n_clients": (5, (int,)),
        "alpha": (0.3, (float, int)),
    },
    "fed": {
        "local_steps": (5, (int,)),
        "rounds": (600, (int,)),
        "tilde_schedule": ("prev_round", (str,)),
        "tilde_every": (1, (int,)),
        "persist_opt_state": (False, (bool,)),
        "workers": (1, (int,)),
    },
    "optimizer": {
        "kind": ("gda", (str,)),
        "lr_tau": (5e-3, (float, int)),
        "gamma": (2.0, (float, int)),
        "batch_size": (None, (int,)),
        "beta1": (0.5, (float, int)),
        "beta2": (0.9, (float, int)),
        "eps": (1e-8, (float, int)),
    },
    "model": {
        "g_widths": ([1, 20, 3, 1], (list,)),
        "f_widths": ([2, 20, 1], (list,)),
        "activation": (LEAKY_RELU, (str,)),
        "slope": (0.1, (float, int)),
        "init": ("kaiming_zero_last", (str,)),
        "init_scale": (0.1, (float, int)),
    },
    "eval": {
        "every": (1, (int,)),
        "selection": (BEST_VAL, (str,)),
    },
    "run": {
        "seed": (0, (int,)),
        "n_seeds": (5, (int,)),
        "output_dir": ("runs", (str,)),
    },
}

_CHOICES = {
    ("scenario", "response"): RESPONSES,
    ("scenario", "noise_second_param"): NOISE_READINGS,
    ("fed", "tilde_schedule"): TILDE_SCHEDULES,
    ("optimizer", "kind"): OPTIMIZERS,
    ("model", "activation"): (LEAKY_RELU, TANH, IDENTITY),
    ("model", "init"): ("kaiming", "kaiming_zero_last", "fan_in", "uniform"),
    ("eval", "selection"): SELECTIONS,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration; ``values`` mirrors the TOML layout."""
    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def scenario(self) -> ScenarioSpec:
        s = self.values["scenario"]
        return ScenarioSpec(s["response"], s["n_train"], s["n_val"], s["n_test"], self.values["run"]["seed"],
                            s["noise_second_param"])

    def optimizer(self) -> OptimizerConfig:
        o = self.values["optimizer"]
        return OptimizerConfig.gamma_scaled(o["lr_tau"], o["gamma"], kind=o["kind"], batch_size=o["batch_size"],
                                            beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])

    def fed(self, seed: int) -> FedConfig:
        f = self.values["fed"]
        return FedConfig(
            n_clients=self.values["data"]["n_clients"], local_steps=f["local_steps"], rounds=f["rounds"],
            optimizer=self.optimizer(), tilde_schedule=f["tilde_schedule"], tilde_every=f["tilde_every"],
            seed=seed, eval_every=self.values["eval"]["every"], persist_opt_state=f["persist_opt_state"],
            workers=f["workers"],
        )

    def g_spec(self) -> MlpSpec:
        m = self.values["model"]
        return MlpSpec(tuple(m["g_widths"]), m["activation"], m["slope"])

    def f_spec(self) -> MlpSpec:
        m = self.values["model"]
        return MlpSpec(tuple(m["f_widths"]), m["activation"], m["slope"])

    @property
    def seeds(self) -> list[int]:
        r = self.values["run"]
        return list(range(r["seed"], r["seed"] + r["n_seeds"]))

    @property
    def output_dir(self) -> Path:
        return Path(self.values["run"]["output_dir"])

    def to_toml(self) -> str:
        return tomli_w.dumps(_drop_none(self.values))

    def to_json(self) -> dict:
        return copy.deepcopy(self.values)

    def with_overrides(self, **dotted) -> "RunConfig":
        """Copy with ``section.key`` overrides applied and re-validated."""
        raw = copy.deepcopy(self.values)
        for path, value in dotted.items():
            section, key = path.split(".")
            raw[section][key] = value
        return resolve_config(raw)


def _drop_none(d: dict) -> dict:
    return {s: {k: v for k, v in sec.items() if v is not None} for s, sec in d.items()}


def _check_type(path: str, value, types: tuple[type, ...]):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def resolve_config(raw: dict) -> RunConfig:
    """Validate a parsed TOML mapping and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"{section}: expected a table")
        for key in raw[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
    out: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        out[section] = {}
        for key, (default, types) in keys.items():
            path = f"{section}.{key}"
            if key in given and given[key] is not None:
                value = _check_type(path, given[key], types)
            elif default is _REQUIRED:
                raise ConfigError(f"{path}: required key is missing")
            else:
                value = copy.deepcopy(default)
            choices = _CHOICES.get((section, key))
            if choices is not None and value not in choices:
                raise ConfigError(f"{path}: {value!r} is not one of {list(choices)}")
            out[section][key] = value
    _check_ranges(out)
    return RunConfig(out)


def _check_ranges(v: dict) -> None:
    def need(cond: bool, path: str, msg: str):
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    for key in ("n_train", "n_val", "n_test"):
        need(v["scenario"][key] >= 1, f"scenario.{key}", "must be >= 1")
    need(v["data"]["n_clients"] >= 1, "data.n_clients", "must be >= 1")
    need(v["data"]["alpha"] > 0, "data.alpha", "must be > 0")
    for key in ("local_steps", "rounds", "tilde_every", "workers"):
        need(v["fed"][key] >= 1, f"fed.{key}", "must be >= 1")
    o = v["optimizer"]
    need(o["lr_tau"] > 0, "optimizer.lr_tau", "must be > 0")
    need(o["gamma"] >= 1, "optimizer.gamma", "must be >= 1")
    if o["kind"] == SGDA:
        need(o["batch_size"] is not None, "optimizer.batch_size", "required when optimizer.kind is sgda")
    if o["batch_size"] is not None:
        need(o["batch_size"] >= 1, "optimizer.batch_size", "must be >= 1")
    need(0 <= o["beta1"] < 1, "optimizer.beta1", "must lie in [0, 1)")
    need(0 <= o["beta2"] < 1, "optimizer.beta2", "must lie in [0, 1)")
    m = v["model"]
    for key, n_in in (("g_widths", 1), ("f_widths", 2)):
        w = m[key]
        need(len(w) >= 2 and all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in w),
             f"model.{key}", "must be a list of >= 2 positive integers")
        need(w[0] == n_in and w[-1] == 1, f"model.{key}", f"must start at {n_in} and end at 1")
    need(m["init_scale"] > 0, "model.init_scale", "must be > 0")
    need(v["eval"]["every"] >= 1, "eval.every", "must be >= 1")
    need(v["run"]["n_seeds"] >= 1, "run.n_seeds", "must be >= 1")


def parse_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(raw)


def metadata(cfg: RunConfig) -> dict:
    """Resolved config plus the policy choices a reader needs to interpret the numbers."""
    return {
        "config": cfg.to_json(),
        "design": {
            "noise_second_param": cfg["scenario"]["noise_second_param"],
            "tilde_schedule": cfg["fed"]["tilde_schedule"],
            "tilde_every": cfg["fed"]["tilde_every"],
            "optimizer_state_policy": "persist" if cfg["fed"]["persist_opt_state"] else "reset_each_round",
            "lr_theta": cfg["optimizer"]["lr_tau"] / cfg["optimizer"]["gamma"],
            "selection": cfg["eval"]["selection"],
            "partition": "dirichlet per-sample assignment, redraw on empty client",
            "y_standardization": "train mean/std; MSE in original units against g0(x)",
            "init": cfg["model"]["init"],
            "init_scale": cfg["model"]["init_scale"] if cfg["model"]["init"] == "uniform" else None,
            "std_ddof": 0,
        },
    }


def run_id_for(cfg: RunConfig, seed: int) -> str:
    return f"{cfg['scenario']['response']}_{cfg['optimizer']['kind']}_s{seed}"


def trace_text(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for rec in records:
        w.writerow(rec.as_row())
    return buf.getvalue()


def read_trace(path: Path | str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != TRACE_COLUMNS:
        raise ValueError(f"{path}: unexpected trace columns {list(rows[0].keys())}")
    out = []
    for r in rows:
        d = {"run_id": r["run_id"], "seed": int(r["seed"]), "round": int(r["round"])}
        for k in TRACE_COLUMNS[3:]:
            d[k] = float(r[k])
        out.append(d)
    return out


def select_row(rows: list[dict], selection: str = BEST_VAL) -> dict:
    """Earliest row with the smallest validation MSE, or the last row."""
    if not rows:
        raise ValueError("empty trace")
    if selection == LAST:
        return rows[-1]
    best = None
    for r in rows:
        if np.isfinite(r["val_mse"]) and (best is None or r["val_mse"] < best["val_mse"]):
            best = r
    if best is None:
        raise ValueError("trace has no finite validation MSE")
    return best


def aggregate(per_seed: list[dict]) -> dict:
    ok = [s for s in per_seed if s["status"] == "ok"]
    vals = np.array([s["test_mse"] for s in ok], dtype=np.float64)
    return {
        "n_seeds": len(per_seed),
        "n_ok": len(ok),
        "partial": len(ok) < len(per_seed),
        "test_mse_mean": float(vals.mean()) if vals.size else None,
        "test_mse_std": float(vals.std()) if vals.size else None,
        "seeds": per_seed,
    }


def _seed_entry(run_id: str, seed: int, rows: list[dict], selection: str) -> dict:
    row = select_row(rows, selection)
    return {"run_id": run_id, "seed": seed, "status": "ok", "selected_round": row["round"],
            "val_mse": row["val_mse"], "test_mse": row["test_mse"]}


def prepare_data(cfg: RunConfig, seed: int):
    spec = cfg.with_overrides(**{"run.seed": seed}).scenario
    train, val, test = standardize_y(*generate(spec))
    shards = dirichlet_partition(train, cfg["data"]["n_clients"], cfg["data"]["alpha"], seed)
    return spec, (train, val, test), shards


def run_single(cfg: RunConfig, seed: int):
    """One seed end to end; returns (run_id, final FedState)."""
    spec, (train, val, test), shards = prepare_data(cfg, seed)
    m = cfg["model"]
    theta0 = init_params(cfg.g_spec(), seed=2 * seed, scheme=m["init"], scale=m["init_scale"])
    tau0 = init_params(cfg.f_spec(), seed=2 * seed + 1, scheme=m["init"], scale=m["init_scale"])
    run_id = run_id_for(cfg, seed)
    state = run_federation(cfg.fed(seed), shards, theta0, tau0, EvalSets(train, val, test, spec.response), run_id)
    return run_id, state


def checkpoint_payload(cfg: RunConfig, seed: int, ck: Checkpoint, tilde) -> dict:
    return {
        "round": ck.round,
        "val_mse": ck.val_mse,
        "seed": seed,
        "theta": ck.theta.to_dict(),
        "tau": ck.tau.to_dict(),
        "theta_tilde": tilde.to_dict(),
        "config": cfg.to_json(),
    }


def run_experiment(cfg: RunConfig, out_dir: Path | str | None = None) -> tuple[dict, int]:
    """Run every seed, write traces, checkpoints and ``summary.json``.

    Returns the summary dict and the process exit code.
    """
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    selection = cfg["eval"]["selection"]
    per_seed = []
    diverged = 0
    for seed in cfg.seeds:
        run_id = run_id_for(cfg, seed)
        try:
            run_id, state = run_single(cfg, seed)
        except DivergenceError as exc:
            log.error("seed %d diverged: %s", seed, exc)
            per_seed.append({"run_id": run_id, "seed": seed, "status": "diverged", "error": str(exc)})
            diverged += 1
            continue
        except Exception as exc:  # one bad seed should not lose the others
            log.exception("seed %d failed", seed)
            per_seed.append({"run_id": run_id, "seed": seed, "status": "failed", "error": repr(exc)})
            continue
        text = trace_text(state.trajectory)
        (out / f"trace_{run_id}.csv").write_text(text)
        rows = read_trace(out / f"trace_{run_id}.csv")
        entry = _seed_entry(run_id, seed, rows, selection)
        if selection == BEST_VAL and state.best is not None:
            ck = state.best
        else:
            ck = Checkpoint(state.round, state.theta_global, state.tau_global, state.trajectory[-1].val_mse)
        seed_dir = out / run_id
        seed_dir.mkdir(exist_ok=True)
        ck_path = seed_dir / f"checkpoint_{ck.round}.json"
        # With the previous-round schedule the anchor for evaluating this point is the point itself.
        ck_path.write_text(json.dumps(checkpoint_payload(cfg, seed, ck, ck.theta), indent=1) + "\n")
        entry["checkpoint"] = str(ck_path.relative_to(out))
        per_seed.append(entry)
        log.info("seed %d: selected round %d, test MSE %.5g", seed, entry["selected_round"], entry["test_mse"])
    summary = aggregate(per_seed)
    summary["metadata"] = metadata(cfg)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if summary["n_ok"] == len(per_seed):
        code = EXIT_OK
    elif summary["n_ok"] == 0 and diverged == len(per_seed):
        code = EXIT_DIVERGED
    else:
        code = EXIT_PARTIAL
    return summary, code


def summarize(out_dir: Path | str, selection: str | None = None) -> dict:
    """Recompute ``summary.json`` from the trace files in ``out_dir``."""
    out = Path(out_dir)
    old = {}
    summary_path = out / "summary.json"
    if summary_path.exists():
        old = json.loads(summary_path.read_text())
    if selection is None:
        selection = old.get("metadata", {}).get("config", {}).get("eval", {}).get("selection", BEST_VAL)
    failed = [s for s in old.get("seeds", []) if s.get("status") != "ok"]
    per_seed = []
    for path in sorted(out.glob("trace_*.csv")):
        rows = read_trace(path)
        if not rows:
            continue
        entry = _seed_entry(rows[0]["run_id"], rows[0]["seed"], rows, selection)
        prev = next((s for s in old.get("seeds", []) if s.get("run_id") == entry["run_id"]), None)
        if prev and "checkpoint" in prev:
            entry["checkpoint"] = prev["checkpoint"]
        per_seed.append(entry)
    per_seed = sorted(per_seed + failed, key=lambda s: s["seed"])
    summary = aggregate(per_seed)
    if "metadata" in old:
        summary["metadata"] = old["metadata"]
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_grid(cfg: RunConfig, out_dir: Path | str | None = None,
             lr_values=GRID_LR_TAU, gamma_values=GRID_GAMMA) -> tuple[dict, int]:
    """Run the learning-rate grid; picks the cell with the lowest mean selected val MSE."""
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    cells = []
    worst = EXIT_OK
    for lr in lr_values:
        for gamma in gamma_values:
            sub = cfg.with_overrides(**{"optimizer.lr_tau": float(lr), "optimizer.gamma": float(gamma)})
            name = f"lr{lr:g}_gamma{gamma:g}"
            summary, code = run_experiment(sub, out / name)
            worst = max(worst, code) if code != EXIT_OK else worst
            ok = [s for s in summary["seeds"] if s["status"] == "ok"]
            val = float(np.mean([s["val_mse"] for s in ok])) if ok else None
            cells.append({"dir": name, "lr_tau": lr, "gamma": gamma, "val_mse_mean": val,
                          "test_mse_mean": summary["test_mse_mean"], "test_mse_std": summary["test_mse_std"],
                          "n_ok": summary["n_ok"]})
    scored = [c for c in cells if c["val_mse_mean"] is not None]
    best = min(scored, key=lambda c: c["val_mse_mean"]) if scored else None
    report = {"cells": cells, "selected": best, "metadata": metadata(cfg)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report, (EXIT_OK if best is not None and worst == EXIT_OK else (worst or EXIT_PARTIAL))
