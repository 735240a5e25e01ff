"""Synthetic low-dimensional IV scenarios, outcome scaling and client splits.

Samples follow

    Y = g0(X) + e + delta,   X = Z1 + Z2 + e + gamma,
    (Z1, Z2) ~ Uniform([-3, 3]^2),  e ~ N(0, 1),  gamma, delta ~ N(0, 0.1)

where the shared ``e`` makes X endogenous.  Whether the second argument of
``N(0, 0.1)`` is a variance or a standard deviation is a config switch.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

RESPONSES = ("absolute", "step", "linear")
NOISE_READINGS = ("variance", "std")
MAX_PARTITION_RETRIES = 100
CSV_HEADER = ("x", "y", "z1", "z2")


def true_response(response: str, x):
    """Ground-truth structural function g0."""
    x = np.asarray(x, dtype=np.float64)
    if response == "absolute":
        out = np.abs(x)
    elif response == "step":
        out = (x >= 0.0).astype(np.float64)
    elif response == "linear":
        out = x.copy()
    else:
        raise ValueError(f"unknown response {response!r}; expected one of {RESPONSES}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScenarioSpec:
    response: str
    n_train: int = 20000
    n_val: int = 20000
    n_test: int = 20000
    seed: int = 0
    noise_second_param: str = "variance"

    def __post_init__(self):
        if self.response not in RESPONSES:
            raise ValueError(f"unknown response {self.response!r}; expected one of {RESPONSES}")
        for name in ("n_train", "n_val", "n_test"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_second_param not in NOISE_READINGS:
            raise ValueError(f"noise_second_param must be one of {NOISE_READINGS}")


@dataclass(frozen=True)
class IvDataset:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        z = np.asarray(self.z, dtype=np.float64).reshape(-1, 2)
        if not (x.shape[0] == y.shape[0] == z.shape[0]):
            raise ValueError(f"row counts differ: x {x.shape[0]}, y {y.shape[0]}, z {z.shape[0]}")
        if z.size and np.max(np.abs(z)) > 3.0:
            raise ValueError("instrument values must lie in [-3, 3]")
        for a in (x, y, z):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    def __len__(self):
        return self.x.shape[0]

    def y_original(self) -> np.ndarray:
        return self.y * self.y_std + self.y_mean


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    indices: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim == 1:
            z = z.reshape(x.shape[0], -1) if x.shape[0] else z.reshape(0, 1)
        if not (x.shape[0] == y.shape[0] == z.shape[0]):
            raise ValueError(f"row counts differ: x {x.shape[0]}, y {y.shape[0]}, z {z.shape[0]}")
        for a in (x, y, z):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "ClientShard":
        sub = None if self.indices is None else self.indices[idx]
        return ClientShard(self.client_id, self.x[idx], self.y[idx], self.z[idx], sub)

    @classmethod
    def from_dataset(cls, ds: IvDataset, client_id: int = 0) -> "ClientShard":
        return cls(client_id, ds.x, ds.y, ds.z, np.arange(len(ds)))


def _noise_std(second_param: float, reading: str) -> float:
    return float(np.sqrt(second_param)) if reading == "variance" else float(second_param)


def _draw(response: str, n: int, rng: np.random.Generator, reading: str) -> IvDataset:
    z = rng.uniform(-3.0, 3.0, size=(n, 2))
    e = rng.normal(0.0, _noise_std(1.0, reading), size=n)
    gamma = rng.normal(0.0, _noise_std(0.1, reading), size=n)
    delta = rng.normal(0.0, _noise_std(0.1, reading), size=n)
    x = z[:, 0] + z[:, 1] + e + gamma
    y = true_response(response, x) + e + delta
    return IvDataset(x, y, z)


def generate(spec: ScenarioSpec) -> tuple[IvDataset, IvDataset, IvDataset]:
    """Train, validation and test splits, each from its own child RNG stream."""
    streams = np.random.SeedSequence(spec.seed).spawn(3)
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    return tuple(
        _draw(spec.response, int(n), np.random.default_rng(ss), spec.noise_second_param)
        for n, ss in zip(sizes, streams)
    )


def standardize_y(train: IvDataset, val: IvDataset, test: IvDataset):
    """Scale outcomes to zero mean, unit variance using training statistics only."""
    if len(train) == 0:
        raise ValueError("training split is empty")
    mean = float(np.mean(train.y))
    std = float(np.std(train.y))
    if std < 1e-12:
        raise ValueError(f"degenerate outcome: training y has std {std:.3g}")
    return tuple(replace(ds, y=(ds.y - mean) / std, y_mean=mean, y_std=std) for ds in (train, val, test))


def unstandardize(ds: IvDataset) -> IvDataset:
    return replace(ds, y=ds.y_original(), y_mean=0.0, y_std=1.0)


def dirichlet_partition(ds: IvDataset, n_clients: int, alpha: float, seed: int) -> list[ClientShard]:
    """Split samples across clients with Dirichlet(alpha) proportions.

    Each sample goes to client i independently with probability p_i.  A draw
    that leaves some client empty is redrawn from the next derived seed.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n = len(ds)
    if n < n_clients:
        raise ValueError(f"cannot give {n_clients} clients a sample each from {n} samples")
    for attempt in range(MAX_PARTITION_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        p = rng.dirichlet(np.full(n_clients, float(alpha)))
        owner = rng.choice(n_clients, size=n, p=p)
        counts = np.bincount(owner, minlength=n_clients)
        if np.all(counts > 0):
            shards = []
            for i in range(n_clients):
                idx = np.flatnonzero(owner == i)
                shards.append(ClientShard(i, ds.x[idx], ds.y[idx], ds.z[idx], idx))
            return shards
    raise RuntimeError(f"no partition without empty clients after {MAX_PARTITION_RETRIES} draws (alpha={alpha})")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(path: Path, x, y, z) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in zip(x, y, z[:, 0], z[:, 1]):
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        rows = np.array([[float(v) for v in row] for row in r], dtype=np.float64).reshape(-1, 4)
    return rows[:, 0], rows[:, 1], rows[:, 2:4]


def save_datasets(
    prefix: Path | str,
    splits: Sequence[IvDataset],
    spec: ScenarioSpec,
    shards: Sequence[ClientShard] = (),
    extra: dict | None = None,
) -> list[Path]:
    """Write ``<prefix>.{train,val,test}.csv``, ``<prefix>.meta.json`` and train shards."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    names = ("train", "val", "test")
    for name, ds in zip(names, splits):
        p = prefix.with_name(f"{prefix.name}.{name}.csv")
        write_csv(p, ds.x, ds.y, ds.z)
        written.append(p)
    for sh in shards:
        p = prefix.with_name(f"{prefix.name}.client{sh.client_id}.csv")
        write_csv(p, sh.x, sh.y, sh.z)
        written.append(p)
    meta = {
        "spec": {
            "response": spec.response,
            "n_train": spec.n_train,
            "n_val": spec.n_val,
            "n_test": spec.n_test,
            "seed": spec.seed,
            "noise_second_param": spec.noise_second_param,
        },
        "y_mean": splits[0].y_mean,
        "y_std": splits[0].y_std,
        "n_clients": len(shards),
        "client_sizes": [int(sh.n) for sh in shards],
    }
    meta.update(extra or {})
    p = prefix.with_name(f"{prefix.name}.meta.json")
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def load_datasets(prefix: Path | str) -> tuple[tuple[IvDataset, IvDataset, IvDataset], list[ClientShard], dict]:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_name(f"{prefix.name}.meta.json").read_text())
    splits = []
    for name in ("train", "val", "test"):
        x, y, z = read_csv(prefix.with_name(f"{prefix.name}.{name}.csv"))
        splits.append(IvDataset(x, y, z, meta["y_mean"], meta["y_std"]))
    shards = []
    for k in range(meta.get("n_clients", 0)):
        x, y, z = read_csv(prefix.with_name(f"{prefix.name}.client{k}.csv"))
        shards.append(ClientShard(k, x, y, z))
    return tuple(splits), shards, meta
