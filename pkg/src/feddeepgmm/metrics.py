from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import IvDataset, true_response
from .nn import ParamVector, forward_batch

TRACE_COLUMNS = (
    "run_id", "seed", "round", "u_value", "grad_norm_theta", "grad_norm_tau", "train_mse", "val_mse", "test_mse",
)


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    seed: int
    round: int
    u_value: float
    grad_norm_theta: float
    grad_norm_tau: float
    train_mse: float = float("nan")
    val_mse: float = float("nan")
    test_mse: float = float("nan")

    def as_row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(format(v, ".17g") if isinstance(v, float) else str(v))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def predict_original(theta: ParamVector, ds: IvDataset) -> np.ndarray:
    """Network prediction mapped back to the unstandardised outcome scale."""
    return forward_batch(theta, ds.x) * ds.y_std + ds.y_mean


def evaluate_mse(theta: ParamVector, ds: IvDataset, response: str) -> float:
    """MSE of the fitted response against g0(x) (not the noisy outcome)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    err = predict_original(theta, ds) - true_response(response, ds.x)
    return float(np.mean(err * err))
