"""Client and federated DeepGMM game objectives.

For client i with samples (x_k, y_k, z_k), k = 1..n_i,

    psi     = mean_k f(z_k; tau) * (y_k - g(x_k; theta))
    c_quad  = mean_k f(z_k; tau)^2 * (y_k - g(x_k; theta_tilde))^2
    U_i     = psi - c_quad / 4

and the federated objective is the unweighted mean of U_i over clients.
``theta_tilde`` only weights the moments and is held constant when
differentiating.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClientShard
from .nn import ParamVector, _chunks, backward_from_cache, forward_batch, forward_cache

PREV_ROUND = "prev_round"
FROZEN = "frozen"
EVERY_K = "every_k"
TILDE_SCHEDULES = (PREV_ROUND, FROZEN, EVERY_K)


@dataclass(frozen=True)
class TildeAnchor:
    theta_tilde: ParamVector
    schedule: str = PREV_ROUND
    every: int = 1

    def __post_init__(self):
        if self.schedule not in TILDE_SCHEDULES:
            raise ValueError(f"unknown tilde schedule {self.schedule!r}")
        if self.schedule == EVERY_K and self.every < 1:
            raise ValueError("every_k schedule needs every >= 1")

    def advance(self, theta_broadcast: ParamVector, round_index: int) -> "TildeAnchor":
        """Anchor used during round ``round_index`` (1-based) given the broadcast theta."""
        if self.schedule == PREV_ROUND:
            return TildeAnchor(theta_broadcast, self.schedule, self.every)
        if self.schedule == EVERY_K and (round_index - 1) % self.every == 0:
            return TildeAnchor(theta_broadcast, self.schedule, self.every)
        return self


@dataclass(frozen=True)
class MomentEval:
    psi: float
    c_quad: float
    u_value: float
    n_i: int


def _tilde_params(tilde) -> ParamVector:
    return tilde.theta_tilde if isinstance(tilde, TildeAnchor) else tilde


def _check_shard(shard: ClientShard) -> None:
    if shard.n == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")


def _finite(out: np.ndarray, what: str, shard: ClientShard) -> np.ndarray:
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise FloatingPointError(f"non-finite {what} output at sample {int(bad[0])} of client {shard.client_id}")
    return out


def residuals(theta: ParamVector, shard: ClientShard) -> np.ndarray:
    _check_shard(shard)
    return shard.y - _finite(forward_batch(theta, shard.x), "g-network", shard)


def tilde_sq_residuals(tilde, shard: ClientShard) -> np.ndarray:
    """Squared residuals at the anchor; constant for as long as the anchor is."""
    return residuals(_tilde_params(tilde), shard) ** 2


def client_objective(theta: ParamVector, tau: ParamVector, tilde, shard: ClientShard,
                     tilde_sq: np.ndarray | None = None) -> MomentEval:
    _check_shard(shard)
    f = _finite(forward_batch(tau, shard.z), "f-network", shard)
    r = residuals(theta, shard)
    rt2 = tilde_sq_residuals(tilde, shard) if tilde_sq is None else tilde_sq
    psi = float(np.mean(f * r))
    c_quad = float(np.mean(f * f * rt2))
    return MomentEval(psi, c_quad, psi - 0.25 * c_quad, shard.n)


def client_grads(theta: ParamVector, tau: ParamVector, tilde, shard: ClientShard,
                 tilde_sq: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact (grad_theta, grad_tau) of the client objective."""
    _check_shard(shard)
    n = shard.n
    rt2 = tilde_sq_residuals(tilde, shard) if tilde_sq is None else tilde_sq
    g_theta = np.zeros(theta.spec.n_params)
    g_tau = np.zeros(tau.spec.n_params)
    for sl in _chunks(n):
        f, f_cache = forward_cache(tau, shard.z[sl])
        g, g_cache = forward_cache(theta, shard.x[sl])
        _finite(f, "f-network", shard)
        r = shard.y[sl] - _finite(g, "g-network", shard)
        g_theta += backward_from_cache(g_cache, -f / n)
        g_tau += backward_from_cache(f_cache, (r - 0.5 * f * rt2[sl]) / n)
    return g_theta, g_tau


def federated_objective(theta: ParamVector, tau: ParamVector, tilde, shards: Sequence[ClientShard]) -> float:
    if not shards:
        raise ValueError("federated objective needs at least one client")
    total = 0.0
    for shard in shards:
        total += client_objective(theta, tau, tilde, shard).u_value
    return total / len(shards)


def federated_grads(theta: ParamVector, tau: ParamVector, tilde,
                    shards: Sequence[ClientShard]) -> tuple[np.ndarray, np.ndarray]:
    if not shards:
        raise ValueError("federated gradient needs at least one client")
    gt = np.zeros(theta.spec.n_params)
    gu = np.zeros(tau.spec.n_params)
    for shard in shards:
        a, b = client_grads(theta, tau, tilde, shard)
        gt += a
        gu += b
    return gt / len(shards), gu / len(shards)


def minibatch_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return rng.choice(n, size=min(batch_size, n), replace=False)


def minibatch_view(shard: ClientShard, batch_size: int, rng: np.random.Generator) -> ClientShard:
    """Uniform sample without replacement of min(batch_size, n_i) rows."""
    return shard.take(minibatch_indices(shard.n, batch_size, rng))
