"""Local update rules run by clients between synchronisations.

theta is the descent player, tau the ascent player.  All rules are
simultaneous: both players step from gradients taken at the same point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClientShard
from .nn import ParamVector
from .objective import client_grads, minibatch_indices, tilde_sq_residuals

GDA = "gda"
SGDA = "sgda"
OADAM = "oadam"
OPTIMIZERS = (GDA, SGDA, OADAM)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = GDA
    lr_theta: float = 5e-4
    lr_tau: float = 5e-4
    batch_size: int | None = None
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if not (self.lr_theta > 0 and self.lr_tau > 0):
            raise ValueError("learning rates must be positive")
        if self.kind == SGDA and (self.batch_size is None or self.batch_size < 1):
            raise ValueError("sgda needs batch_size >= 1")

    @classmethod
    def gamma_scaled(cls, eta: float, gamma: float, **kw) -> "OptimizerConfig":
        """Rates (eta / gamma, eta): the theta player moves gamma times slower."""
        if gamma < 1:
            raise ValueError("gamma must be >= 1")
        return cls(lr_theta=eta / gamma, lr_tau=eta, **kw)


@dataclass
class OAdamState:
    m_theta: np.ndarray
    v_theta: np.ndarray
    m_tau: np.ndarray
    v_tau: np.ndarray
    prev_step_theta: np.ndarray
    prev_step_tau: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_theta: int, n_tau: int) -> "OAdamState":
        z = np.zeros
        return cls(z(n_theta), z(n_theta), z(n_tau), z(n_tau), z(n_theta), z(n_tau), 0)

    def copy(self) -> "OAdamState":
        return OAdamState(
            self.m_theta.copy(), self.v_theta.copy(), self.m_tau.copy(), self.v_tau.copy(),
            self.prev_step_theta.copy(), self.prev_step_tau.copy(), self.t,
        )


def _check(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite value in optimizer update")


def gda_step(theta: np.ndarray, tau: np.ndarray, grad_theta: np.ndarray, grad_tau: np.ndarray,
             cfg: OptimizerConfig) -> tuple[np.ndarray, np.ndarray]:
    new_theta = theta - cfg.lr_theta * grad_theta
    new_tau = tau + cfg.lr_tau * grad_tau
    _check(new_theta, new_tau)
    return new_theta, new_tau


def sgda_step(theta: np.ndarray, tau: np.ndarray, shard: ClientShard, tilde, cfg: OptimizerConfig,
              rng: np.random.Generator, *, theta_spec=None, tau_spec=None,
              tilde_sq: np.ndarray | None = None):
    """GDA on one minibatch; the anchor residuals come from the same rows."""
    if cfg.kind != SGDA:
        raise ValueError("sgda_step needs an sgda optimizer config")
    theta_p = theta if isinstance(theta, ParamVector) else ParamVector(theta, theta_spec)
    tau_p = tau if isinstance(tau, ParamVector) else ParamVector(tau, tau_spec)
    idx = minibatch_indices(shard.n, cfg.batch_size, rng)
    batch = shard.take(idx)
    rt2 = tilde_sq_residuals(tilde, batch) if tilde_sq is None else tilde_sq[idx]
    gt, gu = client_grads(theta_p, tau_p, tilde, batch, tilde_sq=rt2)
    new_theta, new_tau = gda_step(theta_p.values, tau_p.values, gt, gu, cfg)
    return new_theta, new_tau, rng


def _adam_direction(m, v, g, t, cfg: OptimizerConfig):
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    return m, v, m_hat / (np.sqrt(v_hat) + cfg.eps)


def oadam_step(theta: np.ndarray, tau: np.ndarray, grad_theta: np.ndarray, grad_tau: np.ndarray,
               state: OAdamState, cfg: OptimizerConfig) -> tuple[np.ndarray, np.ndarray, OAdamState]:
    """Optimistic Adam: w <- w - lr * (2 s_t - s_{t-1}), s_t the Adam direction.

    The ascent player is handled by descending on the negated gradient.
    """
    t = state.t + 1
    m_th, v_th, s_th = _adam_direction(state.m_theta, state.v_theta, grad_theta, t, cfg)
    m_ta, v_ta, s_ta = _adam_direction(state.m_tau, state.v_tau, -grad_tau, t, cfg)
    _check(m_th, v_th, m_ta, v_ta, s_th, s_ta)
    new_theta = theta - cfg.lr_theta * (2.0 * s_th - state.prev_step_theta)
    new_tau = tau - cfg.lr_tau * (2.0 * s_ta - state.prev_step_tau)
    _check(new_theta, new_tau)
    return new_theta, new_tau, OAdamState(m_th, v_th, m_ta, v_ta, s_th, s_ta, t)
