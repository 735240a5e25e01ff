"""In-process federated gradient descent ascent with full participation.

Every round the server broadcasts (theta_t, tau_t); each client runs R local
optimizer steps from there and reports its displacement; the server adds the
mean displacement to the global state.  Client randomness is keyed on
(seed, client_id, round) and reductions run in client-id order, so thread
scheduling never changes the result.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .data import ClientShard, IvDataset
from .metrics import MetricsRecord, evaluate_mse
from .nn import ParamVector
from .objective import PREV_ROUND, TildeAnchor, client_grads, federated_grads, federated_objective, tilde_sq_residuals
from .optim import GDA, OADAM, SGDA, OAdamState, OptimizerConfig, gda_step, oadam_step, sgda_step

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 5
    local_steps: int = 5
    rounds: int = 2000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    tilde_schedule: str = PREV_ROUND
    tilde_every: int = 1
    seed: int = 0
    eval_every: int = 1
    persist_opt_state: bool = False
    workers: int = 1

    def __post_init__(self):
        for name in ("n_clients", "local_steps", "rounds", "eval_every", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class EvalSets(NamedTuple):
    train: IvDataset
    val: IvDataset
    test: IvDataset
    response: str


@dataclass
class Checkpoint:
    round: int
    theta: ParamVector
    tau: ParamVector
    val_mse: float = float("nan")

    def to_dict(self) -> dict:
        return {"round": self.round, "theta": self.theta.to_dict(), "tau": self.tau.to_dict(), "val_mse": self.val_mse}


@dataclass
class FedState:
    theta_global: ParamVector
    tau_global: ParamVector
    theta_tilde: TildeAnchor
    round: int = 0
    trajectory: list[MetricsRecord] = field(default_factory=list)
    opt_states: dict[int, OAdamState] = field(default_factory=dict)
    best: Checkpoint | None = None

    @classmethod
    def initial(cls, theta: ParamVector, tau: ParamVector, schedule: str = PREV_ROUND, every: int = 1) -> "FedState":
        return cls(theta, tau, TildeAnchor(theta, schedule, every))


def client_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, round_index])


def client_local_phase(theta: ParamVector, tau: ParamVector, shard: ClientShard, tilde: TildeAnchor,
                       cfg: FedConfig, rng: np.random.Generator | None = None,
                       opt_state: OAdamState | None = None):
    """R local steps from the broadcast state.

    Returns ``(delta_theta, delta_tau, opt_state)``; the optimizer state is
    only meaningful for OAdam.
    """
    opt = cfg.optimizer
    rt2 = tilde_sq_residuals(tilde, shard)
    th, ta = theta.values, tau.values
    if opt.kind == OADAM and opt_state is None:
        opt_state = OAdamState.zeros(len(th), len(ta))
    try:
        for _ in range(cfg.local_steps):
            if opt.kind == SGDA:
                th, ta, rng = sgda_step(th, ta, shard, tilde, opt, rng, theta_spec=theta.spec,
                                        tau_spec=tau.spec, tilde_sq=rt2)
            else:
                gt, gu = client_grads(ParamVector(th, theta.spec), ParamVector(ta, tau.spec), tilde, shard, tilde_sq=rt2)
                if opt.kind == GDA:
                    th, ta = gda_step(th, ta, gt, gu, opt)
                else:
                    th, ta, opt_state = oadam_step(th, ta, gt, gu, opt_state, opt)
            peak = max(np.max(np.abs(th)), np.max(np.abs(ta)))
            if peak > DIVERGENCE_THRESHOLD:
                raise DivergenceError(f"client {shard.client_id}: local iterate reached |w|_inf = {peak:.3g}")
    except (FloatingPointError, ValueError) as exc:
        if isinstance(exc, ValueError) and "non-finite" not in str(exc):
            raise
        raise DivergenceError(f"client {shard.client_id}: {exc}") from exc
    return th - theta.values, ta - tau.values, opt_state


def sync_round(state: FedState, deltas: Sequence | Mapping, n_clients: int | None = None) -> FedState:
    """Apply the mean client displacement and advance the anchor for the next round."""
    if isinstance(deltas, Mapping):
        by_id = dict(deltas)
    else:
        by_id = dict(enumerate(deltas))
    n = len(by_id) if n_clients is None else n_clients
    missing = [i for i in range(n) if i not in by_id]
    if missing or n == 0:
        raise ValueError(f"full participation violated: no delta from clients {missing}")
    d_theta = np.zeros(len(state.theta_global))
    d_tau = np.zeros(len(state.tau_global))
    for i in range(n):
        dt, du = by_id[i][0], by_id[i][1]
        d_theta = d_theta + dt
        d_tau = d_tau + du
    theta = state.theta_global.replace(state.theta_global.values + d_theta / n)
    tau = state.tau_global.replace(state.tau_global.values + d_tau / n)
    next_round = state.round + 1
    return replace(
        state,
        theta_global=theta,
        tau_global=tau,
        theta_tilde=state.theta_tilde.advance(theta, next_round + 1),
        round=next_round,
    )


def _record(state: FedState, shards, eval_sets: EvalSets | None, run_id: str, seed: int) -> MetricsRecord:
    tilde = state.theta_tilde
    u = federated_objective(state.theta_global, state.tau_global, tilde, shards)
    gt, gu = federated_grads(state.theta_global, state.tau_global, tilde, shards)
    mses = {}
    if eval_sets is not None:
        for name in ("train", "val", "test"):
            mses[f"{name}_mse"] = evaluate_mse(state.theta_global, getattr(eval_sets, name), eval_sets.response)
    return MetricsRecord(run_id, seed, state.round, u, float(np.linalg.norm(gt)), float(np.linalg.norm(gu)), **mses)


def run_federation(cfg: FedConfig, shards: Sequence[ClientShard], theta0: ParamVector, tau0: ParamVector,
                   eval_sets: EvalSets | None = None, run_id: str = "run", on_round=None) -> FedState:
    """Main loop over ``cfg.rounds`` synchronisations.

    ``on_round(state, deltas)`` is called after every sync with the per-client
    displacements of that round (keyed by client id).
    """
    if len(shards) != cfg.n_clients:
        raise ValueError(f"expected {cfg.n_clients} shards, got {len(shards)}")
    shards = sorted(shards, key=lambda s: s.client_id)
    state = FedState.initial(theta0, tau0, cfg.tilde_schedule, cfg.tilde_every)

    def observe(st: FedState) -> None:
        rec = _record(st, shards, eval_sets, run_id, cfg.seed)
        st.trajectory.append(rec)
        if eval_sets is not None and (st.best is None or rec.val_mse < st.best.val_mse):
            st.best = Checkpoint(st.round, st.theta_global, st.tau_global, rec.val_mse)

    observe(state)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            persist = cfg.persist_opt_state and cfg.optimizer.kind == OADAM

            def work(k: int):
                shard = shards[k]
                rng = client_rng(cfg.seed, shard.client_id, t)
                prior = state.opt_states.get(shard.client_id) if persist else None
                return client_local_phase(state.theta_global, state.tau_global, shard, state.theta_tilde,
                                          cfg, rng, prior)

            results = list(pool.map(work, range(len(shards)))) if pool else [work(k) for k in range(len(shards))]
            deltas = {shards[k].client_id: (r[0], r[1]) for k, r in enumerate(results)}
            opt_states = state.opt_states
            if persist:
                opt_states = {shards[k].client_id: r[2] for k, r in enumerate(results)}
            state = sync_round(state, deltas, cfg.n_clients)
            state.opt_states = opt_states
            if on_round is not None:
                on_round(state, deltas)
            if t % cfg.eval_every == 0 or t == cfg.rounds:
                observe(state)
    finally:
        if pool:
            pool.shutdown()
    return state
