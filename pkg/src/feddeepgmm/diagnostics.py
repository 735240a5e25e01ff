"""Curvature and heterogeneity diagnostics at a given (theta, tau).

Everything here works on *games*: objects exposing ``n_theta``, ``n_tau``
and ``grads(theta, tau) -> (grad_theta, grad_tau)`` on flat arrays.  A client
of the DeepGMM game is wrapped by :class:`GmmGame`; :class:`QuadraticGame`
gives closed-form toys.  The federated objective is the plain mean of the
client games, so its derivatives are means too.

Hessians are dense, assembled column by column from finite differences of
exact gradients, which limits these tools to small models.  The dissimilarity
numbers are evaluated at the supplied point only ("pointwise"), not as the
uniform bounds a convergence analysis would use.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Protocol, Sequence

import numpy as np

from .data import ClientShard
from .nn import MlpSpec, ParamVector, dense_hessian, hvp
from .objective import client_grads, client_objective, tilde_sq_residuals

DENSE_LIMIT = 200
DEFAULT_TOL = 1e-4
SINGULAR_COND = 1e12

STRICT_LOCAL_MINIMAX = "StrictLocalMinimax"
FAILS_FIRST_ORDER = "FailsFirstOrder"
FAILS_SECOND_ORDER = "FailsSecondOrder"
DEGENERATE_TT = "DegenerateTT"
VERDICTS = (STRICT_LOCAL_MINIMAX, FAILS_FIRST_ORDER, FAILS_SECOND_ORDER, DEGENERATE_TT)


class Game(Protocol):
    n_theta: int
    n_tau: int

    def grads(self, theta: np.ndarray, tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class GmmGame:
    """One client's DeepGMM objective with the anchor held fixed."""

    def __init__(self, theta_spec: MlpSpec, tau_spec: MlpSpec, tilde, shard: ClientShard):
        self.theta_spec = theta_spec
        self.tau_spec = tau_spec
        self.tilde = tilde
        self.shard = shard
        self.n_theta = theta_spec.n_params
        self.n_tau = tau_spec.n_params
        self._rt2 = tilde_sq_residuals(tilde, shard)

    def grads(self, theta, tau):
        return client_grads(ParamVector(theta, self.theta_spec), ParamVector(tau, self.tau_spec),
                            self.tilde, self.shard, tilde_sq=self._rt2)

    def value(self, theta, tau) -> float:
        return client_objective(ParamVector(theta, self.theta_spec), ParamVector(tau, self.tau_spec),
                                self.tilde, self.shard, tilde_sq=self._rt2).u_value


class QuadraticGame:
    """U = 1/2 th'A th + th'C ta + 1/2 ta'B ta + a'th + b'ta."""

    def __init__(self, A, B, C, a=None, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        self.C = np.asarray(C, dtype=np.float64).reshape(self.A.shape[0], self.B.shape[0])
        self.n_theta = self.A.shape[0]
        self.n_tau = self.B.shape[0]
        self.a = np.zeros(self.n_theta) if a is None else np.asarray(a, dtype=np.float64).reshape(-1)
        self.b = np.zeros(self.n_tau) if b is None else np.asarray(b, dtype=np.float64).reshape(-1)
        for name, m in (("A", self.A), ("B", self.B)):
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")

    def grads(self, theta, tau):
        th = np.asarray(theta, dtype=np.float64).reshape(-1)
        ta = np.asarray(tau, dtype=np.float64).reshape(-1)
        return self.A @ th + self.C @ ta + self.a, self.C.T @ th + self.B @ ta + self.b

    def value(self, theta, tau) -> float:
        th = np.asarray(theta, dtype=np.float64).reshape(-1)
        ta = np.asarray(tau, dtype=np.float64).reshape(-1)
        return float(0.5 * th @ self.A @ th + th @ self.C @ ta + 0.5 * ta @ self.B @ ta + self.a @ th + self.b @ ta)


def gmm_games(theta_spec: MlpSpec, tau_spec: MlpSpec, tilde, shards: Sequence[ClientShard]) -> list[GmmGame]:
    return [GmmGame(theta_spec, tau_spec, tilde, s) for s in sorted(shards, key=lambda s: s.client_id)]


def _flat(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64).reshape(-1)


def _check_games(theta: np.ndarray, tau: np.ndarray, games: Sequence[Game], dense: bool) -> None:
    if not games:
        raise ValueError("diagnostics need at least one client game")
    for g in games:
        if (g.n_theta, g.n_tau) != (theta.shape[0], tau.shape[0]):
            raise ValueError(f"game expects ({g.n_theta}, {g.n_tau}) parameters, got ({theta.shape[0]}, {tau.shape[0]})")
    total = theta.shape[0] + tau.shape[0]
    if dense and total > DENSE_LIMIT:
        raise ValueError(f"{total} parameters exceed the dense Hessian limit of {DENSE_LIMIT}")


def _joint_grad_fn(game: Game, n_theta: int):
    def fn(w: np.ndarray) -> np.ndarray:
        gt, gu = game.grads(w[:n_theta], w[n_theta:])
        return np.concatenate([gt, gu])
    return fn


@dataclass
class HessianSet:
    """Dense joint Hessians of each client game and of their mean."""
    n_theta: int
    clients: list[np.ndarray]
    grads: list[tuple[np.ndarray, np.ndarray]]

    @property
    def mean(self) -> np.ndarray:
        return sum(self.clients) / len(self.clients)

    def mean_grads(self) -> tuple[np.ndarray, np.ndarray]:
        k = len(self.grads)
        return sum(g[0] for g in self.grads) / k, sum(g[1] for g in self.grads) / k

    def blocks(self, H: np.ndarray):
        """(H_tt, H_tu, H_ut, H_uu) with t = theta, u = tau."""
        p = self.n_theta
        return H[:p, :p], H[:p, p:], H[p:, :p], H[p:, p:]


def assemble_hessians(theta, tau, games: Sequence[Game]) -> HessianSet:
    th, ta = _flat(theta), _flat(tau)
    _check_games(th, ta, games, dense=True)
    w = np.concatenate([th, ta])
    hs, gs = [], []
    for g in games:
        hs.append(dense_hessian(w, _joint_grad_fn(g, th.shape[0])))
        gs.append(tuple(np.asarray(v, dtype=np.float64) for v in g.grads(th, ta)))
    return HessianSet(th.shape[0], hs, gs)


def spectral_norm(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def _lambda_max_sym(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


@dataclass
class ClientHeterogeneity:
    client: int
    zeta_theta: float
    zeta_tau: float
    rho_theta: float | None = None
    rho_tau: float | None = None
    rho_thetatau: float | None = None
    rho_tautheta: float | None = None
    lambda_max_tt_client: float | None = None
    B: float | None = None


@dataclass
class HeterogeneityProfile:
    clients: list[ClientHeterogeneity]
    L: float | None = None
    lambda_max_tt: float | None = None
    pointwise: bool = True

    def to_dict(self) -> dict:
        return {
            "kind": "pointwise dissimilarity",
            "L_estimate": self.L,
            "lambda_max_tt": self.lambda_max_tt,
            "clients": [asdict(c) for c in self.clients],
        }


def _b_term(scale: float, rho: float, denom: float) -> float:
    # A zero dissimilarity contributes nothing even when the curvature vanishes.
    if rho == 0.0:
        return 0.0
    return scale * rho / denom if denom > 0.0 else float("inf")


def composite_bound(rho_theta: float, rho_thetatau: float, rho_tautheta: float, rho_tau: float,
                    L: float, lam_client: float, lam_global: float) -> float:
    """B_i = rho_th + L(rho_thta + rho_tath)/|lam_i| + L^2 rho_ta / |lam_i lam|."""
    li = abs(lam_client)
    return (rho_theta + _b_term(L, rho_thetatau, li) + _b_term(L, rho_tautheta, li)
            + _b_term(L * L, rho_tau, li * abs(lam_global)))


def heterogeneity_profile(theta, tau, games: Sequence[Game], *, with_rho: bool = True,
                          hessians: HessianSet | None = None) -> HeterogeneityProfile:
    """Gradient and Hessian dissimilarity of every client against the mean game.

    With ``with_rho=False`` only the gradient terms are computed and no size
    limit applies.
    """
    th, ta = _flat(theta), _flat(tau)
    _check_games(th, ta, games, dense=with_rho)
    if with_rho:
        hs = hessians if hessians is not None else assemble_hessians(th, ta, games)
        grads = hs.grads
    else:
        grads = [g.grads(th, ta) for g in games]
    k = len(grads)
    gt_mean = sum(g[0] for g in grads) / k
    gu_mean = sum(g[1] for g in grads) / k
    out = [ClientHeterogeneity(i, float(np.linalg.norm(gt - gt_mean)), float(np.linalg.norm(gu - gu_mean)))
           for i, (gt, gu) in enumerate(grads)]
    if not with_rho:
        return HeterogeneityProfile(out)
    H = hs.mean
    Htt, Htu, Hut, Huu = hs.blocks(H)
    L = max(spectral_norm(Hi) for Hi in hs.clients)
    lam = _lambda_max_sym(Huu) if Huu.size else 0.0
    for c, Hi in zip(out, hs.clients):
        tt, tu, ut, uu = hs.blocks(Hi)
        c.rho_theta = spectral_norm(tt - Htt)
        c.rho_thetatau = spectral_norm(tu - Htu)
        c.rho_tautheta = spectral_norm(ut - Hut)
        c.rho_tau = spectral_norm(uu - Huu)
        c.lambda_max_tt_client = _lambda_max_sym(uu) if uu.size else 0.0
        c.B = composite_bound(c.rho_theta, c.rho_thetatau, c.rho_tautheta, c.rho_tau, L, c.lambda_max_tt_client, lam)
    return HeterogeneityProfile(out, L, lam)


@dataclass
class EquilibriumCertificate:
    grad_norm_theta: float
    grad_norm_tau: float
    lambda_max_tt: float
    schur_min_eig: float
    verdict: str
    tol: float = DEFAULT_TOL
    cond_tt: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not np.isfinite(v):
                d[k] = None
        return d


def certify_blocks(grad_theta, grad_tau, Htt, Htu, Hut, Huu, tol: float = DEFAULT_TOL) -> EquilibriumCertificate:
    """Certificate from already-assembled federated derivatives."""
    gnt = float(np.linalg.norm(grad_theta))
    gnu = float(np.linalg.norm(grad_tau))
    Huu = 0.5 * (Huu + Huu.T)
    lam = _lambda_max_sym(Huu)
    cond = float(np.linalg.cond(Huu))
    degenerate = abs(lam) <= tol or not np.isfinite(cond) or cond > SINGULAR_COND
    schur = float("nan")
    if not degenerate:
        S = Htt - Htu @ np.linalg.solve(Huu, Hut)
        S = 0.5 * (S + S.T)
        schur = float(np.linalg.eigvalsh(S)[0]) if S.size else float("inf")
    if gnt > tol or gnu > tol:
        verdict = FAILS_FIRST_ORDER
    elif degenerate:
        verdict = DEGENERATE_TT
    elif lam < -tol and schur > tol:
        verdict = STRICT_LOCAL_MINIMAX
    else:
        verdict = FAILS_SECOND_ORDER
    return EquilibriumCertificate(gnt, gnu, lam, schur, verdict, tol, cond)


def equilibrium_certificate(theta, tau, games: Sequence[Game], tol: float = DEFAULT_TOL,
                            hessians: HessianSet | None = None) -> EquilibriumCertificate:
    """First- and second-order local minimax test of the mean game at (theta, tau)."""
    hs = hessians if hessians is not None else assemble_hessians(theta, tau, games)
    gt, gu = hs.mean_grads()
    return certify_blocks(gt, gu, *hs.blocks(hs.mean), tol=tol)


@dataclass
class EpsilonInterval:
    client: int
    lower: float
    upper: float
    feasible: bool


def epsilon_interval(profile: HeterogeneityProfile, cert: EquilibriumCertificate) -> list[EpsilonInterval]:
    """Per-client range of epsilon for which the point is an approximate local equilibrium."""
    if cert.verdict != STRICT_LOCAL_MINIMAX:
        raise ValueError(f"epsilon interval needs a StrictLocalMinimax certificate, got {cert.verdict}")
    alpha = abs(cert.lambda_max_tt)
    beta = cert.schur_min_eig
    out = []
    for c in profile.clients:
        if c.rho_tau is None or c.B is None:
            raise ValueError("epsilon interval needs Hessian dissimilarity terms (profile built with with_rho=True)")
        lower = max(c.zeta_theta, c.zeta_tau)
        upper = min(alpha - c.rho_tau, beta - c.B)
        out.append(EpsilonInterval(c.client, lower, upper, bool(lower <= upper and c.rho_tau < alpha and c.B < beta)))
    return out


def flow_jacobian(Htt, Htu, Hut, Huu, gamma: float, R: int) -> np.ndarray:
    """Linearisation of the gamma-scaled FedGDA flow around a stationary point."""
    if gamma <= 0 or R < 1:
        raise ValueError("need gamma > 0 and R >= 1")
    return np.block([[-(R / gamma) * Htt, -(R / gamma) * Htu], [R * Hut, R * Huu]])


def spectrum_real_parts(J: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        eig = np.linalg.eigvals(J)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed on the flow Jacobian: {exc}") from exc
    re = np.sort(eig.real)[::-1]
    return re, bool(re[0] < 0.0)


def flow_jacobian_spectrum(theta, tau, games: Sequence[Game], gamma: float, R: int,
                           hessians: HessianSet | None = None) -> tuple[np.ndarray, bool]:
    """Real parts of the flow Jacobian eigenvalues (descending) and strict stability."""
    hs = hessians if hessians is not None else assemble_hessians(theta, tau, games)
    return spectrum_real_parts(flow_jacobian(*hs.blocks(hs.mean), gamma, R))


def lambda_max_tt_power(theta, tau, games: Sequence[Game], iters: int = 500, seed: int = 0,
                        rtol: float = 1e-9) -> float:
    """Largest eigenvalue of the mean tau-tau Hessian by shifted power iteration.

    Only Hessian-vector products are used, so this works beyond the dense limit.
    """
    th, ta = _flat(theta), _flat(tau)
    _check_games(th, ta, games, dense=False)

    def grad_tau(u: np.ndarray) -> np.ndarray:
        return sum(np.asarray(g.grads(th, u)[1]) for g in games) / len(games)

    def power(shift: float) -> float:
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(ta.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = hvp(ta, grad_tau, v) - shift * v
            new = float(v @ w)
            nrm = np.linalg.norm(w)
            if nrm == 0.0:
                return shift
            v = w / nrm
            if abs(new - lam) <= rtol * max(1.0, abs(new)):
                lam = new
                break
            lam = new
        return lam + shift

    dominant = power(0.0)
    if dominant >= 0.0:
        return dominant
    # All the mass sits at the negative end; shifting by it exposes the top of the spectrum.
    return power(dominant)


def newton_stationary(theta, tau, games: Sequence[Game], iters: int = 20, tol: float = 1e-12):
    """Newton iterations on the joint gradient of the mean game.

    Converges in one step for quadratic games; returns flat (theta, tau).
    """
    th, ta = _flat(theta).copy(), _flat(tau).copy()
    p = th.shape[0]
    for _ in range(iters):
        hs = assemble_hessians(th, ta, games)
        gt, gu = hs.mean_grads()
        g = np.concatenate([gt, gu])
        if np.linalg.norm(g) <= tol:
            break
        step = np.linalg.lstsq(hs.mean, -g, rcond=None)[0]
        th, ta = th + step[:p], ta + step[p:]
    return th, ta


def diagnostics_report(theta, tau, games: Sequence[Game], gamma: float, R: int,
                       tol: float = DEFAULT_TOL) -> dict:
    """Profile, certificate, intervals and flow spectrum as one JSON-ready dict."""
    hs = assemble_hessians(theta, tau, games)
    profile = heterogeneity_profile(theta, tau, games, hessians=hs)
    cert = equilibrium_certificate(theta, tau, games, tol, hessians=hs)
    real_parts, stable = flow_jacobian_spectrum(theta, tau, games, gamma, R, hessians=hs)
    report = {
        "n_clients": len(games),
        "n_theta": hs.n_theta,
        "n_tau": int(hs.mean.shape[0] - hs.n_theta),
        "heterogeneity": profile.to_dict(),
        "certificate": cert.to_dict(),
        "flow": {"gamma": gamma, "local_steps": R, "real_parts": [float(v) for v in real_parts],
                 "strictly_stable": stable},
    }
    if cert.verdict == STRICT_LOCAL_MINIMAX:
        report["epsilon_intervals"] = [asdict(e) for e in epsilon_interval(profile, cert)]
    else:
        report["epsilon_intervals"] = None
        report["epsilon_intervals_note"] = f"undefined: certificate verdict is {cert.verdict}"
    return _json_safe(report)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def report_schema() -> dict:
    """JSON schema that every :func:`diagnostics_report` output satisfies."""
    return json.loads(resources.files("feddeepgmm").joinpath("schemas/diagnostics.schema.json").read_text())
