"""Natural policy gradient for the game and the Kelly problem, and a regression critic.

Policies are affine per step: h̄ = DX + d, γ̄ = EX + e, η̄ = FX + f.  Each
block is stored as φ_k = [M_k | c_k] acting on the augmented state (X, 1), so
the natural-gradient preconditioner E[X̃X̃'] covers slopes and intercepts
jointly.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .controls import kelly_gains, saddle_gains
from .evaluator import factor_moments
from .model import ExplorationSchedule, MarketParams, sym
from .riccati import QuadraticValue
from .simulator import BatchResult, simulate_batch

BLOCKS = ("h", "gamma", "eta")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _aug(M, c):
    return np.concatenate([M, c[..., None]], axis=-1)


@dataclass
class AffineGamePolicy:
    D: np.ndarray
    dvec: np.ndarray
    E: np.ndarray
    evec: np.ndarray
    F: np.ndarray
    fvec: np.ndarray

    def __post_init__(self):
        for name in ("D", "dvec", "E", "evec", "F", "fvec"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @property
    def K(self):
        return self.D.shape[0]

    @classmethod
    def zeros(cls, params: MarketParams) -> "AffineGamePolicy":
        K, m, n, d = params.K, params.m, params.n, params.d
        return cls(np.zeros((K, m, n)), np.zeros((K, m)), np.zeros((K, d, n)), np.zeros((K, d)),
                   np.zeros((K, m, n)), np.zeros((K, m)))

    @classmethod
    def from_saddle(cls, params: MarketParams, qv: QuadraticValue) -> "AffineGamePolicy":
        g = saddle_gains(params, qv)
        K, m, n = params.K, params.m, params.n
        return cls(g.D, g.dvec, g.E, g.evec, np.zeros((K, m, n)), np.zeros((K, m)))

    def block(self, name) -> np.ndarray:
        """Augmented coefficients (K, rows, n+1)."""
        M, c = {"h": (self.D, self.dvec), "gamma": (self.E, self.evec), "eta": (self.F, self.fvec)}[name]
        return _aug(M, c)

    @classmethod
    def from_blocks(cls, blocks: dict) -> "AffineGamePolicy":
        h, g, e = blocks["h"], blocks["gamma"], blocks["eta"]
        return cls(h[..., :-1], h[..., -1], g[..., :-1], g[..., -1], e[..., :-1], e[..., -1])

    def gains(self):
        return (self.D, self.dvec), (self.E, self.evec), (self.F, self.fvec)

    def copy(self) -> "AffineGamePolicy":
        return AffineGamePolicy(*(np.copy(x) for x in (self.D, self.dvec, self.E, self.evec, self.F, self.fvec)))

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, dct) -> "AffineGamePolicy":
        return cls(**{k: np.asarray(dct[k], dtype=np.float64) for k in ("D", "dvec", "E", "evec", "F", "fvec")})


@dataclass
class CriticParams:
    """Learnable value coefficients; the terminal triple stays zero."""

    P: np.ndarray
    p: np.ndarray
    r: np.ndarray

    @classmethod
    def zeros(cls, params: MarketParams) -> "CriticParams":
        K, n = params.K, params.n
        return cls(np.zeros((K + 1, n, n)), np.zeros((K + 1, n)), np.zeros(K + 1))

    @classmethod
    def from_value(cls, qv: QuadraticValue) -> "CriticParams":
        return cls(qv.P.copy(), qv.p.copy(), qv.r.copy())

    def value(self, k, X):
        X = np.asarray(X, dtype=np.float64)
        return 0.5 * np.einsum("...i,ij,...j->...", X, self.P[k], X) + X @ self.p[k] + self.r[k]


@dataclass
class TrainConfig:
    """Settings for the learners.

    ``episodes`` is the number of policy updates M; each update uses
    ``batch`` simulated episodes.  ``schedule`` is one of constant, inv
    (δ₀/ℓ) or sqrt (δ₀/√ℓ).  ``estimator`` is score, fd or (Kelly only)
    exact.  ``x0_std`` spreads the initial state so that slopes and
    intercepts of the step-0 law are separately identifiable.
    """

    episodes: int = 200
    batch: int = 1000
    step_size: float = 0.5
    schedule: str = "sqrt"
    estimator: str = "score"
    critic_step: float = 1.0
    seed: int = 0
    tol: float = 0.0
    patience: int = 5
    x0_std: float = 1.0
    freeze_eta: bool = False
    order: str = "simultaneous"
    fd_step: float = 1e-2
    ridge: float = 1e-6
    average_tail: float = 0.0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if self.schedule not in ("constant", "inv", "sqrt"):
            raise ValueError(f"unknown step-size schedule {self.schedule!r}")
        if self.estimator not in ("score", "fd", "exact"):
            raise ValueError(f"unknown gradient estimator {self.estimator!r}")
        if self.order not in ("simultaneous", "alternating"):
            raise ValueError(f"unknown update order {self.order!r}")
        if not 0.0 <= self.average_tail < 1.0:
            raise ValueError("average_tail must lie in [0, 1)")

    def step(self, ell: int) -> float:
        if self.schedule == "constant":
            return self.step_size
        if self.schedule == "inv":
            return self.step_size / ell
        return self.step_size / np.sqrt(ell)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ helpers

def sample_initial_states(params: MarketParams, mean, cov_or_std, n_paths: int, seed: int,
                          first_stream: int = 0) -> np.ndarray:
    """X0 ~ N(mean, cov); a scalar is read as an isotropic standard deviation."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.asarray(cov_or_std, dtype=np.float64)
    if cov.ndim == 0:
        L = float(cov) * np.eye(params.n)
    else:
        L = np.linalg.cholesky(sym(cov))
    streams = np.arange(first_stream, first_stream + n_paths, dtype=np.uint64)
    z = _kernels.normals(seed, streams, _kernels.CH_X0, 1, params.n)[:, 0]
    return mean + z @ L.T


def augment(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)


def estimate_state_cov(paths: np.ndarray, k: int, ridge: float = 1e-6) -> np.ndarray:
    """Λ̂_k = mean of X̃X̃' over the batch with X̃ = (X_k, 1), plus λI, λ = ridge·trace/(n+1)."""
    Xt = augment(np.asarray(paths, dtype=np.float64)[:, k])
    L = Xt.T @ Xt / Xt.shape[0]
    lam = ridge * np.trace(L) / L.shape[0]
    return L + lam * np.eye(L.shape[0])


@dataclass
class GradientEstimate:
    """Per-block gradients (K, rows, n+1) with standard errors, plus the batch used."""

    grads: dict
    se: dict
    covs: np.ndarray
    objective: float
    objective_se: float
    batch: Optional[BatchResult] = None

    def zscores(self, atol: float = 1e-9) -> dict:
        """Gradient / SE per entry; entries below ``atol`` in size count as exact zeros."""
        out = {}
        for k, g in self.grads.items():
            s = np.maximum(self.se[k], np.finfo(float).tiny)
            out[k] = np.where(np.abs(g) <= atol, 0.0, g / s)
        return out


def _loo_mean(x: np.ndarray) -> np.ndarray:
    """Leave-one-out mean along axis 0, an unbiased per-sample baseline."""
    n = x.shape[0]
    return (x.sum(axis=0, keepdims=True) - x) / (n - 1)


def _mean_se(per_path: np.ndarray):
    n = per_path.shape[0]
    return per_path.mean(axis=0), per_path.std(axis=0, ddof=1) / np.sqrt(n)


def _rollout(params, psi, policy: AffineGamePolicy, X0b, seed, first_stream, backend=None):
    (D, dv), (E, ev), (F, fv) = policy.gains()
    return simulate_batch(params, psi, X0b, X0b.shape[0], seed, hbar=(D, dv), gamma=(E, ev), eta=(F, fv),
                          first_stream=first_stream, backend=backend)


def _controls_along(policy: AffineGamePolicy, X):
    """γ̄ and η̄ along paths X (N, K+1, n) -> (N, K, d), (N, K, m)."""
    Xk = X[:, :-1]
    gam = np.einsum("kdn,ikn->ikd", policy.E, Xk) + policy.evec[None]
    eta = np.einsum("kmn,ikn->ikm", policy.F, Xk) + policy.fvec[None]
    return gam, eta


def _step_rewards(params, psi, policy, batch):
    """Realised per-step game payoffs −θΔR_k − ½(‖γ̄‖²Δt + η̄'Ψ⁻¹η̄)."""
    gam, eta = _controls_along(policy, batch.X)
    pen = 0.5 * params.dt * np.sum(gam * gam, axis=-1) + 0.5 * np.einsum("ikm,kmj,ikj->ik", eta, psi.inv[: params.K], eta)
    return -params.theta * batch.inc_act - pen, gam, eta


def _exploration_score(psi, batch, K):
    """Ψ⁻¹(h − mean) = L⁻ᵀ v_std per step, (N, K, m)."""
    out = np.empty_like(batch.vs)
    for k in range(K):
        out[:, k] = np.linalg.solve(psi.chol[k].T, batch.vs[:, k].T).T
    return out


def score_gradient_game(params: MarketParams, psi: ExplorationSchedule, policy: AffineGamePolicy,
                        batch: BatchResult, advantages: Optional[np.ndarray] = None, ridge: float = 1e-6):
    """Likelihood-ratio gradient of the game objective from one batch.

    Exploration gives the score Ψ⁻¹(h − h̄ − η̄) for the h̄ and η̄ blocks and the
    tilted Brownian increment gives w − γ̄Δt for the γ̄ block.  Without
    ``advantages`` the h̄/η̄ blocks use the step payoff and the γ̄ block the
    payoff-to-go, each against a leave-one-out batch mean; with
    ``advantages`` (N, K) those replace both.
    """
    K, dt = params.K, params.dt
    r, gam, eta = _step_rewards(params, psi, policy, batch)
    Xt = augment(batch.X[:, :-1])
    s_h = _exploration_score(psi, batch, K)
    s_w = batch.w
    if advantages is None:
        togo = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
        a_h = r - _loo_mean(r)
        a_g = togo - _loo_mean(togo)
    else:
        a_h = a_g = advantages
    per = {
        "h": np.einsum("ik,ikm,ikj->ikmj", a_h, s_h, Xt),
        "gamma": np.einsum("ik,ikd,ikj->ikdj", a_g, s_w, Xt) - dt * np.einsum("ikd,ikj->ikdj", gam, Xt),
    }
    psi_inv_eta = np.einsum("kmj,ikj->ikm", psi.inv[:K], eta)
    per["eta"] = per["h"] - np.einsum("ikm,ikj->ikmj", psi_inv_eta, Xt)
    grads, se = {}, {}
    for name, arr in per.items():
        grads[name], se[name] = _mean_se(arr)
    covs = np.stack([estimate_state_cov(batch.X, k, ridge) for k in range(K)])
    obj, obj_se = _mean_se(batch.game_value)
    return GradientEstimate(grads, se, covs, float(obj), float(obj_se), batch)


def fd_gradient_game(params: MarketParams, psi: ExplorationSchedule, policy: AffineGamePolicy, X0b, seed: int,
                     first_stream: int = 0, eps: float = 1e-2, ridge: float = 1e-6, backend=None):
    """Central finite differences of the batch-mean game value with common random numbers.

    The objective is quadratic in each coefficient, so central differences
    carry no truncation error beyond rounding.
    """
    base = _rollout(params, psi, policy, X0b, seed, first_stream, backend)
    grads, se = {}, {}
    for name in BLOCKS:
        phi = policy.block(name)
        g = np.zeros_like(phi)
        s = np.zeros_like(phi)
        for idx in np.ndindex(*phi.shape):
            vals = []
            for sign in (1.0, -1.0):
                blocks = {b: policy.block(b) for b in BLOCKS}
                blocks[name] = phi.copy()
                blocks[name][idx] += sign * eps
                out = _rollout(params, psi, AffineGamePolicy.from_blocks(blocks), X0b, seed, first_stream, backend)
                vals.append(out.game_value)
            diff = (vals[0] - vals[1]) / (2 * eps)
            g[idx], s[idx] = _mean_se(diff)
        grads[name], se[name] = g, s
    covs = np.stack([estimate_state_cov(base.X, k, ridge) for k in range(params.K)])
    obj, obj_se = _mean_se(base.game_value)
    return GradientEstimate(grads, se, covs, float(obj), float(obj_se), base)


def policy_gradient_game(params: MarketParams, psi: ExplorationSchedule, policy: AffineGamePolicy, X0,
                         config: TrainConfig, iteration: int = 0, backend=None) -> GradientEstimate:
    """Gradient of E^{γ̄,η̄}[−θ(R̄ − R_0) − ½Σ(‖γ̄‖²Δt + η̄'Ψ⁻¹η̄)] for every block and step."""
    B = config.batch
    first = iteration * B
    X0b = sample_initial_states(params, X0, config.x0_std, B, config.seed, first)
    if config.estimator == "fd":
        est = fd_gradient_game(params, psi, policy, X0b, config.seed, first, config.fd_step, config.ridge, backend)
    elif config.estimator == "score":
        batch = _rollout(params, psi, policy, X0b, config.seed, first, backend)
        est = score_gradient_game(params, psi, policy, batch, ridge=config.ridge)
    else:
        raise ValueError("exact gradients are available for the Kelly problem only")
    for name, g in est.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in block {name} at iteration {iteration}")
    return est


def npg_update(policy: AffineGamePolicy, gradients: dict, cov_estimates: np.ndarray, config: TrainConfig,
               iteration: int, players=("min", "max")) -> AffineGamePolicy:
    """φ_k ← φ_k ∓ δ_ℓ ∇φ_k Λ̂_k⁻¹: descent on h̄ coefficients, ascent on γ̄ and η̄ coefficients."""
    delta = config.step(max(1, iteration))
    blocks = {}
    for name in BLOCKS:
        phi = policy.block(name)
        g = gradients.get(name)
        if g is None or (name == "eta" and config.freeze_eta):
            blocks[name] = phi
            continue
        active = ("min" in players) if name == "h" else ("max" in players)
        if not active:
            blocks[name] = phi
            continue
        nat = np.stack([np.linalg.solve(cov_estimates[k], g[k].T).T for k in range(g.shape[0])])
        sign = -1.0 if name == "h" else 1.0
        blocks[name] = phi + sign * delta * nat
    return AffineGamePolicy.from_blocks(blocks)


def _dists(policy: AffineGamePolicy, target: Optional[AffineGamePolicy]) -> dict:
    if target is None:
        return {"dist_h": float("nan"), "dist_gamma": float("nan"), "dist_eta": float("nan")}
    return {
        "dist_h": float(np.linalg.norm(policy.D - target.D) + np.linalg.norm(policy.dvec - target.dvec)),
        "dist_gamma": float(np.linalg.norm(policy.E - target.E) + np.linalg.norm(policy.evec - target.evec)),
        "dist_eta": float(np.linalg.norm(policy.F - target.F) + np.linalg.norm(policy.fvec - target.fvec)),
    }


def _natural_norms(est: GradientEstimate) -> dict:
    out = {}
    for name, g in est.grads.items():
        nat = np.stack([np.linalg.solve(est.covs[k], g[k].T).T for k in range(g.shape[0])])
        out[f"grad_norm_{name}"] = float(np.linalg.norm(nat))
    return out


def _averaged(history, like):
    return like.__class__(*(np.mean([getattr(p, f) for p in history], axis=0)
                            for f in ("D", "dvec", "E", "evec", "F", "fvec")))


def train_game(params: MarketParams, psi: ExplorationSchedule, X0, config: TrainConfig,
               init: Optional[AffineGamePolicy] = None, target: Optional[AffineGamePolicy] = None,
               backend=None):
    """Simultaneous (or alternating) natural-gradient descent-ascent.

    Returns the final policy (tail-averaged when ``config.average_tail`` > 0)
    and a list of per-iteration trace rows.
    """
    policy = (init or AffineGamePolicy.zeros(params)).copy()
    trace = []
    calm = 0
    tail_start = int(np.ceil(config.episodes * (1.0 - config.average_tail))) if config.average_tail > 0 else None
    history = []
    for ell in range(1, config.episodes + 1):
        est = policy_gradient_game(params, psi, policy, X0, config, ell, backend)
        if not np.isfinite(est.objective) or abs(est.objective) > 1e8:
            raise TrainingDiverged(f"objective diverged at iteration {ell}", trace)
        if config.order == "alternating":
            players = ("min",) if ell % 2 else ("max",)
        else:
            players = ("min", "max")
        norms = _natural_norms(est)
        row = {"iteration": ell, "objective_est": est.objective, "SE": est.objective_se, **norms,
               **_dists(policy, target)}
        trace.append(row)
        policy = npg_update(policy, est.grads, est.covs, config, ell, players)
        if tail_start is not None and ell >= tail_start:
            history.append(policy.copy())
        if config.tol > 0 and max(norms.values()) < config.tol:
            calm += 1
            if calm >= config.patience:
                break
        else:
            calm = 0
    if history:
        policy = _averaged(history, policy)
    return policy, trace


# ------------------------------------------------------------------ Kelly

def kelly_exact_gradient(params: MarketParams, D, dv, X0, x0_std: float):
    """(gradients (K, m, n+1), moment matrices (K, n+1, n+1)) of E[R_T − R_0].

    ∇φ_k = Δt([A | a] − ΣΣ'φ_k)E[X̃_kX̃_k'].
    """
    n = params.n
    mu, S = factor_moments(params, X0, (x0_std ** 2) * np.eye(n))
    G = params.derived.SigmaGram
    target = _aug(params.A, params.a)
    grads, covs = [], []
    for k in range(params.K):
        M = np.empty((n + 1, n + 1))
        M[:n, :n] = S[k] + np.outer(mu[k], mu[k])
        M[:n, n] = M[n, :n] = mu[k]
        M[n, n] = 1.0
        phi = _aug(D[k], dv[k])
        grads.append(params.dt * (target - G @ phi) @ M)
        covs.append(M)
    return np.array(grads), np.array(covs)


def kelly_gradient(params: MarketParams, D, dv, X0, config: TrainConfig, psi: Optional[ExplorationSchedule],
                   iteration: int = 0, backend=None):
    """(grad, se, covs, objective, objective_se) for the Kelly objective."""
    if config.estimator == "exact":
        g, covs = kelly_exact_gradient(params, D, dv, X0, config.x0_std)
        from .evaluator import kelly_objective_exact
        obj = kelly_objective_exact(params, D, dv, X0, config.x0_std ** 2 * np.eye(params.n))
        return g, np.zeros_like(g), covs, obj, 0.0
    B = config.batch
    first = iteration * B
    X0b = sample_initial_states(params, X0, config.x0_std, B, config.seed, first)
    zeros = AffineGamePolicy.zeros(params)
    if config.estimator == "score":
        if psi is None:
            raise ValueError("the score-function estimator needs an exploration schedule")
        pol = AffineGamePolicy(D, dv, zeros.E, zeros.evec, zeros.F, zeros.fvec)
        batch = _rollout(params, psi, pol, X0b, config.seed, first, backend)
        r = batch.inc_act
        s_h = _exploration_score(psi, batch, params.K)
        Xt = augment(batch.X[:, :-1])
        per = np.einsum("ik,ikm,ikj->ikmj", r - _loo_mean(r), s_h, Xt)
        g, se = _mean_se(per)
        obj, obj_se = _mean_se(batch.logexcess)
    else:
        phi = _aug(D, dv)
        g = np.zeros_like(phi)
        se = np.zeros_like(phi)
        base = None
        for idx in np.ndindex(*phi.shape):
            vals = []
            for sign in (1.0, -1.0):
                q = phi.copy()
                q[idx] += sign * config.fd_step
                out = simulate_batch(params, psi, X0b, B, config.seed, hbar=(q[..., :-1], q[..., -1]),
                                     first_stream=first, backend=backend)
                vals.append(out.logexcess_policy_avg)
            g[idx], se[idx] = _mean_se((vals[0] - vals[1]) / (2 * config.fd_step))
        base = simulate_batch(params, psi, X0b, B, config.seed, hbar=(D, dv), first_stream=first, backend=backend)
        batch = base
        obj, obj_se = _mean_se(base.logexcess_policy_avg)
    covs = np.stack([estimate_state_cov(batch.X, k, config.ridge) for k in range(params.K)])
    return g, se, covs, float(obj), float(obj_se)


def train_kelly(params: MarketParams, X0, config: TrainConfig, psi: Optional[ExplorationSchedule] = None,
                init=None, backend=None):
    """Natural-gradient ascent on E[R_T − R_0] over (D_k, d_k).

    Returns ((D, d), trace).  The exploration schedule only matters for the
    score-function estimator; it does not move the optimum.
    """
    K, m, n = params.K, params.m, params.n
    if init is None:
        D, dv = np.zeros((K, m, n)), np.zeros((K, m))
    else:
        D, dv = (np.array(x, dtype=np.float64) for x in init)
    Dstar, dstar = kelly_gains(params)
    trace = []
    calm = 0
    tail_start = int(np.ceil(config.episodes * (1.0 - config.average_tail))) if config.average_tail > 0 else None
    hist = []
    for ell in range(1, config.episodes + 1):
        g, se, covs, obj, obj_se = kelly_gradient(params, D, dv, X0, config, psi, ell, backend)
        if not np.all(np.isfinite(g)) or not np.isfinite(obj) or abs(obj) > 1e8:
            raise TrainingDiverged(f"Kelly training diverged at iteration {ell}", trace)
        nat = np.stack([np.linalg.solve(covs[k], g[k].T).T for k in range(K)])
        trace.append({"iteration": ell, "objective_est": obj, "SE": obj_se,
                      "grad_norm_h": float(np.linalg.norm(nat)),
                      "dist_h": float(np.linalg.norm(D - Dstar) + np.linalg.norm(dv - dstar))})
        phi = _aug(D, dv) + config.step(ell) * nat
        D, dv = phi[..., :-1].copy(), phi[..., -1].copy()
        if tail_start is not None and ell >= tail_start:
            hist.append((D.copy(), dv.copy()))
        if config.tol > 0 and trace[-1]["grad_norm_h"] < config.tol:
            calm += 1
            if calm >= config.patience:
                break
        else:
            calm = 0
    if hist:
        D = np.mean([h[0] for h in hist], axis=0)
        dv = np.mean([h[1] for h in hist], axis=0)
    return (D, dv), trace


# ------------------------------------------------------------------ critic

def _features(X: np.ndarray) -> np.ndarray:
    """[½x_i x_j (i ≤ j, off-diagonal doubled), x, 1] so that θ·φ = ½X'PX + X'p + r."""
    N, n = X.shape
    cols = []
    for i in range(n):
        for j in range(i, n):
            cols.append((0.5 if i == j else 1.0) * X[:, i] * X[:, j])
    cols.extend(X.T)
    cols.append(np.ones(N))
    return np.stack(cols, axis=1)


def _unpack(coef: np.ndarray, n: int):
    P = np.zeros((n, n))
    t = 0
    for i in range(n):
        for j in range(i, n):
            P[i, j] = P[j, i] = coef[t]
            t += 1
    return P, coef[t:t + n].copy(), float(coef[t + n])


def fit_critic(params: MarketParams, psi: ExplorationSchedule, policy: AffineGamePolicy, batch: BatchResult,
               ridge: float = 1e-10, target: str = "expected") -> CriticParams:
    """Backward per-step least squares of u_k on the one-step target θgΔt + u_{k+1}(X_{k+1}).

    ``target='expected'`` uses the conditional per-step payoff θgΔt carried by
    the batch; ``target='sampled'`` uses the realised payoff instead.
    """
    K, n = params.K, params.n
    crit = CriticParams.zeros(params)
    if target == "sampled":
        step, _, _ = _step_rewards(params, psi, policy, batch)
    else:
        step = batch.game
    for k in range(K - 1, -1, -1):
        y = step[:, k] + crit.value(k + 1, batch.X[:, k + 1])
        Phi = _features(batch.X[:, k])
        A = Phi.T @ Phi / Phi.shape[0]
        lam = ridge * max(1.0, np.trace(A) / A.shape[0])
        for _ in range(8):
            M = A + lam * np.eye(A.shape[0])
            if np.linalg.cond(M) < 1e12:
                break
            warnings.warn("critic regression ill-conditioned; increasing ridge", RuntimeWarning)
            lam *= 100.0
        coef = np.linalg.solve(M, Phi.T @ y / Phi.shape[0])
        crit.P[k], crit.p[k], crit.r[k] = _unpack(coef, n)
    return crit


def actor_critic_step(params: MarketParams, psi: ExplorationSchedule, policy: AffineGamePolicy,
                      critic: CriticParams, batch: BatchResult, config: TrainConfig, iteration: int = 1,
                      refit: bool = True):
    """Refit the critic on ``batch`` and take one natural-gradient actor step.

    The actor uses temporal-difference advantages
    r_k + u_{k+1}(X_{k+1}) − u_k(X_k) in the likelihood-ratio gradient.
    """
    if refit:
        fitted = fit_critic(params, psi, policy, batch, ridge=config.ridge)
        a = config.critic_step
        critic = CriticParams(
            (1 - a) * critic.P + a * fitted.P, (1 - a) * critic.p + a * fitted.p, (1 - a) * critic.r + a * fitted.r)
        critic.P[-1], critic.p[-1], critic.r[-1] = 0.0, 0.0, 0.0
    adv = td_advantages(params, psi, policy, critic, batch)
    est = score_gradient_game(params, psi, policy, batch, advantages=adv, ridge=config.ridge)
    new = npg_update(policy, est.grads, est.covs, config, iteration)
    return new, critic, est


def td_advantages(params, psi, policy, critic: CriticParams, batch: BatchResult) -> np.ndarray:
    r, _, _ = _step_rewards(params, psi, policy, batch)
    K = params.K
    adv = np.empty_like(r)
    for k in range(K):
        adv[:, k] = r[:, k] + critic.value(k + 1, batch.X[:, k + 1]) - critic.value(k, batch.X[:, k])
    return adv


def bellman_residuals(params, critic: CriticParams, batch: BatchResult) -> np.ndarray:
    """θgΔt + u_{k+1}(X_{k+1}) − u_k(X_k) along transitions, (N, K)."""
    res = np.empty_like(batch.game)
    for k in range(params.K):
        res[:, k] = batch.game[:, k] + critic.value(k + 1, batch.X[:, k + 1]) - critic.value(k, batch.X[:, k])
    return res


def critic_batch(params: MarketParams, psi: ExplorationSchedule, policy: AffineGamePolicy, X0, n_paths: int,
                 seed: int = 0, x0_std: float = 1.0, backend=None) -> BatchResult:
    X0b = sample_initial_states(params, X0, x0_std, n_paths, seed)
    return _rollout(params, psi, policy, X0b, seed, 0, backend)


# ------------------------------------------------------------------ outputs

TRACE_FIELDS = ["iteration", "objective_est", "SE", "grad_norm_h", "grad_norm_gamma", "grad_norm_eta",
                "dist_h", "dist_gamma", "dist_eta"]


def trace_to_csv(trace: list, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACE_FIELDS)
        for row in trace:
            out = []
            for f in TRACE_FIELDS:
                v = row.get(f, "")
                out.append("%.17g" % v if isinstance(v, float) else v)
            wr.writerow(out)


def checkpoint(policy, config: TrainConfig, path, extra: Optional[dict] = None) -> None:
    if isinstance(policy, AffineGamePolicy):
        body = {"kind": "game", "policy": policy.to_dict()}
    else:
        D, dv = policy
        body = {"kind": "kelly", "policy": {"D": np.asarray(D).tolist(), "dvec": np.asarray(dv).tolist()}}
    body["config"] = config.to_dict()
    if extra:
        body.update(extra)
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2)
