"""Monte Carlo and closed-form evaluation of the criteria, the game value and a DPP oracle."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .controls import saddle_at
from .duality import StepContext, hamiltonian_grid
from .model import AffinePolicy, ExplorationSchedule, MarketParams
from .riccati import QuadraticValue, value_at
from .simulator import simulate_batch


@dataclass
class McEstimate:
    mean: float
    std_error: float
    n_paths: int
    log_space: bool = False
    method: str = "mc"
    seed: Optional[int] = None
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def within(self, target: float, n_se: float = 4.0) -> bool:
        return abs(self.mean - target) <= n_se * self.std_error


def _require_paths(n_paths):
    if n_paths is None or int(n_paths) < 2:
        raise ValueError("n_paths must be at least 2")
    return int(n_paths)


def log_mean_exp(psi: np.ndarray, antithetic: bool = False):
    """(ln mean e^ψ, delta-method SE) computed after subtracting max ψ.

    With antithetic pairs the SE uses pair averages as the i.i.d. units.
    """
    psi = np.asarray(psi, dtype=np.float64)
    M = float(np.max(psi))
    e = np.exp(psi - M)
    if antithetic and e.size % 2 == 0:
        half = e.size // 2
        units = 0.5 * (e[:half] + e[half:])
    else:
        units = e
    mean = units.mean()
    se = units.std(ddof=1) / np.sqrt(units.size) / mean
    return float(logsumexp(psi) - np.log(psi.size)), float(se)


def estimate_I(params: MarketParams, policy, psi: ExplorationSchedule, X0, n_paths: int, seed: int = 0,
               antithetic: bool = False, backend: Optional[str] = None):
    """Monte Carlo E[e^{−θ(R̄^π_T − R_0)}]; returns (Î, ln Î) as McEstimates."""
    if params.theta <= 0:
        raise ValueError("estimate_I requires θ > 0")
    n_paths = _require_paths(n_paths)
    t0 = time.perf_counter()
    batch = simulate_batch(params, psi, X0, n_paths, seed, hbar=policy, antithetic=antithetic, backend=backend)
    psi_vals = -params.theta * batch.logexcess_policy_avg
    if not np.all(np.isfinite(psi_vals)):
        raise FloatingPointError("non-finite log-excess return in simulation")
    lnI, se = log_mean_exp(psi_vals, antithetic)
    el = time.perf_counter() - t0
    with np.errstate(over="ignore"):
        I = float(np.exp(lnI))
    return (McEstimate(I, I * se, n_paths, False, "mc", seed, el),
            McEstimate(lnI, se, n_paths, True, "mc", seed, el))


def estimate_J(params: MarketParams, policy, psi: ExplorationSchedule, X0, n_paths: int, seed: int = 0,
               antithetic: bool = False, backend: Optional[str] = None) -> McEstimate:
    """−(1/θ) ln Î with the propagated standard error."""
    _, logI = estimate_I(params, policy, psi, X0, n_paths, seed, antithetic, backend)
    th = params.theta
    return McEstimate(-logI.mean / th, logI.std_error / th, n_paths, False, "mc", seed, logI.elapsed)


def _gains_of(policy, params):
    if isinstance(policy, tuple):
        return np.asarray(policy[0], dtype=np.float64), np.asarray(policy[1], dtype=np.float64)
    if isinstance(policy, AffinePolicy):
        return policy.D, policy.dvec
    raise TypeError("exact evaluation needs an affine policy")


def factor_moments(params: MarketParams, X0, X0_cov=None):
    """Means (K+1, n) and covariances (K+1, n, n) of X_k under the physical measure."""
    K, n, dt = params.K, params.n, params.dt
    Bt = params.derived.Btilde
    mu = np.empty((K + 1, n))
    S = np.empty((K + 1, n, n))
    mu[0] = np.asarray(X0, dtype=np.float64)
    S[0] = np.zeros((n, n)) if X0_cov is None else np.asarray(X0_cov, dtype=np.float64)
    LL = params.Lambda @ params.Lambda.T * dt
    for k in range(K):
        mu[k + 1] = params.b * dt + Bt @ mu[k]
        S[k + 1] = Bt @ S[k] @ Bt.T + LL
    return mu, S


def kelly_objective_exact(params: MarketParams, D, dv, X0, X0_cov=None) -> float:
    """E[R_T − R_0] for h_k = D_kX_k + d_k, from propagated factor moments."""
    G = params.derived.SigmaGram
    mu, S = factor_moments(params, X0, X0_cov)
    half_xi = 0.5 * params.Xi @ params.Xi
    total = 0.0
    for k in range(params.K):
        Dk, dk = D[k], dv[k]
        eh = Dk @ mu[k] + dk
        e_quad = eh @ G @ eh + np.trace(Dk.T @ G @ Dk @ S[k])
        e_hAX = eh @ params.A @ mu[k] + np.trace(Dk.T @ params.A @ S[k])
        total += (-0.5 * e_quad + eh @ params.a + half_xi - params.c + e_hAX - params.C @ mu[k]) * params.dt
    return float(total)


def kelly_objective(params: MarketParams, policy, X0, n_paths: Optional[int] = None, seed: int = 0,
                    X0_cov=None, backend: Optional[str] = None) -> McEstimate:
    """E[R_T − R_0] without exploration; exact when ``n_paths`` is None."""
    D, dv = _gains_of(policy, params)
    if n_paths is None:
        val = kelly_objective_exact(params, D, dv, X0, X0_cov)
        return McEstimate(val, 0.0, 0, False, "exact")
    n_paths = _require_paths(n_paths)
    X0b = np.asarray(X0, dtype=np.float64)
    if X0_cov is not None:
        from .rl import sample_initial_states
        X0b = sample_initial_states(params, X0, X0_cov, n_paths, seed)
    t0 = time.perf_counter()
    batch = simulate_batch(params, None, X0b, n_paths, seed, hbar=(D, dv), backend=backend)
    R = batch.logexcess
    return McEstimate(float(R.mean()), float(R.std(ddof=1) / np.sqrt(n_paths)), n_paths, False, "mc", seed,
                      time.perf_counter() - t0)


def estimate_game_value(params: MarketParams, hbar, gamma, eta, psi: ExplorationSchedule, X0, n_paths: int,
                        seed: int = 0, backend: Optional[str] = None) -> McEstimate:
    """E^{γ̄,η̄}[θ Σ_k g(X_k, h̄_k, η̄_k, γ̄_k)Δt] along tilted factor paths."""
    if params.theta <= 0:
        raise ValueError("the game value requires θ > 0")
    n_paths = _require_paths(n_paths)
    t0 = time.perf_counter()
    batch = simulate_batch(params, psi, X0, n_paths, seed, hbar=hbar, gamma=gamma, eta=eta, backend=backend)
    v = batch.game_value
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite game value in simulation")
    return McEstimate(float(v.mean()), float(v.std(ddof=1) / np.sqrt(n_paths)), n_paths, False, "mc", seed,
                      time.perf_counter() - t0)


# ------------------------------------------------------------------ DPP oracle

@dataclass
class GridBox:
    """Axis-aligned search box: centre and half-width for (h̄, γ̄, η̄)."""

    h_center: np.ndarray
    h_half: np.ndarray
    g_center: np.ndarray
    g_half: np.ndarray
    e_center: np.ndarray
    e_half: np.ndarray

    def contains(self, h, g, e) -> bool:
        return bool(np.all(np.abs(h - self.h_center) <= self.h_half)
                    and np.all(np.abs(g - self.g_center) <= self.g_half)
                    and np.all(np.abs(e - self.e_center) <= self.e_half))


def default_box(params: MarketParams, analytic, margin: float = 1.5, floor: float = 0.25) -> GridBox:
    """Origin-centred box sized from the analytic saddle (so the grid does not sit on it)."""
    def half(v):
        return np.full(v.shape, margin * float(np.max(np.abs(v))) + floor)
    m, d = params.m, params.d
    return GridBox(np.zeros(m), half(analytic.hstar), np.zeros(d), half(analytic.gammastar),
                   np.zeros(m), np.full(m, floor))


@dataclass
class OracleReport:
    k: int
    X: np.ndarray
    analytic_value: float
    minimax_value: float
    maximin_value: float
    gap: float
    minimax_maximin_gap: float
    stage_gaps: list = field(default_factory=list)
    argmin_h: Optional[np.ndarray] = None
    argmax_gamma: Optional[np.ndarray] = None
    argmax_eta: Optional[np.ndarray] = None
    dist_h: float = float("nan")
    dist_gamma: float = float("nan")
    dist_eta: float = float("nan")
    resolution: tuple = ()
    grid_tolerance: float = float("nan")

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _quadratic_hessian(fn, dim: int) -> np.ndarray:
    """Hessian of a quadratic function of ``dim`` variables from unit second differences (exact)."""
    E = np.eye(dim)
    f0 = fn(np.zeros(dim))
    Hm = np.empty((dim, dim))
    for i in range(dim):
        for j in range(i, dim):
            Hm[i, j] = Hm[j, i] = (fn(E[i] + E[j]) - fn(E[i]) - fn(E[j]) + f0)
    return Hm


def _lattice(R: int, dims: int) -> np.ndarray:
    g = np.linspace(-1.0, 1.0, R)
    mesh = np.meshgrid(*([g] * dims), indexing="ij")
    return np.stack([x.ravel() for x in mesh], axis=-1)


def dpp_brute_force(params: MarketParams, psi: ExplorationSchedule, qv: QuadraticValue, k: int, X,
                    box: Optional[GridBox] = None, resolution: int = 11, stages: int = 2,
                    outer_resolution: Optional[int] = None) -> OracleReport:
    """inf over h̄ of sup over (γ̄, η̄) of the Hamiltonian by nested grid refinement.

    Both the minimax and the maximin orders are computed.  Each stage
    rescans a box shrunk to two grid spacings around the incumbent.  The
    exploration mean η̄ is searched even though the analytic optimum is 0.
    """
    X = np.atleast_1d(np.asarray(X, dtype=np.float64))
    ctx = StepContext.from_value(qv, k, X, psi)
    m, d = params.m, params.d
    sad = saddle_at(params, qv, k, X)
    if box is None:
        box = default_box(params, sad)
    if not box.contains(sad.hstar, sad.gammastar, sad.etastar):
        raise ValueError("analytic saddle outside the search box; enlarge grid")
    Ro = outer_resolution or resolution
    Ri = resolution

    def H(h, ge):
        return hamiltonian_grid(params, ctx, h, ge[..., :d], ge[..., d:])

    ge_center = np.concatenate([box.g_center, box.e_center])
    ge_half = np.concatenate([box.g_half, box.e_half])
    lat_ge = _lattice(Ri, d + m)
    lat_h_in = _lattice(Ri, m)

    def sup_ge(hs):
        """hs (Nh, m) -> (values, argmax (Nh, d+m))."""
        Nh = hs.shape[0]
        c = np.tile(ge_center, (Nh, 1))
        w = np.tile(ge_half, (Nh, 1))
        for _ in range(stages):
            pts = c[:, None, :] + lat_ge[None] * w[:, None, :]
            vals = H(hs[:, None, :], pts)
            j = np.argmax(vals, axis=1)
            c = pts[np.arange(Nh), j]
            best = vals[np.arange(Nh), j]
            w = w * 2.0 / (Ri - 1) * 2.0
        return best, c

    def inf_h(ges):
        """ges (Ng, d+m) -> (values, argmin (Ng, m))."""
        Ng = ges.shape[0]
        c = np.tile(box.h_center, (Ng, 1))
        w = np.tile(box.h_half, (Ng, 1))
        for _ in range(stages):
            pts = c[:, None, :] + lat_h_in[None] * w[:, None, :]
            vals = H(pts, ges[:, None, :])
            j = np.argmin(vals, axis=1)
            c = pts[np.arange(Ng), j]
            best = vals[np.arange(Ng), j]
            w = w * 2.0 / (Ri - 1) * 2.0
        return best, c

    lat_h = _lattice(Ro, m)
    analytic = value_at(qv, k, X)
    stage_gaps = []

    # minimax: outer h grid, inner sup
    c, w = box.h_center.copy(), box.h_half.copy()
    for _ in range(stages):
        hs = c + lat_h * w
        vals, args = sup_ge(hs)
        j = int(np.argmin(vals))
        c, minimax, ge_best = hs[j], float(vals[j]), args[j]
        stage_gaps.append(abs(minimax - analytic))
        w = w * 2.0 / (Ro - 1) * 2.0
    h_best = c

    # maximin: outer (γ̄, η̄) grid, inner inf
    lat_go = _lattice(Ro, d + m) if Ro != Ri else lat_ge
    c, w = ge_center.copy(), ge_half.copy()
    for _ in range(stages):
        ges = c + lat_go * w
        vals, _ = inf_h(ges)
        j = int(np.argmax(vals))
        c, maximin = ges[j], float(vals[j])
        w = w * 2.0 / (Ro - 1) * 2.0

    # Discretisation bound: each order misses its optimum by at most ½‖Hess‖·‖δ‖²,
    # δ the half-spacing of the finest grids, so the two orders differ by at most twice that.
    hess = _quadratic_hessian(lambda z: float(H(z[:m], z[m:])), m + d + m)
    shrink = (4.0 / (min(Ro, Ri) - 1)) ** (stages - 1)
    half_sp = np.concatenate([box.h_half, ge_half]) * shrink / (min(Ro, Ri) - 1)
    grid_tol = float(np.linalg.norm(hess, 2) * np.sum(half_sp ** 2))

    return OracleReport(
        k, X, analytic, minimax, maximin, minimax - analytic, minimax - maximin, stage_gaps,
        h_best, ge_best[:d], ge_best[d:],
        float(np.linalg.norm(h_best - sad.hstar)), float(np.linalg.norm(ge_best[:d] - sad.gammastar)),
        float(np.linalg.norm(ge_best[d:])), (Ro, Ri, stages), grid_tol)
