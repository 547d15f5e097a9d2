"""Running reward of the game, Hamiltonian, auxiliary saddle function, KL penalty
and a brute-force check of the free-energy/entropy variational identity."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .model import ExplorationSchedule, MarketParams, sym
from .riccati import curvature_matrix


@dataclass(frozen=True)
class ControlTriple:
    hbar: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("hbar", "gamma", "eta"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, v)

    @classmethod
    def zeros(cls, params: MarketParams) -> "ControlTriple":
        return cls(np.zeros(params.m), np.zeros(params.d), np.zeros(params.m))


@dataclass(frozen=True)
class StepContext:
    """State and next-step value coefficients seen at step k.  P_next is symmetrised."""

    k: int
    X: np.ndarray
    P_next: np.ndarray
    p_next: np.ndarray
    r_next: float
    psi_k: np.ndarray

    def __post_init__(self):
        s = object.__setattr__
        s(self, "X", np.atleast_1d(np.asarray(self.X, dtype=np.float64)))
        s(self, "P_next", sym(np.atleast_2d(self.P_next)))
        s(self, "p_next", np.atleast_1d(np.asarray(self.p_next, dtype=np.float64)))
        s(self, "r_next", float(self.r_next))
        s(self, "psi_k", sym(np.atleast_2d(self.psi_k)))

    @classmethod
    def from_value(cls, qv, k: int, X, psi: ExplorationSchedule) -> "StepContext":
        return cls(k, X, qv.P[k + 1], qv.p[k + 1], qv.r[k + 1], psi[k])


def _check(params: MarketParams, ctx: StepContext, ctrl: ControlTriple | None = None):
    m, n, d = params.m, params.n, params.d
    if ctx.X.shape != (n,) or ctx.P_next.shape != (n, n) or ctx.p_next.shape != (n,) or ctx.psi_k.shape != (m, m):
        raise ValueError("dimension mismatch in step context")
    if ctrl is not None and (ctrl.hbar.shape != (m,) or ctrl.gamma.shape != (d,) or ctrl.eta.shape != (m,)):
        raise ValueError("dimension mismatch in control triple")


def running_reward_g(params: MarketParams, ctx: StepContext, ctrl: ControlTriple) -> float:
    """g(X, h̄, η̄, γ̄): the per-unit-time reward of the game."""
    th = params.theta
    if th <= 0:
        raise ValueError("g undefined at θ=0; use Kelly mode")
    _check(params, ctx, ctrl)
    G = params.derived.SigmaGram
    X, gam, eta = ctx.X, ctrl.gamma, ctrl.eta
    hh = ctrl.hbar + eta
    psi_inv = np.linalg.solve(ctx.psi_k, np.eye(params.m))
    xi = params.Xi
    return float(
        0.5 * hh @ G @ hh
        + 0.5 * np.trace(ctx.psi_k @ G)
        - hh @ params.a
        - 0.5 * xi @ xi
        + params.c
        - (hh @ params.A @ X - params.C @ X)
        - (hh @ params.Sigma - xi) @ gam
        - gam @ gam / (2.0 * th)
        - eta @ psi_inv @ eta / (2.0 * th * params.dt)
    )


def tilted_mean(params: MarketParams, X, gamma) -> np.ndarray:
    """μ = bΔt + B̃X + Λγ̄Δt, the conditional mean of X_{k+1} under the tilted measure."""
    dt = params.dt
    return params.b * dt + params.derived.Btilde @ X + params.Lambda @ gamma * dt


def expected_continuation(params: MarketParams, ctx: StepContext, gamma) -> float:
    """E^γ[u_{k+1}(X_{k+1}) | X_k] = ½μ'Pμ + ½tr(Λ'PΛ)Δt + μ'p + r."""
    _check(params, ctx)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    if gamma.shape != (params.d,):
        raise ValueError("dimension mismatch: gamma")
    mu = tilted_mean(params, ctx.X, gamma)
    P, L = ctx.P_next, params.Lambda
    return float(0.5 * mu @ P @ mu + 0.5 * np.trace(L.T @ P @ L) * params.dt + mu @ ctx.p_next + ctx.r_next)


def hamiltonian(params: MarketParams, ctx: StepContext, ctrl: ControlTriple) -> float:
    return params.theta * running_reward_g(params, ctx, ctrl) * params.dt + expected_continuation(params, ctx, ctrl.gamma)


def hamiltonian_grid(params: MarketParams, ctx: StepContext, h, gamma, eta) -> np.ndarray:
    """Vectorised Hamiltonian over broadcastable arrays h (..., m), gamma (..., d), eta (..., m)."""
    th, dt = params.theta, params.dt
    _check(params, ctx)
    G = params.derived.SigmaGram
    X = ctx.X
    h = np.asarray(h, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    hh = h + eta
    psi_inv = np.linalg.solve(ctx.psi_k, np.eye(params.m))
    xi = params.Xi
    drift = params.a + params.A @ X
    hS = hh @ params.Sigma
    g_dt = th * dt * (
        0.5 * np.einsum("...i,ij,...j->...", hh, G, hh) + 0.5 * np.trace(ctx.psi_k @ G) - hh @ drift
        - 0.5 * xi @ xi + params.c + params.C @ X - np.sum((hS - xi) * gamma, axis=-1)
    ) - 0.5 * dt * np.sum(gamma * gamma, axis=-1) - 0.5 * np.einsum("...i,ij,...j->...", eta, psi_inv, eta)
    mu = params.b * dt + params.derived.Btilde @ X + gamma @ params.Lambda.T * dt
    P, L = ctx.P_next, params.Lambda
    cont = 0.5 * np.einsum("...i,ij,...j->...", mu, P, mu) + 0.5 * np.trace(L.T @ P @ L) * dt + mu @ ctx.p_next + ctx.r_next
    return g_dt + cont


def aux_F(params: MarketParams, ctx: StepContext, ctrl: ControlTriple) -> float:
    """The control-dependent part of the Hamiltonian; vanishes at zero controls."""
    th, dt = params.theta, params.dt
    if th <= 0:
        raise ValueError("aux_F requires θ > 0")
    _check(params, ctx, ctrl)
    G = params.derived.SigmaGram
    X, gam, eta = ctx.X, ctrl.gamma, ctrl.eta
    hh = ctrl.hbar + eta
    calA = curvature_matrix(params, ctx.P_next)
    drift = params.b * dt + params.derived.Btilde @ X
    q = ctx.P_next @ drift + ctx.p_next
    psi_inv = np.linalg.solve(ctx.psi_k, np.eye(params.m))
    return float(
        0.5 * th * hh @ G @ hh * dt
        - th * hh @ (params.a + params.A @ X) * dt
        - th * (hh @ params.Sigma - params.Xi) @ gam * dt
        + 0.5 * gam @ calA @ gam * dt
        + gam @ params.Lambda.T @ q * dt
        - 0.5 * eta @ psi_inv @ eta
    )


def hamiltonian_remainder(params: MarketParams, ctx: StepContext) -> float:
    """Hamiltonian minus aux_F: the part that depends on the state only."""
    th, dt = params.theta, params.dt
    _check(params, ctx)
    X = ctx.X
    drift = params.b * dt + params.derived.Btilde @ X
    P, L = ctx.P_next, params.Lambda
    return float(
        0.5 * drift @ P @ drift + drift @ ctx.p_next + th * (params.c + params.C @ X) * dt
        + 0.5 * th * np.trace(ctx.psi_k @ params.derived.SigmaGram) * dt
        - 0.5 * th * params.Xi @ params.Xi * dt
        + 0.5 * np.trace(L.T @ P @ L) * dt + ctx.r_next
    )


def F_hessian_blocks(params: MarketParams, ctx: StepContext):
    """Hessians of aux_F in h̄ alone, γ̄ alone and η̄ alone."""
    th, dt = params.theta, params.dt
    G = params.derived.SigmaGram
    calA = curvature_matrix(params, ctx.P_next)
    psi_inv = sym(np.linalg.solve(ctx.psi_k, np.eye(params.m)))
    return th * G * dt, calA * dt, th * G * dt - psi_inv


def kl_penalty(params: MarketParams, gamma, eta, psi: ExplorationSchedule) -> float:
    """½Σ_k(‖γ̄_k‖²Δt + η̄_k'Ψ_k⁻¹η̄_k) for deterministic control sequences."""
    K = params.K
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1, params.d)
    eta = np.asarray(eta, dtype=np.float64).reshape(-1, params.m)
    if gamma.shape[0] != K or eta.shape[0] != K or psi.K < K:
        raise ValueError("length mismatch: control sequences must have K entries")
    quad = np.einsum("ki,kij,kj->", eta, psi.inv[:K], eta)
    return float(0.5 * (np.sum(gamma * gamma) * params.dt + quad))


def sample_log_likelihood(params: MarketParams, gamma, eta, psi: ExplorationSchedule, n_draws: int,
                          seed: int = 0) -> np.ndarray:
    """ln(dℙ^{γ̄,η̄}/dℙ) evaluated on draws from the tilted sampler.

    Per step the Girsanov factor contributes −½‖γ̄‖²Δt + γ̄'w and the
    Gaussian mean shift contributes −½η̄'Ψ⁻¹η̄ + η̄'Ψ⁻¹v, where under the
    tilted measure w ~ N(γ̄Δt, ΔtI) and v ~ N(η̄, Ψ).
    """
    K, dt = params.K, params.dt
    gamma = np.asarray(gamma, dtype=np.float64).reshape(K, params.d)
    eta = np.asarray(eta, dtype=np.float64).reshape(K, params.m)
    streams = np.arange(n_draws, dtype=np.uint64)
    zw = _kernels.normals(seed, streams, _kernels.CH_W, K, params.d)
    zv = _kernels.normals(seed, streams, _kernels.CH_V, K, params.m)
    w = gamma[None] * dt + np.sqrt(dt) * zw
    v = eta[None] + np.einsum("kij,nkj->nki", psi.chol[:K], zv)
    girsanov = np.einsum("kd,nkd->n", gamma, w) - 0.5 * np.sum(gamma * gamma) * dt
    shift_quad = np.einsum("ki,kij,kj->", eta, psi.inv[:K], eta)
    shift = np.einsum("ki,kij,nkj->n", eta, psi.inv[:K], v) - 0.5 * shift_quad
    return girsanov + shift


# ------------------------------------------------------------ variational check

@dataclass
class DualityReport:
    free_energy: float
    best_dual_value: float
    gap: float
    argmax_tilt: np.ndarray
    reference_tilt: np.ndarray
    max_atom_discrepancy: float
    gap_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "free_energy": self.free_energy,
            "best_dual_value": self.best_dual_value,
            "gap": self.gap,
            "argmax_tilt": self.argmax_tilt.tolist(),
            "reference_tilt": self.reference_tilt.tolist(),
            "max_atom_discrepancy": self.max_atom_discrepancy,
            "gap_trace": list(self.gap_trace),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _dual_value(z, psi, logp):
    """E^q[ψ] − KL(q‖p) for q ∝ p·e^z, vectorised over the leading axes of z."""
    lq = logp + z
    lq = lq - logsumexp(lq, axis=-1, keepdims=True)
    q = np.exp(lq)
    return np.sum(q * (psi - (lq - logp)), axis=-1)


def duality_brute_force(values, probs=None, resolution: int = 1000, levels: int = 4,
                        sweeps: int = 50) -> DualityReport:
    """Grid search of sup_q {E^q[ψ] − KL(q‖p)} over measures on the support of p.

    Candidate measures are q ∝ p·e^z.  Each level scans every free
    coordinate of z on a ``resolution``-point grid (coordinate sweeps until no
    improvement), then shrinks the window around the incumbent.  The
    objective is invariant to a common shift of z; every coordinate is
    scanned anyway because pinning one slows the sweeps badly.
    """
    psi = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if psi.size == 0:
        raise ValueError("empty support")
    if probs is None:
        probs = np.full(psi.size, 1.0 / psi.size)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != psi.shape or np.any(probs <= 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("probabilities must be positive and sum to 1")
    logp = np.log(probs)
    free_energy = float(logsumexp(psi, b=probs))
    reference = np.exp(logp + psi - free_energy)
    z = np.zeros(psi.size)
    best = float(_dual_value(z, psi, logp))
    trace = [free_energy - best]
    width = 2.0 * (float(np.ptp(psi)) + 1.0)
    grid = np.linspace(-1.0, 1.0, resolution)
    for _ in range(levels):
        for _ in range(sweeps):
            improved = False
            for i in range(psi.size):
                cand = np.repeat(z[None], resolution, axis=0)
                cand[:, i] = z[i] + width * grid
                vals = _dual_value(cand, psi, logp)
                j = int(np.argmax(vals))
                if vals[j] > best:
                    improved = improved or (vals[j] - best) > 1e-15 * max(1.0, abs(best))
                    best = float(vals[j])
                    z = cand[j]
            if not improved:
                break
        trace.append(free_energy - best)
        width *= 8.0 / resolution
    lq = logp + z
    tilt = np.exp(lq - logsumexp(lq))
    return DualityReport(free_energy, best, free_energy - best, tilt, reference,
                         float(np.max(np.abs(tilt - reference))), trace)
