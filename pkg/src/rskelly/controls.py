"""Closed-form saddle controls, the Kelly portfolio and fractional-Kelly decompositions."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import AffinePolicy, MarketParams, sym
from .riccati import (
    QuadraticValue,
    SaddleConditionError,
    check_saddle_conditions,
    curvature_matrix,
    dual_gain,
    helper_matrices,
    projector,
)

RECOMBINE_TOL = 1e-8


@dataclass(frozen=True)
class SaddleControls:
    hstar: np.ndarray
    gammastar: np.ndarray
    etastar: np.ndarray


@dataclass
class FksDecomposition:
    """h* written as Σ_j weight_j · component_j.

    ``variant`` is one of rotated_I, rotated_II, penalized.  The penalized
    variant has components kelly and penalty with unit weights.
    """

    components: dict
    weights: dict
    variant: str
    hstar: np.ndarray

    @property
    def kelly_component(self):
        return self.components.get("kelly")

    @property
    def bench_component(self):
        return self.components.get("bench")

    @property
    def ihp_component(self):
        return self.components.get("ihp")

    @property
    def mix_weights(self) -> tuple:
        return tuple(self.weights[k] for k in self.components)

    def recombine(self) -> np.ndarray:
        return sum(self.weights[k] * v for k, v in self.components.items())

    @property
    def residual(self) -> float:
        return float(np.linalg.norm(self.recombine() - self.hstar) / max(1.0, np.linalg.norm(self.hstar)))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "components": {k: v.tolist() for k, v in self.components.items()},
            "weights": dict(self.weights),
            "hstar": self.hstar.tolist(),
            "recombination_residual": self.residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _prep(params: MarketParams, X, P_next, p_next):
    X = np.atleast_1d(np.asarray(X, dtype=np.float64))
    P_next = sym(np.atleast_2d(np.asarray(P_next, dtype=np.float64)))
    p_next = np.atleast_1d(np.asarray(p_next, dtype=np.float64))
    if X.shape != (params.n,) or P_next.shape != (params.n, params.n) or p_next.shape != (params.n,):
        raise ValueError("dimension mismatch")
    return X, P_next, p_next


def _q(params: MarketParams, X, P_next, p_next):
    """q = P(bΔt + B̃X) + p: gradient of the continuation at the untilted mean."""
    return P_next @ (params.b * params.dt + params.derived.Btilde @ X) + p_next


def _require(params, k, P_next, psi_k):
    if psi_k is None:
        return
    rep = check_saddle_conditions(params, P_next, psi_k)
    if not rep.assumption3:
        raise SaddleConditionError(f"saddle condition failed at step {k}: " + ", ".join(rep.failed_blocks()), rep, k)


def optimal_controls_primary(params: MarketParams, k: int, X, P_next, p_next, psi_k=None) -> SaddleControls:
    """h* and γ* via ℬ⁻¹; η* = 0.  Pass ``psi_k`` to enforce the saddle conditions."""
    X, P_next, p_next = _prep(params, X, P_next, p_next)
    _require(params, k, P_next, psi_k)
    calA = curvature_matrix(params, P_next)
    if np.linalg.eigvalsh(calA)[-1] >= 0:
        raise SaddleConditionError(f"curvature condition violated at step {k}",
                                   check_saddle_conditions(params, P_next, np.eye(params.m)), k)
    th = params.theta
    S, L = params.Sigma, params.Lambda
    Gi = params.derived.SigmaGramInv
    calB = sym(th * projector(params) - calA)
    drift = params.a + params.A @ X
    q = _q(params, X, P_next, p_next)
    forcing = L.T @ q + th * params.Xi
    Binv_St = np.linalg.solve(calB, S.T)
    h = Gi @ ((np.eye(params.m) - th * S @ Binv_St @ Gi) @ drift + S @ np.linalg.solve(calB, forcing))
    g = np.linalg.solve(calB, -th * S.T @ Gi @ drift + forcing)
    return SaddleControls(h, g, np.zeros(params.m))


def optimal_controls_alt(params: MarketParams, k: int, X, P_next, p_next, psi_k=None) -> SaddleControls:
    """h* and γ* via 𝒞⁻¹ and 𝒜⁻¹; η* = 0.

    h* = 𝒞⁻¹[(a + AX) − Σ𝒜⁻¹(θΞ + Λ'q)]/(θ+1) and
    γ* = 𝒜⁻¹{θΣ'𝒞⁻¹(a+AX)/(θ+1) − (I + θΣ'𝒞⁻¹Σ𝒜⁻¹/(θ+1))(θΞ + Λ'q)},
    with q = P(bΔt + B̃X) + p.
    """
    X, P_next, p_next = _prep(params, X, P_next, p_next)
    _require(params, k, P_next, psi_k)
    th = params.theta
    hm = helper_matrices(params, P_next)
    S, L = params.Sigma, params.Lambda
    if np.linalg.eigvalsh(hm.calC)[0] <= 0:
        raise SaddleConditionError(f"risk-resistance matrix not positive definite at step {k}",
                                   check_saddle_conditions(params, P_next, np.eye(params.m)), k)
    drift = params.a + params.A @ X
    q = _q(params, X, P_next, p_next)
    f = th * params.Xi + L.T @ q
    Ai = hm.calA_inv
    Ci_drift = np.linalg.solve(hm.calC, drift)
    Ci_S = np.linalg.solve(hm.calC, S)
    h = (Ci_drift - Ci_S @ Ai @ f) / (th + 1.0)
    inner = th * S.T @ Ci_drift / (th + 1.0) - (f + th * S.T @ Ci_S @ Ai @ f / (th + 1.0))
    g = Ai @ inner
    return SaddleControls(h, g, np.zeros(params.m))


def kelly_control(params: MarketParams, X) -> np.ndarray:
    """(ΣΣ')⁻¹(a + AX); accepts a single state or a batch."""
    X = np.asarray(X, dtype=np.float64)
    drift = X @ params.A.T + params.a
    return drift @ params.derived.SigmaGramInv


def reference_portfolios(params: MarketParams, k: int, X, P_next, p_next):
    """(h_kelly, h_bench, h_ihp)."""
    X, P_next, p_next = _prep(params, X, P_next, p_next)
    Gi = params.derived.SigmaGramInv
    S = params.Sigma
    h_kelly = Gi @ (params.a + params.A @ X)
    h_bench = Gi @ S @ params.Xi
    h_ihp = Gi @ S @ params.Lambda.T @ _q(params, X, P_next, p_next)
    return h_kelly, h_bench, h_ihp


def _finish(params, components, weights, variant, hstar):
    dec = FksDecomposition(components, weights, variant, np.asarray(hstar, dtype=np.float64))
    if dec.residual > RECOMBINE_TOL:
        raise ValueError(f"inconsistent saddle inputs (recombination residual {dec.residual:.3g})")
    return dec


def decompose_penalized_kelly(params: MarketParams, saddle: SaddleControls, X) -> FksDecomposition:
    """h* = h^Kelly + (ΣΣ')⁻¹Σγ*."""
    X = np.atleast_1d(np.asarray(X, dtype=np.float64))
    hk = kelly_control(params, X)
    pen = params.derived.SigmaGramInv @ params.Sigma @ saddle.gammastar
    return _finish(params, {"kelly": hk, "penalty": pen}, {"kelly": 1.0, "penalty": 1.0}, "penalized", saddle.hstar)


def _mix(theta):
    return {"kelly": 1.0 / (theta + 1.0), "bench": theta / (theta + 1.0), "ihp": theta / (theta + 1.0)}


def decompose_fks_I(params: MarketParams, k: int, X, P_next, p_next) -> FksDecomposition:
    """Kelly, benchmark and hedging components rotated by 𝒞⁻¹ and 𝒜⁻¹.

    kelly = 𝒞⁻¹ΣΣ'h^Kelly, bench = −𝒞⁻¹Σ𝒜⁻¹Ξ, ihp = −𝒞⁻¹Σ𝒜⁻¹Λ'q/θ, mixed
    with weights (1, θ, θ)/(θ+1).  At P = 0 these reduce to h^Kelly, h^Bench
    and h^IHP/θ.  At θ = 0 the weights are (1, 0, 0) and a non-zero hedging
    demand cannot be represented, which raises.
    """
    X, P_next, p_next = _prep(params, X, P_next, p_next)
    th = params.theta
    hm = helper_matrices(params, P_next)
    S = params.Sigma
    G = params.derived.SigmaGram
    hk, _, _ = reference_portfolios(params, k, X, P_next, p_next)
    Lq = params.Lambda.T @ _q(params, X, P_next, p_next)
    CiS_Ai = np.linalg.solve(hm.calC, S) @ hm.calA_inv
    kelly = np.linalg.solve(hm.calC, G @ hk)
    bench = -CiS_Ai @ params.Xi
    if th > 0:
        ihp = -CiS_Ai @ Lq / th
    else:
        if np.linalg.norm(CiS_Ai @ Lq) > 1e-12 * max(1.0, np.linalg.norm(kelly)):
            raise ValueError("hedging component undefined at θ = 0 with non-zero Λ'q")
        ihp = np.zeros(params.m)
    hstar = optimal_controls_alt(params, k, X, P_next, p_next).hstar
    return _finish(params, {"kelly": kelly, "bench": bench, "ihp": ihp}, _mix(th), "rotated_I", hstar)


def decompose_fks_II(params: MarketParams, k: int, X, P_next, p_next) -> FksDecomposition:
    """Kelly, benchmark and hedging components expressed through ℬ⁻¹.

    At θ = 0 the hedging scaling (θ+1)/θ is undefined; the penalized-Kelly
    decomposition is returned instead (variant 'penalized').
    """
    X, P_next, p_next = _prep(params, X, P_next, p_next)
    th = params.theta
    sad = optimal_controls_primary(params, k, X, P_next, p_next)
    if th == 0:
        return decompose_penalized_kelly(params, sad, X)
    S = params.Sigma
    Gi = params.derived.SigmaGramInv
    calB = sym(th * projector(params) - curvature_matrix(params, P_next))
    hk, _, _ = reference_portfolios(params, k, X, P_next, p_next)
    GiS_Bi = Gi @ S @ np.linalg.inv(calB)
    Lq = params.Lambda.T @ _q(params, X, P_next, p_next)
    kelly = (th + 1.0) * (hk - th * GiS_Bi @ S.T @ hk)
    bench = (th + 1.0) * GiS_Bi @ params.Xi
    ihp = (th + 1.0) / th * GiS_Bi @ Lq
    return _finish(params, {"kelly": kelly, "bench": bench, "ihp": ihp}, _mix(th), "rotated_II", sad.hstar)


# ------------------------------------------------------------ affine saddle policy

@dataclass
class SaddleGains:
    """Per-step affine saddle laws h* = D_kX + d_k and γ* = E_kX + e_k."""

    D: np.ndarray
    dvec: np.ndarray
    E: np.ndarray
    evec: np.ndarray

    def hbar_policy(self) -> AffinePolicy:
        return AffinePolicy(self.D, self.dvec, tag="analytic-optimal")

    def gamma_policy(self) -> AffinePolicy:
        return AffinePolicy(self.E, self.evec, tag="analytic-optimal")


def saddle_gains(params: MarketParams, qv: QuadraticValue) -> SaddleGains:
    """Affine coefficients of the saddle controls along a solved value function."""
    K, m, n, d = params.K, params.m, params.n, params.d
    D = np.empty((K, m, n))
    dv = np.empty((K, m))
    E = np.empty((K, d, n))
    ev = np.empty((K, d))
    Gi = params.derived.SigmaGramInv
    S = params.Sigma
    for k in range(K):
        Kf, kf = dual_gain(params, qv.P[k + 1], qv.p[k + 1])
        E[k], ev[k] = Kf, kf
        D[k] = Gi @ (params.A + S @ Kf)
        dv[k] = Gi @ (params.a + S @ kf)
    return SaddleGains(D, dv, E, ev)


def kelly_gains(params: MarketParams):
    """(D, d) of the Kelly policy, identical at every step."""
    Gi = params.derived.SigmaGramInv
    D = np.repeat((Gi @ params.A)[None], params.K, axis=0)
    dv = np.repeat((Gi @ params.a)[None], params.K, axis=0)
    return D, dv


def optimal_policy(params: MarketParams, qv: QuadraticValue) -> AffinePolicy:
    return saddle_gains(params, qv).hbar_policy()


def kelly_policy(params: MarketParams) -> AffinePolicy:
    D, dv = kelly_gains(params)
    return AffinePolicy(D, dv, tag="analytic-optimal")


def saddle_at(params: MarketParams, qv: QuadraticValue, k: int, X) -> SaddleControls:
    return optimal_controls_primary(params, k, X, qv.P[k + 1], qv.p[k + 1])
