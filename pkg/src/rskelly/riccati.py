"""Backward recursion for the quadratic value function and the saddle-condition checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ExplorationSchedule, MarketParams, pd_margin, sym


class CurvatureError(ValueError):
    """𝒜 = Λ'PΛΔt − I is singular."""


class SaddleConditionError(RuntimeError):
    """A saddle-point condition failed; ``step`` and ``report`` locate it."""

    def __init__(self, message, report: "ConditionReport", step: Optional[int] = None):
        super().__init__(message)
        self.report = report
        self.step = step


@dataclass(frozen=True)
class HelperMatrices:
    calA: np.ndarray
    calB: np.ndarray
    calC: Optional[np.ndarray]
    calA_inv: Optional[np.ndarray]


@dataclass(frozen=True)
class ConditionReport:
    """Both condition sets with their minimum-eigenvalue margins.

    ``assumption3`` is the gate used by :func:`solve` (−𝒜 ≻ 0 and
    Ψ⁻¹ − θΣΣ'Δt ≻ 0); ``riskresist`` combines −𝒜 ≻ 0, 𝒞 ≻ 0 and
    Ψ⁻¹ − θΣ(I − θ𝒜⁻¹)Σ'Δt ≻ 0.
    """

    blockA: bool
    blockA_margin: float
    blockB: bool
    blockB_margin: float
    riskresist_C: bool
    riskresist_C_margin: float
    riskresist_eta: bool
    riskresist_eta_margin: float

    @property
    def assumption3(self) -> bool:
        return self.blockA and self.blockB

    @property
    def riskresist(self) -> bool:
        return self.blockA and self.riskresist_C and self.riskresist_eta

    @property
    def equivalence_flag(self) -> bool:
        return self.assumption3 == self.riskresist

    def failed_blocks(self) -> list[str]:
        names = []
        if not self.blockA:
            names.append("assumption3_blockA")
        if not self.blockB:
            names.append("assumption3_blockB")
        return names

    def to_dict(self) -> dict:
        return {
            "assumption3_blockA": {"pass": self.blockA, "margin": self.blockA_margin},
            "assumption3_blockB": {"pass": self.blockB, "margin": self.blockB_margin},
            "riskresist_C": {"pass": self.riskresist_C, "margin": self.riskresist_C_margin},
            "riskresist_eta": {"pass": self.riskresist_eta, "margin": self.riskresist_eta_margin},
            "assumption3": self.assumption3,
            "riskresist": self.riskresist,
            "equivalence_flag": self.equivalence_flag,
        }


@dataclass
class QuadraticValue:
    """u_k(X) = ½X'P_kX + X'p_k + r_k for k = 0..K."""

    P: np.ndarray
    p: np.ndarray
    r: np.ndarray
    reports: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.P.shape[0] - 1


def curvature_matrix(params: MarketParams, P_next) -> np.ndarray:
    """𝒜 = Λ'PΛΔt − I_d."""
    P_next = sym(P_next)
    L = params.Lambda
    return sym(L.T @ P_next @ L * params.dt) - np.eye(params.d)


def projector(params: MarketParams) -> np.ndarray:
    """Σ'(ΣΣ')⁻¹Σ, the orthogonal projector onto the row space of Σ."""
    S = params.Sigma
    return sym(S.T @ np.linalg.solve(params.derived.SigmaGram, S))


def _invert_curvature(calA: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(calA)
    scale = max(1.0, float(np.max(np.abs(ev))))
    if np.min(np.abs(ev)) <= 1e-13 * scale:
        raise CurvatureError("curvature condition violated (𝒜 not invertible)")
    return sym(np.linalg.solve(calA, np.eye(calA.shape[0])))


def helper_matrices(params: MarketParams, P_next) -> HelperMatrices:
    """𝒜, ℬ = θΣ'(ΣΣ')⁻¹Σ − 𝒜 and 𝒞 = Σ(I − θ𝒜⁻¹)Σ'/(θ+1)."""
    th = params.theta
    calA = curvature_matrix(params, P_next)
    calB = sym(th * projector(params) - calA)
    Ainv = _invert_curvature(calA)
    calC = sym(params.Sigma @ (np.eye(params.d) - th * Ainv) @ params.Sigma.T / (th + 1.0))
    return HelperMatrices(calA, calB, calC, Ainv)


def check_saddle_conditions(params: MarketParams, P_next, psi_k) -> ConditionReport:
    """Evaluate Assumption 3 and the risk-resistance pair with eigenvalue margins."""
    th, dt = params.theta, params.dt
    G = params.derived.SigmaGram
    psi_k = sym(np.atleast_2d(psi_k))
    psi_inv = sym(np.linalg.solve(psi_k, np.eye(params.m)))
    calA = curvature_matrix(params, P_next)
    okA, mA = pd_margin(-calA)
    okB, mB = pd_margin(psi_inv - th * G * dt)
    try:
        Ainv = _invert_curvature(calA)
    except CurvatureError:
        nan = float("nan")
        return ConditionReport(okA, mA, okB, mB, False, nan, False, nan)
    R = np.eye(params.d) - th * Ainv
    SRS = sym(params.Sigma @ R @ params.Sigma.T)
    okC, mC = pd_margin(SRS / (th + 1.0))
    okE, mE = pd_margin(psi_inv - th * SRS * dt)
    return ConditionReport(okA, mA, okB, mB, okC, mC, okE, mE)


def _forcing(params: MarketParams, P_next, p_next):
    """M1 = −θΣ'(ΣΣ')⁻¹A + Λ'PB̃ and v1 = −θΣ'(ΣΣ')⁻¹a + Λ'(PbΔt + p) + θΞ."""
    th, dt = params.theta, params.dt
    S, L = params.Sigma, params.Lambda
    Gi = params.derived.SigmaGramInv
    Bt = params.derived.Btilde
    P_next = sym(P_next)
    M1 = -th * S.T @ Gi @ params.A + L.T @ P_next @ Bt
    v1 = -th * S.T @ Gi @ params.a + L.T @ (P_next @ params.b * dt + p_next) + th * params.Xi
    return M1, v1


def dual_gain(params: MarketParams, P_next, p_next):
    """(𝔎, 𝔨) with γ* = 𝔎X + 𝔨.  Test-facing accessor for the internal gain."""
    calB = helper_matrices(params, P_next).calB
    M1, v1 = _forcing(params, P_next, np.asarray(p_next, dtype=np.float64))
    return np.linalg.solve(calB, M1), np.linalg.solve(calB, v1)


def quadF_coeffs(params: MarketParams, P_next, p_next):
    """(𝔔, 𝔮, 𝔩): the saddle value of the auxiliary function is ½X'𝔔X + X'𝔮 + 𝔩."""
    th, dt = params.theta, params.dt
    Gi = params.derived.SigmaGramInv
    A, a = params.A, params.a
    p_next = np.asarray(p_next, dtype=np.float64)
    calB = sym(th * projector(params) - curvature_matrix(params, P_next))
    M1, v1 = _forcing(params, P_next, p_next)
    BM = np.linalg.solve(calB, M1)
    Bv = np.linalg.solve(calB, v1)
    Qf = sym(-th * A.T @ Gi @ A * dt + M1.T @ BM * dt)
    qf = -th * A.T @ Gi @ a * dt + M1.T @ Bv * dt
    lf = float(-0.5 * th * a @ Gi @ a * dt + 0.5 * v1 @ Bv * dt)
    return Qf, qf, lf


def step_back(params: MarketParams, P_next, p_next, r_next, psi_k, check: bool = True):
    """One backward step of the value recursion; returns (P_k, p_k, r_k)."""
    th, dt = params.theta, params.dt
    P_next = sym(P_next)
    p_next = np.asarray(p_next, dtype=np.float64)
    psi_k = sym(np.atleast_2d(psi_k))
    if check:
        rep = check_saddle_conditions(params, P_next, psi_k)
        if not rep.assumption3:
            raise SaddleConditionError("saddle condition failed: " + ", ".join(rep.failed_blocks()), rep)
    Bt = params.derived.Btilde
    b, L = params.b, params.Lambda
    Qf, qf, lf = quadF_coeffs(params, P_next, p_next)
    P = sym(Qf + Bt.T @ P_next @ Bt)
    p = qf + (Bt.T @ (P_next @ b + p_next / dt) + th * params.C) * dt
    tr_psi = float(np.trace(psi_k @ params.derived.SigmaGram))
    tr_lam = float(np.trace(L.T @ P_next @ L))
    r = float(r_next) + lf + (0.5 * b @ P_next @ b * dt + b @ p_next + th * params.c
                              + 0.5 * th * tr_psi - 0.5 * th * params.Xi @ params.Xi + 0.5 * tr_lam) * dt
    return P, p, r


def solve(params: MarketParams, psi: ExplorationSchedule) -> QuadraticValue:
    """Full backward sweep from the zero terminal triple; fails fast on the first violated step."""
    if params.theta <= 0:
        raise ValueError("solve requires theta > 0; theta = 0 is Kelly mode")
    if psi.K < params.K:
        raise ValueError("exploration schedule shorter than the horizon")
    params.check_dims()
    K, n = params.K, params.n
    P = np.zeros((K + 1, n, n))
    p = np.zeros((K + 1, n))
    r = np.zeros(K + 1)
    reports: list = [None] * K
    for k in range(K - 1, -1, -1):
        rep = check_saddle_conditions(params, P[k + 1], psi[k])
        reports[k] = rep
        if not rep.assumption3:
            raise SaddleConditionError(
                f"saddle condition failed at step {k}: " + ", ".join(rep.failed_blocks()), rep, step=k)
        P[k], p[k], r[k] = step_back(params, P[k + 1], p[k + 1], r[k + 1], psi[k], check=False)
    return QuadraticValue(P, p, r, reports)


def value_at(qv: QuadraticValue, k: int, X) -> np.ndarray | float:
    """u_k(X); X may be a single state (n,) or a batch (N, n)."""
    if not 0 <= k <= qv.K:
        raise IndexError(f"step {k} outside 0..{qv.K}")
    P = sym(qv.P[k])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return float(0.5 * X @ P @ X + X @ qv.p[k] + qv.r[k])
    return 0.5 * np.einsum("ij,jk,ik->i", X, P, X) + X @ qv.p[k] + qv.r[k]


@dataclass(frozen=True)
class CriterionValue:
    u0: float
    inf_I: float
    sup_J: float

    @property
    def log_inf_I(self) -> float:
        return self.u0


def criterion_from_value(qv: QuadraticValue, X0, theta: float) -> CriterionValue:
    """inf I = exp(u_0(X0)) and sup J = −u_0(X0)/θ; u_0 is always returned for log-space use."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    u0 = value_at(qv, 0, X0)
    with np.errstate(over="ignore"):
        inf_I = float(np.exp(u0))
    return CriterionValue(u0, inf_I, -u0 / theta)


def logdet_offset(params: MarketParams, qv: QuadraticValue) -> float:
    """Σ_k [−½ ln det(I − Λ'P_{k+1}ΛΔt) − ½ tr(Λ'P_{k+1}ΛΔt)].

    The recursion for r_k carries the second-order term ½tr(Λ'PΛ)Δt; the
    exact Gaussian expectation of the exponential-quadratic continuation has
    −½ ln det(I − Λ'PΛΔt) in its place.  P_k, p_k and the controls are the
    same either way, so u_0 + logdet_offset is the exact log of inf I.
    """
    L, dt = params.Lambda, params.dt
    total = 0.0
    for k in range(qv.K):
        M = sym(L.T @ qv.P[k + 1] @ L * dt)
        sign, ld = np.linalg.slogdet(np.eye(params.d) - M)
        if sign <= 0:
            raise CurvatureError("I − Λ'PΛΔt is not positive definite")
        total += -0.5 * ld - 0.5 * np.trace(M)
    return float(total)


def value_to_csv(qv: QuadraticValue, path) -> None:
    """One row per k: flattened P_k (row-major), p_k, r_k and condition margins."""
    K, n = qv.K, qv.P.shape[1]
    fmt = "%.17g"
    head = ["k"] + [f"P_{i}{j}" for i in range(n) for j in range(n)] + [f"p_{i}" for i in range(n)] + ["r"]
    head += ["blockA_margin", "blockB_margin", "riskresist_C_margin", "riskresist_eta_margin"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(head)
        for k in range(K + 1):
            row = [k] + [fmt % v for v in qv.P[k].ravel()] + [fmt % v for v in qv.p[k]] + [fmt % qv.r[k]]
            rep = qv.reports[k] if k < K and qv.reports else None
            if rep is None:
                row += [""] * 4
            else:
                row += [fmt % rep.blockA_margin, fmt % rep.blockB_margin,
                        fmt % rep.riskresist_C_margin, fmt % rep.riskresist_eta_margin]
            wr.writerow(row)
