"""Model parameters, derived constants and exploration schedules."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np

SPD_REL_TOL = 1e-12


def _frozen(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    if ndim == 0:
        arr = arr.reshape(())
    elif arr.ndim != ndim:
        if ndim == 1 and arr.ndim == 0:
            arr = arr.reshape(1)
        elif ndim == 2 and arr.ndim == 1:
            arr = arr.reshape(1, -1)
    arr.setflags(write=False)
    return arr


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetric part ½(M + M')."""
    M = np.asarray(M, dtype=np.float64)
    return 0.5 * (M + M.T)


def min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(M))[0])


def spd_margin(M: np.ndarray) -> tuple[bool, float]:
    """(is_spd, min eigenvalue) using the relative threshold SPD_REL_TOL."""
    ev = np.linalg.eigvalsh(sym(M))
    lo, hi = float(ev[0]), float(ev[-1])
    return (hi > 0.0 and lo > SPD_REL_TOL * hi), lo


def pd_margin(M: np.ndarray) -> tuple[bool, float]:
    """Strict positive definiteness with an absolute zero threshold.

    Used for the saddle-condition blocks, whose margins can legitimately be
    small compared with the largest eigenvalue.
    """
    lo = min_eig(M)
    return lo > 0.0, lo


@dataclass(frozen=True)
class MarketParams:
    """All model coefficients.

    Vectors are 1-D arrays (columns); ``C`` is the benchmark factor loading
    and is transposed at use sites.  ``spanned`` selects d = n+m instead of
    n+m+1.  Arrays are copied and made read-only on construction.
    """

    a: np.ndarray
    A: np.ndarray
    Sigma: np.ndarray
    b: np.ndarray
    B: np.ndarray
    Lambda: np.ndarray
    c: float
    C: np.ndarray
    Xi: np.ndarray
    dt: float
    K: int
    theta: float
    spanned: bool = False

    def __post_init__(self):
        s = object.__setattr__
        s(self, "a", _frozen(self.a, 1))
        s(self, "A", _frozen(self.A, 2))
        s(self, "Sigma", _frozen(self.Sigma, 2))
        s(self, "b", _frozen(self.b, 1))
        s(self, "B", _frozen(self.B, 2))
        s(self, "Lambda", _frozen(self.Lambda, 2))
        s(self, "C", _frozen(self.C, 1))
        s(self, "Xi", _frozen(self.Xi, 1))
        s(self, "c", float(self.c))
        s(self, "dt", float(self.dt))
        s(self, "K", int(self.K))
        s(self, "theta", float(self.theta))
        s(self, "spanned", bool(self.spanned))

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def d(self) -> int:
        return self.Sigma.shape[1]

    @property
    def d_expected(self) -> int:
        return self.n + self.m + (0 if self.spanned else 1)

    @cached_property
    def derived(self) -> "DerivedConstants":
        return DerivedConstants.from_params(self)

    def with_(self, **changes) -> "MarketParams":
        return replace(self, **changes)

    def check_dims(self) -> None:
        """Raise ValueError if matrix shapes disagree with (m, n, d)."""
        problems = _dimension_problems(self)
        if problems:
            raise ValueError("dimension mismatch: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "a": self.a.tolist(), "A": self.A.tolist(), "Sigma": self.Sigma.tolist(),
            "b": self.b.tolist(), "B": self.B.tolist(), "Lambda": self.Lambda.tolist(),
            "c": self.c, "C": self.C.tolist(), "Xi": self.Xi.tolist(),
            "spanned": self.spanned,
        }


@dataclass(frozen=True)
class DerivedConstants:
    Btilde: np.ndarray
    SigmaGram: np.ndarray
    SigmaGramInv: np.ndarray
    T: float

    @classmethod
    def from_params(cls, p: MarketParams) -> "DerivedConstants":
        Bt = np.eye(p.n) + p.B * p.dt
        G = p.Sigma @ p.Sigma.T
        G = 0.5 * (G + G.T)
        Ginv = np.linalg.solve(G, np.eye(p.m))
        Ginv = 0.5 * (Ginv + Ginv.T)
        for arr in (Bt, G, Ginv):
            arr.setflags(write=False)
        return cls(Bt, G, Ginv, p.K * p.dt)


def _dimension_problems(p: MarketParams) -> list[str]:
    m, n, d = p.m, p.n, p.d
    want = {
        "A": (p.A.shape, (m, n)),
        "Sigma": (p.Sigma.shape, (m, p.d_expected)),
        "B": (p.B.shape, (n, n)),
        "Lambda": (p.Lambda.shape, (n, d)),
        "C": (p.C.shape, (n,)),
        "Xi": (p.Xi.shape, (d,)),
    }
    return [f"{k} has shape {got}, expected {exp}" for k, (got, exp) in want.items() if got != exp]


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    min_eig_gram: float = float("nan")

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]
        return "\n".join(lines)


def validate_params(params: MarketParams) -> ValidationReport:
    """Check dimensions, SPD of ΣΣ', dt > 0 and K >= 1.  Never raises."""
    checks = []
    problems = _dimension_problems(params)
    checks.append(Check("dimensions", not problems, "; ".join(problems) or f"m={params.m} n={params.n} d={params.d}"))
    lo = float("nan")
    if params.Sigma.ndim == 2 and params.Sigma.shape[0] == params.m:
        G = params.Sigma @ params.Sigma.T
        ok, lo = spd_margin(G)
        checks.append(Check("SigmaGram SPD", ok, f"min eigenvalue {lo:.6g}" if ok else f"ΣΣ' singular (min eigenvalue {lo:.6g})"))
    else:
        checks.append(Check("SigmaGram SPD", False, "Sigma has wrong row count"))
    checks.append(Check("dt > 0", params.dt > 0 and np.isfinite(params.dt), f"dt={params.dt}"))
    checks.append(Check("K >= 1", params.K >= 1, f"K={params.K}"))
    checks.append(Check("theta >= 0", params.theta >= 0 and np.isfinite(params.theta), f"theta={params.theta}"))
    finite = all(np.all(np.isfinite(x)) for x in (params.a, params.A, params.Sigma, params.b, params.B,
                                                  params.Lambda, params.C, params.Xi)) and np.isfinite(params.c)
    checks.append(Check("finite coefficients", bool(finite)))
    return ValidationReport(tuple(checks), lo)


class ExplorationSchedule:
    """Per-step exploration covariances Ψ_k (deterministic, SPD).

    Cholesky factors and inverses are computed once at construction.
    """

    def __init__(self, psi):
        psi = np.array(psi, dtype=np.float64, copy=True)
        if psi.ndim == 2:
            psi = psi[None]
        if psi.ndim != 3 or psi.shape[1] != psi.shape[2]:
            raise ValueError("psi must be a sequence of square matrices")
        K, m, _ = psi.shape
        chol = np.empty_like(psi)
        inv = np.empty_like(psi)
        for k in range(K):
            S = sym(psi[k])
            ok, _ = spd_margin(S)
            if not ok:
                raise ValueError(f"exploration covariance not SPD at step {k}")
            psi[k] = S
            chol[k] = np.linalg.cholesky(S)
            inv[k] = sym(np.linalg.solve(S, np.eye(m)))
        for arr in (psi, chol, inv):
            arr.setflags(write=False)
        self.psi = psi
        self.chol = chol
        self.inv = inv

    @property
    def K(self) -> int:
        return self.psi.shape[0]

    @property
    def m(self) -> int:
        return self.psi.shape[1]

    def __len__(self):
        return self.K

    def __getitem__(self, k):
        return self.psi[k]

    def scaled(self, factor: float) -> "ExplorationSchedule":
        return ExplorationSchedule(self.psi * factor)

    def traces(self, SigmaGram: np.ndarray) -> np.ndarray:
        """tr(Ψ_k ΣΣ') for every k."""
        return np.einsum("kij,ji->k", self.psi, SigmaGram)

    @classmethod
    def constant(cls, psi, K: int) -> "ExplorationSchedule":
        psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
        return cls(np.repeat(psi[None], K, axis=0))

    @classmethod
    def fraction_of_bound(cls, params: MarketParams, fraction: float) -> "ExplorationSchedule":
        """Ψ = fraction·(θΣΣ'Δt)⁻¹, so fraction < 1 is admissible and 0.5 is 'half the bound'."""
        if params.theta <= 0:
            raise ValueError("the exploration bound is vacuous at theta = 0")
        bound = params.derived.SigmaGramInv / (params.theta * params.dt)
        return cls.constant(fraction * bound, params.K)

    def __repr__(self):
        return f"ExplorationSchedule(K={self.K}, m={self.m})"


@dataclass(frozen=True)
class BoundReport:
    passed: bool
    min_eig_psi: float
    margin: float


def exploration_bound_ok(params: MarketParams, psi_k) -> BoundReport:
    """Whether Ψ_k⁻¹ − θΣΣ'Δt is positive definite."""
    psi_k = sym(np.atleast_2d(np.asarray(psi_k, dtype=np.float64)))
    ok, lo_psi = spd_margin(psi_k)
    if not ok:
        raise ValueError("exploration covariance not SPD")
    M = np.linalg.solve(psi_k, np.eye(psi_k.shape[0])) - params.theta * params.dt * params.derived.SigmaGram
    passed, margin = pd_margin(M)
    return BoundReport(passed, lo_psi, margin)


class StatePolicy:
    """Feedback law (k, X) -> h̄_k.

    ``__call__`` accepts a single state (n,) or a batch (N, n) and returns
    (m,) or (N, m) accordingly.
    """

    tag = "custom"

    def __init__(self, fn: Callable, m: int, tag: str = "custom"):
        self._fn = fn
        self.m = m
        self.tag = tag

    def __call__(self, k: int, X):
        return self._fn(k, X)

    def affine_gains(self) -> Optional[tuple[np.ndarray, np.ndarray]]:
        return None


class AffinePolicy(StatePolicy):
    """h̄_k = D_k X + d_k."""

    def __init__(self, D, dvec, tag: str = "affine-learned"):
        D = np.asarray(D, dtype=np.float64)
        dvec = np.asarray(dvec, dtype=np.float64)
        if D.ndim != 3 or dvec.ndim != 2 or D.shape[:2] != dvec.shape:
            raise ValueError("D must be (K, m, n) and d must be (K, m)")
        self.D = D
        self.dvec = dvec
        self.m = D.shape[1]
        self.tag = tag

    @property
    def K(self):
        return self.D.shape[0]

    def __call__(self, k, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.D[k].T + self.dvec[k]

    def affine_gains(self):
        return self.D, self.dvec


class ConstantPolicy(AffinePolicy):
    def __init__(self, h, K: int, n: int):
        h = np.atleast_1d(np.asarray(h, dtype=np.float64))
        super().__init__(np.zeros((K, h.size, n)), np.tile(h, (K, 1)), tag="constant")
