"""Factor paths, exploratory shocks and log-relative returns.

Single-path functions are straightforward numpy transcriptions of the model
recursions; :func:`simulate_batch` runs many paths through the compiled kernel
and is checked against them in the tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import _kernels
from .model import AffinePolicy, ExplorationSchedule, MarketParams

R0 = 0.0


@dataclass(frozen=True)
class RngSpec:
    seed: int = 0
    stream: int = 0


@dataclass(frozen=True)
class NoiseDraws:
    """Brownian increments w (K, d) with variance dt, and standard normals v_std (K, m)."""

    w: np.ndarray
    v_std: np.ndarray


@dataclass
class PathRecord:
    X: np.ndarray
    h_applied: np.ndarray
    logexcess: float
    logexcess_policy_avg: float
    reward_terms: np.ndarray
    noise: NoiseDraws


def _as_u64(x) -> int:
    x = int(x)
    if x < 0 or x >= 2**64:
        raise ValueError("seed and stream must fit in an unsigned 64-bit integer")
    return x


def draw_noise(params: MarketParams, rng: RngSpec) -> NoiseDraws:
    w, vs = draw_noise_batch(params, rng.seed, np.array([rng.stream], dtype=np.uint64))
    return NoiseDraws(w[0], vs[0])


def draw_noise_batch(params: MarketParams, seed: int, streams, backend: Optional[str] = None):
    """w (N, K, d) ~ N(0, dt I) and v_std (N, K, m) ~ N(0, I) from disjoint channels."""
    seed = _as_u64(seed)
    streams = np.asarray(streams, dtype=np.uint64)
    w = _kernels.normals(seed, streams, _kernels.CH_W, params.K, params.d, backend)
    w *= np.sqrt(params.dt)
    vs = _kernels.normals(seed, streams, _kernels.CH_V, params.K, params.m, backend)
    return w, vs


def _check_len(name, arr, K, dim):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1 and dim == 1 and arr.shape[0] == K:
        arr = arr[:, None]
    if arr.shape != (K, dim):
        raise ValueError(f"dimension mismatch: {name} has shape {arr.shape}, expected {(K, dim)}")
    return arr


def _check_vec(name, x, dim):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (dim,):
        raise ValueError(f"dimension mismatch: {name} has shape {x.shape}, expected {(dim,)}")
    return x


def simulate_factors(params: MarketParams, X0, noise: NoiseDraws) -> np.ndarray:
    """X_{k+1} = bΔt + B̃X_k + Λw_k; returns (K+1, n)."""
    return simulate_factors_tilted(params, X0, np.zeros((params.K, params.d)), noise)


def simulate_factors_tilted(params: MarketParams, X0, gamma, noise: NoiseDraws) -> np.ndarray:
    """X_{k+1} = bΔt + B̃X_k + Λγ_kΔt + Λw_k, with w playing the tilted Brownian increment."""
    K, n = params.K, params.n
    X0 = _check_vec("X0", X0, n)
    gamma = _check_len("gamma", gamma, K, params.d)
    w = _check_len("w", noise.w, K, params.d)
    Bt = params.derived.Btilde
    X = np.empty((K + 1, n))
    X[0] = X0
    for k in range(K):
        X[k + 1] = params.b * params.dt + Bt @ X[k] + params.Lambda @ (gamma[k] * params.dt + w[k])
    return X


def log_excess_increments(params: MarketParams, hseq, X, w) -> np.ndarray:
    """Per-interval increments of the log-relative return R."""
    K = params.K
    hseq = _check_len("h", hseq, K, params.m)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < K:
        raise ValueError("dimension mismatch: factor path shorter than K")
    w = _check_len("w", w, K, params.d)
    G = params.derived.SigmaGram
    out = np.empty(K)
    for k in range(K):
        h, x = hseq[k], X[k]
        drift = -0.5 * h @ G @ h + h @ params.a + 0.5 * params.Xi @ params.Xi - params.c \
            + h @ params.A @ x - params.C @ x
        out[k] = drift * params.dt + (h @ params.Sigma - params.Xi) @ w[k]
    return out


def log_excess_return(params: MarketParams, hseq, X, noise: NoiseDraws) -> float:
    """R_T − R_0 for allocations hseq along factor path X."""
    return float(np.sum(log_excess_increments(params, hseq, X, noise.w)))


def policy_averaged_increments(params: MarketParams, policy: Callable, psi: ExplorationSchedule, X, w) -> np.ndarray:
    K = params.K
    X = np.asarray(X, dtype=np.float64)
    hbar = np.array([np.asarray(policy(k, X[k]), dtype=np.float64) for k in range(K)])
    inc = log_excess_increments(params, hbar, X, w)
    return inc - 0.5 * psi.traces(params.derived.SigmaGram)[:K] * params.dt


def policy_averaged_log_excess(params: MarketParams, policy: Callable, psi: ExplorationSchedule, X,
                               noise: NoiseDraws) -> float:
    """R̄^π_T − R_0: baseline allocation, exploration replaced by its trace penalty."""
    return float(np.sum(policy_averaged_increments(params, policy, psi, X, noise.w)))


def simulate_asset_prices(params: MarketParams, X, noise: NoiseDraws, S0) -> np.ndarray:
    """Exact lognormal updates at rebalancing dates with the factor frozen over each interval."""
    S0 = _check_vec("S0", S0, params.m)
    if np.any(S0 <= 0):
        raise ValueError("S0 must be strictly positive")
    K = params.K
    w = _check_len("w", noise.w, K, params.d)
    X = np.asarray(X, dtype=np.float64)
    half_var = 0.5 * np.sum(params.Sigma * params.Sigma, axis=1)
    logS = np.empty((K + 1, params.m))
    logS[0] = np.log(S0)
    for k in range(K):
        logS[k + 1] = logS[k] + (params.a + params.A @ X[k] - half_var) * params.dt + params.Sigma @ w[k]
    return np.exp(logS)


def simulate_path(params: MarketParams, policy: Callable, psi: ExplorationSchedule, X0,
                  rng: RngSpec = RngSpec()) -> PathRecord:
    """One exploratory episode under the physical measure."""
    noise = draw_noise(params, rng)
    X = simulate_factors(params, X0, noise)
    hbar = np.array([np.asarray(policy(k, X[k]), dtype=np.float64) for k in range(params.K)])
    v = np.einsum("kij,kj->ki", psi.chol[: params.K], noise.v_std)
    h = hbar + v
    inc = log_excess_increments(params, h, X, noise.w)
    avg = policy_averaged_log_excess(params, policy, psi, X, noise)
    return PathRecord(X, h, float(inc.sum()), avg, inc, noise)


# ------------------------------------------------------------------ batches

@dataclass
class BatchResult:
    """Output of :func:`simulate_batch`.

    ``inc_act`` are realised log-excess increments (with exploration),
    ``inc_avg`` the policy-averaged increments, ``game`` the per-step
    θ·g·Δt terms.  ``w`` holds the tilted-measure increments and ``vs`` the
    standard normals behind exploration.
    """

    X: np.ndarray
    H: np.ndarray
    inc_act: np.ndarray
    inc_avg: np.ndarray
    game: np.ndarray
    w: np.ndarray
    vs: np.ndarray
    streams: np.ndarray

    @property
    def n_paths(self):
        return self.X.shape[0]

    @property
    def logexcess(self):
        return self.inc_act.sum(axis=1)

    @property
    def logexcess_policy_avg(self):
        return self.inc_avg.sum(axis=1)

    @property
    def game_value(self):
        return self.game.sum(axis=1)


Gain = Union[None, AffinePolicy, Callable, tuple]


def _gains(law, K, rows, n):
    """Return (M (K, rows, n), c (K, rows)) for an affine law, or None for a callable."""
    if law is None:
        return np.zeros((K, rows, n)), np.zeros((K, rows))
    if isinstance(law, tuple):
        M, c = law
        return np.ascontiguousarray(M, dtype=np.float64), np.ascontiguousarray(c, dtype=np.float64)
    if hasattr(law, "affine_gains") and law.affine_gains() is not None:
        M, c = law.affine_gains()
        return np.ascontiguousarray(M, dtype=np.float64), np.ascontiguousarray(c, dtype=np.float64)
    return None


def _psi_arrays(params: MarketParams, psi: Optional[ExplorationSchedule]):
    """(chol, inv, traces) per step; psi=None means no exploration."""
    K, m = params.K, params.m
    if psi is None:
        return np.zeros((K, m, m)), np.zeros((K, m, m)), np.zeros(K)
    return (np.ascontiguousarray(psi.chol[:K]), np.ascontiguousarray(psi.inv[:K]),
            psi.traces(params.derived.SigmaGram)[:K].copy())


def _rollout_args(params: MarketParams, psi: Optional[ExplorationSchedule], gains, X0, w, vs):
    dc = params.derived
    (D, dv), (E, ev), (F, fv) = gains
    chol, inv, tr = _psi_arrays(params, psi)
    return (
        np.ascontiguousarray(params.a), np.ascontiguousarray(params.A), np.ascontiguousarray(dc.SigmaGram),
        np.ascontiguousarray(params.Sigma), params.b * params.dt, np.ascontiguousarray(dc.Btilde),
        np.ascontiguousarray(params.Lambda), params.c, np.ascontiguousarray(params.C),
        np.ascontiguousarray(params.Xi), params.dt, params.theta,
        D, dv, E, ev, F, fv,
        chol, inv, tr,
        np.ascontiguousarray(X0), np.ascontiguousarray(w), np.ascontiguousarray(vs),
    )


def _rollout_callables(params, psi, fns, X0, w, vs):
    """Generic numpy rollout for arbitrary feedback callables."""
    N, K, d = w.shape
    m, n = params.m, params.n
    dc = params.derived
    chol, inv, tr = _psi_arrays(params, psi)
    X = np.empty((N, K + 1, n))
    H = np.empty((N, K, m))
    inc_act = np.empty((N, K))
    inc_avg = np.empty((N, K))
    game = np.empty((N, K))
    X[:, 0] = X0
    hx = 0.5 * params.Xi @ params.Xi
    dt, th = params.dt, params.theta

    def call(fn, k, x, rows):
        if fn is None:
            return np.zeros((x.shape[0], rows))
        return np.broadcast_to(np.asarray(fn(k, x), dtype=np.float64), (x.shape[0], rows))

    for k in range(K):
        x = X[:, k]
        hb = call(fns[0], k, x, m)
        gam = call(fns[1], k, x, d)
        eta = call(fns[2], k, x, m)
        mean = hb + eta
        h = mean + vs[:, k] @ chol[k].T
        wo = gam * dt + w[:, k]
        ax = x @ params.A.T + params.a
        cx = x @ params.C
        xw = wo @ params.Xi
        qa = 0.5 * np.einsum("ij,jk,ik->i", h, dc.SigmaGram, h)
        qm = 0.5 * np.einsum("ij,jk,ik->i", mean, dc.SigmaGram, mean)
        lm = np.einsum("ij,ij->i", mean, ax)
        inc_act[:, k] = (-qa + np.einsum("ij,ij->i", h, ax) + hx - params.c - cx) * dt \
            + np.einsum("ij,ij->i", h @ params.Sigma, wo) - xw
        inc_avg[:, k] = (-qm + lm + hx - params.c - cx - 0.5 * tr[k]) * dt \
            + np.einsum("ij,ij->i", mean @ params.Sigma, wo) - xw
        coup = np.einsum("ij,ij->i", mean @ params.Sigma - params.Xi, gam)
        game[:, k] = th * dt * (qm + 0.5 * tr[k] - lm - hx + params.c + cx - coup) \
            - 0.5 * dt * np.einsum("ij,ij->i", gam, gam) \
            - 0.5 * np.einsum("ij,jk,ik->i", eta, inv[k], eta)
        H[:, k] = h
        X[:, k + 1] = params.b * dt + x @ dc.Btilde.T + wo @ params.Lambda.T
    return X, H, inc_act, inc_avg, game


def initial_states(params: MarketParams, X0, n_paths: int):
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim == 1:
        X0 = _check_vec("X0", X0, params.n)
        return np.tile(X0, (n_paths, 1))
    if X0.shape != (n_paths, params.n):
        raise ValueError(f"dimension mismatch: X0 batch has shape {X0.shape}")
    return X0


def simulate_batch(params: MarketParams, psi: Optional[ExplorationSchedule], X0, n_paths: int, seed: int = 0,
                   hbar: Gain = None, gamma: Gain = None, eta: Gain = None, first_stream: int = 0,
                   antithetic: bool = False, backend: Optional[str] = None) -> BatchResult:
    """Simulate ``n_paths`` episodes, optionally under a tilted measure.

    Each of ``hbar``, ``gamma``, ``eta`` may be None (zero), an AffinePolicy,
    a (gain, intercept) tuple with shapes (K, rows, n) and (K, rows), or a
    callable (k, X_batch) -> (N, rows).  With gamma = eta = None the paths are
    drawn under the physical measure; psi=None switches exploration off.  Path i uses stream first_stream + i
    (or first_stream + i // 2 with antithetic pairs).
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if psi is not None and (psi.K < params.K or psi.m != params.m):
        raise ValueError("exploration schedule does not match the model")
    K, m, n, d = params.K, params.m, params.n, params.d
    if antithetic:
        half = (n_paths + 1) // 2
        streams = np.arange(first_stream, first_stream + half, dtype=np.uint64)
        w, vs = draw_noise_batch(params, seed, streams, backend)
        w = np.concatenate([w, -w])[:n_paths]
        vs = np.concatenate([vs, -vs])[:n_paths]
        streams = np.concatenate([streams, streams])[:n_paths]
    else:
        streams = np.arange(first_stream, first_stream + n_paths, dtype=np.uint64)
        w, vs = draw_noise_batch(params, seed, streams, backend)
    X0b = initial_states(params, X0, n_paths)
    specs = [(hbar, m), (gamma, d), (eta, m)]
    gains = [_gains(s, K, rows, n) for s, rows in specs]
    if all(g is not None for g in gains):
        out = _kernels.rollout(_rollout_args(params, psi, gains, X0b, w, vs), backend)
    else:
        fns = []
        for (s, rows), g in zip(specs, gains):
            if g is None:
                fns.append(s)
            else:
                M, c = g
                fns.append(lambda k, x, M=M, c=c: x @ M[k].T + c[k])
        out = _rollout_callables(params, psi, fns, X0b, w, vs)
    X, H, inc_act, inc_avg, game = out
    return BatchResult(X, H, inc_act, inc_avg, game, w, vs, streams)


def paths_to_csv(batch: BatchResult, path, max_paths: Optional[int] = None) -> None:
    """One row per (path, step): path_id, k, X..., h..., reward_term, logexcess_running."""
    N, K1, n = batch.X.shape
    m = batch.H.shape[2]
    N = N if max_paths is None else min(N, max_paths)
    fmt = "%.17g"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path_id", "k"] + [f"X{j}" for j in range(n)] + [f"h{j}" for j in range(m)]
                    + ["reward_term", "logexcess_running"])
        for i in range(N):
            run = 0.0
            for k in range(K1):
                if k < K1 - 1:
                    r = batch.inc_act[i, k]
                    hs = [fmt % v for v in batch.H[i, k]]
                    rs = fmt % r
                else:
                    r = 0.0
                    hs = [""] * m
                    rs = ""
                row = [i, k] + [fmt % v for v in batch.X[i, k]] + hs + [rs, fmt % run]
                run += r
                wr.writerow(row)
