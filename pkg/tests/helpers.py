"""Instance factories shared by the test modules."""

import numpy as np

from rskelly.model import ExplorationSchedule, MarketParams
from rskelly.riccati import SaddleConditionError, solve


def random_params(rng, m, n, K, theta=1.0, dt=None, spanned=False, scale=1.0):
    d = n + m + (0 if spanned else 1)
    Sigma = rng.normal(size=(m, d)) * 0.4
    Sigma[:, :m] += 0.5 * np.eye(m)
    B = -0.5 * np.eye(n) + 0.1 * rng.normal(size=(n, n))
    return MarketParams(
        a=0.1 * rng.normal(size=m) * scale,
        A=0.3 * rng.normal(size=(m, n)) * scale,
        Sigma=Sigma,
        b=0.05 * rng.normal(size=n),
        B=B,
        Lambda=0.2 * rng.normal(size=(n, d)),
        c=0.02 * rng.normal(),
        C=0.1 * rng.normal(size=n),
        Xi=0.1 * rng.normal(size=d),
        dt=float(rng.uniform(0.05, 0.5)) if dt is None else dt,
        K=K,
        theta=theta,
        spanned=spanned,
    )


def random_instance(rng, m=None, n=None, K=None, theta=None, frac=0.5, tries=50):
    """(params, psi, qv) with Ψ at ``frac`` of the admissibility bound and a successful solve."""
    for _ in range(tries):
        mm = m or int(rng.integers(1, 5))
        nn = n or int(rng.integers(1, 5))
        KK = K or int(rng.integers(1, 13))
        th = theta if theta is not None else float(rng.uniform(0.2, 3.0))
        params = random_params(rng, mm, nn, KK, th)
        psi = ExplorationSchedule.fraction_of_bound(params, frac)
        try:
            return params, psi, solve(params, psi)
        except SaddleConditionError:
            continue
    raise RuntimeError("no valid random instance found")


def scalar_game(K=3, theta=1.0, psi_scale=0.25):
    """Scalar instance used for learning runs; Ψ is well inside the bound."""
    params = MarketParams(
        a=[0.1], A=[[0.5]], Sigma=[[1.0, 0.0, 0.0]], b=[0.05], B=[[-0.5]], Lambda=[[0.1, 0.3, 0.2]],
        c=0.02, C=[0.1], Xi=[0.1, 0.1, 0.15], dt=1.0, K=K, theta=theta)
    return params, ExplorationSchedule.constant(np.array([[psi_scale]]), K)


def scalar_dpp(K=3):
    """Scalar instance for grid oracles; Ψ at a tenth of the bound."""
    params = MarketParams(
        a=[0.1], A=[[0.5]], Sigma=[[0.3, 0.0, 0.0]], b=[0.05], B=[[-0.5]], Lambda=[[0.1, 0.3, 0.2]],
        c=0.02, C=[0.1], Xi=[0.1, 0.1, 0.15], dt=0.5, K=K, theta=1.0)
    return params, ExplorationSchedule.fraction_of_bound(params, 0.1)


def scalar_kelly(K=3):
    """Deterministic-factor scalar market (Λ = 0)."""
    params, _ = scalar_game(K)
    return params.with_(Lambda=np.zeros((1, 3)))


def mc_instance():
    """m=2, n=1, K=8, θ=1 with weak factor noise, Ψ at half the bound."""
    params = MarketParams(
        a=[0.05, 0.03], A=[[0.2], [-0.1]],
        Sigma=[[0.25, 0.05, 0.0, 0.0], [0.02, 0.2, 0.0, 0.0]],
        b=[0.0], B=[[-0.3]], Lambda=[[0.02, 0.0, 0.05, 0.03]],
        c=0.01, C=[0.02], Xi=[0.1, 0.05, 0.0, 0.0], dt=0.25, K=8, theta=1.0)
    return params, ExplorationSchedule.fraction_of_bound(params, 0.5)
