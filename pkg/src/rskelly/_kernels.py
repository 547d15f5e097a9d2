"""Hot loops: counter-based Gaussian draws and batched affine-policy rollouts.

Each kernel has a numba implementation and a pure-numpy twin with the same
arithmetic.  ``RSKELLY_BACKEND=numpy`` (or a missing numba) selects the numpy
path; ``RSKELLY_THREADS`` caps the numba worker count.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_ROOT = np.uint64(0x2545F4914F6CDD1D)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S32 = np.uint64(32)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * np.pi

# RNG channels; kept disjoint so market noise and exploration never share draws.
CH_W = 0
CH_V = 1
CH_X0 = 2
CH_AUX = 3


def backend() -> str:
    """Active backend name, read from the environment on every call."""
    want = os.environ.get("RSKELLY_BACKEND", "").strip().lower()
    if want == "numpy" or not HAVE_NUMBA:
        return "numpy"
    return "numba"


def configure_threads() -> None:
    """Apply the RSKELLY_THREADS cap to numba's thread pool."""
    raw = os.environ.get("RSKELLY_THREADS")
    if not raw or not HAVE_NUMBA:
        return
    n = max(1, min(int(raw), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)


# ---------------------------------------------------------------- numpy path

def _mix_np(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _absorb_np(h, x):
    return _mix_np((h ^ x) + _GOLDEN)


def normals_numpy(seed, streams, channel, K, dim):
    """Standard normals of shape (len(streams), K, dim) keyed by counters."""
    streams = np.asarray(streams, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h0 = _absorb_np(_ROOT, np.uint64(seed))
        hs = _absorb_np(np.full(streams.shape, h0, dtype=np.uint64), streams)
        steps = np.arange(K, dtype=np.uint64)
        tag = (np.uint64(channel) << _S32) | steps
        hk = _absorb_np(hs[:, None], tag[None, :])
        comp = np.arange(dim, dtype=np.uint64) << _ONE
        h1 = _absorb_np(hk[:, :, None], comp[None, None, :])
        h2 = _absorb_np(hk[:, :, None], (comp | _ONE)[None, None, :])
    u1 = ((h1 >> _S11).astype(np.float64) + 0.5) * _INV53
    u2 = ((h2 >> _S11).astype(np.float64) + 0.5) * _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def rollout_numpy(a, A, SS, Sigma, bdt, Bt, Lam, c, C, Xi, dt, theta,
                  D, dv, E, ev, F, fv, L, Pinv, tr, X0, w, vs):
    """Vectorised rollout under affine feedback; see :func:`rollout`."""
    N, K, _ = w.shape
    n = X0.shape[1]
    m = a.shape[0]
    X = np.empty((N, K + 1, n))
    H = np.empty((N, K, m))
    inc_act = np.empty((N, K))
    inc_avg = np.empty((N, K))
    game = np.empty((N, K))
    X[:, 0] = X0
    half_xi = 0.5 * (Xi @ Xi)
    for k in range(K):
        x = X[:, k]
        hb = x @ D[k].T + dv[k]
        gam = x @ E[k].T + ev[k]
        eta = x @ F[k].T + fv[k]
        mean = hb + eta
        h = mean + vs[:, k] @ L[k].T
        wo = gam * dt + w[:, k]
        cx = x @ C
        ax = x @ A.T + a
        xw = wo @ Xi
        qa = 0.5 * np.einsum("ij,jk,ik->i", h, SS, h)
        inc_act[:, k] = (-qa + np.einsum("ij,ij->i", h, ax) + half_xi - c - cx) * dt \
            + np.einsum("ij,ij->i", h @ Sigma, wo) - xw
        qm = 0.5 * np.einsum("ij,jk,ik->i", mean, SS, mean)
        lin = np.einsum("ij,ij->i", mean, ax)
        inc_avg[:, k] = (-qm + lin + half_xi - c - cx - 0.5 * tr[k]) * dt \
            + np.einsum("ij,ij->i", mean @ Sigma, wo) - xw
        coup = np.einsum("ij,ij->i", mean @ Sigma, gam) - gam @ Xi
        pen = 0.5 * np.einsum("ij,jk,ik->i", eta, Pinv[k], eta)
        game[:, k] = theta * dt * (qm + 0.5 * tr[k] - lin - half_xi + c + cx - coup) \
            - 0.5 * dt * np.einsum("ij,ij->i", gam, gam) - pen
        H[:, k] = h
        X[:, k + 1] = bdt + x @ Bt.T + wo @ Lam.T
    return X, H, inc_act, inc_avg, game


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _mix_nb(z):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    @njit(cache=True, inline="always")
    def _absorb_nb(h, x):
        return _mix_nb((h ^ x) + np.uint64(0x9E3779B97F4A7C15))

    @njit(cache=True, parallel=True)
    def normals_numba(seed, streams, channel, K, dim):
        N = streams.shape[0]
        out = np.empty((N, K, dim))
        h0 = _absorb_nb(np.uint64(0x2545F4914F6CDD1D), np.uint64(seed))
        ch = np.uint64(channel) << np.uint64(32)
        inv53 = 1.0 / 9007199254740992.0
        for i in prange(N):
            hs = _absorb_nb(h0, np.uint64(streams[i]))
            for k in range(K):
                hk = _absorb_nb(hs, ch | np.uint64(k))
                for j in range(dim):
                    cj = np.uint64(j) << np.uint64(1)
                    h1 = _absorb_nb(hk, cj)
                    h2 = _absorb_nb(hk, cj | np.uint64(1))
                    u1 = (np.float64(h1 >> np.uint64(11)) + 0.5) * inv53
                    u2 = (np.float64(h2 >> np.uint64(11)) + 0.5) * inv53
                    out[i, k, j] = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return out

    @njit(cache=True, parallel=True)
    def rollout_numba(a, A, SS, Sigma, bdt, Bt, Lam, c, C, Xi, dt, theta,
                      D, dv, E, ev, F, fv, L, Pinv, tr, X0, w, vs):
        N, K, d = w.shape
        n = X0.shape[1]
        m = a.shape[0]
        X = np.empty((N, K + 1, n))
        H = np.empty((N, K, m))
        inc_act = np.empty((N, K))
        inc_avg = np.empty((N, K))
        game = np.empty((N, K))
        half_xi = 0.0
        for j in range(d):
            half_xi += 0.5 * Xi[j] * Xi[j]
        for i in prange(N):
            x = np.empty(n)
            for j in range(n):
                x[j] = X0[i, j]
                X[i, 0, j] = x[j]
            hb = np.empty(m)
            eta = np.empty(m)
            mean = np.empty(m)
            h = np.empty(m)
            ax = np.empty(m)
            gam = np.empty(d)
            wo = np.empty(d)
            xn = np.empty(n)
            for k in range(K):
                for r in range(m):
                    s1 = dv[k, r]
                    s2 = fv[k, r]
                    s3 = a[r]
                    for j in range(n):
                        s1 += D[k, r, j] * x[j]
                        s2 += F[k, r, j] * x[j]
                        s3 += A[r, j] * x[j]
                    hb[r] = s1
                    eta[r] = s2
                    mean[r] = s1 + s2
                    ax[r] = s3
                for r in range(m):
                    s = mean[r]
                    for j in range(m):
                        s += L[k, r, j] * vs[i, k, j]
                    h[r] = s
                gg = 0.0
                xw = 0.0
                for r in range(d):
                    s = ev[k, r]
                    for j in range(n):
                        s += E[k, r, j] * x[j]
                    gam[r] = s
                    gg += s * s
                    wo[r] = s * dt + w[i, k, r]
                    xw += Xi[r] * wo[r]
                cx = 0.0
                for j in range(n):
                    cx += C[j] * x[j]
                qa = 0.0
                qm = 0.0
                pen = 0.0
                for r in range(m):
                    for j in range(m):
                        qa += h[r] * SS[r, j] * h[j]
                        qm += mean[r] * SS[r, j] * mean[j]
                        pen += eta[r] * Pinv[k, r, j] * eta[j]
                qa *= 0.5
                qm *= 0.5
                pen *= 0.5
                la = 0.0
                lm = 0.0
                for r in range(m):
                    la += h[r] * ax[r]
                    lm += mean[r] * ax[r]
                sa = 0.0
                sm = 0.0
                coup = 0.0
                for j in range(d):
                    hs = 0.0
                    ms = 0.0
                    for r in range(m):
                        hs += h[r] * Sigma[r, j]
                        ms += mean[r] * Sigma[r, j]
                    sa += hs * wo[j]
                    sm += ms * wo[j]
                    coup += (ms - Xi[j]) * gam[j]
                inc_act[i, k] = (-qa + la + half_xi - c - cx) * dt + sa - xw
                inc_avg[i, k] = (-qm + lm + half_xi - c - cx - 0.5 * tr[k]) * dt + sm - xw
                game[i, k] = theta * dt * (qm + 0.5 * tr[k] - lm - half_xi + c + cx - coup) \
                    - 0.5 * dt * gg - pen
                for r in range(m):
                    H[i, k, r] = h[r]
                for j in range(n):
                    s = bdt[j]
                    for l in range(n):
                        s += Bt[j, l] * x[l]
                    for l in range(d):
                        s += Lam[j, l] * wo[l]
                    xn[j] = s
                for j in range(n):
                    x[j] = xn[j]
                    X[i, k + 1, j] = x[j]
        return X, H, inc_act, inc_avg, game


def normals(seed, streams, channel, K, dim, which=None):
    """Counter-based standard normals, shape (len(streams), K, dim).

    Draw (i, k, j) depends only on (seed, streams[i], channel, k, j), so any
    subset of paths can be regenerated independently.
    """
    streams = np.ascontiguousarray(streams, dtype=np.uint64)
    which = which or backend()
    if which == "numba":
        configure_threads()
        return normals_numba(np.uint64(seed), streams, int(channel), int(K), int(dim))
    return normals_numpy(seed, streams, channel, K, dim)


def rollout(args, which=None):
    """Batched rollout under affine feedback laws.

    ``args`` is the tuple built by ``simulator._rollout_args``.  Returns the
    factor paths (N, K+1, n), applied allocations (N, K, m), per-step realised
    log-excess increments, per-step policy-averaged increments and per-step
    game terms theta*g*dt, each (N, K).
    """
    which = which or backend()
    if which == "numba":
        configure_threads()
        return rollout_numba(*args)
    return rollout_numpy(*args)
