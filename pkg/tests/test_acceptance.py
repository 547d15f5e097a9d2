"""Acceptance suite: fifteen numbered criteria, each printing one PASS/FAIL line.

Run directly (``python tests/test_acceptance.py``) or through pytest; the
pytest run also repeats the lines in the terminal summary.
"""

import time

import numpy as np
import pytest

import conftest
from helpers import mc_instance, random_instance, random_params, scalar_dpp, scalar_game, scalar_kelly
from rskelly import cli, controls, rl
from rskelly.duality import (
    ControlTriple,
    F_hessian_blocks,
    StepContext,
    aux_F,
    duality_brute_force,
    kl_penalty,
    sample_log_likelihood,
)
from rskelly.evaluator import dpp_brute_force, estimate_I
from rskelly.model import ExplorationSchedule, MarketParams, exploration_bound_ok
from rskelly.riccati import SaddleConditionError, check_saddle_conditions, solve, step_back, value_at


def report(n, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail}; {elapsed:.2f}s of {limit:g}s)"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


def _clock():
    t0 = time.perf_counter()
    return lambda: time.perf_counter() - t0


# 1 -------------------------------------------------------------------------

def test_criterion_01_terminal_conditions():
    el = _clock()
    params, psi = scalar_dpp(K=6)
    qv = solve(params, psi)
    rng = np.random.default_rng(1)
    p2, psi2, qv2 = random_instance(rng, m=3, n=2, K=7)
    ok = all(np.all(q.P[-1] == 0) and np.all(q.p[-1] == 0) and q.r[-1] == 0 for q in (qv, qv2))
    report(1, ok, "P_K, p_K, r_K exactly zero", el(), 1.0)


# 2 -------------------------------------------------------------------------

def test_criterion_02_one_step_closed_form():
    el = _clock()
    worst = 0.0
    for th in (0.5, 1.0, 2.0):
        for sig in (0.5, 1.0, 2.0):
            for dt in (0.5, 1.0, 2.0):
                params = MarketParams(a=[0.1], A=[[1.0]], Sigma=[[sig, 0.0, 0.0]], b=[0.05], B=[[-0.5]],
                                      Lambda=[[0.1, 0.3, 0.2]], c=0.02, C=[0.1], Xi=[0.1, 0.1, 0.15],
                                      dt=dt, K=1, theta=th)
                qv = solve(params, ExplorationSchedule.fraction_of_bound(params, 0.5))
                want = -th * dt / (sig ** 2 * (1 + th))
                worst = max(worst, abs(qv.P[0, 0, 0] - want) / abs(want))
    report(2, worst <= 1e-12, f"max relative error {worst:.2e}", el(), 1.0)


# 3, 4 ----------------------------------------------------------------------

def _hundred_instances(seed=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(100):
        params, psi, qv = random_instance(rng)
        k = int(rng.integers(0, params.K))
        X = rng.normal(size=params.n)
        out.append((params, psi, qv, k, X))
    return out


def test_criterion_03_characterization_equivalence():
    el = _clock()
    worst_h = worst_g = 0.0
    eta_zero = True
    for params, psi, qv, k, X in _hundred_instances():
        a = controls.optimal_controls_primary(params, k, X, qv.P[k + 1], qv.p[k + 1], psi[k])
        b = controls.optimal_controls_alt(params, k, X, qv.P[k + 1], qv.p[k + 1], psi[k])
        worst_h = max(worst_h, np.linalg.norm(a.hstar - b.hstar) / (1 + np.linalg.norm(a.hstar)))
        worst_g = max(worst_g, np.linalg.norm(a.gammastar - b.gammastar) / (1 + np.linalg.norm(a.gammastar)))
        eta_zero &= bool(np.all(a.etastar == 0) and np.all(b.etastar == 0))
    ok = worst_h <= 1e-9 and worst_g <= 1e-9 and eta_zero
    report(3, ok, f"h gap {worst_h:.1e}, gamma gap {worst_g:.1e}, eta zero {eta_zero}", el(), 10.0)


def test_criterion_04_decomposition_closure():
    el = _clock()
    worst = {"penalized": 0.0, "I": 0.0, "II": 0.0}
    for params, psi, qv, k, X in _hundred_instances():
        Pn, pn = qv.P[k + 1], qv.p[k + 1]
        sad = controls.optimal_controls_primary(params, k, X, Pn, pn, psi[k])
        scale = max(np.linalg.norm(sad.hstar), np.finfo(float).tiny)
        decs = {
            "penalized": controls.decompose_penalized_kelly(params, sad, X),
            "I": controls.decompose_fks_I(params, k, X, Pn, pn),
            "II": controls.decompose_fks_II(params, k, X, Pn, pn),
        }
        for name, dec in decs.items():
            worst[name] = max(worst[name], np.linalg.norm(dec.recombine() - sad.hstar) / scale)
    ok = max(worst.values()) <= 1e-10
    report(4, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), el(), 10.0)


# 5 -------------------------------------------------------------------------

def test_criterion_05_kelly_limit():
    el = _clock()
    rng = np.random.default_rng(5)
    base = random_params(rng, 2, 2, 5)
    Xs = rng.normal(size=(20, 2))
    Xs *= (rng.uniform(size=(20, 1)) ** 0.5) / np.linalg.norm(Xs, axis=1, keepdims=True)
    sups = []
    for th in (1e-2, 1e-3):
        params = base.with_(theta=th)
        qv = solve(params, ExplorationSchedule.fraction_of_bound(params, 0.5))
        dev = [np.linalg.norm(controls.saddle_at(params, qv, 0, X).hstar - controls.kelly_control(params, X))
               for X in Xs]
        sups.append(max(dev))
    ratio = sups[0] / sups[1]
    report(5, 7 <= ratio <= 13, f"sup deviations {sups[0]:.3e}, {sups[1]:.3e}, ratio {ratio:.3f}", el(), 5.0)


# 6 -------------------------------------------------------------------------

def test_criterion_06_saddle_verification():
    el = _clock()
    rng = np.random.default_rng(6)
    worst_grad = 0.0
    signs_ok = True
    step = 1e-5
    for _ in range(50):
        params, psi, qv = random_instance(rng)
        k = int(rng.integers(0, params.K))
        X = rng.normal(size=params.n)
        ctx = StepContext.from_value(qv, k, X, psi)
        sad = controls.saddle_at(params, qv, k, X)
        z0 = np.concatenate([sad.hstar, sad.gammastar, sad.etastar])
        m, d = params.m, params.d

        def F(z):
            return aux_F(params, ctx, ControlTriple(z[:m], z[m:m + d], z[m + d:]))

        for i in range(z0.size):
            e = np.zeros_like(z0)
            e[i] = step
            worst_grad = max(worst_grad, abs(F(z0 + e) - F(z0 - e)) / (2 * step))
        Hh, Hg, He = F_hessian_blocks(params, ctx)
        signs_ok &= bool(np.linalg.eigvalsh(Hh)[0] > 0 and np.linalg.eigvalsh(Hg)[-1] < 0
                         and np.linalg.eigvalsh(He)[-1] < 0)
    ok = worst_grad <= 1e-6 and signs_ok
    report(6, ok, f"max |FD gradient| {worst_grad:.1e}, Hessian signs {signs_ok}", el(), 10.0)


# 7 -------------------------------------------------------------------------

def test_criterion_07_dpp_brute_force():
    el = _clock()
    params, psi = scalar_dpp(K=3)
    qv = solve(params, psi)
    worst_gap, grid_ok = 0.0, True
    for k, X in zip((0, 1, 2, 0, 1), (-1.0, -0.5, 0.0, 0.5, 1.0)):
        rep = dpp_brute_force(params, psi, qv, k, [X], resolution=15, stages=2)
        worst_gap = max(worst_gap, abs(rep.gap))
        grid_ok &= abs(rep.minimax_maximin_gap) <= rep.grid_tolerance
    ok = worst_gap <= 1e-3 and grid_ok
    report(7, ok, f"max |grid - u_k| {worst_gap:.1e}, minimax = maximin within grid tolerance {grid_ok}",
           el(), 120.0)


# 8 -------------------------------------------------------------------------

def test_criterion_08_monte_carlo_consistency():
    el = _clock()
    params, psi = mc_instance()
    qv = solve(params, psi)
    X0 = np.zeros(params.n)
    pol = controls.optimal_policy(params, qv)
    _, lnI = estimate_I(params, pol, psi, X0, 100_000, seed=8)
    th = params.theta
    J_mc, se = -lnI.mean / th, lnI.std_error / th
    J_an = -value_at(qv, 0, X0) / th
    z = (J_mc - J_an) / se
    report(8, abs(z) <= 4, f"J_mc {J_mc:.6f} vs {J_an:.6f}, {z:+.2f} SE", el(), 120.0)


# 9 -------------------------------------------------------------------------

def _sweep_verdicts(params, psi):
    """(assumption-3 verdict, risk-resistance verdict) over the backward sweep."""
    n = params.n
    P, p, r = np.zeros((n, n)), np.zeros(n), 0.0
    a3 = rr = True
    for k in range(params.K - 1, -1, -1):
        rep = check_saddle_conditions(params, P, psi[k])
        a3 &= rep.assumption3
        rr &= rep.riskresist
        if not rep.assumption3:
            break
        P, p, r = step_back(params, P, p, r, psi[k], check=False)
    return a3, rr


def test_criterion_09_condition_set_equivalence():
    el = _clock()
    rng = np.random.default_rng(9)
    verdicts = []
    for _ in range(200):
        params = random_params(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 7)),
                               theta=float(rng.uniform(0.2, 3.0)))
        psi = ExplorationSchedule.fraction_of_bound(params, float(rng.uniform(0.2, 1.8)))
        verdicts.append(_sweep_verdicts(params, psi))
    v = np.array(verdicts)
    agree = int(np.sum(v[:, 0] == v[:, 1]))
    both = bool(v[:, 0].any() and (~v[:, 0]).any())
    a3_only = int(np.sum(v[:, 0] & ~v[:, 1]))
    rr_only = int(np.sum(~v[:, 0] & v[:, 1]))
    ok = agree == len(v) and both
    report(9, ok, f"verdicts agree on {agree}/{len(v)} (assumption 3 only {a3_only}, risk-resistance only "
                  f"{rr_only}); pass and fail cases present {both}", el(), 10.0)


# 10 ------------------------------------------------------------------------

def test_criterion_10_exploration_bound_enforcement(tmp_path):
    el = _clock()
    params, _ = scalar_dpp(K=5)
    bound = params.derived.SigmaGramInv / (params.theta * params.dt)
    sched = np.stack([0.5 * bound] * params.K)
    before = exploration_bound_ok(params, sched[2]).passed
    sched[2] = 1.5 * bound
    after = exploration_bound_ok(params, sched[2]).passed
    try:
        solve(params, ExplorationSchedule(sched))
        step = None
    except SaddleConditionError as exc:
        step = exc.step
    cfg = {"theta": params.theta, "dt": params.dt, "K": params.K, "X0": [0.0],
           "model": params.to_dict(), "exploration": {"schedule": sched.tolist()}}
    code = cli.run("check", cfg, str(tmp_path))
    ok = before and not after and step == 2 and code == cli.EXIT_CONDITION
    report(10, ok, f"bound {before}->{after}, solve failed at step {step}, exit code {code}", el(), 1.0)


# 11 ------------------------------------------------------------------------

def test_criterion_11_duality_oracle():
    el = _clock()
    vals = np.array([-1.3, 0.2, 0.7, 1.9, -0.4])
    probs = np.array([0.1, 0.3, 0.2, 0.15, 0.25])
    rep = duality_brute_force(vals, probs)
    ok = abs(rep.gap) <= 1e-6 and rep.max_atom_discrepancy <= 1e-6
    report(11, ok, f"gap {rep.gap:.1e}, max atom discrepancy {rep.max_atom_discrepancy:.1e}", el(), 30.0)


# 12 ------------------------------------------------------------------------

def test_criterion_12_kl_closed_form():
    el = _clock()
    params, psi = scalar_dpp(K=4)
    rng = np.random.default_rng(12)
    gamma = 0.3 * rng.normal(size=(params.K, params.d))
    eta = 0.1 * rng.normal(size=(params.K, params.m))
    ll = sample_log_likelihood(params, gamma, eta, psi, 100_000, seed=12)
    exact = kl_penalty(params, gamma, eta, psi)
    se = ll.std(ddof=1) / np.sqrt(ll.size)
    z = (ll.mean() - exact) / se
    report(12, abs(z) <= 4, f"mean log-likelihood {ll.mean():.6f} vs {exact:.6f}, {z:+.2f} SE", el(), 30.0)


# 13 ------------------------------------------------------------------------

def test_criterion_13_rl_recovery_kelly():
    el = _clock()
    params = scalar_kelly(K=3)
    X0 = np.zeros(1)
    Ds, ds = controls.kelly_gains(params)
    exact_cfg = rl.TrainConfig(episodes=60, step_size=0.5, schedule="constant", estimator="exact")
    (D, d), _ = rl.train_kelly(params, X0, exact_cfg)
    err_exact = np.abs(D - Ds).max() + np.abs(d - ds).max()
    psi = ExplorationSchedule.constant(np.array([[0.25]]), params.K)
    sgd_cfg = rl.TrainConfig(episodes=10_000, batch=100, step_size=0.5, schedule="sqrt", estimator="score",
                             seed=13, average_tail=0.5)
    (D2, d2), _ = rl.train_kelly(params, X0, sgd_cfg, psi=psi)
    err_sgd = np.linalg.norm(D2 - Ds) + np.linalg.norm(d2 - ds)
    ok = err_exact <= 1e-3 and err_sgd <= 5e-2
    report(13, ok, f"exact error {err_exact:.1e}, stochastic error {err_sgd:.3f}", el(), 300.0)


# 14 ------------------------------------------------------------------------

def test_criterion_14_rl_recovery_game():
    el = _clock()
    params, psi = scalar_game(K=3)
    qv = solve(params, psi)
    star = rl.AffineGamePolicy.from_saddle(params, qv)
    X0 = np.zeros(1)
    cfg = rl.TrainConfig(episodes=2000, batch=2000, step_size=0.5, schedule="sqrt", seed=14, average_tail=0.5)
    pol, _ = rl.train_game(params, psi, X0, cfg, target=star)
    dist_h = np.linalg.norm(pol.D - star.D) + np.linalg.norm(pol.dvec - star.dvec)
    dist_eta = np.linalg.norm(pol.F) + np.linalg.norm(pol.fvec)
    est = rl.policy_gradient_game(params, psi, star, X0, rl.TrainConfig(batch=20_000, seed=140), iteration=1)
    zmax = max(float(np.abs(z).max()) for z in est.zscores().values())
    ok = dist_h <= 5e-2 and dist_eta <= 5e-2 and zmax <= 4
    report(14, ok, f"|D-D*|+|d-d*| {dist_h:.4f}, |F|+|f| {dist_eta:.4f}, max |z| at saddle {zmax:.2f}",
           el(), 600.0)


# 15 ------------------------------------------------------------------------

def test_criterion_15_critic_accuracy():
    el = _clock()
    params, psi = scalar_game(K=3)
    qv = solve(params, psi)
    star = rl.AffineGamePolicy.from_saddle(params, qv)
    batch = rl.critic_batch(params, psi, star, np.zeros(1), 200_000, seed=15)
    crit = rl.fit_critic(params, psi, star, batch)
    worst = 0.0
    for k in range(params.K):
        want = np.r_[qv.P[k].ravel(), qv.p[k], qv.r[k]]
        got = np.r_[crit.P[k].ravel(), crit.p[k], crit.r[k]]
        worst = max(worst, np.linalg.norm(got - want) / np.linalg.norm(want))
    report(15, worst <= 1e-2, f"max relative error {worst:.1e}", el(), 300.0)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
