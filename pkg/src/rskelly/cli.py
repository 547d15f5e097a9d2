"""Command-line front end: ``rskelly <mode> --config cfg.json [--out DIR]``.

Exit codes: 0 success, 1 invalid configuration, 2 saddle or exploration
condition failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import json
import logging
import os
import sys
import time
from importlib import resources

import jsonschema
import numpy as np

from . import __version__, _kernels
from .model import ExplorationSchedule, MarketParams, exploration_bound_ok, validate_params

log = logging.getLogger("rskelly")

MODES = ("solve", "check", "simulate", "evaluate", "train", "decompose", "oracle")
EXIT_OK, EXIT_SCHEMA, EXIT_CONDITION, EXIT_NUMERIC = 0, 1, 2, 3

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_paths = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["theta", "dt", "K", "model", "X0"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "theta": {"type": "number", "minimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "K": {"type": "integer", "minimum": 1},
        "X0": _vec,
        "model": {
            "type": "object",
            "required": ["a", "A", "Sigma", "b", "B", "Lambda", "c", "C", "Xi"],
            "properties": {
                "a": _vec, "A": _mat, "Sigma": _mat, "b": _vec, "B": _mat, "Lambda": _mat,
                "c": _num, "C": _vec, "Xi": _vec, "spanned": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "exploration": {
            "type": "object",
            "properties": {
                "psi": _mat,
                "schedule": {"type": "array", "items": _mat, "minItems": 1},
                "fraction_of_bound": {"type": "number", "exclusiveMinimum": 0},
            },
            "minProperties": 1,
            "maxProperties": 1,
            "additionalProperties": False,
        },
        "simulate": {
            "type": "object",
            "properties": {"paths": _paths, "seed": _seed, "policy": {"enum": ["optimal", "kelly"]},
                           "max_rows": _paths},
            "additionalProperties": False,
        },
        "evaluate": {
            "type": "object",
            "properties": {"paths": _paths, "seed": _seed, "target": {"enum": ["I", "J", "game", "kelly"]},
                           "antithetic": {"type": "boolean"}},
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["game", "kelly"]},
                "episodes": {"type": "integer", "minimum": 1},
                "batch": {"type": "integer", "minimum": 2},
                "step_size": {"type": "number", "exclusiveMinimum": 0},
                "schedule": {"enum": ["constant", "inv", "sqrt"]},
                "estimator": {"enum": ["score", "fd", "exact"]},
                "critic_step": {"type": "number"},
                "seed": _seed,
                "tol": {"type": "number", "minimum": 0},
                "patience": {"type": "integer", "minimum": 1},
                "x0_std": {"type": "number", "minimum": 0},
                "freeze_eta": {"type": "boolean"},
                "order": {"enum": ["simultaneous", "alternating"]},
                "fd_step": {"type": "number", "exclusiveMinimum": 0},
                "average_tail": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
            "additionalProperties": False,
        },
        "decompose": {
            "type": "object",
            "properties": {"k": {"type": "integer", "minimum": 0}, "X": _vec},
            "additionalProperties": False,
        },
        "oracle": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["dpp", "duality"]},
                "k": {"type": "integer", "minimum": 0},
                "X": {"type": "array", "items": _vec, "minItems": 1},
                "resolution": {"type": "integer", "minimum": 3},
                "stages": {"type": "integer", "minimum": 1},
                "values": _vec,
                "probs": _vec,
            },
            "additionalProperties": False,
        },
        "output": {"type": "object", "properties": {"dir": {"type": "string"}}},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


class ConditionFailure(RuntimeError):
    pass


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def bundled_config(name: str = "scalar_example.json") -> dict:
    return json.loads(resources.files("rskelly").joinpath("data", name).read_text())


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"schema error at {loc}: {exc.message}") from exc


def build_params(cfg: dict) -> MarketParams:
    mdl = cfg["model"]
    try:
        params = MarketParams(
            a=mdl["a"], A=mdl["A"], Sigma=mdl["Sigma"], b=mdl["b"], B=mdl["B"], Lambda=mdl["Lambda"], c=mdl["c"],
            C=mdl["C"], Xi=mdl["Xi"], dt=cfg["dt"], K=cfg["K"], theta=cfg["theta"], spanned=mdl.get("spanned", False))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rep = validate_params(params)
    if not rep.passed:
        raise ConfigError("invalid model: " + "; ".join(f"{c.name}: {c.detail}" for c in rep.failures()))
    if len(cfg["X0"]) != params.n:
        raise ConfigError(f"dimension mismatch: X0 has length {len(cfg['X0'])}, expected {params.n}")
    return params


def build_psi(cfg: dict, params: MarketParams) -> ExplorationSchedule:
    ex = cfg.get("exploration") or {"fraction_of_bound": 0.5}
    try:
        if "psi" in ex:
            return ExplorationSchedule.constant(np.array(ex["psi"], dtype=float), params.K)
        if "schedule" in ex:
            psi = ExplorationSchedule(np.array(ex["schedule"], dtype=float))
            if psi.K < params.K:
                raise ValueError("exploration schedule shorter than the horizon")
            return psi
        return ExplorationSchedule.fraction_of_bound(params, ex["fraction_of_bound"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ modes

def _solve(params, psi):
    from .riccati import SaddleConditionError, solve
    try:
        return solve(params, psi)
    except SaddleConditionError as exc:
        raise ConditionFailure(str(exc)) from exc


def run_solve(cfg, params, psi, out, args):
    from .riccati import criterion_from_value, logdet_offset, value_to_csv
    qv = _solve(params, psi)
    value_to_csv(qv, os.path.join(out, "value.csv"))
    _dump({"steps": [r.to_dict() for r in qv.reports]}, os.path.join(out, "conditions.json"))
    X0 = np.array(cfg["X0"], dtype=float)
    cv = criterion_from_value(qv, X0, params.theta)
    off = logdet_offset(params, qv)
    _dump({"u0": cv.u0, "inf_I": cv.inf_I, "sup_J": cv.sup_J, "logdet_offset": off,
           "log_inf_I_exact": cv.u0 + off}, os.path.join(out, "criterion.json"))
    return {"u0": cv.u0}


def run_check(cfg, params, psi, out, args):
    from .riccati import check_saddle_conditions, step_back
    bounds = [exploration_bound_ok(params, psi[k]) for k in range(params.K)]
    bound_failed = [k for k, b in enumerate(bounds) if not b.passed]
    K, n = params.K, params.n
    P, p, r = np.zeros((n, n)), np.zeros(n), 0.0
    steps, failed_at = [], None
    for k in range(K - 1, -1, -1):
        rep = check_saddle_conditions(params, P, psi[k])
        steps.append({"k": k, **rep.to_dict(), "failed_blocks": rep.failed_blocks()})
        if not rep.assumption3:
            failed_at = k
            break
        P, p, r = step_back(params, P, p, r, psi[k], check=False)
    body = {
        "exploration_bound": {"passed": not bound_failed, "failed_steps": bound_failed,
                              "margins": [b.margin for b in bounds]},
        "steps": steps,
        "passed": failed_at is None and not bound_failed,
        "failed_step": failed_at,
        "violated": steps[-1]["failed_blocks"] if failed_at is not None else
        ([] if not bound_failed else ["exploration_bound"]),
    }
    _dump(body, os.path.join(out, "conditions.json"))
    if not body["passed"]:
        where = f" at step {failed_at}" if failed_at is not None else ""
        raise ConditionFailure(f"condition failure{where}: " + ", ".join(body["violated"]))
    return {"passed": True}


def _policy(cfg, params, psi, which):
    from .controls import kelly_policy, optimal_policy
    if which == "kelly":
        return kelly_policy(params)
    return optimal_policy(params, _solve(params, psi))


def run_simulate(cfg, params, psi, out, args):
    from .simulator import paths_to_csv, simulate_batch
    sc = cfg.get("simulate", {})
    pol = _policy(cfg, params, psi, sc.get("policy", "optimal"))
    batch = simulate_batch(params, psi, np.array(cfg["X0"], dtype=float), sc.get("paths", 100), sc.get("seed", 0),
                           hbar=pol)
    if not np.all(np.isfinite(batch.X)):
        raise FloatingPointError("non-finite factor path")
    paths_to_csv(batch, os.path.join(out, "paths.csv"), sc.get("max_rows"))
    return {"paths": batch.n_paths}


def run_evaluate(cfg, params, psi, out, args):
    from . import evaluator
    from .controls import saddle_gains
    ec = cfg.get("evaluate", {})
    X0 = np.array(cfg["X0"], dtype=float)
    n, seed, target = ec.get("paths", 10000), ec.get("seed", 0), ec.get("target", "J")
    anti = ec.get("antithetic", False)
    if target == "kelly":
        est = evaluator.kelly_objective(params, _policy(cfg, params, psi, "kelly"), X0, n, seed)
        body = {"estimate": est.to_dict()}
    elif target == "game":
        qv = _solve(params, psi)
        g = saddle_gains(params, qv)
        est = evaluator.estimate_game_value(params, (g.D, g.dvec), (g.E, g.evec), None, psi, X0, n, seed)
        body = {"estimate": est.to_dict(), "analytic_u0": float(0.5 * X0 @ qv.P[0] @ X0 + X0 @ qv.p[0] + qv.r[0])}
    else:
        qv = _solve(params, psi)
        pol = _policy(cfg, params, psi, "optimal")
        if target == "I":
            I, lnI = evaluator.estimate_I(params, pol, psi, X0, n, seed, anti)
            body = {"estimate": I.to_dict(), "log_estimate": lnI.to_dict()}
        else:
            est = evaluator.estimate_J(params, pol, psi, X0, n, seed, anti)
            body = {"estimate": est.to_dict()}
        from .riccati import criterion_from_value, logdet_offset
        cv = criterion_from_value(qv, X0, params.theta)
        body["analytic"] = {"u0": cv.u0, "sup_J": cv.sup_J, "logdet_offset": logdet_offset(params, qv)}
    body["estimate"].pop("elapsed", None)
    for key in ("log_estimate",):
        if key in body:
            body[key].pop("elapsed", None)
    _dump(body, os.path.join(out, "estimate.json"))
    return body["estimate"]


def run_train(cfg, params, psi, out, args):
    from . import rl
    from .riccati import SaddleConditionError, solve
    tc = dict(cfg.get("train", {}))
    kind = tc.pop("kind", "game")
    conf = rl.TrainConfig(**tc)
    X0 = np.array(cfg["X0"], dtype=float)
    try:
        if kind == "kelly":
            pol, trace = rl.train_kelly(params, X0, conf, psi=psi)
            extra = {}
        else:
            try:
                target = rl.AffineGamePolicy.from_saddle(params, solve(params, psi))
            except SaddleConditionError:
                target = None
            pol, trace = rl.train_game(params, psi, X0, conf, target=target)
            extra = {"target_known": target is not None}
    except rl.TrainingDiverged as exc:
        rl.trace_to_csv(exc.trace, os.path.join(out, "trace.csv"))
        raise FloatingPointError(str(exc)) from exc
    rl.trace_to_csv(trace, os.path.join(out, "trace.csv"))
    rl.checkpoint(pol, conf, os.path.join(out, "checkpoint.json"), extra)
    return {"iterations": len(trace)}


def run_decompose(cfg, params, psi, out, args):
    from . import controls
    dc = cfg.get("decompose", {})
    k = dc.get("k", 0)
    if k >= params.K:
        raise ConfigError(f"decompose step {k} outside 0..{params.K - 1}")
    X = np.array(dc.get("X", cfg["X0"]), dtype=float)
    if X.shape != (params.n,):
        raise ConfigError("dimension mismatch: decompose X")
    qv = _solve(params, psi)
    Pn, pn = qv.P[k + 1], qv.p[k + 1]
    sad = controls.optimal_controls_primary(params, k, X, Pn, pn, psi[k])
    body = {
        "k": k, "X": X.tolist(),
        "hstar": sad.hstar.tolist(), "gammastar": sad.gammastar.tolist(),
        "penalized_kelly": controls.decompose_penalized_kelly(params, sad, X).to_dict(),
        "fks_I": controls.decompose_fks_I(params, k, X, Pn, pn).to_dict(),
        "fks_II": controls.decompose_fks_II(params, k, X, Pn, pn).to_dict(),
    }
    _dump(body, os.path.join(out, "decomposition.json"))
    return {"hstar": body["hstar"]}


def run_oracle(cfg, params, psi, out, args):
    oc = cfg.get("oracle", {})
    kind = oc.get("kind", "dpp")
    if kind == "duality":
        from .duality import duality_brute_force
        if "values" not in oc:
            raise ConfigError("duality oracle needs 'values'")
        rep = duality_brute_force(oc["values"], oc.get("probs"), oc.get("resolution", 1000))
        body = {"kind": "duality", "report": rep.to_dict()}
    else:
        from .evaluator import dpp_brute_force
        qv = _solve(params, psi)
        k = oc.get("k", 0)
        if k >= params.K:
            raise ConfigError(f"oracle step {k} outside 0..{params.K - 1}")
        Xs = oc.get("X", [cfg["X0"]])
        reps = [dpp_brute_force(params, psi, qv, k, np.array(x, dtype=float), resolution=oc.get("resolution", 11),
                                stages=oc.get("stages", 2)).to_dict() for x in Xs]
        body = {"kind": "dpp", "reports": reps}
    _dump(body, os.path.join(out, "oracle.json"))
    return {"kind": kind}


RUNNERS = {
    "solve": run_solve, "check": run_check, "simulate": run_simulate, "evaluate": run_evaluate,
    "train": run_train, "decompose": run_decompose, "oracle": run_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rskelly", description="Risk-sensitive benchmarked portfolio control.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sp = sub.add_parser(mode)
        sp.add_argument("--config", help="JSON config; the bundled scalar example when omitted")
        sp.add_argument("--out", help="output directory (default: config output.dir or '.')")
        sp.add_argument("--seed", type=int, help="override the mode seed")
        sp.add_argument("--paths", type=int, help="override the number of simulated paths")
        sp.add_argument("--quiet", action="store_true")
    return ap


def _apply_overrides(cfg: dict, mode: str, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if "mode" in cfg and cfg["mode"] != mode:
        raise ConfigError(f"config mode {cfg['mode']!r} does not match command {mode!r}")
    block = {"simulate": "simulate", "evaluate": "evaluate", "train": "train"}.get(mode)
    if block is not None:
        sub = cfg.setdefault(block, {})
        if args.seed is not None:
            sub["seed"] = args.seed
        if args.paths is not None:
            sub["batch" if mode == "train" else "paths"] = args.paths
    elif args.paths is not None:
        raise ConfigError(f"--paths is not used by {mode}")
    return cfg


def run(mode: str, cfg: dict, out: str, args=None) -> int:
    """Validate, dispatch and write artifacts; returns the exit status."""
    args = args or argparse.Namespace(seed=None, paths=None, quiet=True)
    try:
        cfg = _apply_overrides(cfg, mode, args)
        validate_config(cfg)
        params = build_params(cfg)
        psi = build_psi(cfg, params)
        os.makedirs(out, exist_ok=True)
        t0 = time.perf_counter()
        summary = RUNNERS[mode](cfg, params, psi, out, args)
        elapsed = time.perf_counter() - t0
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_SCHEMA
    except ConditionFailure as exc:
        log.error("%s", exc)
        return EXIT_CONDITION
    except (FloatingPointError, np.linalg.LinAlgError, OverflowError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        msg = str(exc)
        if "curvature" in msg or "condition" in msg or "SPD" in msg:
            log.error("%s", msg)
            return EXIT_CONDITION
        log.error("numerical failure: %s", msg)
        return EXIT_NUMERIC
    # Wall-clock data lives here so the other artifacts are reproducible byte for byte.
    _dump({"mode": mode, "version": __version__, "backend": _kernels.backend(), "elapsed": elapsed,
           "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()},
          os.path.join(out, "meta.json"))
    log.info("%s done: %s", mode, summary)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    _kernels.configure_threads()
    try:
        cfg = load_config(args.config) if args.config else bundled_config()
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_SCHEMA
    out = args.out or (cfg.get("output") or {}).get("dir", ".")
    return run(args.mode, cfg, out, args)


if __name__ == "__main__":
    sys.exit(main())
