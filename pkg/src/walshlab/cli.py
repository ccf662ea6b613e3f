"""Command-line front end.

Every command writes one machine-readable result (``--format json`` by
default, to stdout or ``--out``) and a short human summary on stderr.
Exit codes: 0 success, 2 invalid input, 3 formula not applicable,
1 internal error, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from typing import Any, Sequence

import numpy as np

from . import __version__
from .classify import NotApplicableError, classify_explosion, classify_limit, exit_angle_law
from .conditions import ConditionError, validate_conditions
from .control import ControlSpec, solve_cstar
from .fields import SpecError, load_json, load_model
from .geometry import RayPoint, UnsupportedRayError, parse_point
from .scale import OutOfDomainError, RangeError, build_profiles
from .simulate import (ConfigError, EULER, SCHEMES, SimConfig, TestFunction, mc_local_time, mc_exit_law,
                       exit_law_from, run_paths, simulate_path, fs_residual)
from .stopping import Reward, solve_stopping

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID, EXIT_NA, EXIT_USAGE = 0, 1, 2, 3, 64
log = logging.getLogger("walshlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- rendering ----------------------------------------------------------------

def _num(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g")


def dumps(obj: Any) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits, infinities as strings."""
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ", ".join(f"{json.dumps(k)}: {dumps(v)}" for k, v in items) + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(obj, dict):
        out = []
        for k in sorted(obj, key=str):
            out += _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
        return out
    if isinstance(obj, (list, tuple)) and any(isinstance(v, (dict, list, tuple)) for v in obj):
        out = []
        for i, v in enumerate(obj):
            out += _flatten(v, f"{prefix}[{i}]")
        return out
    return [(prefix, obj)]


def _cell(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return _num(float(v)).strip('"')
    if isinstance(v, (list, tuple)):
        return " ".join(_cell(x) for x in v)
    return "" if v is None else str(v)


def render(result: dict, fmt: str, table: list[list] | None = None, header: Sequence[str] = ()) -> str:
    if fmt == "json":
        return dumps(result) + "\n"
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.writer(buf, lineterminator="\n")
        if table is not None:
            w.writerow(header)
            w.writerows([[_cell(x) for x in row] for row in table])
        else:
            w.writerow(["key", "value"])
            w.writerows([[k, _cell(v)] for k, v in _flatten(result)])
        return buf.getvalue()
    rows = [[str(h) for h in header]] + [[_cell(x) for x in row] for row in table] if table is not None \
        else [[k, _cell(v)] for k, v in _flatten(result)]
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))] if rows else []
    for r in rows:
        buf.write("  ".join(c.rjust(wd) for c, wd in zip(r, widths)).rstrip() + "\n")
    return buf.getvalue()


def _angle(t: float) -> str:
    for k, name in ((0, "0"), (1, "π/2"), (2, "π"), (3, "3π/2")):
        if t == k * math.pi / 2:
            return name
    return f"{t:.6g}"


def _pretty(text: str) -> str:
    return text.replace("inf", "∞")


# -- commands -----------------------------------------------------------------

def _start(args) -> RayPoint:
    try:
        return parse_point(args.start)
    except ValueError as exc:
        raise SpecError(str(exc)) from exc


def _sim_config(args, paths=None) -> SimConfig:
    if args.seed is None:
        raise UsageError("randomized commands require --seed")
    return SimConfig(args.step, args.horizon, paths or args.paths, args.seed, args.scheme, args.threads)


def cmd_check(args):
    spec = load_model(args.spec)
    rep = validate_conditions(spec)
    result = {"conditions": rep.to_json(), "invariants": []}
    lines = [f"eta = {rep.eta:.6g}"]
    for c in rep.clauses:
        lines.append(f"  {c.clause:<20} ray {_angle(c.theta):<6} {'pass' if c.passed else 'FAIL'}  {c.detail}")
    if rep.ok:
        profiles = build_profiles(spec)
        for t, prof in profiles.items():
            ok_u = bool(np.all((np.isnan(prof.u)) | ((1.0 + prof.v <= prof.u * (1 + 1e-12))
                                                      & (prof.u <= np.exp(prof.v) * (1 + 1e-12)))))
            checks = {"p(0) = 0": prof.p[0] == 0.0, "p'(0+) = 1": abs(prof.p_prime[0] - 1.0) < 1e-14,
                      "p increasing": bool(np.all(np.diff(prof.p) > 0)), "1+v <= u <= exp(v)": ok_u,
                      "m nondecreasing": bool(np.all(np.diff(prof.m_cdf) >= 0))}
            for name, ok in checks.items():
                result["invariants"].append({"theta": t, "check": name, "passed": bool(ok)})
                lines.append(f"  {name:<20} ray {_angle(t):<6} {'pass' if ok else 'FAIL'}")
    ok = rep.ok and all(x["passed"] for x in result["invariants"])
    result["ok"] = ok
    lines.append("conditions: " + ("ok" if ok else "FAILED"))
    return result, "\n".join(lines), (EXIT_OK if ok else EXIT_INVALID), None


def _checked_spec(args):
    spec = load_model(args.spec)
    rep = validate_conditions(spec)
    if not rep.ok:
        raise ConditionError(rep)
    return spec


def cmd_profile(args):
    spec = _checked_spec(args)
    thetas = spec.thetas if args.theta is None else [float(args.theta)]
    for t in thetas:
        if t not in spec.b:
            raise UnsupportedRayError(f"no ray with angle {t!r} in the model")
    profiles = build_profiles(spec, thetas, n_grid=args.n_grid)
    rays, table, lines = [], [], []
    for t, prof in profiles.items():
        rays.append({"theta": t, "ell": prof.ell, "radii": prof.grid, "p": prof.p, "p_prime": prof.p_prime,
                     "m": prof.m_cdf, "v": prof.v, "u": prof.u, "p_limit": prof.p_limit,
                     "v_limit": prof.v_limit, "m_limit": prof.m_limit, "vp_ratio_limit": prof.vp_ratio_limit})
        for k in range(prof.grid.size):
            table.append([t, prof.grid[k], prof.p[k], prof.p_prime[k], prof.m_cdf[k], prof.v[k], prof.u[k]])
        lines.append(f"ray {_angle(t)}: p(ell-) = {prof.p_limit:.8g}, v(ell-) = {prof.v_limit:.8g}, "
                     f"m(ell-) = {prof.m_limit:.8g} ({prof.grid.size} nodes)")
    return {"rays": rays}, _pretty("\n".join(lines)), EXIT_OK, (table, ["theta", "r", "p", "p_prime", "m", "v", "u"])


def cmd_classify(args):
    spec = _checked_spec(args)
    start = _start(args)
    rays = set(spec.nu.thetas) | ({start.theta} if not start.is_origin else set())
    profiles = build_profiles(spec, sorted(rays))
    verdict = classify_explosion(profiles, spec.nu, start)
    limit = classify_limit(profiles, spec.nu, start)
    lines = [f"case: {_pretty(verdict.text)}", f"limit: {verdict.limit_tag}",
             f"E[S] finite: {'yes' if verdict.finite_expectation else 'not established'}"]
    if verdict.m_bound is not None:
        lines.append(f"bound M(x) = {verdict.m_bound:.8g}")
    return {"verdict": verdict.to_json(), "limit": limit.to_json(), "start": str(start)}, \
        "\n".join(lines), EXIT_OK, None


def cmd_exit_law(args):
    spec = _checked_spec(args)
    start = _start(args)
    rays = set(spec.nu.thetas) | ({start.theta} if not start.is_origin else set())
    profiles = build_profiles(spec, sorted(rays))
    law = exit_angle_law(profiles, spec.nu, start)
    result = {"start": str(start), "analytic": law.to_json()}
    lines = ["{" + ", ".join(f"{_angle(t)}: {q:.6f}" for t, q in law.atoms) + "}"]
    table = [[t, q] for t, q in law.atoms]
    header = ["theta", "probability"]
    if args.mc:
        emp = mc_exit_law(spec, start, _sim_config(args))
        result["mc"] = emp.to_json()
        lines.append("mc: {" + ", ".join(f"{_angle(t)}: {q:.6f} [{lo:.4f}, {hi:.4f}]"
                                          for t, q, lo, hi in emp.atoms) + "}"
                     + f", exploded {emp.exploded}/{emp.paths}")
        table = [[t, q, emp.prob(t)] for t, q in law.atoms]
        header = ["theta", "probability", "mc_frequency"]
    return result, "\n".join(lines), EXIT_OK, (table, header)


def cmd_simulate(args):
    spec = _checked_spec(args)
    start = _start(args)
    cfg = _sim_config(args)
    eps = args.eps if args.eps is not None else 4.0 * math.sqrt(cfg.step)
    summ = run_paths(spec, start, cfg, eps)
    status = {name: int(np.sum(summ.status == code)) for code, name in
              ((1, "exploded"), (2, "overflow"), (3, "horizon"), (4, "stopped"))}
    occ = summ.occupation.mean(axis=0) / (2.0 * eps)
    result = {"start": str(start), "paths": cfg.paths, "step": cfg.step, "horizon": cfg.horizon,
              "scheme": cfg.scheme, "seed": cfg.seed, "status": status,
              "local_time": {"mean": float(summ.local_time.mean()), "eps": eps,
                             "occupation": [{"theta": t, "mean": float(occ[k])} for k, t in enumerate(summ.rays)]},
              "final_radius_mean": float(summ.final_r.mean())}
    if status["exploded"]:
        result["exit_law"] = exit_law_from(summ).to_json()
    lines = [f"{cfg.paths} paths: " + ", ".join(f"{k} {v}" for k, v in status.items()),
             f"mean local time {summ.local_time.mean():.6g}"]
    if args.fs:
        tests = [TestFunction.radius(spec.thetas), TestFunction.power(2, spec.thetas)]
        n_fs = min(cfg.paths, args.fs)
        res = np.empty((n_fs, len(tests)))
        for i in range(n_fs):
            rec = simulate_path(spec, start, cfg, stream=i)
            res[i] = [fs_residual(rec, g, spec.nu)[-1] for g in tests]
        result["fs_residuals"] = [{"g": g.name, "mean": float(res[:, j].mean()),
                                   "se": float(res[:, j].std(ddof=1) / math.sqrt(n_fs)) if n_fs > 1 else None}
                                  for j, g in enumerate(tests)]
        lines += [f"FS residual {r['g']}: {r['mean']:.3g}" for r in result["fs_residuals"]]
    if args.dump:
        with open(args.dump, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "t", "r", "theta", "L"])
            for i in range(min(cfg.paths, args.dump_paths)):
                rec = simulate_path(spec, start, cfg, stream=i)
                w.writerows([[_cell(x) for x in row] for row in rec.to_rows(i)])
        lines.append(f"paths written to {args.dump}")
    return result, "\n".join(lines), EXIT_OK, None


def cmd_stop(args):
    spec = _checked_spec(args)
    reward = Reward.from_json(load_json(args.reward))
    sol = solve_stopping(spec, reward, args.tol)
    lines = [f"c0 = {sol.c0:.8f}"]
    for t in sorted(sol.stop_region):
        ivs = ", ".join(f"[{a:.6g}, {b:.6g}]" for a, b in sol.stop_region[t]) or "none"
        lines.append(f"ray {_angle(t)}: stop on {ivs}")
    lines.append(f"origin in stop region: {sol.origin_in_region}")
    return sol.to_json(), "\n".join(lines), EXIT_OK, None


def cmd_control(args):
    ctrl = ControlSpec.from_json(load_json(args.control))
    ctrl.validate()
    reward = Reward.from_json(load_json(args.reward))
    sol = solve_cstar(ctrl, None, reward, args.tol)
    lines = [f"c* = {sol.c_star:.8f}"] + [f"ray {_angle(s.theta)}: {s.label}: {s.description}"
                                          for s in sol.strategy]
    return sol.to_json(), "\n".join(lines), EXIT_OK, None


COMMANDS = {"check": cmd_check, "profile": cmd_profile, "classify": cmd_classify, "exit-law": cmd_exit_law,
            "simulate": cmd_simulate, "stop": cmd_stop, "control": cmd_control}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--format", choices=("json", "csv", "text"), default="json")
    common.add_argument("--out", help="write the result here instead of stdout")
    common.add_argument("--threads", type=int, default=None, help="maximum worker threads")

    sim = _Parser(add_help=False)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--paths", type=int, default=1000)
    sim.add_argument("--step", type=float, default=1e-4)
    sim.add_argument("--horizon", type=float, default=20.0)
    sim.add_argument("--scheme", choices=sorted(SCHEMES), default=EULER)

    p = _Parser(prog="walshlab", description="Walsh diffusions: scale, explosion, simulation, stopping, control.")
    p.add_argument("--version", action="version", version=f"walshlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model(name, help_, *parents):
        sp = sub.add_parser(name, help=help_, parents=[common, *parents])
        sp.add_argument("--spec", required=True, help="model JSON file")
        return sp

    model("check", "regularity conditions and profile invariants")
    sp = model("profile", "scale, speed and Feller tables")
    sp.add_argument("--theta", type=float, default=None)
    sp.add_argument("--n-grid", type=int, default=32)
    sp = model("classify", "explosion case and limit behaviour")
    sp.add_argument("--start", default="origin", help="'origin' or r@theta")
    sp = model("exit-law", "law of the exit angle", sim)
    sp.add_argument("--start", default="origin")
    sp.add_argument("--mc", action="store_true", help="add a Monte Carlo estimate")
    sp = model("simulate", "Monte Carlo paths and diagnostics", sim)
    sp.add_argument("--start", default="origin")
    sp.add_argument("--eps", type=float, default=None, help="occupation window for local time")
    sp.add_argument("--fs", type=int, default=0, help="paths used for change-of-variable residuals")
    sp.add_argument("--dump", default=None, help="CSV file for recorded paths")
    sp.add_argument("--dump-paths", type=int, default=10)
    sp = model("stop", "optimal stopping on the unit disc")
    sp.add_argument("--reward", required=True)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp = sub.add_parser("control", help="control with discretionary stopping", parents=[common])
    sp.add_argument("--control", required=True, help="control JSON file")
    sp.add_argument("--reward", required=True)
    sp.add_argument("--tol", type=float, default=1e-10)
    return p


def _setup_logging():
    level = os.environ.get("WALSH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "tol", 1.0) <= 0 or getattr(args, "paths", 1) < 1:
            raise UsageError("--tol must be positive and --paths at least 1")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        result, summary, code, table = COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        return EXIT_USAGE
    except NotApplicableError as exc:
        sys.stderr.write(f"not applicable: {exc}\n")
        return EXIT_NA
    except (SpecError, ConditionError, ConfigError, UnsupportedRayError, OutOfDomainError, RangeError,
            OSError, json.JSONDecodeError, ValueError) as exc:
        sys.stderr.write(f"invalid input: {exc}\n")
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        sys.stderr.write(f"internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL
    text = render(result, args.format, *(table or (None, ())))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    sys.stderr.write(summary.rstrip() + "\n")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
