"""Command-line front-end.

Verbs: resonances, wbnf, twist, spectrum, measure, solve, evolve.
Configuration is a single INI file (key-value with sections, whitespace
separated lists); see README for the schema.  Every artifact embeds the
sha256 hash of the canonicalized configuration, and floating values are
printed with 17 significant digits so identical configs produce
byte-identical outputs.

Exit codes: 0 pass, 1 assertion failure, 2 budget/resource, 3 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import traceback
from fractions import Fraction

import numpy as np

from .core import ScalingParams, TangentialSet, float_fmt, fraction_str
from . import measure as measure_mod
from . import spectrum as spectrum_mod
from . import torus as torus_mod
from . import twist as twist_mod
from . import wbnf as wbnf_mod
from .polyham import serialize

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_BUDGET = 2
EXIT_USAGE = 3


class UsageError(RuntimeError):
    pass


def _parse_fraction(text: str) -> Fraction:
    return Fraction(text.strip())


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cp = configparser.ConfigParser()
    if path:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        cp.read(path)
    cfg: dict = {s: dict(cp.items(s)) for s in cp.sections()}
    for key, val in (overrides or {}).items():
        sect, name = key.split(".", 1)
        cfg.setdefault(sect, {})[name] = val
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _require(cfg: dict, sect: str, name: str) -> str:
    try:
        return cfg[sect][name]
    except KeyError:
        raise UsageError(f"missing config field [{sect}] {name}") from None


def _get(cfg: dict, sect: str, name: str, default=None):
    return cfg.get(sect, {}).get(name, default)


def _tangential_set(cfg: dict) -> TangentialSet:
    sites = [int(v) for v in _require(cfg, "problem", "splus").split()]
    return TangentialSet.make(sites)


def _scaling(cfg: dict, S: TangentialSet) -> ScalingParams:
    eps = float(_require(cfg, "problem", "epsilon"))
    a = float(_get(cfg, "problem", "a", "0.1"))
    return ScalingParams(epsilon=eps, a=a, nu=S.nu)


def _xi(cfg: dict, S: TangentialSet) -> list[Fraction]:
    raw = _get(cfg, "problem", "xi")
    if raw is None:
        return [Fraction(3, 2)] * S.nu
    vals = [_parse_fraction(v) for v in raw.split()]
    if len(vals) != S.nu:
        raise UsageError(f"xi must have {S.nu} entries")
    return vals


def _f_spec(cfg: dict) -> torus_mod.FSpec:
    raw = _get(cfg, "problem", "f_coeffs")
    if not raw:
        return torus_mod.FSpec()
    coeffs = {}
    for item in raw.split():
        k, v = item.split(":")
        coeffs[int(k)] = float(v)
    return torus_mod.FSpec(coeffs)


def _write(outdir: str, name: str, text: str) -> str:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _summary(outdir: str, cfg: dict, command: str, checks: list[dict]) -> bool:
    ok = all(c["pass"] for c in checks)
    payload = {
        "command": command,
        "config_hash": config_hash(cfg),
        "pass": ok,
        "checks": checks,
    }
    _write(outdir, "summary.json", json.dumps(payload, indent=2, sort_keys=True))
    return ok


# -- verbs ---------------------------------------------------------------------


def cmd_resonances(cfg: dict, outdir: str, budget: int) -> int:
    order = int(_get(cfg, "scan", "order", "4"))
    bound = int(_get(cfg, "scan", "bound", "40"))
    m_cap = int(_get(cfg, "scan", "m_cap", "8"))
    if order > wbnf_mod.DEGREE_CAP:
        raise UsageError(f"order capped at {wbnf_mod.DEGREE_CAP}")
    try:
        tuples = wbnf_mod.enumerate_h2_resonances(order, bound, budget=budget, m_cap=m_cap)
    except wbnf_mod.BudgetExceeded as exc:
        _write(outdir, "resonances.csv", f"# budget exceeded: {exc}\n")
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    lines = ["order,indices,m_resonant_up_to,trivial,permutations"]
    nontrivial_resonant = []
    for t in tuples:
        lines.append(
            f"{t.order},{' '.join(map(str, t.indices))},{t.m_resonant_up_to},"
            f"{int(t.trivial)},{t.permutations}"
        )
        if not t.trivial and t.m_resonant_up_to >= 3:
            nontrivial_resonant.append(t)
    _write(outdir, "resonances.csv", "\n".join(lines) + "\n")
    checks = [
        {
            "check": "resonance_triviality",
            "value": len(nontrivial_resonant),
            "threshold": 0,
            "witness": str([t.indices for t in nontrivial_resonant[:3]]),
            "pass": not nontrivial_resonant,
        }
    ]
    return EXIT_PASS if _summary(outdir, cfg, "resonances", checks) else EXIT_FAIL


def cmd_wbnf(cfg: dict, outdir: str, budget: int) -> int:
    S = _tangential_set(cfg)
    max_order = int(_get(cfg, "scan", "max_order", "2"))
    try:
        res = wbnf_mod.run_wbnf(S, max_order, budget=budget)
    except wbnf_mod.BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    for deg, gen in res.generators.items():
        _write(outdir, f"generator_deg{deg}.txt", serialize(gen))
    for deg, z in res.z_pieces.items():
        _write(outdir, f"normalform_deg{deg}.txt", serialize(z))
    checks = []
    if 4 in res.z_pieces:
        closed = wbnf_mod.h40_closed_form(S)
        checks.append(
            {
                "check": "degree4_closed_form",
                "value": "exact" if res.z_pieces[4].terms == closed.terms else "mismatch",
                "threshold": "exact",
                "witness": f"{len(closed)} monomials",
                "pass": res.z_pieces[4].terms == closed.terms,
            }
        )
    odd_ok = all(res.z_pieces[d].is_zero() for d in res.z_pieces if d % 2 == 1)
    checks.append(
        {"check": "odd_kernels_vanish", "value": odd_ok, "threshold": True,
         "witness": "", "pass": odd_ok}
    )
    return EXIT_PASS if _summary(outdir, cfg, "wbnf", checks) else EXIT_FAIL


def cmd_twist(cfg: dict, outdir: str, budget: int) -> int:
    S = _tangential_set(cfg)
    td = twist_mod.twist_matrix(S)
    report = twist_mod.nondegeneracy_report(
        S, j_bound=int(_get(cfg, "scan", "j_bound", "60"))
    )
    _write(outdir, "nondegeneracy.json", report.to_json())
    det_norm = abs(td.det_A) / Fraction(S.jbar1) ** (3 * S.nu)
    payload = {
        "splus": list(S.splus),
        "det_A": fraction_str(td.det_A),
        "det_A_float": float_fmt(float(td.det_A)),
        "det_normalized": float_fmt(float(det_norm)),
        "omega_bar": [fraction_str(w) for w in td.omega_bar],
    }
    _write(outdir, "twist.json", json.dumps(payload, indent=2))
    checks = [
        {"check": "det_nonzero", "value": float_fmt(float(td.det_A)),
         "threshold": "!= 0", "witness": "", "pass": td.det_A != 0},
        {"check": "nondegeneracy", "value": report.all_pass(),
         "threshold": True, "witness": "", "pass": report.all_pass()},
    ]
    return EXIT_PASS if _summary(outdir, cfg, "twist", checks) else EXIT_FAIL


def cmd_spectrum(cfg: dict, outdir: str, budget: int) -> int:
    S = _tangential_set(cfg)
    sc = _scaling(cfg, S)
    xi = _xi(cfg, S)
    model = spectrum_mod.EigenModel(S, tuple(xi), sc)
    j_lo = int(_get(cfg, "scan", "spectrum_j_min", str(S.jbar1 + 1)))
    j_hi = int(_get(cfg, "scan", "spectrum_j_max", "60"))
    js = [j for j in range(j_lo, j_hi + 1) if S.in_sc(j)]
    _write(outdir, "spectrum.csv", model.csv(js))

    ident_hi = int(_get(cfg, "scan", "ident_j_max", "30"))
    ident_all = True
    for j in range(S.jbar1 + 1, ident_hi + 1):
        if not S.in_sc(j):
            continue
        _, _, ok = spectrum_mod.identification_check(S, j)
        ident_all = ident_all and ok
    wb = wbnf_mod.run_wbnf(S, 1)
    try:
        spectrum_mod.c_via_f2(S, xi, wb.generators[3])
        c_ok = True
    except spectrum_mod.SpectrumError:
        c_ok = False
    scan = spectrum_mod.min_divisor_scan(
        S, j_bound=int(_get(cfg, "scan", "j_bound", "2000"))
    )
    checks = [
        {"check": "identification_sweep", "value": ident_all, "threshold": True,
         "witness": f"j <= {ident_hi}", "pass": ident_all},
        {"check": "c_via_f2", "value": c_ok, "threshold": True, "witness": "",
         "pass": c_ok},
        {"check": "min_divisor_positive", "value": float_fmt(float(scan.min_abs)),
         "threshold": "> 0",
         "witness": f"ell={scan.witness.ell}, j={scan.witness.j}, j'={scan.witness.jp}",
         "pass": scan.min_abs > 0},
    ]
    return EXIT_PASS if _summary(outdir, cfg, "spectrum", checks) else EXIT_FAIL


def cmd_measure(cfg: dict, outdir: str, budget: int, seed: int, threads: int = 0) -> int:
    S = _tangential_set(cfg)
    a = float(_get(cfg, "problem", "a", "0.1"))
    family = _get(cfg, "mc", "family", "G0_0")
    samples = int(_get(cfg, "mc", "samples", "100000"))
    eps_values = [
        float(v)
        for v in _get(cfg, "mc", "eps_values", "0.04 0.057 0.08 0.113 0.16").split()
    ]
    if threads <= 0:
        threads = os.cpu_count() or 1
    sweep = measure_mod.measure_sweep(
        S, a, eps_values, family, samples, seed,
        c_g1=float(_get(cfg, "mc", "c_g1", "1.0")),
        ell_max=int(_get(cfg, "mc", "ell_max", "20")),
        threads=threads,
    )
    lines = ["eps,gamma,samples,excluded,fraction,stderr,volume,measure"]
    for est in sweep.estimates:
        g = est.eps ** (2.0 + a)
        lines.append(
            f"{float_fmt(est.eps)},{float_fmt(g)},{est.samples},{est.excluded},"
            f"{float_fmt(est.fraction)},{float_fmt(est.stderr)},"
            f"{float_fmt(est.volume)},{float_fmt(est.measure)}"
        )
    _write(outdir, "measure.csv", "\n".join(lines) + "\n")
    summary = {
        "family": family,
        "samples": samples,
        "fractions": [float_fmt(e.fraction) for e in sweep.estimates],
        "stderr": [float_fmt(e.stderr) for e in sweep.estimates],
        "fitted_exponent": float_fmt(sweep.slope),
        "fitted_exponent_stderr": float_fmt(sweep.slope_stderr),
        "theory_exponent": float_fmt(sweep.theory_slope),
        "notes": sweep.estimates[0].notes,
    }
    if family == "G0_0":
        # deterministic cross-check: exact per-slab quadrature of the same
        # exclusion condition (union bound), exposing magnitudes that may be
        # below Monte-Carlo resolution
        from .core import ScalingParams as _SP

        slabs = []
        for eps in eps_values:
            cfgq = measure_mod.MelnikovConfig(
                scaling=_SP(epsilon=eps, a=a, nu=S.nu),
                ell_max=int(_get(cfg, "mc", "ell_max", "20")),
            )
            slabs.append(float_fmt(measure_mod.g0_slab_measure(S, cfgq)))
        summary["slab_quadrature_fractions"] = slabs
    _write(outdir, "measure_summary.json", json.dumps(summary, indent=2))
    ok = sweep.slope_consistent()
    checks = [
        {"check": "scaling_exponent", "value": float_fmt(sweep.slope),
         "threshold": f"{float_fmt(sweep.theory_slope)} +- 3 sigma",
         "witness": f"stderr {float_fmt(sweep.slope_stderr)}", "pass": bool(ok)}
    ]
    return EXIT_PASS if _summary(outdir, cfg, "measure", checks) else EXIT_FAIL


def _torus_problem(cfg: dict) -> torus_mod.TorusProblem:
    S = _tangential_set(cfg)
    sc = _scaling(cfg, S)
    xi = _xi(cfg, S)
    n_x = int(_get(cfg, "truncation", "n_x", "24"))
    n_phi = int(_get(cfg, "truncation", "n_phi", "12"))
    grid = torus_mod.TruncationGrid(n_x=n_x, n_phi=n_phi, jbar1=S.jbar1)
    eps_frac = Fraction(str(sc.epsilon)).limit_denominator(10**12)
    omega = np.array(
        [float(w) for w in twist_mod.frequency_map(S, xi, eps_frac)]
    )
    return torus_mod.TorusProblem(
        S=S, grid=grid, xi=tuple(float(v) for v in xi), scaling=sc, omega=omega,
        f_spec=_f_spec(cfg),
    )


def cmd_solve(cfg: dict, outdir: str, budget: int) -> int:
    prob = _torus_problem(cfg)
    sched = torus_mod.NewtonSchedule(
        n0=float(_get(cfg, "solve", "n0", "4")),
        chi=float(_get(cfg, "solve", "chi", "1.5")),
        max_iter=int(_get(cfg, "solve", "max_iter", "12")),
        tol=float(_get(cfg, "solve", "tol", "1e-10")),
    )
    try:
        sol = torus_mod.newton_solve(prob, schedule=sched)
    except torus_mod.TorusError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        _summary(outdir, cfg, "solve", [
            {"check": "newton_converged", "value": str(exc), "threshold": "",
             "witness": "", "pass": False}])
        return EXIT_FAIL
    os.makedirs(outdir, exist_ok=True)
    digest = torus_mod.save_embedding(sol.emb, os.path.join(outdir, "torus.json"))
    hist = "\n".join(float_fmt(r) for r in sol.residuals)
    _write(outdir, "residual_history.txt", hist + "\n")
    checks = [
        {"check": "newton_converged", "value": bool(sol.converged),
         "threshold": f"sup residual < {sched.tol}",
         "witness": f"{sol.iterations} iterations, final "
                    f"{float_fmt(sol.residuals[-1])}, checkpoint {digest}",
         "pass": bool(sol.converged)},
        {"check": "counterterm_small",
         "value": float_fmt(float(np.abs(sol.emb.zeta).max())),
         "threshold": "< 1e-9",
         "witness": "", "pass": bool(np.abs(sol.emb.zeta).max() < 1e-9)},
    ]
    return EXIT_PASS if _summary(outdir, cfg, "solve", checks) else EXIT_FAIL


def cmd_evolve(cfg: dict, outdir: str, budget: int) -> int:
    prob = _torus_problem(cfg)
    checkpoint = _get(cfg, "evolve", "checkpoint")
    if checkpoint:
        emb = torus_mod.load_embedding(checkpoint)
    else:
        sol = torus_mod.newton_solve(prob)
        if not sol.converged:
            print("newton did not converge; cannot evolve", file=sys.stderr)
            return EXIT_FAIL
        emb = sol.emb
    u0 = torus_mod.action_angle_embed(prob, emb, (0.0, 0.0))
    T = float(_get(cfg, "evolve", "T", "100"))
    n_modes = int(_get(cfg, "evolve", "n_modes", "64"))
    res = torus_mod.evolve(u0, T=T, n_modes=n_modes, f_spec=prob.f_spec)
    lines = ["t,H,K1,sup_norm_u"]
    for t, h, k1, s in zip(res.times, res.h_values, res.k1_values, res.sup_values):
        lines.append(f"{float_fmt(t)},{float_fmt(h)},{float_fmt(k1)},{float_fmt(s)}")
    _write(outdir, "trajectory.csv", "\n".join(lines) + "\n")
    tol = float(_get(cfg, "evolve", "drift_tol", "1e-6"))
    checks = [
        {"check": "H_drift", "value": float_fmt(res.h_drift), "threshold": f"< {tol}",
         "witness": f"T={T}", "pass": bool(res.h_drift < tol)},
        {"check": "K1_drift", "value": float_fmt(res.k1_drift), "threshold": f"< {tol}",
         "witness": f"T={T}", "pass": bool(res.k1_drift < tol)},
    ]
    return EXIT_PASS if _summary(outdir, cfg, "evolve", checks) else EXIT_FAIL


COMMANDS = {
    "resonances": cmd_resonances,
    "wbnf": cmd_wbnf,
    "twist": cmd_twist,
    "spectrum": cmd_spectrum,
    "measure": cmd_measure,
    "solve": cmd_solve,
    "evolve": cmd_evolve,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dpkam",
        description="Desk-scale KAM toolkit for the dispersive DP equation",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=1234)
    parser.add_argument("--threads", type=int, default=0,
                        help="worker parallelism (0 = automatic)")
    parser.add_argument("--budget", type=int, default=wbnf_mod.DEFAULT_BUDGET)
    parser.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="config override")
    args = parser.parse_args(argv)

    try:
        overrides = {}
        for item in args.set:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise UsageError(f"bad override {item!r}; use section.key=value")
            key, val = item.split("=", 1)
            overrides[key] = val
        cfg = load_config(args.config, overrides)
        fn = COMMANDS[args.command]
        if args.command == "measure":
            return fn(cfg, args.out, args.budget, args.seed, args.threads)
        return fn(cfg, args.out, args.budget)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (wbnf_mod.BudgetExceeded,) as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except Exception:
        traceback.print_exc()
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
