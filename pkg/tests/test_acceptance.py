"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 and 10 are implemented exactly as stated and are expected to be
red at desk scale; the analysis lives in the failure messages (the zeroth
Melnikov exclusions are ~1e-12 of the box, far below Monte-Carlo resolution,
and the matched eigenvalue deviations scale as eps^4 because a phase-shift
parity forbids the odd orders, outside the stated [6, 10] halving window).
"""
import time
from fractions import Fraction

import numpy as np
import pytest

from dpkam.core import (
    ScalingParams,
    TangentialSet,
    is_in_wave_packet_class,
    lam,
)
from dpkam.measure import MelnikovConfig, g0_slab_measure, measure_sweep
from dpkam.spectrum import (
    EigenModel,
    c_of_xi,
    c_via_f2,
    divisor_closed_form_ell1,
    divisor_closed_form_ell2,
    ell_j_form,
    identification_check,
    kappa_j,
    momentum_ells,
    omega_bar_dot,
)
from dpkam.twist import (
    b_jk,
    frequency_map,
    normalized_det,
    normalized_det_limit_form,
    twist_matrix,
)
from dpkam.torus import (
    NewtonSchedule,
    TorusProblem,
    TruncationGrid,
    action_angle_embed,
    evolve,
    linearized_normal_operator,
    newton_solve,
)
from dpkam.wbnf import (
    enumerate_h2_resonances,
    h40_closed_form,
    run_wbnf,
    twist_cross_sum,
    weight_sum,
)

S67 = TangentialSet.make([6, 7])
XI = (Fraction(13, 10), Fraction(17, 10))
ACCEPTANCE_SETS = ([6, 7], [11, 12], [20, 21, 22])


def report(num: int, ok: bool, detail: str) -> None:
    print(f"[ACCEPTANCE {num:02d}] {'PASS' if ok else 'FAIL'}: {detail}")


def solve_at(eps_frac: Fraction):
    eps = float(eps_frac)
    sc = ScalingParams(epsilon=eps, a=0.1, nu=2)
    grid = TruncationGrid(n_x=24, n_phi=12, jbar1=7)
    omega = np.array([float(w) for w in frequency_map(S67, list(XI), eps_frac)])
    prob = TorusProblem(S=S67, grid=grid, xi=(1.3, 1.7), scaling=sc, omega=omega)
    sol = newton_solve(prob, schedule=NewtonSchedule(n0=4.0, chi=1.5, max_iter=8))
    return prob, sol


@pytest.fixture(scope="module")
def torus_1em3():
    return solve_at(Fraction(1, 1000))


def test_criterion_01_resonance_triviality():
    t0 = time.monotonic()
    offenders = []
    for order in (3, 4, 5, 6):
        for t in enumerate_h2_resonances(order, 40, m_cap=8):
            if not t.trivial and t.m_resonant_up_to >= 3:
                offenders.append(t.indices)
    elapsed = time.monotonic() - t0
    small = {t.indices: t for t in enumerate_h2_resonances(4, 3)}
    found = (-3, -1, 2, 2) in small
    r2 = weight_sum((-3, -1, 2, 2), 2)
    ok = not offenders and found and r2 == -240 and elapsed <= 300
    report(
        1,
        ok,
        f"{len(offenders)} nontrivial M-resonances (orders 3-6, B=40, M=8); "
        f"(-3,-1,2,2) found={found} with r=2 value {r2}; {elapsed:.1f}s",
    )
    assert not offenders
    assert found and r2 == -240
    assert elapsed <= 300


def test_criterion_02_weak_bnf_degree4():
    details = []
    ok = True
    for sites in ACCEPTANCE_SETS:
        S = TangentialSet.make(sites)
        res = run_wbnf(S, 3)
        closed = h40_closed_form(S)
        good = (
            res.z_pieces[3].is_zero()
            and res.z_pieces[5].is_zero()
            and res.z1_pieces[4].is_zero()
            and res.z_pieces[4].terms == closed.terms
        )
        ok = ok and good
        details.append(f"{sites}:{'ok' if good else 'MISMATCH'}")
    report(2, ok, "; ".join(details))
    assert ok


def test_criterion_03_twist_structure():
    # (a) cross-sum identity on all pairs of the acceptance sets
    pair_ok = True
    for sites in ACCEPTANCE_SETS:
        for i, j in enumerate(sites):
            for k in sites[i + 1:]:
                pair_ok = pair_ok and b_jk(j, k) == twist_cross_sum(j, k)
    assert b_jk(1, 2) == Fraction(13, 6) - Fraction(25, 18) == Fraction(7, 9)

    # (b) normalized determinant vs the closed form at p = 1, 20 rational x
    det_ok = True
    for n in range(20):
        x = Fraction(n, 41)
        for nu in (2, 3):
            det_ok = det_ok and normalized_det(x, [Fraction(1)] * nu) == \
                normalized_det_limit_form(x, nu)

    # (c) adjacent-site scan: |det A| / jbar1^(3 nu) bounded below
    ratios = []
    for m in range(20, 201):
        S = TangentialSet.make([m - 1, m])
        assert is_in_wave_packet_class(S, Fraction(1, 10))
        td = twist_matrix(S)
        ratios.append(abs(td.det_A) / Fraction(m) ** 6)
    for m in range(22, 201, 2):
        S = TangentialSet.make([m - 2, m - 1, m])
        assert is_in_wave_packet_class(S, Fraction(1, 10))
        td = twist_matrix(S)
        ratios.append(abs(td.det_A) / Fraction(m) ** 9)
    cstar = min(ratios)
    ok = pair_ok and det_ok and cstar > 0
    report(
        3,
        ok,
        f"cross sums exact={pair_ok}; normalized det exact={det_ok}; "
        f"measured c* = {float(cstar):.4f} > 0 over {len(ratios)} sets",
    )
    assert ok


def test_criterion_04_identification():
    bad = []
    for j in range(8, 31):
        if not S67.in_sc(j):
            continue
        lhs, rhs, ok = identification_check(S67, j)
        if not ok:
            bad.append((j, lhs, rhs))
    # the two printed forms of the diagonal correction agree for j <= 60
    # (ell_j_form raises on any mismatch)
    for j in range(8, 61):
        if S67.in_sc(j):
            ell_j_form(S67, j)
    report(4, not bad, f"exact identification for j in 8..30 minus S; "
                       f"{len(bad)} mismatches; both l_j forms agree to j=60")
    assert not bad


def test_criterion_05_reduction_constant():
    wb = run_wbnf(S67, 1)
    F3 = wb.generators[3]
    import random

    rng = random.Random(2024)
    ok = True
    for _ in range(10):
        xi = [Fraction(rng.randint(1, 50), rng.randint(1, 25)) for _ in range(2)]
        ok = ok and c_via_f2(S67, xi, F3) == c_of_xi(S67, xi)
    report(5, ok, "c from the transport average equals (2/3) sum (1+j^2) xi_j "
                  "for 10 random rational xi")
    assert ok


def test_criterion_06_eigenvalue_decay():
    xi = (Fraction(1), Fraction(1))
    c = c_of_xi(S67, xi)
    best = Fraction(0)
    best_j = None
    val_1000 = None
    for j in range(1, 10001):
        if not S67.in_sc(j):
            continue
        k = kappa_j(S67, xi, j)  # odd in j, so positive j suffice
        v = abs(j * k)
        if v > best:
            best, best_j = v, j
        if j == 1000:
            val_1000 = j * k
    rel = abs(float(val_1000 + 3 * c)) / float(3 * c)
    ok = best_j is not None and best_j <= 50 and rel < 1e-2
    report(
        6,
        ok,
        f"sup |j kappa_j| = {float(best):.4f} attained at j = {best_j}; "
        f"j kappa_j at j=1000 within {rel:.2e} of -3c",
    )
    assert best_j <= 50
    assert rel < 1e-2


def _divisor_scan(j_bound: int):
    best = None
    for ell, shift in momentum_ells(S67, 2):
        base = omega_bar_dot(S67, ell)
        sites = []
        rem = list(ell)
        for s, e in zip(S67.splus, ell):
            sites.extend([s * (1 if e > 0 else -1)] * abs(e))
        for j in range(-j_bound, j_bound + 1):
            if not S67.in_sc(j):
                continue
            jp = j + shift
            if not S67.in_sc(jp):
                continue
            delta = base + lam(j) - lam(jp)
            if len(sites) == 1:
                closed = divisor_closed_form_ell1(jp, j)
            else:
                closed = divisor_closed_form_ell2(sites[0], sites[1], j)
            assert delta == closed, (ell, j, jp)
            if delta != 0:
                a = abs(delta)
                if best is None or a < best:
                    best = a
    return best


def test_criterion_07_small_divisors():
    t0 = time.monotonic()
    m1 = _divisor_scan(2000)
    m2 = _divisor_scan(4000)
    change = abs(float(m1) - float(m2))
    ok = m1 > 0 and change < 1e-12
    report(
        7,
        ok,
        f"closed forms exact on |l|<=2, |j|<=4000; min|delta| = {float(m1):.6f} "
        f"> 0; change under bound doubling {change:.1e} "
        f"({time.monotonic() - t0:.0f}s)",
    )
    assert m1 > 0
    assert change < 1e-12


def test_criterion_08_measure_scaling():
    """Implemented exactly as stated.  At these parameters the zeroth
    Melnikov exclusion widths gamma <l>^-tau (tau = 10) make the excluded
    fraction ~1e-12 of the box (see the exact slab quadrature printed below),
    so 1e5 Monte-Carlo samples per point see zero exclusions and no log-log
    slope exists.  This is a defect of the stated criterion, not of the
    estimator; the measure lemma's scaling is out of Monte-Carlo reach at
    desk scale."""
    t0 = time.monotonic()
    eps_values = [0.04, 0.057, 0.08, 0.113, 0.16]
    sweep = measure_sweep(
        S67, 0.1, eps_values, "G0_0", samples=100000, seed=20260810, ell_max=20
    )
    slabs = []
    for eps in eps_values:
        cfg = MelnikovConfig(
            scaling=ScalingParams(epsilon=eps, a=0.1, nu=2), ell_max=20
        )
        slabs.append(g0_slab_measure(S67, cfg))
    elapsed = time.monotonic() - t0
    counts = [e.excluded for e in sweep.estimates]
    ok = sweep.slope_consistent(3.0) and elapsed <= 600
    report(
        8,
        ok,
        f"MC exclusions {counts} of 1e5; fitted slope {sweep.slope} "
        f"(theory {sweep.theory_slope}); exact slab fractions "
        f"{['%.2e' % s for s in slabs]}; {elapsed:.0f}s",
    )
    assert elapsed <= 600
    assert sweep.slope_consistent(3.0), (
        "no measurable G0_0 exclusions at desk scale: the per-ell width "
        "gamma <l>^-10 puts the true excluded fraction at "
        f"{max(slabs):.2e} or below, unreachable with 1e5 samples "
        f"(MC counts {counts}); the stated slope test cannot be performed"
    )


def test_criterion_09_torus_solve(torus_1em3):
    t0 = time.monotonic()
    prob, sol = torus_1em3
    elapsed = time.monotonic() - t0
    from dpkam.measure import MelnikovConfig, in_g0

    cfg = MelnikovConfig(
        scaling=ScalingParams(epsilon=1e-3, a=0.1, nu=2), ell_max=12
    )
    f0, f1 = in_g0(list(prob.omega), S67, cfg, xi=[1.3, 1.7])
    zeta = float(np.abs(sol.emb.zeta).max())
    ok = (
        f0 and f1
        and sol.converged
        and sol.iterations <= 8
        and sol.residuals[-1] < 1e-10
        and zeta < 1e-9
    )
    report(
        9,
        ok,
        f"omega in G0 = {f0 and f1}; converged in {sol.iterations} iterations "
        f"to sup residual {sol.residuals[-1]:.2e}; |zeta| = {zeta:.2e}",
    )
    assert f0 and f1
    assert sol.converged and sol.iterations <= 8
    assert sol.residuals[-1] < 1e-10
    assert zeta < 1e-9


def test_criterion_10_spectrum_order(torus_1em3):
    """Real parts pass at 1e-10.  The halving-ratio window [6, 10] is
    unattainable: shifting every angle by pi maps the wave packet to its
    negative while fixing the epsilon-even data, so matched eigenvalues are
    even functions of epsilon; the deviation from the first-order model is
    O(eps^4) and the measured ratios sit near 16, one order better than the
    O(eps^3) the criterion encodes (and above the construction's own
    eps^(4-3a) residual bound, ratio 2^3.7 = 13)."""
    devs = {}
    remax = 0.0
    for eps_f in (Fraction(1, 250), Fraction(1, 500)):
        prob, sol = solve_at(eps_f)
        op = linearized_normal_operator(prob, sol.emb, ell_cut=6, phib_order=2)
        model = EigenModel(S67, XI, prob.scaling)
        remax = max(remax, float(np.abs(op.eigvals.real).max()))
        devs[float(eps_f)] = {
            j: abs(op.matched[((0, 0), j)] + 1j * model.d0(j))
            for j in (3, 4, 5, 8, 9, 10)
        }
    prob, sol = torus_1em3
    op = linearized_normal_operator(prob, sol.emb, ell_cut=6, phib_order=2)
    model = EigenModel(S67, XI, prob.scaling)
    remax = max(remax, float(np.abs(op.eigvals.real).max()))
    devs[1e-3] = {
        j: abs(op.matched[((0, 0), j)] + 1j * model.d0(j))
        for j in (3, 4, 5, 8, 9, 10)
    }
    ratios = {}
    for j in (3, 4, 5, 8, 9, 10):
        ratios[j] = (devs[0.004][j] / devs[0.002][j],
                     devs[0.002][j] / devs[0.001][j])
    in_window = all(6 <= r <= 10 for pair in ratios.values() for r in pair)
    ok = in_window and remax < 1e-10
    report(
        10,
        ok,
        f"max |Re eig| = {remax:.2e} (< 1e-10: {remax < 1e-10}); halving "
        f"ratios {dict((j, (round(a, 1), round(b, 1))) for j, (a, b) in ratios.items())} "
        f"vs stated window [6, 10]",
    )
    assert remax < 1e-10
    assert in_window, (
        "matched eigenvalue deviations scale as eps^4 (parity in eps), "
        f"measured halving ratios {ratios} lie above the stated [6, 10] window"
    )


def test_criterion_11_conservation(torus_1em3):
    prob, sol = torus_1em3
    u0 = action_angle_embed(prob, sol.emb, (0.0, 0.0))
    res = evolve(u0, T=100.0, n_modes=64, rtol=1e-10)
    ok = res.h_drift < 1e-6 and res.k1_drift < 1e-6
    report(
        11,
        ok,
        f"relative drifts over T=100: H {res.h_drift:.2e}, K1 {res.k1_drift:.2e}",
    )
    assert res.h_drift < 1e-6
    assert res.k1_drift < 1e-6
