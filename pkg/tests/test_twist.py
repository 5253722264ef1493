import random
from fractions import Fraction

import pytest

from dpkam.core import TangentialSet, lam
from dpkam.twist import (
    b_jk,
    corto100_limit_form,
    frequency_map,
    inverse_frequency_map,
    mat_det,
    mat_det_cofactor,
    mat_solve,
    mat_transpose,
    nondegeneracy_report,
    normalized_det,
    normalized_det_limit_form,
    twist_matrix,
    v_vec,
    w_vec,
)
from dpkam.wbnf import twist_cross_sum


def test_b_jk_values():
    assert b_jk(1, 2) == Fraction(7, 9)
    assert b_jk(6, 7) == Fraction(5365, 299)
    assert b_jk(3, 11) == b_jk(11, 3)
    with pytest.raises(ValueError):
        b_jk(4, 4)


def test_b_jk_equals_cross_sum():
    for j in range(1, 12):
        for k in range(j + 1, 13):
            assert b_jk(j, k) == twist_cross_sum(j, k)


def test_twist_matrix_structure():
    S = TangentialSet.make([6, 7])
    td = twist_matrix(S)
    for i, j in enumerate(S.splus):
        d = 2 * lam(j) - lam(2 * j)
        assert td.A[i][i] == Fraction(1, 2) * lam(j) * lam(2 * j) / d
    assert td.A[0][1] == lam(6) * b_jk(6, 7)
    assert mat_det_cofactor(td.A) == td.det_A


def test_det_permutation_invariance():
    A1 = twist_matrix(TangentialSet.make([5, 9, 14])).det_A
    # TangentialSet sorts ascending, so permuting the input has no effect
    A2 = twist_matrix(TangentialSet.make([14, 5, 9])).det_A
    assert A1 == A2


def test_exact_linear_algebra():
    rng = random.Random(0)
    for n in (2, 3):
        A = [[Fraction(rng.randint(-5, 5), rng.randint(1, 4)) for _ in range(n)]
             for _ in range(n)]
        if mat_det(A) == 0:
            continue
        b = [Fraction(rng.randint(-3, 3)) for _ in range(n)]
        x = mat_solve(A, b)
        for i in range(n):
            assert sum(A[i][k] * x[k] for k in range(n)) == b[i]
        assert mat_det(A) == mat_det_cofactor(A)
        assert mat_det(mat_transpose(A)) == mat_det(A)


def test_normalized_det_at_origin():
    # nu = 2, x = 0, p = 1: det K = -3, the closed form's value
    assert normalized_det(Fraction(0), [Fraction(1), Fraction(1)]) == -3
    assert normalized_det_limit_form(Fraction(0), 2) == -3


def test_normalized_det_matches_closed_form():
    rng = random.Random(1)
    for nu in (2, 3):
        ones = [Fraction(1)] * nu
        for _ in range(20):
            x = Fraction(rng.randint(0, 40), 100)
            assert normalized_det(x, ones) == normalized_det_limit_form(x, nu)


def test_normalized_det_near_origin_bounded_away():
    # |det K| >= 1/2 on a grid x < r0, |p - 1| <= r0 (measured r0 = 1/8)
    r0 = Fraction(1, 8)
    for xn in range(0, 5):
        x = r0 * xn / 5
        for pn in range(0, 5):
            p = 1 - r0 * pn / 5
            val = normalized_det(x, [Fraction(1), p])
            assert abs(val) >= Fraction(1, 2)


def test_normalized_det_validation():
    with pytest.raises(ValueError):
        normalized_det(Fraction(-1, 10), [Fraction(1), Fraction(1)])
    with pytest.raises(ValueError):
        normalized_det(Fraction(1, 10), [Fraction(1), Fraction(3, 2)])


def test_frequency_map_exact():
    S = TangentialSet.make([6, 7])
    td = twist_matrix(S)
    assert frequency_map(S, [0, 0], Fraction(1, 100)) == td.omega_bar
    # S+ = {6,7}, xi = (1,1), eps = 1e-2: alpha - omega_bar = 1e-4 A (1,1)^T
    alpha = frequency_map(S, [1, 1], Fraction(1, 100))
    for i in range(2):
        assert alpha[i] - td.omega_bar[i] == Fraction(1, 10**4) * (
            td.A[i][0] + td.A[i][1]
        )


def test_inverse_frequency_map_roundtrip():
    S = TangentialSet.make([6, 7])
    rng = random.Random(2)
    for _ in range(5):
        xi = [1 + Fraction(rng.randint(0, 100), 100) for _ in range(2)]
        omega = frequency_map(S, xi, Fraction(1, 50))
        back = inverse_frequency_map(S, omega, Fraction(1, 50))
        assert back == xi
    with pytest.raises(ValueError):
        bad = [w + 1 for w in twist_matrix(S).omega_bar]
        inverse_frequency_map(S, bad, Fraction(1, 50))


def test_frequency_map_jacobian_affine():
    S = TangentialSet.make([6, 7])
    td = twist_matrix(S)
    e2 = Fraction(1, 10**4)
    a1 = frequency_map(S, [1, 1], Fraction(1, 100))
    a2 = frequency_map(S, [2, 1], Fraction(1, 100))
    assert [x - y for x, y in zip(a2, a1)] == [e2 * td.A[0][0], e2 * td.A[1][0]]


def test_corto100_rank_one_identity():
    # |det(I - A^{-T} v wb^T)| equals |1 - A^{-T} v . wb| (rank-one update)
    for sites in ([6, 7], [20, 21, 22]):
        S = TangentialSet.make(sites)
        td = twist_matrix(S)
        At = mat_transpose(td.A)
        y = mat_solve(At, v_vec(S))
        nu = S.nu
        M = [[Fraction(int(r == c)) - y[r] * td.omega_bar[c] for c in range(nu)]
             for r in range(nu)]
        assert mat_det(M) == 1 - sum(a * b for a, b in zip(y, td.omega_bar))


def test_corto100_limit_form():
    assert corto100_limit_form(Fraction(0), 2) == 6
    assert corto100_limit_form(Fraction(0), 3) == 9
    x = Fraction(1, 7)
    assert corto100_limit_form(x, 2) == 6 * (3 * x * x + 1) / (
        3 * x**4 + 6 * x * x + 1
    )


def test_nondegeneracy_report():
    S = TangentialSet.make([6, 7])
    rep = nondegeneracy_report(S, j_bound=30)
    by_name = {r.check: r for r in rep.records}
    # the |l| = 1 sums are 6/37 and 7/50; the minimum is 7/50
    assert by_name["ell_condition_norm_1"].value == pytest.approx(7 / 50)
    assert by_name["corto100_rank_one_det"].passed
    assert by_name["corto100_rank_one_det"].value >= 1.0
    assert rep.all_pass()
    assert '"check"' in rep.to_json()


def test_w_vec_odd_in_j():
    S = TangentialSet.make([6, 7])
    w10 = w_vec(S, 10)
    w_m10 = w_vec(S, -10)
    assert [a + b for a, b in zip(w10, w_m10)] == [0, 0]
    with pytest.raises(ValueError):
        w_vec(S, 6)
