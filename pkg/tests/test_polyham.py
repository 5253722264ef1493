import random
from fractions import Fraction

import pytest

from dpkam.core import GR_I, GaussianRational, TangentialSet, lam
from dpkam.polyham import (
    HomPoly,
    adjoint_action_h2,
    deserialize,
    flow_conjugate,
    is_trivial_monomial,
    poisson_bracket,
    project_kernel,
    project_range,
    project_trivial,
    project_z_degree,
    serialize,
    solve_homological,
    z_degree,
)
from dpkam.wbnf import dp_h2, dp_h3, index_universe


def gr(re, im=0):
    return GaussianRational(Fraction(re), Fraction(im))


def random_hompoly(rng, degree, bound=4, terms=4, momentum=False):
    H = HomPoly.zero(degree, momentum)
    tries = 0
    while len(H) < terms and tries < 200:
        tries += 1
        idx = [rng.choice([j for j in range(-bound, bound + 1) if j != 0])
               for _ in range(degree - (1 if momentum else 0))]
        if momentum:
            last = -sum(idx)
            if last == 0 or abs(last) > bound:
                continue
            idx.append(last)
        c = gr(rng.randint(-3, 3), rng.randint(-3, 3))
        if not c.is_zero():
            H.accumulate(tuple(sorted(idx)), c)
    return H


def test_monomial_canonicalization():
    H = HomPoly(3, {(2, 1, -3): gr(1)})
    assert (-3, 1, 2) in H.terms
    with pytest.raises(ValueError):
        HomPoly(3, {(0, 1, -1): gr(1)})
    with pytest.raises(ValueError):
        HomPoly(3, {(1, 2, 3): gr(1)}, momentum=True)


def test_add_ordered_multiplicity():
    H = HomPoly.zero(3)
    H.add_ordered((1, 2, -3), Fraction(-1, 6))
    assert H.terms[(-3, 1, 2)] == gr(-1)  # six orderings
    H2 = HomPoly.zero(3)
    H2.add_ordered((2, 2, -4), Fraction(-1, 6))
    assert H2.terms[(-4, 2, 2)] == gr(Fraction(-1, 2))  # three orderings


def test_adjoint_examples():
    K = HomPoly(2, {(-1, 1): gr(1)})
    assert adjoint_action_h2(K).is_zero()
    K2 = HomPoly(4, {(-3, -1, 2, 2): gr(1)})
    assert adjoint_action_h2(K2).is_zero()  # 2 lam(2) = lam(1) + lam(3)
    K3 = HomPoly(3, {(-3, 1, 2): gr(1)})
    out = adjoint_action_h2(K3)
    assert out.terms[(-3, 1, 2)] == GR_I * Fraction(9, 5)


def test_adjoint_equals_bracket_with_h2():
    uni = index_universe(8)
    H2 = dp_h2(uni)
    rng = random.Random(0)
    for _ in range(5):
        K = random_hompoly(rng, 3, bound=4)
        assert poisson_bracket(H2, K).terms == adjoint_action_h2(K).terms


def test_bracket_antisymmetry_and_momentum():
    rng = random.Random(1)
    for _ in range(5):
        F = random_hompoly(rng, 3, momentum=True)
        G = random_hompoly(rng, 4, momentum=True)
        B1 = poisson_bracket(F, G)
        B2 = poisson_bracket(G, F)
        assert (B1 + B2).is_zero()
        assert B1.preserves_momentum()


def test_bracket_with_itself_vanishes():
    rng = random.Random(2)
    F = random_hompoly(rng, 3)
    assert poisson_bracket(F, F).is_zero()


def test_jacobi_identity():
    rng = random.Random(3)
    for _ in range(3):
        F = random_hompoly(rng, 3, bound=3, terms=3)
        G = random_hompoly(rng, 3, bound=3, terms=3)
        H = random_hompoly(rng, 4, bound=3, terms=3)
        total = poisson_bracket(F, poisson_bracket(G, H))
        total = total + poisson_bracket(G, poisson_bracket(H, F))
        total = total + poisson_bracket(H, poisson_bracket(F, G))
        assert total.is_zero()


def test_reality_preservation():
    rng = random.Random(4)

    def make_real(degree):
        H = random_hompoly(rng, degree, bound=3, terms=3)
        out = HomPoly.zero(degree)
        for m, c in H.terms.items():
            out.accumulate(m, c)
            out.accumulate(tuple(sorted(-j for j in m)), c.conjugate())
        return out

    F, G = make_real(3), make_real(3)
    assert F.is_real_hamiltonian() and G.is_real_hamiltonian()
    assert poisson_bracket(F, G).is_real_hamiltonian()


def test_momentum_quadratic_commutes():
    # any momentum-flagged polynomial Poisson-commutes with the momentum
    # quadratic sum_j l(j)|u_j|^2, l(j) lam(j) = j
    uni = index_universe(10)
    K1 = HomPoly.zero(2, momentum=True)
    for j in sorted(u for u in uni if u > 0):
        K1.accumulate((-j, j), GaussianRational(Fraction(1 + j * j, 4 + j * j)))
    rng = random.Random(5)
    F = random_hompoly(rng, 4, bound=5, momentum=True)
    assert poisson_bracket(K1, F).is_zero()


def test_solve_homological_inverse_on_range():
    rng = random.Random(6)
    K = random_hompoly(rng, 3, bound=4)
    F = solve_homological(K)
    assert adjoint_action_h2(F).terms == project_range(K).terms
    assert solve_homological(adjoint_action_h2(F)).terms == project_range(F).terms


def test_solve_homological_cubic_value():
    # cubic coefficient -1/6 at (6,7,-13): divisor lam(6)+lam(7)-lam(13)
    d = lam(6) + lam(7) + lam(-13)
    assert d == Fraction(10647, 15725)
    K = HomPoly(3, {(-13, 6, 7): gr(Fraction(-1, 6))})
    F = solve_homological(K)
    c = F.terms[(-13, 6, 7)]
    assert c.re == 0
    assert abs(complex(c)) == pytest.approx(abs(1.0 / (6.0 * float(d))))
    assert complex(c).imag == pytest.approx(1.0 / (6.0 * float(d)))


def test_projectors():
    S = TangentialSet.make([2, 3])
    triv = HomPoly(4, {(-2, -1, 1, 2): gr(5)})
    assert project_trivial(triv).terms == triv.terms
    nontriv = HomPoly(4, {(-3, -1, 2, 2): gr(1)})
    assert project_trivial(nontriv).is_zero()
    rng = random.Random(7)
    K = random_hompoly(rng, 4, bound=4)
    assert project_kernel(project_range(K)).is_zero()
    zsplit = project_z_degree(K, S, lambda d: d >= 0)
    assert zsplit.terms == K.terms
    assert is_trivial_monomial((-4, -4, 4, 4))
    assert not is_trivial_monomial((-3, -1, 2, 2))
    assert z_degree((-3, -1, 2, 2), S) == 1


def test_flow_cancels_cubic_range_part():
    # conjugating H2 + H3 by the flow of the solved generator cancels the
    # z-degree <= 1 cubic part exactly (normalization self-consistency)
    S = TangentialSet.make([2, 3])
    uni = index_universe(6)
    H2, H3 = dp_h2(uni), dp_h3(uni)
    low = project_z_degree(H3, S, lambda d: d <= 1)
    F = solve_homological(low)
    out = flow_conjugate([H2, H3], F, 4, inverse=True, universe=uni)
    remaining = project_z_degree(out[3], S, lambda d: d <= 1)
    assert remaining.terms == project_kernel(low).terms
    assert out[2].terms == H2.terms  # H2 untouched
    # F = 0 acts as the identity
    out0 = flow_conjugate([H3], HomPoly(3, {}), 5, universe=uni)
    assert out0[3].terms == H3.terms


def test_flow_first_order_term():
    uni = index_universe(5)
    H2 = dp_h2(uni)
    rng = random.Random(8)
    F = random_hompoly(rng, 3, bound=4, momentum=True)
    out = flow_conjugate([H2], F, 3, inverse=True, universe=uni)
    assert out[3].terms == poisson_bracket(F, H2).terms
    out_fwd = flow_conjugate([H2], F, 3, inverse=False, universe=uni)
    assert out_fwd[3].terms == poisson_bracket(F, H2).scale(Fraction(-1)).terms


def test_flow_degree4_matches_double_bracket_identity():
    # the degree-4 piece of conjugating H2 + H3 by the solved generator is
    # (1/2){F, {F, H2}} + {F, H3}, which collapses to
    # (1/2){F, H3_low} + {F, H3_high} once the homological equation holds
    S = TangentialSet.make([2, 3])
    uni = index_universe(9)
    H2, H3 = dp_h2(uni), dp_h3(uni)
    low = project_z_degree(H3, S, lambda d: d <= 1)
    high = H3 - low
    F = solve_homological(low)
    out = flow_conjugate([H2, H3], F, 4, inverse=True, universe=uni)
    direct = poisson_bracket(F, poisson_bracket(F, H2)).scale(Fraction(1, 2))
    direct = direct + poisson_bracket(F, H3)
    keep = lambda m: all(j in uni for j in m)
    assert out[4].terms == direct.map_filter(keep).terms
    collapsed = poisson_bracket(F, low).scale(Fraction(1, 2)) + poisson_bracket(F, high)
    assert out[4].terms == collapsed.map_filter(keep).terms


def test_serialization_roundtrip():
    rng = random.Random(9)
    K = random_hompoly(rng, 3, bound=4, momentum=True)
    text = serialize(K)
    K2 = deserialize(text, 3, momentum=True)
    assert K2.terms == K.terms
    assert serialize(K2) == text
