"""Reduction constants and the reduced eigenvalue model.

Carries the order-by-order conjugation data of the linearized problem:
the transport generators and their small divisors, the constant c(xi), the
diagonal corrections l_j and kappa_j, the first-order eigenvalue model
d_j = m lambda(j) + eps^2 kappa_j, and the normal form identification
cross-check that ties the linear normal form back to the cubic Hamiltonian.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .core import (
    GR_I,
    GaussianRational,
    ScalingParams,
    TangentialSet,
    as_gaussian,
    float_fmt,
    lam,
)
from .polyham import (
    HomPoly,
    poisson_bracket,
    project_trivial,
    project_z_degree,
    solve_homological,
)
from .twist import mat_vec, twist_matrix, w_vec
from .wbnf import dp_h3


class SpectrumError(RuntimeError):
    pass


def _xi_fractions(S: TangentialSet, xi: Sequence) -> list[Fraction]:
    vals = [Fraction(x) if not isinstance(x, Fraction) else x for x in xi]
    if len(vals) != S.nu:
        raise ValueError(f"xi must have length nu = {S.nu}")
    return vals


# -- the constant c and the diagonal corrections --------------------------------------


def c_of_xi(S: TangentialSet, xi: Sequence) -> Fraction:
    """c(xi) = (2/3) sum_{j in S+} (1+j^2) xi_j."""
    vals = _xi_fractions(S, xi)
    return sum(
        (Fraction(2, 3) * (1 + j * j) * x for j, x in zip(S.splus, vals)),
        Fraction(0),
    )


def ell_j_form(S: TangentialSet, j: int) -> list[Fraction]:
    """Coefficients of xi (over S+) of l_j, with the two printed forms checked
    against each other exactly."""
    if not S.in_sc(j):
        raise SpectrumError(f"l_j is defined on normal sites; {j} is tangential")
    coeffs = []
    for s in S.splus:
        den_m = 3 + s * s - s * j + j * j
        den_p = 3 + s * s + s * j + j * j
        if den_m == 0 or den_p == 0:
            raise SpectrumError(f"resonant pair (s={s}, j={j}) in l_j denominator")
        second = (
            Fraction(2, 3)
            * (1 + s * s)
            * (1 + j * j)
            * (2 + s * s + j * j)
            / (den_m * den_p)
        )
        first = Fraction(0)
        for site in (s, -s):
            d = lam(site) + lam(j) - lam(site + j)
            if d == 0:
                raise SpectrumError(
                    f"vanishing divisor lambda({site})+lambda({j})-lambda({site + j})"
                )
            first += lam(site + j) / d
        if first != second:
            raise SpectrumError(
                f"the two closed forms of l_j disagree at (s={s}, j={j})"
            )
        coeffs.append(second)
    return coeffs


def ell_j(S: TangentialSet, xi: Sequence, j: int) -> Fraction:
    vals = _xi_fractions(S, xi)
    return sum((c * x for c, x in zip(ell_j_form(S, j), vals)), Fraction(0))


def kappa_j(S: TangentialSet, xi: Sequence, j: int) -> Fraction:
    """kappa_j = lambda(j) (l_j - c), checked against the single-fraction form."""
    vals = _xi_fractions(S, xi)
    value = lam(j) * (ell_j(S, xi, j) - c_of_xi(S, xi))
    combined = sum((wc * x for wc, x in zip(w_vec(S, j), vals)), Fraction(0))
    if value != combined:
        raise SpectrumError(f"kappa_j forms disagree at j={j}")
    return value


@dataclass
class EigenModel:
    """First-order reduced eigenvalues d_j = m lambda(j) + eps^2 kappa_j.

    m is modelled as 1 + eps^2 c only; the eps^4 correction d(omega) of the
    full reduction is not asserted (its closed-form coefficients are not
    specified), and the KAM residuals r_j^infty are carried as a bound, not
    values.
    """

    S: TangentialSet
    xi: tuple
    scaling: ScalingParams
    residual_constant: float = 1.0
    m_truncation_order: int = 4  # the neglected m-correction is O(eps^4)

    def __post_init__(self):
        self.xi = tuple(_xi_fractions(self.S, self.xi))
        self.c = c_of_xi(self.S, self.xi)

    @property
    def m(self) -> float:
        return 1.0 + self.scaling.epsilon**2 * float(self.c)

    def m_exact(self, eps: Fraction) -> Fraction:
        return 1 + Fraction(eps) ** 2 * self.c

    def ell(self, j: int) -> Fraction:
        return ell_j(self.S, self.xi, j)

    def kappa(self, j: int) -> Fraction:
        return kappa_j(self.S, self.xi, j)

    def d0(self, j: int) -> float:
        return self.m * float(lam(j)) + self.scaling.epsilon**2 * float(self.kappa(j))

    def residual_bound(self, j: int) -> float:
        """|r_j^infty| <= C eps^(4-3a) / <j> (bound only; the KAM iteration
        producing the residuals is out of scope)."""
        e, a = self.scaling.epsilon, self.scaling.a
        return self.residual_constant * e ** (4.0 - 3.0 * a) / max(1, abs(j))

    def csv(self, js: Sequence[int]) -> str:
        out = io.StringIO()
        out.write("j,lambda,ell_j,kappa_j,j_kappa_j,d0_j\n")
        for j in js:
            lj = self.ell(j)
            kj = self.kappa(j)
            out.write(
                f"{j},{float_fmt(float(lam(j)))},{float_fmt(float(lj))},"
                f"{float_fmt(float(kj))},{float_fmt(float(j * kj))},"
                f"{float_fmt(self.d0(j))}\n"
            )
        return out.getvalue()


# -- small divisors ---------------------------------------------------------------------


@dataclass(frozen=True)
class SmallDivisor:
    ell: tuple[int, ...]
    j: int
    jp: int
    delta: Fraction
    delta_star: float | None
    momentum_ok: bool


def omega_bar_dot(S: TangentialSet, ell: Sequence[int]) -> Fraction:
    return sum((lam(s) * e for s, e in zip(S.splus, ell)), Fraction(0))


def small_divisor(
    S: TangentialSet,
    ell: Sequence[int],
    j: int,
    jp: int,
    xi: Sequence | None = None,
    eps: float | None = None,
) -> SmallDivisor:
    """delta = omega_bar . ell + lambda(j) - lambda(j'); delta* adds the
    eps^2 (A xi . ell + lambda(j') l_{j'} - lambda(j) l_j) correction."""
    ell = tuple(int(e) for e in ell)
    delta = omega_bar_dot(S, ell) + lam(j) - lam(jp)
    momentum_ok = sum(s * e for s, e in zip(S.splus, ell)) + j - jp == 0
    delta_star = None
    if xi is not None and eps is not None:
        td = twist_matrix(S)
        axi = mat_vec(td.A, _xi_fractions(S, xi))
        corr = sum((a * e for a, e in zip(axi, ell)), Fraction(0))
        corr += lam(jp) * ell_j(S, xi, jp) - lam(j) * ell_j(S, xi, j)
        delta_star = float(delta) + float(eps) ** 2 * float(corr)
    return SmallDivisor(ell, j, jp, delta, delta_star, momentum_ok)


def divisor_closed_form_ell1(j: int, jp: int) -> Fraction:
    """lambda(j-j') - lambda(j) + lambda(j') =
    3 j j' (j-j') (3 + j j' + (j-j')^2) / ((1+j^2)(1+j'^2)(1+(j-j')^2))."""
    m = j - jp
    if m == 0:
        raise ValueError("needs j != j'")
    num = 3 * j * jp * m * (3 + j * jp + m * m)
    den = (1 + j * j) * (1 + jp * jp) * (1 + m * m)
    return Fraction(num, den)


def divisor_closed_form_ell2(j1: int, j2: int, j: int) -> Fraction:
    """lambda(j1)+lambda(j2)+lambda(j)-lambda(j1+j2+j) in the factored form
    3 (j1+j2)(j1+j)(j2+j) P(j1,j2,j) with
    P = (3 + x^2+y^2+z^2 + xy+xz+yz + xyz(x+y+z)) / prod(1 + .^2)."""
    x, y, z = j1, j2, j
    num = (
        3 + x * x + y * y + z * z + x * y + x * z + y * z + x * y * z * (x + y + z)
    )
    den = (1 + x * x) * (1 + y * y) * (1 + z * z) * (1 + (x + y + z) ** 2)
    return 3 * Fraction((x + y) * (x + z) * (y + z)) * Fraction(num, den)


def momentum_ells(S: TangentialSet, ell_bound: int):
    """All nonzero ell with |ell|_1 <= ell_bound, with their site-sums."""
    from .core import signed_ell_vectors

    out = []
    for n in range(1, ell_bound + 1):
        for ell in signed_ell_vectors(S.nu, n):
            out.append((ell, sum(s * e for s, e in zip(S.splus, ell))))
    return out


@dataclass
class DivisorScan:
    min_abs: Fraction
    witness: SmallDivisor
    checked: int


def min_divisor_scan(
    S: TangentialSet, ell_bound: int = 2, j_bound: int = 2000
) -> DivisorScan:
    """Minimum |delta| over momentum-compatible triples with nonzero divisor."""
    best = None
    witness = None
    checked = 0
    for ell, shift in momentum_ells(S, ell_bound):
        base = omega_bar_dot(S, ell)
        for j in range(-j_bound, j_bound + 1):
            if not S.in_sc(j):
                continue
            jp = j + shift
            if not S.in_sc(jp):
                continue
            delta = base + lam(j) - lam(jp)
            checked += 1
            if delta == 0:
                continue
            a = abs(delta)
            if best is None or a < best:
                best = a
                witness = SmallDivisor(tuple(ell), j, jp, delta, None, True)
    if best is None:
        raise SpectrumError("no nonzero divisors in the scanned range")
    return DivisorScan(min_abs=best, witness=witness, checked=checked)


# -- homogeneous symbols of the wave-packet function -----------------------------------


class VSymbol(dict):
    """p-homogeneous function of the unperturbed wave packet:
    sum over sorted tuples (s_1 <= ... <= s_p), s_i in S, of
    coeff * sqrt(xi_{s_1} ... xi_{s_p}) e^{i (sum s_i) x} e^{i (sum l(s_i)) phi}.

    Stored as {tuple: GaussianRational} in the monomial basis."""

    def __init__(self, p: int, data: Mapping | None = None):
        super().__init__()
        self.p = p
        if data:
            for k, v in data.items():
                self.accumulate(tuple(sorted(k)), as_gaussian(v))

    def accumulate(self, key: tuple[int, ...], coeff: GaussianRational) -> None:
        cur = self.get(key)
        cur = coeff if cur is None else cur + coeff
        if cur.is_zero():
            self.pop(key, None)
        else:
            self[key] = cur

    def scale(self, c) -> "VSymbol":
        c = as_gaussian(c)
        return VSymbol(self.p, {k: v * c for k, v in self.items()})

    def __add__(self, other: "VSymbol") -> "VSymbol":
        if other.p != self.p:
            raise ValueError("cannot add symbols of different homogeneity")
        out = VSymbol(self.p, self)
        for k, v in other.items():
            out.accumulate(k, v)
        return out

    def multiplier(self, fn) -> "VSymbol":
        """Apply a Fourier multiplier: coefficient *= fn(sum of spatial modes)."""
        out = VSymbol(self.p)
        for k, v in self.items():
            out.accumulate(k, v * fn(sum(k)))
        return out

    def dx(self) -> "VSymbol":
        return self.multiplier(lambda m: GR_I * Fraction(m))

    def omega_bar_dphi(self) -> "VSymbol":
        """omega_bar . d_phi: multiplies by i sum lambda(s_i) (l is additive)."""
        out = VSymbol(self.p)
        for k, v in self.items():
            s = sum((lam(s) for s in k), Fraction(0))
            out.accumulate(k, v * (GR_I * s))
        return out

    def __mul__(self, other: "VSymbol") -> "VSymbol":
        out = VSymbol(self.p + other.p)
        for k1, v1 in self.items():
            for k2, v2 in other.items():
                out.accumulate(tuple(sorted(k1 + k2)), v1 * v2)
        return out

    def spatial_average_xi_form(self, S: TangentialSet) -> dict[int, GaussianRational]:
        """Zero spatial mode as a linear form in the squared amplitudes.

        Only meaningful for p = 2 here: the tuples (s, -s) carry xi_{|s|}."""
        out: dict[int, GaussianRational] = {}
        for k, v in self.items():
            if sum(k) != 0:
                continue
            if self.p == 2 and k[0] == -k[1]:
                site = abs(k[0])
                out[site] = out.get(site, GaussianRational()) + v
            else:
                raise SpectrumError(
                    f"average of a non-paired tuple {k} is not a xi-linear form"
                )
        return out


def vbar_symbol(S: TangentialSet) -> VSymbol:
    return VSymbol(1, {(s,): GaussianRational(Fraction(1)) for s in S.sites})


def beta1_symbol(S: TangentialSet) -> VSymbol:
    """beta_1 = (1/3)(Lambda d_x)^{-1} vbar: coefficient -(1+s^2)/(3s) i."""
    out = VSymbol(1)
    for s in S.sites:
        out.accumulate(
            (s,),
            GaussianRational(Fraction(0), Fraction(-(1 + s * s), 3 * s)),
        )
    return out


def transport_divisor(indices: Sequence[int]) -> Fraction:
    """sum_i 3 j_i/(1+j_i^2) = sum_i (lambda(j_i) - j_i)."""
    return sum((lam(j) - j for j in indices), Fraction(0))


def solve_transport(f: VSymbol, S: TangentialSet) -> tuple[VSymbol, VSymbol]:
    """Solve omega_bar . d_phi beta - beta_x = f termwise.

    Non-resonant tuples get beta = f / (i * divisor); resonant tuples
    (vanishing transport divisor) are returned separately -- for p = 2 they
    are the spatial average, for p = 4 they feed the eps^4 frequency
    correction d(omega)."""
    if f.p > 5:
        raise SpectrumError("transport equations are solved for p <= 5")
    beta = VSymbol(f.p)
    resonant = VSymbol(f.p)
    for k, v in f.items():
        d = transport_divisor(k)
        if d == 0:
            resonant.accumulate(k, v)
        else:
            beta.accumulate(k, v / (GR_I * d))
    return beta, resonant


def beta1_solves_transport(S: TangentialSet) -> bool:
    """Coefficientwise check that beta_1 solves
    omega_bar . d_phi beta - beta_x - vbar = 0."""
    b = beta1_symbol(S)
    residual = b.omega_bar_dphi() + b.dx().scale(-1) + vbar_symbol(S).scale(-1)
    return not residual


def psi2_symbol(S: TangentialSet, F3: HomPoly) -> VSymbol:
    """Quadratic Birkhoff-map term Psi_2(vbar) = -X_{F^(3,<=1)}(vbar).

    (X_F)_j = i lambda(j) dF/du_{-j}; evaluating at u = vbar keeps the
    monomials whose two remaining slots are tangential."""
    out = VSymbol(2)
    sset = set(S.sites)
    for mono, c in F3.terms.items():
        for slot in set(mono):
            rest = list(mono)
            rest.remove(slot)
            if any(r not in sset for r in rest):
                continue
            j = -slot
            mult = mono.count(slot)
            coeff = (GR_I * lam(j)) * c * Fraction(mult)
            out.accumulate(tuple(sorted(rest)), coeff.__neg__())
    return out


def f2_symbol(S: TangentialSet, F3: HomPoly) -> VSymbol:
    """f_2(vbar) = -Psi_2(vbar) + (1/4) d_xx(beta_1^2) - (1/2) beta_1 vbar_x
    + (1/2) vbar (beta_1)_x."""
    vbar = vbar_symbol(S)
    b1 = beta1_symbol(S)
    out = psi2_symbol(S, F3).scale(-1)
    out = out + (b1 * b1).dx().dx().scale(Fraction(1, 4))
    out = out + (b1 * vbar.dx()).scale(Fraction(-1, 2))
    out = out + (vbar * b1.dx()).scale(Fraction(1, 2))
    return out


def c_via_f2(S: TangentialSet, xi: Sequence, F3: HomPoly) -> Fraction:
    """Average of f_2(vbar) with xi weights; must equal c_of_xi exactly."""
    vals = _xi_fractions(S, xi)
    form = f2_symbol(S, F3).spatial_average_xi_form(S)
    total = Fraction(0)
    for site, coeff in form.items():
        if coeff.im != 0:
            raise SpectrumError(f"f_2 average has an imaginary part at site {site}")
        total += coeff.re * vals[S.splus.index(site)]
    expected = c_of_xi(S, xi)
    if total != expected:
        raise SpectrumError(
            f"f_2 average {total} does not match c(xi) = {expected}"
        )
    return total


# -- normal form identification ---------------------------------------------------------


def identification_check(
    S: TangentialSet, j: int
) -> tuple[dict[int, Fraction], dict[int, Fraction], bool]:
    """Coefficient of the trivial monomial |u_j|^2 (as a linear form in xi over
    S+) in Pi_triv Pi^{dz=2} (1/2){F3_full, H3}, against l_j.

    The target display writes the resonant piece as (1/2) sum over *signed*
    normal sites of l_j |u_j|^2; on the canonical sorted monomial
    u_j u_{-j} u_s u_{-s} the two signs merge and the coefficient is the full
    l_j coefficient (l is even in j).

    The bracket is computed over the exact mini-universe
    {±s, ±j, ±(s+j), ±(s-j)}; contributions to the target monomials close
    over that set by momentum conservation."""
    if not S.in_sc(j):
        raise SpectrumError(f"{j} must be a normal site")
    lhs: dict[int, Fraction] = {}
    rhs: dict[int, Fraction] = {}
    for s in S.splus:
        uni = set()
        for v in (s, j, s + j, s - j):
            if v != 0:
                uni.update((v, -v))
        h3 = dp_h3(frozenset(uni))
        f3 = solve_homological(h3)  # full ad-inverse; no order-3 resonances
        bracket = poisson_bracket(f3, h3).scale(Fraction(1, 2))
        bracket = project_trivial(project_z_degree(bracket, S, lambda d: d == 2))
        target = tuple(sorted((-j, -s, s, j)))
        c = bracket.terms.get(target, GaussianRational())
        if c.im != 0:
            raise SpectrumError(f"identification lhs has imaginary part at s={s}")
        lhs[s] = c.re
        form = Fraction(0)
        for site in (s, -s):
            d = lam(site) + lam(j) - lam(site + j)
            form += lam(site + j) / d
        rhs[s] = form
    return lhs, rhs, lhs == rhs
