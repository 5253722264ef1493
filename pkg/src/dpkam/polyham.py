"""Algebra of finitely supported homogeneous polynomial Hamiltonians.

A Hamiltonian is a map from sorted Fourier index tuples (monomials in the
coefficients u_j, j != 0) to Gaussian-rational coefficients:

    K(u) = sum_M  coeff[M] * u_{j_1} ... u_{j_n},   M = (j_1 <= ... <= j_n).

Coefficients are attached to the *monomial basis*: permutation multiplicity
is absorbed into the coefficient at construction, so every multiset of
indices appears exactly once.

The Poisson bracket is normalized so that the adjoint action of the
quadratic Hamiltonian multiplies a monomial by i * sum_i lambda(j_i); the
self-consistency test (conjugating by the flow of the solved homological
equation cancels the source term exactly) pins this convention.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping

from .core import GR_ZERO, GaussianRational, TangentialSet, as_gaussian, lam

Monomial = tuple[int, ...]


def _check_monomial(mono: Iterable[int]) -> Monomial:
    m = tuple(sorted(int(j) for j in mono))
    if any(j == 0 for j in m):
        raise ValueError(f"monomial contains the excluded index 0: {m}")
    return m


def monomial_momentum(mono: Monomial) -> int:
    return sum(mono)


def monomial_lambda_sum(mono: Monomial) -> Fraction:
    return sum((lam(j) for j in mono), Fraction(0))


def z_degree(mono: Monomial, S: TangentialSet) -> int:
    """Number of indices of the monomial lying in the normal set S^c."""
    return sum(1 for j in mono if S.in_sc(j))


@dataclass
class HomPoly:
    """Homogeneous polynomial Hamiltonian of fixed degree."""

    degree: int
    terms: dict[Monomial, GaussianRational] = field(default_factory=dict)
    momentum: bool = False  # if set, every monomial must satisfy sum(j_i) = 0

    def __post_init__(self):
        clean: dict[Monomial, GaussianRational] = {}
        for mono, c in self.terms.items():
            m = _check_monomial(mono)
            if len(m) != self.degree:
                raise ValueError(f"monomial {m} does not have degree {self.degree}")
            c = as_gaussian(c)
            if c.is_zero():
                continue
            if self.momentum and monomial_momentum(m) != 0:
                raise ValueError(f"momentum flag set but sum of {m} is nonzero")
            if m in clean:
                c = clean[m] + c
                if c.is_zero():
                    del clean[m]
                    continue
            clean[m] = c
        self.terms = clean

    # -- construction helpers ------------------------------------------------

    @classmethod
    def zero(cls, degree: int, momentum: bool = False) -> "HomPoly":
        return cls(degree, {}, momentum)

    def copy(self) -> "HomPoly":
        return HomPoly(self.degree, dict(self.terms), self.momentum)

    def add_ordered(self, indices: Iterable[int], coeff) -> None:
        """Accumulate `coeff` for an *ordered* tuple: the coefficient of the
        sorted monomial grows by coeff times the number of distinct orderings."""
        m = _check_monomial(indices)
        mult = math.factorial(len(m))
        for j in set(m):
            mult //= math.factorial(m.count(j))
        self.accumulate(m, as_gaussian(coeff) * Fraction(mult))

    def accumulate(self, mono: Monomial, coeff: GaussianRational) -> None:
        cur = self.terms.get(mono, GR_ZERO) + coeff
        if cur.is_zero():
            self.terms.pop(mono, None)
        else:
            self.terms[mono] = cur

    # -- ring-ish operations ---------------------------------------------------

    def __add__(self, other: "HomPoly") -> "HomPoly":
        if other.degree != self.degree:
            raise ValueError("cannot add polynomials of different degree")
        out = self.copy()
        out.momentum = self.momentum and other.momentum
        for m, c in other.terms.items():
            out.accumulate(m, c)
        return out

    def __sub__(self, other: "HomPoly") -> "HomPoly":
        return self + other.scale(Fraction(-1))

    def scale(self, c) -> "HomPoly":
        c = as_gaussian(c)
        if c.is_zero():
            return HomPoly.zero(self.degree, self.momentum)
        return HomPoly(self.degree, {m: v * c for m, v in self.terms.items()}, self.momentum)

    def is_zero(self) -> bool:
        return not self.terms

    def __len__(self) -> int:
        return len(self.terms)

    def map_filter(self, keep: Callable[[Monomial], bool]) -> "HomPoly":
        return HomPoly(
            self.degree,
            {m: c for m, c in self.terms.items() if keep(m)},
            self.momentum,
        )

    # -- invariants ------------------------------------------------------------

    def is_real_hamiltonian(self) -> bool:
        """Reality: coeff(-M) equals the conjugate of coeff(M) for every M."""
        for m, c in self.terms.items():
            neg = tuple(sorted(-j for j in m))
            if self.terms.get(neg, GR_ZERO) != c.conjugate():
                return False
        return True

    def preserves_momentum(self) -> bool:
        return all(monomial_momentum(m) == 0 for m in self.terms)

    def max_abs_index(self) -> int:
        return max((max(abs(j) for j in m) for m in self.terms), default=0)

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, u: Mapping[int, complex]) -> complex:
        """Numeric evaluation given Fourier coefficients u_j (missing = 0)."""
        total = 0j
        for m, c in self.terms.items():
            prod = complex(c)
            for j in m:
                prod *= u.get(j, 0j)
                if prod == 0:
                    break
            total += prod
        return total

    def gradient_component(self, j: int, u: Mapping[int, complex]) -> complex:
        """d/du_j of the polynomial evaluated at u."""
        total = 0j
        for m, c in self.terms.items():
            if j not in m:
                continue
            k = m.count(j)
            rest = list(m)
            rest.remove(j)
            prod = complex(c) * k
            for i in rest:
                prod *= u.get(i, 0j)
                if prod == 0:
                    break
            total += prod
        return total


# -- the bracket -----------------------------------------------------------------


def poisson_bracket(F: HomPoly, G: HomPoly) -> HomPoly:
    """{F, G} with the normalization ad_{H2}[u_M] = i (sum lambda(j_i)) u_M.

    In Fourier variables {F, G} = i sum_k lambda(k) (dF/du_{-k}) (dG/du_k).
    """
    if F.degree < 2 or G.degree < 2:
        raise ValueError("Poisson bracket needs degree >= 2 on both sides")
    out = HomPoly.zero(F.degree + G.degree - 2, F.momentum and G.momentum)

    # index -> monomials containing it (for the smaller operand, iterate directly)
    g_by_index: dict[int, list[Monomial]] = defaultdict(list)
    for m in G.terms:
        for j in set(m):
            g_by_index[j].append(m)

    i_one = GaussianRational(Fraction(0), Fraction(1))
    for mf, cf in F.terms.items():
        for k_neg in set(mf):
            k = -k_neg
            for mg in g_by_index.get(k, ()):  # dG/du_k
                cg = G.terms[mg]
                mult_f = mf.count(k_neg)
                mult_g = mg.count(k)
                rest_f = list(mf)
                rest_f.remove(k_neg)
                rest_g = list(mg)
                rest_g.remove(k)
                coeff = (
                    i_one
                    * lam(k)
                    * Fraction(mult_f * mult_g)
                    * cf
                    * cg
                )
                out.accumulate(tuple(sorted(rest_f + rest_g)), coeff)
    return out


def adjoint_action_h2(K: HomPoly) -> HomPoly:
    """ad_{H2}[K]: multiply each monomial coefficient by i * sum lambda(j_i)."""
    i_one = GaussianRational(Fraction(0), Fraction(1))
    out = HomPoly.zero(K.degree, K.momentum)
    for m, c in K.terms.items():
        s = monomial_lambda_sum(m)
        if s != 0:
            out.accumulate(m, c * (i_one * s))
    return out


def solve_homological(K: HomPoly) -> HomPoly:
    """Inverse of the adjoint action on the range: F_M = K_M / (i sum lambda).

    Kernel monomials (sum lambda = 0) are dropped silently; retrieve them with
    project_kernel.
    """
    i_one = GaussianRational(Fraction(0), Fraction(1))
    out = HomPoly.zero(K.degree, K.momentum)
    for m, c in K.terms.items():
        s = monomial_lambda_sum(m)
        if s != 0:
            out.accumulate(m, c / (i_one * s))
    return out


# -- projectors -------------------------------------------------------------------


def project_kernel(K: HomPoly) -> HomPoly:
    return K.map_filter(lambda m: monomial_lambda_sum(m) == 0)


def project_range(K: HomPoly) -> HomPoly:
    return K.map_filter(lambda m: monomial_lambda_sum(m) != 0)


def is_trivial_monomial(mono: Monomial) -> bool:
    """Products of pairs u_j u_{-j}: every index matched with its negative."""
    if len(mono) % 2:
        return False
    counts: dict[int, int] = defaultdict(int)
    for j in mono:
        counts[j] += 1
    return all(counts[j] == counts.get(-j, 0) for j in counts)


def project_trivial(K: HomPoly) -> HomPoly:
    return K.map_filter(is_trivial_monomial)


def project_z_degree(K: HomPoly, S: TangentialSet, predicate: Callable[[int], bool]) -> HomPoly:
    """Keep monomials whose z-degree (count of indices in S^c) satisfies `predicate`."""
    return K.map_filter(lambda m: predicate(z_degree(m, S)))


def split_by_z_degree(K: HomPoly, S: TangentialSet) -> dict[int, HomPoly]:
    out: dict[int, HomPoly] = {}
    for m, c in K.terms.items():
        d = z_degree(m, S)
        out.setdefault(d, HomPoly.zero(K.degree, K.momentum)).accumulate(m, c)
    return out


# -- Lie series -------------------------------------------------------------------


def flow_conjugate(
    pieces: Iterable[HomPoly],
    F: HomPoly,
    max_degree: int,
    inverse: bool = True,
    max_z_keep: Callable[[int], int] | None = None,
    universe: frozenset[int] | None = None,
    S: TangentialSet | None = None,
) -> dict[int, HomPoly]:
    """Lie-series conjugation of a Hamiltonian by the time-1 flow of F.

    Returns the homogeneous pieces (keyed by degree) of H o Phi_F^{-1}
    = sum_k ad_F^k[H]/k!  (`inverse=False` gives H o Phi_F with (-1)^k/k!).
    The expansion is truncated at `max_degree`.

    `max_z_keep(degree)` may prune monomials whose z-degree exceeds the given
    bound; callers must supply a bound compatible with what they read off the
    result (each later bracket with a z-degree <= 1 generator lowers the
    z-degree of a monomial by at most one).  `universe` restricts monomials
    to a finite index window; results are exact for monomials supported in
    the window provided the window contains the generator support.
    """
    step = F.degree - 2
    if step <= 0:
        raise ValueError("generator must have degree >= 3")
    pieces = list(pieces)
    if any(p.degree > max_degree for p in pieces):
        raise ValueError("truncation degree is below an input degree")

    def prune(p: HomPoly) -> HomPoly:
        q = p
        if universe is not None:
            q = q.map_filter(lambda m: all(j in universe for j in m))
        if max_z_keep is not None and S is not None:
            cap = max_z_keep(q.degree)
            q = q.map_filter(lambda m: z_degree(m, S) <= cap)
        return q

    out: dict[int, HomPoly] = {}

    def add_piece(p: HomPoly) -> None:
        if p.is_zero():
            return
        if p.degree in out:
            out[p.degree] = out[p.degree] + p
        else:
            out[p.degree] = p

    for H in pieces:
        add_piece(prune(H))
        current = H
        k = 1
        sign = 1
        while current.degree + step <= max_degree:
            current = prune(poisson_bracket(F, current))
            if current.is_zero():
                break
            if not inverse:
                sign = -sign
            coeff = Fraction(sign, math.factorial(k))
            add_piece(current.scale(coeff))
            k += 1
    return out


# -- serialization ----------------------------------------------------------------


def serialize(K: HomPoly) -> str:
    """Line-oriented canonical text form, one monomial per line."""
    lines = []
    for m in sorted(K.terms):
        c = K.terms[m]
        idx = " ".join(str(j) for j in m)
        lines.append(
            f"{idx}  {c.re.numerator}/{c.re.denominator}  "
            f"{c.im.numerator}/{c.im.denominator}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def deserialize(text: str, degree: int, momentum: bool = False) -> HomPoly:
    terms: dict[Monomial, GaussianRational] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        idx = tuple(int(p) for p in parts[:-2])
        re_n, re_d = parts[-2].split("/")
        im_n, im_d = parts[-1].split("/")
        terms[idx] = GaussianRational(
            Fraction(int(re_n), int(re_d)), Fraction(int(im_n), int(im_d))
        )
    return HomPoly(degree, terms, momentum)
