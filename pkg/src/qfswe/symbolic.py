"""Exact bivariate polynomial algebra on the reference triangle.

Coefficients live in Q extended by a single square-root tag per value
(rational * sqrt(radicand), radicand square-free). That is enough to carry
the DG modal basis and every integral the solver setup needs, with no
floating point until tensors are frozen.

Reference triangle: vertices v0 = (0,0), v1 = (1,0), v2 = (0,1). Local edge
``j`` is the edge opposite vertex ``j``, traversed counterclockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping

__all__ = [
    "IncompatibleRoots",
    "UnsupportedOrder",
    "RootCoeff",
    "Poly2",
    "Poly1",
    "EdgeParam",
    "EDGES",
    "RefBasis",
    "K_FUNCS",
    "monomial_integral",
    "integrate_triangle",
    "poly_mul",
    "poly_diff",
    "build_basis",
    "trace_on_edge",
    "integrate_edge",
]


class IncompatibleRoots(ArithmeticError):
    """A sum of two distinct square-free radicands was requested."""


class UnsupportedOrder(ValueError):
    """Polynomial order outside the supported range 0..3."""


def _squarefree_split(n: int) -> tuple[int, int]:
    """Return (s, m) with n = s^2 * m and m square-free."""
    s, m, d = 1, n, 2
    while d * d <= m:
        while m % (d * d) == 0:
            m //= d * d
            s *= d
        d += 1
    return s, m


@dataclass(frozen=True)
class RootCoeff:
    """Exact coefficient rational * sqrt(radicand), radicand square-free."""

    rational: Fraction
    radicand: int = 1

    @staticmethod
    def of(value) -> "RootCoeff":
        if isinstance(value, RootCoeff):
            return value
        return RootCoeff(Fraction(value), 1)

    @staticmethod
    def root(radicand: int, scale=1) -> "RootCoeff":
        if radicand <= 0:
            raise ValueError("radicand must be positive")
        s, m = _squarefree_split(radicand)
        return RootCoeff(Fraction(scale) * s, m)

    def __post_init__(self):
        if self.radicand <= 0:
            raise ValueError("radicand must be positive")
        if self.rational == 0 and self.radicand != 1:
            object.__setattr__(self, "radicand", 1)

    @property
    def is_zero(self) -> bool:
        return self.rational == 0

    def __add__(self, other) -> "RootCoeff":
        other = RootCoeff.of(other)
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        if self.radicand != other.radicand:
            raise IncompatibleRoots(
                f"cannot add sqrt({self.radicand}) and sqrt({other.radicand}) terms"
            )
        return RootCoeff(self.rational + other.rational, self.radicand)

    __radd__ = __add__

    def __neg__(self) -> "RootCoeff":
        return RootCoeff(-self.rational, self.radicand)

    def __sub__(self, other) -> "RootCoeff":
        return self + (-RootCoeff.of(other))

    def __mul__(self, other) -> "RootCoeff":
        other = RootCoeff.of(other)
        prod = self.radicand * other.radicand
        s, m = _squarefree_split(prod)
        return RootCoeff(self.rational * other.rational * s, m)

    __rmul__ = __mul__

    def __float__(self) -> float:
        if self.radicand == 1:
            return float(self.rational)
        return float(self.rational) * math.sqrt(self.radicand)

    def __str__(self) -> str:
        if self.radicand == 1:
            return str(self.rational)
        if self.rational == 1:
            return f"sqrt({self.radicand})"
        return f"{self.rational}*sqrt({self.radicand})"


ZERO = RootCoeff(Fraction(0), 1)


def _as_coeff(value) -> RootCoeff:
    return RootCoeff.of(value)


class Poly2:
    """Sparse bivariate polynomial in reference coordinates (x1, x2).

    Terms are keyed by the exponent pair (a, b); zero coefficients are never
    stored. Instances are immutable.
    """

    __slots__ = ("_terms",)

    def __init__(self, terms: Mapping[tuple[int, int], object] | None = None):
        clean: dict[tuple[int, int], RootCoeff] = {}
        if terms:
            for (a, b), c in terms.items():
                c = _as_coeff(c)
                if not c.is_zero:
                    clean[(int(a), int(b))] = c
        self._terms = clean

    @staticmethod
    def constant(value) -> "Poly2":
        return Poly2({(0, 0): value})

    @staticmethod
    def monomial(a: int, b: int, coeff=1) -> "Poly2":
        return Poly2({(a, b): coeff})

    @property
    def terms(self) -> dict[tuple[int, int], RootCoeff]:
        return dict(self._terms)

    @property
    def degree(self) -> int:
        if not self._terms:
            return 0
        return max(a + b for a, b in self._terms)

    @property
    def is_zero(self) -> bool:
        return not self._terms

    def coeff(self, a: int, b: int) -> RootCoeff:
        return self._terms.get((a, b), ZERO)

    def __eq__(self, other) -> bool:
        return isinstance(other, Poly2) and self._terms == other._terms

    def __hash__(self):
        return hash(frozenset(self._terms.items()))

    def __add__(self, other: "Poly2") -> "Poly2":
        out = dict(self._terms)
        for key, c in other._terms.items():
            cur = out.get(key)
            s = c if cur is None else cur + c
            if s.is_zero:
                out.pop(key, None)
            else:
                out[key] = s
        return Poly2(out)

    def __neg__(self) -> "Poly2":
        return Poly2({k: -c for k, c in self._terms.items()})

    def __sub__(self, other: "Poly2") -> "Poly2":
        return self + (-other)

    def __mul__(self, other) -> "Poly2":
        if not isinstance(other, Poly2):
            other = Poly2.constant(other)
        out: dict[tuple[int, int], RootCoeff] = {}
        for (a1, b1), c1 in self._terms.items():
            for (a2, b2), c2 in other._terms.items():
                key = (a1 + a2, b1 + b2)
                p = c1 * c2
                cur = out.get(key)
                s = p if cur is None else cur + p
                if s.is_zero:
                    out.pop(key, None)
                else:
                    out[key] = s
        return Poly2(out)

    __rmul__ = __mul__

    def diff(self, var: int) -> "Poly2":
        """Exact partial derivative; var is 1 for x1, 2 for x2."""
        if var not in (1, 2):
            raise ValueError("var must be 1 or 2")
        out = {}
        for (a, b), c in self._terms.items():
            if var == 1 and a > 0:
                out[(a - 1, b)] = c * a
            elif var == 2 and b > 0:
                out[(a, b - 1)] = c * b
        return Poly2(out)

    def eval(self, x1: float, x2: float) -> float:
        return sum(float(c) * x1**a * x2**b for (a, b), c in self._terms.items())

    def __str__(self) -> str:
        if not self._terms:
            return "0"
        parts = []
        for (a, b) in sorted(self._terms):
            c = self._terms[(a, b)]
            mono = "*".join(
                ([f"x1^{a}" if a > 1 else "x1"] if a else [])
                + ([f"x2^{b}" if b > 1 else "x2"] if b else [])
            )
            cs = str(c)
            parts.append(f"{cs}*{mono}" if mono else cs)
        return " + ".join(parts).replace("+ -", "- ")

    __repr__ = __str__


class Poly1:
    """Sparse univariate polynomial in the edge parameter s."""

    __slots__ = ("_terms",)

    def __init__(self, terms: Mapping[int, object] | None = None):
        clean: dict[int, RootCoeff] = {}
        if terms:
            for n, c in terms.items():
                c = _as_coeff(c)
                if not c.is_zero:
                    clean[int(n)] = c
        self._terms = clean

    @property
    def terms(self) -> dict[int, RootCoeff]:
        return dict(self._terms)

    @property
    def degree(self) -> int:
        return max(self._terms) if self._terms else 0

    @property
    def is_zero(self) -> bool:
        return not self._terms

    def coeff(self, n: int) -> RootCoeff:
        return self._terms.get(n, ZERO)

    def __eq__(self, other) -> bool:
        return isinstance(other, Poly1) and self._terms == other._terms

    def __add__(self, other: "Poly1") -> "Poly1":
        out = dict(self._terms)
        for n, c in other._terms.items():
            cur = out.get(n)
            s = c if cur is None else cur + c
            if s.is_zero:
                out.pop(n, None)
            else:
                out[n] = s
        return Poly1(out)

    def __mul__(self, other) -> "Poly1":
        if not isinstance(other, Poly1):
            other = Poly1({0: other})
        out: dict[int, RootCoeff] = {}
        for n1, c1 in self._terms.items():
            for n2, c2 in other._terms.items():
                key = n1 + n2
                p = c1 * c2
                cur = out.get(key)
                s = p if cur is None else cur + p
                if s.is_zero:
                    out.pop(key, None)
                else:
                    out[key] = s
        return Poly1(out)

    __rmul__ = __mul__

    def eval(self, s: float) -> float:
        return sum(float(c) * s**n for n, c in self._terms.items())

    def __str__(self) -> str:
        if not self._terms:
            return "0"
        parts = []
        for n in sorted(self._terms):
            c = self._terms[n]
            mono = f"s^{n}" if n > 1 else ("s" if n == 1 else "")
            parts.append(f"{c}*{mono}" if mono else str(c))
        return " + ".join(parts).replace("+ -", "- ")

    __repr__ = __str__


@dataclass(frozen=True)
class EdgeParam:
    """Affine trace map s in [0,1] -> (x1(s), x2(s)) of one local edge.

    local_edge is 0-based; edge j is opposite reference vertex j and the
    three maps together traverse the reference boundary counterclockwise.
    """

    local_edge: int
    x1_const: Fraction
    x1_slope: Fraction
    x2_const: Fraction
    x2_slope: Fraction

    def point(self, s: float) -> tuple[float, float]:
        return (
            float(self.x1_const) + float(self.x1_slope) * s,
            float(self.x2_const) + float(self.x2_slope) * s,
        )


# edge 0: v1 -> v2, edge 1: v2 -> v0, edge 2: v0 -> v1 (all counterclockwise)
EDGES: tuple[EdgeParam, ...] = (
    EdgeParam(0, Fraction(1), Fraction(-1), Fraction(0), Fraction(1)),
    EdgeParam(1, Fraction(0), Fraction(0), Fraction(1), Fraction(-1)),
    EdgeParam(2, Fraction(0), Fraction(1), Fraction(0), Fraction(0)),
)


def monomial_integral(a: int, b: int) -> Fraction:
    """Exact integral of x1^a x2^b over the reference triangle: a! b! / (a+b+2)!."""
    if a < 0 or b < 0:
        raise ValueError("exponents must be nonnegative")
    return Fraction(math.factorial(a) * math.factorial(b), math.factorial(a + b + 2))


def integrate_triangle(p: Poly2) -> RootCoeff:
    """Exact integral of p over the reference triangle."""
    total = ZERO
    for (a, b), c in p.terms.items():
        total = total + c * monomial_integral(a, b)
    return total


def poly_mul(p: Poly2, q: Poly2) -> Poly2:
    return p * q


def poly_diff(p: Poly2, var: int) -> Poly2:
    return p.diff(var)


def _binom_pow(const: Fraction, slope: Fraction, n: int) -> Poly1:
    """(const + slope*s)^n as an exact Poly1."""
    out: dict[int, RootCoeff] = {}
    for j in range(n + 1):
        c = Fraction(math.comb(n, j)) * const ** (n - j) * slope**j
        if c != 0:
            out[j] = RootCoeff(c)
    return Poly1(out)


def trace_on_edge(p: Poly2, e: EdgeParam) -> Poly1:
    """Compose p with the edge parameterization; result degree <= deg(p)."""
    total = Poly1()
    for (a, b), c in p.terms.items():
        term = _binom_pow(e.x1_const, e.x1_slope, a) * _binom_pow(
            e.x2_const, e.x2_slope, b
        )
        total = total + term * c
    return total


def integrate_edge(q: Poly1) -> RootCoeff:
    """Exact integral of q(s) over s in [0,1]."""
    total = ZERO
    for n, c in q.terms.items():
        total = total + c * Fraction(1, n + 1)
    return total


K_FUNCS = {0: 1, 1: 3, 2: 6, 3: 10}


def _modal_table() -> list[Poly2]:
    F = Fraction
    r = RootCoeff.root

    def poly(root: int, coeffs: dict[tuple[int, int], int]) -> Poly2:
        return Poly2({k: r(root, v) for k, v in coeffs.items()})

    return [
        poly(2, {(0, 0): 1}),
        Poly2({(0, 0): F(2), (1, 0): F(-6)}),
        poly(12, {(0, 0): 1, (1, 0): -1, (0, 1): -2}),
        poly(6, {(0, 0): 1, (1, 0): -8, (2, 0): 10}),
        poly(3, {(0, 0): -1, (1, 0): -4, (2, 0): 5, (0, 1): 12, (0, 2): -15}),
        poly(45, {(0, 0): 1, (1, 0): -4, (2, 0): 3, (0, 1): -4, (1, 1): 8, (0, 2): 3}),
        poly(8, {(0, 0): -1, (1, 0): 15, (2, 0): -45, (3, 0): 35}),
        poly(24, {(0, 0): -1, (1, 0): 13, (2, 0): -33, (3, 0): 21,
                  (0, 1): 2, (1, 1): -24, (2, 1): 42}),
        poly(40, {(0, 0): -1, (1, 0): 9, (2, 0): -15, (3, 0): 7,
                  (0, 1): 6, (1, 1): -48, (2, 1): 42, (0, 2): -6, (1, 2): 42}),
        poly(56, {(0, 0): -1, (1, 0): 3, (2, 0): -3, (3, 0): 1,
                  (0, 1): 12, (1, 1): -24, (2, 1): 12,
                  (0, 2): -30, (1, 2): 30, (0, 3): 20}),
    ]


_MODAL = _modal_table()


@dataclass(frozen=True)
class RefBasis:
    """Orthonormal modal basis of order k on the reference triangle."""

    order: int
    functions: tuple[Poly2, ...]
    gradients: tuple[tuple[Poly2, Poly2], ...]

    @property
    def size(self) -> int:
        return len(self.functions)


def build_basis(k: int) -> RefBasis:
    if k not in K_FUNCS:
        raise UnsupportedOrder(f"order {k} not supported (0..3)")
    funcs = tuple(_MODAL[: K_FUNCS[k]])
    grads = tuple((f.diff(1), f.diff(2)) for f in funcs)
    return RefBasis(order=k, functions=funcs, gradients=grads)
