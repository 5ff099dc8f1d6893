"""Precomputed reference-element contraction tensors.

Everything the runtime scheme needs from the reference triangle is reduced
to a handful of dense tensors, computed exactly with the symbolic module
and frozen to float64 once. ``verify_tensors`` cross-checks every entry
against a degree-exact collapsed Gauss quadrature.

Index conventions (all 0-based):
    M[p, i]              mass          int phi_p phi_i
    S[l, p, i]           stiffness     int d(phi_p)/dx_l phi_i
    T[l, p, i, m]        stiff-triple  int d(phi_p)/dx_l phi_i phi_m
    G[p, i, m]           vol-triple    int phi_p phi_i phi_m
    E[e, p, i]           edge pair     int_0^1 phi_p|e(s) phi_i|e(s) ds
    EX[e, eN, p, i]      cross pair    int_0^1 phi_p|e(s) phi_i|eN(1-s) ds
    ET[e, p, i, m]       edge triple   own * own * own
    ETX[e, eN, p, i, m]  cross triple  own test * neighbor * neighbor
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .symbolic import (
    EDGES,
    K_FUNCS,
    Poly1,
    RefBasis,
    UnsupportedOrder,
    build_basis,
    integrate_edge,
    integrate_triangle,
    trace_on_edge,
)

__all__ = [
    "RefTensors",
    "build_ref_tensors",
    "verify_tensors",
    "TensorReport",
    "triangle_rule",
    "edge_rule",
    "dump_tensors_csv",
]


@dataclass(frozen=True)
class RefTensors:
    """Frozen float64 reference tensors for one polynomial order."""

    order: int
    M: np.ndarray
    S: np.ndarray
    T: np.ndarray
    G: np.ndarray
    E: np.ndarray
    EX: np.ndarray
    ET: np.ndarray
    ETX: np.ndarray

    @property
    def n_funcs(self) -> int:
        return self.M.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "M": self.M, "S": self.S, "T": self.T, "G": self.G,
            "E": self.E, "EX": self.EX, "ET": self.ET, "ETX": self.ETX,
        }


def _reversed_param(q: Poly1) -> Poly1:
    """q(1 - s) as an exact polynomial in s."""
    one_minus_s = Poly1({0: 1, 1: -1})
    out = Poly1()
    power = Poly1({0: 1})
    # Horner-free expansion; degrees stay tiny (<= 3).
    by_degree = q.terms
    for n in range(q.degree + 1):
        c = by_degree.get(n)
        if c is not None:
            out = out + power * c
        power = power * one_minus_s
    return out


def exact_mass(basis: RefBasis):
    """Exact rational mass matrix entries (list of lists of RootCoeff)."""
    K = basis.size
    return [
        [integrate_triangle(basis.functions[p] * basis.functions[i]) for i in range(K)]
        for p in range(K)
    ]


@lru_cache(maxsize=None)
def build_ref_tensors(k: int) -> RefTensors:
    if k not in K_FUNCS:
        raise UnsupportedOrder(f"order {k} not supported (0..3)")
    basis = build_basis(k)
    K = basis.size
    phi = basis.functions
    dphi = basis.gradients

    M = np.array([[float(c) for c in row] for row in exact_mass(basis)])

    S = np.zeros((2, K, K))
    for l in range(2):
        for p in range(K):
            for i in range(K):
                S[l, p, i] = float(integrate_triangle(dphi[p][l] * phi[i]))

    # T and G are symmetric in (i, m): compute once, mirror.
    T = np.zeros((2, K, K, K))
    for l in range(2):
        for p in range(K):
            for i in range(K):
                dp_phii = dphi[p][l] * phi[i]
                for m in range(i, K):
                    v = float(integrate_triangle(dp_phii * phi[m]))
                    T[l, p, i, m] = v
                    T[l, p, m, i] = v

    # G is fully symmetric: compute p <= i <= m, mirror all permutations.
    G = np.zeros((K, K, K))
    for p in range(K):
        for i in range(p, K):
            pi = phi[p] * phi[i]
            for m in range(i, K):
                v = float(integrate_triangle(pi * phi[m]))
                for a, b, c in ((p, i, m), (p, m, i), (i, p, m),
                                (i, m, p), (m, p, i), (m, i, p)):
                    G[a, b, c] = v

    traces = [[trace_on_edge(f, EDGES[e]) for f in phi] for e in range(3)]
    traces_rev = [[_reversed_param(t) for t in row] for row in traces]

    E = np.zeros((3, K, K))
    ET = np.zeros((3, K, K, K))
    for e in range(3):
        for p in range(K):
            for i in range(p, K):
                v = float(integrate_edge(traces[e][p] * traces[e][i]))
                E[e, p, i] = v
                E[e, i, p] = v
            for i in range(K):
                tp_ti = traces[e][p] * traces[e][i]
                for m in range(i, K):
                    v = float(integrate_edge(tp_ti * traces[e][m]))
                    ET[e, p, i, m] = v
                    ET[e, p, m, i] = v

    EX = np.zeros((3, 3, K, K))
    ETX = np.zeros((3, 3, K, K, K))
    for e in range(3):
        for eN in range(3):
            for p in range(K):
                for i in range(K):
                    EX[e, eN, p, i] = float(
                        integrate_edge(traces[e][p] * traces_rev[eN][i])
                    )
                    tp_ti = traces[e][p] * traces_rev[eN][i]
                    for m in range(i, K):
                        v = float(integrate_edge(tp_ti * traces_rev[eN][m]))
                        ETX[e, eN, p, i, m] = v
                        ETX[e, eN, p, m, i] = v

    return RefTensors(order=k, M=M, S=S, T=T, G=G, E=E, EX=EX, ET=ET, ETX=ETX)


def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Legendre rule on the reference triangle.

    Exact for polynomials up to ``degree`` via the Duffy substitution
    x1 = a, x2 = b*(1 - a) with an n x n tensor Gauss grid.
    """
    n = (degree + 3) // 2  # integrand picks up one extra power of (1 - a)
    x, w = np.polynomial.legendre.leggauss(n)
    a = 0.5 * (x + 1.0)
    wa = 0.5 * w
    A, B = np.meshgrid(a, a, indexing="ij")
    WA, WB = np.meshgrid(wa, wa, indexing="ij")
    x1 = A.ravel()
    x2 = (B * (1.0 - A)).ravel()
    wts = (WA * WB * (1.0 - A)).ravel()
    return np.column_stack([x1, x2]), wts


def edge_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1], exact up to ``degree``."""
    n = degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class TensorReport:
    order: int
    max_abs_dev: float
    max_rel_dev: float


def verify_tensors(t: RefTensors) -> TensorReport:
    """Compare every frozen entry against degree-exact numerical quadrature.

    Relative deviations are scaled by the largest entry of each tensor;
    entrywise ratios are meaningless where the exact value is zero and the
    quadrature returns roundoff.
    """
    k = t.order
    basis = build_basis(k)
    K = basis.size

    pts, wts = triangle_rule(3 * k + 1)
    vals = np.array([[f.eval(x, y) for (x, y) in pts] for f in basis.functions])
    grads = np.array(
        [[[g.eval(x, y) for (x, y) in pts] for g in basis.gradients[i]]
         for i in range(K)]
    )  # [i, l, q]

    sq, wq = edge_rule(3 * k)
    tr = np.array(
        [[[trace_on_edge(f, EDGES[e]).eval(s) for s in sq] for f in basis.functions]
         for e in range(3)]
    )  # [e, i, q]
    tr_rev = np.array(
        [[[trace_on_edge(f, EDGES[e]).eval(1.0 - s) for s in sq]
          for f in basis.functions] for e in range(3)]
    )

    quad = {
        "M": np.einsum("pq,iq,q->pi", vals, vals, wts),
        "S": np.einsum("plq,iq,q->lpi", grads, vals, wts),
        "T": np.einsum("plq,iq,mq,q->lpim", grads, vals, vals, wts),
        "G": np.einsum("pq,iq,mq,q->pim", vals, vals, vals, wts),
        "E": np.einsum("epq,eiq,q->epi", tr, tr, wq),
        "EX": np.einsum("epq,fiq,q->efpi", tr, tr_rev, wq),
        "ET": np.einsum("epq,eiq,emq,q->epim", tr, tr, tr, wq),
        "ETX": np.einsum("epq,fiq,fmq,q->efpim", tr, tr_rev, tr_rev, wq),
    }

    max_abs = 0.0
    max_rel = 0.0
    for name, frozen in t.as_dict().items():
        ref = quad[name]
        dev = np.abs(frozen - ref)
        max_abs = max(max_abs, float(dev.max()))
        scale = float(np.abs(ref).max())
        max_rel = max(max_rel, float(dev.max()) / scale)
    return TensorReport(order=k, max_abs_dev=max_abs, max_rel_dev=max_rel)


def dump_tensors_csv(t: RefTensors, out_dir: str | Path) -> list[Path]:
    """Write one CSV per tensor with a header naming the indices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    headers = {
        "M": ["p", "i"], "S": ["l", "p", "i"], "T": ["l", "p", "i", "m"],
        "G": ["p", "i", "m"], "E": ["e", "p", "i"], "EX": ["e", "eN", "p", "i"],
        "ET": ["e", "p", "i", "m"], "ETX": ["e", "eN", "p", "i", "m"],
    }
    written = []
    for name, arr in t.as_dict().items():
        path = out_dir / f"{name}_k{t.order}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers[name] + ["value"])
            for idx in np.ndindex(arr.shape):
                writer.writerow(list(idx) + [f"{arr[idx]:.17g}"])
        written.append(path)
    return written
