"""Lowering of reference-tensor contractions to fully unrolled scalar kernels.

A ContractionSpec names an output slot and a list of contraction terms over
the frozen reference tensors, with scalar prefactors built from geometry
and physics symbols. ``lower`` unrolls every sum, inlines tensor entries as
literal constants, drops zero entries, and shares duplicate subexpressions
structurally (no re-association, so floating-point results are preserved
between the shared and unshared forms).

Two consumers exist: ``interpret`` evaluates the IR directly in float64
(batched over a leading axis), and ``emit_source`` pretty-prints a
self-contained C function whose literals round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np

from .tensors import RefTensors

__all__ = [
    "IndexOutOfRange",
    "SizeMismatch",
    "Expr",
    "sym",
    "const",
    "ContractionSpec",
    "PairTerm",
    "TripleTerm",
    "MatrixTerm",
    "KernelIR",
    "lower",
    "interpret",
    "emit_source",
    "kernel_suite",
    "GEOMETRY_SYMBOLS",
]


class IndexOutOfRange(IndexError):
    """Tensor index binding outside the tensor's extent."""


class SizeMismatch(ValueError):
    """Kernel input array does not match the declared arity."""


# ---------------------------------------------------------------------------
# scalar prefactor expressions (tiny trees, shared with the IR node language)

@dataclass(frozen=True)
class Expr:
    op: str  # 'const' | 'sym' | 'add' | 'sub' | 'mul' | 'div'
    a: "Expr | None" = None
    b: "Expr | None" = None
    value: float = 0.0
    name: str = ""

    def __add__(self, other):
        return Expr("add", self, _as_expr(other))

    def __sub__(self, other):
        return Expr("sub", self, _as_expr(other))

    def __mul__(self, other):
        return Expr("mul", self, _as_expr(other))

    def __truediv__(self, other):
        return Expr("div", self, _as_expr(other))

    def __rmul__(self, other):
        return Expr("mul", _as_expr(other), self)


def _as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Expr("const", value=float(x))


def sym(name: str) -> Expr:
    return Expr("sym", name=name)


def const(v: float) -> Expr:
    return Expr("const", value=float(v))


# geometry/physics scalars a kernel may reference; sqrtDetB carries the
# |detB|^(3/2) factors of the momentum contractions
GEOMETRY_SYMBOLS = (
    "detB", "sqrtDetB", "B11", "B12", "B21", "B22",
    "edgeLen", "n1", "n2", "lam", "g",
)


# ---------------------------------------------------------------------------
# contraction terms

@dataclass(frozen=True)
class PairTerm:
    """out[p] (+/-)= pref * sum_i TEN[p, i] * f[i]"""

    tensor: str
    fixed: tuple[int, ...]
    field: str
    pref: Expr
    sign: int = 1


@dataclass(frozen=True)
class TripleTerm:
    """out[p] (+/-)= pref * sum_{i,m} TEN[p, i, m] * f[i] * g[m]"""

    tensor: str
    fixed: tuple[int, ...]
    field_a: str
    field_b: str
    pref: Expr
    sign: int = 1


@dataclass(frozen=True)
class MatrixTerm:
    """out[p*K + m] (+/-)= pref * sum_i TEN[p, i, m] * f[i]"""

    tensor: str
    fixed: tuple[int, ...]
    field: str
    pref: Expr
    sign: int = 1


@dataclass(frozen=True)
class ContractionSpec:
    name: str
    inputs: tuple[tuple[str, int], ...]  # (field name, arity)
    symbols: tuple[str, ...]
    output_arity: int
    terms: tuple  # Pair/Triple/Matrix terms

    def arity_of(self, fieldname: str) -> int:
        for n, a in self.inputs:
            if n == fieldname:
                return a
        raise KeyError(fieldname)


# ---------------------------------------------------------------------------
# IR

@dataclass
class KernelIR:
    """SSA list of scalar assignments plus output bindings.

    nodes[i] is a tuple:
        ('const', v) | ('load', field, idx) | ('sym', name) |
        (op, ia, ib) with op in add/sub/mul/div referencing earlier nodes.
    outputs[j] is the node id producing output slot j.
    """

    name: str
    spec: ContractionSpec
    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    mul_terms: int = 0  # unrolled multiply-term count before sharing


class _Builder:
    def __init__(self, cse: bool):
        self.nodes = []
        self.memo: dict = {}
        self.cse = cse

    def _emit(self, key) -> int:
        if self.cse:
            hit = self.memo.get(key)
            if hit is not None:
                return hit
        self.nodes.append(key)
        nid = len(self.nodes) - 1
        if self.cse:
            self.memo[key] = nid
        return nid

    def constant(self, v: float) -> int:
        return self._emit(("const", float(v)))

    def load(self, fieldname: str, idx: int) -> int:
        return self._emit(("load", fieldname, idx))

    def symbol(self, name: str) -> int:
        return self._emit(("sym", name))

    def binop(self, op: str, a: int, b: int) -> int:
        return self._emit((op, a, b))

    def expr(self, e: Expr) -> int:
        if e.op == "const":
            return self.constant(e.value)
        if e.op == "sym":
            return self.symbol(e.name)
        return self.binop(e.op, self.expr(e.a), self.expr(e.b))


def _tensor_slice(tensors: RefTensors, name: str, fixed: tuple[int, ...]) -> np.ndarray:
    arr = tensors.as_dict()[name]
    for ix in fixed:
        if not 0 <= ix < arr.shape[0]:
            raise IndexOutOfRange(f"fixed index {ix} out of range for {name}")
        arr = arr[ix]
    return arr


def lower(spec: ContractionSpec, tensors: RefTensors, cse: bool = True) -> KernelIR:
    """Unroll the contraction into an SSA kernel with tensor entries inlined."""
    K = tensors.n_funcs
    bld = _Builder(cse)
    ir = KernelIR(name=spec.name, spec=spec)

    sums: list[int | None] = [None] * spec.output_arity

    def accumulate(slot: int, node: int, sign: int):
        if sums[slot] is None:
            if sign > 0:
                sums[slot] = node
            else:
                sums[slot] = bld.binop("sub", bld.constant(0.0), node)
        else:
            sums[slot] = bld.binop("add" if sign > 0 else "sub", sums[slot], node)

    for term in spec.terms:
        ten = _tensor_slice(tensors, term.tensor, term.fixed)
        pref = bld.expr(term.pref)
        if isinstance(term, PairTerm):
            if ten.ndim != 2:
                raise IndexOutOfRange(f"{term.tensor}{term.fixed} is not 2-D")
            for p in range(ten.shape[0]):
                for i in range(ten.shape[1]):
                    v = ten[p, i]
                    if v == 0.0:
                        continue
                    node = bld.binop("mul", bld.constant(v), bld.load(term.field, i))
                    node = bld.binop("mul", pref, node)
                    ir.mul_terms += 1
                    accumulate(p, node, term.sign)
        elif isinstance(term, TripleTerm):
            if ten.ndim != 3:
                raise IndexOutOfRange(f"{term.tensor}{term.fixed} is not 3-D")
            for p in range(ten.shape[0]):
                for i in range(ten.shape[1]):
                    for m in range(ten.shape[2]):
                        v = ten[p, i, m]
                        if v == 0.0:
                            continue
                        node = bld.binop(
                            "mul",
                            bld.binop("mul", bld.constant(v), bld.load(term.field_a, i)),
                            bld.load(term.field_b, m),
                        )
                        node = bld.binop("mul", pref, node)
                        ir.mul_terms += 1
                        accumulate(p, node, term.sign)
        elif isinstance(term, MatrixTerm):
            if ten.ndim != 3:
                raise IndexOutOfRange(f"{term.tensor}{term.fixed} is not 3-D")
            for p in range(ten.shape[0]):
                for m in range(ten.shape[2]):
                    slot = p * ten.shape[2] + m
                    for i in range(ten.shape[1]):
                        v = ten[p, i, m]
                        if v == 0.0:
                            continue
                        node = bld.binop(
                            "mul", bld.constant(v), bld.load(term.field, i)
                        )
                        node = bld.binop("mul", pref, node)
                        ir.mul_terms += 1
                        accumulate(slot, node, term.sign)
        else:
            raise TypeError(f"unknown term type {type(term)!r}")

    zero = None
    for slot in range(spec.output_arity):
        if sums[slot] is None:
            if zero is None:
                zero = bld.constant(0.0)
            sums[slot] = zero

    # dead-code elimination: keep only nodes reachable from outputs
    live = set()
    stack = [s for s in sums]
    while stack:
        nid = stack.pop()
        if nid in live:
            continue
        live.add(nid)
        node = bld.nodes[nid]
        if node[0] in ("add", "sub", "mul", "div"):
            stack.append(node[1])
            stack.append(node[2])
    remap = {}
    for nid in range(len(bld.nodes)):
        if nid in live:
            remap[nid] = len(remap)
    for nid in sorted(live):
        node = bld.nodes[nid]
        if node[0] in ("add", "sub", "mul", "div"):
            node = (node[0], remap[node[1]], remap[node[2]])
        ir.nodes.append(node)
    ir.outputs = [remap[s] for s in sums]
    return ir


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def interpret(ir: KernelIR, inputs: dict, symbols: dict) -> np.ndarray:
    """Evaluate the IR in float64, batched over leading axes of the inputs.

    inputs maps field name -> array whose last axis is the field arity;
    symbols maps symbol name -> scalar or batch-shaped array.
    """
    spec = ir.spec
    batch_shape: tuple = ()
    for name, arity in spec.inputs:
        arr = np.asarray(inputs[name], dtype=float)
        if arr.shape[-1:] != (arity,):
            raise SizeMismatch(
                f"input {name!r}: expected last axis {arity}, got {arr.shape}"
            )
        inputs = {**inputs, name: arr}
        if arr.ndim > 1:
            batch_shape = np.broadcast_shapes(batch_shape, arr.shape[:-1])

    vals: list = [None] * len(ir.nodes)
    for nid, node in enumerate(ir.nodes):
        kind = node[0]
        if kind == "const":
            vals[nid] = node[1]
        elif kind == "load":
            vals[nid] = np.asarray(inputs[node[1]], dtype=float)[..., node[2]]
        elif kind == "sym":
            vals[nid] = symbols[node[1]]
        else:
            vals[nid] = _OPS[kind](vals[node[1]], vals[node[2]])

    out = np.empty(batch_shape + (spec.output_arity,))
    for j, nid in enumerate(ir.outputs):
        out[..., j] = vals[nid]
    return out


def _c_literal(v: float) -> str:
    text = repr(float(v))
    if "." not in text and "e" not in text and "inf" not in text and "nan" not in text:
        text += ".0"
    return text


def emit_source(ir: KernelIR, name: str | None = None) -> str:
    """Render the IR as a self-contained C function."""
    spec = ir.spec
    fname = name or ir.name
    params = [f"const double* {n}" for n, _ in spec.inputs]
    params += [f"double {s}" for s in spec.symbols]
    params.append("double* out")
    lines = [
        f"/* generated kernel: {ir.name} (order-{spec.output_arity} output,"
        f" {ir.mul_terms} multiply terms) */",
        f"void {fname}({', '.join(params)}) {{",
    ]
    names = [f"t{i}" for i in range(len(ir.nodes))]
    opsym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
    for nid, node in enumerate(ir.nodes):
        kind = node[0]
        if kind == "const":
            rhs = _c_literal(node[1])
        elif kind == "load":
            rhs = f"{node[1]}[{node[2]}]"
        elif kind == "sym":
            rhs = node[1]
        else:
            rhs = f"{names[node[1]]} {opsym[kind]} {names[node[2]]}"
        lines.append(f"  const double {names[nid]} = {rhs};")
    for j, nid in enumerate(ir.outputs):
        lines.append(f"  out[{j}] = {names[nid]};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# the solver's kernel set

def _d1():
    return sym("detB")


def _d32():
    return sym("detB") * sym("sqrtDetB")


def kernel_suite(k: int, tensors: RefTensors | None = None) -> list[ContractionSpec]:
    """All contraction kernels the scheme uses, for polynomial order k."""
    from .tensors import build_ref_tensors

    t = tensors or build_ref_tensors(k)
    K = t.n_funcs
    specs = []

    # surface-elevation equation element term: linear flux (U, V)
    specs.append(ContractionSpec(
        name=f"elem_xi_k{k}",
        inputs=(("cU", K), ("cV", K)),
        symbols=("detB", "B11", "B12", "B21", "B22"),
        output_arity=K,
        terms=(
            PairTerm("S", (0,), "cU", sym("B22") / _d1(), +1),
            PairTerm("S", (1,), "cU", sym("B21") / _d1(), -1),
            PairTerm("S", (0,), "cV", sym("B12") / _d1(), -1),
            PairTerm("S", (1,), "cV", sym("B11") / _d1(), +1),
        ),
    ))

    # momentum element terms: advective products plus the pressure
    # g/2 * xi * (xi + 2*hb) routed through the stiffness triples
    def momentum(name, adv):
        return ContractionSpec(
            name=f"{name}_k{k}",
            inputs=(("cxi", K), (adv, K), ("uu", K), ("uv", K), ("hb", K)),
            symbols=("detB", "sqrtDetB", "B11", "B12", "B21", "B22", "g"),
            output_arity=K,
            terms=(
                TripleTerm("T", (0,), adv, "uu", sym("B22") / _d32(), +1),
                TripleTerm("T", (1,), adv, "uu", sym("B21") / _d32(), -1),
                TripleTerm("T", (0,), adv, "uv", sym("B12") / _d32(), -1),
                TripleTerm("T", (1,), adv, "uv", sym("B11") / _d32(), +1),
            ) + (
                (
                    TripleTerm("T", (0,), "cxi", "cxi",
                               sym("g") * const(0.5) * sym("B22") / _d32(), +1),
                    TripleTerm("T", (1,), "cxi", "cxi",
                               sym("g") * const(0.5) * sym("B21") / _d32(), -1),
                    TripleTerm("T", (0,), "cxi", "hb", sym("g") * sym("B22") / _d32(), +1),
                    TripleTerm("T", (1,), "cxi", "hb", sym("g") * sym("B21") / _d32(), -1),
                ) if name == "elem_U" else (
                    TripleTerm("T", (0,), "cxi", "cxi",
                               sym("g") * const(0.5) * sym("B12") / _d32(), -1),
                    TripleTerm("T", (1,), "cxi", "cxi",
                               sym("g") * const(0.5) * sym("B11") / _d32(), +1),
                    TripleTerm("T", (0,), "cxi", "hb", sym("g") * sym("B12") / _d32(), -1),
                    TripleTerm("T", (1,), "cxi", "hb", sym("g") * sym("B11") / _d32(), +1),
                )
            ),
        )

    specs.append(momentum("elem_U", "cU"))
    specs.append(momentum("elem_V", "cV"))

    # velocity projection matrix A[p][m] = sum_i H_i G[p][i][m] / sqrt(detB)
    specs.append(ContractionSpec(
        name=f"vel_mat_k{k}",
        inputs=(("H", K),),
        symbols=("sqrtDetB",),
        output_arity=K * K,
        terms=(MatrixTerm("G", (), "H", const(1.0) / sym("sqrtDetB"), +1),),
    ))

    one = const(1.0)
    for e in range(3):
        specs.append(ContractionSpec(
            name=f"edge_pair_e{e}_k{k}",
            inputs=(("f", K),),
            symbols=(),
            output_arity=K,
            terms=(PairTerm("E", (e,), "f", one, +1),),
        ))
        specs.append(ContractionSpec(
            name=f"edge_triple_e{e}_k{k}",
            inputs=(("f", K), ("h", K)),
            symbols=(),
            output_arity=K,
            terms=(TripleTerm("ET", (e,), "f", "h", one, +1),),
        ))
    for e in range(3):
        for eN in range(3):
            specs.append(ContractionSpec(
                name=f"edge_pair_x_e{e}n{eN}_k{k}",
                inputs=(("f", K),),
                symbols=(),
                output_arity=K,
                terms=(PairTerm("EX", (e, eN), "f", one, +1),),
            ))
            specs.append(ContractionSpec(
                name=f"edge_triple_x_e{e}n{eN}_k{k}",
                inputs=(("f", K), ("h", K)),
                symbols=(),
                output_arity=K,
                terms=(TripleTerm("ETX", (e, eN), "f", "h", one, +1),),
            ))
    return specs


def emit_kernel_dir(k: int, out_dir: str | Path) -> Path:
    """Write one .c file per kernel plus a JSON manifest; returns manifest path."""
    from .tensors import build_ref_tensors

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = build_ref_tensors(k)
    manifest = {"order": k, "kernels": []}
    for spec in kernel_suite(k, tensors):
        ir = lower(spec, tensors)
        src = emit_source(ir)
        path = out_dir / f"{spec.name}.c"
        path.write_text(src)
        manifest["kernels"].append({
            "name": spec.name,
            "file": path.name,
            "inputs": [{"name": n, "arity": a} for n, a in spec.inputs],
            "symbols": list(spec.symbols),
            "output_arity": spec.output_arity,
            "multiply_terms": ir.mul_terms,
            "assignments": len(ir.nodes),
        })
    mpath = out_dir / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    return mpath
