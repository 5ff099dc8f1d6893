"""Convergence studies, error norms, CSV/VTK output.

The error quadrature is deliberately higher-order than the scheme (exact to
degree 2k+2) so measurement error never pollutes the observed rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import Mesh, build_ring_mesh, build_square_mesh
from .scenario import Scenario, perturbed_square_scenario, ring_scenario
from .solver import Discretization, State

__all__ = [
    "ErrorReport",
    "ConvergenceTable",
    "l2_error",
    "convergence_study",
    "write_vtk",
    "CSV_HEADER",
]

CSV_HEADER = "order,level,elements,err_xi,eoc_xi,err_U,eoc_U,err_V,eoc_V"


@dataclass(frozen=True)
class ErrorReport:
    order: int
    level: int
    elements: int
    err_xi: float
    err_U: float
    err_V: float

    def errors(self) -> tuple[float, float, float]:
        return (self.err_xi, self.err_U, self.err_V)


@dataclass
class ConvergenceTable:
    rows: list[ErrorReport]

    def eoc(self) -> list[tuple[float, float, float]]:
        """EOC between consecutive rows: log2(coarse/fine) per variable."""
        out = []
        for prev, cur in zip(self.rows, self.rows[1:]):
            out.append(tuple(
                np.log(p / c) / np.log(2.0)
                for p, c in zip(prev.errors(), cur.errors())
            ))
        return out

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        eocs = [("", "", "")] + [tuple(f"{v:.17g}" for v in e) for e in self.eoc()]
        for row, eoc in zip(self.rows, eocs):
            lines.append(
                f"{row.order},{row.level},{row.elements},"
                f"{row.err_xi:.17g},{eoc[0]},"
                f"{row.err_U:.17g},{eoc[1]},"
                f"{row.err_V:.17g},{eoc[2]}"
            )
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_csv(text: str, order: int | None = None) -> "ConvergenceTable":
        rows = []
        for line in text.strip().splitlines()[1:]:
            parts = line.split(",")
            rows.append(ErrorReport(
                order=int(parts[0]), level=int(parts[1]), elements=int(parts[2]),
                err_xi=float(parts[3]), err_U=float(parts[5]), err_V=float(parts[7]),
            ))
        return ConvergenceTable(rows=rows)


def l2_error(disc: Discretization, state: State, t: float,
             level: int = 0) -> ErrorReport:
    """Global L2 errors of (xi, U, V) against the analytic solution at t."""
    scn = disc.scn
    x, y = disc.quad_xy[:, :, 0], disc.quad_xy[:, :, 1]
    exact = scn.exact(x, y, t)
    det = disc.geom.detB
    sd = disc.geom.sqrt_detB
    errs = []
    for j in range(3):
        approx = (state.c[:, j] @ disc.quad_phi) / sd[:, None]
        diff2 = (approx - exact[j]) ** 2
        cell = det * (diff2 @ disc.quad_w)
        errs.append(float(np.sqrt(cell.sum())))
    return ErrorReport(
        order=disc.k, level=level, elements=disc.mesh.n_triangles,
        err_xi=errs[0], err_U=errs[1], err_V=errs[2],
    )


def _build_level_mesh(scenario_name: str, level: int, perturb: float,
                      seed: int) -> Mesh:
    if scenario_name == "ring":
        return build_ring_mesh(level)
    return build_square_mesh(level, perturb=perturb, seed=seed)


def convergence_study(
    order: int,
    levels: range | list[int],
    scenario: Scenario | None = None,
    scenario_name: str = "perturbed-square",
    perturb: float = 0.2,
    seed: int = 42,
    t_end: float | None = None,
    backend: str = "einsum",
    progress=None,
) -> ConvergenceTable:
    """Run the full simulation per level and tabulate errors and rates.

    Partial results are kept if a level fails; the table holds whatever
    levels completed.
    """
    levels = list(levels)
    if any(b - a != 1 for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be contiguous")
    if scenario is None:
        maker = ring_scenario if scenario_name == "ring" else perturbed_square_scenario
        scenario = maker()
    rows = []
    for level in levels:
        mesh = _build_level_mesh(scenario_name, level, perturb, seed)
        disc = Discretization(mesh, scenario, order, backend=backend)
        try:
            state = disc.run(t_end=t_end)
        except (ArithmeticError, FloatingPointError) as err:
            if progress:
                progress(f"level {level} failed: {err}")
            break
        end = scenario.t_end if t_end is None else t_end
        rows.append(l2_error(disc, state, end, level=level))
        if progress:
            r = rows[-1]
            progress(
                f"k={order} level={level} elements={r.elements} "
                f"err_xi={r.err_xi:.4g} err_U={r.err_U:.4g} err_V={r.err_V:.4g}"
            )
    return ConvergenceTable(rows=rows)


def write_vtk(disc: Discretization, state: State, path: str | Path,
              title: str = "qfswe") -> None:
    """Legacy ASCII VTK; every DG triangle is emitted with its own vertices."""
    mesh = disc.mesh
    E = mesh.n_triangles
    verts = mesh.vertices[mesh.triangles.reshape(-1)]  # (3E, 2)

    sd = disc.geom.sqrt_detB[:, None]
    point_fields = {}
    for name, coef in (
        ("xi", state.c[:, 0]), ("U", state.c[:, 1]), ("V", state.c[:, 2]),
        ("u", state.u[:, 0]), ("v", state.u[:, 1]),
    ):
        point_fields[name] = ((coef @ disc.phi_at_vertices) / sd).reshape(-1)

    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {3 * E} double",
    ]
    for x, y in verts:
        lines.append(f"{x:.17g} {y:.17g} 0")
    lines.append(f"CELLS {E} {4 * E}")
    for e in range(E):
        lines.append(f"3 {3 * e} {3 * e + 1} {3 * e + 2}")
    lines.append(f"CELL_TYPES {E}")
    lines.extend(["5"] * E)
    lines.append(f"POINT_DATA {3 * E}")
    for name, vals in point_fields.items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{v:.17g}" for v in vals)
    lines.append(f"CELL_DATA {E}")
    lines.append("SCALARS element_id int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(e) for e in range(E))
    Path(path).write_text("\n".join(lines) + "\n")
