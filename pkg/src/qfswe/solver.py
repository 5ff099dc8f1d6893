"""Semi-discrete quadrature-free DG scheme for the mixed SWE system.

Unknowns per element are modal coefficients of c = (xi, U, V) and of the
auxiliary velocity u = (u, v), both with respect to the normalized physical
basis phi_ei = ref_phi_i o F_e^{-1} / sqrt(detB) (its mass matrix is the
identity, which is what the 1/detB and 1/detB^{3/2} scalings of the element
contractions encode).

All interior integrals are frozen reference-tensor contractions; runtime
quadrature appears only in the initial projection, Dirichlet trace data,
manufactured forcing, and error measurement. The flux never divides by the
water depth; the only divisions in the time loop are inside the per-element
LU solves of the velocity projection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, compute_geometry
from .scenario import Scenario
from .symbolic import EDGES, build_basis
from .tensors import RefTensors, build_ref_tensors, edge_rule, triangle_rule

__all__ = [
    "DryState",
    "SingularProjection",
    "State",
    "Discretization",
    "flux_dot_n",
]

XI, U, V = 0, 1, 2
LAMBDA_SAMPLES = (0.0, 0.5, 1.0)


class DryState(ArithmeticError):
    """Total water depth at or below the configured minimum."""


class SingularProjection(ArithmeticError):
    """Per-element velocity projection system is numerically singular."""


@dataclass
class State:
    """Modal coefficients: c[e, j, i] for (xi, U, V), u[e, j, i] for (u, v)."""

    c: np.ndarray
    u: np.ndarray
    t: float = 0.0

    def copy(self) -> "State":
        return State(self.c.copy(), self.u.copy(), self.t)


def flux_dot_n(xi, Uq, Vq, uu, uv, hb, n1, n2, g):
    """Pointwise modified flux contracted with a normal, Eq.-(8) structure.

    Returns the three components of A~ . n; the pressure enters as
    g/2 * xi * (xi + 2 hb), so no division by the depth occurs.
    """
    pressure = 0.5 * g * xi * (xi + 2.0 * hb)
    return (
        Uq * n1 + Vq * n2,
        (Uq * uu + pressure) * n1 + (Uq * uv) * n2,
        (Vq * uu) * n1 + (Vq * uv + pressure) * n2,
    )


@dataclass
class _SidePass:
    """One test-side view of the interior edges, grouped by local-edge pair."""

    test_elem: np.ndarray
    other_elem: np.ndarray
    edge_index: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    length: np.ndarray
    groups: dict  # (e_test, e_other) -> index array into the arrays above


@dataclass
class _BoundaryPass:
    elem: np.ndarray
    edge_index: np.ndarray
    local_edge: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    length: np.ndarray
    groups: dict  # e_test -> index array
    gauss_xy: np.ndarray    # (nb, Q, 2) physical Gauss points per edge
    sample_xy: np.ndarray   # (nb, 3, 2) physical lambda sample points


class Discretization:
    """Mesh + order + scenario bound together with all precomputed data."""

    def __init__(self, mesh: Mesh, scenario: Scenario, order: int,
                 backend: str = "einsum"):
        if backend not in ("einsum", "ir"):
            raise ValueError("backend must be 'einsum' or 'ir'")
        self.mesh = mesh
        self.scn = scenario
        self.k = order
        self.backend = backend
        self.tensors: RefTensors = build_ref_tensors(order)
        self.K = self.tensors.n_funcs
        self.geom, self.edge_geom = compute_geometry(mesh)
        self.basis = build_basis(order)
        self._setup_quadrature()
        self._setup_bathymetry()
        self._setup_edges()
        self._setup_traces()
        if backend == "ir":
            self._setup_kernels()
        self._cfl_warned = False
        self.cfl_warn_threshold = 2.0
        self.instrument_mass_flux: bool = False
        self.last_mass_flux: tuple[np.ndarray, np.ndarray] | None = None

    # ------------------------------------------------------------- setup

    def _setup_quadrature(self):
        k, K = self.k, self.K
        pts, wts = triangle_rule(2 * k + 2)
        self.quad_ref = pts
        self.quad_w = wts
        self.quad_phi = np.array(
            [[f.eval(x, y) for (x, y) in pts] for f in self.basis.functions]
        )  # (K, Q)
        B, a1 = self.geom.B, self.geom.a1
        self.quad_xy = np.einsum("eab,qb->eqa", B, pts) + a1[:, None, :]

    def _setup_bathymetry(self):
        """Project hb onto degree min(k,1); keep its constant gradient."""
        K = self.K
        sd = self.geom.sqrt_detB
        hb_vals = self.scn.hb(self.quad_xy[:, :, 0], self.quad_xy[:, :, 1])
        proj = sd[:, None] * ((hb_vals * self.quad_w) @ self.quad_phi.T)  # (E,K)
        keep = {0: 1, 1: 3, 2: 3, 3: 3}[self.k]
        self.hb_coef = np.zeros_like(proj)
        self.hb_coef[:, :keep] = proj[:, :keep]

        # gradient of the projected bathymetry (constant per element)
        E = len(sd)
        if keep >= 3:
            g1 = np.array([float(self.basis.gradients[i][0].eval(0.0, 0.0))
                           for i in range(3)])
            g2 = np.array([float(self.basis.gradients[i][1].eval(0.0, 0.0))
                           for i in range(3)])
            lin = self.hb_coef[:, :3]
            d1 = lin @ g1
            d2 = lin @ g2
            B, det, sd_ = self.geom.B, self.geom.detB, self.geom.sqrt_detB
            scale = det * sd_
            self.hb_grad = np.column_stack([
                (B[:, 1, 1] * d1 - B[:, 1, 0] * d2) / scale,
                (-B[:, 0, 1] * d1 + B[:, 0, 0] * d2) / scale,
            ])
        else:
            self.hb_grad = np.zeros((E, 2))
        # element-mean bathymetry for the 'const' flux mode
        self.hb_mean = self.hb_coef[:, 0] / (np.sqrt(2.0) * sd)

    def _setup_edges(self):
        mesh, eg = self.mesh, self.edge_geom
        interior = [i for i, e in enumerate(mesh.edges) if not e.is_boundary]
        boundary = [i for i, e in enumerate(mesh.edges) if e.is_boundary]
        for i in boundary:
            if mesh.edges[i].marker not in self.scn.dirichlet_markers:
                raise ValueError(
                    f"boundary edge {i} has marker {mesh.edges[i].marker}; only "
                    "Dirichlet markers are supported"
                )

        def side_pass(test_left: bool) -> _SidePass:
            test, other, locpair, idx = [], [], [], []
            for i in interior:
                e = mesh.edges[i]
                if test_left:
                    test.append(e.left)
                    other.append(e.right)
                    locpair.append((e.left_local, e.right_local))
                else:
                    test.append(e.right)
                    other.append(e.left)
                    locpair.append((e.right_local, e.left_local))
                idx.append(i)
            test = np.array(test, dtype=int)
            other = np.array(other, dtype=int)
            idx = np.array(idx, dtype=int)
            sign = 1.0 if test_left else -1.0
            groups: dict = {}
            for row, lp in enumerate(locpair):
                groups.setdefault(lp, []).append(row)
            groups = {kk: np.array(vv, dtype=int) for kk, vv in sorted(groups.items())}
            return _SidePass(
                test_elem=test, other_elem=other, edge_index=idx,
                n1=sign * eg.normal[idx, 0], n2=sign * eg.normal[idx, 1],
                length=eg.length[idx], groups=groups,
            )

        self.pass_L = side_pass(True)
        self.pass_R = side_pass(False)
        self.n_interior = len(interior)
        self.interior_edges = np.array(interior, dtype=int)

        # boundary bookkeeping
        belem = np.array([mesh.edges[i].left for i in boundary], dtype=int)
        bloc = np.array([mesh.edges[i].left_local for i in boundary], dtype=int)
        bidx = np.array(boundary, dtype=int)
        groups: dict = {}
        for row, le in enumerate(bloc):
            groups.setdefault(int(le), []).append(row)
        groups = {kk: np.array(vv, dtype=int) for kk, vv in sorted(groups.items())}

        sq, wq = edge_rule(2 * (self.k + 2) - 1)
        self.bnd_gauss_s = sq
        self.bnd_gauss_w = wq
        B, a1 = self.geom.B, self.geom.a1
        gxy = np.empty((len(boundary), len(sq), 2))
        sxy = np.empty((len(boundary), len(LAMBDA_SAMPLES), 2))
        for row, (el, le) in enumerate(zip(belem, bloc)):
            ref_g = np.array([EDGES[le].point(s) for s in sq])
            ref_s = np.array([EDGES[le].point(s) for s in LAMBDA_SAMPLES])
            gxy[row] = ref_g @ B[el].T + a1[el]
            sxy[row] = ref_s @ B[el].T + a1[el]
        self.pass_B = _BoundaryPass(
            elem=belem, edge_index=bidx, local_edge=bloc,
            n1=eg.normal[bidx, 0], n2=eg.normal[bidx, 1],
            length=eg.length[bidx], groups=groups,
            gauss_xy=gxy, sample_xy=sxy,
        )

        # minimum element height for the CFL advisory
        lens = np.zeros((self.mesh.n_triangles, 3))
        for i, e in enumerate(mesh.edges):
            lens[e.left, e.left_local] = eg.length[i]
            if e.right >= 0:
                lens[e.right, e.right_local] = eg.length[i]
        self.h_min = float((self.geom.detB / lens.max(axis=1)).min())

    def _setup_traces(self):
        """Trace evaluation matrices and boundary-projection pseudo-inverses."""
        K = self.K
        from .symbolic import trace_on_edge

        traces = [[trace_on_edge(f, EDGES[e]) for f in self.basis.functions]
                  for e in range(3)]
        self.trace_at_samples = np.array(
            [[[tr.eval(s) for s in LAMBDA_SAMPLES] for tr in row] for row in traces]
        )  # (3, K, 3)
        self.trace_at_gauss = np.array(
            [[[tr.eval(s) for s in self.bnd_gauss_s] for tr in row] for row in traces]
        )  # (3, K, Q)
        # pseudo-inverse of the own-side edge Gram matrix; the trace space has
        # rank k+1 < K for k >= 1
        self.edge_proj = np.array([
            np.linalg.pinv(self.tensors.E[e], rcond=1e-10) for e in range(3)
        ])
        # vertex values for visualization
        self.phi_at_vertices = np.array(
            [[f.eval(*v) for v in ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))]
             for f in self.basis.functions]
        )  # (K, 3)

    def _setup_kernels(self):
        from .codegen import kernel_suite, lower

        self.kernels = {
            spec.name: lower(spec, self.tensors)
            for spec in kernel_suite(self.k, self.tensors)
        }

    # ------------------------------------------------- projection helpers

    def project_volume(self, fn, t: float | None = None) -> np.ndarray:
        """L2-project a callable onto the normalized basis, per element."""
        x, y = self.quad_xy[:, :, 0], self.quad_xy[:, :, 1]
        vals = fn(x, y) if t is None else fn(x, y, t)
        return self.geom.sqrt_detB[:, None] * ((vals * self.quad_w) @ self.quad_phi.T)

    def project_initial(self) -> State:
        """Project the analytic solution at t = 0 and solve for velocity."""
        scn = self.scn
        if scn.exact is None:
            raise ValueError("scenario has no analytic solution to project")
        x, y = self.quad_xy[:, :, 0], self.quad_xy[:, :, 1]
        xi, Uq, Vq = scn.exact(x, y, 0.0)
        E = self.mesh.n_triangles
        c = np.empty((E, 3, self.K))
        sd = self.geom.sqrt_detB[:, None]
        for j, vals in ((XI, xi), (U, Uq), (V, Vq)):
            c[:, j, :] = sd * ((vals * self.quad_w) @ self.quad_phi.T)
        state = State(c=c, u=np.zeros((E, 2, self.K)), t=0.0)
        self._check_wet(state)
        self.solve_velocity(state)
        return state

    def _check_wet(self, state: State):
        H = (self.hb_coef + state.c[:, XI]) @ self.quad_phi
        H /= self.geom.sqrt_detB[:, None]
        if (H < self.scn.h_min).any():
            raise DryState(
                f"projected depth fell below h_min = {self.scn.h_min}"
            )

    # ------------------------------------------------------ velocity solve

    def solve_velocity(self, state: State) -> None:
        """Per-element K x K solves of the depth-weighted projection."""
        K = self.K
        Hc = self.hb_coef + state.c[:, XI]  # (E, K)
        if self.backend == "ir":
            from .codegen import interpret

            A = interpret(
                self.kernels[f"vel_mat_k{self.k}"], {"H": Hc},
                {"sqrtDetB": self.geom.sqrt_detB},
            ).reshape(-1, K, K)
        else:
            Gmat = self.tensors.G.transpose(1, 0, 2).reshape(K, K * K)
            A = (Hc @ Gmat).reshape(-1, K, K) / self.geom.sqrt_detB[:, None, None]
        q = state.c[:, 1:3, :].transpose(0, 2, 1)  # (E, K, 2)
        try:
            sol = np.linalg.solve(A, q)
        except np.linalg.LinAlgError as err:
            raise SingularProjection(str(err)) from None
        if not np.isfinite(sol).all():
            raise SingularProjection("velocity projection produced non-finite values")
        state.u[:] = sol.transpose(0, 2, 1)

    # --------------------------------------------------------- wave speeds

    def compute_lambda(self, state: State, t: float) -> np.ndarray:
        """Max signal speed |u.n| + sqrt(g H) per edge, sampled at the edge
        endpoints and midpoint from both sides; constant per edge."""
        g = self.scn.g
        n_edges = len(self.mesh.edges)
        lam = np.zeros(n_edges)
        sd = self.geom.sqrt_detB

        def interior_side(pass_: _SidePass):
            best = np.full(len(pass_.edge_index), -np.inf)
            Hmin = np.full(len(pass_.edge_index), np.inf)
            for (e_test, _e_other), rows in pass_.groups.items():
                el = pass_.test_elem[rows]
                tr = self.trace_at_samples[e_test]  # (K, 3)
                scale = sd[el][:, None]
                xi_s = (state.c[el, XI] @ tr) / scale
                hb_s = (self.hb_coef[el] @ tr) / scale
                uu_s = (state.u[el, 0] @ tr) / scale
                uv_s = (state.u[el, 1] @ tr) / scale
                H = hb_s + xi_s
                Hmin[rows] = np.minimum(Hmin[rows], H.min(axis=1))
                un = uu_s * pass_.n1[rows, None] + uv_s * pass_.n2[rows, None]
                sp = np.abs(un) + np.sqrt(np.maximum(g * H, 0.0))
                best[rows] = np.maximum(best[rows], sp.max(axis=1))
            return best, Hmin

        bL, hL = interior_side(self.pass_L)
        bR, hR = interior_side(self.pass_R)
        if len(self.interior_edges):
            Hmin = np.minimum(hL, hR)
            if (Hmin <= 0.0).any():
                raise DryState("non-positive depth at an interior edge sample")
            lam[self.interior_edges] = np.maximum(bL, bR)

        pb = self.pass_B
        if len(pb.edge_index):
            el = pb.elem
            scale = sd[el][:, None]
            best = np.full(len(el), -np.inf)
            Hmin = np.full(len(el), np.inf)
            for e_test, rows in pb.groups.items():
                tr = self.trace_at_samples[e_test]
                sub = el[rows]
                xi_s = (state.c[sub, XI] @ tr) / sd[sub][:, None]
                hb_s = (self.hb_coef[sub] @ tr) / sd[sub][:, None]
                uu_s = (state.u[sub, 0] @ tr) / sd[sub][:, None]
                uv_s = (state.u[sub, 1] @ tr) / sd[sub][:, None]
                H = hb_s + xi_s
                un = uu_s * pb.n1[rows, None] + uv_s * pb.n2[rows, None]
                Hmin[rows] = np.minimum(Hmin[rows], H.min(axis=1))
                best[rows] = np.maximum(
                    best[rows],
                    (np.abs(un) + np.sqrt(np.maximum(g * H, 0.0))).max(axis=1),
                )
            # ghost side from the analytic Dirichlet data
            x, y = pb.sample_xy[:, :, 0], pb.sample_xy[:, :, 1]
            xi_g, _Ug, _Vg, uu_g, uv_g = self.scn.exact_with_velocity(x, y, t)
            Hg = self.scn.hb(x, y) + xi_g
            Hmin = np.minimum(Hmin, Hg.min(axis=1))
            un_g = uu_g * pb.n1[:, None] + uv_g * pb.n2[:, None]
            best = np.maximum(
                best, (np.abs(un_g) + np.sqrt(np.maximum(g * Hg, 0.0))).max(axis=1)
            )
            if (Hmin <= 0.0).any():
                raise DryState("non-positive depth at a boundary edge sample")
            lam[pb.edge_index] = best
        return lam

    # ------------------------------------------------------- RHS assembly

    def element_rhs(self, state: State) -> np.ndarray:
        """Volume contraction terms of all three equations."""
        c, u = state.c, state.u
        cxi, cU, cV = c[:, XI], c[:, U], c[:, V]
        uu, uv = u[:, 0], u[:, 1]
        g = self.scn.g
        geo = self.geom
        det, sd = geo.detB, geo.sqrt_detB
        B11, B12 = geo.B[:, 0, 0], geo.B[:, 0, 1]
        B21, B22 = geo.B[:, 1, 0], geo.B[:, 1, 1]

        if self.backend == "ir":
            from .codegen import interpret

            syms = {
                "detB": det, "sqrtDetB": sd, "B11": B11, "B12": B12,
                "B21": B21, "B22": B22, "g": g,
            }
            hb_in = self.hb_coef if self.scn.hb_mode == "linear" else \
                np.zeros_like(self.hb_coef)
            out = np.empty_like(c)
            out[:, XI] = interpret(self.kernels[f"elem_xi_k{self.k}"],
                                   {"cU": cU, "cV": cV}, syms)
            out[:, U] = interpret(
                self.kernels[f"elem_U_k{self.k}"],
                {"cxi": cxi, "cU": cU, "uu": uu, "uv": uv, "hb": hb_in}, syms)
            out[:, V] = interpret(
                self.kernels[f"elem_V_k{self.k}"],
                {"cxi": cxi, "cV": cV, "uu": uu, "uv": uv, "hb": hb_in}, syms)
            if self.scn.hb_mode == "const":
                out += self._const_hb_element(cxi)
            return out

        S1, S2 = self.tensors.S[0], self.tensors.S[1]
        T1 = self.tensors.T[0].reshape(self.K, self.K * self.K)
        T2 = self.tensors.T[1].reshape(self.K, self.K * self.K)

        d32 = det * sd
        out = np.empty_like(c)

        # elevation equation, linear flux (U, V)
        y1U, y2U = cU @ S1.T, cU @ S2.T
        y1V, y2V = cV @ S1.T, cV @ S2.T
        out[:, XI] = (
            (B22 / det)[:, None] * y1U - (B21 / det)[:, None] * y2U
            - (B12 / det)[:, None] * y1V + (B11 / det)[:, None] * y2V
        )

        # momentum equations
        pressure_w = self._pressure_outer(cxi)
        WA = self._outer(cU, uu) + pressure_w
        WB = self._outer(cU, uv)
        WC = self._outer(cV, uu)
        WD = self._outer(cV, uv) + pressure_w
        E = c.shape[0]
        KK = self.K * self.K

        def contract(W):
            flat = W.reshape(E, KK)
            return flat @ T1.T, flat @ T2.T

        y1A, y2A = contract(WA)
        y1B, y2B = contract(WB)
        y1C, y2C = contract(WC)
        y1D, y2D = contract(WD)
        out[:, U] = (
            (B22[:, None] * y1A - B21[:, None] * y2A)
            + (-B12[:, None] * y1B + B11[:, None] * y2B)
        ) / d32[:, None]
        out[:, V] = (
            (B22[:, None] * y1C - B21[:, None] * y2C)
            + (-B12[:, None] * y1D + B11[:, None] * y2D)
        ) / d32[:, None]
        if self.scn.hb_mode == "const":
            out += self._const_hb_element(cxi)
        return out

    def _outer(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a[:, :, None] * b[:, None, :]

    def _pressure_outer(self, cxi: np.ndarray) -> np.ndarray:
        """g/2 xi xi + g xi hb outer-product weights for the triple tensors."""
        g = self.scn.g
        w = 0.5 * g * self._outer(cxi, cxi)
        if self.scn.hb_mode == "linear":
            w = w + g * self._outer(cxi, self.hb_coef)
        return w

    def _const_hb_element(self, cxi: np.ndarray) -> np.ndarray:
        """Paper-form pressure bathymetry term: g hb const through stiffness."""
        geo = self.geom
        det = geo.detB
        B11, B12 = geo.B[:, 0, 0], geo.B[:, 0, 1]
        B21, B22 = geo.B[:, 1, 0], geo.B[:, 1, 1]
        S1, S2 = self.tensors.S[0], self.tensors.S[1]
        y1, y2 = cxi @ S1.T, cxi @ S2.T
        ghb = self.scn.g * self.hb_mean / det
        out = np.zeros((cxi.shape[0], 3, self.K))
        out[:, U] = (ghb * B22)[:, None] * y1 - (ghb * B21)[:, None] * y2
        out[:, V] = -(ghb * B12)[:, None] * y1 + (ghb * B11)[:, None] * y2
        return out

    # edge contraction primitives, switched on backend ---------------------

    def _pair_own(self, e: int, f: np.ndarray) -> np.ndarray:
        if self.backend == "ir":
            from .codegen import interpret

            return interpret(self.kernels[f"edge_pair_e{e}_k{self.k}"], {"f": f}, {})
        return f @ self.tensors.E[e].T

    def _pair_cross(self, e: int, b: int, f: np.ndarray) -> np.ndarray:
        if self.backend == "ir":
            from .codegen import interpret

            return interpret(
                self.kernels[f"edge_pair_x_e{e}n{b}_k{self.k}"], {"f": f}, {})
        return f @ self.tensors.EX[e, b].T

    def _triple_own(self, e: int, pairs) -> np.ndarray:
        if self.backend == "ir":
            from .codegen import interpret

            out = 0.0
            for fa, fb, scale in pairs:
                out = out + scale * interpret(
                    self.kernels[f"edge_triple_e{e}_k{self.k}"],
                    {"f": fa, "h": fb}, {})
            return out
        W = 0.0
        for fa, fb, scale in pairs:
            W = W + scale * self._outer(fa, fb)
        flat = W.reshape(W.shape[0], self.K * self.K)
        return flat @ self.tensors.ET[e].reshape(self.K, -1).T

    def _triple_cross(self, e: int, b: int, pairs) -> np.ndarray:
        if self.backend == "ir":
            from .codegen import interpret

            out = 0.0
            for fa, fb, scale in pairs:
                out = out + scale * interpret(
                    self.kernels[f"edge_triple_x_e{e}n{b}_k{self.k}"],
                    {"f": fa, "h": fb}, {})
            return out
        W = 0.0
        for fa, fb, scale in pairs:
            W = W + scale * self._outer(fa, fb)
        flat = W.reshape(W.shape[0], self.K * self.K)
        return flat @ self.tensors.ETX[e, b].reshape(self.K, -1).T

    def _side_flux(self, pass_: _SidePass, state: State, lam: np.ndarray,
                   rhs: np.ndarray, mass_log: np.ndarray | None):
        """Accumulate -<A^ . n, phi> for the test side of every interior edge."""
        g = self.scn.g
        sd, det = self.geom.sqrt_detB, self.geom.detB
        c, u = state.c, state.u
        hb = self.hb_coef
        hbm = self.hb_mean
        linear_hb = self.scn.hb_mode == "linear"

        for (e_t, e_o), rows in pass_.groups.items():
            ec = pass_.test_elem[rows]
            eo = pass_.other_elem[rows]
            n1 = pass_.n1[rows][:, None]
            n2 = pass_.n2[rows][:, None]
            ln = pass_.length[rows][:, None]
            lm = lam[pass_.edge_index[rows]][:, None]
            inv_pair_c = (1.0 / det[ec])[:, None]
            inv_pair_x = (1.0 / (sd[ec] * sd[eo]))[:, None]
            inv_tri_c = (1.0 / (det[ec] * sd[ec]))[:, None]
            inv_tri_x = (1.0 / (sd[ec] * det[eo]))[:, None]

            # linear traces (pair contractions)
            own = {j: self._pair_own(e_t, c[ec, j]) * inv_pair_c for j in (XI, U, V)}
            oth = {j: self._pair_cross(e_t, e_o, c[eo, j]) * inv_pair_x
                   for j in (XI, U, V)}

            # quadratic traces (triple contractions)
            pr_own = [(c[ec, XI], c[ec, XI], 0.5 * g)]
            pr_oth = [(c[eo, XI], c[eo, XI], 0.5 * g)]
            if linear_hb:
                pr_own.append((c[ec, XI], hb[ec], g))
                pr_oth.append((c[eo, XI], hb[eo], g))
            TA_own = self._triple_own(e_t, [(c[ec, U], u[ec, 0], 1.0)] + pr_own)
            TB_own = self._triple_own(e_t, [(c[ec, U], u[ec, 1], 1.0)])
            TC_own = self._triple_own(e_t, [(c[ec, V], u[ec, 0], 1.0)])
            TD_own = self._triple_own(e_t, [(c[ec, V], u[ec, 1], 1.0)] + pr_own)
            TA_oth = self._triple_cross(e_t, e_o, [(c[eo, U], u[eo, 0], 1.0)] + pr_oth)
            TB_oth = self._triple_cross(e_t, e_o, [(c[eo, U], u[eo, 1], 1.0)])
            TC_oth = self._triple_cross(e_t, e_o, [(c[eo, V], u[eo, 0], 1.0)])
            TD_oth = self._triple_cross(e_t, e_o, [(c[eo, V], u[eo, 1], 1.0)] + pr_oth)
            TA = TA_own * inv_tri_c + TA_oth * inv_tri_x
            TB = TB_own * inv_tri_c + TB_oth * inv_tri_x
            TC = TC_own * inv_tri_c + TC_oth * inv_tri_x
            TD = TD_own * inv_tri_c + TD_oth * inv_tri_x
            if not linear_hb:
                TA = TA + g * (hbm[ec][:, None] * own[XI] + hbm[eo][:, None] * oth[XI])
                TD = TD + g * (hbm[ec][:, None] * own[XI] + hbm[eo][:, None] * oth[XI])

            flux_xi = 0.5 * (n1 * (own[U] + oth[U]) + n2 * (own[V] + oth[V])) \
                + 0.5 * lm * (own[XI] - oth[XI])
            flux_U = 0.5 * (n1 * TA + n2 * TB) + 0.5 * lm * (own[U] - oth[U])
            flux_V = 0.5 * (n1 * TC + n2 * TD) + 0.5 * lm * (own[V] - oth[V])

            # test elements are unique within a group (the group fixes their
            # local edge index), so plain fancy indexing is safe
            contrib = np.stack([flux_xi, flux_U, flux_V], axis=1) * ln[:, :, None]
            rhs[ec] -= contrib
            if mass_log is not None:
                mass_log[rows] = -(ln[:, 0] * flux_xi[:, 0]) * sd[ec] / np.sqrt(2.0)

    def _boundary_flux(self, state: State, t: float, lam: np.ndarray,
                       rhs: np.ndarray):
        """Dirichlet edges: ghost trace from the analytic data, same flux."""
        pb = self.pass_B
        if not len(pb.edge_index):
            return
        g = self.scn.g
        sd, det = self.geom.sqrt_detB, self.geom.detB
        c, u = state.c, state.u
        hb = self.hb_coef
        hbm = self.hb_mean
        linear_hb = self.scn.hb_mode == "linear"
        wq = self.bnd_gauss_w

        x, y = pb.gauss_xy[:, :, 0], pb.gauss_xy[:, :, 1]
        data = self.scn.exact_with_velocity(x, y, t)  # xi, U, V, u, v at (nb, Q)

        for e_t, rows in pb.groups.items():
            ec = pb.elem[rows]
            n1 = pb.n1[rows][:, None]
            n2 = pb.n2[rows][:, None]
            ln = pb.length[rows][:, None]
            lm = lam[pb.edge_index[rows]][:, None]
            trg = self.trace_at_gauss[e_t]  # (K, Q)
            proj = self.edge_proj[e_t]      # (K, K)
            scale = sd[ec][:, None]

            ghost = []
            for comp in data:
                r = (comp[rows] * wq) @ trg.T            # (nb_g, K)
                ghost.append((r @ proj.T) * scale)       # coefficients
            gxi, gU, gV, guu, guv = ghost

            inv_pair = (1.0 / det[ec])[:, None]
            inv_tri = (1.0 / (det[ec] * sd[ec]))[:, None]

            own = {j: self._pair_own(e_t, c[ec, j]) * inv_pair for j in (XI, U, V)}
            oth = {
                XI: self._pair_own(e_t, gxi) * inv_pair,
                U: self._pair_own(e_t, gU) * inv_pair,
                V: self._pair_own(e_t, gV) * inv_pair,
            }
            pr_own = [(c[ec, XI], c[ec, XI], 0.5 * g)]
            pr_oth = [(gxi, gxi, 0.5 * g)]
            if linear_hb:
                pr_own.append((c[ec, XI], hb[ec], g))
                pr_oth.append((gxi, hb[ec], g))
            TA = self._triple_own(e_t, [(c[ec, U], u[ec, 0], 1.0)] + pr_own) * inv_tri \
                + self._triple_own(e_t, [(gU, guu, 1.0)] + pr_oth) * inv_tri
            TB = (self._triple_own(e_t, [(c[ec, U], u[ec, 1], 1.0)])
                  + self._triple_own(e_t, [(gU, guv, 1.0)])) * inv_tri
            TC = (self._triple_own(e_t, [(c[ec, V], u[ec, 0], 1.0)])
                  + self._triple_own(e_t, [(gV, guu, 1.0)])) * inv_tri
            TD = self._triple_own(e_t, [(c[ec, V], u[ec, 1], 1.0)] + pr_own) * inv_tri \
                + self._triple_own(e_t, [(gV, guv, 1.0)] + pr_oth) * inv_tri
            if not linear_hb:
                hterm = g * hbm[ec][:, None] * (own[XI] + oth[XI])
                TA = TA + hterm
                TD = TD + hterm

            flux_xi = 0.5 * (n1 * (own[U] + oth[U]) + n2 * (own[V] + oth[V])) \
                + 0.5 * lm * (own[XI] - oth[XI])
            flux_U = 0.5 * (n1 * TA + n2 * TB) + 0.5 * lm * (own[U] - oth[U])
            flux_V = 0.5 * (n1 * TC + n2 * TD) + 0.5 * lm * (own[V] - oth[V])

            contrib = np.stack([flux_xi, flux_U, flux_V], axis=1) * ln[:, :, None]
            rhs[ec] -= contrib

    def edge_rhs(self, state: State, t: float,
                 lam: np.ndarray | None = None) -> np.ndarray:
        """All edge flux contributions (interior both sides plus boundary)."""
        if lam is None:
            lam = self.compute_lambda(state, t)
        rhs = np.zeros_like(state.c)
        if self.instrument_mass_flux:
            mL = np.zeros(self.n_interior)
            mR = np.zeros(self.n_interior)
            self._side_flux(self.pass_L, state, lam, rhs, mL)
            self._side_flux(self.pass_R, state, lam, rhs, mR)
            self.last_mass_flux = (mL, mR)
        else:
            self._side_flux(self.pass_L, state, lam, rhs, None)
            self._side_flux(self.pass_R, state, lam, rhs, None)
        self._boundary_flux(state, t, lam, rhs)
        return rhs

    def source_rhs(self, state: State, t: float) -> np.ndarray:
        """Friction, Coriolis, bathymetry-gradient and manufactured forcing."""
        scn = self.scn
        c = state.c
        out = np.zeros_like(c)
        out[:, U] = -scn.tau_bf * c[:, U] + scn.f_c * c[:, V]
        out[:, V] = -scn.tau_bf * c[:, V] - scn.f_c * c[:, U]
        # g xi grad(hb): the projected gradient is constant per element, so
        # the vol-triple contraction collapses onto the identity mass
        out[:, U] += scn.g * self.hb_grad[:, 0][:, None] * c[:, XI]
        out[:, V] += scn.g * self.hb_grad[:, 1][:, None] * c[:, XI]
        if scn.forcing is not None:
            x, yq = self.quad_xy[:, :, 0], self.quad_xy[:, :, 1]
            Fx, Fy = scn.forcing(x, yq, t)
            sd = self.geom.sqrt_detB[:, None]
            out[:, U] += sd * ((Fx * self.quad_w) @ self.quad_phi.T)
            out[:, V] += sd * ((Fy * self.quad_w) @ self.quad_phi.T)
        return out

    def rhs(self, state: State, t: float) -> np.ndarray:
        lam = self.compute_lambda(state, t)
        if not self._cfl_warned:
            cfl = self.scn.dt * float(lam.max()) / self.h_min
            if cfl > self.cfl_warn_threshold:
                warnings.warn(
                    f"CFL advisory: dt*lambda_max/h_min = {cfl:.2f} exceeds "
                    f"{self.cfl_warn_threshold}",
                    stacklevel=2,
                )
            self._cfl_warned = True
        total = self.element_rhs(state)
        total += self.edge_rhs(state, t, lam)
        total += self.source_rhs(state, t)
        return total

    # ------------------------------------------------------- time stepping

    def step(self, state: State) -> State:
        """One SSP Runge-Kutta step; scheme order follows the DG order."""
        dt = self.scn.dt
        t = state.t

        def stage(c_in, at):
            st = State(c_in, np.empty_like(state.u), at)
            self.solve_velocity(st)
            return self.rhs(st, at)

        c0 = state.c
        if self.k == 0:
            c_new = c0 + dt * stage(c0, t)
        elif self.k == 1:
            c1 = c0 + dt * stage(c0, t)
            c_new = 0.5 * c0 + 0.5 * (c1 + dt * stage(c1, t + dt))
        else:
            c1 = c0 + dt * stage(c0, t)
            c2 = 0.75 * c0 + 0.25 * (c1 + dt * stage(c1, t + dt))
            c_new = c0 / 3.0 + 2.0 / 3.0 * (c2 + dt * stage(c2, t + 0.5 * dt))

        new = State(c=c_new, u=np.empty_like(state.u), t=t + dt)
        self.solve_velocity(new)
        if not np.isfinite(new.c).all():
            raise FloatingPointError(f"non-finite state after step to t = {new.t}")
        return new

    def run(self, state: State | None = None,
            t_end: float | None = None) -> State:
        if state is None:
            state = self.project_initial()
        t_end = self.scn.t_end if t_end is None else t_end
        n_steps = int(round((t_end - state.t) / self.scn.dt))
        for _ in range(n_steps):
            state = self.step(state)
        return state
