"""Physical scenarios: constants, bathymetry, analytic solutions, forcing.

Analytic fields are written as sympy expressions in (x, y, t). The momentum
forcing that makes a chosen analytic solution an exact solution of the
continuous system is derived symbolically (method of manufactured
solutions) and lambdified to vectorized numpy callables. The mass equation
carries no source, so admissible manufactured solutions must satisfy
d(xi)/dt + dU/dx + dV/dy = 0; this is checked at construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import sympy as sp

__all__ = [
    "Scenario",
    "perturbed_square_scenario",
    "ring_scenario",
    "lake_at_rest_scenario",
    "custom_scenario",
    "RunConfig",
    "load_config",
]

X, Y, T = sp.symbols("x y t", real=True)


@dataclass
class Scenario:
    """Run physics: constants, bathymetry, analytic fields, forcing."""

    name: str
    g: float = 9.81
    f_c: float = 0.0
    tau_bf: float = 0.0
    dt: float = 0.5
    t_end: float = 1500.0
    h_min: float = 1e-3
    hb_mode: str = "linear"  # 'linear' or 'const' flux-side bathymetry
    dirichlet_markers: frozenset = frozenset({1})
    hb: Callable = None                 # (x, y) -> depth
    exact: Callable | None = None       # (x, y, t) -> (xi, U, V)
    forcing: Callable | None = None     # (x, y, t) -> (Fx, Fy)

    def exact_with_velocity(self, x, y, t):
        """Analytic (xi, U, V, u, v); u = U/H with H = hb + xi."""
        xi, U, V = self.exact(x, y, t)
        H = self.hb(x, y) + xi
        return xi, U, V, U / H, V / H


def _lambdify(args, exprs):
    fns = [sp.lambdify(args, e, modules="numpy") for e in exprs]

    def call(*vals):
        shape = np.broadcast(*[np.asarray(v) for v in vals]).shape
        return tuple(np.broadcast_to(np.asarray(f(*vals), dtype=float), shape)
                     for f in fns)

    return call


def _manufacture(xi_e, U_e, V_e, hb_e, g, tau_bf, f_c):
    """Momentum forcing making (xi, U, V) solve the system exactly."""
    H = hb_e + xi_e
    mass_residual = sp.simplify(sp.diff(xi_e, T) + sp.diff(U_e, X) + sp.diff(V_e, Y))
    if mass_residual != 0:
        raise ValueError(
            "analytic fields violate the sourceless mass equation: "
            f"residual {mass_residual}"
        )
    Fx = (
        sp.diff(U_e, T)
        + sp.diff(U_e**2 / H, X)
        + sp.diff(U_e * V_e / H, Y)
        + tau_bf * U_e
        - f_c * V_e
        + g * H * sp.diff(xi_e, X)
    )
    Fy = (
        sp.diff(V_e, T)
        + sp.diff(U_e * V_e / H, X)
        + sp.diff(V_e**2 / H, Y)
        + tau_bf * V_e
        + f_c * U_e
        + g * H * sp.diff(xi_e, Y)
    )
    return Fx, Fy


def _build(name, xi_e, U_e, V_e, hb_e, *, g=9.81, f_c=0.0, tau_bf=0.0,
           manufacture=True, **kw) -> Scenario:
    scn = Scenario(name=name, g=g, f_c=f_c, tau_bf=tau_bf, **kw)
    scn.hb = _single(_lambdify((X, Y), [hb_e]))
    scn.exact = _lambdify((X, Y, T), [xi_e, U_e, V_e])
    if manufacture:
        Fx, Fy = _manufacture(xi_e, U_e, V_e, hb_e, sp.Float(g), tau_bf, f_c)
        if Fx == 0 and Fy == 0:
            scn.forcing = None
        else:
            scn.forcing = _lambdify((X, Y, T), [Fx, Fy])
    return scn


def _single(fn):
    def call(x, y):
        return fn(x, y)[0]

    return call


# the traveling-wave benchmark fields: amplitude C_a, speed factor C_t,
# offset y_a, over linearly sloping bathymetry
BENCH_CA = 0.2
BENCH_CT = 0.2
BENCH_YA = 0.3


def _bench_fields():
    phase = sp.pi * (X + Y + BENCH_CT * T) / 600
    xi_e = 2 + BENCH_YA - 2 * BENCH_CA * sp.sin(phase)
    U_e = 2 * BENCH_YA + BENCH_CA * BENCH_CT * sp.sin(phase)
    V_e = BENCH_YA + BENCH_CA * BENCH_CT * sp.sin(phase)
    hb_e = 1 + X / 1000 + 2 * Y / 1000
    return xi_e, U_e, V_e, hb_e


def perturbed_square_scenario(**kw) -> Scenario:
    xi_e, U_e, V_e, hb_e = _bench_fields()
    return _build("perturbed-square", xi_e, U_e, V_e, hb_e, **kw)


def ring_scenario(**kw) -> Scenario:
    xi_e, U_e, V_e, hb_e = _bench_fields()
    return _build("ring", xi_e, U_e, V_e, hb_e, **kw)


def lake_at_rest_scenario(xi0: float = 0.5, slope=(0.001, 0.002),
                          depth: float = 2.0, **kw) -> Scenario:
    """Still water over linearly sloping bathymetry; exact steady state."""
    xi_e = sp.Float(xi0)
    hb_e = depth + slope[0] * X + slope[1] * Y
    return _build("lake-at-rest", xi_e, sp.Integer(0), sp.Integer(0), hb_e,
                  manufacture=False, **kw)


def custom_scenario(xi: str, U: str, V: str, hb: str, **kw) -> Scenario:
    """Scenario from sympy-parseable expression strings in x, y, t."""
    local = {"x": X, "y": Y, "t": T}
    exprs = [sp.sympify(s, locals=local) for s in (xi, U, V, hb)]
    return _build("custom", *exprs, **kw)


_SCENARIOS = {
    "perturbed-square": perturbed_square_scenario,
    "ring": ring_scenario,
    "lake-at-rest": lake_at_rest_scenario,
}


@dataclass
class RunConfig:
    """Parsed run configuration (JSON schema documented in the README)."""

    scenario: Scenario
    order: int
    mesh_spec: dict
    output: dict = field(default_factory=dict)

    def build_mesh(self):
        from .mesh import build_ring_mesh, build_square_mesh, load_mesh

        ms = self.mesh_spec
        if "path" in ms:
            return load_mesh(ms["path"])
        gen = ms.get("generator", "square")
        if gen == "square":
            return build_square_mesh(
                level=int(ms.get("level", 2)),
                perturb=float(ms.get("perturb", 0.0)),
                seed=int(ms.get("seed", 0)),
            )
        if gen == "ring":
            return build_ring_mesh(level=int(ms.get("level", 2)))
        raise ValueError(f"unknown mesh generator {gen!r}")


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        cfg = json.load(fh)
    name = cfg.get("scenario", "perturbed-square")
    physics = cfg.get("physics", {})
    kw = dict(
        g=float(physics.get("g", 9.81)),
        f_c=float(physics.get("f_c", 0.0)),
        tau_bf=float(physics.get("tau_bf", 0.0)),
        h_min=float(physics.get("h_min", 1e-3)),
        dt=float(cfg.get("dt", 0.5)),
        t_end=float(cfg.get("t_end", 1500.0)),
        hb_mode=cfg.get("hb_mode", "linear"),
    )
    if name == "custom":
        fields = cfg["fields"]
        scn = custom_scenario(fields["xi"], fields["U"], fields["V"],
                              fields["hb"], **kw)
    elif name in _SCENARIOS:
        scn = _SCENARIOS[name](**kw)
    else:
        raise ValueError(f"unknown scenario {name!r}")
    return RunConfig(
        scenario=scn,
        order=int(cfg.get("order", 1)),
        mesh_spec=cfg.get("mesh", {"generator": "square", "level": 2}),
        output=cfg.get("output", {}),
    )
