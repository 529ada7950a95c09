"""Experiment presets and the table/field generators built on ``mm_solve``.

Two presets are provided:

* ``example_1d``: Ω = (-1, 1), I = (0, 1/2), u_d = t sin(1.5 (x - 1)),
  a = 25, α = 2, β = 0.2, γ = 1, p = 0.01, s = 0.1, N = M = 129.
* ``example_2d``: Ω = (-1, 1)², I = (0, 0.3), u_d = 5 t max(x², y²),
  a = 50, α = 2, β = 0.2, γ = 1, p = 0.3, s = 0.1, 34 x 34 vertices, M = 25.

Both use the schedule ε_k = max(0.1 * 0.02^k, 1e-100).  With a slower decay the
iterates stay at nonzero ψ-smoothing for many more steps; the fast decay reaches
the floor after about 60 steps, which is also where the error columns of the
convergence table flatten out.

Tables are lists of small dataclass rows; ``write_table`` turns any of them
into comma-separated text with a header.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .fracnorm import QuadConfig, assemble_mass
from .mesh import Mesh, TimeGrid, build_interval_mesh, build_square_mesh, build_time_grid
from .mm import MmConfig, OuterLoopError, mm_solve, support_fraction
from .problem import IterateState, ProblemSpec, make_problem, phi_eps, sample_target, u_norm2, w_norm2

PRESET_SCHEDULE = dict(eps0=1e-1, eps_decay=0.02, eps_min=1e-100, tol=1e-8, max_outer=400)


def target_1d(t, X):
    return t * np.sin(1.5 * (X[:, 0] - 1.0))


def target_2d(t, X):
    return 5.0 * t * np.maximum(X[:, 0] ** 2, X[:, 1] ** 2)


PRESETS = {
    "example_1d": dict(dim=1, lo=-1.0, hi=1.0, N=129, M=None, T=0.5, target=target_1d,
                       alpha=2.0, beta=0.2, gamma=1.0, p=0.01, s=0.1, a=25.0),
    "example_2d": dict(dim=2, lo=-1.0, hi=1.0, N=34, M=25, T=0.3, target=target_2d,
                       alpha=2.0, beta=0.2, gamma=1.0, p=0.3, s=0.1, a=50.0),
}
PROBLEM_KEYS = ("alpha", "beta", "gamma", "p", "s", "a")
GEOMETRY_KEYS = ("dim", "lo", "hi", "N", "M", "T", "target", "pattern")


@dataclass
class ExperimentSpec:
    """A preset plus overrides and the sweep lists for the table generators.

    For 1D presets N is the number of vertices; for 2D presets it is the
    number of vertices per side.  M = None means M = N.
    """
    preset: str = "example_1d"
    overrides: dict = field(default_factory=dict)
    gamma_list: list = field(default_factory=lambda: [0.0, 1.0, 5.0, 10.0])
    p_list: list = field(default_factory=lambda: [1.0, 0.9, 0.7, 0.3, 0.1, 0.05])
    N_list: list = field(default_factory=lambda: [33, 65, 125])
    N_ref: int = 257
    checkpoints: list = field(default_factory=lambda: [10, 20, 30, 40, 50, 55])
    support_tol: float = 1e-8

    def __post_init__(self):
        if self.preset not in PRESETS and self.preset != "custom":
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)} or 'custom'")
        for name in ("gamma_list", "p_list", "N_list", "checkpoints"):
            if not len(getattr(self, name)):
                raise ValueError(f"{name} must not be empty")
        if list(self.checkpoints) != sorted(set(self.checkpoints)):
            raise ValueError("checkpoints must be strictly increasing")
        unknown = set(self.overrides) - set(PROBLEM_KEYS) - set(GEOMETRY_KEYS)
        if unknown:
            raise ValueError(f"unknown override(s): {sorted(unknown)}")

    def parameters(self) -> dict:
        base = dict(PRESETS["example_1d" if self.preset == "custom" else self.preset])
        base.update(self.overrides)
        return base


def build_geometry(params: dict):
    if params["dim"] == 1:
        mesh = build_interval_mesh(params["lo"], params["hi"], int(params["N"]))
    elif params["dim"] == 2:
        mesh = build_square_mesh((params["lo"], params["hi"]), int(params["N"]),
                                 params.get("pattern") or "unionjack")
    else:
        raise ValueError(f"dim must be 1 or 2, got {params['dim']}")
    M = params["M"] if params["M"] is not None else params["N"]
    return mesh, build_time_grid(params["T"], int(M))


def build_problem(exp: ExperimentSpec, quad: QuadConfig | None = None, **changes) -> ProblemSpec:
    """Assemble the problem of ``exp`` with ``changes`` applied on top of the overrides."""
    params = exp.parameters()
    params.update(changes)
    mesh, grid = build_geometry(params)
    return make_problem(mesh, grid, u_d=params["target"], quad=quad, **{k: params[k] for k in PROBLEM_KEYS})


def preset_config(**changes) -> MmConfig:
    return MmConfig(**{**PRESET_SCHEDULE, **changes})


def write_table(rows, path, footer: str | None = None) -> None:
    """Comma-separated text with a header line taken from the row dataclass."""
    if not rows:
        raise ValueError("empty table")
    names = [f.name for f in fields(rows[0])]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for r in rows:
            fh.write(",".join("" if getattr(r, n) is None else repr(getattr(r, n)) for n in names) + "\n")
        if footer:
            for line in footer.splitlines():
                fh.write(f"# {line}\n")


def read_table(path) -> list:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    names = lines[0].split(",")
    out = []
    for ln in lines[1:]:
        row = {}
        for n, v in zip(names, ln.split(",")):
            try:
                row[n] = float(v) if v else None
            except ValueError:
                row[n] = v.strip("'\"")
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# support sweeps


@dataclass
class SupportRow:
    parameter: str
    value: float
    vanish_spacetime: float  # cell convention, fraction in [0, 1]
    vanish_spatial: float
    vanish_spacetime_nodal: float
    vanish_spatial_nodal: float
    phi0: float
    iterations: int
    converged: bool
    error: str | None = None


def run_support_sweep(exp: ExperimentSpec, which: str = "gamma", config: MmConfig | None = None,
                      quad: QuadConfig | None = None, progress=None) -> list:
    """One solve per entry of ``exp.gamma_list`` (``which="gamma"``) or ``exp.p_list``.

    The W inner product depends only on s and the mesh, so it is assembled
    once and shared by all rows.  A failed solve gives a row with NaN
    fractions and the error message.
    """
    if which not in ("gamma", "p"):
        raise ValueError("which must be 'gamma' or 'p'")
    values = exp.gamma_list if which == "gamma" else exp.p_list
    config = config or preset_config(support_tol=exp.support_tol)
    base = build_problem(exp, quad)
    scale = float(np.abs(base.u_d).max())
    rows = []
    for v in values:
        spec = base.with_params(**{which: float(v)})
        try:
            state, rep = mm_solve(spec, config)
        except OuterLoopError as exc:
            nan = float("nan")
            rows.append(SupportRow(which, float(v), nan, nan, nan, nan, nan,
                                   len(exc.report.records) if exc.report else 0, False, str(exc)))
            continue
        st, sx = support_fraction(state.u, spec.mesh, spec.grid, exp.support_tol, scale=scale)
        stn, sxn = support_fraction(state.u, spec.mesh, spec.grid, exp.support_tol, scale=scale, method="nodal")
        rows.append(SupportRow(which, float(v), st, sx, stn, sxn, rep.final_phi0, len(rep.records), rep.converged))
        if progress:
            progress(rows[-1])
    return rows


# ---------------------------------------------------------------------------
# convergence in k


@dataclass
class ConvergenceRow:
    k: int
    err_u: float  # ‖u_k - u_ref‖_U
    err_w: float  # ‖w_k - w_ref‖_W
    err_phi0: float  # |Φ₀(u_k,w_k) - Φ₀(u_ref,w_ref)|
    phi_eps: float  # Φ_{ε_k}(u_k, w_k)
    phi0: float
    truncated: bool = False


def convergence_rows(spec: ProblemSpec, config: MmConfig, report, checkpoints) -> list:
    """Checkpoint rows from a report run with ``keep_history=True``.

    The reference is the final iterate.  Checkpoints past the last iterate
    are reported against the final iterate and flagged ``truncated``.
    """
    if not report.history:
        raise ValueError("report has no iterate history; run mm_solve with keep_history=True")
    u_ref, w_ref = report.history[-1]
    phi_ref = phi_eps(spec, 0.0, u_ref, w_ref)
    last = len(report.history) - 1
    rows = []
    for k in checkpoints:
        kk = min(int(k), last)
        u, w = report.history[kk]
        phi0 = phi_eps(spec, 0.0, u, w)
        rows.append(ConvergenceRow(
            int(k), math.sqrt(max(u_norm2(spec, u - u_ref), 0.0)), math.sqrt(max(w_norm2(spec, w - w_ref), 0.0)),
            abs(phi0 - phi_ref), phi_eps(spec, config.eps(kk), u, w), phi0, kk < int(k)))
    rows.append(ConvergenceRow(last, 0.0, 0.0, 0.0, phi_eps(spec, config.eps(last), u_ref, w_ref), phi_ref))
    return rows


def run_convergence_table(exp: ExperimentSpec, config: MmConfig | None = None, quad: QuadConfig | None = None):
    """Returns (rows, report); the last row is the reference iterate itself."""
    config = config or preset_config(support_tol=exp.support_tol)
    spec = build_problem(exp, quad)
    _, rep = mm_solve(spec, config, keep_history=True)
    return convergence_rows(spec, config, rep, exp.checkpoints), rep


# ---------------------------------------------------------------------------
# mesh study


def interpolate_p1(mesh: Mesh, values, points) -> np.ndarray:
    """Evaluate the P1 function with nodal ``values`` at ``points`` (n, dim)."""
    values = np.asarray(values, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo, hi = mesh.bounding_box()
    slack = 1e-12 * max(1.0, float(np.max(np.abs(hi - lo))))
    if mesh.dim == 1:
        x = points[:, 0]
        order = np.argsort(mesh.vertices[:, 0])
        xs = mesh.vertices[order, 0]
        if np.any(x < xs[0] - slack) or np.any(x > xs[-1] + slack):
            raise ValueError("interpolation point outside the mesh")
        return np.interp(x, xs, values[order])
    V, C = mesh.vertices, mesh.cells
    P0 = V[C[:, 0]]
    E1, E2 = V[C[:, 1]] - P0, V[C[:, 2]] - P0
    det = E1[:, 0] * E2[:, 1] - E1[:, 1] * E2[:, 0]
    tree = cKDTree(P0 + (E1 + E2) / 3)
    out = np.full(len(points), np.nan)
    todo = np.arange(len(points))
    for k in (8, 32, mesh.n_cells):
        if not todo.size:
            break
        k = min(k, mesh.n_cells)
        _, cand = tree.query(points[todo], k=k)
        cand = cand.reshape(len(todo), k)
        d = points[todo, None, :] - P0[cand]
        l1 = (d[..., 0] * E2[cand, 1] - d[..., 1] * E2[cand, 0]) / det[cand]
        l2 = (E1[cand, 0] * d[..., 1] - E1[cand, 1] * d[..., 0]) / det[cand]
        inside = (l1 >= -1e-12) & (l2 >= -1e-12) & (l1 + l2 <= 1 + 1e-12)
        hit = inside.any(axis=1)
        j = inside.argmax(axis=1)
        rows = np.nonzero(hit)[0]
        c = cand[rows, j[rows]]
        a1, a2 = l1[rows, j[rows]], l2[rows, j[rows]]
        out[todo[rows]] = (1 - a1 - a2) * values[C[c, 0]] + a1 * values[C[c, 1]] + a2 * values[C[c, 2]]
        todo = todo[~hit]
    if todo.size:
        raise ValueError(f"{todo.size} interpolation point(s) outside the mesh")
    return out


def interpolate_spacetime(mesh: Mesh, grid: TimeGrid, u, mesh_ref: Mesh, grid_ref: TimeGrid) -> np.ndarray:
    """Tensor-product P1 interpolation of a space-time vector onto a finer grid."""
    U = np.asarray(u, dtype=float).reshape(grid.M, mesh.n_vertices)
    if grid_ref.nodes[0] < grid.nodes[0] - 1e-14 or grid_ref.nodes[-1] > grid.nodes[-1] + 1e-12:
        raise ValueError("reference time grid extends beyond the coarse one")
    Ux = np.stack([interpolate_p1(mesh, row, mesh_ref.vertices) for row in U])  # (M, N_ref)
    Ut = np.stack([np.interp(grid_ref.nodes, grid.nodes, Ux[:, i]) for i in range(mesh_ref.n_vertices)], axis=1)
    return Ut.ravel()


@dataclass
class MeshRow:
    N: int
    err_u: float  # ‖u_N - u_ref‖_U on the reference grid
    err_w: float  # ‖w_N - w_ref‖_{L²(Ω)} on the reference mesh
    iterations: int
    converged: bool


MESH_FOOTER = ("coarse solutions are interpolated nodally onto the reference grid; "
               "U-norm with the reference lumped space-time mass, L2 norm with the reference consistent mass")


def run_mesh_study(exp: ExperimentSpec, config: MmConfig | None = None, quad: QuadConfig | None = None,
                   progress=None, collect: list | None = None) -> list:
    """Final iterates for each N in ``exp.N_list`` against the one for ``exp.N_ref`` (M = N in 1D).

    If ``collect`` is a list, (N, SolveReport) of every solve, the reference
    included, is appended to it.
    """
    if any(n > exp.N_ref for n in exp.N_list):
        raise ValueError("every N in N_list must not exceed N_ref")
    config = config or preset_config(support_tol=exp.support_tol)

    def solve(n):
        spec = build_problem(exp, quad, N=n, M=n if exp.parameters()["dim"] == 1 else exp.parameters()["M"])
        state, rep = mm_solve(spec, config)
        if collect is not None:
            collect.append((n, rep))
        return spec, state, rep

    ref_spec, ref_state, _ = solve(exp.N_ref)
    Mref = assemble_mass(ref_spec.mesh)
    rows = []
    for n in exp.N_list:
        spec, state, rep = solve(n)
        u = interpolate_spacetime(spec.mesh, spec.grid, state.u, ref_spec.mesh, ref_spec.grid)
        w = interpolate_p1(spec.mesh, state.w, ref_spec.mesh.vertices)
        du, dw = u - ref_state.u, w - ref_state.w
        rows.append(MeshRow(int(n), math.sqrt(max(u_norm2(ref_spec, du), 0.0)),
                            math.sqrt(max(float(dw @ (Mref @ dw)), 0.0)), len(rep.records), rep.converged))
        if progress:
            progress(rows[-1])
    return rows


# ---------------------------------------------------------------------------
# field dumps


def dump_fields(state: IterateState, mesh: Mesh, grid: TimeGrid, path, u_d=None) -> None:
    """Write ``w.txt`` (x.., w), ``u.txt`` (t, x.., u) and, if given, ``u_d.txt`` into directory ``path``.

    ``u_d`` may be a nodal space-time vector or a callable u_d(t, X).
    """
    os.makedirs(path, exist_ok=True)
    X = mesh.vertices
    xcols = " ".join("xyz"[i] for i in range(mesh.dim))
    np.savetxt(os.path.join(path, "w.txt"), np.column_stack([X, state.w]), fmt="%.17g", header=f"{xcols} w")
    T = np.repeat(grid.nodes, mesh.n_vertices)
    XX = np.tile(X, (grid.M, 1))

    def st(name, vals):
        np.savetxt(os.path.join(path, f"{name}.txt"), np.column_stack([T, XX, vals]), fmt="%.17g",
                   header=f"t {xcols} {name}")

    st("u", state.u)
    if u_d is not None:
        st("u_d", sample_target(u_d, mesh, grid) if callable(u_d) else np.asarray(u_d, dtype=float))


def read_fields(path) -> dict:
    """Inverse of ``dump_fields``: dict with 'w', 'u' and optionally 'u_d' (values only) plus 'x', 't'."""
    W = np.loadtxt(os.path.join(path, "w.txt"), ndmin=2)
    U = np.loadtxt(os.path.join(path, "u.txt"), ndmin=2)
    out = {"x": W[:, :-1], "w": W[:, -1], "t": np.unique(U[:, 0]), "u": U[:, -1]}
    fd = os.path.join(path, "u_d.txt")
    if os.path.exists(fd):
        out["u_d"] = np.loadtxt(fd, ndmin=2)[:, -1]
    return out
