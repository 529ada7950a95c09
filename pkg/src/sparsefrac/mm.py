"""Outer majorize-minimize loop with ε-continuation and backtracking on L.

Each outer step freezes ε_k, linearizes f at u_k (with a proximal term
L_k/2 ‖u - u_k‖²) and replaces the concave ψ_ε by its tangent at w_k², then
solves the resulting convex constrained subproblem.  L_k is the smallest
value in {L b^l} for which

    f(u_{k+1}) ≤ f(u_k) + f'(u_k)(u_{k+1} - u_k) + L_k ‖u_{k+1} - u_k‖²_U.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .problem import IterateState, ProblemSpec, f_grad, f_value, phi_eps, u_norm2, w_norm2
from .smoothing import SmoothingParams, lumped_weight_diag, psi_prime
from .subqp import (InnerReport, NewtonConfig, StationarityReport, SubproblemError, solve_subproblem,
                    stationarity_residual)

REPORT_SCHEMA = "sparsefrac-solve-report v1"


class OuterLoopError(RuntimeError):
    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


@dataclass(frozen=True)
class MmConfig:
    L: float = 1.0
    b: float = 2.0
    eps0: float = 1e-1
    eps_decay: float = 0.8
    eps_min: float = 1e-6
    tol: float = 1e-8  # on ‖u_{k+1}-u_k‖_U + ‖w_{k+1}-w_k‖_W
    max_outer: int = 500
    max_l: int = 60
    support_tol: float = 1e-8  # relative to max |u_d|
    newton: NewtonConfig = field(default_factory=NewtonConfig)

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be positive")
        if not self.b > 1:
            raise ValueError("b must exceed 1")
        if not 0 < self.eps_decay < 1:
            raise ValueError("eps_decay must lie in (0, 1)")
        if not self.eps0 > self.eps_min > 0:
            raise ValueError("need eps0 > eps_min > 0")
        if self.max_outer < 1 or self.max_l < 0:
            raise ValueError("max_outer must be >= 1 and max_l >= 0")

    def eps(self, k: int) -> float:
        return max(self.eps0 * self.eps_decay ** k, self.eps_min)


@dataclass
class IterationRecord:
    k: int
    eps: float
    L: float
    trials: int
    phi_eps: float  # Φ_{ε_k}(u_k, w_k)
    phi0: float  # Φ_0(u_k, w_k)
    du: float  # ‖u_{k+1} - u_k‖_U
    dw: float  # ‖w_{k+1} - w_k‖_W
    descent_slack: float  # Φ_{ε_k}(k) - [Φ_{ε_{k+1}}(k+1) + α/2 du² + β/2 dw² + γ∫ψ'Δw²]
    inner_iterations: int
    inner_fallbacks: int
    inner_residual: float


@dataclass
class SolveReport:
    records: list = field(default_factory=list)
    converged: bool = False
    stationarity: StationarityReport | None = None
    support_spacetime: float = float("nan")
    support_spatial: float = float("nan")
    final_phi0: float = float("nan")
    final_phi_eps: float = float("nan")
    final_eps: float = float("nan")
    message: str = ""
    history: list = field(default_factory=list)  # iterates (u_k, w_k) if requested

    COLUMNS = ("k", "eps", "L", "trials", "phi_eps", "phi0", "du", "dw", "descent_slack",
               "inner_iterations", "inner_fallbacks", "inner_residual")

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(f"# {REPORT_SCHEMA}\n")
        out.write(",".join(self.COLUMNS) + "\n")
        for r in self.records:
            out.write(",".join(repr(getattr(r, c)) for c in self.COLUMNS) + "\n")
        return out.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @staticmethod
    def read_csv(path) -> list:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != f"# {REPORT_SCHEMA}":
            raise ValueError(f"{path}: not a {REPORT_SCHEMA} file")
        cols = lines[1].split(",")
        rows = []
        for ln in lines[2:]:
            vals = ln.split(",")
            rows.append({c: (int(v) if c in ("k", "trials", "inner_iterations", "inner_fallbacks") else float(v))
                         for c, v in zip(cols, vals)})
        return rows


def descent_condition(spec: ProblemSpec, u_k, u_next, L_k: float) -> bool:
    """f(u_next) ≤ f(u_k) + f'(u_k)(u_next - u_k) + L_k ‖u_next - u_k‖²_U.

    f is the quadratic tracking term, so the left side minus the linearization
    is exactly a/2 ‖δ‖²_U with δ = u_next - u_k.  Evaluating that remainder
    directly avoids cancelling two nearly equal objective values, which
    otherwise decides the test by rounding once δ is tiny.
    """
    delta = np.asarray(u_next, dtype=float) - np.asarray(u_k, dtype=float)
    d2 = float(spec.mU @ (delta * delta))
    return 0.5 * spec.a * d2 <= L_k * d2


def find_Lk(spec: ProblemSpec, eps_k: float, state_k: IterateState, config: MmConfig):
    """Smallest L b^l whose subproblem solution passes the descent test.

    Returns (L_k, state, inner_report, trials).
    """
    start = state_k
    total = InnerReport()
    for l in range(config.max_l + 1):
        L_k = config.L * config.b ** l
        state, rep = solve_subproblem(spec, eps_k, state_k, L_k, config.newton, start=start)
        total.iterations += rep.iterations
        total.fallbacks += rep.fallbacks
        total.residual = rep.residual
        if descent_condition(spec, state_k.u, state.u, L_k):
            return L_k, state, total, l + 1
        start = state
    raise OuterLoopError(f"no L_k up to L*b^{config.max_l} satisfies the descent condition; "
                         "the gradient of f is probably inconsistent")


def support_fraction(u, mesh, grid, tol: float = 1e-8, relative: bool = True, method: str = "cell",
                     scale: float | None = None):
    """Vanishing fractions of a space-time P1 function.

    Returns (spacetime, spatial): the measure of {(t,x): u = 0} / (T |Ω|) and
    of {x: u(·,x) = 0} / |Ω|.  With ``method="cell"`` a space-time cell
    (time interval × spatial cell) counts as vanishing when |u| ≤ thr at all
    of its vertices, so isolated zero nodes (e.g. at t = 0) have measure
    zero.  ``method="nodal"`` weights each node with its lumped mass instead.
    ``thr = tol * scale`` when ``relative``, with ``scale = max|u|`` unless
    given (thr = tol if the scale is 0).  Pass a problem-level scale such as
    max|u_d| when u may have collapsed to round-off everywhere; relative to
    its own maximum such a u would count as nowhere vanishing.
    """
    N, M = mesh.n_vertices, grid.M
    U = np.abs(np.asarray(u, dtype=float).reshape(M, N))
    if scale is None:
        scale = U.max()
    thr = tol * scale if (relative and scale > 0) else tol
    small = U <= thr
    vol = mesh.cell_measures()
    omega = vol.sum()
    if method == "cell":
        cell_small = small[:, mesh.cells].all(axis=2)  # (M, n_cells)
        st_small = cell_small[:-1] & cell_small[1:]  # (M-1, n_cells)
        spacetime = float((st_small * vol[None, :]).sum() * grid.dt / (grid.T * omega))
        spatial = float(vol[cell_small.all(axis=0)].sum() / omega)
    elif method == "nodal":
        from .fracnorm import lumped_mass, lumped_time_weights
        mx = lumped_mass(mesh)
        tw = lumped_time_weights(grid)
        spacetime = float((small * np.outer(tw, mx)).sum() / (grid.T * omega))
        spatial = float(mx[small.all(axis=0)].sum() / omega)
    else:
        raise ValueError(f"unknown method {method!r}")
    return spacetime, spatial


def descent_terms(spec: ProblemSpec, eps_k: float, eps_next: float, prev: IterateState, new: IterateState):
    """Slack of the monotonicity inequality for one accepted outer step."""
    du = new.u - prev.u
    dw = new.w - prev.w
    lhs = phi_eps(spec, eps_next, new.u, new.w)
    lhs += 0.5 * spec.alpha * u_norm2(spec, du) + 0.5 * spec.beta * w_norm2(spec, dw)
    if spec.gamma:
        D = lumped_weight_diag(SmoothingParams(spec.p, eps_k), prev.w, spec.mx)
        lhs += spec.gamma * float(D @ (dw * dw))
    return phi_eps(spec, eps_k, prev.u, prev.w) - lhs


def mm_solve(spec: ProblemSpec, config: MmConfig | None = None, init: IterateState | None = None,
             keep_history: bool = False, callback=None):
    """Run the majorize-minimize iteration; returns (state, SolveReport).

    Stops when ‖Δu‖_U + ‖Δw‖_W ≤ tol with ε_k at its floor, or after
    max_outer steps (``report.converged`` is then False).
    """
    config = config or MmConfig()
    state = init.copy() if init is not None else IterateState.zeros(spec.N, spec.M)
    report = SolveReport()
    if keep_history:
        report.history.append((state.u.copy(), state.w.copy()))
    for k in range(config.max_outer):
        eps_k = config.eps(k)
        eps_next = config.eps(k + 1)
        try:
            L_k, new, inner, trials = find_Lk(spec, eps_k, state, config)
        except (SubproblemError, OuterLoopError) as exc:
            report.message = f"outer step {k}: {exc}"
            raise OuterLoopError(report.message, state, report) from exc
        # λ_k = 2 ψ'_{ε_k}(w_k²) w_{k+1}, the multiplier of the L^p term
        if spec.gamma:
            new.lam = 2 * psi_prime(SmoothingParams(spec.p, eps_k), state.w ** 2) * new.w
        else:
            new.lam = np.zeros(spec.N)
        du = np.sqrt(max(u_norm2(spec, new.u - state.u), 0.0))
        dw = np.sqrt(max(w_norm2(spec, new.w - state.w), 0.0))
        rec = IterationRecord(
            k=k, eps=eps_k, L=L_k, trials=trials,
            phi_eps=phi_eps(spec, eps_k, state.u, state.w), phi0=phi_eps(spec, 0.0, state.u, state.w),
            du=float(du), dw=float(dw), descent_slack=descent_terms(spec, eps_k, eps_next, state, new),
            inner_iterations=inner.iterations, inner_fallbacks=inner.fallbacks, inner_residual=inner.residual)
        report.records.append(rec)
        state = new
        if keep_history:
            report.history.append((state.u.copy(), state.w.copy()))
        if callback is not None:
            callback(k, state, rec)
        if du + dw <= config.tol and eps_k <= config.eps_min:
            report.converged = True
            break
    report.final_eps = config.eps(len(report.records) - 1)
    report.final_phi0 = phi_eps(spec, 0.0, state.u, state.w)
    report.final_phi_eps = phi_eps(spec, report.final_eps, state.u, state.w)
    report.stationarity = stationarity_residual(spec, state)
    report.support_spacetime, report.support_spatial = support_fraction(
        state.u, spec.mesh, spec.grid, config.support_tol, scale=float(np.abs(spec.u_d).max()))
    if not report.converged:
        report.message = f"no convergence within {config.max_outer} outer iterations"
    return state, report
