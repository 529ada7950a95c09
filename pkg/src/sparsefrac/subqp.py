"""Convex subproblem of the majorize-minimize scheme.

For fixed (u_k, w_k, ε_k, L_k) minimize φ_k(u, w) subject to |u_ij| ≤ w_i.
With c = α + L_k and g = L_k u_k - f'(u_k) the optimality system in nodal
form reads (λ_ij = lumped space-time weights, m_i = lumped spatial weights)

    Ru = c u - g - μ¹ + μ²                         = 0   (per node ij)
    Rw = S w + Σ_j λ_ij (μ¹_ij + μ²_ij)            = 0   (per vertex i)
    F1 = fb(w_i - u_ij, -μ¹_ij), F2 = fb(w_i + u_ij, -μ²_ij) = 0

with S = β A_s + 2γ diag(m ψ'_ε(w_k²)) and fb the Fischer-Burmeister
function, so μ¹, μ² ≤ 0 at a solution.  Newton steps eliminate (u, μ¹, μ²)
node by node (3×3 systems) and solve one dense N×N Schur system for w.
The merit function is ½‖F‖² in the norm

    ‖F‖² = Σ λ (Ru² + F1² + F2²) + Σ Rw² / m,

which makes it a discrete L² norm independent of the mesh scaling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .problem import IterateState, ProblemSpec, f_grad, subproblem_objective
from .smoothing import SmoothingParams, lumped_weight_diag

FB_KINK = np.sqrt(2.0) / 2 - 1.0  # generalized Jacobian entries used at a = b = 0


class SubproblemError(RuntimeError):
    """Inner solver failed; ``state`` holds the best iterate, ``report`` the history."""

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


@dataclass(frozen=True)
class NewtonConfig:
    max_iter: int = 100
    tol_F: float = 1e-9
    sigma: float = 1e-4  # Armijo slope
    backtrack: float = 0.5
    max_backtrack: int = 50
    descent_rho: float = 1e-12  # Newton direction rejected unless θ'·d ≤ -rho ‖d‖²
    kappa: float = 1e-12  # keeps the node-local 3×3 systems invertible at doubly active nodes
    feas_tol: float = 1e-9

    def __post_init__(self):
        if not (self.tol_F > 0 and self.feas_tol > 0 and self.max_iter > 0):
            raise ValueError("tolerances and max_iter must be positive")
        if not 0 < self.sigma <= 0.5:
            raise ValueError("sigma must lie in (0, 1/2]")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class InnerReport:
    iterations: int = 0
    newton_steps: int = 0
    fallbacks: int = 0
    merit: float = np.inf
    residual: float = np.inf
    converged: bool = False
    merits: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Fischer-Burmeister


def fb(a, b):
    """√(a²+b²) - a - b, evaluated without cancellation for every sign pattern.

    Both positive: -2ab / (r + a + b).  Mixed signs: lo² / (r + hi) - lo, a sum
    of two nonnegative terms, so tiny |lo| is not lost against hi.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = np.hypot(a, b)
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    with np.errstate(invalid="ignore", divide="ignore", under="ignore"):
        pos = -2 * a * b / (r + a + b)
        mixed = lo * lo / (r + hi) - lo
        stable = np.where(lo > 0, pos, np.where(hi > 0, mixed, r - a - b))
    return stable if stable.ndim else float(stable)


def fb_partials(a, b):
    """(∂fb/∂a, ∂fb/∂b), with the fixed element FB_KINK at a = b = 0."""
    r = np.hypot(a, b)
    kink = r == 0
    rr = np.where(kink, 1.0, r)
    da = np.where(kink, FB_KINK, a / rr - 1.0)
    db = np.where(kink, FB_KINK, b / rr - 1.0)
    return da, db


# ---------------------------------------------------------------------------
# subproblem data and KKT map


@dataclass(eq=False)
class SubproblemData:
    c: float
    g: np.ndarray  # (M, N) unconstrained target, u = g / c without constraints
    lam: np.ndarray  # (M, N) lumped space-time weights
    m: np.ndarray  # (N,) lumped spatial weights
    S: np.ndarray  # (N, N) w-block of the Hessian

    @property
    def shape(self):
        return self.g.shape


def subproblem_data(spec: ProblemSpec, eps_k: float, state_k: IterateState, L_k: float) -> SubproblemData:
    M, N = spec.M, spec.N
    c = spec.alpha + L_k
    g = (L_k * state_k.u - f_grad(spec, state_k.u)).reshape(M, N)
    S = spec.beta * spec.A.copy()
    if spec.gamma:
        D = lumped_weight_diag(SmoothingParams(spec.p, eps_k), state_k.w, spec.mx)
        S[np.diag_indices(N)] += 2 * spec.gamma * D
    return SubproblemData(c, g, spec.mU.reshape(M, N), spec.mx, S)


def kkt_residual(data: SubproblemData, u, w, mu1, mu2):
    """(Ru, Rw, F1, F2) with space-time parts shaped (M, N)."""
    U, M1, M2 = (np.reshape(x, data.shape) for x in (u, mu1, mu2))
    Ru = data.c * U - data.g - M1 + M2
    Rw = data.S @ w + (data.lam * (M1 + M2)).sum(axis=0)
    F1 = fb(w[None, :] - U, -M1)
    F2 = fb(w[None, :] + U, -M2)
    return Ru, Rw, F1, F2


def _merit(data, parts):
    Ru, Rw, F1, F2 = parts
    return 0.5 * (np.sum(data.lam * (Ru * Ru + F1 * F1 + F2 * F2)) + np.sum(Rw * Rw / data.m))


def kkt_norm(data: SubproblemData, u, w, mu1, mu2) -> float:
    return float(np.sqrt(2 * _merit(data, kkt_residual(data, u, w, mu1, mu2))))


def _jacobian_parts(data, U, w, M1, M2):
    a1, b1 = fb_partials(w[None, :] - U, -M1)
    a2, b2 = fb_partials(w[None, :] + U, -M2)
    return a1, b1, a2, b2


def kkt_jvp(data: SubproblemData, u, w, mu1, mu2, du, dw, dmu1, dmu2):
    """Action of the (generalized) Jacobian of the KKT map on a direction."""
    U, M1, M2, dU, dM1, dM2 = (np.reshape(x, data.shape) for x in (u, mu1, mu2, du, dmu1, dmu2))
    a1, b1, a2, b2 = _jacobian_parts(data, U, w, M1, M2)
    jRu = data.c * dU - dM1 + dM2
    jRw = data.S @ dw + (data.lam * (dM1 + dM2)).sum(axis=0)
    # F1 depends on (w - u, -μ¹), F2 on (w + u, -μ²)
    jF1 = a1 * (dw[None, :] - dU) - b1 * dM1
    jF2 = a2 * (dw[None, :] + dU) - b2 * dM2
    return jRu, jRw, jF1, jF2


def _merit_gradient(data, U, w, M1, M2, parts):
    Ru, Rw, F1, F2 = parts
    a1, b1, a2, b2 = _jacobian_parts(data, U, w, M1, M2)
    yu, y1, y2 = data.lam * Ru, data.lam * F1, data.lam * F2
    yw = Rw / data.m
    gu = data.c * yu - a1 * y1 + a2 * y2
    gw = data.S @ yw + (a1 * y1 + a2 * y2).sum(axis=0)
    g1 = -yu + data.lam * yw[None, :] - b1 * y1
    g2 = yu + data.lam * yw[None, :] - b2 * y2
    return gu, gw, g1, g2


def newton_direction(data: SubproblemData, U, w, M1, M2, parts, kappa=1e-12):
    """Semismooth Newton direction by node-wise elimination and a w Schur complement.

    Raises LinAlgError if the Schur matrix is not positive definite.
    """
    Ru, Rw, F1, F2 = parts
    c = data.c
    a1, b1, a2, b2 = _jacobian_parts(data, U, w, M1, M2)
    b1 = np.minimum(b1, -kappa)
    b2 = np.minimum(b2, -kappa)
    D = c * b1 * b2 + a1 * b2 + a2 * b1
    rhs1 = -Ru
    # node-local solve with r2 = -F1 - a1 dw, r3 = -F2 - a2 dw; first the dw-independent part
    r2, r3 = -F1, -F2
    m1_0 = (-a1 * b2 * rhs1 + (-c * b2 - a2) * r2 - a1 * r3) / D
    m2_0 = (b1 * a2 * rhs1 - a2 * r2 + (-c * b1 - a1) * r3) / D
    coef = (c * a1 * b2 + c * a2 * b1 + 4 * a1 * a2) / D  # d(dμ¹+dμ²)/d(dw) · (-1)
    K = data.S.copy()
    K[np.diag_indices_from(K)] += (data.lam * coef).sum(axis=0)
    rhs = -Rw - (data.lam * (m1_0 + m2_0)).sum(axis=0)
    dw = cho_solve(cho_factor(K), rhs)
    r2 = -F1 - a1 * dw[None, :]
    r3 = -F2 - a2 * dw[None, :]
    dU = (b1 * b2 * rhs1 - b2 * r2 + b1 * r3) / D
    dM1 = (-a1 * b2 * rhs1 + (-c * b2 - a2) * r2 - a1 * r3) / D
    dM2 = (b1 * a2 * rhs1 - a2 * r2 + (-c * b1 - a1) * r3) / D
    return dU, dw, dM1, dM2


def solve_subproblem(spec: ProblemSpec, eps_k: float, state_k: IterateState, L_k: float,
                     config: NewtonConfig | None = None, start: IterateState | None = None):
    """Solve the constrained subproblem; warm start from ``start`` or ``state_k``.

    Returns (state, InnerReport).  ``state.lam`` is left as in the start.
    """
    config = config or NewtonConfig()
    if not (eps_k > 0 or spec.gamma == 0) or not L_k > 0:
        raise ValueError("solve_subproblem needs eps_k > 0 and L_k > 0")
    data = subproblem_data(spec, eps_k, state_k, L_k)
    return _solve_fb(data, start or state_k, config)


def _solve_fb(data: SubproblemData, start: IterateState, config: NewtonConfig):
    M, N = data.shape
    U = start.u.reshape(M, N).copy()
    w = start.w.copy()
    M1 = start.mu1.reshape(M, N).copy()
    M2 = start.mu2.reshape(M, N).copy()
    report = InnerReport()
    parts = kkt_residual(data, U, w, M1, M2)
    theta = _merit(data, parts)
    report.merits.append(theta)

    def pack():
        return IterateState(U.ravel().copy(), w.copy(), M1.ravel().copy(), M2.ravel().copy(), start.lam.copy())

    for it in range(config.max_iter + 1):
        report.iterations = it
        report.merit = theta
        report.residual = float(np.sqrt(2 * theta))
        if report.residual <= config.tol_F:
            report.converged = True
            return pack(), report
        if it == config.max_iter:
            break
        grad = _merit_gradient(data, U, w, M1, M2, parts)
        step = None
        try:
            d = newton_direction(data, U, w, M1, M2, parts, config.kappa)
            slope = sum(float(np.sum(gi * di)) for gi, di in zip(grad, d))
            dnorm2 = sum(float(np.sum(di * di)) for di in d)
            if np.isfinite(slope) and slope <= -config.descent_rho * dnorm2:
                step = _armijo(data, (U, w, M1, M2), d, theta, slope, config)
        except (LinAlgError, FloatingPointError):
            step = None
        if step is not None:
            report.newton_steps += 1
        else:
            d = tuple(-gi for gi in grad)
            slope = -sum(float(np.sum(gi * gi)) for gi in grad)
            step = _armijo(data, (U, w, M1, M2), d, theta, slope, config)
            report.fallbacks += 1
            if step is None:
                break
        (U, w, M1, M2), parts, theta = step
        report.merits.append(theta)
    raise SubproblemError(f"semismooth Newton did not converge: residual {report.residual:.3e} "
                          f"after {report.iterations} iterations", pack(), report)


def _armijo(data, x, d, theta, slope, config):
    t = 1.0
    for _ in range(config.max_backtrack):
        trial = tuple(xi + t * di for xi, di in zip(x, d))
        parts = kkt_residual(data, *trial)
        th = _merit(data, parts)
        if np.isfinite(th) and th <= theta + config.sigma * t * slope:
            return trial, parts, th
        t *= config.backtrack
    return None


# ---------------------------------------------------------------------------
# penalized path


def solve_penalized_subproblem(spec: ProblemSpec, eps_k: float, state_k: IterateState, L_k: float,
                               delta: float, config: NewtonConfig | None = None,
                               start: IterateState | None = None) -> IterateState:
    """Minimize φ_k + (1/2δ)(‖(w-u)₋‖² + ‖(w+u)₋‖²) by semismooth Newton.

    The returned multipliers are μ¹ = (w-u)₋/δ and μ² = (w+u)₋/δ.
    """
    config = config or NewtonConfig()
    if not delta > 0:
        raise ValueError("delta must be positive")
    data = subproblem_data(spec, eps_k, state_k, L_k)
    M, N = data.shape
    start = start or state_k
    U = start.u.reshape(M, N).copy()
    w = start.w.copy()
    lam, c = data.lam, data.c

    def objective(U, w):
        n1 = np.minimum(w[None, :] - U, 0)
        n2 = np.minimum(w[None, :] + U, 0)
        return (np.sum(lam * (0.5 * c * U * U - data.g * U)) + 0.5 * w @ data.S @ w
                + np.sum(lam * (n1 * n1 + n2 * n2)) / (2 * delta))

    def gradient(U, w):
        n1 = np.minimum(w[None, :] - U, 0)
        n2 = np.minimum(w[None, :] + U, 0)
        gu = lam * (c * U - data.g - n1 / delta + n2 / delta)
        gw = data.S @ w + (lam * (n1 + n2)).sum(axis=0) / delta
        return gu, gw

    val = objective(U, w)
    for it in range(config.max_iter):
        gu, gw = gradient(U, w)
        gnorm = np.sqrt(np.sum(gu * gu / lam) + np.sum(gw * gw / data.m))
        if gnorm <= config.tol_F:
            break
        chi1 = (w[None, :] - U < 0).astype(float)
        chi2 = (w[None, :] + U < 0).astype(float)
        huu = lam * (c + (chi1 + chi2) / delta)
        huw = lam * (chi2 - chi1) / delta
        hww_diag = (lam * (chi1 + chi2)).sum(axis=0) / delta
        K = data.S.copy()
        K[np.diag_indices(N)] += hww_diag - (huw * huw / huu).sum(axis=0)
        rhs = -gw + (huw / huu * gu).sum(axis=0)
        dw = cho_solve(cho_factor(K), rhs)
        dU = -(gu + huw * dw[None, :]) / huu
        slope = np.sum(gu * dU) + gw @ dw
        t = 1.0
        for _ in range(config.max_backtrack):
            nv = objective(U + t * dU, w + t * dw)
            if nv <= val + config.sigma * t * slope:
                break
            t *= config.backtrack
        else:
            raise SubproblemError("penalized Newton line search failed")
        U, w, val = U + t * dU, w + t * dw, nv
        # the objective is quadratic on each active-set cell: a full step that
        # keeps the active sets lands on the minimizer up to rounding
        if t == 1.0 and np.array_equal(chi1, w[None, :] - U < 0) and np.array_equal(chi2, w[None, :] + U < 0):
            break
    else:
        raise SubproblemError(f"penalized Newton did not converge (δ={delta})")
    mu1 = np.minimum(w[None, :] - U, 0) / delta
    mu2 = np.minimum(w[None, :] + U, 0) / delta
    return IterateState(U.ravel(), w, mu1.ravel(), mu2.ravel(), start.lam.copy())


# ---------------------------------------------------------------------------
# brute-force oracle


def project_u(g_over_c, w):
    """Closed-form minimizer in u for fixed w: clip the unconstrained value to [-w, w]."""
    w = np.maximum(w, 0.0)
    return np.maximum(-w, np.minimum(w, g_over_c))


def _reduced_value(data, W):
    """min_u of the subproblem (up to a constant) for each row of W (≥ 0)."""
    target = np.abs(data.g / data.c)  # (M, N)
    excess = np.maximum(target[None, :, :] - W[:, None, :], 0.0)
    quad = 0.5 * np.einsum("kn,nm,km->k", W, data.S, W)
    return quad + 0.5 * data.c * np.einsum("mn,kmn->k", data.lam, excess * excess)


def brute_force_oracle(spec: ProblemSpec, eps_k: float, state_k: IterateState, L_k: float,
                       grid_density: int = 21, refinements: int = 3, max_dofs: int = 12):
    """Exhaustive search in w plus exact projection in u.

    The search box [0, max |g/c|]^N is sampled on a uniform grid and refined
    ``refinements`` times around the incumbent.  The incumbent is then
    polished exactly: the reduced objective is piecewise quadratic and convex
    in w, so every pattern of active bounds (the position of w_i among the
    sorted |g_ij/c| or w_i = 0) is solved as a linear system and the best
    consistent candidate is kept.
    """
    M, N = spec.M, spec.N
    if M * N + N > max_dofs:
        raise ValueError(f"brute-force oracle refuses {M * N + N} dofs (limit {max_dofs})")
    data = subproblem_data(spec, eps_k, state_k, L_k)
    target = np.abs(data.g / data.c)
    hi = max(float(target.max()), 1e-12)
    lo_box = np.zeros(N)
    hi_box = np.full(N, hi)
    best_w, best_v = None, np.inf
    for _ in range(refinements + 1):
        axes = [np.linspace(lo_box[i], hi_box[i], grid_density) for i in range(N)]
        W = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
        vals = _reduced_value(data, W)
        k = int(np.argmin(vals))
        if vals[k] < best_v:
            best_v, best_w = float(vals[k]), W[k].copy()
        width = (hi_box - lo_box) / (grid_density - 1)
        lo_box = np.maximum(best_w - 2 * width, 0.0)
        hi_box = best_w + 2 * width

    polished = _polish(data, target)
    if polished is not None:
        pv = float(_reduced_value(data, polished[None])[0])
        if pv <= best_v + 1e-14 * (1 + abs(best_v)):
            best_w, best_v = polished, pv
    u = project_u(data.g / data.c, best_w[None, :]).ravel()
    return u, best_w


def _polish(data, target):
    M, N = data.shape
    order = np.argsort(-target, axis=0)  # per vertex, nodes by decreasing |g/c|
    srt = -np.sort(-target, axis=0)
    best, best_v = None, np.inf
    for pattern in itertools.product(range(-1, M + 1), repeat=N):
        # pattern[i] = -1: w_i = 0; k >= 0: the k largest |g_ij/c| exceed w_i
        K = data.S.copy()
        rhs = np.zeros(N)
        fixed = [i for i in range(N) if pattern[i] == -1]
        for i, k in enumerate(pattern):
            if k <= 0:
                continue
            idx = order[:k, i]
            K[i, i] += data.c * data.lam[idx, i].sum()
            rhs[i] += data.c * (data.lam[idx, i] * target[idx, i]).sum()
        free = [i for i in range(N) if i not in fixed]
        w = np.zeros(N)
        if free:
            try:
                w[free] = np.linalg.solve(K[np.ix_(free, free)], rhs[free])
            except np.linalg.LinAlgError:
                continue
        ok = True
        for i, k in enumerate(pattern):
            if k == -1:
                continue
            upper = srt[k - 1, i] if k > 0 else np.inf
            lower = srt[k, i] if k < M else 0.0
            if not (lower - 1e-12 <= w[i] <= upper + 1e-12) or w[i] < -1e-14:
                ok = False
                break
        if not ok:
            continue
        w = np.maximum(w, 0.0)
        v = float(_reduced_value(data, w[None])[0])
        if v < best_v:
            best, best_v = w, v
    return best


# ---------------------------------------------------------------------------
# stationarity of the limit system


@dataclass
class StationarityReport:
    residual: float  # norm of the stationarity equation (u and w parts)
    residual_u: float
    residual_w: float
    complementarity: float  # max(|μ¹ (w-u)|, |μ² (w+u)|)
    sign_violation: float  # max(μ¹, μ², 0)
    feasibility: float  # max(|u| - w, -w, 0)
    lambda_gap: float  # <λ, w> - p ∫|w|^p
    lp_term: float  # p ∫|w|^p, the scale the gap is compared against

    def as_dict(self):
        return dict(self.__dict__)


def stationarity_residual(spec: ProblemSpec, state: IterateState) -> StationarityReport:
    """Residuals of the limit optimality system at ``state``.

    ``state.lam`` must hold the nodal representative of λ (for the MM
    iterates λ_k = 2 ψ'_{ε_k}(w_k²) w_{k+1}).
    """
    M, N = spec.M, spec.N
    lamU = spec.mU.reshape(M, N)
    U, M1, M2 = (x.reshape(M, N) for x in (state.u, state.mu1, state.mu2))
    w = state.w
    ru = f_grad(spec, state.u).reshape(M, N) + spec.alpha * U - M1 + M2
    rw = spec.beta * spec.A @ w + (lamU * (M1 + M2)).sum(axis=0)
    if spec.gamma:
        rw = rw + spec.gamma * spec.mx * state.lam
    res_u = float(np.sqrt(np.sum(lamU * ru * ru)))
    res_w = float(np.sqrt(np.sum(rw * rw / spec.mx)))
    comp = float(max(np.max(np.abs(M1 * (w[None, :] - U))), np.max(np.abs(M2 * (w[None, :] + U)))))
    sign = float(max(M1.max(), M2.max(), 0.0))
    feas = state.feasibility_violation(N)
    lp = spec.p * float(spec.mx @ np.abs(w) ** spec.p)
    gap = float(spec.mx @ (state.lam * w)) - lp
    return StationarityReport(float(np.hypot(res_u, res_w)), res_u, res_w, comp, sign, feas, gap, lp)


def subproblem_value(spec, eps_k, state_k, L_k, u, w):
    return subproblem_objective(spec, eps_k, state_k, L_k, u, w)
