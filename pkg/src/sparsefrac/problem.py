"""Problem instances, iterates and the objectives Φ_ε and φ_k.

Space-time functions are nodal vectors of length M·N (time-major).  All
U-pairings use the lumped space-time mass ``spec.mU`` (vertex rule in space
and trapezoid rule in time).  This is what makes the pointwise constraint
|u_ij| ≤ w_i exactly equivalent to the bound on the P1 function, and it
makes the u-block of every subproblem diagonal.  Gradients are returned as
nodal representatives: the derivative in direction h is ``mU @ (grad * h)``
for U and ``grad @ h`` for dual vectors in W.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fracnorm import FractionalKernel, GramSet, QuadConfig, build_gram_set
from .mesh import DofMap, Mesh, TimeGrid
from .smoothing import G, SmoothingParams, lumped_weight_diag


@dataclass(eq=False)
class ProblemSpec:
    alpha: float
    beta: float
    gamma: float
    p: float
    s: float
    a: float
    u_d: np.ndarray
    mesh: Mesh
    grid: TimeGrid
    grams: GramSet

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.a > 0):
            raise ValueError("alpha, beta and a must be positive")
        # gamma = 0 switches the sparsity term off, which the γ-sweeps need
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if not 0 < self.p <= 1:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if not 0 < self.s < 1:
            raise ValueError(f"s must lie in (0, 1), got {self.s}")
        self.u_d = np.asarray(self.u_d, dtype=float).ravel()
        if self.u_d.size != self.M * self.N:
            raise ValueError(f"u_d has {self.u_d.size} entries, expected M*N = {self.M * self.N}")

    @property
    def N(self) -> int:
        return self.mesh.n_vertices

    @property
    def M(self) -> int:
        return self.grid.M

    @property
    def dofs(self) -> DofMap:
        return DofMap(self.N, self.M)

    @property
    def mx(self) -> np.ndarray:
        return self.grams.m_omega

    @property
    def mU(self) -> np.ndarray:
        return self.grams.lumped_U

    @property
    def A(self) -> np.ndarray:
        return self.grams.A_s

    def with_params(self, **changes) -> "ProblemSpec":
        """Copy with changed scalar parameters (s must stay fixed: A_s is shared)."""
        if "s" in changes and changes["s"] != self.s:
            raise ValueError("changing s requires reassembling the W inner product")
        return replace(self, **changes)


@dataclass
class IterateState:
    u: np.ndarray
    w: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    lam: np.ndarray  # nodal representative of λ; dual vector is mx * lam

    @classmethod
    def zeros(cls, N: int, M: int) -> "IterateState":
        return cls(np.zeros(M * N), np.zeros(N), np.zeros(M * N), np.zeros(M * N), np.zeros(N))

    def copy(self) -> "IterateState":
        return IterateState(self.u.copy(), self.w.copy(), self.mu1.copy(), self.mu2.copy(), self.lam.copy())

    def feasibility_violation(self, N: int) -> float:
        U = self.u.reshape(-1, N)
        return float(max(np.max(np.abs(U) - self.w[None, :]), np.max(-self.w), 0.0))


def sample_target(u_d: Callable, mesh: Mesh, grid: TimeGrid) -> np.ndarray:
    """Nodal interpolation of u_d(t, x) (x of shape (N, dim)) in time-major order."""
    vals = [np.broadcast_to(np.asarray(u_d(t, mesh.vertices), dtype=float), (mesh.n_vertices,))
            for t in grid.nodes]
    return np.concatenate(vals)


def make_problem(mesh: Mesh, grid: TimeGrid, *, alpha: float, beta: float, gamma: float, p: float,
                 s: float, a: float, u_d, quad: QuadConfig | None = None,
                 grams: GramSet | None = None) -> ProblemSpec:
    if grams is None:
        grams = build_gram_set(mesh, grid, FractionalKernel(s, mesh.dim), quad)
    if callable(u_d):
        u_d = sample_target(u_d, mesh, grid)
    return ProblemSpec(alpha, beta, gamma, p, s, a, np.asarray(u_d, dtype=float), mesh, grid, grams)


# ---------------------------------------------------------------------------


def _check_u(spec: ProblemSpec, u):
    u = np.asarray(u, dtype=float).ravel()
    if u.size != spec.M * spec.N:
        raise ValueError(f"u has {u.size} entries, expected {spec.M * spec.N}")
    return u


def u_norm2(spec: ProblemSpec, u) -> float:
    u = _check_u(spec, u)
    return float(spec.mU @ (u * u))


def w_norm2(spec: ProblemSpec, w) -> float:
    w = np.asarray(w, dtype=float)
    return float(w @ spec.A @ w)


def f_value(spec: ProblemSpec, u) -> float:
    r = _check_u(spec, u) - spec.u_d
    return 0.5 * spec.a * float(spec.mU @ (r * r))


def f_grad(spec: ProblemSpec, u) -> np.ndarray:
    """Nodal representative a (u - u_d); f'(u)h = mU @ (f_grad * h)."""
    return spec.a * (_check_u(spec, u) - spec.u_d)


def phi_eps(spec: ProblemSpec, eps: float, u, w) -> float:
    """Φ_ε(u, w) = f(u) + α/2 ‖u‖² + β/2 ‖w‖²_W + γ G_ε(w); ε = 0 gives Φ₀."""
    val = f_value(spec, u) + 0.5 * spec.alpha * u_norm2(spec, u) + 0.5 * spec.beta * w_norm2(spec, w)
    if spec.gamma:
        val += spec.gamma * G(SmoothingParams(spec.p, eps), w, spec.mx)
    return val


def subproblem_objective(spec: ProblemSpec, eps_k: float, state_k: IterateState, L_k: float, u, w) -> float:
    """Quadratic model φ_k(u, w) around (u_k, w_k); vanishes at (u_k, w_k)."""
    u = _check_u(spec, u)
    w = np.asarray(w, dtype=float)
    du = u - state_k.u
    val = float(spec.mU @ (f_grad(spec, state_k.u) * du))
    val += 0.5 * spec.alpha * u_norm2(spec, u) + 0.5 * spec.beta * w_norm2(spec, w)
    val += 0.5 * L_k * u_norm2(spec, du)
    if spec.gamma:
        D = lumped_weight_diag(SmoothingParams(spec.p, eps_k), state_k.w, spec.mx)
        val += spec.gamma * float(D @ (w * w - state_k.w * state_k.w))
    # constant shift so that φ_k(u_k, w_k) = 0
    val -= 0.5 * spec.alpha * u_norm2(spec, state_k.u) + 0.5 * spec.beta * w_norm2(spec, state_k.w)
    return val


def subproblem_hessian_blocks(spec: ProblemSpec, eps_k: float, state_k: IterateState, L_k: float):
    """(diagonal of the u-block, dense w-block) of the Hessian of φ_k."""
    Huu = (spec.alpha + L_k) * spec.mU
    Hww = spec.beta * spec.A.copy()
    if spec.gamma:
        D = lumped_weight_diag(SmoothingParams(spec.p, eps_k), state_k.w, spec.mx)
        Hww[np.diag_indices_from(Hww)] += 2 * spec.gamma * D
    return Huu, Hww
