"""Smoothed L^p term: ψ_ε, its derivative and G_ε(w) = ∫ ψ_ε(w²) dx.

ψ_ε(t) = (p/2) t / ε^{2-p} + (1 - p/2) ε^p   for t < ε²
ψ_ε(t) = t^{p/2}                              for t ≥ ε²

is a C¹, concave, ε-monotone approximation of t ↦ t^{p/2}.  G and its
gradient use the vertex (mass-lumped) rule by default, which makes the
Hessian contribution of the majorizer diagonal.  ``quadrature="gauss"``
integrates the P1 interpolant on every cell instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fracnorm import lumped_mass
from .mesh import Mesh
from .quadrature import collapsed_triangle, gauss_legendre_01


@dataclass(frozen=True)
class SmoothingParams:
    p: float
    eps: float

    def __post_init__(self):
        # p = 1 is admitted so the L¹ end of p-sweeps can be run
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if not self.eps >= 0.0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")


def psi(params: SmoothingParams, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("psi is defined for t >= 0 only")
    p, eps = params.p, params.eps
    if eps == 0.0:
        return t ** (p / 2)
    lower = (p / 2) * t / eps ** (2 - p) + (1 - p / 2) * eps ** p
    with np.errstate(divide="ignore"):
        upper = np.maximum(t, eps * eps) ** (p / 2)
    return np.where(t < eps * eps, lower, upper)


def psi_prime(params: SmoothingParams, t):
    t = np.asarray(t, dtype=float)
    if params.eps <= 0.0:
        raise ValueError("psi_prime needs eps > 0 (the derivative is unbounded at 0)")
    if np.any(t < 0):
        raise ValueError("psi_prime is defined for t >= 0 only")
    p, eps = params.p, params.eps
    return (p / 2) * np.minimum(eps ** (p - 2), np.maximum(t, eps * eps) ** ((p - 2) / 2))


def _weights(mesh_or_weights):
    if isinstance(mesh_or_weights, Mesh):
        return lumped_mass(mesh_or_weights)
    return np.asarray(mesh_or_weights, dtype=float)


def _cell_rule(mesh: Mesh, order: int = 4):
    """Barycentric points (q, dim+1) and physical weights (n_cells, q)."""
    if mesh.dim == 1:
        t, w = gauss_legendre_01(order)
        bary = np.column_stack([1 - t, t])
    else:
        bary, w = collapsed_triangle(order)
    return bary, mesh.cell_measures()[:, None] * w


def G(params: SmoothingParams, w, mesh, quadrature: str = "vertex") -> float:
    """∫_Ω ψ_ε(w²) dx for the P1 function with nodal values w.

    ``mesh`` may be a Mesh or an array of vertex weights (vertex rule only).
    """
    w = np.asarray(w, dtype=float)
    if quadrature == "vertex":
        mx = _weights(mesh)
        if w.shape != mx.shape:
            raise ValueError(f"w has {w.size} entries, mesh has {mx.size} vertices")
        if params.eps == 0.0:
            # 0^p := 0 by continuity for p > 0
            return float(mx @ np.abs(w) ** params.p)
        return float(mx @ psi(params, w * w))
    if quadrature == "gauss":
        bary, wq = _cell_rule(mesh)
        wx = w[mesh.cells] @ bary.T
        return float(np.sum(wq * psi(params, wx * wx)))
    raise ValueError(f"unknown quadrature {quadrature!r}")


def G_grad(params: SmoothingParams, w, mesh, quadrature: str = "vertex") -> np.ndarray:
    """Vector g_k = ∫ 2 w ψ'_ε(w²) φ_k dx (same quadrature as ``G``)."""
    w = np.asarray(w, dtype=float)
    if quadrature == "vertex":
        mx = _weights(mesh)
        if w.shape != mx.shape:
            raise ValueError(f"w has {w.size} entries, mesh has {mx.size} vertices")
        return mx * 2 * w * psi_prime(params, w * w)
    if quadrature == "gauss":
        bary, wq = _cell_rule(mesh)
        wx = w[mesh.cells] @ bary.T
        vals = wq * 2 * wx * psi_prime(params, wx * wx)  # (n_cells, q)
        local = vals @ bary  # (n_cells, dim+1)
        return np.bincount(mesh.cells.ravel(), local.ravel(), minlength=mesh.n_vertices)
    raise ValueError(f"unknown quadrature {quadrature!r}")


def lumped_weight_diag(params: SmoothingParams, w_ref, mesh) -> np.ndarray:
    """Diagonal D with D_ii = m_i ψ'_ε(w_ref,i²): the Hessian block of the majorizer is 2D."""
    mx = _weights(mesh)
    w_ref = np.asarray(w_ref, dtype=float)
    return mx * psi_prime(params, w_ref * w_ref)


def majorizer_gap(params: SmoothingParams, w_ref, w, mesh) -> float:
    """∫ ψ'(w_ref²)(w² - w_ref²) - (ψ(w²) - ψ(w_ref²)); nonnegative by concavity."""
    mx = _weights(mesh)
    w_ref = np.asarray(w_ref, dtype=float)
    w = np.asarray(w, dtype=float)
    t0, t1 = w_ref * w_ref, w * w
    val = psi_prime(params, t0) * (t1 - t0) - (psi(params, t1) - psi(params, t0))
    return float(mx @ val)
