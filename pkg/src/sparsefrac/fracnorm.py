"""Discrete inner products: spatial and space-time mass, fractional stiffness.

The fractional inner product on P1 functions extended by zero outside Ω is

    (v, w)_W = (v, w)_{L²(Ω)}
             + c_{d,s}/2 * [ ∫_Ω∫_Ω (v(x)-v(y))(w(x)-w(y)) |x-y|^{-d-2s} dy dx
                             + 2 ∫_Ω v w ρ dx ],
    ρ(x) = ∫_{ℝ^d \\ Ω} |x-y|^{-d-2s} dy,

so a single dense matrix ``A_s`` represents the full W inner product.

The Ω×Ω integral is assembled over pairs of cells.  Identical cells are
integrated in closed form (1D) or through the exact translation-overlap
formula (2D), cells sharing a vertex or an edge use Duffy-type transforms
that remove the singularity, and separated pairs use tensor Gauss rules
(order ``QuadConfig.regular`` for nearby pairs, ``QuadConfig.far`` beyond
``near_factor * h``).  ρ is evaluated exactly for polygonal Ω from a
boundary integral; its weak singularity at ∂Ω is absorbed by Gauss-Jacobi
rules on cells touching the boundary.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import beta as beta_fn, betainc, gamma

from .mesh import Mesh, MeshError, TimeGrid
from .quadrature import collapsed_triangle, gauss_jacobi_01, gauss_legendre_01


class AssemblyError(RuntimeError):
    """Assembly produced a non-finite or otherwise unusable matrix."""


class UnsupportedConfigurationWarning(UserWarning):
    """Input outside the regime the assembly is validated for."""


@dataclass(frozen=True)
class FractionalKernel:
    s: float
    d: int
    c_ds: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"fractional order must lie in (0, 1), got {self.s}")
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        object.__setattr__(self, "c_ds", fractional_constant(self.d, self.s))


def fractional_constant(d: int, s: float) -> float:
    return s * 2.0 ** (2 * s) * gamma(s + d / 2) / (math.pi ** (d / 2) * gamma(1 - s))


@dataclass(frozen=True)
class QuadConfig:
    """Quadrature orders (points per direction) for the stiffness assembly."""

    regular: int = 4  # separated cell pairs closer than near_factor * h
    singular: int = 6  # identical / touching pairs, per transformed direction
    far: int = 3  # well separated pairs
    near_factor: float = 3.0
    angular: int = 16  # per arc, identical triangles
    complement: int = 8  # integrals against ρ
    chunk: int = 20000  # cell pairs per vectorized batch

    def __post_init__(self):
        for name in ("regular", "singular", "far", "angular", "complement", "chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"QuadConfig.{name} must be positive")


# ---------------------------------------------------------------------------
# mass matrices


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix (exact element integrals)."""
    vol = mesh.cell_measures()
    if np.any(vol <= 0):
        raise AssemblyError("degenerate cell in mass assembly")
    k = mesh.dim + 1
    # ∫ λ_a λ_b = |T| (1 + δ_ab) / ((k)(k+1))
    local = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    rows = np.repeat(mesh.cells, k, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, k)).ravel()
    vals = (vol[:, None, None] * local[None]).ravel()
    N = mesh.n_vertices
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def lumped_mass(mesh: Mesh) -> np.ndarray:
    """Vertex quadrature weights ∫ φ_i (row sums of the mass matrix)."""
    vol = mesh.cell_measures()
    k = mesh.dim + 1
    return np.bincount(mesh.cells.ravel(), np.repeat(vol / k, k), minlength=mesh.n_vertices)


def assemble_time_mass(grid: TimeGrid) -> sp.csr_matrix:
    M, dt = grid.M, grid.dt
    main = np.full(M, 2 * dt / 3)
    main[[0, -1]] = dt / 3
    off = np.full(M - 1, dt / 6)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def lumped_time_weights(grid: TimeGrid) -> np.ndarray:
    tw = np.full(grid.M, grid.dt)
    tw[[0, -1]] = grid.dt / 2
    return tw


class SpaceTimeMass:
    """Kronecker product M_t ⊗ M_Ω acting on time-major vectors.

    Never forms the (M·N)×(M·N) matrix unless ``toarray`` is asked for.
    """

    def __init__(self, Mt, Mx):
        self.Mt = sp.csr_matrix(Mt)
        self.Mx = sp.csr_matrix(Mx)
        self.M = self.Mt.shape[0]
        self.N = self.Mx.shape[0]
        self.shape = (self.M * self.N, self.M * self.N)

    def matvec(self, v):
        V = np.asarray(v, dtype=float).reshape(self.M, self.N)
        return np.asarray(self.Mt @ (self.Mx @ V.T).T).ravel()

    __matmul__ = matvec

    def inner(self, u, v) -> float:
        return float(np.dot(np.ravel(u), self.matvec(v)))

    def norm2(self, u) -> float:
        return self.inner(u, u)

    def total(self) -> float:
        return float(self.Mt.sum() * self.Mx.sum())

    def lumped(self) -> np.ndarray:
        """Row sums, i.e. the diagonal of the lumped space-time mass."""
        return np.outer(np.asarray(self.Mt.sum(axis=1)).ravel(), np.asarray(self.Mx.sum(axis=1)).ravel()).ravel()

    def tosparse(self):
        return sp.kron(self.Mt, self.Mx, format="csr")

    def toarray(self):
        return self.tosparse().toarray()


def assemble_spacetime_mass(mesh: Mesh, grid: TimeGrid) -> SpaceTimeMass:
    return SpaceTimeMass(assemble_time_mass(grid), assemble_mass(mesh))


def time_average_pairing(v, z, Mt, Mx) -> float:
    """∫_Ω (∫_I v dt) z dx for space-time coefficients v and spatial z."""
    Mt = sp.csr_matrix(Mt)
    Mx = sp.csr_matrix(Mx)
    M, N = Mt.shape[0], Mx.shape[0]
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    if v.size != M * N or z.size != N:
        raise ValueError(f"expected vectors of length {M * N} and {N}, got {v.size} and {z.size}")
    tw = np.asarray(Mt.sum(axis=1)).ravel()
    return float(tw @ v.reshape(M, N) @ (Mx @ z))


# ---------------------------------------------------------------------------
# fractional stiffness


def assemble_fractional_stiffness(mesh: Mesh, kernel: FractionalKernel, quad: QuadConfig | None = None,
                                  *, parts: bool = False):
    """Dense matrix of the full W inner product on the P1 space.

    With ``parts=True`` returns ``(A, M, B, R)`` where ``B`` is the Ω×Ω double
    integral and ``R`` the complement term, so ``A = M + c/2 (B + 2R)``.
    """
    quad = quad or QuadConfig()
    if kernel.d != mesh.dim:
        raise MeshError(f"kernel dimension {kernel.d} does not match mesh dimension {mesh.dim}")
    s = kernel.s
    if s >= 0.5:
        warnings.warn(f"fractional order s={s} >= 1/2 is outside the validated regime; "
                      "complement entries of boundary vertices are quadrature truncations",
                      UnsupportedConfigurationWarning, stacklevel=2)
    if mesh.dim == 1:
        B = _interaction_1d(mesh, s, quad)
        R = _complement_1d(mesh, s, quad)
    else:
        B = _interaction_2d(mesh, s, quad)
        R = _complement_2d(mesh, s, quad)
    M = assemble_mass(mesh).toarray()
    B = 0.5 * (B + B.T)
    R = 0.5 * (R + R.T)
    A = M + 0.5 * kernel.c_ds * (B + 2.0 * R)
    if not np.all(np.isfinite(A)):
        raise AssemblyError("non-finite entry in fractional stiffness matrix")
    if parts:
        return A, M, B, R
    return A


def _scatter(B, rows, cols, vals):
    N = B.shape[0]
    B += np.bincount((rows * N + cols).ravel(), vals.ravel(), minlength=N * N).reshape(N, N)


def _block_indices(idx_a, idx_b):
    """Row/col index arrays of the local blocks idx_a[p, k] x idx_b[p, l]."""
    return (np.broadcast_to(idx_a[:, :, None], idx_a.shape + (idx_b.shape[1],)),
            np.broadcast_to(idx_b[:, None, :], (idx_a.shape[0], idx_a.shape[1], idx_b.shape[1])))


def _touching_pairs(mesh: Mesh):
    """Unordered cell pairs (i < j) sharing at least one vertex, with the count."""
    nc, k = mesh.cells.shape
    inc = sp.csr_matrix((np.ones(nc * k), (np.repeat(np.arange(nc), k), mesh.cells.ravel())),
                        shape=(nc, mesh.n_vertices))
    S = sp.triu(inc @ inc.T, k=1).tocoo()
    return S.row.astype(np.int64), S.col.astype(np.int64), S.data.astype(np.int64)


def _separated_pairs(mesh: Mesh, touching_i, touching_j):
    nc = mesh.n_cells
    i, j = np.triu_indices(nc, k=1)
    key = i.astype(np.int64) * nc + j
    mask = ~np.isin(key, touching_i * nc + touching_j)
    return i[mask].astype(np.int64), j[mask].astype(np.int64)


def _separated_contrib(B, X1, W1, X2, W2, Phi, idx1, idx2, s, d, kappa1, kappa2, c1, c2):
    """Separated pair batch: cross blocks into B, diagonal parts into kappa."""
    K = np.zeros((X1.shape[0], X1.shape[1], X2.shape[1]))
    for k in range(d):
        K += (X1[:, :, None, k] - X2[:, None, :, k]) ** 2
    K **= -(d + 2 * s) / 2
    K *= W1[:, :, None] * W2[:, None, :]
    # both orderings of the pair contribute equally, hence the factor 2
    np.add.at(kappa1, c1, 2 * K.sum(axis=2))
    np.add.at(kappa2, c2, 2 * K.sum(axis=1))
    cross = -2 * (Phi.T @ K @ Phi)
    r, c = _block_indices(idx1, idx2)
    _scatter(B, r, c, cross)
    _scatter(B, c, r, cross)


def _finish_kappa(B, cells, kappa, Phi):
    # kappa[e, q] already carries the weight of point q; block = Σ_q kappa Φ_k Φ_l
    blocks = np.einsum("eq,qk,ql->ekl", kappa, Phi, Phi)
    r, c = _block_indices(cells, cells)
    _scatter(B, r, c, blocks)


# -- 1D ----------------------------------------------------------------------


def _interaction_1d(mesh: Mesh, s: float, quad: QuadConfig) -> np.ndarray:
    x = mesh.vertices[:, 0]
    cells = mesh.cells
    N = mesh.n_vertices
    B = np.zeros((N, N))
    h = x[cells[:, 1]] - x[cells[:, 0]]

    # identical cells: ∫∫ (x-y)^2 |x-y|^{-1-2s} = 2 h^{3-2s} / ((2-2s)(3-2s)), times slopes
    diag = 2 * h ** (1 - 2 * s) / ((2 - 2 * s) * (3 - 2 * s))
    local = np.array([[1.0, -1.0], [-1.0, 1.0]])
    r, c = _block_indices(cells, cells)
    _scatter(B, r, c, diag[:, None, None] * local)

    ti, tj, _ = _touching_pairs(mesh)
    # cells sharing a vertex v: X = v + ξ(p - v), Y = v + ξη(q - v) and the mirrored region
    eta, weta = gauss_legendre_01(max(quad.singular, 2 * quad.singular))
    for a, b in zip(ti, tj):
        ca, cb = cells[a], cells[b]
        v = (set(ca.tolist()) & set(cb.tolist())).pop()
        p = ca[0] if ca[1] == v else ca[1]
        q = cb[0] if cb[1] == v else cb[1]
        h1, h2 = abs(x[p] - x[v]), abs(x[q] - x[v])
        dA = np.stack([eta - 1, np.ones_like(eta), -eta])
        dB = np.stack([1 - eta, eta, -np.ones_like(eta)])
        kA = weta * (h1 + eta * h2) ** (-1 - 2 * s)
        kB = weta * (eta * h1 + h2) ** (-1 - 2 * s)
        blk = (dA * kA) @ dA.T + (dB * kB) @ dB.T
        blk *= 2 * h1 * h2 / (3 - 2 * s)
        nodes = np.array([v, p, q])
        B[np.ix_(nodes, nodes)] += blk

    si, sj = _separated_pairs(mesh, ti, tj)
    if len(si):
        gap = np.maximum(x[cells[sj, 0]] - x[cells[si, 1]], x[cells[si, 0]] - x[cells[sj, 1]])
        near = gap < quad.near_factor * np.maximum(h[si], h[sj])
        for order, mask in ((quad.regular, near), (quad.far, ~near)):
            if not mask.any():
                continue
            t, wt = gauss_legendre_01(order)
            Phi = np.column_stack([1 - t, t])
            kappa = np.zeros((mesh.n_cells, order))
            I, J = si[mask], sj[mask]
            for lo in range(0, len(I), quad.chunk):
                a, b = I[lo:lo + quad.chunk], J[lo:lo + quad.chunk]
                X1 = (x[cells[a, 0]][:, None] + h[a][:, None] * t)[:, :, None]
                X2 = (x[cells[b, 0]][:, None] + h[b][:, None] * t)[:, :, None]
                _separated_contrib(B, X1, h[a][:, None] * wt, X2, h[b][:, None] * wt, Phi,
                                   cells[a], cells[b], s, 1, kappa, kappa, a, b)
            _finish_kappa(B, cells, kappa, Phi)
    return B


def _complement_1d(mesh: Mesh, s: float, quad: QuadConfig) -> np.ndarray:
    x = mesh.vertices[:, 0]
    lo, hi = x.min(), x.max()
    N = mesh.n_vertices
    R = np.zeros((N, N))
    n = quad.complement
    tg, wg = gauss_legendre_01(n)
    tj, wj = gauss_jacobi_01(n, -2 * s)
    for c in mesh.cells:
        x0, x1 = x[c[0]], x[c[1]]
        h = x1 - x0
        blk = np.zeros((2, 2))
        # left term (x - lo)^{-2s}; right term (hi - x)^{-2s}
        if x0 == lo:
            t, w = tj, wj * h ** (1 - 2 * s)
        else:
            t, w = tg, wg * h * (x0 + h * tg - lo) ** (-2 * s)
        Phi = np.column_stack([1 - t, t])
        blk += (Phi * w[:, None]).T @ Phi
        if x1 == hi:
            t, w = 1 - tj, wj * h ** (1 - 2 * s)
        else:
            t, w = tg, wg * h * (hi - x0 - h * tg) ** (-2 * s)
        Phi = np.column_stack([1 - t, t])
        blk += (Phi * w[:, None]).T @ Phi
        R[np.ix_(c, c)] += blk / (2 * s)
    return R


def complement_density_1d(x, a: float, b: float, s: float):
    x = np.asarray(x, dtype=float)
    return ((x - a) ** (-2 * s) + (b - x) ** (-2 * s)) / (2 * s)


# -- 2D ----------------------------------------------------------------------


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _gradients(V, cells):
    p0, p1, p2 = (V[cells[:, k]] for k in range(3))
    e1, e2 = p1 - p0, p2 - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    return np.stack([-g1 - g2, g1, g2], axis=1)  # (nc, 3, 2)


def _identical_2d(B, V, cells, area, s, n_ang):
    G = _gradients(V, cells)
    tq, wq = gauss_legendre_01(n_ang)
    const = 2.0 / ((2 - 2 * s) * (3 - 2 * s) * (4 - 2 * s))
    base = np.arctan2(G[:, :, 1], G[:, :, 0])
    kinks = np.sort(np.mod(np.concatenate([base + np.pi / 2, base - np.pi / 2], axis=1), 2 * np.pi), axis=1)
    ends = np.concatenate([kinks, kinks[:, :1] + 2 * np.pi], axis=1)
    lo, width = ends[:, :-1], np.diff(ends, axis=1)  # (nc, 6)
    theta = lo[:, :, None] + width[:, :, None] * tq  # (nc, 6, n)
    w = (width[:, :, None] * wq).reshape(len(cells), -1)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1).reshape(len(cells), -1, 2)
    proj = np.einsum("ekd,eqd->eqk", G, dirs)  # ∇λ_k · θ
    P = np.clip(proj, 0, None).sum(axis=2)
    wk = w * P ** (2 * s - 2)
    blocks = np.einsum("eq,eqk,eql->ekl", wk, proj, proj) * (area * const)[:, None, None]
    r, c = _block_indices(cells, cells)
    _scatter(B, r, c, blocks)


def _vertex_pairs_2d(B, V, cells, pairs, s, n):
    if not len(pairs[0]):
        return
    e, we = gauss_legendre_01(n)
    E1, E2, E3 = (a.ravel() for a in np.meshgrid(e, e, e, indexing="ij"))
    W = np.einsum("i,j,k->ijk", we, we, we).ravel()
    a, b = pairs
    ca, cb = cells[a], cells[b]
    # rotate local orderings so that the shared vertex comes first
    shared = (ca[:, :, None] == cb[:, None, :])
    ka = np.argmax(shared.any(axis=2), axis=1)
    kb = np.argmax(shared.any(axis=1), axis=1)
    rot = np.array([[0, 1, 2], [1, 2, 0], [2, 0, 1]])
    ca = np.take_along_axis(ca, rot[ka], axis=1)
    cb = np.take_along_axis(cb, rot[kb], axis=1)
    v, p1, p2 = (V[ca[:, k]] for k in range(3))
    q1, q2 = V[cb[:, 1]], V[cb[:, 2]]
    J1 = np.abs(_cross2(p1 - v, p2 - p1))
    J2 = np.abs(_cross2(q1 - v, q2 - q1))
    # e1(η1) = (p1 - v) + η1 (p2 - p1), e2(η3) = (q1 - v) + η3 (q2 - q1)
    e1 = (p1 - v)[:, None, :] + E1[None, :, None] * (p2 - p1)[:, None, :]
    e2 = (q1 - v)[:, None, :] + E3[None, :, None] * (q2 - q1)[:, None, :]
    DA = e1 - E2[None, :, None] * e2
    DB = E2[None, :, None] * e1 - e2
    dA = np.stack([E2 - 1, 1 - E1, E1, -E2 * (1 - E3), -E2 * E3], axis=1)
    dB = np.stack([1 - E2, E2 * (1 - E1), E2 * E1, -(1 - E3), -E3], axis=1)
    expo = -(2 + 2 * s) / 2
    kA = (W * E2)[None] * np.einsum("pqd,pqd->pq", DA, DA) ** expo
    kB = (W * E2)[None] * np.einsum("pqd,pqd->pq", DB, DB) ** expo
    blocks = np.einsum("pq,qk,ql->pkl", kA, dA, dA) + np.einsum("pq,qk,ql->pkl", kB, dB, dB)
    blocks *= (2 * J1 * J2 / (4 - 2 * s))[:, None, None]
    nodes = np.column_stack([ca, cb[:, 1:]])
    r, c = _block_indices(nodes, nodes)
    _scatter(B, r, c, blocks)


def _edge_rule(n, s):
    """Reference points for cells sharing an edge.

    Returns arrays (t, τ, u, w, ρ, weight) where the weight includes all
    Jacobians except the geometric factor J1 J2, and the ρ^{2-2s} behaviour of
    the integrand is carried by the Gauss-Jacobi weight.
    """
    r, wr = gauss_jacobi_01(n, 2 - 2 * s)
    g, wg = gauss_legendre_01(n)
    R, V1, V2, Z = (a.ravel() for a in np.meshgrid(r, g, g, g, indexing="ij"))
    W = np.einsum("i,j,k,l->ijkl", wr, wg, wg, wg).ravel()
    out = []
    for pyramid in range(3):
        if pyramid == 0:
            sig, u, w = R, R * V1, R * V2
        elif pyramid == 1:
            sig, u, w = R * V1, R, R * V2
        else:
            sig, u, w = R * V1, R * V2, R
        zeta = sig + (1 - sig) * Z
        wt = W * (1 - sig) * (1 - u) * (1 - w)
        for sign in (1, -1):
            t, tau = (zeta, zeta - sig) if sign > 0 else (zeta - sig, zeta)
            out.append((t, tau, u, w, R, wt))
    return tuple(np.concatenate(col) for col in zip(*out))


def _edge_pairs_2d(B, V, cells, pairs, s, n, chunk):
    if not len(pairs[0]):
        return
    t, tau, u, w, rho, wt = _edge_rule(n, s)
    a_idx, b_idx = pairs
    ca, cb = cells[a_idx], cells[b_idx]
    # the vertex of each cell not on the shared edge
    in_b = (ca[:, :, None] == cb[:, None, :]).any(axis=2)
    in_a = (cb[:, :, None] == ca[:, None, :]).any(axis=1)
    oa = ca[np.arange(len(ca)), np.argmin(in_b, axis=1)]
    ob = cb[np.arange(len(cb)), np.argmin(in_a, axis=1)]
    shared = np.where(in_b, ca, -1)
    shared = np.sort(shared, axis=1)[:, 1:]  # the two shared vertices
    nodes = np.column_stack([shared, oa, ob])
    d = np.stack([(1 - u) * (1 - t) - (1 - w) * (1 - tau), (1 - u) * t - (1 - w) * tau, u, -w], axis=1) / rho[:, None]
    expo = -(2 + 2 * s) / 2
    step = max(1, chunk // 50)
    for lo in range(0, len(nodes), step):
        nd = nodes[lo:lo + step]
        v0, v1, A, Bv = (V[nd[:, k]] for k in range(4))
        J1 = np.abs(_cross2(v1 - v0, A - v0))
        J2 = np.abs(_cross2(v1 - v0, Bv - v0))
        ev = v1 - v0
        # (X - Y) / ρ
        diff = (((1 - u) * t - (1 - w) * tau)[None, :, None] * ev[:, None, :]
                + (w - u)[None, :, None] * v0[:, None, :]
                + u[None, :, None] * A[:, None, :] - w[None, :, None] * Bv[:, None, :]) / rho[None, :, None]
        k = wt[None] * np.einsum("pqd,pqd->pq", diff, diff) ** expo
        blocks = np.einsum("pq,qk,ql->pkl", k, d, d) * (2 * J1 * J2)[:, None, None]
        r, c = _block_indices(nd, nd)
        _scatter(B, r, c, blocks)


def _interaction_2d(mesh: Mesh, s: float, quad: QuadConfig) -> np.ndarray:
    V, cells = mesh.vertices, mesh.cells
    N = mesh.n_vertices
    area = mesh.cell_measures()
    B = np.zeros((N, N))
    _identical_2d(B, V, cells, area, s, quad.angular)
    ti, tj, cnt = _touching_pairs(mesh)
    _vertex_pairs_2d(B, V, cells, (ti[cnt == 1], tj[cnt == 1]), s, quad.singular)
    _edge_pairs_2d(B, V, cells, (ti[cnt == 2], tj[cnt == 2]), s, quad.singular, quad.chunk)

    si, sj = _separated_pairs(mesh, ti, tj)
    if not len(si):
        return B
    centroid = V[cells].mean(axis=1)
    dist = np.linalg.norm(centroid[si] - centroid[sj], axis=1)
    near = dist < quad.near_factor * mesh.h
    for order, mask in ((quad.regular, near), (quad.far, ~near)):
        if not mask.any():
            continue
        bary, wref = collapsed_triangle(order)
        Phi = bary
        pts = np.einsum("qk,ekd->eqd", bary, V[cells])
        wts = area[:, None] * wref
        kappa = np.zeros((mesh.n_cells, len(wref)))
        I, J = si[mask], sj[mask]
        step = max(1, quad.chunk * 16 // len(wref) ** 2)
        for lo in range(0, len(I), step):
            a, b = I[lo:lo + step], J[lo:lo + step]
            _separated_contrib(B, pts[a], wts[a], pts[b], wts[b], Phi, cells[a], cells[b], s, 2,
                               kappa, kappa, a, b)
        _finish_kappa(B, cells, kappa, Phi)
    return B


def _ray_terms(X, P, tvec, nvec, lo, hi, s):
    """Boundary-integral contribution of straight boundary pieces to ρ.

    Piece e is the set P_e + τ t_e, τ ∈ [lo_e, hi_e] (bounds may be
    infinite), with outward normal n_e.  Arrays of piece data broadcast
    against the leading point axis of X.
    """
    rel = P - X[:, None, :]
    dist = np.einsum("ped,ped->pe", rel, np.broadcast_to(nvec, rel.shape))
    tau0 = -np.einsum("ped,ped->pe", rel, np.broadcast_to(tvec, rel.shape))
    beta_const = 0.5 * beta_fn(0.5, s + 0.5)

    def C(sig):
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = sig * sig / (sig * sig + dist * dist)
        frac = np.where(np.isfinite(frac), frac, 1.0)
        return np.sign(sig) * beta_const * betainc(0.5, s + 0.5, frac)

    absd = np.abs(dist)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(absd > 0, np.sign(dist) * absd ** (-2 * s) * (C(hi - tau0) - C(lo - tau0)), 0.0)
    return term.sum(axis=1) / (2 * s)


def _facet_frames(V, facets):
    P, Q = V[facets[:, 0]], V[facets[:, 1]]
    ell = np.linalg.norm(Q - P, axis=1)
    tvec = (Q - P) / ell[:, None]
    nvec = np.column_stack([tvec[:, 1], -tvec[:, 0]])
    return P, tvec, nvec, ell


def complement_density_2d(points, V, facets, s: float):
    """ρ(x) for points inside a polygon with outward oriented boundary edges."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    P, tvec, nvec, ell = _facet_frames(V, facets)
    return _ray_terms(X, P[None], tvec[None], nvec[None], np.zeros((1, len(ell))), ell[None], s)


def _complement_2d(mesh: Mesh, s: float, quad: QuadConfig) -> np.ndarray:
    """∫ φ_k φ_l ρ over Ω.

    Cells touching ∂Ω are split at the centroid.  On sub-triangles with a
    boundary edge or a boundary vertex, ρ is written as ρ_loc + (ρ - ρ_loc),
    where ρ_loc is the exact contribution of the boundary line (or the two
    boundary rays meeting at the vertex).  ρ_loc carries the whole
    singularity and is integrated with a Gauss-Jacobi rule matched to it;
    the smooth remainder uses Gauss-Legendre.
    """
    V, cells = mesh.vertices, mesh.cells
    N = mesh.n_vertices
    facets = mesh.boundary_facets
    area = mesh.cell_measures()
    n = quad.complement
    on_bnd = mesh.boundary
    FP, Ft, Fn, Fl = _facet_frames(V, facets)
    facet_id = {tuple(sorted(f)): i for i, f in enumerate(facets.tolist())}
    f_in = np.full(N, -1)
    f_out = np.full(N, -1)
    f_in[facets[:, 1]] = np.arange(len(facets))
    f_out[facets[:, 0]] = np.arange(len(facets))
    corner = _corner_vertices(mesh)
    touches = on_bnd[cells].any(axis=1)
    inf = np.inf

    bary, wref = collapsed_triangle(n)
    tg, wg = gauss_legendre_01(n)
    GG = [a.ravel() for a in np.meshgrid(tg, tg, indexing="ij")]
    wGG = np.outer(wg, wg).ravel()
    tj, wj = gauss_jacobi_01(n, -2 * s)
    JU, JT = (a.ravel() for a in np.meshgrid(tj, tg, indexing="ij"))
    # Gauss-Jacobi integrates t^beta g(t): fold t^{-beta} into the weights
    wJ = np.outer(wj, wg).ravel() * JU ** (2 * s)
    tv, wv = gauss_jacobi_01(n, 1 - 2 * s)
    VR, VT = (a.ravel() for a in np.meshgrid(tv, tg, indexing="ij"))
    wV = np.outer(wv, wg).ravel() * VR ** (2 * s - 1)
    eye = np.eye(3)
    third = np.full(3, 1 / 3)

    bcs, wts, owner, mode, rays = [], [], [], [], []
    no_ray = (np.zeros(2), np.zeros(2), np.zeros(2), 0.0, 0.0)

    def add(bc, w, e, m, ray_pair):
        bcs.append(bc)
        wts.append(w)
        owner.append(np.full(len(w), e))
        mode.append(np.full(len(w), m))
        rays.append([ray_pair] * len(w))

    def line_rays(f):
        return ((FP[f], Ft[f], Fn[f], -inf, inf), no_ray)

    def vertex_rays(v):
        a, b = f_in[v], f_out[v]
        return ((FP[a], Ft[a], Fn[a], -inf, Fl[a]), (FP[b], Ft[b], Fn[b], 0.0, inf))

    for e in range(len(cells)):
        if not touches[e]:
            add(bary, area[e] * wref, e, 0, (no_ray, no_ray))
            continue
        c = cells[e]
        sub = 2 * area[e] / 3  # twice the area of each centroid sub-triangle
        for k in range(3):
            i0, i1 = c[k], c[(k + 1) % 3]
            b0, b1 = eye[k], eye[(k + 1) % 3]
            f = facet_id.get(tuple(sorted((i0, i1))))
            if f is not None:
                # X = (1-u)[(1-t) P0 + t P1] + u * centroid on pieces of the edge,
                # graded towards corners where the remainder is still singular
                for P0, P1, frac in _graded_pieces(b0, b1, corner[i0], corner[i1], _CORNER_LEVELS):
                    for U, T, w, m in ((JU, JT, wJ, 1), (GG[0], GG[1], wGG, 2)):
                        bc = ((1 - U) * (1 - T))[:, None] * P0 + ((1 - U) * T)[:, None] * P1 + U[:, None] * third
                        add(bc, w * (1 - U) * sub * frac, e, m, line_rays(f))
            elif on_bnd[i0] or on_bnd[i1]:
                v = i0 if on_bnd[i0] else i1
                if v != i0:
                    b0, b1 = b1, b0
                # collapse onto the boundary vertex b0: X = b0 + r[(1-θ)(b1-b0) + θ(c-b0)]
                for R_, T, w, m in ((VR, VT, wV, 1), (GG[0], GG[1], wGG, 2)):
                    bc = (1 - R_)[:, None] * b0 + (R_ * (1 - T))[:, None] * b1 + (R_ * T)[:, None] * third
                    add(bc, w * R_ * sub, e, m, vertex_rays(v))
            else:
                add(bary @ np.stack([b0, b1, third]), wref * sub / 2, e, 0, (no_ray, no_ray))

    bc = np.concatenate(bcs)
    w = np.concatenate(wts)
    owner = np.concatenate(owner)
    mode = np.concatenate(mode)
    ray = [r for chunk in rays for r in chunk]
    pts = np.einsum("qk,qkd->qd", bc, V[cells[owner]])

    rho = np.zeros(len(pts))
    full = mode != 1
    step = max(1, 2_000_000 // max(1, len(facets)))
    idx = np.flatnonzero(full)
    for lo in range(0, len(idx), step):
        sl = idx[lo:lo + step]
        rho[sl] = complement_density_2d(pts[sl], V, facets, s)
    loc = np.flatnonzero(mode != 0)
    if len(loc):
        RP = np.array([[r[j][0] for j in range(2)] for r in (ray[i] for i in loc)])
        Rt = np.array([[r[j][1] for j in range(2)] for r in (ray[i] for i in loc)])
        Rn = np.array([[r[j][2] for j in range(2)] for r in (ray[i] for i in loc)])
        Rlo = np.array([[r[j][3] for j in range(2)] for r in (ray[i] for i in loc)])
        Rhi = np.array([[r[j][4] for j in range(2)] for r in (ray[i] for i in loc)])
        rloc = _ray_terms(pts[loc], RP, Rt, Rn, Rlo, Rhi, s)
        rho[loc] += np.where(mode[loc] == 1, rloc, -rloc)
    vals = (w * rho)[:, None, None] * bc[:, :, None] * bc[:, None, :]
    nodes = cells[owner]
    R = np.zeros((N, N))
    r, cc = _block_indices(nodes, nodes)
    _scatter(R, r, cc, vals)
    return R


_CORNER_LEVELS = 12


def _corner_vertices(mesh: Mesh) -> np.ndarray:
    """Boundary vertices where the two incident boundary edges are not collinear."""
    V, facets = mesh.vertices, mesh.boundary_facets
    d = V[facets[:, 1]] - V[facets[:, 0]]
    d /= np.linalg.norm(d, axis=1)[:, None]
    incoming = np.zeros((mesh.n_vertices, 2))
    outgoing = np.zeros((mesh.n_vertices, 2))
    incoming[facets[:, 1]] = d
    outgoing[facets[:, 0]] = d
    cross = np.abs(incoming[:, 0] * outgoing[:, 1] - incoming[:, 1] * outgoing[:, 0])
    return mesh.boundary & (cross > 1e-10)


def _graded_pieces(P0, P1, corner0, corner1, levels):
    """Split the segment P0-P1 (barycentric) geometrically towards corner ends.

    Returns (start, end, length fraction) triples covering the segment.
    """
    if corner0 and corner1:
        mid = 0.5 * (P0 + P1)
        return ([(a, b, 0.5 * f) for a, b, f in _graded_pieces(P0, mid, True, False, levels)]
                + [(a, b, 0.5 * f) for a, b, f in _graded_pieces(mid, P1, False, True, levels)])
    if corner1:
        return [(b, a, f) for a, b, f in _graded_pieces(P1, P0, True, False, levels)]
    if not corner0:
        return [(P0, P1, 1.0)]
    pieces = []
    end, frac = P1, 1.0
    for _ in range(levels):
        mid = 0.5 * (P0 + end)
        pieces.append((mid, end, 0.5 * frac))
        end, frac = mid, 0.5 * frac
    pieces.append((P0, end, frac))
    return pieces


# ---------------------------------------------------------------------------
# bundles and export


@dataclass(eq=False)
class GramSet:
    """All discrete inner products of one discretization."""

    M_omega: sp.csr_matrix  # consistent spatial mass
    A_s: np.ndarray  # full W inner product
    M_t: sp.csr_matrix
    M_U: SpaceTimeMass
    m_omega: np.ndarray  # lumped spatial mass (vertex weights)
    m_t: np.ndarray  # lumped time weights

    @property
    def lumped_U(self) -> np.ndarray:
        return np.outer(self.m_t, self.m_omega).ravel()


def build_gram_set(mesh: Mesh, grid: TimeGrid, kernel: FractionalKernel, quad: QuadConfig | None = None) -> GramSet:
    Mx = assemble_mass(mesh)
    Mt = assemble_time_mass(grid)
    return GramSet(
        M_omega=Mx,
        A_s=assemble_fractional_stiffness(mesh, kernel, quad),
        M_t=Mt,
        M_U=SpaceTimeMass(Mt, Mx),
        m_omega=lumped_mass(mesh),
        m_t=lumped_time_weights(grid),
    )


def write_coo(matrix, path, *, drop_zeros: bool = True) -> None:
    """Write ``row col value`` lines (0-based) for a dense or sparse matrix."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            if drop_zeros and v == 0:
                continue
            fh.write(f"{r} {c} {float(v)!r}\n")


def read_coo(path) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    shape = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                if shape is None:
                    parts = line[1:].split()
                    if len(parts) == 2:
                        shape = (int(parts[0]), int(parts[1]))
                continue
            if line.strip():
                r, c, v = line.split()
                rows.append(int(r))
                cols.append(int(c))
                vals.append(float(v))
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)
