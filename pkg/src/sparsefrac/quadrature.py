"""Reference quadrature rules shared by the assembly routines."""

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@lru_cache(maxsize=None)
def gauss_legendre_01(n: int):
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def gauss_jacobi_01(n: int, beta: float):
    """Nodes/weights on [0, 1] for the weight t**beta.

    For beta <= -1 the weighted integral diverges at t = 0; a Gauss-Legendre
    rule applied to t**beta * g is returned instead, which is finite but only
    a truncation of the divergent value.
    """
    if beta <= -1.0:
        x, w = gauss_legendre_01(n)
        return x, w * x ** beta
    x, w = roots_jacobi(n, 0.0, beta)
    return 0.5 * (x + 1.0), w * 0.5 ** (1.0 + beta)


@lru_cache(maxsize=None)
def collapsed_triangle(n: int):
    """Tensor Gauss rule collapsed onto the reference triangle.

    Returns barycentric coordinates (n*n, 3) and weights summing to 1, so a
    physical rule is obtained by scaling with the triangle area.
    """
    x, wx = gauss_legendre_01(n)
    a, b = np.meshgrid(x, x, indexing="ij")
    wa, wb = np.meshgrid(wx, wx, indexing="ij")
    # (a, b) -> point a*(1-b) e1 + a*b e2 of the triangle (0,0),(1,0),(0,1)
    l1 = (a * (1 - b)).ravel()
    l2 = (a * b).ravel()
    bary = np.column_stack([1.0 - l1 - l2, l1, l2])
    w = (wa * wb * a).ravel() * 2.0
    return bary, w
