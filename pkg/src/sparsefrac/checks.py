"""Fast named invariant checks, shared by ``sparsefrac check`` and the tests.

Every check returns (ok, detail).  ``run_checks`` runs them all and never
raises: an exception inside a check counts as a failure with its message.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.integrate import quad

from .fracnorm import FractionalKernel, assemble_fractional_stiffness, assemble_mass, lumped_mass
from .mesh import DofMap, build_interval_mesh, build_square_mesh, build_time_grid
from .problem import IterateState, f_grad, f_value, make_problem
from .smoothing import G, G_grad, SmoothingParams, majorizer_gap
from .subqp import NewtonConfig, brute_force_oracle, fb, solve_subproblem, subproblem_value


def hat_diagonal_oracle(s: float) -> float:
    """‖φ‖²_W of the middle hat on the 3-node mesh of (-1, 1), by adaptive quadrature.

    With a(z) = ∫ φ(x) φ(x+z) dx the zero-extended double integral over ℝ×ℝ
    is 2 ∫_0^∞ z^{-1-2s} 2 (a(0) - a(z)) dz; a vanishes for z ≥ 2, so the tail
    is closed form.
    """
    hat = lambda x: max(0.0, 1.0 - abs(x))

    def a(z):
        return quad(lambda x: hat(x) * hat(x + z), -1, 1, points=[0, -z, 1 - z, -1 - z],
                    epsabs=1e-14, epsrel=1e-14)[0]

    a0 = a(0.0)
    head = quad(lambda z: z ** (-1 - 2 * s) * 2 * (a0 - a(z)), 0, 2, points=[1],
                epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    tail = 2 * a0 * 2 ** (-2 * s) / (2 * s)
    return 2.0 / 3.0 + 0.5 * FractionalKernel(s, 1).c_ds * 2 * (head + tail)


def check_kernel_inequality(n=100_000, seed=0):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(scale=3, size=(2, n))
    a[: n // 10] = b[: n // 10]  # equal pairs
    lhs = (np.maximum(a, 0) - np.maximum(b, 0)) * (a - b)
    bad = int(np.sum(lhs > (a - b) ** 2))
    return bad == 0, f"{bad} violations of (a+ - b+)(a - b) <= (a - b)^2 over {n} pairs"


def check_fb_soundness(n=100_000, seed=1):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, n))
    zero_a = rng.random(n) < 0.5
    # complementary pairs: one entry 0, the other nonnegative
    ca = np.where(zero_a, 0.0, np.abs(a))
    cb = np.where(zero_a, np.abs(b), 0.0)
    ok_zero = np.max(np.abs(fb(ca, cb))) <= 1e-15
    # non-complementary pairs: a negative entry or both strictly positive
    nz = ~((a >= 0) & (b >= 0) & (a * b == 0))
    ok_nonzero = bool(np.all(fb(a[nz], b[nz]) != 0))
    return bool(ok_zero and ok_nonzero), f"zero on complementary pairs: {ok_zero}; nonzero elsewhere: {ok_nonzero}"


def check_psi_majorizer(seed=2):
    rng = np.random.default_rng(seed)
    params = SmoothingParams(0.3, 0.1)
    w_ref, w = rng.normal(size=(2, 2000)) * 0.3
    gap = majorizer_gap(params, w_ref, w, np.ones(2000))
    pointwise = [majorizer_gap(params, w_ref[i:i + 1], w[i:i + 1], np.ones(1)) for i in range(200)]
    ok = gap >= 0 and min(pointwise) >= -1e-15
    return ok, f"tangent majorizer gap {gap:.3e}, min pointwise {min(pointwise):.1e}"


def check_G_grad(seed=3):
    rng = np.random.default_rng(seed)
    mesh = build_interval_mesh(-1, 1, 9)
    params = SmoothingParams(0.01, 0.05)
    w = rng.normal(size=9) * 0.3 + 0.2
    h = rng.normal(size=9)
    t = 1e-6
    fd = (G(params, w + t * h, mesh) - G(params, w - t * h, mesh)) / (2 * t)
    an = float(G_grad(params, w, mesh) @ h)
    rel = abs(fd - an) / max(abs(an), 1e-300)
    return rel <= 1e-5, f"relative central-difference error {rel:.2e} (limit 1e-5)"


def _tiny_problem(seed, N=3, M=2, gamma=1.0, p=0.5):
    rng = np.random.default_rng(seed)
    mesh = build_interval_mesh(-1, 1, N)
    grid = build_time_grid(0.5, M)
    u_d = rng.normal(size=N * M)
    return make_problem(mesh, grid, alpha=1.0 + rng.random(), beta=0.1 + rng.random(), gamma=gamma, p=p,
                        s=0.1, a=1.0 + 10 * rng.random(), u_d=u_d), rng


def check_f_grad(seed=4):
    spec, rng = _tiny_problem(seed, N=5, M=3)
    u = rng.normal(size=spec.M * spec.N)
    h = rng.normal(size=u.size)
    t = 1e-5
    fd = (f_value(spec, u + t * h) - f_value(spec, u - t * h)) / (2 * t)
    an = float(spec.mU @ (f_grad(spec, u) * h))
    rel = abs(fd - an) / max(abs(an), 1e-300)
    return rel <= 1e-7, f"relative central-difference error {rel:.2e} (limit 1e-7)"


def check_hat_stiffness():
    s = 0.1
    A = assemble_fractional_stiffness(build_interval_mesh(-1, 1, 3), FractionalKernel(s, 1))
    err = abs(A[1, 1] - hat_diagonal_oracle(s))
    return err <= 1e-8, f"|A[1,1] - oracle| = {err:.2e} (limit 1e-8)"


def check_stiffness_structure():
    mesh = build_square_mesh((-1.0, 1.0), 4)
    A, M, B, R = assemble_fractional_stiffness(mesh, FractionalKernel(0.1, 2), parts=True)
    sym = float(np.max(np.abs(A - A.T)))
    kernel = float(np.max(np.abs(B.sum(axis=1))))
    lam_min = float(np.linalg.eigvalsh(A).min())
    one = np.ones(mesh.n_vertices)
    ok = sym == 0.0 and kernel < 1e-12 and lam_min > 0 and one @ A @ one > one @ (M @ one)
    return ok, f"asymmetry {sym:.1e}, |B 1| {kernel:.1e}, min eigenvalue {lam_min:.3e}"


def check_mass_totals():
    m1 = build_interval_mesh(-1, 1, 11)
    m2 = build_square_mesh((-1.0, 1.0), 5)
    t1 = assemble_mass(m1).sum()
    t2 = assemble_mass(m2).sum()
    ok = abs(t1 - 2) < 1e-12 and abs(t2 - 4) < 1e-12 and abs(lumped_mass(m2).sum() - 4) < 1e-12
    return ok, f"mass totals {t1:.15f}, {t2:.15f}"


def check_dofmap():
    d = DofMap(7, 5)
    i, j = np.meshgrid(np.arange(7), np.arange(5), indexing="ij")
    ii, jj = d.unflatten(d.flatten(i.ravel(), j.ravel()))
    ok = np.array_equal(ii, i.ravel()) and np.array_equal(jj, j.ravel())
    return bool(ok), "flatten/unflatten round trip"


def check_oracle_equivalence(n=5, seed=5):
    cfg = NewtonConfig(tol_F=1e-12)
    worst_c, worst_v = 0.0, 0.0
    for k in range(n):
        spec, rng = _tiny_problem(seed + k)
        st = IterateState.zeros(spec.N, spec.M)
        st.u = rng.normal(size=spec.M * spec.N)
        st.w = np.abs(st.u.reshape(spec.M, spec.N)).max(axis=0) + 0.1 * rng.random(spec.N)
        eps, L = 0.1, 1.0 + 4 * rng.random()
        new, _ = solve_subproblem(spec, eps, st, L, cfg)
        u, w = brute_force_oracle(spec, eps, st, L)
        worst_c = max(worst_c, np.abs(new.u - u).max(), np.abs(new.w - w).max())
        worst_v = max(worst_v, abs(subproblem_value(spec, eps, st, L, new.u, new.w)
                                   - subproblem_value(spec, eps, st, L, u, w)))
    ok = worst_c <= 1e-6 and worst_v <= 1e-9
    return ok, f"{n} instances: coefficient gap {worst_c:.1e}, objective gap {worst_v:.1e}"


CHECKS = [
    ("kernel_inequality", check_kernel_inequality),
    ("fb_soundness", check_fb_soundness),
    ("psi_majorizer", check_psi_majorizer),
    ("G_grad_central_difference", check_G_grad),
    ("f_grad_central_difference", check_f_grad),
    ("hat_stiffness_oracle", check_hat_stiffness),
    ("stiffness_structure_2d", check_stiffness_structure),
    ("mass_totals", check_mass_totals),
    ("dofmap_round_trip", check_dofmap),
    ("subproblem_oracle", check_oracle_equivalence),
]


def run_checks(names=None):
    """List of (name, ok, detail, seconds) for the selected checks."""
    out = []
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail, time.perf_counter() - t0))
    return out
