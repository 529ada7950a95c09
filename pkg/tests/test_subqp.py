import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsefrac.checks import _tiny_problem
from sparsefrac.problem import IterateState, u_norm2, w_norm2
from sparsefrac.subqp import (FB_KINK, NewtonConfig, brute_force_oracle, fb, fb_partials, kkt_norm,
                              solve_penalized_subproblem, solve_subproblem, stationarity_residual,
                              subproblem_data, subproblem_value)

TIGHT = NewtonConfig(tol_F=1e-12)


def base_state(spec, rng):
    st_ = IterateState.zeros(spec.N, spec.M)
    st_.u = rng.normal(size=spec.M * spec.N)
    st_.w = np.abs(st_.u.reshape(spec.M, spec.N)).max(axis=0)
    return st_


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_fb_zero_iff_complementary(a, b):
    comp = a >= 0 and b >= 0 and a * b == 0
    assert (fb(a, b) == 0) == comp


def test_fb_partials_and_kink():
    da, db = fb_partials(np.array([0.0, 3.0]), np.array([0.0, 4.0]))
    assert da[0] == db[0] == FB_KINK
    assert da[1] == pytest.approx(3 / 5 - 1) and db[1] == pytest.approx(4 / 5 - 1)
    h = 1e-7
    fd = (fb(3 + h, 4.0) - fb(3 - h, 4.0)) / (2 * h)
    assert fd == pytest.approx(da[1], rel=1e-6)


def test_newton_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(tol_F=0)
    with pytest.raises(ValueError):
        NewtonConfig(sigma=0.9)
    with pytest.raises(ValueError):
        NewtonConfig(backtrack=1.0)


def test_solution_satisfies_kkt():
    spec, rng = _tiny_problem(30, N=7, M=4)
    st_ = base_state(spec, rng)
    new, rep = solve_subproblem(spec, 0.1, st_, 2.0, TIGHT)
    assert rep.converged
    data = subproblem_data(spec, 0.1, st_, 2.0)
    assert kkt_norm(data, new.u, new.w, new.mu1, new.mu2) <= 1e-11
    assert new.feasibility_violation(spec.N) <= 1e-12
    assert new.mu1.max() <= 1e-11 and new.mu2.max() <= 1e-11


def test_inactive_entries_take_the_unconstrained_value():
    # where |u_ij| < w_i strictly the u-equation reduces to (α+L) u = L u_k - f'(u_k)
    spec, rng = _tiny_problem(31, N=7, M=4, gamma=0.0)
    st_ = base_state(spec, rng)
    L = 2.0
    new, _ = solve_subproblem(spec, 0.1, st_, L, TIGHT)
    free = (L * st_.u - spec.a * (st_.u - spec.u_d)) / (spec.alpha + L)
    slack = np.tile(new.w, spec.M) - np.abs(new.u)
    inactive = slack > 1e-8
    assert inactive.sum() >= 3
    assert np.allclose(new.u[inactive], free[inactive], atol=1e-8)


@pytest.mark.parametrize("seed", range(4))
def test_matches_brute_force_oracle(seed):
    spec, rng = _tiny_problem(40 + seed)
    st_ = base_state(spec, rng)
    L = 1.0 + 4 * rng.random()
    new, _ = solve_subproblem(spec, 0.1, st_, L, TIGHT)
    u, w = brute_force_oracle(spec, 0.1, st_, L)
    assert np.abs(new.u - u).max() <= 1e-6 and np.abs(new.w - w).max() <= 1e-6
    assert abs(subproblem_value(spec, 0.1, st_, L, new.u, new.w) - subproblem_value(spec, 0.1, st_, L, u, w)) <= 1e-9


def test_oracle_refuses_large_instances():
    spec, rng = _tiny_problem(50, N=7, M=3)
    with pytest.raises(ValueError):
        brute_force_oracle(spec, 0.1, base_state(spec, rng), 1.0)


def test_penalized_path_converges_linearly_in_delta():
    spec, rng = _tiny_problem(11, N=5, M=3)
    st_ = base_state(spec, rng)
    ref, _ = solve_subproblem(spec, 0.1, st_, 2.0, TIGHT)
    gaps = []
    for d in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5):
        pen = solve_penalized_subproblem(spec, 0.1, st_, 2.0, d, TIGHT)
        gaps.append(np.sqrt(u_norm2(spec, pen.u - ref.u) + w_norm2(spec, pen.w - ref.w)))
        assert pen.w.min() >= -1e-10
        assert pen.mu1.max() <= 0 and pen.mu2.max() <= 0
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    assert np.all(ratios > 5)
    with pytest.raises(ValueError):
        solve_penalized_subproblem(spec, 0.1, st_, 2.0, 0.0)


def test_stationarity_report_zero_state():
    spec, _ = _tiny_problem(60, gamma=0.0)
    spec = spec.with_params(u_d=np.zeros(spec.M * spec.N))
    rep = stationarity_residual(spec, IterateState.zeros(spec.N, spec.M))
    assert rep.residual == 0 and rep.complementarity == 0 and rep.lambda_gap == 0
    assert set(rep.as_dict()) >= {"residual", "lambda_gap", "lp_term"}
