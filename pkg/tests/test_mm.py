import numpy as np
import pytest

from sparsefrac.analysis import ExperimentSpec, build_problem, preset_config
from sparsefrac.checks import _tiny_problem
from sparsefrac.mesh import build_interval_mesh, build_square_mesh, build_time_grid
from sparsefrac.mm import (MmConfig, OuterLoopError, SolveReport, descent_condition, find_Lk, mm_solve,
                           support_fraction)
from sparsefrac.problem import IterateState


@pytest.fixture(scope="module")
def small():
    return build_problem(ExperimentSpec(overrides=dict(N=17)))


def test_config_validation():
    for bad in (dict(L=0), dict(b=1.0), dict(eps_decay=1.0), dict(eps0=1e-7), dict(max_outer=0)):
        with pytest.raises(ValueError):
            MmConfig(**bad)
    cfg = MmConfig(eps0=0.1, eps_decay=0.5, eps_min=0.01)
    assert cfg.eps(0) == 0.1 and cfg.eps(1) == 0.05 and cfg.eps(10) == 0.01


def test_descent_condition_identity(small):
    u = np.zeros(small.M * small.N)
    v = u + 0.1
    assert descent_condition(small, u, v, 12.5)
    assert not descent_condition(small, u, v, 12.4)
    assert not descent_condition(small, u, v, 1.0)
    assert descent_condition(small, u, u, 1e-3)


def test_find_Lk_returns_smallest_power(small):
    st = IterateState.zeros(small.N, small.M)
    L_k, new, _, trials = find_Lk(small, 0.1, st, MmConfig())
    assert L_k == 16.0 and trials == 5
    assert np.abs(new.u).max() > 0


def test_find_Lk_nondecreasing_in_a(small):
    st = IterateState.zeros(small.N, small.M)
    Ls = [find_Lk(small.with_params(a=a), 0.1, st, MmConfig())[0] for a in (2.0, 25.0, 50.0)]
    assert Ls == sorted(Ls) and Ls == [1.0, 16.0, 32.0]


def test_find_Lk_zero_step_accepts_first_trial():
    spec, _ = _tiny_problem(3)
    spec = spec.with_params(u_d=np.zeros(spec.M * spec.N))
    L_k, new, _, trials = find_Lk(spec, 0.1, IterateState.zeros(spec.N, spec.M), MmConfig())
    assert L_k == 1.0 and trials == 1 and not new.u.any()


def test_find_Lk_gives_up(small):
    with pytest.raises(OuterLoopError):
        find_Lk(small, 0.1, IterateState.zeros(small.N, small.M), MmConfig(max_l=2))


def test_support_fraction_examples():
    mesh = build_interval_mesh(-1, 1, 5)
    grid = build_time_grid(1.0, 3)
    assert support_fraction(np.zeros(15), mesh, grid) == (1.0, 1.0)
    assert support_fraction(np.ones(15), mesh, grid) == (0.0, 0.0)
    U = np.tile([0.0, 0.0, 0.0, 1.0, 1.0], 3)  # vanishes on (-1, 0)
    assert support_fraction(U, mesh, grid) == pytest.approx((0.5, 0.5))
    st, sx = support_fraction(U, mesh, grid, method="nodal")
    assert st == pytest.approx(0.625) and sx == pytest.approx(0.625)
    with pytest.raises(ValueError):
        support_fraction(U, mesh, grid, method="bogus")


def test_support_fraction_scale_and_2d():
    mesh = build_square_mesh((-1.0, 1.0), 3)
    grid = build_time_grid(1.0, 2)
    u = np.full(2 * 9, 1e-20)
    assert support_fraction(u, mesh, grid) == (0.0, 0.0)  # relative to its own maximum
    assert support_fraction(u, mesh, grid, scale=1.0) == (1.0, 1.0)


def test_solve_descends_and_converges(small):
    state, rep = mm_solve(small, preset_config())
    assert rep.converged
    slack = [r.descent_slack for r in rep.records]
    assert min(slack) >= -1e-8 * (1 + abs(rep.records[0].phi_eps))
    phis = [r.phi_eps for r in rep.records]
    assert all(b <= a + 1e-12 for a, b in zip(phis, phis[1:]))
    assert state.feasibility_violation(small.N) <= 1e-9
    assert 0 < rep.support_spatial < 1


def test_solve_is_deterministic(small):
    cfg = preset_config(max_outer=15)
    s1, r1 = mm_solve(small, cfg)
    s2, r2 = mm_solve(small, cfg)
    assert np.array_equal(s1.u, s2.u) and np.array_equal(s1.w, s2.w)
    assert r1.to_csv() == r2.to_csv()


def test_gamma_zero_has_no_zero_cells(small):
    state, rep = mm_solve(small.with_params(gamma=0.0), preset_config())
    assert rep.converged and rep.support_spacetime == 0.0
    assert not state.lam.any()


def test_unconverged_run_and_history(small, tmp_path):
    state, rep = mm_solve(small, preset_config(max_outer=3), keep_history=True)
    assert not rep.converged and len(rep.records) == 3 and len(rep.history) == 4
    assert "no convergence" in rep.message
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    rows = SolveReport.read_csv(path)
    assert [r["k"] for r in rows] == [0, 1, 2]
    assert rows[1]["phi_eps"] == rep.records[1].phi_eps
    bad = tmp_path / "bad.csv"
    bad.write_text("k,eps\n")
    with pytest.raises(ValueError):
        SolveReport.read_csv(bad)


def test_callback_sees_every_step(small):
    seen = []
    mm_solve(small, preset_config(max_outer=4), callback=lambda k, st, rec: seen.append(k))
    assert seen == [0, 1, 2, 3]
