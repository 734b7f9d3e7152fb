from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degenlab.game import GameSpec
from degenlab.geometry import IntervalSet
from degenlab.normopt import (
    DEFAULT_EPS,
    LeaderProblem,
    dual_J,
    dual_minimize,
    duality_check,
    game_followers,
    leader_follower_alternation,
    primal_norm,
    reach_zero_check,
    recover_leader,
    solve_normopt,
    weak_duality_violations,
)
from degenlab.pde import ContractError, TimeGrid

from instances import FULL, random_interval, system

seeds = st.integers(0, 2**32 - 1)


def one_mode(T=1.0, alpha=0.5):
    sys = system(alpha).truncate(1)
    grid = TimeGrid(T, 40)
    w = sys.eigenvalues[0]
    return LeaderProblem(sys, grid, FULL, [1.0]), (1 - np.exp(-w * T)) / w, np.exp(-w * T)


def random_problem(seed, alpha=0.5):
    rng = np.random.default_rng(seed)
    sys = system(alpha)
    return LeaderProblem(sys, TimeGrid(1.0, 30), random_interval(rng, 0.3), rng.standard_normal(sys.K))


@pytest.fixture(scope="module")
def solved():
    prob = random_problem(3)
    return prob, solve_normopt(prob)


def test_problem_contract():
    sys = system(0.5)
    with pytest.raises(ContractError):
        LeaderProblem(sys, TimeGrid(1.0, 10), FULL, np.ones(sys.K + 1))
    with pytest.raises(ContractError):
        LeaderProblem(sys, TimeGrid(1.0, 10), IntervalSet(), np.ones(2))
    prob = LeaderProblem(sys, TimeGrid(1.0, 10), FULL, np.ones(2))
    with pytest.raises(ContractError):
        dual_minimize(prob, [])
    with pytest.raises(ContractError):
        primal_norm(prob, delta=0.0)


def test_zero_data():
    sys = system(0.5)
    prob = LeaderProblem(sys, TimeGrid(1.0, 10), FULL, np.zeros(sys.K))
    assert dual_J(prob, np.ones(sys.K)) >= 0
    rep = solve_normopt(prob)
    assert rep.zero_case and rep.V == 0 and rep.N_primal == 0
    assert not np.any(rep.g_star.values)
    assert rep.reach_residual == 0 and rep.duality_gap == 0


def test_dual_at_zero_is_zero():
    prob = random_problem(0)
    assert dual_J(prob, np.zeros(prob.sys.K)) == 0.0


@pytest.mark.parametrize("T", [0.5, 1.0, 2.0])
def test_one_mode_closed_form(T):
    prob, beta, gamma = one_mode(T)
    sol = dual_minimize(prob)
    assert sol.z.zT_coeffs[0] == pytest.approx(-gamma / beta**2, rel=1e-8)
    assert sol.V == pytest.approx(-0.5 * gamma**2 / beta**2, rel=1e-8)
    g = recover_leader(prob, sol)
    assert np.allclose(g.cell_norms(), gamma / beta, rtol=1e-8)
    assert reach_zero_check(prob, g) <= 1e-8
    ps = primal_norm(prob)
    assert ps.feasible and ps.N == pytest.approx(gamma / beta, rel=1e-2)


def test_one_mode_dual_is_scalar_quadratic():
    prob, beta, gamma = one_mode()
    for c in (-3.0, -0.5, 0.0, 0.7):
        assert dual_J(prob, [c]) == pytest.approx(0.5 * c * c * beta * beta + c * gamma, rel=1e-12, abs=1e-15)


def test_minimizer_beats_probes(solved):
    prob, rep = solved
    z = rep.z_star.zT_coeffs
    rng = np.random.default_rng(0)
    assert rep.V <= 0
    for scale in (1e-6, 1e-3, 1.0):
        for _ in range(20):
            d = rng.standard_normal(z.size) * scale * (1 + np.linalg.norm(z))
            assert rep.V <= dual_J(prob, z + d) + 1e-12 * (1 + abs(rep.V))


def test_smoothing_path_monotone(solved):
    _, rep = solved
    vals = [v for _, v, _ in rep.eps_path]
    assert [e for e, _, _ in rep.eps_path][: len(DEFAULT_EPS)] == list(DEFAULT_EPS)
    assert all(b <= a + 1e-14 * abs(a) for a, b in zip(vals[:-1], vals[1:]))
    assert abs(vals[-1] - vals[-2]) <= 1e-8


def test_constant_norm_leader(solved):
    prob, rep = solved
    n = rep.g_star.cell_norms()
    assert np.ptp(n) <= 1e-12 * max(1.0, n.max())
    assert n[0] == pytest.approx(float(rep.z_star.cell_norms(prob).sum()), rel=1e-10)
    assert n[0] == pytest.approx(rep.N_dual, rel=1e-8)


def test_reach_and_duality(solved):
    prob, rep = solved
    assert rep.reach_residual <= 1e-6 * np.linalg.norm(prob.y0)
    assert rep.primal_feasible and rep.weak_duality_ok
    assert duality_check(rep) <= 5e-2
    doc = json.loads(json.dumps(rep.to_json()))
    assert doc["zero_case"] is False and len(doc["g_norms"]) == prob.grid.n_steps


@settings(max_examples=8, deadline=None)
@given(seed=seeds)
def test_weak_duality(seed):
    """Any terminal-feasible leader bounds the dual from below."""
    prob = random_problem(seed % 7)
    rng = np.random.default_rng(seed)
    ps = primal_norm(prob)
    probes = [rng.standard_normal(prob.sys.K) * 10.0 ** rng.uniform(-2, 3) for _ in range(20)]
    assert ps.feasible
    assert weak_duality_violations(prob, probes, ps.g, 1e-8 * np.linalg.norm(prob.y0) + ps.residual) == []


@pytest.mark.parametrize("s", [0.5, 2.0])
def test_scaling_law(s):
    prob = random_problem(5)
    a, b = solve_normopt(prob, probes=4), solve_normopt(prob.with_y0(s * prob.y0), probes=4)
    assert b.V == pytest.approx(s * s * a.V, rel=1e-8)
    assert b.N_dual == pytest.approx(abs(s) * a.N_dual, rel=1e-8)
    assert b.N_primal == pytest.approx(abs(s) * a.N_primal, rel=1e-4)


def _leader_game():
    sys = system(0.5)
    return GameSpec(
        sys=sys, grid=TimeGrid(1.0, 20), omega=IntervalSet.interval(0.1, 0.9),
        omega1=IntervalSet.interval(0.2, 0.4), omega2=IntervalSet.interval(0.5, 0.7),
        G1=FULL, G2=FULL, M0=1.0, M1=0.1, M2=0.1,
        y0=[1.0, 0.5, 0.2], yT1=[0.0, 1.0], yT2=[0.3, 0.2],
    )


def test_with_followers():
    spec = _leader_game()
    u1, u2 = game_followers(spec)
    assert np.allclose(u1.cell_norms(), spec.M1) and np.allclose(u2.cell_norms(), spec.M2)
    prob = LeaderProblem(spec.sys, spec.grid, spec.omega, spec.y0, u1, u2)
    rep = solve_normopt(prob, probes=4)
    assert rep.reach_residual <= 1e-6 and rep.duality_gap <= 5e-2


def test_alternation_runs():
    history = leader_follower_alternation(_leader_game(), rounds=2, verify_probes=10)
    assert len(history) == 2
    for rep, eq in history:
        assert rep.V <= 0 and eq.status in ("converged", "max_rounds", "unverified")
