"""Fixed-point iteration for the coupled system.

The map is exercised three ways: decoupled generators must reduce to the
scalar solver bit for bit, the certified parameter set must keep every
iterate inside its ball, and a genuinely coupled pair must contract with a
small ratio and land on a fixed point.
"""

import math

import numpy as np
import pytest

from dqbsde.condexp import RegressionBasis
from dqbsde.constants import StructuralConstants, local_parameters
from dqbsde.paths import make_grid, simulate_brownian
from dqbsde.picard import (
    PicardConvergenceError,
    SystemGenerator,
    SystemGeneratorError,
    ball_membership,
    contraction_probe,
    gamma_map,
    initial_state,
    local_solve,
    make_ball_state,
    state_distance,
    zero_state,
)
from dqbsde.scalarq import pure_quadratic, solve_scalar

BASIS = RegressionBasis("bins", 16)


def quad_part(t, z):
    return 0.5 * np.sum(z * z, axis=1)


def zero_coupling(t, y, z, w):
    return np.zeros_like(y)


@pytest.fixture(scope="module")
def cert():
    """Certified regime: epsilon exceeds the horizon outright."""
    sc = StructuralConstants(growth_c=0.2, gamma=1.0, alpha=0.0, n=1, d=1,
                             horizon=0.01, xi_bound=0.3)
    params = local_parameters(sc)
    assert params.epsilon >= sc.horizon
    ens = simulate_brownian(make_grid(0.0, 0.01, 8), 6000, 1, seed=6003)
    gen = SystemGenerator(
        constants=sc,
        f_parts=(quad_part,),
        coupling=lambda t, y, z, w: 0.2 * np.tanh(y),
    )
    xi = 0.3 * np.cos(ens.values[:, -1, :1])
    return sc, params, ens, gen, xi


@pytest.fixture(scope="module")
def coupled():
    """Two components feeding each other through y and the off z row."""
    sc = StructuralConstants(growth_c=1.0, gamma=1.0, alpha=0.0, n=2, d=1,
                             horizon=0.5, xi_bound=0.5)

    def coupling(t, y, z, w):
        out = np.empty_like(y)
        out[:, 0] = 0.25 * y[:, 1] + 0.25 * np.tanh(z[:, 1, 0])
        out[:, 1] = 0.25 * y[:, 0] + 0.25 * np.tanh(z[:, 0, 0])
        return out

    gen = SystemGenerator(constants=sc, f_parts=(quad_part, quad_part),
                          coupling=coupling)
    ens = simulate_brownian(make_grid(0.0, 0.5, 32), 8000, 1, seed=6002)
    w = ens.values[:, -1, 0]
    xi = np.stack([0.5 * np.cos(w), 0.5 * np.sin(w)], axis=1)
    return sc, ens, gen, xi


def test_generator_rejects_undeclared_coupling_growth():
    sc = StructuralConstants(growth_c=1.0, gamma=1.0, alpha=0.0, n=2, d=1,
                             horizon=1.0, xi_bound=0.5)
    with pytest.raises(SystemGeneratorError, match="growth bound"):
        SystemGenerator(constants=sc, f_parts=(quad_part, quad_part),
                        coupling=lambda t, y, z, w: 10.0 * y)
    with pytest.raises(SystemGeneratorError, match="quadratic parts"):
        SystemGenerator(constants=sc, f_parts=(quad_part,),
                        coupling=zero_coupling)
    with pytest.raises(SystemGeneratorError, match="shape"):
        SystemGenerator(constants=sc, f_parts=(quad_part, quad_part),
                        coupling=lambda t, y, z, w: y[:, :1])


def test_initial_and_zero_states(coupled):
    sc, ens, gen, xi = coupled
    state = initial_state(ens, xi, BASIS)
    assert np.array_equal(state.u[-1], xi)
    cap = np.max(np.abs(xi), axis=0)
    assert np.all(np.abs(state.u) <= cap[None, None, :] + 1e-12)
    assert state.v_bmo_sq == 0.0
    assert not state.v.any()
    zs = zero_state(ens, sc.n, BASIS)
    assert zs.u_sup == 0.0 and zs.v_bmo_sq == 0.0


def test_ball_state_validation(coupled):
    sc, ens, gen, xi = coupled
    steps, m = ens.grid.steps, ens.n_paths
    good_u = np.zeros((steps + 1, m, 2))
    good_v = np.zeros((steps, m, 2, 1))
    with pytest.raises(ValueError, match="u shape"):
        make_ball_state(ens, good_u[:-1], good_v, BASIS)
    with pytest.raises(ValueError, match="v shape"):
        make_ball_state(ens, good_u, good_v[:, :, :1], BASIS)
    bad = good_u.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        make_ball_state(ens, bad, good_v, BASIS)


def test_decoupled_map_ignores_input_state(coupled):
    # coupling that never reads z: perturbing the v rows of the input
    # candidate cannot move the output at all
    sc0 = StructuralConstants(growth_c=0.5, gamma=1.0, alpha=0.0, n=2, d=1,
                              horizon=0.5, xi_bound=0.5)
    gen = SystemGenerator(
        constants=sc0, f_parts=(quad_part, quad_part),
        coupling=lambda t, y, z, w: 0.3 * np.tanh(y[:, ::-1]),
    )
    _, ens, _, xi = coupled
    base = initial_state(ens, xi, BASIS)
    rng = np.random.Generator(np.random.Philox(key=5))
    noisy_v = rng.standard_normal(base.v.shape)
    noisy = make_ball_state(ens, base.u, noisy_v, BASIS)
    out_a, diag_a = gamma_map(base, gen, xi, ens, BASIS)
    out_b, diag_b = gamma_map(noisy, gen, xi, ens, BASIS)
    assert np.array_equal(out_a.u, out_b.u)
    assert np.array_equal(out_a.v, out_b.v)
    assert np.array_equal(diag_a.y0, diag_b.y0)


def test_zero_coupling_reduces_to_scalar_solver(coupled):
    sc0 = StructuralConstants(growth_c=0.5, gamma=1.0, alpha=0.0, n=1, d=1,
                              horizon=0.5, xi_bound=0.5)
    gen = SystemGenerator(constants=sc0, f_parts=(quad_part,),
                          coupling=zero_coupling)
    _, ens, _, xi2 = coupled
    xi = xi2[:, :1]
    sol, trace = local_solve(gen, xi, ens, BASIS, tol=1e-6, max_iter=10)
    # once the (state-independent) driver is frozen, iteration 2 replays
    # iteration 1 bit for bit, so the residual is exactly zero
    assert sol.converged
    assert sol.iterations == 2
    assert sol.residual == 0.0
    assert sol.in_ball is None
    scalar = solve_scalar(ens, xi[:, 0],
                          gen.scalar_generators[0], BASIS)
    assert np.array_equal(sol.y[:, :, 0], scalar.y)
    assert np.array_equal(sol.z[:, :, 0, :], scalar.z)
    assert sol.y0[0] == scalar.y0


def test_certified_iterates_stay_in_ball(cert):
    sc, params, ens, gen, xi = cert
    sol, trace = local_solve(gen, xi, ens, BASIS, tol=1e-5, max_iter=20,
                             params=params)
    assert sol.converged
    assert sol.in_ball is True
    assert all(row.in_ball for row in trace.rows)
    assert trace.noncontractive_iterations == ()
    # the scheme's clip envelope sits far inside the certified sup bound here
    assert float(np.max(np.abs(sol.y))) <= params.y_sup_bound + 1e-9


def test_certified_random_couplings_stay_in_ball(cert):
    sc, params, ens, gen, xi = cert
    rng = np.random.Generator(np.random.Philox(key=414))
    for trial in range(3):
        a, b = rng.uniform(-1.0, 1.0, 2)

        def coupling(t, y, z, w, a=a, b=b):
            return 0.2 * np.tanh(a * y + b * np.sin(w[:, :1]))

        g = SystemGenerator(constants=sc, f_parts=(quad_part,),
                            coupling=coupling)
        sol, trace = local_solve(g, xi, ens, BASIS, tol=1e-5, max_iter=20,
                                 params=params)
        assert sol.converged and sol.in_ball
        assert all(row.in_ball for row in trace.rows)


def test_ball_membership_margins(cert):
    sc, params, ens, gen, xi = cert
    steps, m = ens.grid.steps, ens.n_paths
    A = params.ball_radius_sq

    def const_state(q, u_level=0.0):
        u = np.full((steps + 1, m, 1), u_level)
        v = np.full((steps, m, 1, 1), q)
        return make_ball_state(ens, u, v, BASIS)

    inside = const_state(math.sqrt(0.5 * A / sc.horizon))
    member, margins = ball_membership(inside, params)
    assert member
    assert margins.v_margin == pytest.approx(0.5 * A, rel=1e-4)
    assert margins.u_log_margin == pytest.approx(params.log_sup_exp_cap)

    outside = const_state(math.sqrt(2.0 * A / sc.horizon))
    member, margins = ball_membership(outside, params)
    assert not member
    assert margins.v_margin == pytest.approx(-A, rel=1e-4)

    # drive the exponent 20% past the cap
    u_level = 1.2 * params.log_sup_exp_cap * (1.0 - sc.alpha) / (2.0 * sc.n * sc.gamma)
    tall = const_state(0.0, u_level=u_level)
    member, margins = ball_membership(tall, params)
    assert not member
    assert margins.u_log_margin < 0.0
    assert margins.u_margin < 0.0


def test_coupled_solve_contracts_to_fixed_point(coupled):
    sc, ens, gen, xi = coupled
    tol = 5e-5
    sol, trace = local_solve(gen, xi, ens, BASIS, tol=tol, max_iter=30)
    assert sol.converged
    assert trace.noncontractive_iterations == ()
    dists = [max(r.y_dist_sup, r.z_dist_bmo) for r in trace.rows]
    assert all(b < a for a, b in zip(dists, dists[1:]))
    ratios = [r.ratio for r in trace.rows[1:]]
    assert all(r < 0.5 for r in ratios)
    # one more application of the map barely moves the returned pair
    state = make_ball_state(ens, sol.y, sol.z, BASIS)
    replay, _ = gamma_map(state, gen, xi, ens, BASIS)
    assert state_distance(ens, state, replay, BASIS) <= 2.0 * tol


def test_contraction_probe_cases(cert):
    sc, params, ens, gen, xi = cert
    a = initial_state(ens, xi, BASIS)
    b = zero_state(ens, 1, BASIS)
    report = contraction_probe(a, b, gen, xi, ens, BASIS)
    assert not report.identity_input
    assert report.input_distance > 0.0
    assert report.ratio == report.output_distance / report.input_distance
    assert report.ratio < 0.5
    same = contraction_probe(a, a, gen, xi, ens, BASIS)
    assert same.identity_input
    assert math.isnan(same.ratio)


def test_iteration_budget_exhaustion(coupled):
    sc, ens, gen, xi = coupled
    with pytest.raises(PicardConvergenceError, match="no convergence") as exc:
        local_solve(gen, xi, ens, BASIS, tol=1e-13, max_iter=3)
    assert len(exc.value.trace.rows) == 3


def test_local_solve_rejects_unknown_init(coupled):
    sc, ens, gen, xi = coupled
    with pytest.raises(ValueError, match="init"):
        local_solve(gen, xi, ens, BASIS, init="banana")
