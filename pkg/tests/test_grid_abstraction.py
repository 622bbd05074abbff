import numpy as np
import pytest

from symctl.errors import ConfigurationError, SizeCapError
from symctl.geometry import Ellipsoid, Hyperrectangle, UniformGrid
from symctl.grid_abstraction import (
    GridAbstractionParams,
    GrowthSpec,
    build_grid_abstraction,
    estimate_size,
    make_grid,
    sampled_hessian_remainder,
)
from symctl.problems import affine_system, builtin_double_integrator, builtin_nonlinear_example
from symctl.symbolic import check_frr
from symctl.synthesis import AbstractProblem, domain_volume, solve_safety


def scalar(a, b=1.0):
    return affine_system([[a]], [[b]])


def params_1d(lo, hi, h, inputs_h=0.5, U=(-1.0, 1.0), **kw):
    X = Hyperrectangle.from_bounds([lo], [hi])
    Uset = Hyperrectangle.from_bounds([U[0]], [U[1]])
    return GridAbstractionParams(make_grid(X, [h]), make_grid(Uset, [inputs_h], anchor="center"),
                                 input_set=Uset, **kw), X


def test_identity_single_cell_self_loops():
    X = Hyperrectangle.from_bounds([0.0, 0.0], [1.0, 1.0])
    sys = affine_system(np.eye(2), np.zeros((2, 1)))
    U = Hyperrectangle.from_bounds([-1.0], [1.0])
    p = GridAbstractionParams(make_grid(X, [0.5, 0.5]), make_grid(U, [0.5], anchor="center"), input_set=U)
    model, q = build_grid_abstraction(sys, p, X)
    assert model.num_states == 1 and model.num_inputs == 3
    assert model.transitions.tolist() == [[0, 0, 0], [0, 1, 0], [0, 2, 0]]


def test_contraction_hand_computed_successors():
    # cell [0.5, 1] under x+ = 0.5 x maps to [0.25, 0.5]
    p, X = params_1d(-1.0, 1.0, 0.25, U=(0.0, 0.0))
    model, q = build_grid_abstraction(scalar(0.5, 0.0), p, X)
    top = int(q.resolve_many([[0.75]])[0])
    succ = model.successors(top, 0).tolist()
    assert succ == [int(q.resolve_many([[0.3]])[0]), top]
    assert q.cell(succ[0]).lower[0] == pytest.approx(0.0)


def test_estimate_size():
    X = Hyperrectangle.from_bounds([0, 0], [1, 1])
    U = Hyperrectangle.from_bounds([-1.0], [1.0])
    p = GridAbstractionParams(make_grid(X, [0.05, 0.05]), make_grid(U, [0.25]), input_set=U)
    assert tuple(estimate_size(p)) == (100, 400)
    sliver = Hyperrectangle.from_bounds([0.01], [0.02])
    empty = GridAbstractionParams(make_grid(X, [0.05, 0.05]), UniformGrid([0.0], [0.1], U), input_set=sliver)
    assert tuple(estimate_size(empty)) == (100, 0)
    huge = GridAbstractionParams(make_grid(Hyperrectangle.from_bounds([0] * 8, [1] * 8), [1e-4] * 8),
                                 make_grid(U, [0.25]), input_set=U)
    assert estimate_size(huge).saturated


def test_estimate_matches_built_counts_3d():
    X = Hyperrectangle.from_bounds([-1, -1, -1], [1, 1, 1])
    U = Hyperrectangle.from_bounds([-0.2], [0.2])
    sys = affine_system(0.5 * np.eye(3), np.ones((3, 1)))
    p = GridAbstractionParams(make_grid(X, [0.1, 0.2, 0.25]), make_grid(U, [0.1], anchor="center"), input_set=U)
    est = estimate_size(p)
    model, _ = build_grid_abstraction(sys, p, X)
    assert (est.cells, est.cell_input_pairs) == (model.build_stats["cells"], model.build_stats["cell_input_pairs"])


def test_size_cap_refusal():
    p, X = params_1d(-1.0, 1.0, 0.01, cells_cap=10)
    with pytest.raises(SizeCapError) as info:
        build_grid_abstraction(scalar(0.5), p, X)
    assert info.value.estimate.cells == 100


def test_prior_and_threads_do_not_change_transitions():
    prob = builtin_double_integrator()
    U = prob.input_set
    base = dict(state_grid=make_grid(prob.state_set, [0.05, 0.05]),
                input_grid=make_grid(U, [0.1], anchor="center"), input_set=U)
    m1, _ = build_grid_abstraction(prob.system, GridAbstractionParams(**base), prob.state_set)
    m2, _ = build_grid_abstraction(prob.system, GridAbstractionParams(**base, stability_prior=False), prob.state_set)
    m3, _ = build_grid_abstraction(prob.system, GridAbstractionParams(**base, threads=3), prob.state_set)
    assert np.array_equal(m1.transitions, m2.transitions)
    assert np.array_equal(m1.transitions, m3.transitions)
    assert m1.build_stats["candidates_examined"] < m2.build_stats["candidates_examined"]


def test_out_of_domain_images_block_inputs():
    p, X = params_1d(-1.0, 1.0, 0.125)
    model, q = build_grid_abstraction(scalar(2.0), p, X)
    # from cell [0.75, 1] only u = -1 keeps 2x + u inside [-1, 1]
    s = int(q.resolve_many([[0.9]])[0])
    assert [model.input_of[u][0] for u in model.available_inputs(s)] == [-1.0]


def test_obstacle_cells_are_excluded_and_avoided():
    prob = builtin_double_integrator()
    obstacle = Hyperrectangle.from_bounds([0.5, -0.3], [0.9, 0.3])
    U = prob.input_set
    p = GridAbstractionParams(make_grid(prob.state_set, [0.1, 0.1]), make_grid(U, [0.25], anchor="center"),
                              obstacle_sets=[obstacle], input_set=U)
    model, q = build_grid_abstraction(prob.system, p, prob.state_set)
    assert model.build_stats["excluded_cells"] > 0
    assert q.resolve([0.7, 0.0]) == []
    assert all(not (Hyperrectangle(c, q.grid.cell_half_lengths).contains(np.array([0.7, 0.0])))
               for c in q.centers())
    r = check_frr(prob.concrete(), model, q, 3000, 0)
    assert r.passed


def test_ellipsoid_obstacle_outer_approximation():
    X = Hyperrectangle.from_bounds([-1, -1], [1, 1])
    grid = make_grid(X, [0.1, 0.1])
    obs = Ellipsoid([0.0, 0.0], np.eye(2) / 0.3**2)
    from symctl.grid_abstraction import excluded_cells

    mask = excluded_cells(grid, [obs])
    centers = grid.all_centers()
    rng = np.random.default_rng(0)
    pts = obs.sample(rng, 5000)
    hit = np.unique(grid.linear_index(grid.index_of(pts)))
    assert mask[hit].all()
    assert not mask[np.all(np.abs(centers) > 0.5, axis=1)].any()


def test_sampled_growth_bound_flagged_and_dominates_analytic():
    prob = builtin_nonlinear_example()
    sys = prob.system
    beta = sampled_hessian_remainder(sys.linearized_map, prob.state_set, prob.input_set, 200, 0)
    for h in ([0.1, 0.1], [0.5, 0.25], [1.0, 1.0]):
        assert np.all(beta(np.array(h), np.zeros(2)) >= sys.error_bound_map(np.array(h), np.zeros(2)) * 0.99)
    spec = GrowthSpec(state_domain=prob.state_set, input_domain=prob.input_set)
    _, heuristic = spec.realize(sys.linearized_map, 2, 2)
    assert heuristic


def test_nonlinear_grid_is_frr_sound():
    prob = builtin_nonlinear_example()
    U = prob.input_set
    p = GridAbstractionParams(make_grid(prob.state_set, [0.5, 0.5]), make_grid(U, [2.5, 2.5], anchor="center"),
                              input_set=U)
    model, q = build_grid_abstraction(prob.system, p, prob.state_set)
    assert check_frr(prob.concrete(), model, q, 10000, 3).passed


def test_no_inputs_in_input_set_is_an_error():
    X = Hyperrectangle.from_bounds([0.0], [1.0])
    U = Hyperrectangle.from_bounds([-1.0], [1.0])
    sliver = Hyperrectangle.from_bounds([0.01], [0.02])
    p = GridAbstractionParams(make_grid(X, [0.25]), UniformGrid([0.0], [0.1], U), input_set=sliver)
    with pytest.raises(ConfigurationError):
        build_grid_abstraction(scalar(0.5), p, X)


def safe_measure(h):
    p, X = params_1d(-1.0, 1.0, h)
    model, q = build_grid_abstraction(scalar(2.0), p, X)
    ap = AbstractProblem(model, "safety", [], safe_ids=np.arange(model.num_states))
    return domain_volume(solve_safety(ap), q, X)


def test_refinement_never_shrinks_safe_region():
    coarse, fine = safe_measure(0.1), safe_measure(0.05)
    assert fine >= coarse - 1e-12
    assert 2.0 - fine <= 4 * 0.05
