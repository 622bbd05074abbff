import numpy as np
import pytest
from scipy.linalg import expm

from symctl.errors import ConfigurationError, DomainExitError, NumericalBlowupError
from symctl.geometry import Hyperrectangle
from symctl.grid_abstraction import GrowthSpec
from symctl.system import (
    ConstantController,
    DisturbancePolicy,
    StaticController,
    TransitionControlSystem,
    closed_loop_trajectory,
    rk4_step,
    rk4_step_with_jacobian,
    sample_system,
    validate_trajectory,
)


def exp_field(x, u):
    return x


def test_rk4_fourth_order():
    errs = []
    for dt in (0.5, 0.25, 0.125, 0.0625):
        x = np.array([1.0])
        for _ in range(int(round(1.0 / dt))):
            x = rk4_step(exp_field, x, None, dt)
        errs.append(abs(x[0] - np.e))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 16) <= 0.2 * 16)


def test_rk4_linear_against_matrix_exponential():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    B = np.array([[0.0], [1.0]])

    def field(x, u):
        return x @ A.T + u @ B.T

    x0, u = np.array([0.4, -1.0]), np.array([0.5])
    x = rk4_step(field, x0, u, 0.5, substeps=50)
    # exact zero-order hold via the augmented exponential
    aug = np.zeros((3, 3))
    aug[:2, :2], aug[:2, 2:] = A, B
    E = expm(aug * 0.5)
    exact = E[:2, :2] @ x0 + E[:2, 2:] @ u
    assert np.allclose(x, exact, atol=1e-9)


def test_rk4_jacobian_matches_finite_differences():
    def field(x, u):
        return np.stack([x[..., 1], -np.sin(x[..., 0]) + u[..., 0]], axis=-1)

    def jac(x, u):
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -np.cos(x[..., 0])
        return J

    x0, u = np.array([0.3, -0.2]), np.array([0.1])
    _, Phi = rk4_step_with_jacobian(field, jac, x0, u, 0.3, substeps=3)
    eps = 1e-6
    fd = np.column_stack([
        (rk4_step(field, x0 + eps * e, u, 0.3, 3) - rk4_step(field, x0 - eps * e, u, 0.3, 3)) / (2 * eps)
        for e in np.eye(2)
    ])
    assert np.allclose(Phi, fd, atol=1e-8)


def test_rk4_batched_matches_single():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((7, 2))
    U = rng.standard_normal((7, 1))

    def field(x, u):
        return np.stack([x[..., 1] * u[..., 0], -x[..., 0] ** 3], axis=-1)

    batch = rk4_step(field, X, U, 0.1, 4)
    single = np.array([rk4_step(field, X[i], U[i], 0.1, 4) for i in range(7)])
    assert np.array_equal(batch, single)


def test_rk4_blowup_names_stage():
    def field(x, u):
        return x ** 8

    with pytest.raises(NumericalBlowupError) as info, np.errstate(over="ignore"):
        rk4_step(field, np.array([1e40]), None, 1.0)
    assert info.value.stage in ("k1", "k2", "k3", "k4")


def test_rk4_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        rk4_step(exp_field, np.ones(1), None, 0.0)


def test_sample_system_needs_jacobian():
    with pytest.raises(ConfigurationError):
        sample_system(exp_field, None, 0.1, np.zeros(1), GrowthSpec.exact_linear(), state_dim=1, input_dim=1)


def test_growth_spec_rejects_bad_bounds():
    def lin(x, u):
        return x, np.eye(1)

    with pytest.raises(ConfigurationError):
        GrowthSpec("user_growth_bound", bound=lambda h, u: np.asarray(h) + 1.0).realize(lin, 1, 1)
    with pytest.raises(ConfigurationError):
        GrowthSpec("user_growth_bound", bound=lambda h, u: -np.asarray(h)).realize(lin, 1, 1)


def scalar_system():
    X = Hyperrectangle.from_bounds([-1.0], [1.0])
    U = Hyperrectangle.from_bounds([-1.0], [1.0])
    return TransitionControlSystem(X, U, lambda x, u: 0.5 * np.asarray(x) + np.asarray(u), [0.01])


def test_closed_loop_stops_and_validates():
    sys = scalar_system()
    ctrl = StaticController(lambda x: [np.array([0.0])])
    traj = closed_loop_trajectory(sys, ctrl, lambda x, u: 1.0, [0.8], lambda x: abs(x[0]) < 0.1,
                                  disturbance="random:4")
    assert traj.status == "stopped"
    assert traj.total_cost == traj.length
    assert validate_trajectory(sys, traj) == []


def test_closed_loop_zero_steps_when_already_stopped():
    sys = scalar_system()
    traj = closed_loop_trajectory(sys, ConstantController([0.0]), lambda x, u: 1.0, [0.0], lambda x: True)
    assert traj.length == 0 and traj.status == "stopped"


def test_closed_loop_domain_exit_carries_partial_trajectory():
    sys = scalar_system()
    ctrl = StaticController(lambda x: [np.array([0.0])], lambda x: abs(x[0]) > 0.3)
    with pytest.raises(DomainExitError) as info:
        closed_loop_trajectory(sys, ctrl, lambda x, u: 1.0, [0.9], lambda x: False)
    assert info.value.trajectory.length == 2


def test_validate_flags_wrong_successor():
    sys = scalar_system()
    traj = closed_loop_trajectory(sys, ConstantController([0.0]), lambda x, u: 1.0, [0.8], lambda x: False,
                                  max_steps=3)
    assert traj.status == "timeout"
    traj.states[2] += 1.0
    assert any("outside" in msg for msg in validate_trajectory(sys, traj))


def test_lexicographic_selection():
    ctrl = StaticController(lambda x: [np.array([1.0, 0.0]), np.array([0.0, 5.0]), np.array([0.0, 2.0])])
    assert ctrl.select(np.zeros(1)).tolist() == [0.0, 2.0]


def test_disturbance_policies_are_seeded():
    a = DisturbancePolicy.parse("random:3")
    b = DisturbancePolicy.parse("random:3")
    w = np.array([0.1, 0.2])
    assert np.array_equal(a.draw(w), b.draw(w))
    v = DisturbancePolicy.parse("worst_sampled:1").draw(w)
    assert np.allclose(np.abs(v), w)
    with pytest.raises(ConfigurationError):
        DisturbancePolicy.parse("gaussian")
