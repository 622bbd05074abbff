import numpy as np
import pytest
from scipy.linalg import expm

from symctl.errors import SchemaError
from symctl.geometry import Ellipsoid, Hyperrectangle
from symctl.problems import (
    builtin_double_integrator,
    builtin_nonlinear_example,
    dump_problem,
    load_problem,
    parse_override,
    parse_problem_text,
    problem_from_spec,
    problem_hash,
    shipped_problems,
)

MINIMAL = """
schema_version = 1
name = "scalar"

[dynamics]
type = "affine"
state_dim = 1
input_dim = 1
A = [[2.0]]
B = [[1.0]]

[sets]
state = { type = "box", lower = [-1.0], upper = [1.0] }
input = { type = "box", lower = [-1.0], upper = [1.0] }
initial = { type = "box", lower = [-1.0], upper = [1.0] }
safe = { type = "box", lower = [-1.0], upper = [1.0] }

[problem]
kind = "safety"
"""


def load_text(text, overrides=None):
    spec, raw = parse_problem_text(text, overrides)
    return problem_from_spec(spec, raw)


def test_shipped_problems_listed():
    assert {"nonlinear.toml", "double_integrator.toml", "dcdc.toml", "unicycle.toml"} <= set(shipped_problems())


def test_nonlinear_file_matches_builtin(rng):
    prob, solver = load_problem("nonlinear.toml")
    ref = builtin_nonlinear_example()
    assert solver.solver == "lazy-ellipsoid"
    X = rng.uniform(-20, 20, (200, 2))
    U = rng.uniform(-10, 10, (200, 2))
    assert np.allclose(prob.system.nominal_map(X, U), ref.system.nominal_map(X, U), rtol=1e-14)
    _, J1 = prob.system.linearized_map(X, U)
    _, J2 = ref.system.linearized_map(X, U)
    assert np.allclose(J1, J2)
    assert np.array_equal(prob.system.input_matrix, np.eye(2))
    h = np.array([0.3, 0.2])
    assert np.all(prob.system.error_bound_map(h, U[0]) >= ref.system.error_bound_map(h, U[0]) - 1e-15)
    assert isinstance(prob.initial_set, Ellipsoid) and prob.obstacles[0].shape[0, 0] == 0.02
    x, u = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert prob.stage_cost(x, u) == pytest.approx(x @ x + u @ u + 1)


def test_double_integrator_file_matches_builtin(rng):
    prob, _ = load_problem("double_integrator.toml")
    ref = builtin_double_integrator()
    X = rng.uniform(-2, 2, (50, 2))
    U = rng.uniform(-1, 1, (50, 1))
    assert np.allclose(prob.system.nominal_map(X, U), ref.system.nominal_map(X, U))
    assert not prob.system.error_bound_heuristic


def test_skeletons_need_parameters():
    with pytest.raises(SchemaError, match="tau"):
        load_problem("dcdc.toml")


DCDC_PARAMS = {
    "tau": 0.5, "noise": [0.0, 0.0],
    "A1": [[-0.0167, 0.0], [0.0, -0.0142]], "b1": [0.3333, 0.0],
    "A2": [[-0.0183, -0.0499], [0.8271, -0.0142]], "b2": [0.3333, 0.0],
    "x_lower": [0.5, 4.5], "x_upper": [1.6, 6.0],
    "safe_lower": [0.65, 4.95], "safe_upper": [1.65, 5.95],
    "eta_half": [0.01, 0.01],
}


def test_dcdc_with_parameters_switches_modes():
    params = dict(DCDC_PARAMS, x_upper=[1.7, 6.0])
    prob, solver = load_problem("dcdc.toml", params)
    A1 = np.array(params["A1"])
    b1 = np.array(params["b1"])
    x = np.array([1.0, 5.0])
    got = prob.system.nominal_map(x, np.array([0.0]))
    # exact flow of the affine field over one step
    aug = np.zeros((3, 3))
    aug[:2, :2], aug[:2, 2] = A1, b1
    exact = (expm(aug * 0.5) @ np.append(x, 1.0))[:2]
    assert np.allclose(got, exact, atol=1e-10)
    assert not np.allclose(got, prob.system.nominal_map(x, np.array([1.0])))
    assert prob.kind == "safety" and solver.grid.state_half_lengths == [0.01, 0.01]


def test_sets_outside_state_set_rejected():
    with pytest.raises(SchemaError, match="safe"):
        load_problem("dcdc.toml", DCDC_PARAMS)


def test_unicycle_builtin_with_parameters():
    params = {
        "tau": 0.3, "x_lower": [0.0, 0.0, -3.5], "x_upper": [10.0, 10.0, 3.5],
        "u_lower": [-1.0, -1.0], "u_upper": [1.0, 1.0],
        "initial_lower": [0.4, 0.4, 0.0], "initial_upper": [0.4, 0.4, 0.0],
        "target_lower": [9.0, 0.0, -3.5], "target_upper": [9.5, 0.5, 3.5],
        "eta_half": [0.1, 0.1, 0.1], "mu_half": [0.15, 0.15],
    }
    prob, _ = load_problem("unicycle.toml", params)
    assert prob.system.error_bound_heuristic
    x = prob.system.nominal_map(np.array([1.0, 1.0, 0.0]), np.array([1.0, 0.0]))
    assert x == pytest.approx([1.3, 1.0, 0.0])


@pytest.mark.parametrize("patch, where", [
    (("[problem]", "[problem]\nbogus = 1"), "problem"),
    (("kind = \"safety\"", "kind = \"liveness\""), "kind"),
    (("upper = [1.0] }\ninput", "upper = [0.5] }\ninput"), "sets"),
    (("schema_version = 1", "schema_version = 2"), "schema_version"),
    (("A = [[2.0]]", "A = [[2.0, 1.0]]"), "dynamics"),
])
def test_schema_errors_name_location(patch, where):
    text = MINIMAL.replace(*patch)
    assert text != MINIMAL
    with pytest.raises(SchemaError) as info:
        load_text(text)
    assert where in str(info.value)


def test_negative_half_lengths_rejected():
    text = MINIMAL.replace('safe = { type = "box", lower = [-1.0], upper = [1.0] }',
                          'safe = { type = "box", center = [0.0], half_lengths = [-0.5] }')
    with pytest.raises(SchemaError, match="half"):
        load_text(text)


def test_parameter_overrides_and_parse():
    text = MINIMAL.replace("A = [[2.0]]", 'A = "$a"') + "\n[parameters]\na = [[2.0]]\n"
    prob, _ = load_text(text)
    assert prob.system.nominal_map(np.array([0.5]), np.array([0.0]))[0] == pytest.approx(1.0)
    prob, _ = load_text(text, dict([parse_override("a=[[0.5]]")]))
    assert prob.system.nominal_map(np.array([0.5]), np.array([0.0]))[0] == pytest.approx(0.25)
    with pytest.raises(SchemaError):
        parse_override("novalue")


def test_dump_round_trip_and_hash():
    spec, raw = parse_problem_text(MINIMAL)
    again, raw2 = parse_problem_text(dump_problem(raw))
    assert again == spec
    assert problem_hash(raw) == problem_hash(raw2)


def test_state_cost_folds_into_weights():
    text = MINIMAL + "\n[cost.transition]\noffset = 1.0\n[cost.state]\nweight = [[3.0]]\noffset = 0.5\n"
    prob, _ = load_text(text)
    Q, R, off = prob.cost_weights
    assert Q[0, 0] == 3.0 and off == 1.5
    assert prob.stage_cost(np.array([2.0]), np.array([1.0])) == pytest.approx(12 + 1.5)


def test_box_center_form():
    text = MINIMAL.replace('initial = { type = "box", lower = [-1.0], upper = [1.0] }',
                          'initial = { type = "box", center = [0.0], half_lengths = [0.5] }')
    prob, _ = load_text(text)
    assert prob.initial_set == Hyperrectangle([0.0], [0.5])
