import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from symctl.errors import ConstructionError
from symctl.geometry import Ellipsoid, Hyperrectangle, UniformGrid
from symctl.grid_abstraction import GridAbstractionParams, build_grid_abstraction, make_grid
from symctl.problems import builtin_double_integrator
from symctl.symbolic import (
    AbstractController,
    CoverQuantizer,
    GridQuantizer,
    SymbolicModel,
    add_transitions_bulk,
    check_frr,
    check_mcr,
    load_model,
    model_files_hash,
    save_model,
)
from symctl.system import TransitionControlSystem

triples = st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2), st.integers(0, 5)), max_size=40)


@settings(max_examples=150, deadline=None)
@given(triples)
def test_indices_agree_with_list_scan(ts):
    model = SymbolicModel(6, 3, ts)
    unique = sorted(set(ts))
    assert [tuple(t) for t in model.transitions.tolist()] == unique
    for s in range(6):
        for u in range(3):
            expect = sorted(t for (a, b, t) in unique if a == s and b == u)
            assert model.successors(s, u).tolist() == expect
        assert sorted(model.available_inputs(s).tolist()) == sorted({b for (a, b, _) in unique if a == s})
        src, inp = model.predecessors(s)
        assert sorted(zip(src.tolist(), inp.tolist())) == sorted({(a, b) for (a, b, t) in unique if t == s})
    assert int(model.out_degrees().sum()) == model.num_transitions


@settings(max_examples=60, deadline=None)
@given(triples, st.randoms(use_true_random=False))
def test_insertion_order_irrelevant(ts, rnd):
    shuffled = list(ts)
    rnd.shuffle(shuffled)
    a = add_transitions_bulk(SymbolicModel(6, 3), ts)
    b = add_transitions_bulk(SymbolicModel(6, 3, ts[:3]), shuffled)
    assert np.array_equal(a.transitions, b.transitions)


def test_duplicates_and_empty_batch():
    m = SymbolicModel(2, 1, [(0, 0, 1), (0, 0, 1)])
    assert m.num_transitions == 1
    assert add_transitions_bulk(m, []) is m


def test_out_of_range_names_triple():
    with pytest.raises(ConstructionError, match=r"\(0, 0, 7\)"):
        SymbolicModel(3, 1, [(0, 0, 1), (0, 0, 7)])


def test_controller_drops_empty_entries_and_checks_model():
    m = SymbolicModel(3, 2, [(0, 0, 1), (1, 1, 2)])
    c = AbstractController({0: [0], 1: [], 2: [1]})
    assert c.domain == {0, 2}
    assert c.check_against(m) == [(2, 1)]


def test_grid_quantizer_consistency_fuzz(rng):
    X = Hyperrectangle.from_bounds([-1, -2], [3, 2])
    grid = UniformGrid([-0.9, -1.9], [0.1, 0.1], X)
    ids = np.arange(grid.num_cells)
    q = GridQuantizer(grid, ids)
    pts = X.sample(rng, 100_000)
    got = q.resolve_many(pts)
    assert np.all(got >= 0)
    c = q.centers(got)
    inside = np.all((pts >= c - grid.cell_half_lengths) & (pts < c + grid.cell_half_lengths), axis=1)
    on_upper_face = np.any(pts >= X.upper, axis=1)
    assert np.all(inside | on_upper_face)
    assert q.resolve(X.upper) != []


def test_cover_quantizer_consistency_fuzz(rng):
    cells = [Ellipsoid(rng.uniform(-1, 1, 2), np.diag(rng.uniform(1, 10, 2))) for _ in range(20)]
    cells.append(Hyperrectangle([0.0, 0.0], [0.2, 0.3]))
    q = CoverQuantizer(cells)
    pts = rng.uniform(-1.5, 1.5, (100_000, 2))
    member = np.column_stack([c.contains(pts) for c in cells])
    for k in rng.choice(len(pts), 3000, replace=False):
        assert q.resolve(pts[k]) == np.flatnonzero(member[k]).tolist()


def test_serialization_round_trip(tmp_path, rng):
    model = random_model(rng, 12, 3)
    model.cell_of = [Hyperrectangle(rng.standard_normal(2), rng.uniform(0.1, 1, 2)) for _ in range(6)] + \
        [Ellipsoid(rng.standard_normal(2), np.diag(rng.uniform(1, 3, 2))) for _ in range(6)]
    model.input_of = [rng.standard_normal(2) for _ in range(3)]
    digest = save_model(model, tmp_path, 2, 2)
    loaded, header, ok = load_model(tmp_path)
    assert ok and header["content_sha256"] == digest == model_files_hash(tmp_path)
    assert np.array_equal(loaded.transitions, model.transitions)
    for a, b in zip(loaded.cell_of, model.cell_of):
        assert type(a) is type(b)
        assert np.array_equal(a.center, b.center)
    for a, b in zip(loaded.input_of, model.input_of):
        assert np.array_equal(a, b)
    (tmp_path / "model_transitions.csv").write_text((tmp_path / "model_transitions.csv").read_text() + "0,0,0\n")
    assert load_model(tmp_path)[2] is False


@pytest.fixture(scope="module")
def di_grid():
    prob = builtin_double_integrator()
    params = GridAbstractionParams(make_grid(prob.state_set, [0.08, 0.08]), make_grid(prob.input_set, [0.25], anchor="center"),
                                   input_set=prob.input_set)
    model, q = build_grid_abstraction(prob.system, params, prob.state_set)
    return prob, model, q


def test_frr_passes_on_constructed_grid(di_grid):
    prob, model, q = di_grid
    r = check_frr(prob.concrete(), model, q, 5000, 0)
    assert r.passed and r.samples == 5000 and not r.vacuous


def test_frr_zero_samples_is_vacuous(di_grid):
    prob, model, q = di_grid
    r = check_frr(prob.concrete(), model, q, 0, 0)
    assert r.vacuous and r.to_dict()["samples"] == 0


def test_frr_detects_deleted_nominal_transition(di_grid):
    prob, model, q = di_grid
    # delete the successor hit by the center of some cell: always realizable
    p = model.num_pairs // 2
    s, u = int(model.pair_src[p]), int(model.pair_input[p])
    x_next = prob.system.nominal_map(q.centers([s])[0], model.input_of[u])
    t = int(q.resolve_many(x_next)[0])
    keep = ~np.all(model.transitions == [s, u, t], axis=1)
    mutated = model.with_transitions(model.transitions[keep])
    r = check_frr(prob.concrete(), mutated, q, 200, 1, focus=[(s, u)])
    assert r.violation_count >= 1
    w = r.violations[0]
    assert w["kind"] == "successor" and w["state"] == s and w["related"] == t
    assert q.cell(s).contains(np.array(w["x1"]), tol=1e-12)


def test_frr_detects_unavailable_input(di_grid):
    prob, model, q = di_grid
    narrow = TransitionControlSystem(prob.state_set, Hyperrectangle([0.0], [0.1]), prob.system.nominal_map,
                                     np.zeros(2))
    r = check_frr(narrow, model, q, 500, 0)
    assert any(v["kind"] == "input" for v in r.violations)


def shift_system():
    """Cells [k, k+1) of [0, 5]; x+ = x + u with u in {-1, 0, 1}."""
    X = Hyperrectangle.from_bounds([0.0], [5.0])
    U = Hyperrectangle.from_bounds([-1.0], [1.0])
    concrete = TransitionControlSystem(X, U, lambda x, u: np.asarray(x) + np.asarray(u), [0.0])
    cells = [Hyperrectangle([k + 0.5], [0.5]) for k in range(5)]
    inputs = [np.array([-1.0]), np.array([0.0]), np.array([1.0])]
    ts = [(k, j, k + d) for k in range(5) for j, d in enumerate((-1, 0, 1)) if 0 <= k + d < 5]
    model = SymbolicModel(5, 3, ts, cells, inputs)
    return concrete, model, CoverQuantizer(cells, kind="box_cover")


def test_mcr_identity_like_abstraction():
    concrete, model, q = shift_system()
    r = check_mcr(concrete, model, q, lambda x1, x2, u2: [model.input_of[u2]], 3000, 0)
    assert r.passed


def test_mcr_flags_interface_outside_inputs():
    concrete, model, q = shift_system()
    r = check_mcr(concrete, model, q, lambda x1, x2, u2: [2.0 * model.input_of[u2]], 300, 0)
    assert any(v["kind"] == "interface" for v in r.violations)


def test_mcr_flags_missing_successor():
    concrete, model, q = shift_system()
    r = check_mcr(concrete, model, q, lambda x1, x2, u2: [-model.input_of[u2]], 300, 0)
    assert any(v["kind"] == "relation" for v in r.violations)
