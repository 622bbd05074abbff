"""Abstract problems, fixed-point synthesis and controller concretization."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from symctl.errors import ConfigurationError, DomainExitError, InfeasibleSpecError
from symctl.geometry import Ellipsoid, Hyperrectangle, Relation, disjoint, ellipsoid_contains_ellipsoid
from symctl.symbolic import AbstractController, GridQuantizer, SymbolicModel
from symctl.system import StaticController

BELLMAN_TOL = 1e-9


@dataclass
class ValueFunction:
    """Worst-case cost-to-go; ``inf`` where the target cannot be forced."""

    values: np.ndarray
    target_ids: np.ndarray
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __getitem__(self, state):
        return float(self.values[state])

    @property
    def domain(self):
        return np.flatnonzero(np.isfinite(self.values))


@dataclass
class AbstractProblem:
    """Specification over a symbolic model.

    ``stage_cost[p]`` is the cost of the model's ``p``-th ``(state, input)``
    pair (see ``SymbolicModel.pair_keys``).
    """

    model: SymbolicModel
    kind: str
    initial_ids: np.ndarray
    target_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    safe_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stage_cost: np.ndarray | None = None
    horizon: int | None = None

    def __post_init__(self):
        if self.kind not in ("reach_avoid", "safety"):
            raise ConfigurationError(f"unknown abstract problem kind {self.kind!r}")
        n = self.model.num_states
        for name in ("initial_ids", "target_ids", "safe_ids"):
            ids = np.unique(np.asarray(getattr(self, name), dtype=np.int64))
            if len(ids) and (ids[0] < 0 or ids[-1] >= n):
                raise ConfigurationError(f"{name} reference states outside 0..{n - 1}")
            setattr(self, name, ids)
        if self.stage_cost is None:
            self.stage_cost = np.ones(self.model.num_pairs)
        self.stage_cost = np.asarray(self.stage_cost, dtype=float)
        if self.stage_cost.shape != (self.model.num_pairs,):
            raise ConfigurationError("stage_cost must have one entry per (state, input) pair")
        if np.any(self.stage_cost < 0) or not np.all(np.isfinite(self.stage_cost)):
            raise ConfigurationError("stage costs must be finite and nonnegative")


# -- abstract problem ------------------------------------------------------

def _cells(model, quantizer):
    if isinstance(quantizer, GridQuantizer):
        return quantizer.centers(), quantizer.grid.cell_half_lengths
    return None, None


def _inner(region, model, quantizer):
    """Ids of cells contained in ``region``."""
    centers, h = _cells(model, quantizer)
    if centers is not None:
        if isinstance(region, Hyperrectangle):
            ok = np.all((centers - h >= region.lower) & (centers + h <= region.upper), axis=1)
            return np.flatnonzero(ok)
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * len(h), indexing="ij")).reshape(len(h), -1).T
        verts = centers[:, None, :] + signs[None] * h
        return np.flatnonzero(np.all(region.contains(verts), axis=1))
    ids = []
    for i in range(model.num_states):
        cell = model.cell_of[i]
        if isinstance(cell, Ellipsoid):
            inside = (ellipsoid_contains_ellipsoid(cell, region) if isinstance(region, Ellipsoid)
                      else region.contains_box(cell.bounding_box()))
        else:
            inside = (region.contains_box(cell) if isinstance(region, Hyperrectangle)
                      else bool(np.all(region.contains(cell.vertices()))))
        if inside:
            ids.append(i)
    return np.array(ids, dtype=np.int64)


def _outer(region, model, quantizer):
    """Ids of cells meeting ``region`` (undecided pairs count as meeting)."""
    centers, h = _cells(model, quantizer)
    if centers is not None:
        box = region if isinstance(region, Hyperrectangle) else region.bounding_box()
        near = np.all(np.abs(centers - box.center) <= h + box.half_lengths, axis=1)
        if isinstance(region, Hyperrectangle):
            return np.flatnonzero(near)
        return np.array([i for i in np.flatnonzero(near)
                         if disjoint(region, Hyperrectangle(centers[i], h)) is not Relation.DISJOINT],
                        dtype=np.int64)
    return np.array([i for i in range(model.num_states)
                     if disjoint(region, model.cell_of[i]) is not Relation.DISJOINT], dtype=np.int64)


def pair_stage_costs(problem, model: SymbolicModel, quantizer):
    """Worst case of the concrete stage cost over each cell x input pair.

    Grid cells: maximum over the cell vertices (exact for convex costs).
    Ellipsoid cells with local controllers: exact maximum of the quadratic
    cost under the cell's controller.
    """
    if model.num_pairs == 0:
        return np.zeros(0)
    if isinstance(quantizer, GridQuantizer):
        centers, h = quantizer.centers(), quantizer.grid.cell_half_lengths
        n = len(h)
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
        U = np.array([model.input_of[j] for j in range(model.num_inputs)], dtype=float)
        out = np.empty(model.num_pairs)
        src, inp = model.pair_src, model.pair_input
        chunk = 65536
        for s in range(0, model.num_pairs, chunk):
            sl = slice(s, s + chunk)
            verts = centers[src[sl]][:, None, :] + signs[None] * h
            u = np.broadcast_to(U[inp[sl]][:, None, :], verts.shape[:2] + (U.shape[1],))
            vals = np.asarray(problem.stage_cost(verts, u), dtype=float)
            out[sl] = np.broadcast_to(vals, verts.shape[:2]).max(axis=1)
        return out
    from symctl.ellipsoid_abstraction import LocalController, worst_stage_cost

    if problem.cost_weights is None:
        raise ConfigurationError("ellipsoid cells need a quadratic stage cost (cost weights)")
    out = np.empty(model.num_pairs)
    for p in range(model.num_pairs):
        cell = model.cell_of[int(model.pair_src[p])]
        ctrl = model.input_of[int(model.pair_input[p])]
        if not isinstance(ctrl, LocalController):
            raise ConfigurationError("ellipsoid cells expect local-controller inputs")
        out[p] = worst_stage_cost(cell, ctrl, problem.cost_weights)
    return out


def abstract_problem(concrete, model: SymbolicModel, quantizer) -> AbstractProblem:
    """Inner approximation of target and safe sets, outer approximation of the initial set."""
    initial = _outer(concrete.initial_set, model, quantizer)
    costs = pair_stage_costs(concrete, model, quantizer)
    if concrete.kind == "reach_avoid":
        target = _inner(concrete.target_set, model, quantizer)
        if len(target) == 0:
            raise InfeasibleSpecError("no abstract cell lies inside the target set; refine the grid")
        return AbstractProblem(model, "reach_avoid", initial, target_ids=target, stage_cost=costs,
                               horizon=concrete.time)
    safe = _inner(concrete.safe_set, model, quantizer)
    return AbstractProblem(model, "safety", initial, safe_ids=safe, stage_cost=costs, horizon=concrete.time)


# -- reach-avoid -----------------------------------------------------------

def _dijkstra(model: SymbolicModel, targets, stage):
    N = model.num_states
    V = np.full(N, np.inf)
    order = np.full(N, -1, dtype=np.int64)
    remaining = model.out_degrees().copy()
    heap = [(0.0, int(t)) for t in targets]
    V[targets] = 0.0
    heapq.heapify(heap)
    is_target = np.zeros(N, dtype=bool)
    is_target[targets] = True
    rank = 0
    pred_ptr, pred_pair, pair_src = model.pred_ptr, model.pred_pair, model.pair_src
    while heap:
        v, s = heapq.heappop(heap)
        if order[s] >= 0 or v > V[s]:
            continue
        order[s] = rank
        rank += 1
        for p in pred_pair[pred_ptr[s]:pred_ptr[s + 1]]:
            remaining[p] -= 1
            if remaining[p]:
                continue
            src = int(pair_src[p])
            if is_target[src] or order[src] >= 0:
                continue
            cand = stage[p] + v
            if cand < V[src]:
                V[src] = cand
                heapq.heappush(heap, (cand, src))
    return V, order


def _optimal_inputs(model, V, order, stage, states, tol=BELLMAN_TOL):
    table = {}
    for s in states:
        lo, hi = model.state_ptr[s], model.state_ptr[s + 1]
        best = []
        for p in range(lo, hi):
            succ = model.successor_ids[model.pair_ptr[p]:model.pair_ptr[p + 1]]
            if np.any(order[succ] < 0) or np.any(order[succ] >= order[s]):
                continue
            q = stage[p] + V[succ].max()
            if abs(q - V[s]) <= tol * max(1.0, abs(V[s])):
                best.append(int(model.pair_input[p]))
        table[int(s)] = best
    return table


def solve_reach_avoid(problem: AbstractProblem):
    """Worst-case shortest path to the target.

    ``V = 0`` on targets and ``V(x) = min_u [c(x, u) + max_{x' in F(x, u)} V(x')]``
    elsewhere. A pair's value becomes known once its last successor is
    finalized; since states are finalized in nondecreasing value, that last
    successor carries the maximum. The controller keeps every optimal input
    whose successors were all finalized earlier (so closed-loop runs make
    progress even with zero-cost inputs).

    With a finite horizon, only states whose shortest forced path has at most
    ``horizon`` steps are kept; the values then bound the cost of a
    controller restricted to depth-decreasing inputs, and states winning only
    beyond the horizon are flagged.
    """
    if problem.kind != "reach_avoid":
        raise ConfigurationError("solve_reach_avoid needs a reach_avoid problem")
    model, stage = problem.model, problem.stage_cost
    targets = problem.target_ids
    V, order = _dijkstra(model, targets, stage)
    if problem.horizon is None:
        non_target = np.setdiff1d(np.flatnonzero(np.isfinite(V)), targets)
        table = _optimal_inputs(model, V, order, stage, non_target)
        return AbstractController(table), ValueFunction(V, targets)
    return _solve_horizon(model, targets, stage, V, problem.horizon)


def _solve_horizon(model, targets, stage, V_unbounded, horizon):
    depth, _ = _dijkstra(model, targets, np.ones_like(stage))
    N = model.num_states
    V = np.full(N, np.inf)
    V[targets] = 0.0
    table = {}
    is_target = np.zeros(N, dtype=bool)
    is_target[targets] = True
    states = [s for s in np.argsort(depth, kind="stable") if np.isfinite(depth[s]) and not is_target[s]
              and depth[s] <= horizon]
    for s in states:
        cands = []
        for p in range(model.state_ptr[s], model.state_ptr[s + 1]):
            succ = model.successor_ids[model.pair_ptr[p]:model.pair_ptr[p + 1]]
            if np.all(depth[succ] < depth[s]):
                cands.append((stage[p] + V[succ].max(), int(model.pair_input[p])))
        best = min(c for c, _ in cands)
        V[s] = best
        table[int(s)] = [u for c, u in cands if abs(c - best) <= BELLMAN_TOL * max(1.0, abs(best))]
    flagged = np.flatnonzero(np.isfinite(V_unbounded) & ~np.isfinite(V))
    return AbstractController(table), ValueFunction(V, targets, flagged)


def value_iteration(model: SymbolicModel, targets, stage, tol=1e-12, max_iter=100000):
    """Reference fixed point of the worst-case Bellman operator (for checking)."""
    V = np.full(model.num_states, np.inf)
    V[targets] = 0.0
    is_target = np.zeros(model.num_states, dtype=bool)
    is_target[targets] = True
    for _ in range(max_iter):
        q = np.full(model.num_pairs, np.inf)
        for p in range(model.num_pairs):
            q[p] = stage[p] + V[model.successor_ids[model.pair_ptr[p]:model.pair_ptr[p + 1]]].max()
        V_new = np.full_like(V, np.inf)
        np.minimum.at(V_new, model.pair_src, q)
        V_new[is_target] = 0.0
        both = np.isfinite(V_new) & np.isfinite(V)
        same_inf = np.isinf(V_new) == np.isinf(V)
        if same_inf.all() and np.all(np.abs(V_new[both] - V[both]) <= tol):
            return V_new
        V = V_new
    raise RuntimeError("value iteration did not converge")


def bellman_residual(problem: AbstractProblem, values: ValueFunction):
    """Largest violation of the Bellman equation over finite-valued non-target states."""
    model, stage = problem.model, problem.stage_cost
    V = values.values
    worst = 0.0
    is_target = np.zeros(model.num_states, dtype=bool)
    is_target[problem.target_ids] = True
    for s in np.flatnonzero(np.isfinite(V) & ~is_target):
        best = np.inf
        for p in range(model.state_ptr[s], model.state_ptr[s + 1]):
            succ = model.successor_ids[model.pair_ptr[p]:model.pair_ptr[p + 1]]
            best = min(best, stage[p] + V[succ].max())
        worst = max(worst, abs(best - V[s]))
    return worst


# -- safety ----------------------------------------------------------------

def solve_safety(problem: AbstractProblem) -> AbstractController:
    """Maximal controlled-invariant subset of the safe states (greatest fixed point).

    Each pair counts its successors outside the current set; each state
    counts its pairs with no such successor. Removing a state updates the
    counters of its predecessors, so the whole computation is linear in the
    number of transitions.
    """
    if problem.kind != "safety":
        raise ConfigurationError("solve_safety needs a safety problem")
    model = problem.model
    N = model.num_states
    inside = np.zeros(N, dtype=bool)
    inside[problem.safe_ids] = True
    outside_succ = np.zeros(model.num_pairs, dtype=np.int64)
    for p in range(model.num_pairs):
        succ = model.successor_ids[model.pair_ptr[p]:model.pair_ptr[p + 1]]
        outside_succ[p] = np.count_nonzero(~inside[succ])
    good = np.zeros(N, dtype=np.int64)
    np.add.at(good, model.pair_src, outside_succ == 0)
    work = [int(s) for s in problem.safe_ids if good[s] == 0]
    for s in work:
        inside[s] = False
    while work:
        t = work.pop()
        for p in model.pred_pair[model.pred_ptr[t]:model.pred_ptr[t + 1]]:
            src = int(model.pair_src[p])
            outside_succ[p] += 1
            if outside_succ[p] == 1 and inside[src]:
                good[src] -= 1
                if good[src] == 0:
                    inside[src] = False
                    work.append(src)
    table = {}
    for s in np.flatnonzero(inside):
        lo, hi = model.state_ptr[s], model.state_ptr[s + 1]
        table[int(s)] = [int(model.pair_input[p]) for p in range(lo, hi) if outside_succ[p] == 0]
    ctrl = AbstractController(table)
    ctrl.infeasible = not table
    return ctrl


def is_controlled_invariant(model: SymbolicModel, states):
    S = set(int(s) for s in states)
    for s in S:
        ok = False
        for p in range(model.state_ptr[s], model.state_ptr[s + 1]):
            succ = model.successor_ids[model.pair_ptr[p]:model.pair_ptr[p + 1]]
            if len(succ) and all(int(t) in S for t in succ):
                ok = True
                break
        if not ok:
            return False
    return True


# -- concretization ----------------------------------------------------------

def concretize(abstract_controller: AbstractController, quantizer, interface=None, input_of=None) -> StaticController:
    """Concrete static controller.

    Partition quantizers (feedback refinement): ``C1(x) = input_of[C2(R(x))]``.
    Cover quantizers (memoryless concretization): the union over cells
    ``x2 in R(x)`` of ``interface(x, x2, u2)`` for ``u2 in C2(x2)``.
    """
    table = abstract_controller.table
    if quantizer.kind == "grid_partition":
        if input_of is None:
            raise ConfigurationError("partition concretization needs the abstract input vectors")
        vectors = {u: np.asarray(input_of[u], dtype=float) for us in table.values() for u in us}

        def evaluate(x):
            ids = [s for s in quantizer.resolve(x) if s in table]
            if not ids:
                raise DomainExitError(f"state {np.asarray(x).tolist()} is outside the controller domain", state=x)
            return [vectors[u] for u in table[ids[0]]]
    else:
        if interface is None:
            raise ConfigurationError("cover concretization needs an interface")

        def evaluate(x):
            ids = [s for s in quantizer.resolve(x) if s in table]
            if not ids:
                raise DomainExitError(f"state {np.asarray(x).tolist()} is outside the controller domain", state=x)
            out = []
            for s in ids:
                for u in table[s]:
                    out.extend(interface(x, s, u))
            return out

    def in_domain(x):
        return any(s in table for s in quantizer.resolve(x))

    return StaticController(evaluate, in_domain)


def domain_volume(abstract_controller: AbstractController, quantizer: GridQuantizer, region: Hyperrectangle):
    """Lebesgue measure of the union of controller-domain grid cells, clipped to ``region``."""
    ids = np.array(sorted(abstract_controller.domain), dtype=np.int64)
    if len(ids) == 0:
        return 0.0
    c = quantizer.centers(ids)
    h = quantizer.grid.cell_half_lengths
    lo = np.maximum(c - h, region.lower)
    hi = np.minimum(c + h, region.upper)
    return float(np.sum(np.prod(np.clip(hi - lo, 0.0, None), axis=1)))


# -- export ----------------------------------------------------------------

def export_controller_csv(controller: AbstractController, path, model_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# model_sha256={model_hash}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["state", "inputs"])
        for s in sorted(controller.table):
            wr.writerow([s, ";".join(str(u) for u in controller.table[s])])


def load_controller_csv(path):
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        model_hash = first.split("=", 1)[1] if first.startswith("# model_sha256=") else None
        rows = list(csv.DictReader(fh))
    table = {int(r["state"]): [int(u) for u in r["inputs"].split(";") if u] for r in rows}
    return AbstractController(table), model_hash


def export_value_csv(values: ValueFunction, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["state", "value"])
        for s, v in enumerate(values.values):
            wr.writerow([s, "inf" if math.isinf(v) else repr(float(v))])


def load_value_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["value"]) for r in rows])
