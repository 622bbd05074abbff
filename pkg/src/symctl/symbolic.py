"""Finite abstract systems, quantizers and sampling-based relation checkers.

Transitions are kept as a sorted, deduplicated ``(source, input, successor)``
integer array. Two CSR-style indices sit on top of it: a forward index from
``(source, input)`` pairs to successors and a backward index from successors
to the pairs that reach them.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from symctl.errors import ConstructionError
from symctl.geometry import Ellipsoid, Hyperrectangle, UniformGrid

FORMAT_VERSION = 1


class SymbolicModel:
    """Finite transition system ``(X2, U2, F2)`` over integer ids.

    ``cell_of[i]`` is the concrete cell of state ``i`` and ``input_of[j]`` the
    concrete meaning of input ``j`` (a vector, or a local controller).
    """

    def __init__(self, num_states, num_inputs, transitions=None, cell_of=None, input_of=None):
        if num_states <= 0 or num_inputs <= 0:
            raise ConstructionError("a symbolic model needs at least one state and one input")
        self.num_states = int(num_states)
        self.num_inputs = int(num_inputs)
        self.cell_of = cell_of
        self.input_of = input_of
        t = np.zeros((0, 3), dtype=np.int64) if transitions is None else np.asarray(transitions, dtype=np.int64)
        t = t.reshape(-1, 3)
        self._validate(t)
        keys = self._encode(t)
        keys = np.unique(keys)
        self.transitions = self._decode(keys)
        self.transitions.setflags(write=False)
        self._keys = keys
        self._build_indices()

    def _validate(self, t):
        bad = (
            (t[:, 0] < 0) | (t[:, 0] >= self.num_states)
            | (t[:, 1] < 0) | (t[:, 1] >= self.num_inputs)
            | (t[:, 2] < 0) | (t[:, 2] >= self.num_states)
        )
        if np.any(bad):
            triple = tuple(int(v) for v in t[np.argmax(bad)])
            raise ConstructionError(
                f"transition {triple} references an id outside "
                f"{self.num_states} states / {self.num_inputs} inputs"
            )

    def _encode(self, t):
        return (t[:, 0] * self.num_inputs + t[:, 1]) * self.num_states + t[:, 2]

    def _decode(self, keys):
        dst = keys % self.num_states
        pair = keys // self.num_states
        return np.stack([pair // self.num_inputs, pair % self.num_inputs, dst], axis=1)

    def _build_indices(self):
        t = self.transitions
        pair_keys = t[:, 0] * self.num_inputs + t[:, 1]
        self.pair_keys, starts = np.unique(pair_keys, return_index=True)
        self.pair_src = self.pair_keys // self.num_inputs
        self.pair_input = self.pair_keys % self.num_inputs
        self.pair_ptr = np.append(starts, len(t)).astype(np.int64)
        self.successor_ids = t[:, 2]
        # pairs are sorted by source, so each state's pairs are contiguous
        self.state_ptr = np.searchsorted(self.pair_src, np.arange(self.num_states + 1)).astype(np.int64)
        pair_of_transition = np.repeat(np.arange(len(self.pair_keys)), np.diff(self.pair_ptr))
        order = np.lexsort((pair_of_transition, t[:, 2]))
        self.pred_pair = pair_of_transition[order]
        self.pred_ptr = np.searchsorted(t[order, 2], np.arange(self.num_states + 1)).astype(np.int64)
        for a in (self.pair_keys, self.pair_src, self.pair_input, self.pair_ptr, self.successor_ids,
                  self.state_ptr, self.pred_pair, self.pred_ptr):
            a.setflags(write=False)

    @property
    def num_transitions(self):
        return len(self.transitions)

    @property
    def num_pairs(self):
        return len(self.pair_keys)

    def pair_index(self, state, inp):
        key = state * self.num_inputs + inp
        i = np.searchsorted(self.pair_keys, key)
        if i < len(self.pair_keys) and self.pair_keys[i] == key:
            return int(i)
        return None

    def successors(self, state, inp):
        i = self.pair_index(state, inp)
        if i is None:
            return self.successor_ids[:0]
        return self.successor_ids[self.pair_ptr[i]:self.pair_ptr[i + 1]]

    def available_inputs(self, state):
        return self.pair_input[self.state_ptr[state]:self.state_ptr[state + 1]]

    def predecessors(self, state):
        """``(source, input)`` arrays of the pairs having ``state`` as a successor."""
        pairs = self.pred_pair[self.pred_ptr[state]:self.pred_ptr[state + 1]]
        return self.pair_src[pairs], self.pair_input[pairs]

    def has_transitions(self, src, inp, dst):
        """Vectorized membership test for triples."""
        keys = (np.asarray(src, dtype=np.int64) * self.num_inputs + np.asarray(inp, dtype=np.int64)) \
            * self.num_states + np.asarray(dst, dtype=np.int64)
        i = np.searchsorted(self._keys, keys)
        i = np.minimum(i, max(len(self._keys) - 1, 0))
        if len(self._keys) == 0:
            return np.zeros(np.shape(keys), dtype=bool)
        return self._keys[i] == keys

    def out_degrees(self):
        return np.diff(self.pair_ptr)

    def with_transitions(self, transitions):
        return SymbolicModel(self.num_states, self.num_inputs, transitions, self.cell_of, self.input_of)

    def __repr__(self):
        return (f"SymbolicModel(states={self.num_states}, inputs={self.num_inputs}, "
                f"transitions={self.num_transitions})")


def add_transitions_bulk(model: SymbolicModel, batch) -> SymbolicModel:
    """New model with ``batch`` merged in (set semantics, order independent)."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    if len(batch) == 0:
        return model
    return model.with_transitions(np.concatenate([model.transitions, batch]))


@dataclass
class AbstractController:
    """Map from abstract states to nonempty sorted lists of abstract inputs."""

    table: dict = field(default_factory=dict)
    infeasible: bool = False

    def __post_init__(self):
        self.table = {int(s): sorted(int(u) for u in us) for s, us in self.table.items() if len(us)}

    @property
    def domain(self):
        return set(self.table)

    @property
    def is_empty(self):
        return not self.table

    def inputs(self, state):
        return self.table.get(int(state), [])

    def check_against(self, model: SymbolicModel):
        """Inputs in the table that the model does not offer (empty when consistent)."""
        bad = []
        for s, us in self.table.items():
            avail = set(model.available_inputs(s).tolist())
            bad.extend((s, u) for u in us if u not in avail)
        return bad


class Quantizer:
    """Relation ``R`` from concrete states to abstract state ids."""

    kind = None

    def resolve(self, x):
        raise NotImplementedError

    def cell(self, state_id):
        raise NotImplementedError


class GridQuantizer(Quantizer):
    """Partition of a uniform grid; obstacle-excluded cells have no id.

    ``linear_of_id[i]`` is the grid linear index of state ``i`` and
    ``id_of_linear`` its inverse (``-1`` for excluded cells).
    """

    kind = "grid_partition"

    def __init__(self, grid: UniformGrid, id_of_linear):
        self.grid = grid
        self.id_of_linear = np.asarray(id_of_linear, dtype=np.int64)
        self.linear_of_id = np.flatnonzero(self.id_of_linear >= 0)
        if len(self.id_of_linear) != grid.num_cells:
            raise ConstructionError("id map length does not match the grid")
        if not np.array_equal(self.id_of_linear[self.linear_of_id], np.arange(len(self.linear_of_id))):
            raise ConstructionError("grid ids must be assigned in increasing linear order")

    @property
    def num_states(self):
        return len(self.linear_of_id)

    def resolve_many(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = self.grid.index_of(X)
        ok = self.grid.in_range(k) & self.grid.bounds.contains(X)
        out = np.full(len(X), -1, dtype=np.int64)
        if np.any(ok):
            out[ok] = self.id_of_linear[self.grid.linear_index(k[ok])]
        return out

    def resolve(self, x):
        i = int(self.resolve_many(x)[0])
        return [] if i < 0 else [i]

    def centers(self, ids=None):
        lin = self.linear_of_id if ids is None else self.linear_of_id[np.asarray(ids)]
        return self.grid.center_of(self.grid.multi_index(lin))

    def cell(self, state_id):
        return Hyperrectangle(self.centers([state_id])[0], self.grid.cell_half_lengths)

    def contains(self, state_id, X):
        """Membership in the half-open cell, consistent with :meth:`resolve`."""
        return self.resolve_many(X) == state_id


class GridCells:
    """Lazy ``cell_of`` sequence for grid models."""

    def __init__(self, quantizer: GridQuantizer):
        self.quantizer = quantizer

    def __len__(self):
        return self.quantizer.num_states

    def __getitem__(self, i):
        return self.quantizer.cell(int(i))


class CoverQuantizer(Quantizer):
    """Set-valued relation: a state is related to every cell containing it.

    Cells are ellipsoids or boxes; membership is the closed set test.
    """

    kind = "ellipsoid_cover"

    def __init__(self, cells, kind="ellipsoid_cover"):
        self.cells = list(cells)
        self.kind = kind
        n = self.cells[0].dim
        self._centers = np.array([c.center for c in self.cells]).reshape(-1, n)
        self._is_ell = np.array([isinstance(c, Ellipsoid) for c in self.cells])
        boxes = [c.bounding_half_lengths() if isinstance(c, Ellipsoid) else c.half_lengths for c in self.cells]
        self._box_h = np.array(boxes).reshape(-1, n)
        self._shapes = np.array([c.shape if isinstance(c, Ellipsoid) else np.eye(n) for c in self.cells])

    @property
    def num_states(self):
        return len(self.cells)

    def resolve(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self._centers
        inside_box = np.all(np.abs(d) <= self._box_h, axis=1)
        idx = np.flatnonzero(inside_box)
        if len(idx) == 0:
            return []
        dd = d[idx]
        q = np.einsum("ki,kij,kj->k", dd, self._shapes[idx], dd)
        ok = np.where(self._is_ell[idx], q <= 1.0, True)
        return idx[ok].tolist()

    def cell(self, state_id):
        return self.cells[state_id]


@dataclass
class RelationReport:
    relation: str
    samples: int
    violations: list = field(default_factory=list)
    checked_pairs: int = 0

    @property
    def violation_count(self):
        return len(self.violations)

    @property
    def vacuous(self):
        return self.samples == 0

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {
            "relation": self.relation,
            "samples": self.samples,
            "vacuous": self.vacuous,
            "checked_pairs": self.checked_pairs,
            "violation_count": self.violation_count,
            "violations": self.violations[:100],
        }


def _sample_plan(model, samples, rng, focus=None):
    """Round-robin over ``(state, input)`` pairs in a seeded order.

    ``focus`` restricts sampling to the listed ``(state, input)`` pairs.
    Returns pair indices and a flag marking each pair's first probe.
    """
    if focus is None:
        candidates = np.arange(model.num_pairs)
    else:
        candidates = np.array(sorted({model.pair_index(int(s), int(u)) for s, u in focus} - {None}), dtype=np.int64)
    P = len(candidates)
    if samples <= 0 or P == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    order = candidates[rng.permutation(P)]
    j = np.arange(samples)
    return order[j % P], j < P


def _sample_cell(cell, rng):
    return cell.sample(rng)


def check_frr(concrete, model: SymbolicModel, quantizer: Quantizer, samples, seed, focus=None) -> RelationReport:
    """Monte-Carlo test of the feedback refinement conditions.

    For sampled ``x1`` in a cell ``x2`` and ``u`` in ``U2(x2)``: the input must
    be concretely available (condition i), and every abstract state related
    to a sampled successor must be an abstract successor (condition ii). A
    successor related to no abstract state is reported as a domain exit,
    since the relation is required to be strict. Each pair's first probe uses
    the cell center and zero disturbance. ``focus`` limits the check to a
    list of ``(state, input)`` pairs.
    """
    if quantizer.kind != "grid_partition":
        raise ValueError("feedback refinement relations need a strict single-valued quantizer")
    rng = np.random.default_rng(seed)
    pairs, first = _sample_plan(model, samples, rng, focus)
    report = RelationReport("FRR", int(len(pairs)), checked_pairs=int(len(np.unique(pairs))))
    if len(pairs) == 0:
        return report
    n, m = concrete.state_dim, concrete.input_dim
    src = model.pair_src[pairs]
    inp = model.pair_input[pairs]
    cells_c = quantizer.centers(src)
    h = quantizer.grid.cell_half_lengths
    offsets = rng.uniform(-1.0, 1.0, size=(len(pairs), n)) * h
    offsets[first] = 0.0
    x1 = cells_c + offsets
    # keep samples inside the half-open cell
    x1 = np.where(offsets >= h, cells_c + h * (1 - 1e-12), x1)
    U = np.array([model.input_of[i] for i in range(model.num_inputs)], dtype=float).reshape(-1, m)
    u = U[inp]
    w = rng.uniform(-1.0, 1.0, size=(len(pairs), n)) * concrete.disturbance_bound
    w[first] = 0.0
    avail = concrete.input_set.contains(u, 1e-12)
    x_next = np.asarray(concrete.nominal_map(x1, u), dtype=float) + w
    related = quantizer.resolve_many(x_next)
    ok = model.has_transitions(src, inp, np.maximum(related, 0)) & (related >= 0)
    for k in np.flatnonzero(~avail):
        report.violations.append({
            "kind": "input", "state": int(src[k]), "input": int(inp[k]), "x1": x1[k].tolist(),
        })
    for k in np.flatnonzero(avail & ~ok):
        report.violations.append({
            "kind": "domain_exit" if related[k] < 0 else "successor",
            "state": int(src[k]), "input": int(inp[k]), "x1": x1[k].tolist(),
            "x1_next": x_next[k].tolist(), "related": int(related[k]),
        })
    return report


def check_mcr(concrete, model: SymbolicModel, quantizer: Quantizer, interface, samples, seed,
              focus=None) -> RelationReport:
    """Monte-Carlo test of the memoryless concretization condition.

    For sampled ``x1`` in cell ``x2`` and ``u2`` in ``U2(x2)``, every concrete
    input ``u1`` in ``interface(x1, x2, u2)`` must be available and every
    sampled successor ``x1'`` must satisfy ``R(x1') ⊆ F2(x2, u2)``. Successors
    that leave the cover entirely are also reported (``cover_exit``).
    """
    rng = np.random.default_rng(seed)
    pairs, first = _sample_plan(model, samples, rng, focus)
    report = RelationReport("MCR", int(len(pairs)), checked_pairs=int(len(np.unique(pairs))))
    n = concrete.state_dim
    for k, p in enumerate(pairs):
        x2 = int(model.pair_src[p])
        u2 = int(model.pair_input[p])
        cell = quantizer.cell(x2)
        x1 = cell.center.copy() if first[k] else _sample_cell(cell, rng)
        succ = set(model.successor_ids[model.pair_ptr[p]:model.pair_ptr[p + 1]].tolist())
        for u1 in interface(x1, x2, u2):
            u1 = np.asarray(u1, dtype=float)
            if not concrete.available(x1, u1):
                report.violations.append({"kind": "interface", "state": x2, "input": u2,
                                          "x1": x1.tolist(), "u1": u1.tolist()})
                continue
            w = np.zeros(n) if first[k] else rng.uniform(-1.0, 1.0, size=n) * concrete.disturbance_bound
            x_next = np.asarray(concrete.nominal_map(x1, u1), dtype=float) + w
            related = quantizer.resolve(x_next)
            extra = sorted(set(related) - succ)
            if not related:
                report.violations.append({"kind": "cover_exit", "state": x2, "input": u2,
                                          "x1": x1.tolist(), "x1_next": x_next.tolist()})
            elif extra:
                report.violations.append({"kind": "relation", "state": x2, "input": u2,
                                          "x1": x1.tolist(), "x1_next": x_next.tolist(), "unexpected": extra})
    return report


# -- serialization ---------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def _cell_row(i, cell):
    if isinstance(cell, Ellipsoid):
        return [i, "ellipsoid"] + [_fmt(v) for v in cell.center] + [_fmt(v) for v in cell.shape.ravel()]
    return [i, "box"] + [_fmt(v) for v in cell.center] + [_fmt(v) for v in cell.half_lengths]


def _input_row(j, value):
    from symctl.ellipsoid_abstraction import LocalController

    if isinstance(value, LocalController):
        return ([j, "affine"] + [_fmt(v) for v in value.anchor] + [_fmt(v) for v in value.offset]
                + [_fmt(v) for v in value.gain.ravel()])
    return [j, "vector"] + [_fmt(v) for v in np.atleast_1d(value)]


def save_model(model: SymbolicModel, directory, state_dim, input_dim, extra=None):
    """Write ``model_header.json``, ``model_cells.csv``, ``model_inputs.csv``, ``model_transitions.csv``.

    Floats are written with ``repr`` so a reload reproduces them bit for bit.
    Returns the content hash.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "model_cells.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        for i in range(model.num_states):
            wr.writerow(_cell_row(i, model.cell_of[i]))
    with open(d / "model_inputs.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        for j in range(model.num_inputs):
            wr.writerow(_input_row(j, model.input_of[j]))
    with open(d / "model_transitions.csv", "w", newline="") as fh:
        fh.write("source,input,successor\n")
        np.savetxt(fh, model.transitions, fmt="%d", delimiter=",")
    header = {
        "format_version": FORMAT_VERSION,
        "state_dim": int(state_dim),
        "input_dim": int(input_dim),
        "num_states": model.num_states,
        "num_inputs": model.num_inputs,
        "num_transitions": model.num_transitions,
    }
    if extra:
        header.update(extra)
    digest = model_files_hash(d)
    header["content_sha256"] = digest
    (d / "model_header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return digest


def model_files_hash(directory):
    d = Path(directory)
    h = hashlib.sha256()
    for name in ("model_cells.csv", "model_inputs.csv", "model_transitions.csv"):
        h.update((d / name).read_bytes())
    return h.hexdigest()


def load_model(directory):
    """Reload a saved model. Returns ``(model, header, hash_ok)``."""
    from symctl.ellipsoid_abstraction import LocalController

    d = Path(directory)
    header = json.loads((d / "model_header.json").read_text())
    n, m = header["state_dim"], header["input_dim"]
    cells = []
    with open(d / "model_cells.csv", newline="") as fh:
        for row in csv.reader(fh):
            vals = [float(v) for v in row[2:]]
            if row[1] == "ellipsoid":
                cells.append(Ellipsoid(vals[:n], np.array(vals[n:]).reshape(n, n)))
            else:
                cells.append(Hyperrectangle(vals[:n], vals[n:]))
    inputs = []
    with open(d / "model_inputs.csv", newline="") as fh:
        for row in csv.reader(fh):
            vals = np.array([float(v) for v in row[2:]])
            if row[1] == "affine":
                inputs.append(LocalController(gain=vals[n + m:].reshape(m, n), offset=vals[n:n + m],
                                              anchor=vals[:n]))
            else:
                inputs.append(vals)
    t = np.loadtxt(d / "model_transitions.csv", dtype=np.int64, delimiter=",", skiprows=1, ndmin=2)
    t = t.reshape(-1, 3)
    model = SymbolicModel(header["num_states"], header["num_inputs"], t, cells, inputs)
    hash_ok = model_files_hash(d) == header.get("content_sha256")
    return model, header, hash_ok
