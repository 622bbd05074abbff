"""Lazy, target-rooted cover by ellipsoid cells with affine local controllers.

Each non-root cell ``E(c, P)`` carries ``kappa(x) = K (x - c) + l`` and a
certificate that the closed-loop image of the cell, inflated by the
linearization remainder and the disturbance bound, lies inside its parent
cell. Cells are grown backwards from the target, so the abstract model is a
tree with one deterministic transition per non-root cell.

Two bookkeeping constraints keep the transitions deterministic when cells
overlap: a new cell's image may only meet its parent, and a new cell may not
meet any existing image.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from symctl.errors import (
    ConfigurationError,
    DegenerateError,
    DesignFailure,
    IndeterminateError,
    StabilizabilityError,
)
from symctl.geometry import (
    CONTAINMENT_TOL,
    Ellipsoid,
    Relation,
    box_corner_norm,
    disjoint,
    ellipsoid_affine_image,
    ellipsoid_contains_ellipsoid,
    ellipsoid_inflate,
    max_convex_quadratic_over_ellipsoid,
)
from symctl.symbolic import AbstractController, CoverQuantizer, SymbolicModel


@dataclass(frozen=True, eq=False)
class LocalController:
    """``kappa(x) = gain (x - anchor) + offset``."""

    gain: np.ndarray
    offset: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        K = np.array(self.gain, dtype=float, ndmin=2)
        l = np.array(self.offset, dtype=float, ndmin=1)
        c = np.array(self.anchor, dtype=float, ndmin=1)
        if K.shape != (l.shape[0], c.shape[0]):
            raise ValueError(f"gain must be {l.shape[0]}x{c.shape[0]}, got {K.shape}")
        for a in (K, l, c):
            a.setflags(write=False)
        object.__setattr__(self, "gain", K)
        object.__setattr__(self, "offset", l)
        object.__setattr__(self, "anchor", c)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.offset + (x - self.anchor) @ self.gain.T

    def input_range(self, region: Ellipsoid):
        """Componentwise exact ``(min, max)`` of ``kappa`` over ``region``."""
        mid = self(region.center)
        spread = np.sqrt(np.einsum("ij,jk,ik->i", self.gain, region.inverse_shape, self.gain))
        return mid - spread, mid + spread


@dataclass(frozen=True, eq=False)
class EllipsoidCell:
    region: Ellipsoid
    controller: LocalController | None
    parent: int | None
    cost_bound: float
    image: Ellipsoid | None = None


@dataclass
class LazyTreeParams:
    """Lazy tree settings.

    ``cost_weights`` is ``(Q, R, offset)`` for the stage cost
    ``x^T Q x + u^T R u + offset``. ``design_weights`` are the Riccati weights
    used for the local gains (identity when omitted). Samples are drawn
    uniformly in the state set, except that a ``goal_bias`` fraction is drawn
    in the initial set. Offsets must lie in the input box shrunk by
    ``input_margin`` to leave room for feedback.
    """

    max_iterations: int = 2000
    sample_seed: int = 0
    initial_shape_scale: float = 4.0
    shrink_factor: float = 0.7
    cost_weights: tuple = None
    design_weights: tuple = None
    goal_bias: float = 0.2
    input_margin: float = 0.7
    max_shrinks: int = 14
    steering_halvings: int = 8
    coverage_probes: int = 1000
    riccati_iters: int = 10000
    riccati_tol: float = 1e-10

    def __post_init__(self):
        if not 0 < self.shrink_factor < 1:
            raise ConfigurationError("shrink_factor must lie in (0, 1)")
        if self.initial_shape_scale <= 0:
            raise ConfigurationError("initial_shape_scale must be positive")
        if self.cost_weights is not None:
            Q, R, off = self.cost_weights
            for name, W in (("state", Q), ("input", R)):
                if np.linalg.eigvalsh(np.atleast_2d(W))[0] < -1e-12:
                    raise ConfigurationError(f"{name} cost weight is not positive semidefinite")
            if off < 0:
                raise ConfigurationError("cost offset must be nonnegative")


def riccati_gain(A, B, Q, Rw, iters=10000, tol=1e-10):
    """Discrete LQR by fixed-point iteration of the Riccati map.

    Returns ``K = -(Rw + B^T P B)^{-1} B^T P A`` and the converged ``P``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Rw = np.atleast_2d(np.asarray(Rw, dtype=float))
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or Rw.shape != (m, m):
        raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} Q{Q.shape} R{Rw.shape}")
    P = Q.copy()
    for _ in range(iters):
        with np.errstate(over="ignore", invalid="ignore"):
            S = Rw + B.T @ P @ B
            G = np.linalg.solve(S, B.T @ P @ A)
            P_next = Q + A.T @ P @ A - A.T @ P @ B @ G
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise StabilizabilityError("Riccati iteration diverged")
        done = np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next)))
        P = P_next
        if done:
            break
    else:
        raise StabilizabilityError(f"Riccati iteration did not converge in {iters} steps")
    K = -np.linalg.solve(Rw + B.T @ P @ B, B.T @ P @ A)
    rho = np.max(np.abs(np.linalg.eigvals(A + B @ K)))
    if rho >= 1.0:
        raise DesignFailure(f"closed-loop spectral radius {rho:.6f} is not below 1")
    return K, P


def _closed_loop(cell: EllipsoidCell, sys):
    if sys.input_matrix is None:
        raise ConfigurationError("ellipsoid abstraction needs an input-affine system with a constant input matrix")
    ctrl = cell.controller
    f_c, A = sys.linearized_map(ctrl.anchor, ctrl.offset)
    M = np.asarray(A, dtype=float) + sys.input_matrix @ ctrl.gain
    f_c = np.asarray(f_c, dtype=float) + sys.input_matrix @ ctrl.gain @ (cell.region.center - ctrl.anchor)
    margin = np.asarray(sys.error_bound_map(cell.region.bounding_half_lengths(), ctrl.offset), dtype=float)
    return f_c, M, margin + sys.noise_bound


def verify_cell_transition(child: EllipsoidCell, parent_region: Ellipsoid, sys, tol=CONTAINMENT_TOL) -> bool:
    """Whether the closed-loop image of ``child`` (with remainder and noise) lies in ``parent_region``.

    The image ``{f(c) + M d}`` of the cell is compared against the parent
    shrunk by the inflation box: a point ``p`` with ``|p - c_p|_P <= 1 - rho``
    stays inside after any shift in the box, where ``rho`` is the largest
    ``P``-norm of a box corner. The maximum over the cell is computed exactly,
    so singular closed loops are handled as well.
    """
    f_c, M, margin = _closed_loop(child, sys)
    rho = box_corner_norm(parent_region.shape, margin)
    if rho >= 1.0:
        return False
    Pp = parent_region.shape
    e = f_c - parent_region.center
    H = M.T @ Pp @ M
    g = M.T @ Pp @ e
    worst = max_convex_quadratic_over_ellipsoid(H, g, float(e @ Pp @ e), child.region)
    return bool(np.sqrt(max(worst, 0.0)) + rho <= 1.0 + tol)


def inflated_image(cell: EllipsoidCell, sys) -> Ellipsoid:
    """Outer ellipsoid of the certified closed-loop image (raises DegenerateError if singular)."""
    f_c, M, margin = _closed_loop(cell, sys)
    img = ellipsoid_affine_image(cell.region, M, f_c - M @ cell.region.center)
    return ellipsoid_inflate(img, margin)


def worst_stage_cost(region: Ellipsoid, controller: LocalController, weights):
    """Exact max over ``region`` of ``x^T Q x + kappa(x)^T R kappa(x) + offset``."""
    Q, R, off = weights
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    c = region.center
    K = controller.gain
    l = controller(c)
    H = Q + K.T @ R @ K
    g = Q @ c + K.T @ R @ l
    const = c @ Q @ c + l @ R @ l + off
    return max_convex_quadratic_over_ellipsoid(H, g, const, region)


def _as_ellipsoid(region):
    if isinstance(region, Ellipsoid):
        return region
    return Ellipsoid(region.center, np.diag(1.0 / np.asarray(region.half_lengths) ** 2))


def _region_inside_cell(region, cell: Ellipsoid):
    if isinstance(region, Ellipsoid):
        return ellipsoid_contains_ellipsoid(region, cell)
    return bool(np.all(cell.contains(region.vertices())))


@dataclass
class LazyAbstraction:
    """Result of the lazy builder; unpacks as ``(model, quantizer, interface, controller)``."""

    model: SymbolicModel
    quantizer: CoverQuantizer
    interface: object
    controller: AbstractController
    cells: list
    covered: bool
    certified: bool
    coverage_fraction: float
    iterations: int
    stats: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.model, self.quantizer, self.interface, self.controller))


class CellInterface:
    """``I(x1, x2, u2) = {kappa_{u2}(x1)}``: abstract input ids name the owning cell's controller."""

    def __init__(self, cells):
        self.cells = cells

    def __call__(self, x1, x2, u2):
        ctrl = self.cells[int(u2)].controller
        return [] if ctrl is None else [ctrl(x1)]


class _Tree:
    """Cell list plus vectorized bounding boxes for quick rejection."""

    def __init__(self, dim):
        self.cells = []
        self.centers = np.zeros((0, dim))
        self.shapes = np.zeros((0, dim, dim))
        self.box_h = np.zeros((0, dim))
        self.img_c = np.zeros((0, dim))
        self.img_h = np.zeros((0, dim))
        self.images = []

    def add(self, cell: EllipsoidCell):
        r = cell.region
        self.cells.append(cell)
        self.centers = np.vstack([self.centers, r.center])
        self.shapes = np.concatenate([self.shapes, r.shape[None]])
        self.box_h = np.vstack([self.box_h, r.bounding_half_lengths()])
        self.images.append(cell.image)
        if cell.image is None:
            self.img_c = np.vstack([self.img_c, np.full(r.dim, np.inf)])
            self.img_h = np.vstack([self.img_h, np.zeros(r.dim)])
        else:
            self.img_c = np.vstack([self.img_c, cell.image.center])
            self.img_h = np.vstack([self.img_h, cell.image.bounding_half_lengths()])

    def nearest(self, s):
        d = s - self.centers
        q = np.einsum("ki,kij,kj->k", d, self.shapes, d)
        return int(np.argmin(q))

    def covering(self, x):
        """Membership of ``x`` (one point or a batch) in each cell."""
        x = np.asarray(x, dtype=float)
        d = x[..., None, :] - self.centers
        q = np.einsum("...ki,kij,...kj->...k", d, self.shapes, d)
        return q <= 1.0

    def meets_cells(self, region: Ellipsoid, skip=None):
        near = np.all(np.abs(self.centers - region.center) <= self.box_h + region.bounding_half_lengths(), axis=1)
        for k in np.flatnonzero(near):
            if k == skip:
                continue
            if disjoint(region, self.cells[k].region) is not Relation.DISJOINT:
                return True
        return False

    def meets_images(self, region: Ellipsoid):
        near = np.all(np.abs(self.img_c - region.center) <= self.img_h + region.bounding_half_lengths(), axis=1)
        for k in np.flatnonzero(near):
            if disjoint(region, self.images[k]) is not Relation.DISJOINT:
                return True
        return False


def _obstacle_free(region, obstacles):
    return all(disjoint(region, o) is Relation.DISJOINT for o in obstacles)


def build_lazy_ellipsoid_abstraction(problem, sys, params: LazyTreeParams) -> LazyAbstraction:
    """Grow a tree of certified ellipsoid cells from the target until the initial set is covered.

    ``problem`` provides ``state_set``, ``input_set``, ``initial_set``,
    ``target_set`` and ``obstacles``. The system must be input-affine with a
    constant ``input_matrix``.
    """
    t0 = time.perf_counter()
    if sys.input_matrix is None:
        raise ConfigurationError("ellipsoid abstraction needs an input-affine system with a constant input matrix")
    X, U = problem.state_set, problem.input_set
    X_I, X_T = problem.initial_set, problem.target_set
    obstacles = list(problem.obstacles)
    n, m = sys.state_dim, sys.input_dim
    B = sys.input_matrix
    weights = params.cost_weights or (np.eye(n), np.eye(m), 0.0)
    Qd, Rd = params.design_weights or (np.eye(n), np.eye(m))
    rng = np.random.default_rng(params.sample_seed)

    tree = _Tree(n)
    root = EllipsoidCell(_as_ellipsoid(X_T), None, None, 0.0, None)
    tree.add(root)
    probes = np.vstack([X_I.center, X_I.sample(rng, params.coverage_probes)])
    covered = _region_inside_cell(X_I, root.region)
    certified = covered
    rejected = {"steer": 0, "design": 0, "shrink": 0, "covered_sample": 0}
    u_lo = U.center - params.input_margin * U.half_lengths
    u_hi = U.center + params.input_margin * U.half_lengths
    it = 0
    while not covered and it < params.max_iterations:
        it += 1
        goal = rng.uniform() < params.goal_bias
        s = X_I.sample(rng) if goal else X.sample(rng)
        if not goal and np.any(tree.covering(s)):
            rejected["covered_sample"] += 1
            continue
        j = tree.nearest(s)
        parent = tree.cells[j]
        c_j = parent.region.center
        x_new = ell = None
        alpha = 1.0
        for _ in range(params.steering_halvings):
            x = c_j + alpha * (s - c_j)
            phi = np.asarray(sys.nominal_map(x, U.center), dtype=float) - B @ U.center
            l, *_ = np.linalg.lstsq(B, c_j - phi, rcond=None)
            if np.all(l >= u_lo) and np.all(l <= u_hi) and X.contains(x):
                x_new, ell = x, l
                break
            alpha *= 0.5
        if x_new is None:
            rejected["steer"] += 1
            continue
        try:
            _, A = sys.linearized_map(x_new, ell)
            K, P = riccati_gain(A, B, Qd, Rd, params.riccati_iters, params.riccati_tol)
        except (StabilizabilityError, DesignFailure, np.linalg.LinAlgError):
            rejected["design"] += 1
            continue
        ctrl = LocalController(K, ell, x_new)
        base = P / np.linalg.eigvalsh(P)[0]
        r = params.initial_shape_scale
        accepted = None
        for _ in range(params.max_shrinks):
            region = Ellipsoid(x_new, base / r**2)
            r *= params.shrink_factor
            if not X.contains_box(region.bounding_box()):
                continue
            lo, hi = ctrl.input_range(region)
            if np.any(lo < U.lower) or np.any(hi > U.upper):
                continue
            if not _obstacle_free(region, obstacles):
                continue
            cand = EllipsoidCell(region, ctrl, j, 0.0)
            if not verify_cell_transition(cand, parent.region, sys):
                continue
            try:
                image = inflated_image(cand, sys)
            except DegenerateError:
                continue
            try:
                if tree.meets_cells(image, skip=j) or disjoint(image, region) is not Relation.DISJOINT:
                    continue
                if tree.meets_images(region):
                    continue
            except IndeterminateError:
                continue
            cost = parent.cost_bound + worst_stage_cost(region, ctrl, weights)
            accepted = EllipsoidCell(region, ctrl, j, float(cost), image)
            break
        if accepted is None:
            rejected["shrink"] += 1
            continue
        tree.add(accepted)
        if _region_inside_cell(X_I, accepted.region):
            covered = certified = True
        elif np.all(np.any(tree.covering(probes), axis=1)):
            covered = True

    cells = tree.cells
    N = len(cells)
    transitions = [(i, i, c.parent) for i, c in enumerate(cells) if c.parent is not None]
    inputs = [c.controller or LocalController(np.zeros((m, n)), U.center, c.region.center) for c in cells]
    model = SymbolicModel(N, N, np.array(transitions, dtype=np.int64).reshape(-1, 3),
                          [c.region for c in cells], inputs)
    quantizer = CoverQuantizer([c.region for c in cells])
    controller = AbstractController({i: [i] for i, c in enumerate(cells) if c.parent is not None})
    fraction = float(np.mean(np.any(tree.covering(probes), axis=1)))
    return LazyAbstraction(
        model=model,
        quantizer=quantizer,
        interface=CellInterface(cells),
        controller=controller,
        cells=cells,
        covered=covered,
        certified=certified,
        coverage_fraction=fraction,
        iterations=it,
        stats={
            "cells": N,
            "transitions": len(transitions),
            "iterations": it,
            "rejected": rejected,
            "build_seconds": time.perf_counter() - t0,
            "heuristic_growth_bound": bool(getattr(sys, "error_bound_heuristic", False)),
        },
    )


def export_tree_csv(cells, path):
    """One row per cell: id, parent, cost_bound, center, shape (row-major), gain (row-major), offset."""
    if not cells:
        return
    n = cells[0].region.dim
    m = next((c.controller.offset.shape[0] for c in cells if c.controller is not None), 0)
    header = (["id", "parent", "cost_bound"] + [f"center_{i}" for i in range(n)]
              + [f"shape_{i}{j}" for i in range(n) for j in range(n)]
              + [f"gain_{i}{j}" for i in range(m) for j in range(n)] + [f"offset_{i}" for i in range(m)])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i, c in enumerate(cells):
            K = c.controller.gain.ravel() if c.controller is not None else [""] * (m * n)
            l = c.controller.offset if c.controller is not None else [""] * m
            row = [i, "" if c.parent is None else c.parent, repr(float(c.cost_bound))]
            row += [repr(float(v)) for v in c.region.center] + [repr(float(v)) for v in c.region.shape.ravel()]
            row += [v if v == "" else repr(float(v)) for v in K] + [v if v == "" else repr(float(v)) for v in l]
            wr.writerow(row)
