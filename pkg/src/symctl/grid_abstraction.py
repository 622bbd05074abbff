"""Uniform-grid abstractions related to the concrete system by a feedback refinement relation.

Each cell ``[c - h, c + h)`` under input ``u`` is mapped to the box centered
at ``f(c, u)`` with half-lengths ``|J(c, u)| h + beta(h, u) + W``, where ``J``
is the state Jacobian at the center, ``beta`` bounds the linearization
remainder and ``W`` is the disturbance bound. Every cell meeting that box
becomes a successor. Inputs whose box leaves the state bounds or touches an
excluded (obstacle) cell are not available at that cell.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from symctl.errors import ConfigurationError, SizeCapError
from symctl.geometry import Hyperrectangle, Relation, UniformGrid, disjoint
from symctl.symbolic import GridCells, GridQuantizer, SymbolicModel

SATURATED = 2**63 - 1
CANDIDATE_BUDGET = 2_000_000
BOUNDARY_TOL = 1e-12


@dataclass
class GrowthSpec:
    """How the linearization remainder ``beta(h, u)`` is obtained.

    kind ``user_growth_bound``: ``bound`` is ``beta`` itself.
    kind ``jacobian_plus_remainder``: ``bound`` is a remainder bound; when it
    is omitted, second derivatives are estimated by finite differences of the
    Jacobian at sampled points of ``state_domain x input_domain`` and scaled
    by ``safety_factor``. That estimate is a heuristic, not a proof, and the
    resulting system is flagged.

    ``validation_samples`` random pairs ``h1 <= h2`` check ``beta(0, u) = 0``
    and monotonicity.
    """

    kind: str = "jacobian_plus_remainder"
    bound: Callable | None = None
    validation_samples: int = 100
    state_domain: Hyperrectangle | None = None
    input_domain: Hyperrectangle | None = None
    seed: int = 0
    samples: int = 200
    safety_factor: float = 2.0

    def __post_init__(self):
        if self.kind not in ("user_growth_bound", "jacobian_plus_remainder"):
            raise ConfigurationError(f"unknown growth bound kind {self.kind!r}")
        if self.kind == "user_growth_bound" and self.bound is None:
            raise ConfigurationError("user_growth_bound needs a bound function")

    @classmethod
    def exact_linear(cls, **kw):
        """Zero remainder, valid for affine maps."""
        return cls("jacobian_plus_remainder", bound=zero_remainder, **kw)

    def realize(self, linearized_map, state_dim, input_dim):
        heuristic = False
        if self.bound is not None:
            beta = self.bound
        else:
            if self.state_domain is None or self.input_domain is None:
                raise ConfigurationError("a sampled remainder bound needs state and input domains")
            beta = sampled_hessian_remainder(linearized_map, self.state_domain, self.input_domain,
                                             self.samples, self.seed, self.safety_factor)
            heuristic = True
        self.validate(beta, state_dim, input_dim)
        return beta, heuristic

    def validate(self, beta, state_dim, input_dim):
        rng = np.random.default_rng(self.seed + 1)
        scale = np.ones(state_dim)
        if self.state_domain is not None:
            scale = np.maximum(self.state_domain.half_lengths, 1e-9)
        for _ in range(self.validation_samples):
            u = self.input_domain.sample(rng) if self.input_domain is not None else np.zeros(input_dim)
            b0 = np.asarray(beta(np.zeros(state_dim), u), dtype=float)
            if b0.shape != (state_dim,) or np.any(np.abs(b0) > 1e-12):
                raise ConfigurationError(f"growth bound is not zero at h = 0 (got {b0.tolist()})")
            h1 = rng.uniform(0.0, 0.1, state_dim) * scale
            h2 = h1 + rng.uniform(0.0, 0.1, state_dim) * scale
            b1 = np.asarray(beta(h1, u), dtype=float)
            b2 = np.asarray(beta(h2, u), dtype=float)
            if np.any(b1 < 0) or np.any(b2 < b1 - 1e-12 * (1 + np.abs(b1))):
                raise ConfigurationError(
                    f"growth bound is not monotone: beta({h1.tolist()}) = {b1.tolist()}, "
                    f"beta({h2.tolist()}) = {b2.tolist()}"
                )


def zero_remainder(h, u):
    return np.zeros_like(np.asarray(h, dtype=float))


def hessian_remainder(M):
    """``beta_i(h) = 1/2 sum_jk M_ijk h_j h_k`` for second-derivative bounds ``M``."""
    M = np.asarray(M, dtype=float)

    def beta(h, u):
        h = np.asarray(h, dtype=float)
        return 0.5 * np.einsum("ijk,j,k->i", M, h, h)

    return beta


def sampled_hessian_remainder(linearized_map, state_domain, input_domain, samples, seed, safety_factor=2.0):
    """Remainder bound from sampled finite-difference second derivatives (heuristic)."""
    rng = np.random.default_rng(seed)
    n = state_domain.dim
    X = np.vstack([state_domain.center, state_domain.vertices(), state_domain.sample(rng, samples)])
    U = np.vstack([np.tile(input_domain.center, (1 + 2**n, 1)), input_domain.sample(rng, samples)])
    delta = 1e-4 * np.maximum(state_domain.half_lengths, 1e-6)
    M = np.zeros((n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = delta[k]
        _, Jp = linearized_map(X + e, U)
        _, Jm = linearized_map(X - e, U)
        dJ = np.abs(Jp - Jm) / (2 * delta[k])
        M[:, :, k] = np.max(dJ, axis=0)
    M = 0.5 * (M + M.transpose(0, 2, 1))
    return hessian_remainder(safety_factor * M)


@dataclass
class GridAbstractionParams:
    """Grid abstraction settings.

    Abstract inputs are the centers of ``input_grid`` cells lying in
    ``input_set`` (defaults to the input grid bounds). ``stability_prior``
    restricts successor candidates to a window around the nominal image;
    without it the window is sized from the largest one-step displacement.
    Both give the same transitions.
    """

    state_grid: UniformGrid
    input_grid: UniformGrid | None
    obstacle_sets: list = field(default_factory=list)
    stability_prior: bool = True
    input_set: Hyperrectangle | None = None
    cells_cap: int | None = None
    threads: int = 1
    progress: Callable | None = None

    def input_points(self):
        if self.input_grid is None:
            return np.zeros((0, 0))
        pts = self.input_grid.all_centers()
        U = self.input_set if self.input_set is not None else self.input_grid.bounds
        return pts[U.contains(pts, 1e-12)]


class SizeEstimate(NamedTuple):
    cells: int
    cell_input_pairs: int

    @property
    def saturated(self):
        return self.cells == SATURATED or self.cell_input_pairs == SATURATED


def _saturating_product(values):
    out = 1
    for v in values:
        out *= int(v)
        if out > SATURATED:
            return SATURATED
    return out


def estimate_size(params: GridAbstractionParams) -> SizeEstimate:
    """Cell count and cell-input pair count (before obstacle removal), saturating."""
    cells = _saturating_product(params.state_grid.shape)
    inputs = len(params.input_points())
    pairs = SATURATED if cells == SATURATED else min(SATURATED, cells * inputs)
    return SizeEstimate(cells, pairs)


def excluded_cells(grid: UniformGrid, obstacles):
    """Mask over linear indices of cells meeting some obstacle (outer approximation)."""
    N = grid.num_cells
    mask = np.zeros(N, dtype=bool)
    if not obstacles:
        return mask
    centers = grid.all_centers()
    h = grid.cell_half_lengths
    for obs in obstacles:
        box = obs if isinstance(obs, Hyperrectangle) else obs.bounding_box()
        # half-open cells: [c - h, c + h) meets the closed box iff c - h <= upper and c + h > lower
        near = np.all((centers - h <= box.upper) & (centers + h > box.lower), axis=1)
        if isinstance(obs, Hyperrectangle):
            mask |= near
            continue
        for i in np.flatnonzero(near & ~mask):
            if disjoint(obs, Hyperrectangle(centers[i], h)) is not Relation.DISJOINT:
                mask[i] = True
    return mask


def _window_offsets(widths):
    axes = [np.arange(-w, w + 1) for w in widths]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(widths))


def _successors_for_input(sys, grid, id_of_linear, centers, src_ids, u, X, prior):
    """Transitions and work counter for one input over all source cells."""
    n = grid.dim
    h = grid.cell_half_lengths
    U = np.broadcast_to(u, (len(centers), len(u)))
    c_next, J = sys.linearized_map(centers, U)
    c_next = np.asarray(c_next, dtype=float).reshape(len(centers), n)
    J = np.asarray(J, dtype=float).reshape(len(centers), n, n)
    beta = np.asarray(sys.error_bound_map(h, u), dtype=float)
    h_next = np.abs(J) @ h + beta + sys.noise_bound
    lo = c_next - h_next
    hi = c_next + h_next
    ok = np.all(np.isfinite(lo) & np.isfinite(hi), axis=1)
    # images overshooting the bounds by rounding noise only are snapped back
    tol = BOUNDARY_TOL * np.maximum(1.0, np.maximum(np.abs(X.lower), np.abs(X.upper)))
    ok &= np.all(lo >= X.lower - tol, axis=1) & np.all(hi <= X.upper + tol, axis=1)
    lo = np.maximum(lo, X.lower)
    hi = np.minimum(hi, X.upper)
    rows = np.flatnonzero(ok)
    if len(rows) == 0:
        return np.zeros((0, 3), dtype=np.int64), 0
    k_lo = grid.index_of(lo[rows])
    k_hi = grid.index_of(hi[rows])
    if prior:
        base = grid.index_of(c_next[rows])
        widths = np.ceil(np.max(h_next[rows], axis=0) / (2 * h)).astype(np.int64) + 1
    else:
        base = grid.index_of(centers[rows])
        reach = np.max(np.abs(c_next[rows] - centers[rows]), axis=0) + np.max(h_next[rows], axis=0)
        widths = np.ceil(reach / (2 * h)).astype(np.int64) + 1
    offsets = _window_offsets(widths)
    per_chunk = max(1, CANDIDATE_BUDGET // len(offsets))
    out = []
    work = 0
    for s in range(0, len(rows), per_chunk):
        sl = slice(s, s + per_chunk)
        cand = base[sl, None, :] + offsets[None, :, :]
        work += cand.shape[0] * cand.shape[1]
        hit = np.all((cand >= k_lo[sl, None, :]) & (cand <= k_hi[sl, None, :]), axis=2)
        safe = np.where(hit[..., None], cand, grid.index_lo)
        ids = id_of_linear[grid.linear_index(safe)]
        blocked = np.any(hit & (ids < 0), axis=1)
        keep = hit & ~blocked[:, None]
        r, c = np.nonzero(keep)
        out.append(np.stack([src_ids[rows[sl]][r], np.zeros_like(r), ids[r, c]], axis=1))
    t = np.concatenate(out) if out else np.zeros((0, 3), dtype=np.int64)
    return t.astype(np.int64), work


def build_grid_abstraction(sys, params: GridAbstractionParams, state_set: Hyperrectangle | None = None):
    """Build ``(model, quantizer)``; ``model.build_stats`` holds counts and timings.

    ``state_set`` defaults to the grid bounds.
    """
    t0 = time.perf_counter()
    grid = params.state_grid
    X = state_set if state_set is not None else grid.bounds
    est = estimate_size(params)
    if params.cells_cap is not None and est.cells > params.cells_cap:
        raise SizeCapError(
            f"grid has {est.cells} cells ({est.cell_input_pairs} cell-input pairs), "
            f"above the cap of {params.cells_cap}",
            est,
        )
    if est.saturated:
        raise SizeCapError("grid size overflows", est)
    inputs = params.input_points()
    if len(inputs) == 0:
        raise ConfigurationError("the input grid has no points inside the input set")
    excl = excluded_cells(grid, params.obstacle_sets)
    id_of_linear = np.full(grid.num_cells, -1, dtype=np.int64)
    keep = np.flatnonzero(~excl)
    if len(keep) == 0:
        raise ConfigurationError("every grid cell meets an obstacle")
    id_of_linear[keep] = np.arange(len(keep))
    quantizer = GridQuantizer(grid, id_of_linear)
    centers = quantizer.centers()
    src_ids = np.arange(len(keep), dtype=np.int64)

    def one(j):
        t, work = _successors_for_input(sys, grid, id_of_linear, centers, src_ids, inputs[j], X,
                                        params.stability_prior)
        t[:, 1] = j
        return t, work

    batches = []
    work = 0
    total = len(inputs)
    if params.threads > 1:
        with ThreadPoolExecutor(max_workers=params.threads) as pool:
            results = pool.map(one, range(total))
            for j, (t, w) in enumerate(results):
                batches.append(t)
                work += w
                if params.progress:
                    params.progress((j + 1) * len(keep), total * len(keep))
    else:
        for j in range(total):
            t, w = one(j)
            batches.append(t)
            work += w
            if params.progress:
                params.progress((j + 1) * len(keep), total * len(keep))
    transitions = np.concatenate(batches)
    model = SymbolicModel(len(keep), total, transitions, GridCells(quantizer), [u.copy() for u in inputs])
    if model.num_transitions == 0:
        warnings.warn("grid abstraction has no available input at any cell", RuntimeWarning, stacklevel=2)
    model.build_stats = {
        "cells": int(len(keep)),
        "excluded_cells": int(excl.sum()),
        "inputs": int(total),
        "cell_input_pairs": int(len(keep) * total),
        "available_pairs": int(model.num_pairs),
        "transitions": int(model.num_transitions),
        "candidates_examined": int(work),
        "stability_prior": bool(params.stability_prior),
        "heuristic_growth_bound": bool(getattr(sys, "error_bound_heuristic", False)),
        "build_seconds": time.perf_counter() - t0,
    }
    return model, quantizer


def make_grid(bounds: Hyperrectangle, half_lengths, origin=None, anchor="corner") -> UniformGrid:
    """Grid over ``bounds`` with cells centered on ``origin``.

    Without an origin, ``anchor="corner"`` tiles from the lower corner
    (first center at ``lower + h``) and ``anchor="center"`` puts a cell
    center at the box center.
    """
    h = np.asarray(half_lengths, dtype=float)
    if h.shape != (bounds.dim,):
        raise ConfigurationError(f"grid half-lengths must have length {bounds.dim}")
    if origin is not None:
        o = np.asarray(origin, dtype=float)
    elif anchor == "corner":
        o = bounds.lower + h
    elif anchor == "center":
        o = bounds.center
    else:
        raise ConfigurationError(f"unknown grid anchor {anchor!r}")
    return UniformGrid(o, h, bounds)


