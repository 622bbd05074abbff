"""Hyperrectangle and ellipsoid set calculus, plus uniform grids.

Sets are immutable numpy-backed values. Membership of a hyperrectangle is the
closed box ``|x_i - c_i| <= h_i``; membership of an ellipsoid ``E(c, P)`` is
``(x - c)^T P (x - c) <= 1``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from symctl.errors import DegenerateError, IndeterminateError

SYMMETRY_TOL = 1e-10
PSD_THRESHOLD = -1e-10
CONTAINMENT_TOL = 1e-9
MAX_COND = 1e12
MAX_CORNER_DIM = 12


def _frozen(a, ndim=1):
    a = np.array(a, dtype=float, ndmin=ndim)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Hyperrectangle:
    center: np.ndarray
    half_lengths: np.ndarray

    def __post_init__(self):
        c = _frozen(self.center)
        h = _frozen(self.half_lengths)
        if c.ndim != 1 or c.shape != h.shape:
            raise ValueError(f"center {c.shape} and half_lengths {h.shape} must be equal-length vectors")
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise ValueError(f"half_lengths must be finite and nonnegative, got {h}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_lengths", h)

    @classmethod
    def from_bounds(cls, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        return cls((lower + upper) / 2, (upper - lower) / 2)

    @property
    def dim(self):
        return self.center.shape[0]

    @property
    def lower(self):
        return self.center - self.half_lengths

    @property
    def upper(self):
        return self.center + self.half_lengths

    @property
    def volume(self):
        return float(np.prod(2 * self.half_lengths))

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all(np.abs(x - self.center) <= self.half_lengths + tol, axis=-1)

    def contains_box(self, other: Hyperrectangle, tol=0.0):
        return bool(np.all(other.lower >= self.lower - tol) and np.all(other.upper <= self.upper + tol))

    def vertices(self):
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=self.dim)))
        return self.center + signs * self.half_lengths

    def sample(self, rng, n=None):
        size = (self.dim,) if n is None else (n, self.dim)
        return self.center + rng.uniform(-1.0, 1.0, size=size) * self.half_lengths

    def __repr__(self):
        return f"Hyperrectangle(center={self.center.tolist()}, half_lengths={self.half_lengths.tolist()})"

    def __eq__(self, other):
        return (
            isinstance(other, Hyperrectangle)
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.half_lengths, other.half_lengths)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: np.ndarray
    shape: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c = np.array(self.center, dtype=float, ndmin=1)
        P = np.array(self.shape, dtype=float, ndmin=2)
        n = c.shape[0]
        if c.ndim != 1 or P.shape != (n, n):
            raise ValueError(f"shape must be {n}x{n}, got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise DegenerateError("ellipsoid shape has non-finite entries")
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(P - P.T)) > SYMMETRY_TOL * scale:
            raise ValueError("ellipsoid shape matrix is not symmetric")
        P = (P + P.T) / 2
        eig = np.linalg.eigvalsh(P)
        if eig[0] <= 0:
            raise DegenerateError(f"ellipsoid shape is not positive definite (min eigenvalue {eig[0]:.3e})")
        c.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", P)
        self._cache["eig"] = eig

    @property
    def dim(self):
        return self.center.shape[0]

    @property
    def inverse_shape(self):
        if "inv" not in self._cache:
            self._cache["inv"] = np.linalg.inv(self.shape)
        return self._cache["inv"]

    def _chol(self):
        if "chol" not in self._cache:
            self._cache["chol"] = np.linalg.cholesky(self.shape)
        return self._cache["chol"]

    def quadratic_form(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return np.einsum("...i,ij,...j->...", d, self.shape, d)

    def contains(self, x, tol=0.0):
        return self.quadratic_form(x) <= 1.0 + tol

    def bounding_half_lengths(self):
        """Half-lengths of the smallest axis-aligned box enclosing the ellipsoid."""
        return np.sqrt(np.diag(self.inverse_shape))

    def bounding_box(self):
        return Hyperrectangle(self.center, self.bounding_half_lengths())

    def max_radius(self):
        return 1.0 / np.sqrt(self._cache["eig"][0])

    def min_radius(self):
        return 1.0 / np.sqrt(self._cache["eig"][-1])

    def support(self, eta):
        eta = np.asarray(eta, dtype=float)
        return eta @ self.center + np.sqrt(eta @ self.inverse_shape @ eta)

    @property
    def volume(self):
        from math import gamma, pi

        n = self.dim
        unit = pi ** (n / 2) / gamma(n / 2 + 1)
        return unit / np.sqrt(np.prod(self._cache["eig"]))

    def from_unit_ball(self, y):
        """Map points of the unit ball onto the ellipsoid (``x = c + C^{-T} y``)."""
        C = self._chol()
        y = np.asarray(y, dtype=float)
        d = np.linalg.solve(C.T, y.T).T
        return self.center + d

    def sample(self, rng, n=None):
        m = 1 if n is None else n
        g = rng.standard_normal((m, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = rng.uniform(0.0, 1.0, size=(m, 1)) ** (1.0 / self.dim)
        pts = self.from_unit_ball(g * r)
        return pts[0] if n is None else pts

    def boundary_sample(self, rng, n):
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return self.from_unit_ball(g)

    def scaled(self, factor):
        """Same center, semi-axes multiplied by ``factor``."""
        return Ellipsoid(self.center, self.shape / factor**2)

    def __repr__(self):
        return f"Ellipsoid(center={self.center.tolist()}, shape={self.shape.tolist()})"

    def __eq__(self, other):
        return (
            isinstance(other, Ellipsoid)
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.shape, other.shape)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class UniformGrid:
    """Uniform grid of half-open cells ``[c - h, c + h)`` with centers ``origin + 2 h k``.

    ``index_lo``/``index_hi`` delimit (inclusively) the multi-indices whose
    cells meet ``bounds`` with positive measure. Points of the closed bounds
    are clamped into that range, so a point on the upper face belongs to the
    last cell.
    """

    origin: np.ndarray
    cell_half_lengths: np.ndarray
    bounds: Hyperrectangle
    index_lo: np.ndarray = field(init=False)
    index_hi: np.ndarray = field(init=False)

    def __post_init__(self):
        o = _frozen(self.origin)
        h = _frozen(self.cell_half_lengths)
        if o.shape != h.shape or o.shape != self.bounds.center.shape:
            raise ValueError("grid origin, half-lengths and bounds must share a dimension")
        if np.any(h <= 0):
            raise ValueError(f"cell half-lengths must be positive, got {h}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "cell_half_lengths", h)
        eps = 1e-9
        lo = np.floor((self.bounds.lower - o - h) / (2 * h) + eps).astype(np.int64) + 1
        hi = np.ceil((self.bounds.upper - o + h) / (2 * h) - eps).astype(np.int64) - 1
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "index_lo", lo)
        object.__setattr__(self, "index_hi", hi)

    @property
    def dim(self):
        return self.origin.shape[0]

    @property
    def shape(self):
        return tuple(int(v) for v in self.index_hi - self.index_lo + 1)

    @property
    def num_cells(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def index_of(self, x):
        """Multi-index of the half-open cell containing ``x``.

        Coordinates inside the closed bounds are clamped to the index range;
        others are returned unchecked.
        """
        x = np.asarray(x, dtype=float)
        h = self.cell_half_lengths
        idx = np.floor((x - self.origin + h) / (2 * h)).astype(np.int64)
        inside = (x >= self.bounds.lower) & (x <= self.bounds.upper)
        return np.where(inside, np.clip(idx, self.index_lo, self.index_hi), idx)

    def in_range(self, k):
        k = np.asarray(k)
        return np.all((k >= self.index_lo) & (k <= self.index_hi), axis=-1)

    def linear_index(self, k):
        k = np.asarray(k, dtype=np.int64) - self.index_lo
        return np.ravel_multi_index(tuple(np.moveaxis(k, -1, 0)), self.shape)

    def multi_index(self, lin):
        parts = np.unravel_index(np.asarray(lin, dtype=np.int64), self.shape)
        return np.stack(parts, axis=-1) + self.index_lo

    def center_of(self, k):
        return self.origin + 2 * self.cell_half_lengths * np.asarray(k, dtype=float)

    def cell(self, k):
        return Hyperrectangle(self.center_of(k), self.cell_half_lengths)

    def all_centers(self):
        return self.center_of(self.multi_index(np.arange(self.num_cells)))

    def __repr__(self):
        return (
            f"UniformGrid(origin={self.origin.tolist()}, h={self.cell_half_lengths.tolist()}, "
            f"shape={self.shape})"
        )


def grid_point_to_cell(grid: UniformGrid, x):
    """Multi-index (tuple) of the cell holding ``x``, or ``None`` outside ``grid.bounds``."""
    x = np.asarray(x, dtype=float)
    if not grid.bounds.contains(x):
        return None
    k = grid.index_of(x)
    if not grid.in_range(k):
        return None
    return tuple(int(v) for v in k)


def hyperrectangle_image_overapprox(box: Hyperrectangle, u, sys) -> Hyperrectangle:
    """Box enclosing ``F(box, u)`` via ``|J| h + error_bound(h, u) + W`` around ``f(c, u)``."""
    u = np.asarray(u, dtype=float)
    c_next, J = sys.linearized_map(box.center, u)
    if not np.all(np.isfinite(J)):
        from symctl.errors import NumericalBlowupError

        raise NumericalBlowupError("non-finite Jacobian in image overapproximation")
    h = box.half_lengths
    h_next = np.abs(J) @ h + sys.error_bound_map(h, u) + sys.noise_bound
    return Hyperrectangle(c_next, h_next)


def ellipsoid_affine_image(E: Ellipsoid, M, b) -> Ellipsoid:
    """Exact image ``{M x + b : x in E}`` for invertible ``M``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    b = np.asarray(b, dtype=float)
    if M.shape != (E.dim, E.dim):
        raise ValueError(f"map must be {E.dim}x{E.dim}, got {M.shape}")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond >= MAX_COND:
        raise DegenerateError(f"affine map is singular (condition number {cond:.3e})")
    Minv = np.linalg.inv(M)
    P = Minv.T @ E.shape @ Minv
    return Ellipsoid(M @ E.center + b, (P + P.T) / 2)


def _homogeneous(E: Ellipsoid, level):
    P = E.shape
    Pc = P @ E.center
    n = E.dim
    A = np.empty((n + 1, n + 1))
    A[:n, :n] = P
    A[:n, n] = -Pc
    A[n, :n] = -Pc
    A[n, n] = E.center @ Pc - level
    return A / np.linalg.norm(A)


def ellipsoid_contains_ellipsoid(inner: Ellipsoid, outer: Ellipsoid, tol=CONTAINMENT_TOL, max_steps=200):
    """Decide ``inner ⊆ outer`` (up to ``tol`` on the outer quadratic form).

    Lossless S-procedure: containment holds iff some ``lam in (0, 1)`` makes
    ``lam A_in - (1 - lam) A_out`` positive semidefinite, where ``A`` are the
    homogeneous quadratic-form matrices. The minimum eigenvalue is concave in
    ``lam``, so a supergradient bisection finds its maximum.
    """
    if outer.quadratic_form(inner.center) > 1.0 + tol:
        return False
    A1 = _homogeneous(inner, 1.0)
    A2 = _homogeneous(outer, 1.0 + tol)
    lo, hi = 0.0, 1.0
    for _ in range(max_steps):
        lam = 0.5 * (lo + hi)
        G = lam * A1 - (1.0 - lam) * A2
        w, V = np.linalg.eigh(G)
        if not np.isfinite(w[0]):
            raise IndeterminateError("non-finite eigenvalue in containment search")
        if w[0] >= PSD_THRESHOLD:
            return True
        v = V[:, 0]
        slope = v @ (A1 + A2) @ v
        if slope > 0:
            lo = lam
        else:
            hi = lam
        if hi - lo < 1e-13:
            return False
    raise IndeterminateError(f"containment search did not converge in {max_steps} steps")


def box_corner_norm(shape, margin):
    """``max_d sqrt(d^T P d)`` over the corners of ``[-margin, margin]``."""
    margin = np.asarray(margin, dtype=float)
    n = margin.shape[0]
    if not np.any(margin):
        return 0.0
    if n > MAX_CORNER_DIM:
        # triangle inequality over axes, still an upper bound
        return float(np.sum(margin * np.sqrt(np.diag(shape))))
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
    D = signs * margin
    return float(np.sqrt(np.max(np.einsum("ki,ij,kj->k", D, shape, D))))


def ellipsoid_inflate(E: Ellipsoid, margin) -> Ellipsoid:
    """Ellipsoid containing the Minkowski sum of ``E`` and the box ``[-margin, margin]``."""
    margin = np.asarray(margin, dtype=float)
    if np.any(margin < 0):
        raise ValueError("inflation margin must be nonnegative")
    rho = box_corner_norm(E.shape, margin)
    if rho == 0.0:
        return E
    return Ellipsoid(E.center, E.shape / (1.0 + rho) ** 2)


class Relation(enum.Enum):
    DISJOINT = "disjoint"
    INTERSECTING = "intersecting"
    UNKNOWN = "unknown"


def _box_box(a: Hyperrectangle, b: Hyperrectangle):
    if np.any(np.abs(a.center - b.center) > a.half_lengths + b.half_lengths):
        return Relation.DISJOINT
    return Relation.INTERSECTING


def _ellipsoid_box(E: Ellipsoid, B: Hyperrectangle, iters=200):
    if _box_box(E.bounding_box(), B) is Relation.DISJOINT:
        return Relation.DISJOINT
    if B.contains(E.center) or E.contains(B.center):
        return Relation.INTERSECTING
    dist = np.linalg.norm(E.center - B.center)
    if dist > E.max_radius() + np.linalg.norm(B.half_lengths):
        return Relation.DISJOINT
    # minimize the ellipsoid form over the box by projected gradient, then use
    # the gradient at the minimizer as a separating direction
    P = E.shape
    step = 1.0 / np.linalg.eigvalsh(P)[-1]
    x = np.clip(E.center, B.lower, B.upper)
    for _ in range(iters):
        x_new = np.clip(x - step * (P @ (x - E.center)), B.lower, B.upper)
        if np.max(np.abs(x_new - x)) < 1e-14:
            x = x_new
            break
        x = x_new
    if E.quadratic_form(x) <= 1.0:
        return Relation.INTERSECTING
    eta = P @ (x - E.center)
    max_e = E.support(eta)
    min_b = eta @ B.center - np.abs(eta) @ B.half_lengths
    if max_e < min_b - 1e-12 * max(1.0, abs(min_b)):
        return Relation.DISJOINT
    return Relation.UNKNOWN


def _ellipsoid_ellipsoid(E1: Ellipsoid, E2: Ellipsoid, iters=80):
    if _box_box(E1.bounding_box(), E2.bounding_box()) is Relation.DISJOINT:
        return Relation.DISJOINT
    if E1.contains(E2.center) or E2.contains(E1.center):
        return Relation.INTERSECTING
    if np.linalg.norm(E1.center - E2.center) > E1.max_radius() + E2.max_radius():
        return Relation.DISJOINT
    # dual certificate: disjoint iff max_lam min_x lam q1 + (1 - lam) q2 > 1
    P1, P2, c1, c2 = E1.shape, E2.shape, E1.center, E2.center

    def phi(lam):
        Pl = lam * P1 + (1 - lam) * P2
        x = np.linalg.solve(Pl, lam * (P1 @ c1) + (1 - lam) * (P2 @ c2))
        return lam * E1.quadratic_form(x) + (1 - lam) * E2.quadratic_form(x), x

    g = (np.sqrt(5.0) - 1) / 2
    a, b = 0.0, 1.0
    x1, x2 = b - g * (b - a), a + g * (b - a)
    f1, _ = phi(x1)
    f2, _ = phi(x2)
    for _ in range(iters):
        if max(f1, f2) > 1.0 + 1e-12:
            return Relation.DISJOINT
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2, _ = phi(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1, _ = phi(x1)
    best, x = phi(0.5 * (a + b))
    if best > 1.0 + 1e-12:
        return Relation.DISJOINT
    if E1.contains(x) and E2.contains(x):
        return Relation.INTERSECTING
    return Relation.UNKNOWN


def disjoint(set_a, set_b) -> Relation:
    """Tri-state disjointness test; ``UNKNOWN`` must be read as intersecting.

    Box pairs are decided exactly. Pairs involving an ellipsoid run cheap
    separation tests first, then a certificate search that only reports
    ``DISJOINT`` when a separating witness was actually found.
    """
    if isinstance(set_a, Hyperrectangle) and isinstance(set_b, Hyperrectangle):
        return _box_box(set_a, set_b)
    if isinstance(set_a, Ellipsoid) and isinstance(set_b, Hyperrectangle):
        return _ellipsoid_box(set_a, set_b)
    if isinstance(set_a, Hyperrectangle) and isinstance(set_b, Ellipsoid):
        return _ellipsoid_box(set_b, set_a)
    if isinstance(set_a, Ellipsoid) and isinstance(set_b, Ellipsoid):
        return _ellipsoid_ellipsoid(set_a, set_b)
    raise TypeError(f"unsupported set types {type(set_a).__name__}, {type(set_b).__name__}")


def set_contains_box(region, box: Hyperrectangle, tol=0.0):
    """Whether the convex ``region`` contains ``box`` (checked on its vertices)."""
    if isinstance(region, Hyperrectangle):
        return region.contains_box(box, tol)
    return bool(np.all(region.contains(box.vertices(), tol)))


def max_convex_quadratic_over_ellipsoid(H, g, const, E: Ellipsoid):
    """Maximum of ``d^T H d + 2 g^T d + const`` over ``d^T P d <= 1`` (``H`` PSD).

    Uses the trust-region dual ``min_{mu >= lmax} mu + sum beta_i^2 / (mu - l_i)``;
    any feasible ``mu`` gives an upper bound, and the minimizing one is exact.
    """
    C = E._chol()
    Linv = np.linalg.inv(C.T)  # d = Linv @ y, |y| <= 1
    A = Linv.T @ np.asarray(H, dtype=float) @ Linv
    A = (A + A.T) / 2
    b = Linv.T @ np.asarray(g, dtype=float)
    lam, V = np.linalg.eigh(A)
    beta2 = (V.T @ b) ** 2
    lmax = lam[-1]
    nb = np.sqrt(beta2.sum())
    if nb == 0.0:
        return float(max(lmax, 0.0) + const)

    def dual(mu):
        gap = mu - lam
        return mu + np.sum(np.where(beta2 > 0, beta2 / np.maximum(gap, 1e-300), 0.0))

    def slope(mu):
        gap = mu - lam
        return 1.0 - np.sum(np.where(beta2 > 0, beta2 / np.maximum(gap, 1e-300) ** 2, 0.0))

    lo = lmax + 1e-15 * max(1.0, abs(lmax))
    hi = lmax + nb
    if slope(lo) >= 0:
        return float(dual(lo) + const)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if slope(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return float(dual(hi) + const)
