"""Concrete control problems, built-in benchmarks and problem-file loading.

Problem files are TOML with a ``schema_version``. Any string of the form
``"$name"`` is replaced by the value of ``name`` from the ``[parameters]``
table (or a command-line override), which lets benchmark skeletons ship
without numeric constants. See ``docs/problem_schema.md`` for the grammar.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Literal, Optional, Union

import numpy as np
import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from symctl.errors import ConfigurationError, SchemaError
from symctl.geometry import Ellipsoid, Hyperrectangle
from symctl.grid_abstraction import GrowthSpec, hessian_remainder, zero_remainder
from symctl.system import SampledSystem, TransitionControlSystem, discrete_system, sample_system

SCHEMA_VERSION = 1


@dataclass
class ControlProblem:
    """Reach-avoid or safety problem over a sampled system.

    ``cost_weights`` is the quadratic description ``(Q, R, offset)`` of the
    stage cost (state cost already folded in) when one exists.
    """

    name: str
    system: SampledSystem
    state_set: Hyperrectangle
    input_set: Hyperrectangle
    kind: str
    initial_set: object
    target_set: object = None
    obstacles: tuple = ()
    safe_set: object = None
    transition_cost: Callable | None = None
    state_cost: Callable | None = None
    cost_weights: tuple | None = None
    time: int | None = None
    config: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("reach_avoid", "safety"):
            raise ConfigurationError(f"unknown problem kind {self.kind!r}")
        if self.kind == "reach_avoid" and self.target_set is None:
            raise ConfigurationError("a reach-avoid problem needs a target set")
        if self.kind == "safety" and self.safe_set is None:
            raise ConfigurationError("a safety problem needs a safe set")
        if self.transition_cost is None and self.cost_weights is not None:
            self.transition_cost = quadratic_cost(*self.cost_weights)
        if self.transition_cost is None:
            self.transition_cost = lambda x, u: 1.0
        self.obstacles = tuple(self.obstacles)

    def stage_cost(self, x, u):
        c = self.transition_cost(x, u)
        if self.state_cost is not None:
            c = c + self.state_cost(x)
        return c

    def concrete(self) -> TransitionControlSystem:
        return TransitionControlSystem.from_sampled(self.system, self.state_set, self.input_set)

    def containment_issues(self):
        """Named sets not contained in the state set (empty when consistent)."""
        issues = []
        named = [("initial", self.initial_set), ("target", self.target_set), ("safe", self.safe_set)]
        named += [(f"obstacle {i}", o) for i, o in enumerate(self.obstacles)]
        for name, s in named:
            if s is None:
                continue
            box = s if isinstance(s, Hyperrectangle) else s.bounding_box()
            if not self.state_set.contains_box(box, 1e-12):
                issues.append(name)
        return issues


def quadratic_cost(Q, R, offset):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))

    def cost(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", x, Q, x) + np.einsum("...i,ij,...j->...", u, R, u) + offset

    return cost


# -- polynomial dynamics ---------------------------------------------------

@dataclass(frozen=True)
class PolynomialMap:
    """``f_i(x, u) = sum coef * prod x^a * prod u^b`` over the terms of output ``i``."""

    state_dim: int
    input_dim: int
    outputs: np.ndarray
    coefficients: np.ndarray
    state_powers: np.ndarray
    input_powers: np.ndarray

    @classmethod
    def from_terms(cls, state_dim, input_dim, terms):
        out = np.array([t[0] for t in terms], dtype=np.int64)
        coef = np.array([t[1] for t in terms], dtype=float)
        sp = np.array([t[2] for t in terms], dtype=np.int64).reshape(-1, state_dim)
        ip = np.array([t[3] for t in terms], dtype=np.int64).reshape(-1, input_dim)
        return cls(state_dim, input_dim, out, coef, sp, ip)

    def _monomials(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        xs = np.prod(x[..., None, :] ** self.state_powers, axis=-1)
        us = np.prod(u[..., None, :] ** self.input_powers, axis=-1)
        return xs, us

    def __call__(self, x, u):
        xs, us = self._monomials(x, u)
        vals = self.coefficients * xs * us
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (self.state_dim,)
        out = np.zeros(shape)
        for i in range(self.state_dim):
            out[..., i] = np.sum(vals[..., self.outputs == i], axis=-1)
        return out

    def jacobian(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        n = self.state_dim
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        J = np.zeros(shape + (n, n))
        _, us = self._monomials(x, u)
        for k in range(n):
            p = self.state_powers.copy()
            a = p[:, k].astype(float)
            p[:, k] = np.maximum(p[:, k] - 1, 0)
            xs = np.prod(x[..., None, :] ** p, axis=-1)
            vals = self.coefficients * a * xs * us
            for i in range(n):
                J[..., i, k] = np.sum(vals[..., self.outputs == i], axis=-1)
        return J

    def input_matrix(self):
        """Constant ``B`` when the map is ``phi(x) + B u``, else ``None``."""
        deg_u = self.input_powers.sum(axis=1)
        deg_x = self.state_powers.sum(axis=1)
        if np.any(deg_u > 1) or np.any((deg_u == 1) & (deg_x > 0)):
            return None
        B = np.zeros((self.state_dim, self.input_dim))
        for t in np.flatnonzero(deg_u == 1):
            B[self.outputs[t], int(np.argmax(self.input_powers[t]))] += self.coefficients[t]
        return B

    def remainder_bound(self, state_set: Hyperrectangle):
        """Taylor remainder bound ``1/2 sum_jk M_ijk(h) h_j h_k`` valid for cells inside ``state_set``.

        ``M_ijk(h)`` bounds the second derivatives over the state set grown by
        ``h``; input factors are evaluated at the actual input.
        """
        n = self.state_dim
        second = []
        for j in range(n):
            for k in range(n):
                p = self.state_powers.copy()
                a = p[:, j].astype(float)
                p[:, j] = np.maximum(p[:, j] - 1, 0)
                b = p[:, k].astype(float)
                p[:, k] = np.maximum(p[:, k] - 1, 0)
                mult = self.coefficients * a * b
                live = mult != 0
                second.append((j, k, mult[live], p[live], self.outputs[live], self.input_powers[live]))
        if all(len(s[2]) == 0 for s in second):
            return zero_remainder
        lo0, hi0 = state_set.lower, state_set.upper

        def beta(h, u):
            h = np.asarray(h, dtype=float)
            u = np.abs(np.asarray(u, dtype=float))
            reach = np.maximum(np.abs(lo0 - h), np.abs(hi0 + h))
            M = np.zeros((n, n, n))
            for j, k, mult, p, outs, ip in second:
                if len(mult) == 0:
                    continue
                sup = np.abs(mult) * np.prod(reach ** p, axis=1) * np.prod(u ** ip, axis=1)
                for i in range(n):
                    M[i, j, k] += np.sum(sup[outs == i])
            return 0.5 * np.einsum("ijk,j,k->i", M, h, h)

        return beta


# -- built-in problems -----------------------------------------------------

MU = 5e-5


def nonlinear_example_map(x, u, mu=MU):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    f1 = 1.1 * x1 - 0.2 * x2 - mu * x2**3 + u[..., 0]
    f2 = 1.1 * x2 + 0.2 * x1 + mu * x1**3 + u[..., 1]
    return np.stack(np.broadcast_arrays(f1, f2), axis=-1)


def nonlinear_example_jacobian(x, u, mu=MU):
    x = np.asarray(x, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], np.shape(u)[:-1])
    J = np.empty(shape + (2, 2))
    J[..., 0, 0] = 1.1
    J[..., 0, 1] = -0.2 - 3 * mu * x[..., 1] ** 2
    J[..., 1, 0] = 0.2 + 3 * mu * x[..., 0] ** 2
    J[..., 1, 1] = 1.1
    return J


def builtin_nonlinear_example() -> ControlProblem:
    X = Hyperrectangle.from_bounds([-20.0, -20.0], [20.0, 20.0])
    U = Hyperrectangle.from_bounds([-10.0, -10.0], [10.0, 10.0])
    r = X.half_lengths + X.center

    def beta(h, u):
        # only d2f1/dx2^2 = -6 mu x2 and d2f2/dx1^2 = 6 mu x1 are nonzero
        h = np.asarray(h, dtype=float)
        return 0.5 * 6 * MU * np.array([(r[1] + h[1]) * h[1] ** 2, (r[0] + h[0]) * h[0] ** 2])

    sys = discrete_system(nonlinear_example_map, nonlinear_example_jacobian, np.zeros(2),
                          GrowthSpec("jacobian_plus_remainder", bound=beta, state_domain=X, input_domain=U),
                          state_dim=2, input_dim=2, input_matrix=np.eye(2))
    return ControlProblem(
        name="nonlinear",
        system=sys,
        state_set=X,
        input_set=U,
        kind="reach_avoid",
        initial_set=Ellipsoid([-10.0, -10.0], 10.0 * np.eye(2)),
        target_set=Ellipsoid([10.0, 10.0], np.eye(2)),
        obstacles=(Ellipsoid([0.0, 0.0], 0.02 * np.eye(2)),),
        cost_weights=(np.eye(2), np.eye(2), 1.0),
    )


def affine_system(A, B, c=None, noise=None, growth=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    c = np.zeros(n) if c is None else np.asarray(c, dtype=float)

    def f(x, u):
        return np.asarray(x, dtype=float) @ A.T + np.asarray(u, dtype=float) @ B.T + c

    def jac(x, u):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.broadcast_to(A, shape + (n, n))

    return discrete_system(f, jac, np.zeros(n) if noise is None else noise,
                           growth or GrowthSpec.exact_linear(), state_dim=n, input_dim=m, input_matrix=B)


def builtin_double_integrator(dt=0.1) -> ControlProblem:
    A = [[1.0, dt], [0.0, 1.0]]
    B = [[dt**2 / 2], [dt]]
    X = Hyperrectangle.from_bounds([-2.0, -2.0], [2.0, 2.0])
    return ControlProblem(
        name="double_integrator",
        system=affine_system(A, B),
        state_set=X,
        input_set=Hyperrectangle.from_bounds([-1.0], [1.0]),
        kind="reach_avoid",
        initial_set=X,
        target_set=Hyperrectangle.from_bounds([-0.2, -0.2], [0.2, 0.2]),
        cost_weights=(np.zeros((2, 2)), np.zeros((1, 1)), 1.0),
    )


def unicycle_field(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v, w = np.broadcast_arrays(u[..., 0], u[..., 1])
    th = x[..., 2]
    return np.stack(np.broadcast_arrays(v * np.cos(th), v * np.sin(th), w + 0 * th), axis=-1)


def unicycle_jacobian(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    J = np.zeros(shape + (3, 3))
    J[..., 0, 2] = -u[..., 0] * np.sin(x[..., 2])
    J[..., 1, 2] = u[..., 0] * np.cos(x[..., 2])
    return J


BUILTIN_FIELDS = {
    "unicycle": (unicycle_field, unicycle_jacobian, 3, 2),
}


# -- problem files ---------------------------------------------------------

Vector = list[float]
Matrix = list[list[float]]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BoxSpec(Strict):
    type: Literal["box"]
    lower: Optional[Vector] = None
    upper: Optional[Vector] = None
    center: Optional[Vector] = None
    half_lengths: Optional[Vector] = None

    @field_validator("half_lengths")
    @classmethod
    def _nonneg(cls, v):
        if v is not None and any(x < 0 for x in v):
            raise ValueError("half-lengths must be nonnegative")
        return v

    @model_validator(mode="after")
    def _one_form(self):
        bounds = self.lower is not None and self.upper is not None
        centered = self.center is not None and self.half_lengths is not None
        if bounds == centered:
            raise ValueError("give either lower/upper or center/half_lengths")
        if bounds and (len(self.lower) != len(self.upper) or any(a > b for a, b in zip(self.lower, self.upper))):
            raise ValueError("lower must not exceed upper and both need the same length")
        if centered and len(self.center) != len(self.half_lengths):
            raise ValueError("center and half_lengths need the same length")
        return self

    def build(self):
        if self.lower is not None:
            return Hyperrectangle.from_bounds(self.lower, self.upper)
        return Hyperrectangle(self.center, self.half_lengths)


class EllipsoidSpec(Strict):
    type: Literal["ellipsoid"]
    center: Vector
    shape: Matrix

    def build(self):
        return Ellipsoid(self.center, self.shape)


SetSpec = Union[BoxSpec, EllipsoidSpec]


class TermSpec(Strict):
    output: int = Field(ge=0)
    coefficient: float
    state_powers: list[int]
    input_powers: list[int]

    @field_validator("state_powers", "input_powers")
    @classmethod
    def _nonneg(cls, v):
        if any(p < 0 for p in v):
            raise ValueError("powers must be nonnegative")
        return v


class ModeSpec(Strict):
    A: Matrix
    b: Vector


class DynamicsSpec(Strict):
    type: Literal["polynomial", "affine", "switched_affine", "builtin"]
    time: Literal["discrete", "continuous"] = "discrete"
    time_step: Optional[float] = Field(default=None, gt=0)
    substeps: int = Field(default=5, ge=1)
    state_dim: int = Field(ge=1)
    input_dim: int = Field(ge=1)
    noise: Optional[Vector] = None
    terms: Optional[list[TermSpec]] = None
    A: Optional[Matrix] = None
    B: Optional[Matrix] = None
    c: Optional[Vector] = None
    modes: Optional[list[ModeSpec]] = None
    builtin: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        n, m = self.state_dim, self.input_dim
        if self.time == "continuous" and self.time_step is None:
            raise ValueError("continuous dynamics need time_step")
        need = {"polynomial": "terms", "affine": "A", "switched_affine": "modes", "builtin": "builtin"}[self.type]
        if getattr(self, need) is None:
            raise ValueError(f"{self.type} dynamics need '{need}'")
        if self.noise is not None and (len(self.noise) != n or any(w < 0 for w in self.noise)):
            raise ValueError(f"noise must be {n} nonnegative numbers")
        if self.terms is not None:
            for i, t in enumerate(self.terms):
                if t.output >= n or len(t.state_powers) != n or len(t.input_powers) != m:
                    raise ValueError(f"term {i} does not match state_dim={n}, input_dim={m}")
        if self.type == "affine":
            if _shape(self.A) != (n, n) or self.B is None or _shape(self.B) != (n, m):
                raise ValueError(f"affine dynamics need A {n}x{n} and B {n}x{m}")
        if self.modes is not None:
            if m != 1:
                raise ValueError("switched_affine dynamics use a single mode-index input")
            for i, md in enumerate(self.modes):
                if _shape(md.A) != (n, n) or len(md.b) != n:
                    raise ValueError(f"mode {i} needs A {n}x{n} and b of length {n}")
        if self.builtin is not None:
            if self.builtin not in BUILTIN_FIELDS:
                raise ValueError(f"unknown builtin dynamics {self.builtin!r}; known: {sorted(BUILTIN_FIELDS)}")
            _, _, bn, bm = BUILTIN_FIELDS[self.builtin]
            if (bn, bm) != (n, m):
                raise ValueError(f"builtin {self.builtin!r} has state_dim={bn}, input_dim={bm}")
        return self


def _shape(M):
    if M is None:
        return None
    rows = len(M)
    cols = {len(r) for r in M}
    return (rows, cols.pop()) if len(cols) == 1 else (rows, -1)


class GrowthConfig(Strict):
    kind: Literal["auto", "exact_linear", "sampled", "hessian"] = "auto"
    hessian_bounds: Optional[list[Matrix]] = None
    samples: int = Field(default=200, ge=1)
    safety_factor: float = Field(default=2.0, ge=1.0)
    validation_samples: int = Field(default=100, ge=0)


class SetsSpec(Strict):
    state: BoxSpec
    input: BoxSpec
    initial: SetSpec = Field(discriminator="type")
    target: Optional[SetSpec] = Field(default=None, discriminator="type")
    safe: Optional[SetSpec] = Field(default=None, discriminator="type")
    obstacles: list[SetSpec] = Field(default_factory=list)


class QuadraticSpec(Strict):
    state_weight: Optional[Matrix] = None
    input_weight: Optional[Matrix] = None
    offset: float = Field(default=0.0, ge=0.0)


class StateCostSpec(Strict):
    weight: Optional[Matrix] = None
    offset: float = Field(default=0.0, ge=0.0)


class CostSpec(Strict):
    transition: QuadraticSpec = Field(default_factory=lambda: QuadraticSpec(offset=1.0))
    state: Optional[StateCostSpec] = None


class ProblemSpec(Strict):
    kind: Literal["reach_avoid", "safety"]
    horizon: Optional[int] = Field(default=None, ge=1)


class GridSpec(Strict):
    state_half_lengths: Vector
    state_origin: Optional[Vector] = None
    input_half_lengths: Vector
    input_origin: Optional[Vector] = None
    stability_prior: bool = True
    cells_cap: Optional[int] = Field(default=None, ge=1)

    @field_validator("state_half_lengths", "input_half_lengths")
    @classmethod
    def _positive(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("grid half-lengths must be positive")
        return v


class LazySpec(Strict):
    max_iterations: int = Field(default=2000, ge=1)
    initial_shape_scale: float = Field(default=4.0, gt=0)
    shrink_factor: float = Field(default=0.7, gt=0, lt=1)
    goal_bias: float = Field(default=0.2, ge=0, le=1)
    input_margin: float = Field(default=0.7, gt=0, le=1)
    max_shrinks: int = Field(default=14, ge=1)


class SolverSpec(Strict):
    default: Literal["grid", "lazy-ellipsoid"] = "grid"
    seed: int = 0
    check_samples: int = Field(default=10000, ge=0)


class ProblemFile(Strict):
    schema_version: int
    name: str
    description: Optional[str] = None
    parameters: dict[str, Union[float, list[float], list[list[float]]]] = Field(default_factory=dict)
    dynamics: DynamicsSpec
    growth: GrowthConfig = Field(default_factory=GrowthConfig)
    sets: SetsSpec
    problem: ProblemSpec
    cost: CostSpec = Field(default_factory=CostSpec)
    grid: Optional[GridSpec] = None
    lazy: LazySpec = Field(default_factory=LazySpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; this build reads version {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _dims(self):
        n, m = self.dynamics.state_dim, self.dynamics.input_dim
        checks = [("sets.state", self.sets.state, n), ("sets.input", self.sets.input, m),
                  ("sets.initial", self.sets.initial, n), ("sets.target", self.sets.target, n),
                  ("sets.safe", self.sets.safe, n)]
        checks += [(f"sets.obstacles.{i}", o, n) for i, o in enumerate(self.sets.obstacles)]
        for where, s, d in checks:
            if s is None:
                continue
            v = s.center if s.center is not None else s.lower
            if len(v) != d:
                raise ValueError(f"{where} has dimension {len(v)}, expected {d}")
        if self.problem.kind == "reach_avoid" and self.sets.target is None:
            raise ValueError("reach_avoid problems need sets.target")
        if self.problem.kind == "safety" and self.sets.safe is None:
            raise ValueError("safety problems need sets.safe")
        if self.grid is not None:
            if len(self.grid.state_half_lengths) != n or len(self.grid.input_half_lengths) != m:
                raise ValueError("grid half-lengths do not match the system dimensions")
        return self


@dataclass
class SolverConfig:
    solver: str
    seed: int
    check_samples: int
    grid: GridSpec | None
    lazy: LazySpec


def _substitute(node, params, path):
    if isinstance(node, dict):
        return {k: _substitute(v, params, f"{path}.{k}" if path else k) for k, v in node.items()}
    if isinstance(node, list):
        return [_substitute(v, params, f"{path}.{i}") for i, v in enumerate(node)]
    if isinstance(node, str) and node.startswith("$"):
        name = node[1:]
        if name not in params:
            raise SchemaError(f"{path}: parameter '{name}' is not defined (supply it with --param {name}=...)",
                              location=path)
        return params[name]
    return node


def parse_override(text):
    """``name=value`` with ``value`` in TOML syntax."""
    name, sep, value = text.partition("=")
    if not sep or not name.strip():
        raise SchemaError(f"parameter override {text!r} is not of the form name=value")
    try:
        return name.strip(), tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError as exc:
        raise SchemaError(f"parameter override {text!r}: {exc}") from exc


def _format_errors(exc: ValidationError):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines), ".".join(str(p) for p in exc.errors()[0]["loc"])


def parse_problem_text(text, overrides=None, source="<string>"):
    """Validate TOML text. Returns ``(ProblemFile, raw dict)`` with parameters resolved."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise SchemaError(f"{source}: {exc}", location=str(exc)) from exc
    params = dict(raw.get("parameters", {}) or {})
    params.update(overrides or {})
    if overrides:
        raw = dict(raw)
        raw["parameters"] = params
    body = {k: v for k, v in raw.items() if k != "parameters"}
    resolved = _substitute(body, params, "")
    resolved["parameters"] = params
    try:
        spec = ProblemFile.model_validate(resolved)
    except ValidationError as exc:
        msg, loc = _format_errors(exc)
        raise SchemaError(f"{source}: {msg}", location=loc) from exc
    return spec, raw


def _growth_spec(spec: ProblemFile, X, U, poly: PolynomialMap | None, affine: bool):
    g = spec.growth
    common = dict(state_domain=X, input_domain=U, validation_samples=g.validation_samples, seed=spec.solver.seed)
    kind = g.kind
    if kind == "auto":
        kind = "exact_linear" if affine else ("polynomial" if poly is not None else "sampled")
    if kind == "exact_linear":
        if not affine:
            raise ConfigurationError("growth.kind = exact_linear is only valid for affine dynamics")
        return GrowthSpec("jacobian_plus_remainder", bound=zero_remainder, **common)
    if kind == "polynomial":
        if spec.dynamics.time == "continuous":
            return GrowthSpec("jacobian_plus_remainder", samples=g.samples, safety_factor=g.safety_factor, **common)
        return GrowthSpec("jacobian_plus_remainder", bound=poly.remainder_bound(X), **common)
    if kind == "hessian":
        if g.hessian_bounds is None:
            raise ConfigurationError("growth.kind = hessian needs growth.hessian_bounds")
        M = np.asarray(g.hessian_bounds, dtype=float)
        n = X.dim
        if M.shape != (n, n, n) or np.any(M < 0):
            raise ConfigurationError(f"growth.hessian_bounds must be a nonnegative {n}x{n}x{n} array")
        return GrowthSpec("user_growth_bound", bound=hessian_remainder(M), **common)
    return GrowthSpec("jacobian_plus_remainder", samples=g.samples, safety_factor=g.safety_factor, **common)


def _build_system(spec: ProblemFile, X, U):
    d = spec.dynamics
    n, m = d.state_dim, d.input_dim
    noise = np.zeros(n) if d.noise is None else np.asarray(d.noise, dtype=float)
    poly = None
    affine = d.type in ("affine", "switched_affine")
    B = None
    if d.type == "polynomial":
        poly = PolynomialMap.from_terms(n, m, [(t.output, t.coefficient, t.state_powers, t.input_powers)
                                               for t in d.terms])
        fmap, jac, B = poly, poly.jacobian, poly.input_matrix()
        if np.all(poly.state_powers.sum(axis=1) <= 1) and B is not None:
            affine = True
    elif d.type == "affine":
        A = np.asarray(d.A, dtype=float)
        B = np.asarray(d.B, dtype=float)
        c = np.zeros(n) if d.c is None else np.asarray(d.c, dtype=float)

        def fmap(x, u):
            return np.asarray(x, dtype=float) @ A.T + np.asarray(u, dtype=float) @ B.T + c

        def jac(x, u):
            return np.broadcast_to(A, np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (n, n))
    elif d.type == "switched_affine":
        As = np.array([md.A for md in d.modes], dtype=float)
        bs = np.array([md.b for md in d.modes], dtype=float)

        def mode(u):
            k = np.rint(np.asarray(u, dtype=float)[..., 0]).astype(np.int64)
            if np.any((k < 0) | (k >= len(As))):
                raise ConfigurationError(f"mode index outside 0..{len(As) - 1}")
            return k

        def fmap(x, u):
            k = mode(u)
            x = np.asarray(x, dtype=float)
            return np.einsum("...ij,...j->...i", As[k], x) + bs[k]

        def jac(x, u):
            k = mode(u)
            return np.broadcast_to(As[k], np.broadcast_shapes(np.shape(x)[:-1], k.shape) + (n, n))
    else:
        fmap, jac, _, _ = BUILTIN_FIELDS[d.builtin]
    growth = _growth_spec(spec, X, U, poly, affine)
    if d.time == "continuous":
        # the RK4-sampled map is not input-affine with a constant matrix in general
        return sample_system(fmap, jac, d.time_step, noise, growth, state_dim=n, input_dim=m,
                             substeps=d.substeps)
    return discrete_system(fmap, jac, noise, growth, state_dim=n, input_dim=m, input_matrix=B)


def _quadratic(spec: ProblemFile, n, m):
    t = spec.cost.transition
    Q = np.zeros((n, n)) if t.state_weight is None else np.asarray(t.state_weight, dtype=float)
    R = np.zeros((m, m)) if t.input_weight is None else np.asarray(t.input_weight, dtype=float)
    if Q.shape != (n, n) or R.shape != (m, m):
        raise SchemaError(f"cost weights must be {n}x{n} and {m}x{m}", location="cost.transition")
    off = t.offset
    transition = quadratic_cost(Q, R, t.offset)
    state_cost = None
    if spec.cost.state is not None:
        Qs = np.zeros((n, n)) if spec.cost.state.weight is None else np.asarray(spec.cost.state.weight, dtype=float)
        if Qs.shape != (n, n):
            raise SchemaError(f"state cost weight must be {n}x{n}", location="cost.state.weight")
        so = spec.cost.state.offset

        def _state_cost(x, Qs=Qs, so=so):
            x = np.asarray(x, dtype=float)
            return np.einsum("...i,ij,...j->...", x, Qs, x) + so

        state_cost = _state_cost

        Q = Q + Qs
        off = off + so
    for name, W in (("cost.transition.state_weight", Q), ("cost.transition.input_weight", R)):
        if np.max(np.abs(W - W.T), initial=0.0) > 1e-12 or np.linalg.eigvalsh(W)[0] < -1e-12:
            raise SchemaError(f"{name} must be symmetric positive semidefinite", location=name)
    return (Q, R, off), transition, state_cost


def problem_from_spec(spec: ProblemFile, raw=None):
    d = spec.dynamics
    n, m = d.state_dim, d.input_dim
    X = spec.sets.state.build()
    U = spec.sets.input.build()
    try:
        sys = _build_system(spec, X, U)
    except ConfigurationError as exc:
        raise SchemaError(f"dynamics: {exc}", location="dynamics") from exc
    weights, transition, state_cost = _quadratic(spec, n, m)
    s = spec.sets
    problem = ControlProblem(
        name=spec.name,
        system=sys,
        state_set=X,
        input_set=U,
        kind=spec.problem.kind,
        initial_set=s.initial.build(),
        target_set=None if s.target is None else s.target.build(),
        obstacles=tuple(o.build() for o in s.obstacles),
        safe_set=None if s.safe is None else s.safe.build(),
        transition_cost=transition,
        state_cost=state_cost,
        cost_weights=weights,
        time=spec.problem.horizon,
        config=raw,
    )
    issues = problem.containment_issues()
    if issues:
        raise SchemaError(f"sets not inside sets.state: {', '.join(issues)}", location="sets")
    solver = SolverConfig(spec.solver.default, spec.solver.seed, spec.solver.check_samples, spec.grid, spec.lazy)
    return problem, solver


def load_problem(path, overrides=None):
    """Load a problem file. ``path`` may name a shipped problem (``nonlinear.toml``)."""
    p = resolve_problem_path(path)
    text = p.read_text()
    spec, raw = parse_problem_text(text, overrides, source=str(path))
    return problem_from_spec(spec, raw)


def resolve_problem_path(path):
    p = Path(path)
    if p.exists():
        return p
    for name in (p.name, p.name + ".toml"):
        shipped = resources.files("symctl") / "data" / name
        if shipped.is_file():
            return Path(str(shipped))
    raise SchemaError(f"problem file {path} not found", location=str(path))


def shipped_problems():
    return sorted(f.name for f in (resources.files("symctl") / "data").iterdir() if f.name.endswith(".toml"))


def dump_problem(raw: dict) -> str:
    """Serialize a raw problem tree back to TOML."""
    return tomli_w.dumps(raw)


def problem_hash(raw: dict) -> str:
    return hashlib.sha256(dump_problem(raw).encode()).hexdigest()
