"""Controlled dynamical systems, time discretization, controllers and simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from symctl.errors import ConfigurationError, DomainExitError, NumericalBlowupError
from symctl.geometry import Hyperrectangle

DEFAULT_SUBSTEPS = 5


def _check_finite(value, stage):
    if not np.all(np.isfinite(value)):
        raise NumericalBlowupError(f"non-finite value in RK4 stage {stage}", stage=stage)
    return value


def rk4_step(vector_field, x, u, dt, substeps=1):
    """Classical RK4 flow of ``x' = vector_field(x, u)`` over ``dt`` with ``u`` held."""
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    h = dt / substeps
    for _ in range(substeps):
        k1 = _check_finite(vector_field(x, u), "k1")
        k2 = _check_finite(vector_field(x + 0.5 * h * k1, u), "k2")
        k3 = _check_finite(vector_field(x + 0.5 * h * k2, u), "k3")
        k4 = _check_finite(vector_field(x + h * k3, u), "k4")
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def rk4_step_with_jacobian(vector_field, jacobian_field, x, u, dt, substeps=1):
    """RK4 on the state together with its variational equation.

    Returns the propagated state and the Jacobian of the RK4 map with respect
    to the initial state (RK4 commutes with linearization, so this is exact
    for the discrete map, not an approximation of it).
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    Phi = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()
    h = dt / substeps
    for _ in range(substeps):
        k1 = _check_finite(vector_field(x, u), "k1")
        K1 = _check_finite(jacobian_field(x, u) @ Phi, "k1")
        x2 = x + 0.5 * h * k1
        P2 = Phi + 0.5 * h * K1
        k2 = _check_finite(vector_field(x2, u), "k2")
        K2 = _check_finite(jacobian_field(x2, u) @ P2, "k2")
        x3 = x + 0.5 * h * k2
        P3 = Phi + 0.5 * h * K2
        k3 = _check_finite(vector_field(x3, u), "k3")
        K3 = _check_finite(jacobian_field(x3, u) @ P3, "k3")
        x4 = x + h * k3
        P4 = Phi + h * K3
        k4 = _check_finite(vector_field(x4, u), "k4")
        K4 = _check_finite(jacobian_field(x4, u) @ P4, "k4")
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        Phi = Phi + (h / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
    return x, Phi


@dataclass(frozen=True, eq=False)
class SampledSystem:
    """Discrete-time system ``x+ = f(x, u) + w`` with ``|w| <= noise_bound``.

    ``nominal_map`` and ``linearized_map`` accept batches (leading axes on
    ``x``). ``linearized_map`` returns ``(f(x, u), df/dx)``;
    ``error_bound_map(h, u)`` bounds the linearization remainder over any
    cell of half-lengths ``h`` inside the working domain. ``input_matrix`` is
    set when the map is input-affine with a constant input matrix.
    """

    state_dim: int
    input_dim: int
    noise_bound: np.ndarray
    nominal_map: Callable
    linearized_map: Callable
    error_bound_map: Callable
    time_step: float | None = None
    input_matrix: np.ndarray | None = None
    error_bound_heuristic: bool = False
    inverse_map: Callable | None = None

    def __post_init__(self):
        w = np.array(self.noise_bound, dtype=float, ndmin=1)
        if w.shape != (self.state_dim,) or np.any(w < 0):
            raise ConfigurationError(f"noise bound must be a nonnegative vector of length {self.state_dim}")
        w.setflags(write=False)
        object.__setattr__(self, "noise_bound", w)
        if self.input_matrix is not None:
            B = np.array(self.input_matrix, dtype=float, ndmin=2)
            if B.shape != (self.state_dim, self.input_dim):
                raise ConfigurationError(f"input matrix must be {self.state_dim}x{self.input_dim}")
            B.setflags(write=False)
            object.__setattr__(self, "input_matrix", B)


def sample_system(continuous_field, jacobian_field, time_step, noise_bound, growth_spec, *,
                  state_dim, input_dim, substeps=DEFAULT_SUBSTEPS, input_matrix=None):
    """Sample a continuous-time field with RK4 (``substeps`` per ``time_step``)."""
    if time_step <= 0:
        raise ConfigurationError(f"time step must be positive, got {time_step}")
    if jacobian_field is None:
        raise ConfigurationError("the growth specification needs a state Jacobian of the vector field")

    def nominal(x, u):
        return rk4_step(continuous_field, x, u, time_step, substeps)

    def linearized(x, u):
        return rk4_step_with_jacobian(continuous_field, jacobian_field, x, u, time_step, substeps)

    error_map, heuristic = growth_spec.realize(linearized, state_dim, input_dim)
    return SampledSystem(
        state_dim=state_dim,
        input_dim=input_dim,
        noise_bound=noise_bound,
        nominal_map=nominal,
        linearized_map=linearized,
        error_bound_map=error_map,
        time_step=time_step,
        input_matrix=input_matrix,
        error_bound_heuristic=heuristic,
    )


def discrete_system(transition_map, jacobian_map, noise_bound, growth_spec, *, state_dim, input_dim,
                    input_matrix=None):
    """Wrap a map that is already discrete-time (no integration)."""
    if jacobian_map is None:
        raise ConfigurationError("the growth specification needs a state Jacobian of the map")

    def linearized(x, u):
        return transition_map(x, u), jacobian_map(x, u)

    error_map, heuristic = growth_spec.realize(linearized, state_dim, input_dim)
    return SampledSystem(
        state_dim=state_dim,
        input_dim=input_dim,
        noise_bound=noise_bound,
        nominal_map=transition_map,
        linearized_map=linearized,
        error_bound_map=error_map,
        input_matrix=input_matrix,
        error_bound_heuristic=heuristic,
    )


@dataclass(frozen=True, eq=False)
class TransitionControlSystem:
    """``(X, U, F)`` with ``F(x, u) = {f(x, u) + w : |w| <= W}`` for ``u`` in ``U``."""

    state_set: Hyperrectangle
    input_set: Hyperrectangle
    nominal_map: Callable
    disturbance_bound: np.ndarray

    def __post_init__(self):
        w = np.array(self.disturbance_bound, dtype=float, ndmin=1)
        if w.shape != (self.state_set.dim,):
            raise ConfigurationError("disturbance bound dimension does not match the state set")
        if np.any(w < 0):
            raise ConfigurationError("disturbance bound must be componentwise nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "disturbance_bound", w)

    @classmethod
    def from_sampled(cls, sampled: SampledSystem, state_set, input_set):
        return cls(state_set, input_set, sampled.nominal_map, sampled.noise_bound)

    @property
    def state_dim(self):
        return self.state_set.dim

    @property
    def input_dim(self):
        return self.input_set.dim

    def available(self, x, u, tol=1e-12):
        return bool(self.input_set.contains(u, tol))

    def successor_map(self, x, u):
        """Successor set as a box, or ``None`` when ``u`` is not available."""
        if not self.available(x, u):
            return None
        return Hyperrectangle(self.nominal_map(np.asarray(x, dtype=float), np.asarray(u, dtype=float)),
                              self.disturbance_bound)


class StaticController:
    """Set-valued state feedback ``C(x)`` defined where ``domain_predicate(x)`` holds."""

    def __init__(self, evaluate, domain_predicate=None):
        self._evaluate = evaluate
        self._domain = domain_predicate or (lambda x: True)

    def domain_predicate(self, x):
        return bool(self._domain(np.asarray(x, dtype=float)))

    def evaluate(self, x):
        return [np.asarray(u, dtype=float) for u in self._evaluate(np.asarray(x, dtype=float))]

    def select(self, x):
        """Lexicographically smallest input of ``C(x)``."""
        inputs = self.evaluate(x)
        if not inputs:
            raise DomainExitError("controller returned no input", state=x)
        return min(inputs, key=lambda u: tuple(u.tolist()))


class ConstantController(StaticController):
    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)
        super().__init__(lambda x: [self.c])


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray
    status: str = "stopped"

    @property
    def length(self):
        return len(self.inputs)

    @property
    def total_cost(self):
        return float(np.sum(self.costs))

    @property
    def timed_out(self):
        return self.status == "timeout"


@dataclass(frozen=True)
class DisturbancePolicy:
    """How simulation realizes ``w``: ``zero``, ``worst_sampled`` or ``random``.

    ``worst_sampled`` draws a random vertex of the disturbance box each step
    (extremal disturbances); ``random`` draws uniformly inside it.
    """

    kind: str = "zero"
    seed: int = 0
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("zero", "worst_sampled", "random"):
            raise ConfigurationError(f"unknown disturbance policy {self.kind!r}")
        object.__setattr__(self, "_rng", np.random.default_rng(self.seed))

    @classmethod
    def parse(cls, text):
        kind, _, seed = str(text).partition(":")
        return cls(kind, int(seed) if seed else 0)

    def draw(self, bound):
        if self.kind == "zero" or not np.any(bound):
            return np.zeros_like(bound)
        if self.kind == "random":
            return self._rng.uniform(-1.0, 1.0, size=bound.shape) * bound
        return self._rng.choice([-1.0, 1.0], size=bound.shape) * bound


def closed_loop_trajectory(system: TransitionControlSystem, controller: StaticController, cost, x0, stop,
                           max_steps=1000, disturbance="zero") -> Trajectory:
    """Simulate ``x(k+1) = f(x(k), u(k)) + w(k)`` under ``controller`` until ``stop``.

    Raises :class:`DomainExitError` (carrying the partial trajectory) if a
    reached state is outside the controller domain. Hitting ``max_steps``
    returns the trajectory with ``status == "timeout"``.
    """
    policy = disturbance if isinstance(disturbance, DisturbancePolicy) else DisturbancePolicy.parse(disturbance)
    x = np.asarray(x0, dtype=float)
    states, inputs, costs = [x], [], []

    def partial(status):
        m = system.input_dim
        return Trajectory(np.array(states), np.array(inputs).reshape(-1, m), np.array(costs, dtype=float), status)

    for k in range(max_steps + 1):
        if stop(x):
            return partial("stopped")
        if k == max_steps:
            return partial("timeout")
        if not controller.domain_predicate(x):
            raise DomainExitError(f"state {x.tolist()} at step {k} is outside the controller domain",
                                  trajectory=partial("domain_exit"), state=x)
        u = controller.select(x)
        costs.append(float(cost(x, u)))
        inputs.append(u)
        x = np.asarray(system.nominal_map(x, u), dtype=float) + policy.draw(system.disturbance_bound)
        states.append(x)
    raise AssertionError("unreachable")


def validate_trajectory(system: TransitionControlSystem, traj: Trajectory, tol=1e-9):
    """List the ways ``traj`` fails to be a trajectory of ``system`` (empty when valid)."""
    issues = []
    if len(traj.states) != len(traj.inputs) + 1:
        issues.append(f"{len(traj.states)} states for {len(traj.inputs)} inputs")
        return issues
    if len(traj.costs) != len(traj.inputs):
        issues.append(f"{len(traj.costs)} costs for {len(traj.inputs)} inputs")
    if np.any(np.asarray(traj.costs) < 0):
        issues.append("negative stage cost")
    for k, u in enumerate(traj.inputs):
        x, x_next = traj.states[k], traj.states[k + 1]
        if not system.available(x, u, tol):
            issues.append(f"step {k}: input {u.tolist()} not available")
            continue
        succ = system.successor_map(x, u)
        if not succ.contains(x_next, tol * (1 + np.abs(succ.center))):
            issues.append(f"step {k}: successor {x_next.tolist()} outside F(x, u)")
    return issues
