"""One-step maps for stochastic impulse methods, baselines, and the driver.

The SIM family composes two exactly solvable flows: the fast flow of the
damped, noisy linear part (see :mod:`stiffsim.fastflow`) and the slow flow
``p <- p + tau F(q)``, which is exact because ``q`` does not move under it.

All step maps accept batched states (``q`` and ``p`` of shape ``(..., d)``)
and are pure functions of the state and the noise draw they are given.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BlowUp, NonFiniteState, UnsupportedStochastic
from .fastflow import FastFlow, Propagator, kick_from_normals
from .model import State, StiffSystem, mass_weighted_form, validate_system

SIM4_GAMMA = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
BLOWUP_THRESHOLD = 1e8


class Method(str, enum.Enum):
    SIM1_HAM = "sim1-ham"
    SIM1_LAN = "sim1-lan"
    SIM2_LAN = "sim2-lan"
    SIM4_DET = "sim4-det"
    GLA1 = "gla1"
    FINE_SYMPLECTIC_EULER = "fine-se"
    FINE_EULER_MARUYAMA = "fine-em"
    # fine-step Strang splitting with exact fast flow; accurate stochastic reference
    FINE_STRANG = "fine-strang"

    @property
    def is_sim(self):
        return self in (Method.SIM1_HAM, Method.SIM1_LAN, Method.SIM2_LAN, Method.SIM4_DET,
                        Method.FINE_STRANG)


class NoiseMode(str, enum.Enum):
    EXACT = "exact-sample"
    COUPLED = "path-coupled"
    NONE = "none"


FAST, SLOW = "fast", "slow"


def _substeps(method: Method, H: float):
    g = SIM4_GAMMA
    if method in (Method.SIM1_HAM, Method.SIM1_LAN):
        return ((FAST, H), (SLOW, H))
    if method in (Method.SIM2_LAN, Method.FINE_STRANG):
        return ((SLOW, H / 2), (FAST, H), (SLOW, H / 2))
    if method is Method.SIM4_DET:
        return ((SLOW, g * H / 2), (FAST, g * H), (SLOW, (1 - g) * H / 2),
                (FAST, (1 - 2 * g) * H), (SLOW, (1 - g) * H / 2), (FAST, g * H),
                (SLOW, g * H / 2))
    return ()


@dataclass(frozen=True)
class StepPlan:
    """Method, macro step and noise handling for one integration run.

    ``h`` is the Brownian grid spacing in path-coupled mode (it must divide
    ``H``); baselines step with ``H`` itself.
    """

    method: Method
    H: float
    noise_mode: NoiseMode = NoiseMode.EXACT
    h: Optional[float] = None
    substeps: tuple = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "noise_mode", NoiseMode(self.noise_mode))
        if self.substeps is None:
            object.__setattr__(self, "substeps", _substeps(self.method, self.H))
        if self.substeps:
            for kind in (FAST, SLOW):
                total = sum(t for k, t in self.substeps if k == kind)
                if abs(total - self.H) > 1e-12 * max(1.0, abs(self.H)):
                    raise ValueError(f"{kind} substeps sum to {total}, not H = {self.H}")
        if self.noise_mode is NoiseMode.COUPLED:
            if self.h is None:
                raise ValueError("path-coupled mode needs the fine grid spacing h")
            n = round(self.H / self.h)
            if n < 1 or abs(n * self.h - self.H) > 1e-9 * self.H:
                raise ValueError(f"h = {self.h} does not divide H = {self.H}")

    @property
    def n_sub(self):
        return int(round(self.H / self.h)) if self.h else 1


def _checked(q, p, t):
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise NonFiniteState()
    return State(q, p, t)


def fast_flow(q, p, prop: Propagator, kick=None):
    q1, p1 = prop.apply(q, p)
    if kick is not None:
        q1 = q1 + kick[0]
        p1 = p1 + kick[1]
    return q1, p1


def slow_flow(q, p, force, tau):
    return q, p + tau * force(q)


def step_sim1_hamiltonian(state: State, H, prop: Propagator, force) -> State:
    """phi^s(H) o phi^f(H) with the undamped, noiseless fast flow."""
    q, p = fast_flow(state.q, state.p, prop)
    p = p + H * force(q)
    return _checked(q, p, state.t + H)


def step_sim1_langevin(state: State, H, prop: Propagator, force, kick=None) -> State:
    """First order SIM: exact noisy fast flow, then an impulse from the slow force.

    ``kick`` is the ``(Rq, Rp)`` draw for this step (``None`` when noiseless);
    with no kick this is bitwise the Hamiltonian step.
    """
    q, p = fast_flow(state.q, state.p, prop, kick)
    p = p + H * force(q)
    return _checked(q, p, state.t + H)


def step_sim1_dual(state: State, H, prop: Propagator, force, kick=None) -> State:
    """The adjoint ordering phi^f(H) o phi^s(H)."""
    p = state.p + H * force(state.q)
    q, p = fast_flow(state.q, p, prop, kick)
    return _checked(q, p, state.t + H)


def step_sim2_langevin(state: State, H, prop: Propagator, force, kick=None) -> State:
    """Strang splitting phi^s(H/2) o phi^f(H) o phi^s(H/2)."""
    p = state.p + 0.5 * H * force(state.q)
    q, p = fast_flow(state.q, p, prop, kick)
    p = p + 0.5 * H * force(q)
    return _checked(q, p, state.t + H)


def step_sim4_deterministic(state: State, H, flow: FastFlow, force) -> State:
    """Fourth order triple-jump composition (noiseless, undamped systems only)."""
    sys = flow.system
    if np.any(sys.sigma) or np.any(sys.c):
        raise UnsupportedStochastic(
            "the fourth order composition has a negative-time fast substep; "
            "it is defined for c = 0, sigma = 0 only")
    q, p = state.q, state.p
    for kind, tau in _substeps(Method.SIM4_DET, H):
        if kind == SLOW:
            p = p + tau * force(q)
        else:
            q, p = flow.propagator(tau).apply(q, p)
    return _checked(q, p, state.t + H)


@dataclass(frozen=True, eq=False)
class OUStep:
    """Exact Ornstein-Uhlenbeck update ``p <- D p + G z`` over ``h``."""

    h: float
    decay: np.ndarray
    factor: np.ndarray

    @classmethod
    def build(cls, sys: StiffSystem, h: float) -> "OUStep":
        w, V = np.linalg.eigh(0.5 * (sys.c + sys.c.T))
        decay = (V * np.exp(-w * h)) @ V.T
        S = V.T @ sys.sigma @ sys.sigma.T @ V
        rate = w[:, None] + w[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            weight = np.where(rate > 0, -np.expm1(-rate * h) / np.where(rate > 0, rate, 1.0), h)
        cov = V @ (S * weight) @ V.T
        cw, cV = np.linalg.eigh(0.5 * (cov + cov.T))
        return cls(float(h), decay, cV * np.sqrt(np.clip(cw, 0.0, None)))

    @property
    def noise_dim(self):
        return self.factor.shape[1]


def _stiff_force(sys: StiffSystem, q):
    return sys.force(q) - q @ (sys.K / sys.eps).T


def step_gla1(state: State, h, sys: StiffSystem, ou: OUStep, z=None) -> State:
    """Geometric Langevin baseline: exact OU substep on p, then symplectic Euler.

    ``z`` holds the standard normals for the OU noise (``None``: noiseless).
    """
    p = state.p @ ou.decay.T
    if z is not None:
        p = p + z @ ou.factor.T
    p = p + h * _stiff_force(sys, state.q)
    q = state.q + h * p
    return _checked(q, p, state.t + h)


def step_fine_reference(state: State, h, sys: StiffSystem, dW=None) -> State:
    """Symplectic Euler on the full system, with damping and noise on ``p``."""
    p = state.p + h * (_stiff_force(sys, state.q) - state.p @ sys.c.T)
    if dW is not None:
        p = p + dW @ sys.sigma.T
    q = state.q + h * p
    return _checked(q, p, state.t + h)


def step_fine_euler_maruyama(state: State, h, sys: StiffSystem, dW=None) -> State:
    """Explicit Euler-Maruyama (forward Euler when noiseless)."""
    q = state.q + h * state.p
    p = state.p + h * (_stiff_force(sys, state.q) - state.p @ sys.c.T)
    if dW is not None:
        p = p + dW @ sys.sigma.T
    return _checked(q, p, state.t + h)


class _GeneratorFeed:
    """Adapter drawing batched normals from a single generator."""

    def __init__(self, rng, batch_shape, dim):
        self.rng, self.batch_shape, self.dim = rng, tuple(batch_shape), dim

    def normals(self, n):
        return self.rng.standard_normal((n,) + self.batch_shape + (self.dim,))


def _as_feed(noise, batch_shape, dim):
    if noise is None:
        return None
    if isinstance(noise, np.random.Generator):
        return _GeneratorFeed(noise, batch_shape, dim)
    return noise


def draw_dim(sys: StiffSystem, plan: StepPlan) -> int:
    """Standard normals consumed per path per draw by ``plan`` on ``sys``."""
    if not np.any(sys.sigma) or plan.noise_mode is NoiseMode.NONE:
        return 0
    if plan.method is Method.GLA1:
        return sys.dim
    if plan.method.is_sim and plan.noise_mode is NoiseMode.EXACT:
        return 2 * sys.dim
    return sys.noise_dim


class Stepper:
    """Binds a plan to a prepared unit-mass system and a noise source.

    ``advance(state)`` performs one macro step, drawing whatever noise the
    method needs from the feed.  Noise is drawn before the step's substeps are
    applied, in a fixed per-method order.
    """

    def __init__(self, sys: StiffSystem, plan: StepPlan, noise=None, flow: FastFlow = None,
                 batch_shape=()):
        self.sys = sys
        self.plan = plan
        method = plan.method
        stochastic = bool(np.any(sys.sigma))
        self.mode = plan.noise_mode if stochastic else NoiseMode.NONE
        self.flow = None
        if method.is_sim:
            self.flow = flow if flow is not None else FastFlow(sys)
            self.prop = self.flow.propagator(plan.H)
        if method is Method.SIM1_HAM and (np.any(sys.c) or stochastic):
            raise UnsupportedStochastic("sim1-ham needs c = 0 and sigma = 0; use sim1-lan")
        if method is Method.SIM4_DET and (np.any(sys.c) or stochastic):
            raise UnsupportedStochastic("sim4-det needs c = 0 and sigma = 0")
        if method is Method.GLA1:
            self.ou = OUStep.build(sys, plan.H)
        if self.mode is NoiseMode.NONE:
            self.feed = None
        else:
            if noise is None:
                raise ValueError("a stochastic system needs a noise source")
            self.feed = _as_feed(noise, batch_shape, draw_dim(sys, plan))
            if method.is_sim and self.mode is NoiseMode.COUPLED:
                self.agg = self.flow.aggregator(plan.H, plan.h)
            elif method.is_sim:
                self.cov = self.flow.covariance(plan.H)

    def _kick(self):
        if self.mode is NoiseMode.NONE:
            return None
        if self.mode is NoiseMode.COUPLED:
            n = self.plan.n_sub
            return self.agg(np.sqrt(self.plan.h) * self.feed.normals(n))
        return kick_from_normals(self.cov, self.feed.normals(1)[0])

    def _increment(self):
        if self.mode is NoiseMode.NONE:
            return None
        return np.sqrt(self.plan.H) * self.feed.normals(1)[0]

    def advance(self, state: State) -> State:
        m, H, force = self.plan.method, self.plan.H, self.sys.force
        if m is Method.SIM1_HAM:
            return step_sim1_hamiltonian(state, H, self.prop, force)
        if m is Method.SIM1_LAN:
            return step_sim1_langevin(state, H, self.prop, force, self._kick())
        if m in (Method.SIM2_LAN, Method.FINE_STRANG):
            return step_sim2_langevin(state, H, self.prop, force, self._kick())
        if m is Method.SIM4_DET:
            return step_sim4_deterministic(state, H, self.flow, force)
        if m is Method.GLA1:
            z = None if self.mode is NoiseMode.NONE else self.feed.normals(1)[0]
            return step_gla1(state, H, self.sys, self.ou, z)
        if m is Method.FINE_SYMPLECTIC_EULER:
            return step_fine_reference(state, H, self.sys, self._increment())
        if m is Method.FINE_EULER_MARUYAMA:
            return step_fine_euler_maruyama(state, H, self.sys, self._increment())
        raise ValueError(f"unhandled method {m}")


class TrajectoryRecorder:
    """Stores copies of the state every ``every`` steps (including step 0)."""

    def __init__(self, every: int = 1):
        self.every = max(1, int(every))
        self.times, self.q, self.p = [], [], []

    def __call__(self, k: int, state: State):
        if k % self.every == 0:
            self.times.append(state.t)
            self.q.append(np.array(state.q, copy=True))
            self.p.append(np.array(state.p, copy=True))

    def arrays(self):
        return np.array(self.times), np.stack(self.q), np.stack(self.p)


@dataclass
class IntegrationResult:
    final: State
    n_steps: int
    T: float
    recorder: object = None


def integrate(sys: StiffSystem, plan: StepPlan, initial: State, T: float,
              recorder: Callable = None, noise=None, *, flow: FastFlow = None,
              blowup_threshold: float = BLOWUP_THRESHOLD, validate: bool = True
              ) -> IntegrationResult:
    """Apply ``N = round(T / H)`` macro steps from ``initial``.

    ``noise`` is a :class:`~stiffsim.noise.NoiseFeed` (one stream per path) or a
    ``numpy.random.Generator``; it is ignored for noiseless systems.  Raises
    :class:`BlowUp` when any path's ``||(q, p)||_2`` exceeds the threshold or
    turns non-finite.
    """
    if validate:
        sys = validate_system(sys)
    unit, transform = mass_weighted_form(sys)
    state = transform.forward(initial)
    n = int(round(T / plan.H))
    batch_shape = state.q.shape[:-1]
    stepper = Stepper(unit, plan, noise, flow=flow, batch_shape=batch_shape)
    unit_mass = sys.unit_mass

    def report(k, st):
        if recorder is not None:
            recorder(k, st if unit_mass else transform.inverse(st))

    report(0, state)
    for k in range(1, n + 1):
        try:
            state = stepper.advance(state)
        except NonFiniteState:
            raise BlowUp(k, np.inf, blowup_threshold) from None
        norm = float(np.sqrt(np.max(np.sum(state.q ** 2 + state.p ** 2, axis=-1))))
        if norm > blowup_threshold:
            raise BlowUp(k, norm, blowup_threshold)
        report(k, state)
    final = state if unit_mass else transform.inverse(state)
    return IntegrationResult(final, n, n * plan.H, recorder)
