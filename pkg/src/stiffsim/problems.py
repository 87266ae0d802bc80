"""Benchmark problems: two-spring Langevin chain, Fermi-Pasta-Ulam, harmonic test.

All problems use ``eps = omega^{-2}`` with a unit-scale stiffness matrix, so
that ``eps^{-1} K`` carries the stiff frequency ``omega``.  The two-spring and
FPU problems contain coordinates with no stiff restoring force; they are
built with ``allow_free_modes`` and those modes get the zero-frequency limit
of the fast flow.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, UnknownProblem
from .model import State, StiffSystem, validate_system


@dataclass(frozen=True, eq=False)
class Problem:
    name: str
    system: StiffSystem
    initial: State
    config: object

    def with_omega(self, omega):
        return build(self.name, replace(self.config, omega=omega))


# --- two-spring chain ------------------------------------------------------

@dataclass(frozen=True)
class TwoSpringConfig:
    omega: float = 100.0
    c: float = 0.1
    beta: float = 10.0
    x0: float = None  # default 0.8 / omega
    y0: float = None  # default 1.1 + x0
    px0: float = 0.0
    py0: float = 0.0

    @property
    def sigma(self):
        return math.sqrt(2.0 * self.c / self.beta)

    def initial_position(self):
        x0 = 0.8 / self.omega if self.x0 is None else self.x0
        y0 = 1.1 + x0 if self.y0 is None else self.y0
        return x0, y0


def two_spring_force(q):
    r = (q[..., 0] - q[..., 1]) ** 3
    return np.stack([-r, r], axis=-1)


def two_spring_potential(q):
    return 0.25 * (q[..., 1] - q[..., 0]) ** 4


def two_spring_hamiltonian(q, p, omega):
    """``p_x^2/2 + p_y^2/2 + omega^2 x^2 / 2 + (y - x)^4 / 4``."""
    return (0.5 * np.sum(p ** 2, axis=-1) + 0.5 * omega ** 2 * q[..., 0] ** 2
            + 0.25 * (q[..., 1] - q[..., 0]) ** 4)


def build_two_spring(cfg: TwoSpringConfig) -> Problem:
    if not (cfg.omega > 0 and cfg.c >= 0 and cfg.beta > 0):
        raise ConfigInvalid(f"two-spring needs omega > 0, c >= 0, beta > 0; got {cfg}")
    sys = StiffSystem(
        K=np.diag([1.0, 0.0]),
        eps=cfg.omega ** -2,
        c=cfg.c,
        sigma=cfg.sigma,
        force=two_spring_force,
        potential=two_spring_potential,
        allow_free_modes=True,
        name="two-spring",
    )
    x0, y0 = cfg.initial_position()
    init = State(np.array([x0, y0]), np.array([cfg.px0, cfg.py0]))
    return Problem("two-spring", validate_system(sys), init, cfg)


# --- Fermi-Pasta-Ulam ------------------------------------------------------

@dataclass(frozen=True)
class FPUConfig:
    m: int = 3
    omega: float = 200.0
    x0: tuple = None  # default [1, 0, .., 0, 1/omega, 0, .., 0]
    y0: tuple = None  # default zeros

    def initial(self):
        d = 2 * self.m
        if self.x0 is None:
            x = np.zeros(d)
            x[0] = 1.0
            x[self.m] = 1.0 / self.omega
        else:
            x = np.asarray(self.x0, dtype=float)
        y = np.zeros(d) if self.y0 is None else np.asarray(self.y0, dtype=float)
        if x.shape != (d,) or y.shape != (d,):
            raise ConfigInvalid(f"FPU initial data must have length {d}")
        return x, y


def _fpu_springs(x, m):
    """Elongations of the m + 1 soft springs in transformed coordinates."""
    mid, exp_ = x[..., :m], x[..., m:]
    first = mid[..., :1] - exp_[..., :1]
    inner = mid[..., 1:] - exp_[..., 1:] - mid[..., :-1] - exp_[..., :-1]
    last = mid[..., -1:] + exp_[..., -1:]
    return np.concatenate([first, inner, last], axis=-1)


def fpu_soft_potential(x, m):
    return 0.25 * np.sum(_fpu_springs(x, m) ** 4, axis=-1)


def fpu_soft_force(x, m):
    """``-grad V_s`` for the transformed FPU soft potential."""
    s3 = _fpu_springs(x, m) ** 3
    g_mid = np.zeros(x.shape[:-1] + (m,))
    g_exp = np.zeros(x.shape[:-1] + (m,))
    # spring 0: x_1 - x_{m+1}
    g_mid[..., 0] += s3[..., 0]
    g_exp[..., 0] -= s3[..., 0]
    # springs 1..m-1: x_{i+1} - x_{m+i+1} - x_i - x_{m+i}
    g_mid[..., 1:] += s3[..., 1:m]
    g_exp[..., 1:] -= s3[..., 1:m]
    g_mid[..., :-1] -= s3[..., 1:m]
    g_exp[..., :-1] -= s3[..., 1:m]
    # spring m: x_m + x_{2m}
    g_mid[..., -1] += s3[..., m]
    g_exp[..., -1] += s3[..., m]
    return -np.concatenate([g_mid, g_exp], axis=-1)


def build_fpu(cfg: FPUConfig) -> Problem:
    if cfg.m < 1 or not cfg.omega > 0:
        raise ConfigInvalid(f"FPU needs m >= 1 and omega > 0; got {cfg}")
    m = cfg.m
    K = np.diag(np.r_[np.zeros(m), np.ones(m)])
    sys = StiffSystem(
        K=K,
        eps=cfg.omega ** -2,
        force=lambda x: fpu_soft_force(x, m),
        potential=lambda x: fpu_soft_potential(x, m),
        allow_free_modes=True,
        name="fpu",
    )
    x, y = cfg.initial()
    return Problem("fpu", validate_system(sys), State(x, y), cfg)


def fpu_transform(q, p, m):
    """Map chain coordinates ``(q, p)`` to the transformed ``(x, y)``."""
    q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
    if q.shape[-1] != 2 * m or p.shape[-1] != 2 * m:
        raise DimensionMismatch(f"FPU coordinates must have length {2 * m}")
    r2 = math.sqrt(2.0)
    odd_q, even_q = q[..., 0::2], q[..., 1::2]  # q_{2i-1}, q_{2i}
    odd_p, even_p = p[..., 0::2], p[..., 1::2]
    x = np.concatenate([(even_q + odd_q) / r2, (even_q - odd_q) / r2], axis=-1)
    y = np.concatenate([(even_p + odd_p) / r2, (even_p - odd_p) / r2], axis=-1)
    return x, y


def fpu_inverse_transform(x, y, m):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape[-1] != 2 * m or y.shape[-1] != 2 * m:
        raise DimensionMismatch(f"FPU coordinates must have length {2 * m}")
    r2 = math.sqrt(2.0)

    def back(v):
        s, d = v[..., :m], v[..., m:]
        out = np.empty(v.shape)
        out[..., 0::2] = (s - d) / r2
        out[..., 1::2] = (s + d) / r2
        return out

    return back(x), back(y)


def fpu_chain_hamiltonian(q, p, omega, m):
    """Hamiltonian in the original chain coordinates (fixed walls q_0 = q_{2m+1} = 0)."""
    kin = 0.5 * np.sum(p ** 2, axis=-1)
    stiff = 0.25 * omega ** 2 * np.sum((q[..., 1::2] - q[..., 0::2]) ** 2, axis=-1)
    pad = np.zeros(q.shape[:-1] + (1,))
    full = np.concatenate([pad, q, pad], axis=-1)  # q_0 .. q_{2m+1}
    soft = np.sum((full[..., 1::2] - full[..., 0::2]) ** 4, axis=-1)
    return kin + stiff + soft


def fpu_hamiltonian(x, y, omega, m):
    return (0.5 * np.sum(y ** 2, axis=-1) + 0.5 * omega ** 2 * np.sum(x[..., m:] ** 2, axis=-1)
            + fpu_soft_potential(x, m))


@dataclass
class FPUObservables:
    expansions: np.ndarray
    midpoints: np.ndarray
    spring_energies: np.ndarray
    total_stiff_energy: np.ndarray


def fpu_observables(state: State, cfg: FPUConfig) -> FPUObservables:
    m, w = cfg.m, cfg.omega
    x, y = state.q, state.p
    ex = x[..., m:]
    energies = 0.5 * (y[..., m:] ** 2 + w ** 2 * ex ** 2)
    return FPUObservables(ex, x[..., :m], energies, energies.sum(axis=-1))


# --- harmonic test ---------------------------------------------------------

@dataclass(frozen=True)
class HarmonicConfig:
    """Strictly positive-definite stiff chain with a bounded pendulum coupling.

    ``K`` is the ``d x d`` fixed-end chain Laplacian scaled to unit smallest
    eigenvalue; the soft potential ``sum(1 - cos(q_i - q_{i+1})) + a sum(1 - cos q_i)``
    has bounded, Lipschitz gradient.
    """

    d: int = 2
    omega: float = 10.0
    c: float = 0.0
    sigma: float = 0.0
    coupling: float = 1.0
    q0: tuple = None  # default (1/omega) * (1, 0, ..)
    p0: tuple = None  # default (0.5, -0.3, ...)


def harmonic_K(d):
    L = 2 * np.eye(d) - np.eye(d, k=1) - np.eye(d, k=-1)
    return L / np.linalg.eigvalsh(L).min()


def _pendulum_parts(a):
    def potential(q):
        diff = q[..., :-1] - q[..., 1:]
        return np.sum(1 - np.cos(diff), axis=-1) + a * np.sum(1 - np.cos(q), axis=-1)

    def force(q):
        s = np.sin(q[..., :-1] - q[..., 1:])
        f = -a * np.sin(q)
        f[..., :-1] -= s
        f[..., 1:] += s
        return f

    return force, potential


def build_harmonic(cfg: HarmonicConfig) -> Problem:
    if cfg.d < 1 or not cfg.omega > 0 or cfg.c < 0:
        raise ConfigInvalid(f"invalid harmonic config {cfg}")
    force, potential = _pendulum_parts(cfg.coupling)
    sys = StiffSystem(K=harmonic_K(cfg.d), eps=cfg.omega ** -2, c=cfg.c, sigma=cfg.sigma,
                      force=force, potential=potential, lipschitz=2.0 + cfg.coupling,
                      name="harmonic")
    d = cfg.d
    if cfg.q0 is None:
        q0 = np.zeros(d)
        q0[0] = 1.0 / cfg.omega
    else:
        q0 = np.asarray(cfg.q0, dtype=float)
    if cfg.p0 is None:
        p0 = np.array([0.5 * (-0.6) ** i for i in range(d)])
    else:
        p0 = np.asarray(cfg.p0, dtype=float)
    return Problem("harmonic", validate_system(sys), State(q0, p0), cfg)


# --- registry --------------------------------------------------------------

_BUILDERS: dict[str, tuple[type, Callable]] = {
    "two-spring": (TwoSpringConfig, build_two_spring),
    "fpu": (FPUConfig, build_fpu),
    "harmonic": (HarmonicConfig, build_harmonic),
}


def problem_names():
    return sorted(_BUILDERS)


def make_config(name, params=None):
    if name not in _BUILDERS:
        raise UnknownProblem(f"unknown problem {name!r}; known: {problem_names()}")
    cls = _BUILDERS[name][0]
    params = dict(params or {})
    known = set(cls.__dataclass_fields__)
    extra = set(params) - known
    if extra:
        raise ConfigInvalid(f"unknown parameters for {name}: {sorted(extra)}")
    for k, v in params.items():
        if isinstance(v, list):
            params[k] = tuple(v)
    return cls(**params)


def build(name, cfg=None) -> Problem:
    if name not in _BUILDERS:
        raise UnknownProblem(f"unknown problem {name!r}; known: {problem_names()}")
    cls, builder = _BUILDERS[name]
    if cfg is None:
        cfg = cls()
    elif isinstance(cfg, dict):
        cfg = make_config(name, cfg)
    return builder(cfg)


def config_dict(cfg):
    return asdict(cfg)


def resonant_step(H, omega, kind="full"):
    """Snap ``H`` to the nearest step with ``sin(omega H) = 0`` ("full")
    or ``cos(omega H) = 0`` ("quarter")."""
    if kind == "full":
        k = max(1, round(H * omega / math.pi))
        return k * math.pi / omega
    if kind == "quarter":
        k = max(0, round(H * omega / math.pi - 0.5))
        return (k + 0.5) * math.pi / omega
    raise ValueError(f"kind must be 'full' or 'quarter', got {kind!r}")
