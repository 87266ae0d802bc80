"""Stiff Langevin systems and their unit-mass canonical form.

The systems handled here are

    M dq = p dt
    dp   = F(q) dt - eps^{-1} K q dt - c p dt + sigma dW

with a quadratic stiff part ``eps^{-1} K`` that commutes with the damping
``c`` once masses are scaled out.  Everything downstream works on the
unit-mass form produced by :func:`mass_weighted_form`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    CommutationViolation,
    DimensionMismatch,
    NotPSD,
    NotSPD,
    NotSymmetric,
)

ForceFn = Callable[[np.ndarray], np.ndarray]
PotentialFn = Callable[[np.ndarray], np.ndarray]

TOL_COMMUTE = 1e-10
# eigenvalues of K below this fraction of ||K|| are treated as free (zero-frequency) modes
FREE_MODE_RTOL = 1e-12


def _as_matrix(x, d, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a * np.eye(d)
    elif a.ndim == 1:
        a = np.diag(a)
    if a.shape[0] != d:
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected {d} rows")
    return a


def _zero_force(q):
    return np.zeros_like(q)


@dataclass(frozen=True, eq=False)
class StiffSystem:
    """Problem definition for a stiff Langevin (or Hamiltonian) system.

    Scalars and 1-d arrays passed for ``M``, ``K``, ``c`` or ``sigma`` are
    promoted to ``s * I`` and ``diag(v)`` respectively.  ``sigma`` may be
    rectangular (``d x m`` for ``m`` independent Brownian motions).

    Force and potential callbacks must accept batched positions of shape
    ``(..., d)``.
    """

    K: np.ndarray
    eps: float
    M: np.ndarray = None
    c: np.ndarray = 0.0
    sigma: np.ndarray = 0.0
    force: ForceFn = _zero_force
    potential: Optional[PotentialFn] = None
    lipschitz: Optional[float] = None
    allow_free_modes: bool = False
    name: str = "custom"
    commutation_defect: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        d = K.shape[0]
        if K.shape != (d, d):
            raise DimensionMismatch(f"K must be square, got {K.shape}")
        M = np.eye(d) if self.M is None else _as_matrix(self.M, d, "M")
        c = _as_matrix(self.c, d, "c")
        sigma = _as_matrix(self.sigma, d, "sigma")
        if M.shape != (d, d) or c.shape != (d, d):
            raise DimensionMismatch("M and c must be d x d")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        for name, val in (("K", K), ("M", M), ("c", c), ("sigma", sigma)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def dim(self) -> int:
        return self.K.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.sigma.shape[1]

    @property
    def unit_mass(self) -> bool:
        return bool(np.array_equal(self.M, np.eye(self.dim)))

    @property
    def deterministic(self) -> bool:
        return not np.any(self.sigma) and not np.any(self.c)

    def stiff_matrix(self) -> np.ndarray:
        """The full linear restoring matrix ``eps^{-1} K``."""
        return self.K / self.eps


@dataclass(frozen=True, eq=False)
class State:
    """Phase-space point; ``q`` and ``p`` may carry leading batch axes."""

    q: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.p], axis=-1)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p)))


def _sym_eigs(A, name, rtol=1e-10):
    scale = max(np.linalg.norm(A, 2), 1e-300)
    asym = np.linalg.norm(A - A.T, 2) / scale
    if asym > rtol:
        raise NotSymmetric(name, asym)
    return np.linalg.eigvalsh(0.5 * (A + A.T)), scale


def _sqrt_pair(M):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    half = (V * np.sqrt(w)) @ V.T
    inv_half = (V / np.sqrt(w)) @ V.T
    return half, inv_half


def commutation_defect(A, B) -> float:
    """Relative commutator norm ``||AB - BA|| / (||A|| ||B||)`` (0 if either vanishes)."""
    na, nb = np.linalg.norm(A, 2), np.linalg.norm(B, 2)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.linalg.norm(A @ B - B @ A, 2) / (na * nb))


def validate_system(sys: StiffSystem, tol_commute: float = TOL_COMMUTE) -> StiffSystem:
    """Check the structural assumptions and return the system with its defect recorded.

    The commutation requirement is checked on the mass-weighted pair
    ``(M^{-1/2} K M^{-1/2}, M^{-1/2} c M^{-1/2})``, which is what the exact
    fast flow actually needs; for unit mass this is the plain ``(K, c)`` test.
    """
    mw, _ = _sym_eigs(sys.M, "M")
    if mw.min() <= 0:
        raise NotSPD("M", mw.min())
    kw, kscale = _sym_eigs(sys.K, "K")
    floor = FREE_MODE_RTOL * kscale
    if sys.allow_free_modes:
        if kw.min() < -floor:
            raise NotPSD("K", kw.min())
    elif kw.min() <= floor:
        raise NotSPD("K", kw.min())
    cw, _ = _sym_eigs(sys.c, "c") if np.any(sys.c) else (np.zeros(1), 0.0)

    # commutation first: a non-commuting pair is the more fundamental defect
    _, inv_half = _sqrt_pair(sys.M)
    Kt = inv_half @ sys.K @ inv_half
    ct = inv_half @ sys.c @ inv_half
    defect = commutation_defect(Kt, ct)
    if defect > tol_commute:
        raise CommutationViolation(defect, tol_commute)
    if cw.min() < -1e-14 * max(1.0, np.abs(cw).max()):
        raise NotPSD("c", cw.min())
    return replace(sys, commutation_defect=defect)


@dataclass(frozen=True, eq=False)
class Transform:
    """Change of variables ``q~ = M^{1/2} q``, ``p~ = M^{-1/2} p``."""

    half: np.ndarray
    inv_half: np.ndarray

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d), np.eye(d))

    def forward(self, state: State) -> State:
        return State(state.q @ self.half.T, state.p @ self.inv_half.T, state.t)

    def inverse(self, state: State) -> State:
        return State(state.q @ self.inv_half.T, state.p @ self.half.T, state.t)


def mass_weighted_form(sys: StiffSystem) -> tuple[StiffSystem, Transform]:
    """Scale masses out, returning the unit-mass system and the state transform."""
    if sys.unit_mass:
        return sys, Transform.identity(sys.dim)
    mw = np.linalg.eigvalsh(0.5 * (sys.M + sys.M.T))
    if mw.min() <= 0:
        raise NotSPD("M", mw.min())
    half, inv_half = _sqrt_pair(sys.M)
    force, potential = sys.force, sys.potential

    def weighted_force(qt):
        return force(qt @ inv_half.T) @ inv_half.T

    weighted_potential = None
    if potential is not None:
        def weighted_potential(qt):
            return potential(qt @ inv_half.T)

    unit = replace(
        sys,
        M=None,
        K=inv_half @ sys.K @ inv_half,
        c=inv_half @ sys.c @ inv_half,
        sigma=inv_half @ sys.sigma,
        force=weighted_force,
        potential=weighted_potential,
        lipschitz=None if sys.lipschitz is None
        else sys.lipschitz * float(np.linalg.norm(inv_half, 2)) ** 2,
    )
    return unit, Transform(half, inv_half)
