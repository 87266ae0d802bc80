"""Exact flow of the fast linear SDE

    dq = p dt,   dp = -eps^{-1} K q dt - c p dt + sigma dW

for commuting ``K`` and ``c`` (unit mass).  The flow is assembled mode by
mode from the scalar damped oscillator, and the Gaussian kick it adds over a
step is sampled exactly from its covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .errors import (
    NotSPD,
    PathMismatch,
    SimultaneousDiagonalizationFailure,
)
from .model import FREE_MODE_RTOL, StiffSystem
from .quadrature import adaptive_gauss_legendre

OFFDIAG_RTOL = 1e-10
# eigenvalues of K closer than this (relative) are resolved as one eigenspace
CLUSTER_RTOL = 1e-9
QUAD_RTOL = 1e-13

_SERIES_TERMS = 20
_COS_COEF = np.array([1.0 / factorial(2 * k) for k in range(_SERIES_TERMS)])
_SIN_COEF = np.array([1.0 / factorial(2 * k + 1) for k in range(_SERIES_TERMS)])


@dataclass(frozen=True, eq=False)
class ModalForm:
    """Shared eigenbasis ``U`` of (K, c) with per-mode frequency and damping."""

    U: np.ndarray
    omega: np.ndarray
    damp: np.ndarray
    eps: float

    @property
    def dim(self):
        return len(self.omega)

    @property
    def zeta(self):
        """Damping ratio ``c / (2 omega)`` (1 at critical damping)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.omega > 0,
                            self.damp / (2.0 * np.where(self.omega > 0, self.omega, 1.0)),
                            np.inf)

    @property
    def free(self):
        return self.omega == 0.0

    @property
    def is_diagonal(self):
        return bool(np.array_equal(self.U, np.eye(self.dim)))


def modal_decompose(sys: StiffSystem) -> ModalForm:
    """Simultaneously diagonalise the unit-mass stiffness and damping."""
    if not sys.unit_mass:
        raise ValueError("modal_decompose expects a unit-mass system; see mass_weighted_form")
    K, c = sys.K, sys.c
    d = sys.dim
    kscale = max(np.linalg.norm(K, 2), 1e-300)
    if np.count_nonzero(K - np.diag(np.diag(K))) == 0 and np.count_nonzero(
            c - np.diag(np.diag(c))) == 0:
        # already diagonal: keep U exactly the identity
        lam, U = np.diag(K).copy(), np.eye(d)
    else:
        lam, U = np.linalg.eigh(0.5 * (K + K.T))
        # resolve repeated eigenvalues of K with the damping
        start = 0
        while start < d:
            stop = start + 1
            while stop < d and lam[stop] - lam[start] <= CLUSTER_RTOL * kscale:
                stop += 1
            if stop - start > 1:
                Us = U[:, start:stop]
                block = Us.T @ c @ Us
                _, V = np.linalg.eigh(0.5 * (block + block.T))
                U[:, start:stop] = Us @ V
            start = stop

    floor = FREE_MODE_RTOL * kscale
    if sys.allow_free_modes:
        if lam.min() < -floor:
            raise NotSPD("K", lam.min())
        lam = np.where(lam <= floor, 0.0, lam)
    elif lam.min() <= floor:
        raise NotSPD("K", lam.min())

    cm = U.T @ c @ U
    cscale = np.linalg.norm(c, 2)
    if cscale > 0:
        off = np.linalg.norm(cm - np.diag(np.diag(cm)), 2) / cscale
        if off > OFFDIAG_RTOL:
            raise SimultaneousDiagonalizationFailure(off)
    omega = np.sqrt(lam / sys.eps)
    return ModalForm(U=U, omega=omega, damp=np.diag(cm).copy(), eps=sys.eps)


def scalar_damped_blocks(omega, c, s):
    """Flow of ``q'' + c q' + omega^2 q = 0`` over time ``s``.

    Returns ``(b11, b12, b21, b22)`` with ``(q(s), p(s)) = (b11 q + b12 p,
    b21 q + b22 p)``.  Arguments broadcast.  With ``gamma = c/2`` and
    ``delta = omega^2 - gamma^2`` the underdamped (delta > 0) and overdamped
    (delta < 0) branches use trigonometric and cancellation-free exponential
    forms; near critical damping (``|delta| s^2 <= 1``) the cos/sinc factors
    are summed as power series in ``delta s^2``, which is exact at
    ``delta = 0`` and continuous across the branches.  ``omega = 0`` gives the
    damped free particle.
    """
    omega, c, s = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (omega, c, s)))
    gamma = 0.5 * c
    w2 = omega * omega
    delta = w2 - gamma * gamma
    z = -delta * s * s
    series = np.abs(z) <= 1.0
    under = ~series & (delta > 0)
    over = ~series & (delta < 0)

    b11 = np.empty(omega.shape)
    b12 = np.empty(omega.shape)
    b22 = np.empty(omega.shape)

    if series.any():
        zs, ss, gs = z[series], s[series], gamma[series]
        C = np.polyval(_COS_COEF[::-1], zs)
        S = ss * np.polyval(_SIN_COEF[::-1], zs)
        e = np.exp(-gs * ss)
        b11[series] = e * (C + gs * S)
        b12[series] = e * S
        b22[series] = e * (C - gs * S)
    if under.any():
        r = np.sqrt(delta[under])
        su, gu = s[under], gamma[under]
        e = np.exp(-gu * su)
        C = np.cos(r * su)
        S = np.sin(r * su) / r
        b11[under] = e * (C + gu * S)
        b12[under] = e * S
        b22[under] = e * (C - gu * S)
    if over.any():
        k = np.sqrt(-delta[over])
        so, go, wo = s[over], gamma[over], w2[over]
        slow = wo / (go + k)  # gamma - k without cancellation
        fast = go + k
        ea, eb = np.exp(-slow * so), np.exp(-fast * so)
        b11[over] = (fast * ea - slow * eb) / (2 * k)
        b12[over] = ea * (-np.expm1(-2 * k * so)) / (2 * k)
        b22[over] = (fast * eb - slow * ea) / (2 * k)
    b21 = -w2 * b12
    return b11, b12, b21, b22


@dataclass(frozen=True, eq=False)
class Propagator:
    """Block form of the 2d x 2d fast-flow matrix ``B(s)``."""

    s: float
    B11: np.ndarray
    B12: np.ndarray
    B21: np.ndarray
    B22: np.ndarray

    @property
    def matrix(self):
        return np.block([[self.B11, self.B12], [self.B21, self.B22]])

    def apply(self, q, p):
        return q @ self.B11.T + p @ self.B12.T, q @ self.B21.T + p @ self.B22.T


def _rotate(U, b, diagonal):
    if diagonal:
        return np.diag(b)
    return (U * b) @ U.T


def assemble_propagator(modal: ModalForm, s: float) -> Propagator:
    """Exact fast flow over time ``s`` in original (unit-mass) coordinates."""
    b = scalar_damped_blocks(modal.omega, modal.damp, s)
    diag = modal.is_diagonal
    return Propagator(float(s), *(_rotate(modal.U, bi, diag) for bi in b))


def propagator_integral(modal: ModalForm, H: float) -> Propagator:
    """Blocks of ``int_0^H B(s) ds``, by adaptive Gauss-Legendre quadrature."""
    omega, damp = modal.omega, modal.damp

    def integrand(t):
        b = scalar_damped_blocks(omega[None, :], damp[None, :], t[:, None])
        return np.stack(b, axis=1)

    scale = max(abs(H), abs(H) ** 2 * max(1.0, float(np.max(omega, initial=0.0))))
    vals = adaptive_gauss_legendre(integrand, 0.0, H, QUAD_RTOL * scale,
                                   init_panels=_init_panels(modal, H))
    diag = modal.is_diagonal
    return Propagator(float(H), *(_rotate(modal.U, vals[i], diag) for i in range(4)))


@dataclass(frozen=True, eq=False)
class KickCovariance:
    """Covariance of the exact Gaussian kick ``(Rq, Rp)`` over a step ``H``."""

    H: float
    Sigma2: np.ndarray
    factor: np.ndarray

    @property
    def dim(self):
        return self.Sigma2.shape[0] // 2

    @property
    def blocks(self):
        d = self.dim
        S = self.Sigma2
        return S[:d, :d], S[:d, d:], S[d:, :d], S[d:, d:]


def _init_panels(modal, H):
    # about one panel per half oscillation of the fastest mode
    rate = float(np.max(modal.omega + 0.5 * modal.damp, initial=0.0))
    return int(min(max(1, np.ceil(rate * abs(H) / np.pi)), 200_000))


def modal_noise(modal: ModalForm, sigma: np.ndarray) -> np.ndarray:
    return modal.U.T @ sigma @ sigma.T @ modal.U


def kick_covariance(modal: ModalForm, sigma, H: float) -> KickCovariance:
    """Covariance of ``int_0^H B(H-s) (0, sigma dW_s)``.

    The four blocks ``int B_a(t) sigma sigma^T B_b(t)^T dt`` are integrated in
    the modal basis, where each entry is a product of two scalar damped
    oscillator blocks, then rotated back and symmetrised.  The factor is a
    spectral square root with negative eigenvalues clamped to zero.
    """
    if not H > 0:
        raise ValueError(f"kick covariance needs H > 0, got {H}")
    d = modal.dim
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim < 2:
        sigma = sigma * np.eye(d) if sigma.ndim == 0 else np.diag(sigma)
    snorm2 = np.linalg.norm(sigma, 2) ** 2
    if snorm2 == 0:
        zero = np.zeros((2 * d, 2 * d))
        return KickCovariance(float(H), zero, zero.copy())

    S = modal_noise(modal, sigma)
    omega, damp = modal.omega, modal.damp

    def integrand(t):
        _, b12, _, b22 = scalar_damped_blocks(omega[None, :], damp[None, :], t[:, None])
        out = np.empty((len(t), 3, d, d))
        out[:, 0] = b12[:, :, None] * b12[:, None, :]
        out[:, 1] = b12[:, :, None] * b22[:, None, :]
        out[:, 2] = b22[:, :, None] * b22[:, None, :]
        return out * S

    tol = QUAD_RTOL * snorm2 * max(H, H ** 3)
    m11, m12, m22 = adaptive_gauss_legendre(integrand, 0.0, H, tol,
                                            init_panels=_init_panels(modal, H))
    U = modal.U
    s11, s12, s22 = U @ m11 @ U.T, U @ m12 @ U.T, U @ m22 @ U.T
    Sigma2 = np.block([[s11, s12], [s12.T, s22]])
    Sigma2 = 0.5 * (Sigma2 + Sigma2.T)
    w, V = np.linalg.eigh(Sigma2)
    factor = V * np.sqrt(np.clip(w, 0.0, None))
    return KickCovariance(float(H), Sigma2, factor)


def sample_kick(cov: KickCovariance, rng, size=()):
    """Draw ``(Rq, Rp)`` with leading shape ``size`` from ``N(0, Sigma2)``."""
    size = (size,) if np.isscalar(size) else tuple(size)
    d = cov.dim
    z = rng.standard_normal(size + (2 * d,))
    return kick_from_normals(cov, z)


def kick_from_normals(cov: KickCovariance, z):
    x = z @ cov.factor.T
    d = cov.dim
    return x[..., :d], x[..., d:]


class KickAggregator:
    """Left-point Ito sum ``sum_j B(H - s_j) (0, sigma dW_j)`` on a uniform grid.

    Built once per ``(H, h)``; applying it to increments of shape
    ``(n, ..., m)`` (``n = H/h`` rows) yields the coupled kick for a batch.
    """

    def __init__(self, modal: ModalForm, sigma, H, h):
        n = int(round(H / h))
        if n < 1 or abs(n * h - H) > 1e-9 * max(1.0, abs(H)):
            raise PathMismatch(f"step {H} is not a multiple of grid spacing {h}")
        self.H, self.h, self.n = float(H), float(h), n
        left = np.arange(n) * (H / n)
        _, b12, _, b22 = scalar_damped_blocks(modal.omega[None, :], modal.damp[None, :],
                                              (H - left)[:, None])
        U = modal.U
        sigma_modal = U.T @ np.asarray(sigma, dtype=float)
        # rows: weight matrices (d x m) per grid point
        self.Wq = np.einsum("ik,jk,kl->jil", U, b12, sigma_modal)
        self.Wp = np.einsum("ik,jk,kl->jil", U, b22, sigma_modal)

    def __call__(self, dW):
        dW = np.asarray(dW, dtype=float)
        if dW.shape[0] != self.n:
            raise PathMismatch(f"expected {self.n} increments, got {dW.shape[0]}")
        Rq = np.einsum("jim,j...m->...i", self.Wq, dW)
        Rp = np.einsum("jim,j...m->...i", self.Wp, dW)
        return Rq, Rp


def coupled_kick_from_increments(modal: ModalForm, sigma, H, increments):
    """Kick driven by a given Brownian path, as a list of ``(dt_j, dW_j)``.

    Used to drive a macro step with the same path as a fine reference
    integrator; converges in mean square to the exact kick as ``max dt_j -> 0``.
    """
    sigma = np.asarray(sigma, dtype=float)
    dts = np.array([float(dt) for dt, _ in increments])
    if abs(dts.sum() - H) > 1e-9 * max(1.0, abs(H)):
        raise PathMismatch(f"increments span {dts.sum()} but step is {H}")
    left = np.concatenate([[0.0], np.cumsum(dts)[:-1]])
    _, b12, _, b22 = scalar_damped_blocks(modal.omega[None, :], modal.damp[None, :],
                                          (H - left)[:, None])
    U = modal.U
    single = np.ndim(increments[0][1]) == 1
    Rq = Rp = 0.0
    for j, (_, dW) in enumerate(increments):
        # (d, batch) modal noise for this increment
        noise = U.T @ (sigma @ np.atleast_2d(np.asarray(dW, dtype=float)).T)
        Rq = Rq + (U @ (b12[j][:, None] * noise)).T
        Rp = Rp + (U @ (b22[j][:, None] * noise)).T
    Rq, Rp = np.asarray(Rq), np.asarray(Rp)
    return (Rq[0], Rp[0]) if single else (Rq, Rp)


class FastFlow:
    """Modal form of a unit-mass system with cached propagators and covariances."""

    def __init__(self, sys: StiffSystem):
        self.system = sys
        self.modal = modal_decompose(sys)
        self._props = {}
        self._covs = {}
        self._aggs = {}
        self._ints = {}

    def propagator(self, s) -> Propagator:
        key = float(s)
        if key not in self._props:
            self._props[key] = assemble_propagator(self.modal, key)
        return self._props[key]

    def covariance(self, H) -> KickCovariance:
        key = float(H)
        if key not in self._covs:
            self._covs[key] = kick_covariance(self.modal, self.system.sigma, key)
        return self._covs[key]

    def aggregator(self, H, h) -> KickAggregator:
        key = (float(H), float(h))
        if key not in self._aggs:
            self._aggs[key] = KickAggregator(self.modal, self.system.sigma, H, h)
        return self._aggs[key]

    def integral(self, H) -> Propagator:
        key = float(H)
        if key not in self._ints:
            self._ints[key] = propagator_integral(self.modal, key)
        return self._ints[key]
