"""Observables, norms, convergence studies and structure checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BlowUp, GridNesting, MissingPotential, NonFiniteState
from .fastflow import FastFlow
from .integrators import (
    BLOWUP_THRESHOLD,
    Method,
    NoiseMode,
    StepPlan,
    Stepper,
    TrajectoryRecorder,
    draw_dim,
    integrate,
    step_sim1_dual,
    step_fine_euler_maruyama,
    step_fine_reference,
    step_sim1_langevin,
    step_sim2_langevin,
)
from .model import State, StiffSystem, mass_weighted_form
from .noise import NoiseFeed, make_path_streams
from .parallel import map_batches, path_batches


# --- energies and norms ----------------------------------------------------

def hamiltonian_energy(sys: StiffSystem, state: State):
    """``p^T M^{-1} p / 2 + V(q) + q^T K q / (2 eps)``."""
    if sys.potential is None:
        raise MissingPotential(f"system {sys.name!r} has no potential callback")
    q, p = state.q, state.p
    kinetic = 0.5 * np.sum(p * np.linalg.solve(sys.M, p[..., None])[..., 0], axis=-1) \
        if not sys.unit_mass else 0.5 * np.sum(p * p, axis=-1)
    stiff = 0.5 * np.sum(q * (q @ sys.K.T), axis=-1) / sys.eps
    return kinetic + sys.potential(q) + stiff


@dataclass(frozen=True, eq=False)
class EnergyNormContext:
    """``Omega = eps^{-1/2} sqrt(K)`` and its inverse for the scaled energy norm.

    Zero-frequency (free) modes are given unit scaleless stiffness, i.e. the
    momentum of a free mode is weighted like that of a stiff mode with
    ``K``-eigenvalue 1.
    """

    Omega: np.ndarray
    Omega_inv: np.ndarray
    eps: float

    @classmethod
    def from_system(cls, sys: StiffSystem) -> "EnergyNormContext":
        unit, _ = mass_weighted_form(sys)
        w, V = np.linalg.eigh(0.5 * (unit.K + unit.K.T))
        floor = 1e-12 * max(np.abs(w).max(), 1e-300)
        w = np.where(w <= floor, 1.0, w)
        root = np.sqrt(w / unit.eps)
        return cls((V * root) @ V.T, (V / root) @ V.T, unit.eps)


def energy_norm(ctx: EnergyNormContext, q, p=None):
    """``||(q, Omega^{-1} p)||_2`` over the last axis; ``q`` may be the stacked ``x``."""
    if p is None:
        x = np.asarray(q)
        d = x.shape[-1] // 2
        q, p = x[..., :d], x[..., d:]
    scaled = p @ ctx.Omega_inv.T
    return np.sqrt(np.sum(q * q, axis=-1) + np.sum(scaled * scaled, axis=-1))


def energy_matrix_norm(ctx: EnergyNormContext, B):
    """Operator norm of a 2d x 2d block matrix in the scaled energy norm."""
    d = ctx.Omega.shape[0]
    B = np.asarray(B)
    W = np.block([
        [B[:d, :d], B[:d, d:] @ ctx.Omega],
        [ctx.Omega_inv @ B[d:, :d], ctx.Omega_inv @ B[d:, d:] @ ctx.Omega],
    ])
    return float(np.linalg.norm(W, 2))


# --- order fitting ---------------------------------------------------------

@dataclass(frozen=True)
class OrderFit:
    order: float
    intercept: float
    stderr: float


def fit_order(steps, errors) -> OrderFit:
    """Least-squares slope of ``log(error)`` against ``log(step)``."""
    x = np.log(np.asarray(steps, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    if len(x) < 2:
        raise ValueError("need at least two points to fit an order")
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    n = len(x)
    if n > 2:
        resid = y - A @ coef
        s2 = resid @ resid / (n - 2)
        stderr = math.sqrt(s2 / np.sum((x - x.mean()) ** 2))
    else:
        stderr = float("nan")
    return OrderFit(float(coef[0]), float(coef[1]), stderr)


def jackknife_rms(sq):
    """RMS of per-path squared errors with its jackknife standard error."""
    sq = np.asarray(sq, dtype=float)
    n = len(sq)
    rms = math.sqrt(sq.mean())
    if n < 2:
        return rms, float("nan")
    loo = np.sqrt((sq.sum() - sq) / (n - 1))
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return rms, se


# --- strong error studies --------------------------------------------------

ERROR_KINDS = ("q", "p", "E")


@dataclass
class ConvergenceReport:
    method: str
    step_grid: list
    rms_error: dict  # kind -> list over step_grid
    std_error: dict  # kind -> list (jackknife)
    fitted_order: dict  # kind -> OrderFit
    n_paths: int
    seed: int
    reference: dict
    blowups: list = field(default_factory=list)
    eps_sweep: dict = field(default_factory=dict)

    def rows(self):
        for i, H in enumerate(self.step_grid):
            for kind in ERROR_KINDS:
                yield H, kind, self.rms_error[kind][i], self.std_error[kind][i]


def default_fine_step(sys: StiffSystem, Hmin: float, fraction: float = 0.1) -> float:
    """Largest ``h <= fraction / omega_max`` that divides ``Hmin``."""
    unit, _ = mass_weighted_form(sys)
    wmax = float(np.sqrt(np.linalg.eigvalsh(unit.K).max() / unit.eps))
    target = fraction / max(wmax, 1e-300)
    n = max(1, math.ceil(Hmin / target - 1e-9))
    return Hmin / n


def _check_nesting(grid, T, h):
    Hmax = max(grid)
    for H in grid:
        for big, small, what in ((T, H, "T"), (Hmax, H, "largest H"), (H, h, "H")):
            r = big / small
            if abs(r - round(r)) > 1e-9 * r:
                raise GridNesting(f"{what} = {big} is not a multiple of {small}")
    return Hmax


def _reference_ode(sys: StiffSystem, initial: State, T: float, rtol=1e-12, atol=1e-14):
    d = sys.dim
    A = sys.K / sys.eps

    def rhs(_, y):
        q, p = y[:d], y[d:]
        return np.concatenate([p, sys.force(q) - A @ q - sys.c @ p])

    sol = solve_ivp(rhs, (0.0, T), np.concatenate([initial.q, initial.p]), method="DOP853",
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"reference ODE solve failed: {sol.message}")
    return sol.y[:d, -1], sol.y[d:, -1]


def _deterministic_errors(sys, initial, method, grid, T, reference, h):
    unit, transform = mass_weighted_form(sys)
    init = transform.forward(initial)
    flow = FastFlow(unit) if Method(method).is_sim else None
    if reference == "dop853":
        q_ref, p_ref = _reference_ode(unit, init, T)
    else:
        plan = StepPlan(reference, h, NoiseMode.NONE)
        res = integrate(unit, plan, init, T, flow=flow, validate=False)
        q_ref, p_ref = res.final.q, res.final.p
    sq, blowups = {}, []
    for H in grid:
        try:
            res = integrate(unit, StepPlan(method, H, NoiseMode.NONE), init, T, flow=flow,
                            validate=False)
            sq[H] = (res.final.q - q_ref, res.final.p - p_ref)
        except BlowUp as exc:
            blowups.append({"H": H, "step": exc.step, "norm": exc.norm})
            sq[H] = None
    return sq, blowups


def _coupled_batch(unit, flow, init, method, grid, T, h, reference, seed, lo, hi):
    """Per-path final differences (SIM minus reference) for paths ``lo:hi``."""
    B = hi - lo
    feed = NoiseFeed(make_path_streams(seed, B, start=lo), unit.noise_dim)
    n_window = int(round(max(grid) / h))
    n_windows = int(round(T / max(grid)))
    q0 = np.broadcast_to(init.q, (B, unit.dim)).copy()
    p0 = np.broadcast_to(init.p, (B, unit.dim)).copy()
    ref = State(q0, p0)
    sims = {H: State(q0.copy(), p0.copy()) for H in grid}
    step = step_sim1_langevin if Method(method) is Method.SIM1_LAN else step_sim2_langevin
    ref_prop, ref_agg = flow.propagator(h), flow.aggregator(h, h)
    sqh = math.sqrt(h)
    dead = set()
    for _ in range(n_windows):
        dW = sqh * feed.normals(n_window)  # (n_window, B, m)
        for j in range(n_window):
            if reference == "fine-strang":
                ref = step_sim2_langevin(ref, h, ref_prop, unit.force, ref_agg(dW[j:j + 1]))
            elif reference == "fine-se":
                ref = step_fine_reference(ref, h, unit, dW[j])
            else:
                ref = step_fine_euler_maruyama(ref, h, unit, dW[j])
        for H in grid:
            if H in dead:
                continue
            agg, prop = flow.aggregator(H, h), flow.propagator(H)
            st = sims[H]
            try:
                for k in range(n_window // agg.n):
                    st = step(st, H, prop, unit.force, agg(dW[k * agg.n:(k + 1) * agg.n]))
            except NonFiniteState:
                dead.add(H)
                continue
            if not np.all(np.abs(st.x) < BLOWUP_THRESHOLD):
                dead.add(H)
            sims[H] = st
    return {H: (None if H in dead else (sims[H].q - ref.q, sims[H].p - ref.p)) for H in grid}


def coupled_errors(sys: StiffSystem, initial: State, method, grid, T, n_paths, seed, *,
                   h=None, reference="fine-strang", batch=500):
    """Final-time SIM-minus-reference differences for every path and step.

    Every path draws one Brownian grid of spacing ``h``; the reference steps
    on it directly while each macro step ``H`` aggregates the same increments
    into its kick, so the difference isolates the discretisation error.
    Returns ``{H: (dq, dp)}`` with arrays of shape ``(n_paths, d)`` (``None``
    for step sizes that blew up) and the ``h`` used.
    """
    unit, transform = mass_weighted_form(sys)
    init = transform.forward(initial)
    grid = sorted(grid, reverse=True)
    if h is None:
        h = default_fine_step(unit, min(grid))
    _check_nesting(grid, T, h)
    flow = FastFlow(unit)
    for H in grid:
        flow.aggregator(H, h)
        flow.propagator(H)
    flow.aggregator(h, h)
    flow.propagator(h)

    def run(b):
        return _coupled_batch(unit, flow, init, method, grid, T, h, reference, seed, *b)

    parts = map_batches(run, path_batches(n_paths, batch))
    out = {}
    for H in grid:
        if any(part[H] is None for part in parts):
            out[H] = None
        else:
            out[H] = (np.concatenate([part[H][0] for part in parts]),
                      np.concatenate([part[H][1] for part in parts]))
    return out, h


def _sq_errors(ctx, dq, dp):
    return {"q": np.sum(dq * dq, axis=-1), "p": np.sum(dp * dp, axis=-1),
            "E": energy_norm(ctx, dq, dp) ** 2}


def strong_convergence_study(sys: StiffSystem, initial: State, method, step_grid, T,
                             n_paths=1, seed=0, *, h=None, reference=None,
                             batch=500) -> ConvergenceReport:
    """Root-mean-square final-time error against a fine reference, per step size.

    Noiseless systems are compared against a tight-tolerance DOP853 solve
    (``reference="dop853"``, the default) or a fine-step integrator; noisy
    systems use path-coupled Brownian grids (see :func:`coupled_errors`).
    Step sizes that blow up are recorded in ``blowups`` and left out of the fit.
    """
    grid = sorted((float(H) for H in step_grid), reverse=True)
    if len(grid) < 4 or len(set(grid)) != len(grid):
        raise ValueError("a convergence study needs at least 4 distinct step sizes")
    ctx = EnergyNormContext.from_system(sys)
    stochastic = bool(np.any(sys.sigma))
    blowups = []
    if stochastic:
        reference = reference or "fine-strang"
        diffs, h = coupled_errors(sys, initial, method, grid, T, n_paths, seed, h=h,
                                  reference=reference, batch=batch)
        for H, v in diffs.items():
            if v is None:
                blowups.append({"H": H})
    else:
        reference = reference or "dop853"
        n_paths = 1
        if reference != "dop853" and h is None:
            h = default_fine_step(sys, min(grid), 0.01)
        diffs, blowups = _deterministic_errors(sys, initial, method, grid, T, reference, h)
    rms = {k: [] for k in ERROR_KINDS}
    se = {k: [] for k in ERROR_KINDS}
    for H in grid:
        if diffs[H] is None:
            for k in ERROR_KINDS:
                rms[k].append(float("nan"))
                se[k].append(float("nan"))
            continue
        dq, dp = diffs[H]
        sq = _sq_errors(ctx, np.atleast_2d(dq), np.atleast_2d(dp))
        for k in ERROR_KINDS:
            r, s = jackknife_rms(sq[k])
            rms[k].append(r)
            se[k].append(s)
    fits = {}
    for k in ERROR_KINDS:
        ok = [i for i, v in enumerate(rms[k]) if np.isfinite(v) and v > 0]
        fits[k] = fit_order([grid[i] for i in ok], [rms[k][i] for i in ok]) if len(ok) >= 2 \
            else None
    return ConvergenceReport(
        method=Method(method).value, step_grid=grid, rms_error=rms, std_error=se,
        fitted_order=fits, n_paths=n_paths, seed=seed,
        reference={"kind": reference, "h": h, "T": T}, blowups=blowups)


def epsilon_sweep(builder: Callable[[float], tuple], omegas, method, H, T, n_paths=1, seed=0,
                  *, reference=None, h_fraction=0.1):
    """Final-time RMS errors at a fixed step across stiffness values.

    ``builder(omega)`` returns ``(system, initial_state)``.  Returns
    ``{omega: {"q": .., "p": .., "E": ..}}``.
    """
    out = {}
    for w in omegas:
        sys, init = builder(w)
        ctx = EnergyNormContext.from_system(sys)
        if np.any(sys.sigma):
            h = default_fine_step(sys, H, h_fraction)
            diffs, _ = coupled_errors(sys, init, method, [H], T, n_paths, seed, h=h,
                                      reference=reference or "fine-strang")
        else:
            diffs, _ = _deterministic_errors(sys, init, method, [H], T, reference or "dop853",
                                             None)
        v = diffs[H]
        if v is None:
            out[w] = {k: float("nan") for k in ERROR_KINDS}
            continue
        sq = _sq_errors(ctx, np.atleast_2d(v[0]), np.atleast_2d(v[1]))
        out[w] = {k: math.sqrt(float(np.mean(sq[k]))) for k in ERROR_KINDS}
    return out


def uniformity_ratio(sweep: dict, kind="q"):
    vals = [v[kind] for v in sweep.values()]
    return max(vals) / min(vals)


# --- moments ---------------------------------------------------------------

@dataclass
class MomentTable:
    times: np.ndarray
    mean: dict  # side -> {obs: array}
    var: dict
    se_mean: dict
    se_var: dict
    z_mean: dict  # obs -> array
    z_var: dict

    def max_abs_z(self, obs):
        return float(max(np.max(np.abs(self.z_mean[obs])), np.max(np.abs(self.z_var[obs]))))


def _moments(values):
    n = values.shape[-1]
    mean = values.mean(axis=-1)
    c = values - mean[..., None]
    var = (c ** 2).sum(axis=-1) / (n - 1)
    m4 = (c ** 4).mean(axis=-1)
    se_mean = np.sqrt(var / n)
    se_var = np.sqrt(np.maximum(m4 - var ** 2 * (n - 3) / (n - 1), 0.0) / n)
    return mean, var, se_mean, se_var


def simulate_paths(sys, initial, plan, T, n_paths, seed, record_every=1, batch=1000):
    """Run ``n_paths`` independent paths; returns ``(times, q, p)`` with shapes
    ``(n_rec,)`` and ``(n_rec, n_paths, d)``."""
    def run(b):
        lo, hi = b
        n = hi - lo
        init = State(np.broadcast_to(initial.q, (n, sys.dim)).copy(),
                     np.broadcast_to(initial.p, (n, sys.dim)).copy(), initial.t)
        dim = draw_dim(sys, plan)
        feed = NoiseFeed(make_path_streams(seed, n, start=lo), dim) if dim else None
        rec = TrajectoryRecorder(record_every)
        integrate(sys, plan, init, T, rec, noise=feed)
        return rec.arrays()

    parts = map_batches(run, path_batches(n_paths, batch))
    times = parts[0][0]
    return times, np.concatenate([p[1] for p in parts], axis=1), \
        np.concatenate([p[2] for p in parts], axis=1)


def moment_comparison(sys_a, plan_a, sys_b, plan_b, initial: State, observables: dict,
                      T, n_paths, seed, seed_b=None, mesh_step=None) -> MomentTable:
    """Empirical means and variances of observables on a shared time mesh.

    ``mesh_step`` must be a multiple of both plans' steps (default: ``plan_a.H``).
    ``observables`` maps names to ``f(q, p) -> array`` reducing the last axis.
    z-scores use pooled standard errors of the two independent ensembles.
    """
    mesh_step = plan_a.H if mesh_step is None else mesh_step
    seed_b = seed if seed_b is None else seed_b
    tabs = {}
    for side, sys, plan, s in (("a", sys_a, plan_a, seed), ("b", sys_b, plan_b, seed_b)):
        every = mesh_step / plan.H
        if abs(every - round(every)) > 1e-9 * every:
            raise GridNesting(f"mesh step {mesh_step} is not a multiple of H = {plan.H}")
        times, q, p = simulate_paths(sys, initial, plan, T, n_paths, s, int(round(every)))
        tabs[side] = (times, {name: f(q, p) for name, f in observables.items()})
    ta, tb = tabs["a"][0], tabs["b"][0]
    n = min(len(ta), len(tb))
    if not np.allclose(ta[:n], tb[:n], rtol=0, atol=1e-9 * max(1.0, T)):
        raise GridNesting("the two runs do not share an output mesh")
    mean, var, se_m, se_v = {"a": {}, "b": {}}, {"a": {}, "b": {}}, {"a": {}, "b": {}}, \
        {"a": {}, "b": {}}
    z_m, z_v = {}, {}
    for name in observables:
        for side in ("a", "b"):
            vals = np.moveaxis(tabs[side][1][name][:n], 0, 0)
            mean[side][name], var[side][name], se_m[side][name], se_v[side][name] = \
                _moments(vals)
        with np.errstate(divide="ignore", invalid="ignore"):
            dm = mean["a"][name] - mean["b"][name]
            sm = np.hypot(se_m["a"][name], se_m["b"][name])
            z_m[name] = np.where(sm > 0, dm / np.where(sm > 0, sm, 1), 0.0)
            dv = var["a"][name] - var["b"][name]
            sv = np.hypot(se_v["a"][name], se_v["b"][name])
            z_v[name] = np.where(sv > 0, dv / np.where(sv > 0, sv, 1), 0.0)
    return MomentTable(ta[:n], mean, var, se_m, se_v, z_m, z_v)


# --- structure checks ------------------------------------------------------

def one_step_map(sys: StiffSystem, method, H, kick=None, flow=None):
    """Deterministic one-step map ``x -> x'`` on stacked vectors.

    For noisy methods the noise is frozen at ``kick`` (zero if ``None``).
    ``method`` may also be ``"sim1-dual"`` or ``"fine-em"``.
    """
    unit, _ = mass_weighted_form(sys)
    d = unit.dim
    method = str(getattr(method, "value", method))
    flow = flow or FastFlow(unit) if method not in ("fine-em", "fine-se", "gla1") else None
    if kick is None:
        kick = (np.zeros(d), np.zeros(d))

    if method == "sim1-dual":
        prop = flow.propagator(H)

        def f(x):
            return step_sim1_dual(State(x[:d], x[d:]), H, prop, unit.force).x
        return f
    if method == Method.SIM1_LAN.value:
        prop = flow.propagator(H)

        def f(x):
            return step_sim1_langevin(State(x[:d], x[d:]), H, prop, unit.force, kick).x
        return f
    if method == Method.SIM2_LAN.value and np.any(unit.sigma):
        prop = flow.propagator(H)

        def f(x):
            return step_sim2_langevin(State(x[:d], x[d:]), H, prop, unit.force, kick).x
        return f
    stepper = Stepper(unit, StepPlan(method, H, NoiseMode.NONE), flow=flow)

    def f(x):
        return stepper.advance(State(x[:d], x[d:])).x
    return f


def fd_jacobian(f, x, delta=None):
    """Central-difference Jacobian with step ``1e-6 (1 + ||x||)``."""
    x = np.asarray(x, dtype=float)
    delta = 1e-6 * (1.0 + np.linalg.norm(x)) if delta is None else delta
    n = len(x)
    J = np.empty((len(f(x)), n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = delta
        J[:, i] = (f(x + e) - f(x - e)) / (2 * delta)
    return J


def canonical_form(d):
    return np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])


def symplectic_defect(sys: StiffSystem, method, state: State, H) -> float:
    """``||J^T Omega J - Omega||_2`` for the finite-difference one-step Jacobian."""
    d = sys.dim
    J = fd_jacobian(one_step_map(sys, method, H), State(state.q, state.p).x)
    Om = canonical_form(d)
    return float(np.linalg.norm(J.T @ Om @ J - Om, 2))


@dataclass
class DetUniformity:
    dets: np.ndarray
    max_rel_spread: float
    expected: float
    max_rel_error: float


def jacobian_det_uniformity(sys: StiffSystem, method, states: Sequence[State], H,
                            kick=None) -> DetUniformity:
    """Determinants of the noise-frozen one-step Jacobian at several states.

    For quasi-symplectic methods they agree with each other and with
    ``exp(-tr(c) H)`` (mass-weighted damping).
    """
    if len(states) < 2:
        raise ValueError("need at least two states")
    f = one_step_map(sys, method, H, kick)
    dets = np.array([np.linalg.det(fd_jacobian(f, State(s.q, s.p).x)) for s in states])
    unit, _ = mass_weighted_form(sys)
    expected = math.exp(-np.trace(unit.c) * H)
    spread = float((dets.max() - dets.min()) / abs(dets.mean()))
    err = float(np.max(np.abs(dets - expected)) / expected)
    return DetUniformity(dets, spread, expected, err)


# --- local error suite ------------------------------------------------------

@dataclass
class BridgeStudy:
    step_grid: list
    rms_original_vs_bridge: list
    rms_bridge_vs_sim: list
    order_original_vs_bridge: OrderFit
    order_bridge_vs_sim: OrderFit
    h: float
    n_paths: int
    seed: int


def bridge_local_error_study(sys: StiffSystem, initial: State, step_grid, n_paths, seed, *,
                             h=None, batch=500) -> BridgeStudy:
    """One-step comparison of original dynamics, frozen-force bridge, and SIM1.

    From ``initial`` and one Brownian grid per path, computes
    (a) the original dynamics with a fine-step exact-fast-flow Strang
    integrator, (b) the bridge dynamics exactly,
    ``B(H) x0 + (int_0^H B(s) ds)(0, F(q0)) + kick``, and (c) one SIM1 step with
    the same kick.  Reports RMS energy-norm distances (a)-(b) and (b)-(c).
    """
    unit, transform = mass_weighted_form(sys)
    init = transform.forward(initial)
    grid = sorted((float(H) for H in step_grid), reverse=True)
    if h is None:
        h = default_fine_step(unit, min(grid), 0.01)
    for H in grid:
        r = H / h
        if abs(r - round(r)) > 1e-9 * r:
            raise GridNesting(f"H = {H} is not a multiple of h = {h}")
    ctx = EnergyNormContext.from_system(unit)
    flow = FastFlow(unit)
    d, m = unit.dim, unit.noise_dim
    prop_h = flow.propagator(h)
    agg_h = flow.aggregator(h, h)

    def run(b):
        lo, hi = b
        n = hi - lo
        out_ab, out_bc = [], []
        for H in grid:
            # a fresh stream per step size keeps each H's sample independent of the grid
            feed = NoiseFeed(make_path_streams(seed, n, start=lo), m)
            nsub = int(round(H / h))
            dW = math.sqrt(h) * feed.normals(nsub)
            q0 = np.broadcast_to(init.q, (n, d)).copy()
            p0 = np.broadcast_to(init.p, (n, d)).copy()
            kick = flow.aggregator(H, h)(dW)
            prop, integ = flow.propagator(H), flow.integral(H)
            f0 = unit.force(q0)
            qb, pb = prop.apply(q0, p0)
            qb = qb + f0 @ integ.B12.T + kick[0]
            pb = pb + f0 @ integ.B22.T + kick[1]
            sim = step_sim1_langevin(State(q0, p0), H, prop, unit.force, kick)
            ref = State(q0, p0)
            for j in range(nsub):
                ref = step_sim2_langevin(ref, h, prop_h, unit.force, agg_h(dW[j:j + 1]))
            out_ab.append(energy_norm(ctx, ref.q - qb, ref.p - pb) ** 2)
            out_bc.append(energy_norm(ctx, qb - sim.q, pb - sim.p) ** 2)
        return out_ab, out_bc

    parts = map_batches(run, path_batches(n_paths, batch))
    ab = [math.sqrt(np.mean(np.concatenate([pt[0][i] for pt in parts])))
          for i in range(len(grid))]
    bc = [math.sqrt(np.mean(np.concatenate([pt[1][i] for pt in parts])))
          for i in range(len(grid))]
    return BridgeStudy(grid, ab, bc, fit_order(grid, ab), fit_order(grid, bc), h, n_paths, seed)


# --- stability -------------------------------------------------------------

@dataclass
class StabilityScan:
    steps: np.ndarray
    stable: np.ndarray
    blowup_step: list
    unstable_intervals: list


def stability_scan(sys: StiffSystem, initial: State, method, steps, T, n_paths=1, seed=0,
                   threshold=1e8) -> StabilityScan:
    """Integrate at each sampled step size and classify blow-up."""
    steps = np.asarray(sorted(float(H) for H in steps))
    stochastic = bool(np.any(sys.sigma))
    stable, where = [], []
    for H in steps:
        mode = NoiseMode.EXACT if stochastic else NoiseMode.NONE
        plan = StepPlan(method, H, mode)
        init = State(np.broadcast_to(initial.q, (n_paths, sys.dim)).copy(),
                     np.broadcast_to(initial.p, (n_paths, sys.dim)).copy())
        dim = draw_dim(sys, plan)
        feed = NoiseFeed(make_path_streams(seed, n_paths), dim) if dim else None
        try:
            integrate(sys, plan, init, T, noise=feed, blowup_threshold=threshold)
            stable.append(True)
            where.append(None)
        except BlowUp as exc:
            stable.append(False)
            where.append(exc.step)
    stable = np.array(stable)
    intervals = []
    i = 0
    while i < len(steps):
        if not stable[i]:
            j = i
            while j + 1 < len(steps) and not stable[j + 1]:
                j += 1
            intervals.append((float(steps[i]), float(steps[j])))
            i = j + 1
        else:
            i += 1
    return StabilityScan(steps, stable, where, intervals)
