"""Experiment runners behind the command line.

Each runner takes a resolved :class:`~stiffsim.cli.RunConfig` and returns a
:class:`RunResult`: CSV tables, a JSON-ready summary, pass/fail flags and
optional SVG plots.  Runners are deterministic functions of the config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import problems as P
from .diagnostics import (
    bridge_local_error_study,
    epsilon_sweep,
    fit_order,
    moment_comparison,
    simulate_paths,
    stability_scan,
    strong_convergence_study,
    uniformity_ratio,
)
from .errors import BlowUp
from .integrators import Method, NoiseMode, StepPlan, TrajectoryRecorder, integrate
from .model import State
from .plots import line_plot

PASS, FAIL, NA = "pass", "fail", "n/a"


@dataclass
class RunResult:
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)
    summary: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)  # file name -> svg text

    @property
    def ok(self):
        return all(v != FAIL for v in self.flags.values())


def _flag(ok):
    return PASS if ok else FAIL


def _in_band(x, band):
    return band[0] <= x <= band[1]


def build_problem(cfg):
    return P.build(cfg.problem, P.make_config(cfg.problem, cfg.params))


def _coord_names(problem):
    d = problem.system.dim
    if problem.name == "two-spring":
        return ["x", "y"]
    return [f"x{i + 1}" for i in range(d)]


def default_order_band(method, stochastic):
    method = Method(method)
    if method in (Method.SIM1_HAM, Method.SIM1_LAN):
        return (0.4, 1.1) if stochastic else (0.8, 1.3)
    if method is Method.SIM4_DET:
        return (3.5, 4.5)
    return None


# --- simulate ---------------------------------------------------------------

def run_simulate(cfg) -> RunResult:
    pr = build_problem(cfg)
    sys = pr.system
    stochastic = bool(np.any(sys.sigma))
    plan = StepPlan(cfg.method, cfg.H, NoiseMode.EXACT if stochastic else NoiseMode.NONE)
    n_paths = cfg.paths if stochastic else 1
    times, q, p = simulate_paths(sys, pr.initial, plan, cfg.T, n_paths, cfg.seed)
    names = _coord_names(pr)
    res = RunResult()
    header = ["t"] + [f"q_{n}" for n in names] + [f"p_{n}" for n in names]
    res.tables["trajectory.csv"] = (header, [
        (t, *q[k, 0], *p[k, 0]) for k, t in enumerate(times)])
    if n_paths > 1:
        mq, vq = q.mean(axis=1), q.var(axis=1, ddof=1)
        header = ["t"] + [f"mean_{n}" for n in names] + [f"var_{n}" for n in names]
        res.tables["moments.csv"] = (header, [
            (t, *mq[k], *vq[k]) for k, t in enumerate(times)])
    res.summary = {"n_steps": len(times) - 1, "n_paths": n_paths,
                   "final_mean_q": q[-1].mean(axis=0).tolist()}
    if sys.potential is not None:
        from .diagnostics import hamiltonian_energy
        E = hamiltonian_energy(sys, State(q[:, 0], p[:, 0]))
        res.summary["energy_initial"] = float(E[0])
        res.summary["energy_final"] = float(E[-1])
    if cfg.svg:
        res.plots["trajectory.svg"] = line_plot(
            {f"q_{n}": (times, q[:, 0, i]) for i, n in enumerate(names)},
            title=f"{pr.name}, {plan.method.value}, path 0", xlabel="t", ylabel="q")
    return res


# --- converge ---------------------------------------------------------------

def run_converge(cfg) -> RunResult:
    pr = build_problem(cfg)
    sys = pr.system
    stochastic = bool(np.any(sys.sigma))
    rep = strong_convergence_study(sys, pr.initial, cfg.method, cfg.grid, cfg.T,
                                   cfg.paths if stochastic else 1, cfg.seed, h=cfg.h,
                                   reference=cfg.reference)
    res = RunResult()
    res.tables["convergence.csv"] = (["H", "kind", "rms_error", "std_error"], list(rep.rows()))
    res.summary = {
        "method": rep.method, "n_paths": rep.n_paths, "reference": rep.reference,
        "blowups": rep.blowups,
    }
    for kind, fit in rep.fitted_order.items():
        res.summary[f"fitted_order_{kind}"] = None if fit is None else fit.order
        res.summary[f"fitted_order_{kind}_stderr"] = None if fit is None else fit.stderr
    band = cfg.order_band or default_order_band(cfg.method, stochastic)
    res.summary["order_band"] = band
    fit_q = rep.fitted_order["q"]
    res.flags["order_q_in_band"] = NA if band is None else \
        _flag(fit_q is not None and _in_band(fit_q.order, band))
    if stochastic and band is not None:
        fit_e = rep.fitted_order["E"]
        res.flags["order_E_in_band"] = _flag(fit_e is not None and _in_band(fit_e.order, band))
    if cfg.omegas:
        H = cfg.sweep_H or cfg.grid[len(cfg.grid) // 2]

        def builder(w):
            pw = P.build(cfg.problem, P.make_config(cfg.problem, {**cfg.params, "omega": w}))
            return pw.system, pw.initial

        sweep = epsilon_sweep(builder, cfg.omegas, cfg.method, H, cfg.T,
                              cfg.paths if stochastic else 1, cfg.seed,
                              reference=cfg.reference)
        res.tables["eps_sweep.csv"] = (["omega", "H", "rms_q", "rms_p", "rms_E"], [
            (w, H, v["q"], v["p"], v["E"]) for w, v in sweep.items()])
        ratio = uniformity_ratio(sweep, "q")
        res.summary["eps_sweep_H"] = H
        res.summary["uniformity_ratio_q"] = ratio
        res.flags["uniform_q_within_2"] = _flag(ratio <= 2.0)
    if cfg.svg:
        H = np.array(rep.step_grid)
        series = {k: (H, np.array(rep.rms_error[k])) for k in ("q", "p", "E")}
        if fit_q is not None:
            series["fit q"] = (H, np.exp(fit_q.intercept) * H ** fit_q.order)
        res.plots["convergence.svg"] = line_plot(
            series, title=f"{rep.method} strong error", xlabel="H", ylabel="RMS error",
            logx=True, logy=True, markers=True)
    return res


# --- moments ----------------------------------------------------------------

def moment_plans(cfg, omega):
    H = P.resonant_step(cfg.H, omega, cfg.resonance) if cfg.resonance else cfg.H
    h_target = cfg.compare_h or 0.1 / omega
    n = max(1, round(H / h_target))
    return StepPlan(cfg.method, H), StepPlan(cfg.compare_method, H / n)


def run_moments(cfg) -> RunResult:
    pr = build_problem(cfg)
    omega = float(getattr(pr.config, "omega", 1.0))
    plan_a, plan_b = moment_plans(cfg, omega)
    names = _coord_names(pr)
    observables = {n: (lambda q, p, i=i: q[..., i]) for i, n in enumerate(names)}
    tab = moment_comparison(pr.system, plan_a, pr.system, plan_b, pr.initial, observables,
                            cfg.T, cfg.paths, cfg.seed, seed_b=cfg.seed + 1,
                            mesh_step=plan_a.H)
    rows = []
    for name in names:
        for k, t in enumerate(tab.times):
            rows.append((t, name, tab.mean["a"][name][k], tab.var["a"][name][k],
                         tab.se_mean["a"][name][k], tab.se_var["a"][name][k],
                         tab.mean["b"][name][k], tab.var["b"][name][k],
                         tab.se_mean["b"][name][k], tab.se_var["b"][name][k],
                         tab.z_mean[name][k], tab.z_var[name][k]))
    res = RunResult()
    res.tables["moments.csv"] = (
        ["t", "observable", "mean_a", "var_a", "se_mean_a", "se_var_a", "mean_b", "var_b",
         "se_mean_b", "se_var_b", "z_mean", "z_var"], rows)
    res.summary = {"method_a": plan_a.method.value, "H_a": plan_a.H,
                   "method_b": plan_b.method.value, "H_b": plan_b.H, "n_paths": cfg.paths,
                   "seed_a": cfg.seed, "seed_b": cfg.seed + 1,
                   "max_abs_z": {n: tab.max_abs_z(n) for n in names}}
    for name in cfg.flag_observables or names:
        res.flags[f"max_abs_z_{name}_le_3"] = _flag(tab.max_abs_z(name) <= 3.0)
    if cfg.svg:
        for name in names:
            res.plots[f"moments_{name}.svg"] = line_plot(
                {f"E[{name}] {plan_a.method.value}": (tab.times, tab.mean["a"][name]),
                 f"E[{name}] {plan_b.method.value}": (tab.times, tab.mean["b"][name]),
                 f"Var[{name}] {plan_a.method.value}": (tab.times, tab.var["a"][name]),
                 f"Var[{name}] {plan_b.method.value}": (tab.times, tab.var["b"][name])},
                title=f"moments of {name}", xlabel="t", ylabel="moment")
    return res


# --- FPU demo ---------------------------------------------------------------

@dataclass
class FPUDemo:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    energy_rel_error: np.ndarray
    drift_slope: float
    drift_stderr: float
    stiff_energy: np.ndarray
    spring_energies: np.ndarray
    x1_error: dict  # H -> max |x1 - reference| over [0, window]
    x1_ratio: float


def _linear_trend(t, y):
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ coef
    se = math.sqrt(r @ r / (len(t) - 2) / np.sum((t - t.mean()) ** 2))
    return float(coef[0]), se


def fpu_demo(cfg: P.FPUConfig, method="sim1-ham", H=0.1, T=1000.0, reference_h=5e-4,
             window=1.0) -> FPUDemo:
    pr = P.build("fpu", cfg)
    rec = TrajectoryRecorder(1)
    integrate(pr.system, StepPlan(method, H, NoiseMode.NONE), pr.initial, T, rec)
    t, x, y = rec.arrays()
    E = P.fpu_hamiltonian(x, y, cfg.omega, cfg.m)
    rel = (E - E[0]) / abs(E[0])
    slope, se = _linear_trend(t, rel)
    obs = P.fpu_observables(State(x, y), cfg)

    rec = TrajectoryRecorder(1)
    integrate(pr.system, StepPlan("fine-se", reference_h, NoiseMode.NONE), pr.initial,
              window, rec)
    tf, xf, _ = rec.arrays()
    errs = {}
    for step in (H, H / 2):
        r = TrajectoryRecorder(1)
        integrate(pr.system, StepPlan(method, step, NoiseMode.NONE), pr.initial, window, r)
        ts, xs, _ = r.arrays()
        idx = np.rint(ts / reference_h).astype(int)
        errs[step] = float(np.max(np.abs(xs[:, 0] - xf[idx, 0])))
    return FPUDemo(t, x, y, rel, slope, se, obs.total_stiff_energy, obs.spring_energies,
                   errs, errs[H] / errs[H / 2])


def fpu_flags(demo: FPUDemo, H, scale=1.0):
    I0 = demo.stiff_energy[0]
    return {
        "energy_rel_error_le_1pct": _flag(np.max(np.abs(demo.energy_rel_error)) <= 0.01),
        "energy_no_drift": _flag(abs(demo.drift_slope) <= 3 * demo.drift_stderr),
        "stiff_energy_within_10pct": _flag(np.max(np.abs(demo.stiff_energy / I0 - 1)) <= 0.1),
        "x1_error_le_10H": _flag(demo.x1_error[H] <= 10 * H * scale),
        "x1_halving_ratio_in_1p5_3": _flag(1.5 <= demo.x1_ratio <= 3.0),
    }


def run_fpu_demo(cfg) -> RunResult:
    fcfg = P.make_config("fpu", cfg.params)
    demo = fpu_demo(fcfg, cfg.method, cfg.H, cfg.T, cfg.reference_h)
    m = fcfg.m
    t = demo.times
    res = RunResult()
    res.tables["fpu_expansions.csv"] = (
        ["t"] + [f"x{m + i + 1}" for i in range(m)],
        [(tk, *demo.x[k, m:]) for k, tk in enumerate(t)])
    res.tables["fpu_midpoint.csv"] = (["t", "x1"], [(tk, demo.x[k, 0]) for k, tk in enumerate(t)])
    res.tables["fpu_spring_energies.csv"] = (
        ["t"] + [f"I{j + 1}" for j in range(m)],
        [(tk, *demo.spring_energies[k]) for k, tk in enumerate(t)])
    res.tables["fpu_total_stiff_energy.csv"] = (
        ["t", "I", "energy_rel_error"],
        [(tk, demo.stiff_energy[k], demo.energy_rel_error[k]) for k, tk in enumerate(t)])
    res.summary = {
        "H": cfg.H, "T": cfg.T, "omega": fcfg.omega, "m": m,
        "max_energy_rel_error": float(np.max(np.abs(demo.energy_rel_error))),
        "energy_drift_slope": demo.drift_slope, "energy_drift_stderr": demo.drift_stderr,
        "stiff_energy_range": [float(demo.stiff_energy.min()), float(demo.stiff_energy.max())],
        "x1_error": {str(k): v for k, v in demo.x1_error.items()},
        "x1_halving_ratio": demo.x1_ratio,
    }
    res.flags = fpu_flags(demo, cfg.H)
    if cfg.svg:
        short = t <= min(cfg.T, 2.0)
        res.plots["fpu_expansions.svg"] = line_plot(
            {f"x{m + i + 1}": (t[short], demo.x[short, m + i]) for i in range(m)},
            title="stiff spring expansions", xlabel="t", ylabel="x")
        mid = t <= min(cfg.T, 50.0)
        res.plots["fpu_midpoint.svg"] = line_plot(
            {"x1": (t[mid], demo.x[mid, 0])}, title="midpoint of first stiff spring",
            xlabel="t", ylabel="x1")
        res.plots["fpu_spring_energies.svg"] = line_plot(
            {f"I{j + 1}": (t, demo.spring_energies[:, j]) for j in range(m)},
            title="stiff spring energies", xlabel="t", ylabel="I_j")
        res.plots["fpu_total_stiff_energy.svg"] = line_plot(
            {"I": (t, demo.stiff_energy)}, title="total stiff energy", xlabel="t", ylabel="I")
    return res


# --- stability scan ---------------------------------------------------------

def run_stability_scan(cfg) -> RunResult:
    pr = build_problem(cfg)
    lo, hi = cfg.H_range
    steps = np.linspace(lo, hi, cfg.samples)
    stochastic = bool(np.any(pr.system.sigma))
    scan = stability_scan(pr.system, pr.initial, cfg.method, steps, cfg.T,
                          cfg.paths if stochastic else 1, cfg.seed)
    res = RunResult()
    res.tables["stability.csv"] = (["H", "stable", "blowup_step"], [
        (H, int(s), "" if w is None else w)
        for H, s, w in zip(scan.steps, scan.stable, scan.blowup_step)])
    res.summary = {"unstable_intervals": scan.unstable_intervals,
                   "n_stable": int(scan.stable.sum()), "n_samples": len(scan.steps)}
    if cfg.svg:
        res.plots["stability.svg"] = line_plot(
            {"stable": (scan.steps, scan.stable.astype(float))}, title="stability",
            xlabel="H", ylabel="stable", markers=True)
    return res


# --- lemma check ------------------------------------------------------------

BRIDGE_BAND = (1.3, 1.8)
SIM_BAND = (1.8, 2.4)


def run_lemma_check(cfg) -> RunResult:
    pr = build_problem(cfg)
    study = bridge_local_error_study(pr.system, pr.initial, cfg.grid, cfg.paths, cfg.seed,
                                     h=cfg.h)
    res = RunResult()
    res.tables["bridge.csv"] = (["H", "rms_original_vs_bridge", "rms_bridge_vs_sim"], [
        (H, a, b) for H, a, b in zip(study.step_grid, study.rms_original_vs_bridge,
                                     study.rms_bridge_vs_sim)])
    res.summary = {
        "h": study.h, "n_paths": study.n_paths,
        "order_original_vs_bridge": study.order_original_vs_bridge.order,
        "order_original_vs_bridge_stderr": study.order_original_vs_bridge.stderr,
        "order_bridge_vs_sim": study.order_bridge_vs_sim.order,
        "order_bridge_vs_sim_stderr": study.order_bridge_vs_sim.stderr,
    }
    res.flags = {
        "original_vs_bridge_in_1p3_1p8": _flag(
            _in_band(study.order_original_vs_bridge.order, BRIDGE_BAND)),
        "bridge_vs_sim_in_1p8_2p4": _flag(_in_band(study.order_bridge_vs_sim.order, SIM_BAND)),
    }
    if cfg.svg:
        H = np.array(study.step_grid)
        res.plots["bridge.svg"] = line_plot(
            {"original - bridge": (H, np.array(study.rms_original_vs_bridge)),
             "bridge - SIM1": (H, np.array(study.rms_bridge_vs_sim))},
            title="one-step errors", xlabel="H", ylabel="RMS energy-norm distance",
            logx=True, logy=True, markers=True)
    return res


RUNNERS = {
    "simulate": run_simulate,
    "converge": run_converge,
    "moments": run_moments,
    "fpu-demo": run_fpu_demo,
    "stability-scan": run_stability_scan,
    "lemma-check": run_lemma_check,
}


def run(cfg) -> RunResult:
    try:
        return RUNNERS[cfg.command](cfg)
    except BlowUp as exc:
        res = RunResult()
        res.summary = {"blowup": {"step": exc.step, "norm": exc.norm}}
        res.flags = {"completed": FAIL}
        return res
