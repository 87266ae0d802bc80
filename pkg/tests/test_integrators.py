import numpy as np
import pytest
from scipy.linalg import expm

from stiffsim.errors import BlowUp, UnsupportedStochastic
from stiffsim.fastflow import FastFlow, kick_from_normals
from stiffsim.integrators import (
    SIM4_GAMMA,
    Method,
    NoiseMode,
    OUStep,
    StepPlan,
    Stepper,
    integrate,
    step_fine_reference,
    step_gla1,
    step_sim1_dual,
    step_sim1_hamiltonian,
    step_sim1_langevin,
    step_sim2_langevin,
    step_sim4_deterministic,
)
from stiffsim.model import State, StiffSystem, validate_system
from stiffsim.noise import NoiseFeed, make_path_streams
from stiffsim.problems import FPUConfig, TwoSpringConfig, build_fpu, build_two_spring, resonant_step


def linear_system(omega=10.0, c=0.0, sigma=0.0, force=None, d=1):
    kw = {} if force is None else {"force": force}
    return validate_system(StiffSystem(K=np.eye(d), eps=omega ** -2, c=c, sigma=sigma, **kw))


def test_plan_substeps_consistent():
    for m in Method:
        plan = StepPlan(m, 0.1, NoiseMode.NONE)
        for kind in ("fast", "slow"):
            total = sum(t for k, t in plan.substeps if k == kind)
            assert total == pytest.approx(0.1 if plan.substeps else 0.0, abs=1e-15)
    assert SIM4_GAMMA == pytest.approx(1 / (2 - 2 ** (1 / 3)))
    with pytest.raises(ValueError):
        StepPlan("sim2-lan", 0.1, substeps=(("fast", 0.1), ("slow", 0.05)))
    with pytest.raises(ValueError):
        StepPlan("sim1-lan", 0.1, NoiseMode.COUPLED)
    with pytest.raises(ValueError):
        StepPlan("sim1-lan", 0.1, NoiseMode.COUPLED, h=0.03)


def test_free_harmonic_flow_conserves_energy():
    sys = linear_system(omega=50.0)
    prop = FastFlow(sys).propagator(0.1)
    s = State(np.array([0.02]), np.array([0.7]))
    for _ in range(50):
        e0 = 0.5 * s.p[0] ** 2 + 0.5 * 2500 * s.q[0] ** 2
        s = step_sim1_hamiltonian(s, 0.1, prop, sys.force)
        e1 = 0.5 * s.p[0] ** 2 + 0.5 * 2500 * s.q[0] ** 2
        assert e1 == pytest.approx(e0, rel=1e-12)


def test_constant_force_impulse():
    g = np.array([0.3])
    sys = linear_system(omega=5.0, force=lambda q: np.broadcast_to(g, q.shape))
    prop = FastFlow(sys).propagator(0.2)
    q, p = np.array([0.1]), np.array([-0.4])
    s = step_sim1_hamiltonian(State(q, p), 0.2, prop, sys.force)
    assert s.p[0] == pytest.approx(prop.B21[0, 0] * q[0] + prop.B22[0, 0] * p[0] + 0.2 * g[0],
                                   rel=1e-15)
    assert s.q[0] == pytest.approx(prop.B11[0, 0] * q[0] + prop.B12[0, 0] * p[0], rel=1e-15)


def test_fpu_one_step_against_fine_reference():
    pr = build_fpu(FPUConfig())
    sys, s0, H = pr.system, pr.initial, 0.1
    one = step_sim1_hamiltonian(s0, H, FastFlow(sys).propagator(H), sys.force)
    h = 1e-6
    ref = integrate(sys, StepPlan("fine-se", h, NoiseMode.NONE), s0, H).final
    assert np.max(np.abs(one.q - ref.q)) <= H ** 2


def test_langevin_degenerates_bitwise():
    pr = build_fpu(FPUConfig())
    prop = FastFlow(pr.system).propagator(0.1)
    rng = np.random.default_rng(4)
    for _ in range(5):
        s = State(rng.standard_normal(6), rng.standard_normal(6))
        a = step_sim1_hamiltonian(s, 0.1, prop, pr.system.force)
        b = step_sim1_langevin(s, 0.1, prop, pr.system.force)
        assert np.array_equal(a.q, b.q) and np.array_equal(a.p, b.p)


def test_linear_langevin_step_distribution():
    sys = linear_system(omega=3.0, c=0.8, sigma=0.6)
    flow = FastFlow(sys)
    H, n = 0.4, 100_000
    prop, cov = flow.propagator(H), flow.covariance(H)
    x0 = State(np.full((n, 1), 0.3), np.full((n, 1), -0.2))
    kick = kick_from_normals(cov, np.random.default_rng(6).standard_normal((n, 2)))
    out = step_sim1_langevin(x0, H, prop, sys.force, kick)
    X = np.concatenate([out.q, out.p], axis=1)
    mean = prop.matrix @ np.array([0.3, -0.2])
    se = X.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(X.mean(axis=0) - mean) <= 5 * se)
    C = X - mean
    emp = C.T @ C / n
    for i, j in ((0, 0), (0, 1), (1, 1)):
        prod = C[:, i] * C[:, j]
        assert abs(emp[i, j] - cov.Sigma2[i, j]) <= 5 * prod.std() / np.sqrt(n)


def test_langevin_step_reproducible():
    pr = build_two_spring(TwoSpringConfig())
    plan = StepPlan("sim1-lan", 0.1)
    a = integrate(pr.system, plan, pr.initial, 0.1, noise=np.random.default_rng(12)).final
    b = integrate(pr.system, plan, pr.initial, 0.1, noise=np.random.default_rng(12)).final
    assert np.array_equal(a.x, b.x)


def test_strang_equals_sim1_without_force():
    sys = linear_system(omega=8.0, c=0.5, sigma=1.0)
    flow = FastFlow(sys)
    prop, cov = flow.propagator(0.2), flow.covariance(0.2)
    kick = kick_from_normals(cov, np.random.default_rng(1).standard_normal(2))
    s = State(np.array([0.1]), np.array([0.5]))
    a = step_sim1_langevin(s, 0.2, prop, sys.force, kick)
    b = step_sim2_langevin(s, 0.2, prop, sys.force, kick)
    assert np.array_equal(a.x, b.x)


def test_strang_local_error_third_order():
    # quadratic slow potential a q^2 / 2: the exact flow is a matrix exponential
    a, omega = 3.0, 10.0
    sys = linear_system(omega=omega, force=lambda q: -a * q)
    A = np.array([[0.0, 1.0], [-(omega ** 2 + a), 0.0]])
    x0 = np.array([0.05, 0.8])
    flow = FastFlow(sys)
    Hs = [0.04, 0.02, 0.01, 0.005]
    errs = []
    for H in Hs:
        s = step_sim2_langevin(State(x0[:1], x0[1:]), H, flow.propagator(H), sys.force)
        errs.append(np.linalg.norm(s.x - expm(A * H) @ x0))
    slope = np.polyfit(np.log(Hs), np.log(errs), 1)[0]
    assert 2.7 <= slope <= 3.3


def test_strang_time_reversible():
    pr = build_fpu(FPUConfig())
    flow = FastFlow(pr.system)
    H = 0.1
    s0 = State(np.array([0.4, -0.2, 0.1, 0.003, -0.001, 0.002]), np.array([0.1, 0.2, -0.3, 0.5, 0.1, -0.2]))
    s1 = step_sim2_langevin(s0, H, flow.propagator(H), pr.system.force)
    s2 = step_sim2_langevin(s1, -H, flow.propagator(-H), pr.system.force)
    np.testing.assert_allclose(s2.x, s0.x, atol=1e-10)


def test_sim1_dual_is_adjoint():
    pr = build_fpu(FPUConfig())
    flow = FastFlow(pr.system)
    H = 0.1
    rng = np.random.default_rng(2)
    for _ in range(5):
        s0 = State(rng.standard_normal(6) * 0.5, rng.standard_normal(6) * 0.5)
        back = step_sim1_hamiltonian(s0, -H, flow.propagator(-H), pr.system.force)
        again = step_sim1_dual(back, H, flow.propagator(H), pr.system.force)
        np.testing.assert_allclose(again.x, s0.x, atol=1e-10)


def test_sim4_exact_without_force():
    sys = linear_system(omega=20.0)
    flow = FastFlow(sys)
    s0 = State(np.array([0.1]), np.array([0.4]))
    s1 = step_sim4_deterministic(s0, 0.3, flow, sys.force)
    np.testing.assert_allclose(s1.x, flow.propagator(0.3).matrix @ s0.x, atol=1e-13)


def test_sim4_rejects_noise():
    sys = linear_system(omega=20.0, c=0.1, sigma=0.3)
    with pytest.raises(UnsupportedStochastic):
        step_sim4_deterministic(State([0.0], [0.0]), 0.1, FastFlow(sys), sys.force)
    with pytest.raises(UnsupportedStochastic):
        Stepper(sys, StepPlan("sim4-det", 0.1), noise=np.random.default_rng(0))
    with pytest.raises(UnsupportedStochastic):
        Stepper(sys, StepPlan("sim1-ham", 0.1), noise=np.random.default_rng(0))


def test_gla_without_noise_is_symplectic_euler():
    pr = build_fpu(FPUConfig())
    ou = OUStep.build(pr.system, 1e-3)
    s = pr.initial
    a = step_gla1(s, 1e-3, pr.system, ou)
    b = step_fine_reference(s, 1e-3, pr.system)
    np.testing.assert_array_equal(a.x, b.x)


def test_gla_invariant_variance():
    omega, c, beta = 2.0, 1.0, 2.0
    sys = linear_system(omega=omega, c=c, sigma=np.sqrt(2 * c / beta))
    n = 4000
    init = State(np.zeros((n, 1)), np.zeros((n, 1)))
    feed = NoiseFeed(make_path_streams(8, n), 1)
    out = integrate(sys, StepPlan("gla1", 0.01), init, 20.0, noise=feed).final
    var = out.q[:, 0].var()
    se = np.sqrt(np.var(out.q[:, 0] ** 2) / n)
    assert abs(var - 1 / (beta * omega ** 2)) <= 5 * se


def test_fine_reference_orders():
    sys = linear_system(omega=10.0, force=lambda q: -q)
    A = np.array([[0.0, 1.0], [-101.0, 0.0]])
    x0 = np.array([0.1, 0.5])
    local = []
    for h in (1e-3, 5e-4):
        s = step_fine_reference(State(x0[:1], x0[1:]), h, sys)
        local.append(np.linalg.norm(s.x - expm(A * h) @ x0))
    assert 3.0 <= local[0] / local[1] <= 5.0
    finals = []
    for h in (1e-3, 5e-4, 2.5e-4):
        finals.append(integrate(sys, StepPlan("fine-se", h, NoiseMode.NONE),
                                State(x0[:1], x0[1:]), 1.0).final.x)
    ratio = np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2])
    assert 1.6 <= ratio <= 2.4


class CountingFeed:
    def __init__(self, feed):
        self.feed, self.rows = feed, 0

    def normals(self, n):
        self.rows += n
        return self.feed.normals(n)


def test_coupled_mode_consumes_fine_grid():
    pr = build_two_spring(TwoSpringConfig())
    H, h, T = 0.1, 0.001, 1.0
    feed = CountingFeed(NoiseFeed(make_path_streams(0, 3), pr.system.noise_dim))
    init = State(np.tile(pr.initial.q, (3, 1)), np.tile(pr.initial.p, (3, 1)))
    integrate(pr.system, StepPlan("sim1-lan", H, NoiseMode.COUPLED, h=h), init, T, noise=feed)
    assert feed.rows == round(T / h)


def test_driver_basics():
    pr = build_two_spring(TwoSpringConfig())
    res = integrate(pr.system, StepPlan("sim1-lan", 0.1), pr.initial, 0.0,
                    noise=np.random.default_rng(0))
    assert res.n_steps == 0 and np.array_equal(res.final.x, pr.initial.x)
    H = resonant_step(0.1, 100.0, "full")
    res = integrate(pr.system, StepPlan("sim1-lan", H), pr.initial, 5.0,
                    noise=np.random.default_rng(0))
    assert res.n_steps == round(5.0 / H) and res.final.is_finite()
    assert res.T == pytest.approx(res.n_steps * H)


def test_blowup_detected():
    sys = linear_system(omega=100.0)
    with pytest.raises(BlowUp) as info:
        integrate(sys, StepPlan("fine-em", 0.05, NoiseMode.NONE), State([1.0], [0.0]), 100.0)
    assert info.value.step > 0


def test_non_unit_mass_matches_frequency():
    # M = 4, K = 1, eps = 1e-2: omega^2 = K / (M eps) = 25
    sys = StiffSystem(K=[[1.0]], eps=1e-2, M=[[4.0]])
    s = integrate(sys, StepPlan("sim1-ham", 0.1, NoiseMode.NONE), State([0.2], [0.0]), 0.3).final
    assert s.q[0] == pytest.approx(0.2 * np.cos(5 * 0.3), abs=1e-12)
    # p = M dq/dt
    assert s.p[0] == pytest.approx(-4 * 0.2 * 5 * np.sin(5 * 0.3), abs=1e-12)
