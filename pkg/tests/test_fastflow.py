import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import expm_balanced, random_commuting_system, scalar_expm

from stiffsim.errors import NotSPD, PathMismatch, SimultaneousDiagonalizationFailure
from stiffsim.fastflow import (
    FastFlow,
    KickAggregator,
    ModalForm,
    assemble_propagator,
    coupled_kick_from_increments,
    kick_covariance,
    modal_decompose,
    propagator_integral,
    sample_kick,
    scalar_damped_blocks,
)
from stiffsim.model import StiffSystem, validate_system

# oracle: scipy.linalg.expm of [[0, 1], [-100, -4]] * 0.3
EXPM_W10_C4_S03 = np.array([[-0.5151321167841909, 0.01124905320766943],
                            [-1.1249053207669415, -0.5601283296148687]])
# oracle: expm of [[0, 1], [-100, -20]] * 0.3 (critical damping)
EXPM_W10_C20_S03 = np.array([[0.1991482734714557, 0.01493612051035915],
                             [-1.493612051035917, -0.09957413673572758]])
# oracle: midpoint sum with 1e6 panels, omega=2, c=1, sigma=1, H=0.5
COV_W2_C1_H05 = np.array([[0.02404053366076212, 0.05489501760209971],
                          [0.05489501760209971, 0.24241218804221576]])


def scalar_modal(omega, c, eps=1.0):
    return ModalForm(np.eye(1), np.array([float(omega)]), np.array([float(c)]), eps)


def blocks(omega, c, s):
    return np.array([float(b) for b in scalar_damped_blocks(omega, c, s)]).reshape(2, 2)


# --- scalar blocks -----------------------------------------------------------

def test_blocks_at_zero_are_identity():
    for c in (0.0, 1.0, 20.0, 500.0):
        np.testing.assert_array_equal(blocks(10.0, c, 0.0), np.eye(2))


def test_quarter_period_rotation():
    w = 7.0
    np.testing.assert_allclose(blocks(w, 0.0, np.pi / (2 * w)), [[0, 1 / w], [-w, 0]],
                               atol=1e-15)


def test_underdamped_against_oracle():
    np.testing.assert_allclose(blocks(10.0, 4.0, 0.3), EXPM_W10_C4_S03, rtol=0, atol=1e-10)


def test_critical_branch_continuity():
    at = blocks(10.0, 20.0, 0.3)
    np.testing.assert_allclose(at, EXPM_W10_C20_S03, rtol=0, atol=1e-10)
    for c in (20.0 + 1e-9, 20.0 - 1e-9):
        np.testing.assert_allclose(blocks(10.0, c, 0.3), at, rtol=0, atol=1e-6)
        np.testing.assert_allclose(blocks(10.0, c, 0.3), scalar_expm(10.0, c, 0.3), atol=1e-10)


@pytest.mark.parametrize("omega,c,s", [
    (10.0, 25.0, 0.3), (10.0, 1e3, 0.05), (1e6, 1.0, 0.05), (1e3, 2e3 * (1 + 1e-7), 0.01),
    (3.0, 0.0, 2.0), (0.0, 0.0, 1.5), (0.0, 2.0, 1.5),
])
def test_branches_against_oracle(omega, c, s):
    B = blocks(omega, c, s)
    O = scalar_expm(omega, c, s)
    D = np.diag([1.0, max(omega, 1.0)])
    # compare in the scaled (q, p / omega) frame so that large omega is measured fairly
    np.testing.assert_allclose(np.linalg.solve(D, B @ D), np.linalg.solve(D, O @ D), atol=1e-9)


def test_free_particle_limit():
    np.testing.assert_allclose(blocks(0.0, 0.0, 2.0), [[1, 2], [0, 1]])
    c, s = 0.5, 2.0
    np.testing.assert_allclose(blocks(0.0, c, s),
                               [[1, (1 - np.exp(-c * s)) / c], [0, np.exp(-c * s)]], rtol=1e-14)


omegas = st.floats(1e-2, 1e6)
times = st.floats(0.0, 1.0)


@given(omegas, times)
def test_undamped_closed_form(omega, s):
    b = blocks(omega, 0.0, s)
    ws = omega * s
    expect = [[np.cos(ws), np.sin(ws) / omega], [-omega * np.sin(ws), np.cos(ws)]]
    scale = np.array([[1.0, 1 / omega], [omega, 1.0]])
    np.testing.assert_allclose(b / scale, np.array(expect) / scale, atol=1e-12 * max(1, ws))


@given(omegas, st.floats(0.0, 1e4), times)
def test_norm_bounds(omega, c, s):
    b = blocks(omega, c, s)
    assert abs(b[0, 0]) <= 1 + 1e-12
    assert abs(b[1, 1]) <= 1 + 1e-12
    assert abs(b[0, 1]) <= s + 1e-12


@given(st.floats(1e-2, 1e3), st.floats(0.0, 1e3), times)
def test_liouville_determinant(omega, c, s):
    b = blocks(omega, c, s)
    det = b[0, 0] * b[1, 1] - b[0, 1] * b[1, 0]
    expected = np.exp(-c * s)
    # det of the scaled matrix is the same; roundoff grows with the entries' size
    tol = 1e-9 * expected + 1e-14 * (1 + abs(b[0, 0] * b[1, 1]))
    assert abs(det - expected) <= tol


@given(st.floats(0.1, 100.0), st.floats(0.0, 300.0), times, times)
def test_semigroup(omega, c, s, t):
    D = np.diag([1.0, omega])
    a = np.linalg.solve(D, blocks(omega, c, s) @ blocks(omega, c, t) @ D)
    b = np.linalg.solve(D, blocks(omega, c, s + t) @ D)
    np.testing.assert_allclose(a, b, atol=1e-9)


@given(st.floats(1e-2, 1e5), st.floats(0.0, 1e3), times, st.floats(-1, 1), st.floats(-1, 1))
def test_energy_contraction(omega, c, s, q, p):
    b = blocks(omega, c, s)
    q1, p1 = b @ np.array([q, p])
    before = np.hypot(q, p / omega)
    after = np.hypot(q1, p1 / omega)
    assert after <= (1 + 1e-12) * before + 1e-300


# --- modal decomposition ------------------------------------------------------

def test_diagonal_modal_form():
    eps = 1e-4
    m = modal_decompose(validate_system(StiffSystem(K=np.diag([1.0, 4.0]), eps=eps, c=0.1)))
    np.testing.assert_array_equal(m.U, np.eye(2))
    np.testing.assert_allclose(m.omega, [eps ** -0.5, 2 * eps ** -0.5])
    np.testing.assert_allclose(m.zeta, 0.1 / (2 * m.omega))


def test_repeated_eigenvalue_resolved_by_damping():
    rng = np.random.default_rng(5)
    U, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    K = U @ np.diag([2.0, 2.0, 5.0]) @ U.T
    c = U @ np.diag([0.3, 1.7, 0.2]) @ U.T
    m = modal_decompose(validate_system(StiffSystem(K=K, eps=1.0, c=c)))
    np.testing.assert_allclose(m.U.T @ m.U, np.eye(3), atol=1e-12)
    for A in (m.U.T @ K @ m.U, m.U.T @ c @ m.U):
        assert np.linalg.norm(A - np.diag(np.diag(A))) < 1e-10 * np.linalg.norm(A)


def test_zero_frequency_needs_free_mode_flag():
    K = np.diag([0.0, 0.0, 1.0])
    with pytest.raises(NotSPD):
        modal_decompose(StiffSystem(K=K, eps=1e-4))
    m = modal_decompose(StiffSystem(K=K, eps=1e-4, allow_free_modes=True))
    np.testing.assert_array_equal(m.free, [True, True, False])


def test_simultaneous_diagonalization_failure():
    sys = StiffSystem(K=np.diag([1.0, 4.0]), eps=1.0, c=np.array([[1.0, 0.5], [0.5, 1.0]]))
    with pytest.raises(SimultaneousDiagonalizationFailure):
        modal_decompose(sys)


# --- assembled propagator ---------------------------------------------------------

def test_assembled_identity_and_diagonal():
    sys = validate_system(StiffSystem(K=np.diag([1.0, 9.0]), eps=0.01, c=np.diag([0.5, 2.0])))
    m = modal_decompose(sys)
    np.testing.assert_array_equal(assemble_propagator(m, 0.0).matrix, np.eye(4))
    P = assemble_propagator(m, 0.2)
    for k, B in enumerate((P.B11, P.B12, P.B21, P.B22)):
        assert np.count_nonzero(B - np.diag(np.diag(B))) == 0
        for i in range(2):
            b = scalar_damped_blocks(m.omega[i], m.damp[i], 0.2)[k]
            assert B[i, i] == b


def test_assembled_matches_matrix_exponential():
    rng = np.random.default_rng(17)
    for _ in range(10):
        d = int(rng.integers(2, 6))
        K, c, *_ = random_commuting_system(rng, d, omega_max=1e3)
        sys = validate_system(StiffSystem(K=K, eps=1.0, c=c))
        B = assemble_propagator(modal_decompose(sys), 0.05).matrix
        _, scaled, D, Di = expm_balanced(K, c, 1.0, 0.05)
        assert np.linalg.norm(Di @ B @ D - scaled, 2) <= 1e-9


def test_propagator_integral_of_free_particle():
    m = scalar_modal(0.0, 0.0)
    I = propagator_integral(m, 0.7)
    np.testing.assert_allclose([I.B11[0, 0], I.B12[0, 0], I.B21[0, 0], I.B22[0, 0]],
                               [0.7, 0.7 ** 2 / 2, 0.0, 0.7], rtol=1e-13)


def test_propagator_integral_undamped():
    w, H = 30.0, 0.4
    I = propagator_integral(scalar_modal(w, 0.0), H)
    assert I.B11[0, 0] == pytest.approx(np.sin(w * H) / w, abs=1e-13)
    assert I.B12[0, 0] == pytest.approx((1 - np.cos(w * H)) / w ** 2, abs=1e-13)


# --- kick covariance -------------------------------------------------------------

def test_zero_noise_zero_covariance():
    cov = kick_covariance(scalar_modal(5.0, 1.0), np.zeros((1, 1)), 0.3)
    np.testing.assert_array_equal(cov.Sigma2, 0.0)
    q, p = sample_kick(cov, np.random.default_rng(0))
    assert np.all(q == 0) and np.all(p == 0)


def test_position_variance_bound_stiff_mode():
    H = 0.01
    cov = kick_covariance(scalar_modal(100.0, 0.0), np.ones((1, 1)), H)
    assert cov.Sigma2[0, 0] <= H ** 3 / 3


def test_covariance_against_riemann_oracle():
    cov = kick_covariance(scalar_modal(2.0, 1.0), np.ones((1, 1)), 0.5)
    np.testing.assert_allclose(cov.Sigma2, COV_W2_C1_H05, rtol=0, atol=1e-9)
    np.testing.assert_allclose(cov.factor @ cov.factor.T, cov.Sigma2, atol=1e-15)


@given(st.floats(0.0, 1e4), st.floats(0.0, 50.0), st.floats(1e-3, 1.0), st.floats(0.1, 3.0))
def test_covariance_structure(omega, c, H, sigma):
    cov = kick_covariance(scalar_modal(omega, c), np.array([[sigma]]), H)
    S = cov.Sigma2
    np.testing.assert_array_equal(S, S.T)
    tr = np.trace(S)
    assert np.linalg.eigvalsh(S).min() >= -1e-12 * tr
    assert S[0, 0] <= sigma ** 2 * H ** 3 / 3 * (1 + 1e-9)


def test_multimode_trace_bound():
    rng = np.random.default_rng(3)
    K, c, *_ = random_commuting_system(rng, 4, omega_max=1e3)
    sigma = rng.standard_normal((4, 4))
    sys = validate_system(StiffSystem(K=K, eps=1.0, c=c, sigma=sigma))
    H = 0.05
    cov = kick_covariance(modal_decompose(sys), sys.sigma, H)
    S11 = cov.blocks[0]
    assert np.trace(S11) <= np.linalg.norm(sigma, 2) ** 2 * H ** 3 / 3 * 4


def test_sample_kick_statistics_and_determinism():
    cov = kick_covariance(scalar_modal(2.0, 1.0), np.ones((1, 1)), 0.5)
    n = 100_000
    q, p = sample_kick(cov, np.random.default_rng(99), size=(n,))
    X = np.stack([q[:, 0], p[:, 0]])
    emp = X @ X.T / n
    prods = np.stack([X[0] ** 2, X[0] * X[1], X[1] ** 2])
    se = prods.std(axis=1) / np.sqrt(n)
    S = cov.Sigma2
    assert abs(emp[0, 0] - S[0, 0]) <= 5 * se[0]
    assert abs(emp[0, 1] - S[0, 1]) <= 5 * se[1]
    assert abs(emp[1, 1] - S[1, 1]) <= 5 * se[2]
    q2, p2 = sample_kick(cov, np.random.default_rng(99), size=(n,))
    assert np.array_equal(q, q2) and np.array_equal(p, p2)


# --- coupled kicks -----------------------------------------------------------------

def test_single_increment_tiny_step():
    m = scalar_modal(10.0, 1.0)
    H, dW = 1e-6, 1e-3
    q, p = coupled_kick_from_increments(m, np.array([[2.0]]), H, [(H, np.array([dW]))])
    assert q[0] == pytest.approx(0.0, abs=10 * H * abs(dW) * 2)
    assert p[0] == pytest.approx(2 * dW, rel=1e-4)


def test_coupled_kick_zero_noise_and_mismatch():
    m = scalar_modal(3.0, 0.0)
    q, p = coupled_kick_from_increments(m, np.zeros((1, 1)), 0.2,
                                        [(0.1, np.array([0.3])), (0.1, np.array([-0.2]))])
    assert q[0] == 0 and p[0] == 0
    with pytest.raises(PathMismatch):
        coupled_kick_from_increments(m, np.ones((1, 1)), 0.3, [(0.1, np.array([0.3]))])


def test_aggregator_matches_list_form():
    rng = np.random.default_rng(8)
    K, c, *_ = random_commuting_system(rng, 3, omega_max=50)
    sigma = rng.standard_normal((3, 2))
    sys = validate_system(StiffSystem(K=K, eps=1.0, c=c, sigma=sigma))
    m = modal_decompose(sys)
    H, h = 0.2, 0.02
    dW = np.sqrt(h) * rng.standard_normal((10, 2))
    q1, p1 = KickAggregator(m, sigma, H, h)(dW)
    q2, p2 = coupled_kick_from_increments(m, sigma, H, [(h, w) for w in dW])
    np.testing.assert_allclose(q1, q2, atol=1e-14)
    np.testing.assert_allclose(p1, p2, atol=1e-14)


def test_coupled_kick_covariance_converges_first_order():
    # the coupled kick is Gaussian with covariance equal to a left Riemann sum
    # of the exact covariance integrand, so its distance to Sigma^2 is first order in h
    m = scalar_modal(2.0, 1.0)
    H = 0.5
    exact = COV_W2_C1_H05
    hs, errs = [], []
    for k in range(4, 11):
        n = 2 ** k
        agg = KickAggregator(m, np.ones((1, 1)), H, H / n)
        W = np.stack([agg.Wq[:, 0, 0], agg.Wp[:, 0, 0]])
        approx = (H / n) * W @ W.T
        hs.append(H / n)
        errs.append(np.linalg.norm(approx - exact))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 0.9 <= slope <= 1.1


def test_fast_flow_caches():
    sys = validate_system(StiffSystem(K=np.eye(2), eps=0.01, c=0.2, sigma=0.5))
    f = FastFlow(sys)
    assert f.propagator(0.1) is f.propagator(0.1)
    assert f.covariance(0.1) is f.covariance(0.1)
    assert f.aggregator(0.1, 0.01) is f.aggregator(0.1, 0.01)
