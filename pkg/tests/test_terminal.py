import math

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are, solve_discrete_lyapunov

from ddsmpc import data, pce, terminal
from .test_data import REACTOR_A, REACTOR_B

# closed forms for the scalar example a=2, b=1, q=r=1
P_SCALAR = 2.0 + math.sqrt(5.0)           # 4.2360679...
K_SCALAR = -2.0 * P_SCALAR / (1.0 + P_SCALAR)  # -1.6180339...
ACL_SCALAR = 2.0 + K_SCALAR               # 0.3819660...
GAMMA_SCALAR = 0.01 / (1.0 - ACL_SCALAR**2)    # 0.0117082...


def scalar_measured_record(T=100, seed=3):
    """Prestabilized scalar data with measured disturbances: synthesis on it is
    noiseless-equivalent because M = X+ - W = A X + B U exactly."""
    plant = data.Plant([[2.0]], [[1.0]], pce.gaussian_disturbance([[0.01]]))
    rng = np.random.default_rng(seed)
    x = np.zeros((T + 1, 1))
    u = np.zeros((T, 1))
    x[0, 0] = rng.uniform(0, 2)
    w = plant.disturbance.germ_to_w(plant.disturbance.sample_germs(rng, T))
    for k in range(T):
        u[k, 0] = -1.5 * x[k, 0] + rng.uniform(-1, 1)
        x[k + 1] = 2.0 * x[k] + u[k] + w[k]
    return data.DataRecord(x, u, w)


def test_dare_scalar_closed_form():
    P, K = terminal.dare([[2.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(P_SCALAR, abs=1e-10)
    assert K[0, 0] == pytest.approx(K_SCALAR, abs=1e-10)


def test_dare_degenerate_no_input():
    A = np.array([[0.8, 0.1], [0.0, 0.5]])
    P, K = terminal.dare(A, np.zeros((2, 1)), np.eye(2), [[1.0]])
    np.testing.assert_allclose(K, 0.0, atol=1e-12)
    np.testing.assert_allclose(P, A.T @ P @ A + np.eye(2), atol=1e-9)


def test_dare_fixed_point_residual():
    rng = np.random.default_rng(0)
    for _ in range(5):
        A = rng.standard_normal((3, 3)) * 0.8
        B = rng.standard_normal((3, 2))
        Q = np.eye(3)
        R = np.eye(2)
        P, K = terminal.dare(A, B, Q, R)
        res = A.T @ P @ A - P - (A.T @ P @ B) @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A) + Q
        assert np.max(np.abs(res)) <= 1e-8
        np.testing.assert_allclose(P, solve_discrete_are(A, B, Q, R), rtol=1e-8, atol=1e-9)


def test_solve_P_and_Gamma_scalar():
    K = np.array([[K_SCALAR]])
    H = np.array([[1.0]])
    M = np.array([[ACL_SCALAR]])
    P = terminal.solve_P(K, H, M, [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(P_SCALAR, abs=1e-9)
    G = terminal.solve_Gamma([[ACL_SCALAR]], [[0.01]])
    assert G[0, 0] == pytest.approx(GAMMA_SCALAR, abs=1e-9)
    assert G[0, 0] == pytest.approx(0.0117, abs=5e-4)


def test_lyapunov_solutions_match_scipy():
    rng = np.random.default_rng(1)
    for _ in range(10):
        A = rng.standard_normal((4, 4))
        A *= 0.9 / max(np.abs(np.linalg.eigvals(A)))
        Qs = rng.standard_normal((4, 4))
        Qs = Qs @ Qs.T
        G = terminal.solve_Gamma(A, Qs)
        np.testing.assert_allclose(A @ G @ A.T - G + Qs, 0.0, atol=1e-8)
        np.testing.assert_allclose(G, solve_discrete_lyapunov(A, Qs), atol=1e-8)
        assert np.min(np.linalg.eigvalsh(G)) > 0


def test_solve_gamma_zero_noise_and_instability():
    np.testing.assert_allclose(terminal.solve_Gamma([[0.5]], [[0.0]]), 0.0, atol=1e-14)
    with pytest.raises(terminal.SynthesisError):
        terminal.solve_Gamma([[1.2]], [[0.1]])


def test_solve_P_trivial():
    P = terminal.solve_P(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2), [[1.0]])
    np.testing.assert_allclose(P, np.eye(2), atol=1e-12)


def test_synthesize_scalar_matches_lqr():
    record = scalar_measured_record()
    K, H = terminal.synthesize_K_H(record, [[1.0]], [[1.0]])
    assert K[0, 0] == pytest.approx(K_SCALAR, abs=5e-3)

    td = data.TransitionData.from_records(record)
    # defining identity [X; U] H = [I; K]
    XU = np.vstack([td.X, td.U])
    np.testing.assert_allclose(XU @ H, np.vstack([np.eye(1), K]), atol=1e-7)

    P = terminal.solve_P(K, H, td.M, [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(P_SCALAR, abs=5e-3)
    G = terminal.solve_Gamma(td.M @ H, [[0.01]])
    assert G[0, 0] == pytest.approx(GAMMA_SCALAR, abs=5e-4)


def reactor_records(seed=0, n_batches=10, batch=20, sigma2=1e-4):
    plant = data.Plant(REACTOR_A, REACTOR_B, pce.gaussian_disturbance(sigma2 * np.eye(4)))
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_batches):
        u = rng.uniform(-1, 1, (batch, 2))
        x, w = data.simulate(plant, u, rng.uniform(-1, 1, 4), rng=rng)
        records.append(data.DataRecord(x, u, w))
    return records


def test_synthesize_reactor_stabilizes():
    records = reactor_records()
    td = data.TransitionData.from_records(records)
    K, H = terminal.synthesize_K_H(td, np.eye(4), np.eye(2))
    MH = td.M @ H
    assert np.max(np.abs(np.linalg.eigvals(MH))) < 1.0
    np.testing.assert_allclose(
        np.vstack([td.X, td.U]) @ H, np.vstack([np.eye(4), K]), atol=1e-7
    )
    # MH is the data-driven stand-in for A + B K
    np.testing.assert_allclose(MH, REACTOR_A + REACTOR_B @ K, atol=1e-7)


def test_data_driven_matches_model_based():
    record = scalar_measured_record(seed=8)
    ing_d = terminal.data_driven_ingredients(record, [[1.0]], [[1.0]], [[0.01]])
    ing_m = terminal.model_based_ingredients([[2.0]], [[1.0]], [[1.0]], [[1.0]], [[0.01]])
    rel = abs(ing_d.P[0, 0] - ing_m.P[0, 0]) / abs(ing_m.P[0, 0])
    assert rel <= 1e-2
    assert abs(ing_d.Gamma[0, 0] - ing_m.Gamma[0, 0]) <= 5e-4

    # implicit-model consistency: MH equals A_hat + B_hat K to tight tolerance
    A_hat, B_hat = data.identify_model(record.x_traj, record.u_traj)
    w_hat = data.estimate_disturbances(record.x_traj, record.u_traj)
    est = data.DataRecord(record.x_traj, record.u_traj, w_hat, flag="estimated")
    ing_e = terminal.data_driven_ingredients(est, [[1.0]], [[1.0]], [[0.01]])
    np.testing.assert_allclose(ing_e.closed_loop, A_hat + B_hat @ ing_e.K, atol=1e-7)


def scalar_ingredients(gamma=1.0):
    return terminal.TerminalIngredients(
        K=np.array([[K_SCALAR]]), H=np.array([[1.0]]), P=np.array([[P_SCALAR]]),
        Gamma=np.array([[GAMMA_SCALAR]]), gamma_level=gamma,
        M=np.array([[ACL_SCALAR]]), sigma_bar=np.array([[0.01]]),
    )


def test_check_terminal_assumption_scalar():
    X_box = terminal.Box.symmetric(2.0, 1)
    U_box = terminal.Box.symmetric(3.0, 1)
    ing = terminal.select_gamma(scalar_ingredients(), X_box, U_box, 1.645, 1.645)
    report = terminal.check_terminal_assumption(ing, X_box, U_box, 1.645, 1.645)
    assert report.passed
    # closed-form coordinate extremum of the ellipsoid
    ell = math.sqrt(2 * ing.gamma_level / P_SCALAR)
    assert report.state_margins[0] == pytest.approx(
        2.0 - ell - 1.645 * math.sqrt(GAMMA_SCALAR), abs=1e-12
    )

    # gigantic level with tight boxes fails the coverage condition
    big = scalar_ingredients(gamma=1e9)
    report = terminal.check_terminal_assumption(big, X_box, U_box, 1.645, 1.645)
    assert not report.passed and not report.state_chance_ok

    # contrived unstable loop fails invariance
    bad = terminal.TerminalIngredients(
        K=np.array([[0.0]]), H=np.array([[1.0]]), P=np.array([[1.0]]),
        Gamma=np.array([[0.01]]), gamma_level=0.1, M=np.array([[1.5]]),
        sigma_bar=np.array([[0.01]]),
    )
    report = terminal.check_terminal_assumption(bad, X_box, U_box, 1.645, 1.645)
    assert not report.invariance_ok


def test_alpha_and_json_roundtrip(tmp_path):
    ing = scalar_ingredients(gamma=0.5)
    assert ing.alpha == pytest.approx(0.5 * 0.01 * P_SCALAR)
    ing.to_json(tmp_path / "ing.json")
    back = terminal.TerminalIngredients.from_json(tmp_path / "ing.json")
    np.testing.assert_allclose(back.P, ing.P)
    np.testing.assert_allclose(back.K, ing.K)
    np.testing.assert_allclose(back.Gamma, ing.Gamma)
    assert back.gamma_level == ing.gamma_level
