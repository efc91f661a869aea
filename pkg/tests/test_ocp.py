import numpy as np
import pytest

from ddsmpc import data, ocp, pce, terminal


# ---------------------------------------------------------------------------
# fixtures: scalar Case-1 style setup with measured disturbances
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scalar_setup():
    rng = np.random.default_rng(3)
    plant = data.Plant([[2.0]], [[1.0]], pce.gaussian_disturbance([[0.01]]))
    T = 100
    x = np.zeros((T + 1, 1))
    u = np.zeros((T, 1))
    x[0, 0] = 1.0
    w = plant.disturbance.germ_to_w(plant.disturbance.sample_germs(rng, T))
    for k in range(T):
        u[k, 0] = -1.5 * x[k, 0] + rng.uniform(-1, 1)
        x[k + 1] = 2.0 * x[k] + u[k] + w[k]
    record = data.DataRecord(x, u, w)
    stack = data.build_stack(record, 25)
    X_box = terminal.Box.symmetric(2.0, 1)
    U_box = terminal.Box.symmetric(3.0, 1)
    ing = terminal.data_driven_ingredients(
        record, [[1.0]], [[1.0]], [[0.01]],
        X_box=X_box, U_box=U_box, sigma_x=1.645, sigma_u=1.645,
    )
    basis = pce.make_basis(1, 2, 25)
    return plant, record, stack, ing, basis, X_box, U_box


def make_engine(scalar_setup, *, use_model=False, shortcut=True, **over):
    plant, record, stack, ing, basis, X_box, U_box = scalar_setup
    kw = dict(
        w_model=plant.disturbance, N=25, Q=[[1.0]], R=[[1.0]], P=ing.P,
        sigma_x=1.645, sigma_u=1.645, X_box=X_box, U_box=U_box,
        Gamma=ing.Gamma, gamma_level=ing.gamma_level,
    )
    if shortcut:
        kw.update(feedback=ing.K, closed_loop=ing.closed_loop)
    if use_model:
        kw["model"] = ([[2.0]], [[1.0]])
    else:
        kw["stack"] = stack
    kw.update(over)
    return ocp.OcpEngine(**kw)


def deterministic_init(basis, value, n_x=1):
    init = np.zeros((n_x, basis.L))
    init[:, 0] = value
    return init


# ---------------------------------------------------------------------------
# chance_sigma
# ---------------------------------------------------------------------------

def test_chance_sigma_values():
    assert ocp.chance_sigma("gaussian", 0.1) == pytest.approx(1.645, abs=5e-4)
    assert ocp.chance_sigma("distribution_free", 0.1) == pytest.approx(4.359, abs=5e-4)
    assert ocp.chance_sigma("distribution_free", 1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ocp.chance_sigma("gaussian", 0.0)
    with pytest.raises(ValueError):
        ocp.chance_sigma("gaussian", 1.5)
    with pytest.raises(ValueError):
        ocp.chance_sigma("cauchy", 0.1)


# ---------------------------------------------------------------------------
# evaluate_cost
# ---------------------------------------------------------------------------

def test_evaluate_cost_zero_and_deterministic():
    basis = pce.make_basis(1, 2, 3)
    zeros_x = [np.zeros((1, basis.L))] * 4
    zeros_u = [np.zeros((1, basis.L))] * 3
    assert ocp.evaluate_cost(zeros_x, zeros_u, basis, [[1.0]], [[1.0]], [[2.0]]) == 0.0

    # deterministic trajectory: only column 0 populated
    xs = [deterministic_init(basis, v) for v in (1.0, 0.5, 0.25, 0.125)]
    us = [deterministic_init(basis, v) for v in (-0.5, -0.25, -0.125)]
    expected = 0.5 * sum(v**2 for v in (1.0, 0.5, 0.25)) + 0.5 * sum(v**2 for v in (-0.5, -0.25, -0.125))
    expected += 0.5 * 2.0 * 0.125**2
    got = ocp.evaluate_cost(xs, us, basis, [[1.0]], [[1.0]], [[2.0]])
    assert got == pytest.approx(expected, abs=1e-14)


def test_evaluate_cost_matches_monte_carlo():
    """The coefficient-space objective equals the sampled expectation of the
    quadratic stage costs."""
    rng = np.random.default_rng(8)
    N = 3
    basis = pce.make_basis(1, 2, N)
    w_model = pce.gaussian_disturbance([[0.04]])
    xs = [rng.standard_normal((1, basis.L)) * 0.3 for _ in range(N + 1)]
    us = [rng.standard_normal((1, basis.L)) * 0.3 for _ in range(N)]
    total = ocp.evaluate_cost(xs, us, basis, [[1.0]], [[1.0]], [[2.0]])

    M = 100_000
    germs = w_model.sample_germs(rng, M * N).reshape(M, N)
    acc = np.zeros(M)
    for i in range(N):
        phi = np.hstack([np.ones((M, 1)), germs[:, :N]])  # basis values per sample
        xv = phi @ xs[i].T
        uv = phi @ us[i].T
        acc += 0.5 * (xv[:, 0] ** 2 + uv[:, 0] ** 2)
    phi = np.hstack([np.ones((M, 1)), germs])
    xN = phi @ xs[N].T
    acc += 0.5 * 2.0 * xN[:, 0] ** 2
    assert total == pytest.approx(np.mean(acc), rel=1e-2)


# ---------------------------------------------------------------------------
# solve: feasibility, structure, equivalence
# ---------------------------------------------------------------------------

def test_solve_scalar_feasible(scalar_setup):
    _, _, _, ing, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup)
    sol = eng.solve(basis, deterministic_init(basis, 2.0))
    assert sol.status == "optimal"
    assert np.isfinite(sol.value)
    assert -3.0 - 1e-7 <= sol.u_coeffs[0][0, 0] <= 3.0 + 1e-7
    assert sol.slack_norm <= 1e-6
    assert sol.hankel_residual <= 1e-7

    # causality columns are exactly zero
    for i, u in enumerate(sol.u_coeffs):
        pinned = sorted(pce.causality_zero_indices(i, basis.L_x, basis.L_w, basis.L))
        assert np.all(u[:, pinned] == 0.0)


def test_solve_infeasible_far_state(scalar_setup):
    _, _, _, _, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup)
    sol = eng.solve(basis, deterministic_init(basis, 100.0))
    assert sol.status == "infeasible"


def test_solve_infeasible_via_solver(scalar_setup):
    """Initial state inside the box but не recoverable under a tight input box."""
    _, _, _, _, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup, shortcut=False, U_box=terminal.Box.symmetric(0.5, 1))
    sol = eng.solve(basis, deterministic_init(basis, 1.5))
    assert sol.status == "infeasible"


def test_equivalence_hankel_vs_model(scalar_setup):
    """Data-driven and explicit-dynamics programs agree in objective and first
    input for randomized feasible initial states."""
    _, _, _, _, basis, _, _ = scalar_setup
    eng_d = make_engine(scalar_setup)
    eng_m = make_engine(scalar_setup, use_model=True)
    rng = np.random.default_rng(17)
    for _ in range(8):
        init = deterministic_init(basis, rng.uniform(-1.9, 1.9))
        sd = eng_d.solve(basis, init)
        sm = eng_m.solve(basis, init)
        assert sd.status == sm.status == "optimal"
        assert abs(sd.value - sm.value) <= 1e-6 * (1.0 + abs(sm.value))
        assert np.max(np.abs(sd.u_coeffs[0] - sm.u_coeffs[0])) <= 1e-5


def test_shortcut_matches_full_solver(scalar_setup):
    _, _, _, _, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup)
    eng_ns = make_engine(scalar_setup)
    eng_ns._try_shortcut = lambda *a, **k: None
    init = deterministic_init(basis, 0.9)
    s_sc = eng.solve(basis, init)
    s_full = eng_ns.solve(basis, init)
    assert s_sc.solver_status == "rollout_shortcut"
    assert s_full.solver_status != "rollout_shortcut"
    assert abs(s_sc.value - s_full.value) <= 1e-7 * (1.0 + abs(s_full.value))


def test_unconstrained_matches_galerkin_lqr_oracle(scalar_setup):
    """With every inequality disabled the solution is the feedback rollout of
    the coefficient dynamics (stationary Riccati feedback)."""
    plant, record, stack, ing, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup, X_box=None, U_box=None, Gamma=None,
                      gamma_level=None, shortcut=False)
    init = deterministic_init(basis, 1.3)
    sol = eng.solve(basis, init)
    assert sol.status == "optimal"

    P, K = terminal.dare([[2.0]], [[1.0]], [[1.0]], [[1.0]])
    states = [init]
    u_seq = []
    for _ in range(25):
        u_seq.append(K @ states[-1])
        states = [s.coeffs for s in pce.galerkin_propagate(
            [[2.0]], [[1.0]], init, u_seq, plant.disturbance, len(u_seq), basis)]
    for i in range(25):
        np.testing.assert_allclose(sol.u_coeffs[i], K @ states[i], atol=2e-5)
        np.testing.assert_allclose(sol.x_coeffs[i + 1], states[i + 1], atol=2e-5)
    oracle_cost = ocp.evaluate_cost(states, u_seq, basis, [[1.0]], [[1.0]], ing.P)
    assert sol.value == pytest.approx(oracle_cost, rel=1e-7)


def test_monotonicity_in_epsilon_and_boxes(scalar_setup):
    _, _, _, _, basis, _, _ = scalar_setup
    init = deterministic_init(basis, 1.9)
    values = []
    for eps in (0.05, 0.1, 0.3):
        eng = make_engine(scalar_setup, shortcut=False,
                          sigma_x=ocp.chance_sigma("gaussian", eps),
                          sigma_u=ocp.chance_sigma("gaussian", eps))
        values.append(eng.solve(basis, init).value)
    assert values[0] >= values[1] - 1e-8
    assert values[1] >= values[2] - 1e-8

    values = []
    for width in (2.0, 2.5, 4.0):
        eng = make_engine(scalar_setup, shortcut=False,
                          X_box=terminal.Box.symmetric(width, 1))
        values.append(eng.solve(basis, init).value)
    assert values[0] >= values[1] - 1e-8
    assert values[1] >= values[2] - 1e-8


def test_chance_constraint_monte_carlo_soundness(scalar_setup):
    """Sampled realizations of the optimal predicted states violate the box
    with frequency at most epsilon plus Monte-Carlo slack."""
    plant, _, _, _, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup)
    sol = eng.solve(basis, deterministic_init(basis, 1.95))
    rng = np.random.default_rng(123)
    M = 100_000
    germs = plant.disturbance.sample_germs(rng, M * 25).reshape(M, 25)
    phi = np.hstack([np.ones((M, 1)), germs])
    for i in range(1, 25):
        xv = phi @ sol.x_coeffs[i].T
        viol = np.mean((xv[:, 0] > 2.0) | (xv[:, 0] < -2.0))
        assert viol <= 0.1 + 0.01


def test_terminal_covariance_constraint_binds(scalar_setup):
    _, _, _, ing, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup)
    sol = eng.solve(basis, deterministic_init(basis, 1.0))
    norms = basis.norms
    xN = sol.x_coeffs[25]
    cov = float((xN[:, 1:] ** 2 * norms[1:]).sum())
    assert cov <= ing.Gamma[0, 0] + 1e-7
    mean_cost = 0.5 * xN[0, 0] ** 2 * ing.P[0, 0]
    assert mean_cost <= ing.gamma_level + 1e-9


def test_nominal_variable_counts(scalar_setup):
    _, _, stack, ing, basis, X_box, U_box = scalar_setup
    prob = ocp.assemble(
        stack=stack, basis=basis, init_coeffs=deterministic_init(basis, 1.0),
        w_model=pce.gaussian_disturbance([[0.01]]), Q=[[1.0]], R=[[1.0]], P=ing.P,
        sigma_x=1.645, sigma_u=1.645, X_box=X_box, U_box=U_box,
        Gamma=ing.Gamma, gamma_level=ing.gamma_level,
    )
    counts = prob.nominal_variable_counts()
    assert counts["x"] == 26 * 26
    assert counts["u"] == 25 * 26
    assert counts["g"] == 76 * 26
    assert counts["c"] == 26
    sol = ocp.solve(prob)
    assert sol.status == "optimal"


def test_check_candidate_on_solution(scalar_setup):
    _, _, _, _, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup)
    sol = eng.solve(basis, deterministic_init(basis, 1.5))
    res = eng.check_candidate(basis, sol.x_coeffs, sol.u_coeffs)
    assert res["hankel"] <= 1e-6
    assert res["chance"] <= 1e-7
    assert res["terminal_mean"] <= 1e-9
    assert res["terminal_cov"] <= 1e-7
    assert res["causality"] == 0.0


def test_dump_program(scalar_setup, tmp_path):
    _, _, _, _, basis, _, _ = scalar_setup
    eng = make_engine(scalar_setup)
    eng.solve(basis, deterministic_init(basis, 1.95))
    out = tmp_path / "program.json"
    eng.dump_program(basis, out)
    import json
    payload = json.loads(out.read_text())
    assert "A" in payload["blocks"] and "b" in payload["blocks"]
    assert len(payload["blocks"]["A"]["rows"]) > 0


def test_zero_uncertainty_reduces_to_deterministic(scalar_setup):
    """With zero disturbance coefficients every variance term vanishes and the
    program is a deterministic data-driven MPC: solutions live in column 0."""
    _, _, _, ing, _, X_box, U_box = scalar_setup
    rng = np.random.default_rng(9)
    plant0 = data.Plant([[2.0]], [[1.0]], pce.gaussian_disturbance([[0.0]]))
    T = 100
    x = np.zeros((T + 1, 1))
    u = np.zeros((T, 1))
    x[0, 0] = 0.5
    for k in range(T):
        u[k, 0] = -1.7 * x[k, 0] + rng.uniform(-1, 1)
        x[k + 1] = 2.0 * x[k] + u[k]
    record0 = data.DataRecord(x, u, np.zeros((T, 1)))
    basis = pce.make_basis(1, 2, 25)
    w0 = pce.DisturbanceModel(pce.PolyFamily.HERMITE, np.zeros((1, 2)))
    stack0 = data.HankelStack(
        Hx=data.hankel(record0.x_traj, 26), Hu=data.hankel(record0.u_traj, 25),
        Hw=data.hankel(record0.w_traj, 25), N=25, n_x=1, n_u=1,
    )
    eng = ocp.OcpEngine(stack=stack0, w_model=w0, N=25, Q=[[1.0]], R=[[1.0]], P=ing.P,
                        sigma_x=1.645, sigma_u=1.645, X_box=X_box, U_box=U_box,
                        Gamma=ing.Gamma, gamma_level=ing.gamma_level)
    sol = eng.solve(basis, deterministic_init(basis, 1.0))
    assert sol.status == "optimal"
    for blocks in (sol.x_coeffs, sol.u_coeffs):
        for b in blocks:
            np.testing.assert_allclose(b[:, 1:], 0.0, atol=1e-7)
