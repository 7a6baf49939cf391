import dataclasses
import math

import numpy as np
import pytest

from vvrkbs.dual_pair import DualPairSpec
from vvrkbs.feature import FeatureMap, eval_phi, phi_matrix
from vvrkbs.measure import empty_measure, measure_from_arrays, total_variation
from vvrkbs.solver import (
    FitOptions,
    Loss,
    MeasurementOp,
    Problem,
    SolverError,
    SolverState,
    export_network,
    fit,
    functionals_measurement,
    grid_oracle,
    identity_measurement,
    lambda_max,
    lmo,
    loss_grad,
    loss_values,
    measurement_adjoint,
    measurement_apply,
    network_apply,
    network_to_json_dict,
    objective,
    product_grid,
    residual_duals,
)


def _tab_feature():
    # bilinear table on [-1,1] x [-1,1], window switched off
    return FeatureMap(
        "tabulated",
        dx=1,
        radius=1.0,
        beta="one",
        x_grid=[-1.0, 1.0],
        w_grid=[-1.0, 1.0],
        values=[[1.0, 2.0], [3.0, -4.0]],
    )


def _neural_problem(
    rng,
    n=3,
    dim=2,
    norm="l2",
    lam=0.1,
    grid_per_dim=None,
    measurement=None,
    loss=None,
):
    feat = FeatureMap("neural", dx=1, radius=1.5, beta="one", activation="tanh")
    spec = DualPairSpec(dim, norm)
    meas = measurement if measurement is not None else identity_measurement()
    d_meas = dim if meas.kind == "identity" else meas.matrix.shape[0]
    X = rng.uniform(-1.0, 1.0, (n, 1))
    Y = rng.standard_normal((n, d_meas))
    grid = None
    if grid_per_dim is not None:
        grid = product_grid(feat.radius, feat.dw, grid_per_dim)
    return Problem(
        X, Y, loss or Loss(), meas, lam, feat, spec, omega_grid=grid
    )


# ------------------------------------------------------------------ losses

def test_squared_loss_values_and_grad():
    P = np.array([[1.0, 2.0], [0.0, -1.0]])
    Y = np.array([[0.0, 2.0], [1.0, 1.0]])
    assert loss_values(Loss(), P, Y) == pytest.approx([0.5, 2.5])
    assert np.allclose(loss_grad(Loss(), P, Y), P - Y)


def test_huber_matches_piecewise_formula():
    loss = Loss("huber", delta=0.5)
    P = np.array([[0.2, 2.0, -3.0]])
    Y = np.zeros((1, 3))
    # componentwise: quadratic inside |t| <= delta, linear outside
    expected = 0.5 * 0.2**2 + (0.5 * 2.0 - 0.125) + (0.5 * 3.0 - 0.125)
    assert loss_values(loss, P, Y)[0] == pytest.approx(expected, rel=1e-12)
    assert np.allclose(loss_grad(loss, P, Y), [[0.2, 0.5, -0.5]])


def test_loss_validation():
    with pytest.raises(ValueError):
        Loss("absolute")
    with pytest.raises(ValueError):
        Loss("huber", delta=0.0)


# ------------------------------------------------------------- measurement

def test_measurement_apply_and_adjoint():
    V = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]])
    m = functionals_measurement(V)
    U = np.array([[1.0, 2.0, 3.0]])
    assert np.allclose(measurement_apply(m, U), U @ V.T)
    G = np.array([[0.5, -1.0]])
    assert np.allclose(measurement_adjoint(m, G), G @ V)


def test_measurement_validation():
    with pytest.raises(ValueError):
        MeasurementOp("identity", np.eye(2))
    with pytest.raises(ValueError):
        MeasurementOp("functionals")
    with pytest.raises(ValueError):
        MeasurementOp("averages")


# --------------------------------------------------------------- objective

def test_objective_zero_measure_is_mean_loss_of_targets():
    rng = np.random.default_rng(0)
    p = _neural_problem(rng, n=4, lam=0.3)
    mu = empty_measure(p.spec, p.feature.radius)
    expected = float(np.mean([0.5 * np.dot(y, y) for y in p.Y]))
    assert objective(p, mu) == pytest.approx(expected, rel=1e-12)


def test_objective_perfect_fit_no_penalty_is_zero():
    feat = FeatureMap("neural", dx=1, radius=2.0, beta="one", activation="tanh")
    spec = DualPairSpec(2, "l2")
    w = np.array([0.5, -0.2])
    c = np.array([1.0, -2.0])
    X = np.array([[0.1], [0.7], [-0.4]])
    Y = phi_matrix(feat, X, w[None, :]) * c[None, :]
    p = Problem(X, Y, Loss(), identity_measurement(), 0.0, feat, spec)
    mu = measure_from_arrays([w], [c], spec, feat.radius)
    assert objective(p, mu) == pytest.approx(0.0, abs=1e-15)


def test_objective_tiny_instance_by_hand():
    feat = _tab_feature()
    spec = DualPairSpec(1, "l2")
    X = np.array([[-1.0], [0.5]])
    Y = np.array([[1.0], [-0.5]])
    w, c, lam = 0.25, 0.8, 0.7
    p = Problem(X, Y, Loss(), identity_measurement(), lam, feat, spec)
    mu = measure_from_arrays([[w]], [[c]], spec, feat.radius)

    def table_phi(x, wv):
        gx = (x + 1.0) / 2.0
        gw = (wv + 1.0) / 2.0
        return (
            (1 - gx) * (1 - gw) * 1.0
            + gx * (1 - gw) * 3.0
            + (1 - gx) * gw * 2.0
            + gx * gw * -4.0
        )

    p1 = table_phi(-1.0, w) * c
    p2 = table_phi(0.5, w) * c
    by_hand = 0.5 * (0.5 * (p1 - 1.0) ** 2 + 0.5 * (p2 + 0.5) ** 2) + lam * abs(c)
    assert objective(p, mu) == pytest.approx(by_hand, rel=1e-12)


def test_residual_duals_at_zero_measure():
    rng = np.random.default_rng(1)
    p = _neural_problem(rng, n=3)
    eta = residual_duals(p, empty_measure(p.spec, p.feature.radius))
    assert np.allclose(eta, -p.Y / 3.0, rtol=1e-14)


# --------------------------------------------------------------------- lmo

def test_lmo_single_point_l1_ball_picks_basis_vector():
    feat = FeatureMap("neural", dx=1, radius=1.5, beta="one", activation="tanh")
    spec = DualPairSpec(2, "l1")
    p = Problem(
        [[0.3]], [[1.0, 0.0]], Loss(), identity_measurement(), 0.1, feat, spec,
        omega_grid=product_grid(1.5, 2, 3),
    )
    eta = np.array([[1.0, 0.0]])
    w, u, score = lmo(p, eta)
    assert sorted(np.abs(u).tolist()) == [0.0, 1.0]
    assert abs(u[0]) == 1.0
    assert score == pytest.approx(abs(eval_phi(feat, [0.3], w)), rel=1e-12)


def test_lmo_zero_residuals_score_zero():
    rng = np.random.default_rng(2)
    p = _neural_problem(rng, grid_per_dim=3)
    w, u, score = lmo(p, np.zeros((3, 2)))
    assert score == 0.0


def test_lmo_matches_exhaustive_enumeration():
    # brute force over grid x {+-e_j} is the reference answer
    feat = FeatureMap("neural", dx=1, radius=1.5, beta="one", activation="tanh")
    spec = DualPairSpec(2, "l1")
    grid = product_grid(1.5, 2, 3)
    X = np.array([[-0.8], [0.1], [0.9]])
    p = Problem(
        X, np.zeros((3, 2)), Loss(), identity_measurement(), 0.1, feat, spec,
        omega_grid=grid,
    )
    eta = np.array([[0.4, -1.1], [-0.3, 0.2], [0.9, 0.5]])

    best = None
    for g in range(len(grid)):
        for j in range(2):
            for s in (1.0, -1.0):
                val = s * sum(
                    eval_phi(feat, X[n], grid[g]) * eta[n, j] for n in range(3)
                )
                if best is None or val > best[0] + 1e-15:
                    best = (val, g, j, s)

    w, u, score = lmo(p, eta)
    assert score == pytest.approx(best[0], rel=1e-12)
    assert np.allclose(w, grid[best[1]])
    expected_u = np.zeros(2)
    expected_u[best[2]] = best[3]
    assert np.array_equal(u, expected_u)


def test_lmo_ascent_reaches_grid_optimum():
    # the unrestricted search should do at least as well as a coarse grid
    rng = np.random.default_rng(3)
    p = _neural_problem(rng, n=3, lam=0.05)
    eta = residual_duals(p, empty_measure(p.spec, p.feature.radius))
    grid = product_grid(p.feature.radius, 2, 9)
    V = phi_matrix(p.feature, p.X, grid).T @ eta
    grid_best = max(float(np.linalg.norm(v)) for v in V)
    _, _, score = lmo(p, eta, restarts=16, seed=7)
    assert score >= grid_best - 1e-6


def test_lmo_rejects_nonfinite_residuals():
    rng = np.random.default_rng(4)
    p = _neural_problem(rng, grid_per_dim=3)
    eta = np.full((3, 2), np.nan)
    with pytest.raises(SolverError):
        lmo(p, eta)


# ------------------------------------------------------------ product grid

def test_product_grid_stays_in_ball():
    pts = product_grid(1.0, 2, 4)
    assert len(pts) == 12  # the four corner cells fall outside the ball
    assert np.all(np.sqrt(np.sum(pts * pts, axis=1)) <= 1.0)


# --------------------------------------------------------------------- fit

def test_fit_above_lambda_max_returns_zero_measure():
    rng = np.random.default_rng(5)
    p = _neural_problem(rng, n=4, grid_per_dim=5, lam=1.0)
    # reference lambda_max from an explicit sweep at the zero measure
    eta = -p.Y / p.n_data
    V = phi_matrix(p.feature, p.X, p.omega_grid).T @ eta
    lam_star = max(float(np.linalg.norm(v)) for v in V)
    p_high = dataclasses.replace(p, lam=1.05 * lam_star)
    state = fit(p_high, FitOptions(max_atoms=10, seed=0))
    assert state.converged
    assert state.measure.atoms == ()
    assert lambda_max(p) == pytest.approx(lam_star, rel=1e-12)


def test_fit_below_half_lambda_max_returns_atoms():
    rng = np.random.default_rng(6)
    p = _neural_problem(rng, n=4, grid_per_dim=5, lam=1.0)
    lam_star = lambda_max(p)
    state = fit(dataclasses.replace(p, lam=0.5 * lam_star), FitOptions(max_atoms=10))
    assert len(state.measure.atoms) >= 1


def test_fit_single_point_soft_threshold_closed_form():
    feat = FeatureMap("neural", dx=1, radius=2.0, beta="one", activation="tanh")
    spec = DualPairSpec(1, "l2")
    w = np.array([0.6, 0.3])
    x, y, lam = 0.4, 2.0, 0.1
    phi = math.tanh(0.6 * x + 0.3)
    c_star = (phi * y - lam) / phi**2  # positive branch of the optimality
    p = Problem(
        [[x]], [[y]], Loss(), identity_measurement(), lam, feat, spec,
        omega_grid=w[None, :],
    )
    for mode in ("group", "l1"):
        # the refit stops on objective change, so coefficients carry
        # roughly the square root of that tolerance
        state = fit(p, FitOptions(max_atoms=3, mode=mode, tol=1e-6, refit_tol=1e-14))
        assert state.converged
        assert len(state.measure.atoms) == 1
        got = state.measure.atoms[0].c[0]
        assert got == pytest.approx(c_star, rel=1e-6)


def test_fit_matches_grid_oracle_l2_group():
    rng = np.random.default_rng(7)
    p = _neural_problem(rng, n=4, dim=2, norm="l2", grid_per_dim=7, lam=1.0)
    lam = 0.3 * lambda_max(p)
    p = dataclasses.replace(p, lam=lam)
    state = fit(p, FitOptions(max_atoms=40, mode="group", tol=1e-6, refit_tol=1e-12))
    ref_obj, _ = grid_oracle(p, 7, max_iter=50000, tol=1e-13)
    got = objective(p, state.measure)
    assert abs(got - ref_obj) / ref_obj <= 1e-4


def test_fit_matches_grid_oracle_l1_mode():
    rng = np.random.default_rng(8)
    p = _neural_problem(rng, n=3, dim=2, norm="l1", grid_per_dim=5, lam=1.0)
    lam = 0.4 * lambda_max(p)
    p = dataclasses.replace(p, lam=lam)
    state = fit(p, FitOptions(max_atoms=40, mode="l1", tol=1e-6, refit_tol=1e-12))
    ref_obj, _ = grid_oracle(p, 5, max_iter=50000, tol=1e-13)
    got = objective(p, state.measure)
    assert abs(got - ref_obj) / ref_obj <= 1e-4


def test_fit_history_non_increasing_and_sparsity():
    rng = np.random.default_rng(9)
    for norm, mode in (("l2", "group"), ("l1", "l1"), ("l2", "l1"), ("l1", "group")):
        p = _neural_problem(rng, n=3, dim=2, norm=norm, grid_per_dim=5, lam=1.0)
        p = dataclasses.replace(p, lam=0.35 * lambda_max(p))
        state = fit(p, FitOptions(max_atoms=20, mode=mode))
        h = state.objective_history
        assert all(h[i + 1] <= h[i] for i in range(len(h) - 1))
        if state.converged:
            assert len(state.measure.atoms) <= p.n_data * 2


def test_fit_l1_mode_payloads_are_axis_aligned():
    rng = np.random.default_rng(10)
    p = _neural_problem(rng, n=3, dim=3, norm="l1", grid_per_dim=5, lam=1.0)
    p = dataclasses.replace(p, lam=0.3 * lambda_max(p))
    state = fit(p, FitOptions(max_atoms=20, mode="l1"))
    assert state.measure.atoms
    for atom in state.measure.atoms:
        off_axis = np.sort(np.abs(atom.c))[:-1]
        assert np.all(off_axis <= 1e-10)


def test_fit_deterministic_given_seed():
    rng = np.random.default_rng(11)
    p = _neural_problem(rng, n=3, dim=2, lam=0.05)
    opts = FitOptions(max_atoms=4, restarts=6, seed=123)
    s1 = fit(p, opts)
    s2 = fit(p, opts)
    assert s1.objective_history == s2.objective_history
    assert len(s1.measure.atoms) == len(s2.measure.atoms)
    for a1, a2 in zip(s1.measure.atoms, s2.measure.atoms):
        assert np.array_equal(a1.w, a2.w)
        assert np.array_equal(a1.c, a2.c)


def test_fit_invariant_under_functional_permutation():
    rng = np.random.default_rng(12)
    V = rng.standard_normal((3, 2))
    Y = rng.standard_normal((4, 3))
    feat = FeatureMap("neural", dx=1, radius=1.5, beta="one", activation="tanh")
    spec = DualPairSpec(2, "l2")
    X = rng.uniform(-1, 1, (4, 1))
    grid = product_grid(1.5, 2, 5)
    perm = [2, 0, 1]
    p1 = Problem(X, Y, Loss(), functionals_measurement(V), 0.05, feat, spec,
                 omega_grid=grid)
    p2 = Problem(X, Y[:, perm], Loss(), functionals_measurement(V[perm]), 0.05,
                 feat, spec, omega_grid=grid)
    o1 = objective(p1, fit(p1, FitOptions(max_atoms=15)).measure)
    o2 = objective(p2, fit(p2, FitOptions(max_atoms=15)).measure)
    assert abs(o1 - o2) <= 1e-10


def test_fit_requires_positive_lam():
    rng = np.random.default_rng(13)
    p = _neural_problem(rng, lam=0.0)
    with pytest.raises(ValueError):
        fit(p, FitOptions(max_atoms=2))


# ------------------------------------------------------------- grid oracle

def test_grid_oracle_huge_lam_returns_zero():
    rng = np.random.default_rng(14)
    p = _neural_problem(rng, n=3, lam=1e6)
    obj, C = grid_oracle(p, 5)
    assert np.all(C == 0.0)
    assert obj == pytest.approx(
        objective(p, empty_measure(p.spec, p.feature.radius)), rel=1e-12
    )


def test_grid_oracle_single_cell_soft_threshold():
    feat = FeatureMap("neural", dx=1, radius=2.0, beta="one", activation="tanh")
    spec = DualPairSpec(1, "l2")
    w = np.array([[0.6, 0.3]])
    x, y, lam = 0.4, 2.0, 0.1
    phi = math.tanh(0.6 * x + 0.3)
    c_star = (phi * y - lam) / phi**2
    p = Problem([[x]], [[y]], Loss(), identity_measurement(), lam, feat, spec,
                omega_grid=w)
    obj, C = grid_oracle(p, 1, tol=1e-14)
    assert C[0, 0] == pytest.approx(c_star, rel=1e-6)
    by_hand = 0.5 * (phi * c_star - y) ** 2 + lam * abs(c_star)
    assert obj == pytest.approx(by_hand, rel=1e-10)


def test_grid_oracle_objective_matches_reported_coefficients():
    rng = np.random.default_rng(15)
    p = _neural_problem(rng, n=4, lam=0.08)
    obj, C = grid_oracle(p, 5)
    grid = product_grid(p.feature.radius, 2, 5)
    mu = measure_from_arrays(grid, C, p.spec, p.feature.radius)
    assert objective(p, mu) == pytest.approx(obj, rel=1e-10)


def test_grid_oracle_rerun_identical():
    rng = np.random.default_rng(16)
    p = _neural_problem(rng, n=3, lam=0.05)
    o1, C1 = grid_oracle(p, 5)
    o2, C2 = grid_oracle(p, 5)
    assert abs(o1 - o2) <= 1e-8
    assert np.allclose(C1, C2, atol=1e-10)


# ------------------------------------------------------------------ export

def test_export_single_atom_network():
    feat = FeatureMap("neural", dx=2, radius=2.0, beta="one", activation="tanh")
    spec = DualPairSpec(2, "l2")
    mu = measure_from_arrays([[0.5, -0.3, 0.1]], [[1.0, -2.0]], spec, 2.0)
    state = SolverState(mu, (0.0,), 0.0, 0, 0, feat, True)
    net = export_network(state)
    assert net.U.shape == (2, 1)
    assert net.W.shape == (1, 2)
    x = np.array([0.4, 0.7])
    expected = math.tanh(0.5 * 0.4 - 0.3 * 0.7 + 0.1) * np.array([1.0, -2.0])
    assert np.allclose(network_apply(net, x[None, :])[0], expected, rtol=1e-14)


def test_export_empty_network():
    feat = FeatureMap("neural", dx=1, radius=1.0, beta="one", activation="tanh")
    spec = DualPairSpec(3, "l2")
    state = SolverState(empty_measure(spec, 1.0), (0.0,), 0.0, 0, 0, feat, True)
    net = export_network(state)
    assert net.U.shape == (3, 0)
    assert np.all(network_apply(net, [[0.2]]) == 0.0)


def test_export_identity_many_atoms():
    rng = np.random.default_rng(17)
    feat = FeatureMap(
        "neural", dx=2, radius=2.0, beta="smooth_bump", activation="sigmoid"
    )
    spec = DualPairSpec(3, "l2")
    W = rng.uniform(-1.0, 1.0, (6, 3))
    C = rng.standard_normal((6, 3))
    mu = measure_from_arrays(W, C, spec, 2.0)
    state = SolverState(mu, (0.0,), 0.0, 0, 0, feat, True)
    net = export_network(state)
    X = rng.uniform(-1.5, 1.5, (100, 2))
    direct = phi_matrix(feat, X, W) @ C
    out = network_apply(net, X)
    denom = np.maximum(1.0, np.abs(direct))
    assert np.max(np.abs(out - direct) / denom) <= 1e-12


def test_export_rejects_non_neural():
    spec = DualPairSpec(1, "l2")
    state = SolverState(empty_measure(spec, 1.0), (0.0,), 0.0, 0, 0, _tab_feature(), True)
    with pytest.raises(ValueError):
        export_network(state)


def test_network_json_shape():
    feat = FeatureMap("neural", dx=1, radius=1.0, beta="one", activation="tanh")
    spec = DualPairSpec(2, "l2")
    mu = measure_from_arrays([[0.1, 0.2]], [[1.0, 2.0]], spec, 1.0)
    state = SolverState(mu, (0.0,), 0.0, 0, 0, feat, True)
    d = network_to_json_dict(export_network(state))
    assert list(d.keys()) == ["U", "W", "B"]
    assert d["W"] == [[0.1]]
    assert d["B"] == [0.2]
