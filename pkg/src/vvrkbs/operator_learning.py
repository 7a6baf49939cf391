"""Two-level spaces for operator learning.

A hyper-atom contributes a * phi(z, w) * psi(x, theta) * v, so a finite
atomic model is simultaneously a measure over (w, theta) with vector
payloads (weight form) and a measure over w whose payloads are base
functions of x (function form).  Both views evaluate identically; their
norms differ, with the function-form upper bound dominated by the
weight-form total variation.  The joint fit runs the same conditional
gradient scheme as the flat solver on the product feature
phi(z_n, w) psi(x_j, theta) <v_j, v>.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .dual_pair import DualPairSpec, dual_norm_value, primal_witness, vector_norm
from .feature import (
    FeatureMap,
    feature_from_json_dict,
    feature_to_json_dict,
    grad_phi_w_batch,
    phi_matrix,
)
from .measure import (
    MERGE_TOL,
    coalesce,
    integrate,
    measure_from_arrays,
    total_variation,
)
from .rkbs import RkbsFunction, evaluate as rkbs_evaluate
from .solver import (
    FitOptions,
    Loss,
    SolverError,
    _fista,
    _prox_rows,
    loss_grad,
    loss_values,
)


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclasses.dataclass(frozen=True)
class HyperAtom:
    """One product atom a * phi(., w) psi(., theta) v."""

    a: float
    w: np.ndarray
    theta: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        for name in ("w", "theta", "v"):
            arr = _frozen(np.atleast_1d(getattr(self, name)))
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise ValueError(f"atom field {name} must be a finite vector")
            object.__setattr__(self, name, arr)
        if not np.isfinite(self.a):
            raise ValueError("atom weight must be finite")


def _check_ball(points: np.ndarray, radius: float, what: str):
    norms = np.sqrt(np.sum(points * points, axis=1))
    if np.any(norms > radius * (1 + 1e-9) + 1e-12):
        raise ValueError(f"{what} must lie in the radius-{radius} ball")


@dataclasses.dataclass(frozen=True)
class HyperModel:
    """Atomic two-level model with hyper feature phi and base feature psi."""

    atoms: tuple
    phi: FeatureMap
    psi: FeatureMap
    spec: DualPairSpec

    def __post_init__(self):
        atoms = tuple(self.atoms)
        for at in atoms:
            if len(at.w) != self.phi.dw:
                raise ValueError("atom w does not match the hyper feature")
            if len(at.theta) != self.psi.dw:
                raise ValueError("atom theta does not match the base feature")
            if len(at.v) != self.spec.dim:
                raise ValueError("atom payload does not match the value space")
        if atoms:
            _check_ball(np.stack([a.w for a in atoms]), self.phi.radius, "w")
            _check_ball(
                np.stack([a.theta for a in atoms]), self.psi.radius, "theta"
            )
        object.__setattr__(self, "atoms", atoms)

    def arrays(self):
        """(a, W, Theta, V) stacked over atoms."""
        if not self.atoms:
            return (
                np.zeros(0),
                np.zeros((0, self.phi.dw)),
                np.zeros((0, self.psi.dw)),
                np.zeros((0, self.spec.dim)),
            )
        return (
            np.array([at.a for at in self.atoms]),
            np.stack([at.w for at in self.atoms]),
            np.stack([at.theta for at in self.atoms]),
            np.stack([at.v for at in self.atoms]),
        )


def _group_by_location(points: np.ndarray, tol: float = MERGE_TOL):
    """Greedy grouping of rows by max-norm distance, first row representative."""
    groups = []
    reps = []
    for i, p in enumerate(points):
        placed = False
        for g, r in enumerate(reps):
            if np.max(np.abs(p - r)) <= tol:
                groups[g].append(i)
                placed = True
                break
        if not placed:
            groups.append([i])
            reps.append(p)
    return groups


# ------------------------------------------------------------- evaluation

def evaluate_weight_form(m: HyperModel, z, x) -> np.ndarray:
    """Collapse the hyper level first: inner measure over theta, then base."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, W, Theta, V = m.arrays()
    if not m.atoms:
        return np.zeros(m.spec.dim)
    coeff = a * phi_matrix(m.phi, z[None, :], W)[0]
    inner = measure_from_arrays(Theta, coeff[:, None] * V, m.spec, m.psi.radius)
    return integrate(m.psi, inner, x)


def evaluate_function_form(m: HyperModel, z, x) -> np.ndarray:
    """Collapse the base level first: one base function per distinct w."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, W, Theta, V = m.arrays()
    out = np.zeros(m.spec.dim)
    for idx in _group_by_location(W):
        g = RkbsFunction(
            measure_from_arrays(
                Theta[idx], a[idx, None] * V[idx], m.spec, m.psi.radius
            ),
            m.psi,
            m.spec,
        )
        weight = float(phi_matrix(m.phi, z[None, :], W[idx[0]][None, :])[0, 0])
        out += weight * rkbs_evaluate(g, x)
    return out


def hyper_evaluate(m: HyperModel, z, x) -> np.ndarray:
    """Evaluate f(z)(x), checking that both collapse orders agree."""
    wf = evaluate_weight_form(m, z, x)
    ff = evaluate_function_form(m, z, x)
    scale = np.maximum(1.0, np.maximum(np.abs(wf), np.abs(ff)))
    err = np.max(np.abs(wf - ff) / scale)
    if err > 1e-12:
        raise ArithmeticError(
            f"weight-form and function-form evaluations disagree ({err:.3e})"
        )
    return wf


# ------------------------------------------------------------------- norms

def _inner_measures(m: HyperModel):
    """Coalesced inner measure over theta for each distinct w group."""
    a, W, Theta, V = m.arrays()
    out = []
    for idx in _group_by_location(W):
        inner = measure_from_arrays(
            Theta[idx], a[idx, None] * V[idx], m.spec, m.psi.radius
        )
        out.append(coalesce(inner))
    return out


def weight_form_tv(m: HyperModel) -> float:
    """Total variation of the measure over (w, theta): sum over distinct w
    of the inner measure's total variation."""
    return float(sum(total_variation(inner) for inner in _inner_measures(m)))


def _probe_points(psi: FeatureMap, n_probes: int, radius: float, seed: int):
    rng = np.random.default_rng(seed)
    return rng.uniform(-radius, radius, (n_probes, psi.dx))


def function_form_tv_upper(
    m: HyperModel, n_probes: int = 32, probe_radius: float = 1.0, seed: int = 0
) -> float:
    """Upper bound on the function-form norm.

    Within each distinct-w group, inner atoms whose base functions
    psi(., theta) coincide on a probe set are merged before summing
    payload norms; by the triangle inequality the result never exceeds
    weight_form_tv.  The true function-space infimum is not computable,
    so this representative bound is what the domination statement is
    about.
    """
    probes = _probe_points(m.psi, n_probes, probe_radius, seed)
    total = 0.0
    for inner in _inner_measures(m):
        if not inner.atoms:
            continue
        thetas = inner.locations()
        payloads = inner.payloads()
        cols = phi_matrix(m.psi, probes, thetas)
        merged = []
        for k in range(cols.shape[1]):
            hit = None
            for g, (col, _) in enumerate(merged):
                if np.allclose(cols[:, k], col, atol=1e-12, rtol=0.0):
                    hit = g
                    break
            if hit is None:
                merged.append((cols[:, k], payloads[k].copy()))
            else:
                merged[hit] = (merged[hit][0], merged[hit][1] + payloads[k])
        total += float(
            sum(vector_norm(p, m.spec.primal_norm) for _, p in merged)
        )
    return total


# --------------------------------------------------------------------- fit

@dataclasses.dataclass(frozen=True)
class SampledMeasurement:
    """Base-space sampling functionals: M_j f = <v_j, f(x_j)>."""

    points: np.ndarray
    functionals: np.ndarray

    def __post_init__(self):
        P = _frozen(np.atleast_2d(self.points))
        V = _frozen(np.atleast_2d(self.functionals))
        if P.shape[0] != V.shape[0]:
            raise ValueError("points and functionals differ in length")
        if P.shape[0] < 1:
            raise ValueError("need at least one sampling functional")
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "functionals", V)

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]


@dataclasses.dataclass(frozen=True)
class HyperFitState:
    model: HyperModel
    objective_history: tuple
    certificate: float
    iterations: int
    seed: int
    converged: bool


def _hyper_predictions(Phi, Psi, V, C):
    # P[n, j] = sum_m Phi[n, m] Psi[j, m] (C V^T)[m, j]
    B = C @ V.T
    return Phi @ (Psi.T * B)


def hyper_objective(
    Z, Y, sampling: SampledMeasurement, model: HyperModel, lam: float,
    loss: Loss = Loss(),
) -> float:
    """Mean loss of the sampled predictions plus lam * weight_form_tv."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    a, W, Theta, Vp = model.arrays()
    if model.atoms:
        Phi = phi_matrix(model.phi, Z, W)
        Psi = phi_matrix(model.psi, sampling.points, Theta)
        P = _hyper_predictions(Phi, Psi, sampling.functionals, a[:, None] * Vp)
    else:
        P = np.zeros_like(Y)
    data = float(np.sum(loss_values(loss, P, Y))) / len(Z)
    return data + lam * weight_form_tv(model)


def _hyper_score_grid(phi_f, psi_f, Z, Xj, GN, V, spec, w_grid, theta_grid):
    """Exhaustive oracle over the product grid; ties to the lowest pair."""
    PhiG = phi_matrix(phi_f, Z, w_grid)           # (N, Gw)
    PsiG = phi_matrix(psi_f, Xj, theta_grid)      # (J, Gt)
    R = PhiG.T @ GN                               # (Gw, J)
    best = None
    for t in range(theta_grid.shape[0]):
        Q = (R * PsiG[:, t][None, :]) @ V         # (Gw, d)
        scores = np.array([dual_norm_value(spec, q) for q in Q])
        g = int(np.argmax(scores))
        if best is None or scores[g] > best[0]:
            best = (float(scores[g]), g, t, Q[g])
    score, g, t, q = best
    return w_grid[g].copy(), theta_grid[t].copy(), primal_witness(spec, q), score


def _hyper_score_at(phi_f, psi_f, Z, Xj, GN, V, spec, w, th):
    pc = phi_matrix(phi_f, Z, w[None, :])[:, 0]
    qc = phi_matrix(psi_f, Xj, th[None, :])[:, 0]
    q = ((pc @ GN) * qc) @ V
    return dual_norm_value(spec, q), primal_witness(spec, q), pc, qc


def _hyper_ascend(phi_f, psi_f, Z, Xj, GN, V, spec, w0, th0, max_steps=200):
    """Joint projected ascent over (w, theta) with shared backtracking."""
    w = np.asarray(w0, dtype=float).copy()
    th = np.asarray(th0, dtype=float).copy()
    score, u, pc, qc = _hyper_score_at(phi_f, psi_f, Z, Xj, GN, V, spec, w, th)
    for _ in range(max_steps):
        e = V @ u
        gw = grad_phi_w_batch(phi_f, Z, w).T @ (GN @ (qc * e))
        gt = grad_phi_w_batch(psi_f, Xj, th).T @ ((GN.T @ pc) * e)
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gt))):
            raise SolverError("non-finite oracle gradient")
        gg = float(np.dot(gw, gw) + np.dot(gt, gt))
        if gg == 0.0:
            break
        step = 1.0
        improved = False
        while step >= 1e-12:
            cw = _project_ball(w + step * gw, phi_f.radius)
            ct = _project_ball(th + step * gt, psi_f.radius)
            cand = _hyper_score_at(phi_f, psi_f, Z, Xj, GN, V, spec, cw, ct)
            if cand[0] >= score + 1e-4 * step * gg:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        gain = cand[0] - score
        w, th = cw, ct
        score, u, pc, qc = cand
        if gain <= 1e-12 * (1.0 + score):
            break
    return w, th, u, score


def _project_ball(v: np.ndarray, radius: float) -> np.ndarray:
    n = float(np.sqrt(np.dot(v, v)))
    if n > radius:
        return v * (radius / n)
    return v


def hyper_fit(
    Z,
    Y,
    sampling: SampledMeasurement,
    phi: FeatureMap,
    psi: FeatureMap,
    spec: DualPairSpec,
    lam: float,
    opts: FitOptions = FitOptions(),
    w_grid=None,
    theta_grid=None,
) -> HyperFitState:
    """Conditional gradient over hyper-atoms with free payload refits.

    The lifted data matrix couples each training input z_n with every
    sampling functional (v_j, x_j); atom locations are (w, theta) pairs
    searched jointly.  The weight-form total variation is the penalty,
    which for free payload rows is the usual sum of primal norms.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if not lam > 0:
        raise ValueError("hyper_fit requires lam > 0")
    if opts.mode != "group":
        raise ValueError("hyper_fit refits free payloads (group mode only)")
    if Z.shape[0] != Y.shape[0]:
        raise ValueError("Z and Y differ in length")
    if Z.shape[1] != phi.dx:
        raise ValueError("Z width does not match the hyper feature")
    if sampling.points.shape[1] != psi.dx:
        raise ValueError("sampling points do not match the base feature")
    if sampling.functionals.shape[1] != spec.dim:
        raise ValueError("functionals do not match the value space")
    if Y.shape[1] != sampling.n_samples:
        raise ValueError("Y width must equal the number of functionals")
    loss = Loss()
    n, d = Z.shape[0], spec.dim
    Xj, V = sampling.points, sampling.functionals
    if w_grid is not None:
        w_grid = np.atleast_2d(np.asarray(w_grid, dtype=float))
        _check_ball(w_grid, phi.radius, "w_grid")
    if theta_grid is not None:
        theta_grid = np.atleast_2d(np.asarray(theta_grid, dtype=float))
        _check_ball(theta_grid, psi.radius, "theta_grid")
    gridded = w_grid is not None and theta_grid is not None

    W = np.zeros((0, phi.dw))
    Th = np.zeros((0, psi.dw))
    C = np.zeros((0, d))

    def refit(C0):
        Phi = phi_matrix(phi, Z, W)
        Psi = phi_matrix(psi, Xj, Th)

        def val_grad(Cm):
            P = _hyper_predictions(Phi, Psi, V, Cm)
            val = float(np.sum(loss_values(loss, P, Y))) / n
            G = loss_grad(loss, P, Y)
            return val, (((Phi.T @ G) * Psi.T) @ V) / n

        def penalty(Cm):
            return lam * float(
                np.sum([vector_norm(c, spec.primal_norm) for c in Cm])
            )

        def prox(Zm, step):
            return _prox_rows(Zm, step * lam, spec.primal_norm)

        return _fista(C0, val_grad, penalty, prox, opts.refit_max_iter, opts.refit_tol)

    def data_term(Cm):
        Phi = phi_matrix(phi, Z, W)
        Psi = phi_matrix(psi, Xj, Th)
        P = _hyper_predictions(Phi, Psi, V, Cm)
        return float(np.sum(loss_values(loss, P, Y))) / n

    def pen_term(Cm):
        return lam * float(np.sum([vector_norm(c, spec.primal_norm) for c in Cm]))

    history = [data_term(C) + pen_term(C)]
    threshold = lam * (1.0 + opts.tol)
    certificate = np.inf
    converged = False
    iterations = 0
    rng = np.random.default_rng(opts.seed)

    while True:
        Phi = phi_matrix(phi, Z, W)
        Psi = phi_matrix(psi, Xj, Th)
        P = _hyper_predictions(Phi, Psi, V, C)
        GN = loss_grad(loss, P, Y) / n
        if not np.all(np.isfinite(GN)):
            raise SolverError("non-finite residuals")
        if gridded:
            w_new, t_new, u_new, score = _hyper_score_grid(
                phi, psi, Z, Xj, GN, V, spec, w_grid, theta_grid
            )
        else:
            best = None
            for _ in range(opts.restarts):
                w0 = _random_ball(rng, phi.dw, phi.radius)
                t0 = _random_ball(rng, psi.dw, psi.radius)
                cand = _hyper_ascend(phi, psi, Z, Xj, GN, V, spec, w0, t0)
                if best is None or cand[3] > best[3]:
                    best = cand
            w_new, t_new, u_new, score = best
        certificate = score
        if score <= threshold:
            converged = True
            break

        loc_new = np.concatenate([w_new, t_new])
        merged = False
        if len(W) > 0:
            locs = np.hstack([W, Th])
            if np.any(np.max(np.abs(locs - loc_new), axis=1) <= MERGE_TOL):
                merged = True
        if not merged:
            if len(W) >= opts.max_atoms:
                break
            W = np.vstack([W, w_new])
            Th = np.vstack([Th, t_new])
            C = np.vstack([C, np.zeros(d)])

        C, obj = refit(C)
        keep = np.array(
            [vector_norm(c, spec.primal_norm) > 0.0 for c in C], dtype=bool
        )
        W, Th, C = W[keep], Th[keep], C[keep]
        history.append(obj)
        iterations += 1
        if merged and history[-2] - history[-1] <= opts.refit_tol * max(1.0, abs(obj)):
            break

    atoms = tuple(
        HyperAtom(1.0, W[k], Th[k], C[k])
        for k in range(len(W))
        if vector_norm(C[k], spec.primal_norm) > 1e-10
    )
    model = HyperModel(atoms, phi, psi, spec)
    if converged and len(model.atoms) > n * sampling.n_samples:
        raise SolverError(
            f"converged model has {len(model.atoms)} atoms, over the "
            f"N*d_meas bound {n * sampling.n_samples}"
        )
    return HyperFitState(
        model=model,
        objective_history=tuple(history),
        certificate=certificate,
        iterations=iterations,
        seed=opts.seed,
        converged=converged,
    )


def _random_ball(rng, dim: int, radius: float) -> np.ndarray:
    d = rng.standard_normal(dim)
    nrm = float(np.sqrt(np.dot(d, d)))
    r = radius * float(rng.uniform()) ** (1.0 / dim)
    return d * (r / nrm) if nrm > 0 else np.zeros(dim)


def hyper_grid_oracle(
    Z,
    Y,
    sampling: SampledMeasurement,
    phi: FeatureMap,
    psi: FeatureMap,
    spec: DualPairSpec,
    lam: float,
    w_grid,
    theta_grid,
    max_iter: int = 20000,
    tol: float = 1e-10,
):
    """Solve the product-grid discretization: one free payload row per
    (w, theta) pair.  Returns (objective, coefficient matrix)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    w_grid = np.atleast_2d(np.asarray(w_grid, dtype=float))
    theta_grid = np.atleast_2d(np.asarray(theta_grid, dtype=float))
    loss = Loss()
    n = Z.shape[0]
    Xj, V = sampling.points, sampling.functionals
    # product enumeration: pair index p = gw * Gt + gt
    Gw, Gt = w_grid.shape[0], theta_grid.shape[0]
    W = np.repeat(w_grid, Gt, axis=0)
    Th = np.tile(theta_grid, (Gw, 1))
    Phi = phi_matrix(phi, Z, W)
    Psi = phi_matrix(psi, Xj, Th)

    def val_grad(Cm):
        P = _hyper_predictions(Phi, Psi, V, Cm)
        val = float(np.sum(loss_values(loss, P, Y))) / n
        G = loss_grad(loss, P, Y)
        return val, (((Phi.T @ G) * Psi.T) @ V) / n

    def penalty(Cm):
        return lam * float(np.sum([vector_norm(c, spec.primal_norm) for c in Cm]))

    def prox(Zm, step):
        return _prox_rows(Zm, step * lam, spec.primal_norm)

    C0 = np.zeros((Gw * Gt, spec.dim))
    C, obj = _fista(C0, val_grad, penalty, prox, max_iter, tol)
    return obj, C


# ---------------------------------------------------------------- deeponet

def deeponet_embed(basis, coeffs, phi: FeatureMap) -> HyperModel:
    """Build the hyper model Sum_n a_n(z) zeta_n(x).

    ``basis`` holds atomic base functions zeta_n, ``coeffs[n]`` the list
    of (a_nk, w_nk) pairs defining a_n(z) = Sum_k a_nk phi(z, w_nk).
    Every (coefficient atom, basis atom) pair becomes one hyper-atom.
    """
    if len(basis) != len(coeffs):
        raise ValueError("need one coefficient list per basis function")
    if not basis:
        raise ValueError("need at least one basis function")
    for zeta in basis:
        if not isinstance(zeta, RkbsFunction) or zeta.adjoint:
            raise ValueError("basis functions must be atomic primal-side functions")
    psi = basis[0].feature
    spec = basis[0].spec
    for zeta in basis[1:]:
        same_feature = zeta.feature is psi or feature_to_json_dict(
            zeta.feature
        ) == feature_to_json_dict(psi)
        if not same_feature or zeta.spec != spec:
            raise ValueError("basis functions must share one feature and space")
    atoms = []
    for zeta, pairs in zip(basis, coeffs):
        for a_nk, w_nk in pairs:
            for at in zeta.measure.atoms:
                atoms.append(HyperAtom(float(a_nk), w_nk, at.w, at.c))
    return HyperModel(tuple(atoms), phi, psi, spec)


# -------------------------------------------------------------------- json

def hyper_model_to_json_dict(m: HyperModel) -> dict:
    return {
        "atoms": [
            {
                "a": float(at.a),
                "w": [float(v) for v in at.w],
                "theta": [float(v) for v in at.theta],
                "v": [float(v) for v in at.v],
            }
            for at in m.atoms
        ],
        "phi": feature_to_json_dict(m.phi),
        "psi": feature_to_json_dict(m.psi),
    }


def hyper_model_from_json_dict(d: dict, spec: DualPairSpec) -> HyperModel:
    """The value-space pairing is not serialized, so the caller names it."""
    try:
        phi = feature_from_json_dict(d["phi"])
        psi = feature_from_json_dict(d["psi"])
        atoms = tuple(
            HyperAtom(e["a"], e["w"], e["theta"], e["v"]) for e in d["atoms"]
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed hyper model payload: {exc}") from exc
    return HyperModel(atoms, phi, psi, spec)
