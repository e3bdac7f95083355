"""Numerical checks of model assumptions, certificates and trajectories.

Every check returns a :class:`CheckReport`. A failing report always carries a
witness: the sample, vertex or time step that attains the worst margin.
Margins are signed so that ``margin <= 0`` means satisfied for "residual"
style checks and ``margin >= 0`` for "eigenvalue" style checks; the report
states which through ``passed``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nonlinearity
from .errors import ModelError
from .model import PolytopicDescriptorSystem, coords, evaluate, min_singular_value_E
from .observer import ObserverGains, Trajectory, _series, weights_at, weights_series
from .synthesis import IssBounds, SynthesisCertificate, check_certificate, iss_bounds

SLOPE_TOL = 1e-9
EQUALITY_TOL = 1e-8
INEQUALITY_SLACK = 1e-6
SCALE_THRESHOLD = 1e3


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else repr(val)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class CheckReport:
    name: str
    passed: bool
    worst_margin: float
    witness: dict | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed)
        if not self.passed and self.witness is None:
            raise ValueError(f"failing check {self.name!r} needs a witness")

    def to_dict(self):
        return _jsonable({"name": self.name, "passed": self.passed, "worst_margin": self.worst_margin,
                          "witness": self.witness, "details": self.details})


def _magnitude_scale(traj):
    """Slack multiplier for large-state trajectories."""
    big = float(np.abs(traj.x).max()) if traj.x.size else 0.0
    return max(1.0, big / SCALE_THRESHOLD) ** 2


# --- assumptions -------------------------------------------------------------

def slope_form(phi, Lambda, x, y):
    """``2 |Phi|^2 - 2 Phi^T Lambda (y - x)`` row-wise, ``Phi = phi(y) - phi(x)``."""
    d = y - x
    Phi = phi(y) - phi(x)
    return 2.0 * np.sum(Phi * Phi, axis=1) - 2.0 * np.sum(Phi * (d @ np.asarray(Lambda).T), axis=1)


def check_slope_restriction(phi_id, Lambda, low=-10.0, high=10.0, count=10_000, seed=0) -> CheckReport:
    if count < 1:
        raise ModelError("count must be at least 1")
    phi = nonlinearity.get(phi_id)
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    n = Lambda.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.uniform(low, high, size=(count, n))
    y = rng.uniform(low, high, size=(count, n))
    # Near-diagonal pairs probe the local slope.
    half = count // 2
    y[:half] = x[:half] + rng.uniform(-1e-3, 1e-3, size=(half, n))
    q = slope_form(phi, Lambda, x, y)
    k = int(np.argmax(q))
    passed = bool(q[k] <= SLOPE_TOL)
    witness = None if passed else {"x": x[k], "y": y[k], "value": q[k]}
    return CheckReport("slope_restriction", passed, float(q[k]), witness,
                       {"nonlinearity": phi_id, "Lambda": Lambda, "count": count, "range": [low, high]})


def check_partition_of_unity(sys: PolytopicDescriptorSystem, count=1000, seed=0) -> CheckReport:
    cmap = sys.coordinate_map
    if cmap is None:
        return CheckReport("partition_of_unity", True, 0.0, details={"note": "single-vertex model"})
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = cmap.sample(count, rng)
    worst, witness = 0.0, None
    for p in pts:
        xi = coords(cmap, p)
        err = max(abs(xi.sum() - 1.0), max(0.0, -xi.min()))
        if err > worst:
            worst, witness = err, {"p": p, "xi": xi}
    passed = worst <= 1e-12
    return CheckReport("partition_of_unity", passed, worst, None if passed else witness, {"count": count})


def check_vertex_unit(sys: PolytopicDescriptorSystem) -> CheckReport:
    """``coords(nu_i) = e_i`` exactly and the vertex matrices are reproduced."""
    cmap = sys.coordinate_map
    if cmap is None:
        return CheckReport("vertex_unit", True, 0.0, details={"note": "single-vertex model"})
    errs = []
    for i, nu in enumerate(cmap.vertex_points):
        xi = coords(cmap, nu)
        unit = np.zeros(sys.N)
        unit[i] = 1.0
        M = evaluate(sys, xi)
        errs.append(max([float(np.abs(xi - unit).max())]
                        + [float(np.abs(getattr(M, f) - getattr(sys.vertices[i], f)).max()) for f in "EABFG"]))
    k = int(np.argmax(errs))
    worst, witness = errs[k], {"vertex": k, "xi": coords(cmap, cmap.vertex_points[k])}
    passed = worst <= 1e-14
    return CheckReport("vertex_unit", passed, worst, None if passed else witness)


def check_descriptor_regular(sys: PolytopicDescriptorSystem, grid_density=50) -> CheckReport:
    if sys.coordinate_map is None or sys.coordinate_map.lower is None:
        sig = [float(np.linalg.svd(v.E, compute_uv=False)[-1]) for v in sys.vertices]
        k = int(np.argmin(sig))
        value, where = sig[k], {"vertex": k}
    else:
        value, point = min_singular_value_E(sys, grid_density=grid_density)
        where = {"p": point}
    passed = value > 1e-12
    return CheckReport("descriptor_regular", passed, value, None if passed else where,
                       {"sigma_lower": value, "argmin": where})


# --- certificate -----------------------------------------------------------------

def check_certificate_blocks(sys, cert: SynthesisCertificate, sigma_lower=None) -> CheckReport:
    chk = check_certificate(sys, cert, sigma_lower)
    margins = chk.block_min_eigs - cert.epsilon
    k = int(np.argmin(margins)) if margins.size else 0
    witness = None if chk.ok else {"pair": cert.pairs[k] if margins.size else None, "problems": chk.problems}
    return CheckReport("certificate_blocks", chk.ok, float(margins.min()) if margins.size else np.inf, witness,
                       {"block_min_eigs": chk.block_min_eigs, "P_min_eig": chk.P_min_eig,
                        "X_min_singular": chk.X_min_singular, "tau_min": chk.tau_min,
                        "kappa_psi_sigma2": chk.kappa_psi_sigma2})


def _sample_points(sys, count, rng):
    cmap = sys.coordinate_map
    if cmap is None or cmap.lower is None:
        return [None] * count
    return list(cmap.sample(count, rng))


def _P_at(cert, xi):
    return np.tensordot(xi, cert.P, axes=1)


def check_lyapunov_positivity(sys, cert, count=1000, seed=0) -> CheckReport:
    rng = np.random.Generator(np.random.PCG64(seed))
    worst, witness = np.inf, None
    for p in _sample_points(sys, count, rng):
        m = float(np.linalg.eigvalsh(_P_at(cert, weights_at(sys, p)))[0])
        if m < worst:
            worst, witness = m, {"p": p}
    passed = worst >= 1.0 - 1e-9
    return CheckReport("lyapunov_positivity", passed, worst - 1.0, None if passed else witness)


def check_proof_step(sys, cert, count=100, seed=0) -> CheckReport:
    """``X E P^{-1} E^T X^T - (X E + E^T X^T - P) >= 0`` at sampled parameters."""
    rng = np.random.Generator(np.random.PCG64(seed))
    slacks = cert.X.reshape((-1,) + cert.X.shape[-2:])
    worst, witness = np.inf, None
    for p in _sample_points(sys, count, rng):
        xi = weights_at(sys, p)
        E = evaluate(sys, xi).E
        P = _P_at(cert, xi)
        for idx, X in enumerate(slacks):
            XE = X @ E
            S = XE @ np.linalg.solve(P, XE.T) - (XE + XE.T - P)
            m = float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
            if m < worst:
                worst, witness = m, {"p": p, "slack_index": idx}
    passed = worst >= -1e-8
    return CheckReport("proof_step", passed, worst, None if passed else witness, {"count": count})


def quadratic_forms(sys, cert, gains, xi, xi_plus):
    """The certified form ``V`` and the slope-constraint form ``W`` in ``q = (e, phi~, v, w, psi)``."""
    nx, nphi, nv, nw = sys.n_x, sys.n_phi, sys.n_v, sys.n_w
    M = evaluate(sys, xi)
    E_plus = evaluate(sys, xi_plus).E
    L, K = gains.L_from_weights(xi, xi_plus), gains.K_from_weights(xi, xi_plus)
    P, P_plus = _P_at(cert, xi), _P_at(cert, xi_plus)
    Bq = np.hstack([M.A - L @ sys.C, M.G, -M.F, L @ sys.D, np.eye(nx)])
    EB = np.linalg.solve(E_plus, Bq)
    diag = np.zeros((Bq.shape[1],) * 2)
    edges = np.cumsum([0, nx, nphi, nv, nw, nx])
    diag[:nx, :nx] = P - np.eye(nx)
    for s, kappa in zip((2, 3, 4), (cert.kappa_v, cert.kappa_w, cert.kappa_psi)):
        diag[edges[s]:edges[s + 1], edges[s]:edges[s + 1]] = kappa * np.eye(edges[s + 1] - edges[s])
    V = diag - EB.T @ P_plus @ EB
    W = np.zeros_like(V)
    lam = sys.Lambda
    e_sl, f_sl, w_sl = slice(0, nx), slice(edges[1], edges[2]), slice(edges[3], edges[4])
    W[f_sl, e_sl] = lam @ (sys.H - K @ sys.C)
    W[e_sl, f_sl] = W[f_sl, e_sl].T
    W[f_sl, f_sl] = -2.0 * np.eye(nphi)
    W[f_sl, w_sl] = lam @ K @ sys.D
    W[w_sl, f_sl] = W[f_sl, w_sl].T
    return 0.5 * (V + V.T), W, edges


def check_s_procedure(sys, cert, count=1000, seed=0) -> CheckReport:
    """``q^T V q > 0`` for random ``q`` with ``q^T W q >= 0`` at random parameter pairs."""
    gains = ObserverGains(cert)
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = _sample_points(sys, 2 * count, rng)
    lam = sys.Lambda
    worst, witness, min_w = np.inf, None, np.inf
    for n in range(count):
        xi, xi_plus = weights_at(sys, pts[2 * n]), weights_at(sys, pts[2 * n + 1])
        V, W, edges = quadratic_forms(sys, cert, gains, xi, xi_plus)
        K = gains.K_from_weights(xi, xi_plus)
        q = rng.standard_normal(V.shape[0])
        e, w = q[:edges[1]], q[edges[3]:edges[4]]
        delta = (sys.H - K @ sys.C) @ e + K @ sys.D @ w
        center = lam @ delta / 2.0
        r = rng.standard_normal(sys.n_phi)
        nr = np.linalg.norm(r)
        if nr > 0:
            r *= rng.uniform() * np.linalg.norm(center) / nr
        q[edges[1]:edges[2]] = center + r
        min_w = min(min_w, float(q @ W @ q) / float(q @ q))
        val = float(q @ V @ q) / float(q @ q)
        if val < worst:
            worst, witness = val, {"q": q, "xi": xi, "xi_plus": xi_plus}
    passed = worst > 0
    return CheckReport("s_procedure", passed, worst, None if passed else witness,
                       {"count": count, "min_normalized_qWq": min_w})


# --- trajectory diagnostics ------------------------------------------------------

@dataclass
class ErrorDiagnostics:
    """Per-step quantities; ``psi``, ``phi_tilde`` and ``residual`` cover ``k = 0..horizon-1``."""

    psi: np.ndarray
    phi_tilde: np.ndarray
    V: np.ndarray
    residual: np.ndarray


def model_mismatch_psi(sys, traj: Trajectory) -> np.ndarray:
    """Mismatch terms collecting all differences between estimated and true matrices."""
    if len(traj) == 0:
        raise ModelError("trajectory has no samples")
    xi_p = weights_series(sys, traj.p)
    xi_h = weights_series(sys, traj.p_hat)
    Mp, Mh = _series(sys, xi_p), _series(sys, xi_h)
    d = {name: Mh[name] - Mp[name] for name in Mp}
    x, u, v = traj.x, traj.u, traj.v
    phix = sys.phi(x @ sys.H.T)
    mv = lambda M, a: np.einsum("kab,kb->ka", M, a)  # noqa: E731
    return (-mv(d["E"][1:], x[1:]) + mv(d["A"][:-1], x[:-1]) + mv(d["B"][:-1], u[:-1])
            + mv(d["G"][:-1], phix[:-1]) + mv(d["F"][:-1], v[:-1]))


def _gain_series(sys, gains, traj):
    xi_h = weights_series(sys, traj.p_hat)
    return xi_h, gains.L_series(xi_h[:-1], xi_h[1:]), gains.K_series(xi_h[:-1], xi_h[1:])


def nonlinearity_increment(sys, gains: ObserverGains, traj: Trajectory) -> np.ndarray:
    _, _, Ks = _gain_series(sys, gains, traj)
    e, w, x = traj.e[:-1], traj.w[:-1], traj.x[:-1]
    Hx = x @ sys.H.T
    KC = np.einsum("kab,bc->kac", Ks, sys.C)
    arg = Hx + np.einsum("kab,kb->ka", sys.H[None] - KC, e) + np.einsum("kab,bc,kc->ka", Ks, sys.D, w)
    return sys.phi(arg) - sys.phi(Hx)


def error_dynamics_step(sys, gains, traj: Trajectory, psi=None, phi_tilde=None) -> np.ndarray:
    """``e_{k+1}`` recomputed from the error recursion for every step."""
    psi = model_mismatch_psi(sys, traj) if psi is None else psi
    phi_tilde = nonlinearity_increment(sys, gains, traj) if phi_tilde is None else phi_tilde
    xi_h, Ls, _ = _gain_series(sys, gains, traj)
    Mh = _series(sys, xi_h)
    e, v, w = traj.e[:-1], traj.v[:-1], traj.w[:-1]
    LC = np.einsum("kab,bc->kac", Ls, sys.C)
    rhs = (np.einsum("kab,kb->ka", Mh["A"][:-1] - LC, e) + np.einsum("kab,kb->ka", Mh["G"][:-1], phi_tilde)
           - np.einsum("kab,kb->ka", Mh["F"][:-1], v) + np.einsum("kab,bc,kc->ka", Ls, sys.D, w) + psi)
    return np.linalg.solve(Mh["E"][1:], rhs[..., None])[..., 0]


def lyapunov_values(sys, cert, traj: Trajectory) -> np.ndarray:
    xi_h = weights_series(sys, traj.p_hat)
    P = np.einsum("kn,nab->kab", xi_h, cert.P)
    return np.einsum("ka,kab,kb->k", traj.e, P, traj.e)


def diagnostics(sys, cert, traj: Trajectory, gains: ObserverGains | None = None) -> ErrorDiagnostics:
    gains = gains or ObserverGains(cert)
    psi = model_mismatch_psi(sys, traj)
    phi_tilde = nonlinearity_increment(sys, gains, traj)
    V = lyapunov_values(sys, cert, traj)
    supply = (-np.sum(traj.e[:-1] ** 2, axis=1) + cert.kappa_v * np.sum(traj.v[:-1] ** 2, axis=1)
              + cert.kappa_w * np.sum(traj.w[:-1] ** 2, axis=1) + cert.kappa_psi * np.sum(psi**2, axis=1))
    return ErrorDiagnostics(psi, phi_tilde, V, np.diff(V) - supply)


def check_error_dynamics(sys, cert, traj, tol=1e-9) -> CheckReport:
    if len(traj) < 2:
        return CheckReport("error_dynamics", True, 0.0, details={"steps": 0})
    e_next = error_dynamics_step(sys, ObserverGains(cert), traj)
    err = np.abs(e_next - traj.e[1:]).max(axis=1)
    k = int(np.argmax(err))
    passed = err[k] <= tol * _magnitude_scale(traj)
    return CheckReport("error_dynamics", passed, float(err[k]), None if passed else {"k": k},
                       {"steps": len(traj) - 1})


def check_lyapunov_decrease(sys, cert, traj, slack=EQUALITY_TOL, diag: ErrorDiagnostics | None = None) -> CheckReport:
    if len(traj) < 2:
        return CheckReport("lyapunov_decrease", True, 0.0, details={"steps": 0, "violations": 0})
    diag = diag or diagnostics(sys, cert, traj)
    tol = slack * _magnitude_scale(traj)
    r = diag.residual
    k = int(np.argmax(r))
    violations = int(np.sum(r > tol))
    passed = violations == 0
    witness = None if passed else {"k": k, "V_k": diag.V[k], "V_next": diag.V[k + 1], "residual": r[k]}
    return CheckReport("lyapunov_decrease", passed, float(r[k]), witness,
                       {"steps": r.size, "violations": violations, "slack": tol})


def _running_sup(values):
    """``sup_{i <= k-1} values_i`` for each k, with the empty window equal to 0."""
    out = np.zeros(values.size + 1)
    if values.size:
        out[1:] = np.maximum.accumulate(values)
    return out


def iss_envelope(cert, bounds: IssBounds, traj: Trajectory, psi=None, V0=None, sys=None):
    """Upper bound on ``V_k`` for each ``k`` from the telescoped decrease condition."""
    psi = model_mismatch_psi(sys, traj) if psi is None else psi
    K = len(traj)
    sq = lambda a: np.sum(a**2, axis=1)  # noqa: E731
    sup_v = _running_sup(sq(traj.v[:K - 1]))[:K]
    sup_w = _running_sup(sq(traj.w[:K - 1]))[:K]
    sup_psi = _running_sup(sq(psi))[:K]
    a, rho = bounds.a_num, bounds.rho_num
    forcing = a * (cert.kappa_v * sup_v + cert.kappa_w * sup_w + cert.kappa_psi * sup_psi)
    return rho ** np.arange(K) * V0 + forcing


def check_iss_bound(sys, cert, traj, bounds: IssBounds, slack=INEQUALITY_SLACK,
                    diag: ErrorDiagnostics | None = None) -> CheckReport:
    if len(traj) == 0:
        return CheckReport("iss_bound", True, 0.0)
    diag = diag or diagnostics(sys, cert, traj)
    env = iss_envelope(cert, bounds, traj, diag.psi, diag.V[0])
    excess = diag.V - env - slack * np.maximum(1.0, env) * _magnitude_scale(traj)
    e2_excess = np.sum(traj.e**2, axis=1) - diag.V
    k = int(np.argmax(excess))
    passed = excess[k] <= 0 and e2_excess.max() <= EQUALITY_TOL * max(1.0, diag.V.max())
    witness = None if passed else {"k": k, "V_k": diag.V[k], "envelope": env[k]}
    return CheckReport("iss_bound", passed, float(excess[k]), witness,
                       {"a_num": bounds.a_num, "rho_num": bounds.rho_num,
                        "final_envelope": float(env[-1]), "final_V": float(diag.V[-1])})


# --- parameter mismatch sweep ---------------------------------------------------------

def steady_error(traj: Trajectory, tail_start):
    tail = traj.e[tail_start:]
    return float(np.linalg.norm(tail, axis=1).max()) if tail.size else 0.0


def check_parameter_mismatch_iss(runs, K_x, tail_start, noise_floor=None) -> CheckReport:
    """Empirical falsification test of a mismatch gain on runs ``[(|p~|, trajectory), ...]``.

    The fitted envelope is ``gamma(s) = floor + slope * s`` with the smallest
    nonnegative slope covering all runs; ``floor`` is the steady error of the
    smallest mismatch. The check fails if the runs are not ordered like a
    nondecreasing function within 1e-9, or if ``noise_floor`` is given and the
    zero-mismatch run exceeds it.
    """
    if not runs:
        raise ModelError("no runs given")
    for s, traj in runs:
        peak = float(np.linalg.norm(traj.x, axis=1).max())
        if peak > K_x:
            raise ModelError(f"state norm {peak:.4g} leaves the ball of radius {K_x} (mismatch {s})")
    runs = sorted(runs, key=lambda r: r[0])
    mags = np.array([r[0] for r in runs], dtype=float)
    errs = np.array([steady_error(r[1], tail_start) for r in runs])
    floor = errs[0]
    pos = mags > mags[0]
    slope = float(max(0.0, np.max((errs[pos] - floor) / (mags[pos] - mags[0])))) if pos.any() else 0.0
    drops = errs[:-1] - errs[1:] - 1e-9 * np.maximum(1.0, errs[1:])
    worst = float(drops.max()) if drops.size else -np.inf
    passed = worst <= 0
    witness = None
    if not passed:
        k = int(np.argmax(drops))
        witness = {"mismatch": [mags[k], mags[k + 1]], "steady_error": [errs[k], errs[k + 1]]}
    if noise_floor is not None and mags[0] == 0 and floor > noise_floor:
        passed = False
        witness = {"mismatch": 0.0, "steady_error": floor, "noise_floor": noise_floor}
        worst = max(worst, floor - noise_floor)
    return CheckReport("parameter_mismatch_iss", passed, worst, witness,
                       {"empirical": True, "mismatch": mags, "steady_error": errs,
                        "envelope": {"floor": floor, "slope": slope}})


def mismatch_sweep(sys, gains, scenario, p_true, offsets):
    """Runs with constant true parameter ``p_true`` and estimate ``p_true + offset``.

    Returns ``[(|offset|, trajectory), ...]``.
    """
    from dataclasses import replace

    from .observer import SignalSpec, simulate

    runs = []
    for off in offsets:
        off = np.asarray(off, dtype=float)
        sc = replace(scenario, p=SignalSpec("constant", value=list(map(float, p_true))),
                     p_hat=SignalSpec("constant", value=list(map(float, np.asarray(p_true) + off))))
        runs.append((float(np.linalg.norm(off)), simulate(sys, gains, sc)))
    return runs


# --- suites ------------------------------------------------------------------------

SUITES = ("assumptions", "certificate", "trajectory", "all")


@dataclass
class SuiteReport:
    suite: str
    reports: list

    @property
    def passed(self):
        return all(r.passed for r in self.reports)

    @property
    def exit_code(self):
        return 0 if self.passed else 5

    def to_dict(self):
        return {"suite": self.suite, "passed": self.passed, "reports": [r.to_dict() for r in self.reports]}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def run_suite(suite, sys, cert=None, trajectory=None, seed=0) -> SuiteReport:
    if suite not in SUITES:
        raise ModelError(f"unknown suite {suite!r}; expected one of {SUITES}")
    reports = []
    if suite in ("assumptions", "all"):
        reports.append(check_slope_restriction(sys.nonlinearity, sys.Lambda, seed=seed)
                       if sys.n_phi else CheckReport("slope_restriction", True, 0.0))
        reports += [check_partition_of_unity(sys, seed=seed), check_vertex_unit(sys), check_descriptor_regular(sys)]
    if suite in ("certificate", "all"):
        if cert is None:
            raise ModelError("the certificate suite needs a certificate")
        reports += [check_certificate_blocks(sys, cert), check_lyapunov_positivity(sys, cert, seed=seed),
                    check_proof_step(sys, cert, seed=seed), check_s_procedure(sys, cert, seed=seed)]
    if suite in ("trajectory", "all") and (trajectory is not None or suite == "trajectory"):
        if cert is None or trajectory is None:
            raise ModelError("the trajectory suite needs a certificate and a trajectory")
        diag = diagnostics(sys, cert, trajectory)
        sigma = check_descriptor_regular(sys).worst_margin
        bounds = iss_bounds(cert, sigma)
        reports += [check_error_dynamics(sys, cert, trajectory),
                    check_lyapunov_decrease(sys, cert, trajectory, diag=diag),
                    check_iss_bound(sys, cert, trajectory, bounds, diag=diag)]
    return SuiteReport(suite, reports)
