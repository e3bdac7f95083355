"""Small dense semidefinite programs in LMI form.

    minimize    c^T z
    subject to  F_b(z) = C_b + sum_k z_k A_bk  >=  eps_b I,   b = 1..B

The solver is a primal-dual interior-point method on the homogeneous
self-dual embedding of the conic pair

    primal:  min c^T x   s.t.  G x + s = h,  s in K
    dual:    max -h^T z  s.t.  G^T z + c = 0, z in K

with ``G x = -sum_k x_k A_k``, ``h = C - eps I`` and ``K`` the product of PSD
cones. Search directions use Nesterov-Todd scaling and a Mehrotra
predictor-corrector. All linear algebra is dense.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ModelError

logger = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITER = "MaxIter"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass(frozen=True, eq=False)
class SdpBlock:
    constant: np.ndarray
    coeffs: np.ndarray
    margin: float = 0.0
    name: str = ""

    def __post_init__(self):
        C = np.array(self.constant, dtype=float)
        A = np.array(self.coeffs, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ModelError(f"block {self.name!r}: constant must be square, got {C.shape}")
        if A.ndim != 3 or A.shape[1:] != C.shape:
            raise ModelError(f"block {self.name!r}: coefficients must have shape (n, {C.shape[0]}, {C.shape[0]})")
        if not np.allclose(C, C.T, rtol=0, atol=1e-12) or not np.allclose(A, A.transpose(0, 2, 1), rtol=0, atol=1e-12):
            raise ModelError(f"block {self.name!r}: matrices must be symmetric")
        if self.margin < 0:
            raise ModelError(f"block {self.name!r}: margin must be nonnegative")
        for arr in (C, A):
            arr.setflags(write=False)
        object.__setattr__(self, "constant", C)
        object.__setattr__(self, "coeffs", A)

    @property
    def size(self):
        return self.constant.shape[0]

    def value(self, z):
        return self.constant + np.tensordot(z, self.coeffs, axes=1)


@dataclass(frozen=True, eq=False)
class SdpProblem:
    objective: np.ndarray
    blocks: tuple

    def __post_init__(self):
        c = np.array(self.objective, dtype=float).reshape(-1)
        c.setflags(write=False)
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for b in self.blocks:
            if b.coeffs.shape[0] != c.size:
                raise ModelError(f"block {b.name!r} has {b.coeffs.shape[0]} coefficient matrices, expected {c.size}")

    @property
    def num_vars(self):
        return self.objective.size

    def values(self, z):
        return [b.value(z) for b in self.blocks]


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 100
    step: float = 0.99
    stall_iters: int = 20


@dataclass
class SdpSolution:
    status: Status
    z: np.ndarray
    objective_value: float
    min_block_eig: np.ndarray
    iterations: int
    primal_residual: float = np.nan
    dual_residual: float = np.nan
    gap: float = np.nan
    dual: list = field(default_factory=list, repr=False)

    @property
    def ok(self):
        return self.status is Status.OPTIMAL


@dataclass
class ResidualReport:
    objective_value: float
    min_block_eig: np.ndarray
    margins: np.ndarray

    @property
    def feasible(self):
        return bool(np.all(self.min_block_eig >= self.margins - 1e-7))

    @property
    def worst(self):
        if self.min_block_eig.size == 0:
            return np.inf
        return float(np.min(self.min_block_eig - self.margins))


def check_solution(problem: SdpProblem, z) -> ResidualReport:
    """Objective and per-block minimum eigenvalue of ``F_b(z)``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (problem.num_vars,):
        raise ModelError(f"expected {problem.num_vars} variables, got shape {z.shape}")
    eigs = np.array([np.linalg.eigvalsh(F)[0] for F in problem.values(z)])
    margins = np.array([b.margin for b in problem.blocks])
    return ResidualReport(float(problem.objective @ z), eigs, margins)


# --- interior-point machinery ---------------------------------------------

def _sym(X):
    return 0.5 * (X + X.T)


def _factor(S):
    """Any ``L`` with ``L L^T = S`` for symmetric positive definite ``S``."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(_sym(S))
        if w[0] <= 0:
            raise
        return Q * np.sqrt(w)


def _nt_scaling(s, z):
    """``R`` with ``R^{-1} s R^{-T} = R^T z R = diag(lam)``; returns R, R^{-1}, lam."""
    Ls, Lz = _factor(s), _factor(z)
    U, lam, Vt = np.linalg.svd(Lz.T @ Ls)
    r = lam ** -0.5
    R = (Ls @ Vt.T) * r
    Rinv = (r[:, None] * U.T) @ Lz.T
    return R, Rinv, lam


def _max_step(lam, d):
    """Largest ``a`` with ``diag(lam) + a d >= 0`` (inf if unbounded)."""
    r = lam ** -0.5
    m = np.linalg.eigvalsh(_sym(r[:, None] * d * r[None, :]))[0]
    return np.inf if m >= 0 else -1.0 / m


def _inner(Xs, Ys):
    return sum(float(np.vdot(X, Y)) for X, Y in zip(Xs, Ys))


def _interior_shift(Ms):
    lam_min = min(np.linalg.eigvalsh(_sym(M))[0] for M in Ms)
    nrm = np.sqrt(_inner(Ms, Ms))
    if lam_min <= 1e-8 * max(nrm, 1.0):
        shift = 1.0 - lam_min
        Ms = [M + shift * np.eye(M.shape[0]) for M in Ms]
    return Ms


class _Cone:
    """Block data bound to one problem: ``h_b`` and flattened ``A_b``."""

    def __init__(self, problem):
        n = problem.num_vars
        self.n = n
        self.sizes = [b.size for b in problem.blocks]
        self.h = [b.constant - b.margin * np.eye(b.size) for b in problem.blocks]
        self.A = [b.coeffs for b in problem.blocks]
        self.degree = sum(self.sizes)

    def op(self, x):
        """``sum_k x_k A_k`` per block."""
        return [np.tensordot(x, A, axes=1) for A in self.A]

    def adj(self, Zs):
        """``[<A_k, Z>]_k`` summed over blocks."""
        return sum(A.reshape(self.n, -1) @ Z.reshape(-1) for A, Z in zip(self.A, Zs))


def _solve_spd(M, rhs=None):
    try:
        cf = scipy.linalg.cho_factor(M, check_finite=False)
        return lambda r: scipy.linalg.cho_solve(cf, r, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        pass
    reg = 1e-14 * max(np.trace(M) / M.shape[0], 1.0)
    try:
        cf = scipy.linalg.cho_factor(M + reg * np.eye(M.shape[0]), check_finite=False)
        return lambda r: scipy.linalg.cho_solve(cf, r, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        lu = scipy.linalg.lu_factor(M, check_finite=False)
        return lambda r: scipy.linalg.lu_solve(lu, r, check_finite=False)


def solve(problem: SdpProblem, opts: SolverOptions | None = None) -> SdpSolution:
    """Minimize ``c^T z`` subject to every block ``F_b(z) >= eps_b I``."""
    opts = opts or SolverOptions()
    if opts.tol <= 0:
        raise ModelError("tol must be positive")
    c = problem.objective
    n = problem.num_vars

    def finish(status, x, iters, pres=np.nan, dres=np.nan, gap=np.nan, dual=()):
        report = check_solution(problem, x)
        return SdpSolution(status, x, report.objective_value, report.min_block_eig, iters,
                           pres, dres, gap, list(dual))

    if not problem.blocks:
        status = Status.OPTIMAL if not np.any(c) else Status.UNBOUNDED
        return finish(status, np.zeros(n), 0)

    cone = _Cone(problem)
    used = np.zeros(n, dtype=bool)
    for A in cone.A:
        used |= np.any(A.reshape(n, -1) != 0, axis=1)
    if not used.all():
        raise ModelError(f"variables {np.flatnonzero(~used).tolist()} appear in no block")

    h = cone.h
    resx0 = max(1.0, np.linalg.norm(c))
    resz0 = max(1.0, np.sqrt(_inner(h, h)))

    # Least-squares starting point, shifted into the cone interior.
    Af = [A.reshape(n, -1) for A in cone.A]
    GtG = sum(a @ a.T for a in Af)
    gsolve = _solve_spd(GtG, None)
    x = gsolve(-cone.adj(h))
    s = _interior_shift([_sym(hb + Ab) for hb, Ab in zip(h, cone.op(x))])
    z = _interior_shift([_sym(Z) for Z in cone.op(gsolve(c))])
    tau = kappa = 1.0

    stall = 0
    mu_prev = np.inf
    pres = dres = gap = np.nan
    for it in range(opts.max_iter + 1):
        Ax = cone.op(x)
        Atz = cone.adj(z)
        rx = -Atz + c * tau
        rz = [sb - Ab - hb * tau for sb, Ab, hb in zip(s, Ax, h)]
        cx, hz = float(c @ x), _inner(h, z)
        rt = kappa + cx + hz
        gap = _inner(s, z)
        mu = (gap + tau * kappa) / (cone.degree + 1)
        pres = np.sqrt(_inner(rz, rz)) / tau / resz0
        dres = np.linalg.norm(rx) / tau / resx0
        pcost, dcost = cx / tau, -hz / tau
        abs_gap = gap / tau**2
        denom = max(abs(pcost), abs(dcost))
        rel_gap = abs_gap / denom if denom > 0 else np.inf
        logger.debug("it=%d pcost=%.8e dcost=%.8e gap=%.2e pres=%.2e dres=%.2e tau=%.2e kappa=%.2e",
                     it, pcost, dcost, abs_gap, pres, dres, tau, kappa)
        # The dual iterate loses accuracy once the scaling grows, so its
        # residual only has to reach sqrt(tol); the primal point is what gets used.
        if pres <= opts.tol and dres <= np.sqrt(opts.tol) and (abs_gap <= opts.tol or rel_gap <= opts.tol):
            return finish(Status.OPTIMAL, x / tau, it, pres, dres, abs_gap, [Z / tau for Z in z])
        if hz < 0 and np.linalg.norm(Atz) / resx0 / (-hz) <= opts.tol:
            return finish(Status.INFEASIBLE, x / tau, it, pres, dres, abs_gap, z)
        if cx < 0:
            hrz = [sb - Ab for sb, Ab in zip(s, Ax)]
            if np.sqrt(_inner(hrz, hrz)) / resz0 / (-cx) <= opts.tol:
                return finish(Status.UNBOUNDED, x / tau, it, pres, dres, abs_gap)
        if it == opts.max_iter:
            break
        if pres > 1e-3 and mu > 0.99 * mu_prev:
            stall += 1
            if stall >= opts.stall_iters:
                logger.info("barrier stalled with primal residual %.2e", pres)
                return finish(Status.INFEASIBLE, x / tau, it, pres, dres, abs_gap)
        else:
            stall = 0
        mu_prev = mu

        try:
            scal = [_nt_scaling(sb, zb) for sb, zb in zip(s, z)]
            At = [Rinv @ A @ Rinv.T for (_, Rinv, _), A in zip(scal, cone.A)]
            ht = [Rinv @ hb @ Rinv.T for (_, Rinv, _), hb in zip(scal, h)]
            M = sum(a.reshape(n, -1) @ a.reshape(n, -1).T for a in At)
            msolve = _solve_spd(M, None)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, FloatingPointError) as exc:
            logger.info("factorization failed at iteration %d: %s", it, exc)
            return finish(Status.NUMERICAL_FAILURE, x / tau, it, pres, dres, abs_gap)
        lams = [lam for _, _, lam in scal]
        g = -sum(a.reshape(n, -1) @ hb.reshape(-1) for a, hb in zip(At, ht))
        Mc_minus = msolve(c - g)
        cg_plus = c + g
        # (c+g)^T M^{-1} (c-g) + <h,h> equals c^T M^{-1} c plus the squared
        # residual of projecting h onto the range of A; summing those avoids
        # cancellation once the scaled data grows large.
        Mg = msolve(g)
        proj = [hb + np.tensordot(Mg, a, axes=1) for hb, a in zip(ht, At)]
        denom_t = float(c @ msolve(c)) + _inner(proj, proj) + kappa / tau

        def direction(eta, rcs, rk):
            scaled_rz = [Rinv @ r @ Rinv.T for (_, Rinv, _), r in zip(scal, rz)]
            qt = [2.0 * rc / (lam[:, None] + lam[None, :]) + (1.0 - eta) * srz
                  for rc, lam, srz in zip(rcs, lams, scaled_rz)]
            r1 = -(1.0 - eta) * rx + sum(a.reshape(n, -1) @ q.reshape(-1) for a, q in zip(At, qt))
            r2 = -(1.0 - eta) * rt - rk / tau - _inner(ht, qt)
            Mr1 = msolve(r1)
            dtau = (cg_plus @ Mr1 - r2) / denom_t
            dx = Mr1 - Mc_minus * dtau
            dzt = [q - np.tensordot(dx, a, axes=1) - hb * dtau for q, a, hb in zip(qt, At, ht)]
            dst = [2.0 * rc / (lam[:, None] + lam[None, :]) - d for rc, lam, d in zip(rcs, lams, dzt)]
            dkappa = (rk - kappa * dtau) / tau
            return dx, dst, dzt, dtau, dkappa

        def max_step(dst, dzt, dtau, dkappa):
            a = np.inf
            for lam, ds_, dz_ in zip(lams, dst, dzt):
                a = min(a, _max_step(lam, ds_), _max_step(lam, dz_))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        # Predictor.
        rcs = [-np.diag(lam**2) for lam in lams]
        aff = direction(0.0, rcs, -tau * kappa)
        alpha_aff = min(1.0, max_step(*aff[1:]))
        sigma = (1.0 - alpha_aff) ** 3

        # Corrector.
        _, dst_a, dzt_a, dtau_a, dkappa_a = aff
        rcs = [-np.diag(lam**2) - _sym(ds_ @ dz_) + sigma * mu * np.eye(lam.size)
               for lam, ds_, dz_ in zip(lams, dst_a, dzt_a)]
        rk = -tau * kappa - dtau_a * dkappa_a + sigma * mu
        dx, dst, dzt, dtau, dkappa = direction(sigma, rcs, rk)
        alpha = min(1.0, opts.step * max_step(dst, dzt, dtau, dkappa))

        x = x + alpha * dx
        s = [_sym(sb + alpha * (R @ d @ R.T)) for sb, (R, _, _), d in zip(s, scal, dst)]
        z = [_sym(zb + alpha * (Rinv.T @ d @ Rinv)) for zb, (_, Rinv, _), d in zip(z, scal, dzt)]
        tau += alpha * dtau
        kappa += alpha * dkappa
        if not (np.isfinite(tau) and np.isfinite(kappa) and np.all(np.isfinite(x))):
            return finish(Status.NUMERICAL_FAILURE, x / tau, it + 1, pres, dres, abs_gap)

    return finish(Status.MAX_ITER, x / tau, opts.max_iter, pres, dres, gap / tau**2)


# --- SDPA sparse format ------------------------------------------------------

def write_sdpa(problem: SdpProblem, path, comment="polyobs"):
    """Write the problem in SDPA sparse format.

    SDPA solves ``min c^T x  s.t.  sum_k F_k x_k - F_0 >= 0``, so
    ``F_k = A_k`` and ``F_0 = -(C - eps I)``.
    """
    lines = [f'"{comment}', str(problem.num_vars), str(len(problem.blocks)),
             " ".join(str(b.size) for b in problem.blocks),
             " ".join(repr(float(v)) for v in problem.objective)]
    for bi, b in enumerate(problem.blocks, start=1):
        F0 = -(b.constant - b.margin * np.eye(b.size))
        mats = [(0, F0)] + [(k + 1, b.coeffs[k]) for k in range(problem.num_vars)]
        for k, F in mats:
            rows, cols = np.nonzero(np.triu(F))
            for i, j in zip(rows, cols):
                lines.append(f"{k} {bi} {i + 1} {j + 1} {float(F[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sdpa(path) -> SdpProblem:
    """Read an SDPA sparse file back; block margins come out as zero."""
    raw = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    raw = [ln for ln in raw if ln and not ln.startswith(('"', "*"))]
    m = int(raw[0].split()[0])
    nblocks = int(raw[1].split()[0])
    sizes = [abs(int(t)) for t in raw[2].replace(",", " ").replace("{", " ").replace("}", " ").split()[:nblocks]]
    c = np.array([float(t) for t in raw[3].replace(",", " ").replace("{", " ").replace("}", " ").split()[:m]])
    F = [np.zeros((m + 1, sz, sz)) for sz in sizes]
    for ln in raw[4:]:
        k, b, i, j, v = ln.split()[:5]
        k, b, i, j, v = int(k), int(b) - 1, int(i) - 1, int(j) - 1, float(v)
        F[b][k, i, j] = v
        F[b][k, j, i] = v
    blocks = [SdpBlock(constant=-Fb[0], coeffs=Fb[1:], name=f"block{bi + 1}") for bi, Fb in enumerate(F)]
    return SdpProblem(c, blocks)
