"""Observer synthesis by LMI conditions over vertex pairs.

For every ordered vertex pair ``(i, j)`` (``i`` indexes the current parameter
estimate, ``j`` the next one) a symmetric block is required to be positive
definite. Its row/column slots are ``[e, e, phi, v, w, psi]`` with sizes
``[n_x, n_x, n_phi, n_v, n_w, n_x]`` and lower-triangular entries::

    (1,1) X E_j + E_j^T X^T - P_j      (2,1) (X A_i - Y_ij C)^T      (2,2) P_i - I
    (3,1) -(X G_i)^T                   (3,2) Lambda (T_ij H - Z_ij C) (3,3) 2 T_ij
    (4,1) -(X F_i)^T                   (4,4) kappa_v I
    (5,1) (Y_ij D)^T                   (5,3) (Lambda Z_ij D)^T        (5,5) kappa_w I
    (6,1) X^T                          (6,6) kappa_psi I

The shared-slack variant uses ``X = X_i`` and arbitrary ``E_j``; the
pair-slack variant uses ``X = X_ij`` and needs a constant descriptor matrix.
``T_ij`` is ``tau_ij I`` or, with diagonal multipliers, a positive diagonal.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sdp
from .errors import CertificateCheckFailed, Infeasible, ModelError, NonConstantE, SynthesisError
from .model import PolytopicDescriptorSystem, min_singular_value_E

logger = logging.getLogger(__name__)

VARIANTS = ("thm1", "thm2")
DEFAULT_EPSILON = 1e-6
KAPPA_MAX = 1e9
BLOCK_TOL = 1e-7


@dataclass(frozen=True)
class ObjectiveWeights:
    c_v: float
    c_w: float
    c_psi: float

    def __post_init__(self):
        vals = np.array([self.c_v, self.c_w, self.c_psi], dtype=float)
        if not np.all(np.isfinite(vals)) or vals.min() < 0 or vals.sum() <= 0:
            raise ModelError(f"weights must be nonnegative and not all zero, got {vals.tolist()}")

    @classmethod
    def parse(cls, value):
        if isinstance(value, ObjectiveWeights):
            return value
        if isinstance(value, str):
            value = [float(t) for t in value.split(",")]
        vals = list(value)
        if len(vals) != 3:
            raise ModelError(f"expected three weights, got {vals}")
        return cls(*map(float, vals))

    def normalized(self):
        total = self.c_v + self.c_w + self.c_psi
        return ObjectiveWeights(self.c_v / total, self.c_w / total, self.c_psi / total)

    def as_array(self):
        return np.array([self.c_v, self.c_w, self.c_psi])

    def floored(self, rel=1e-6):
        """Normalized weights with every entry at least ``rel`` times the largest.

        A zero weight leaves its kappa unpriced, and the interior point then
        drifts it towards ``kappa_max``, which ruins the scaling.
        """
        w = self.as_array()
        w = np.maximum(w, rel * w.max())
        return ObjectiveWeights(*(w / w.sum()))


CASE_STUDY_WEIGHTS = ObjectiveWeights(1 / 6.01, 5 / 6.01, 0.01 / 6.01)


# --- decision-variable layout -----------------------------------------------

def _svec_len(n):
    return n * (n + 1) // 2


def _smat(vec, n):
    S = np.zeros((n, n))
    S[np.triu_indices(n)] = vec
    return S + np.triu(S, 1).T


@dataclass
class VariableLayout:
    """Maps the flat SDP vector to the structured decision variables."""

    n_x: int
    n_y: int
    n_phi: int
    N: int
    variant: str
    pairs: tuple
    diagonal: bool = False
    slots: dict = field(init=False, repr=False)
    size: int = field(init=False)

    def __post_init__(self):
        self.pairs = tuple(tuple(p) for p in self.pairs)
        slots, offset = {}, 0

        def add(key, length):
            nonlocal offset
            slots[key] = slice(offset, offset + length)
            offset += length

        for i in range(self.N):
            add(("P", i), _svec_len(self.n_x))
        if self.variant == "thm1":
            for i in range(self.N):
                add(("X", i), self.n_x**2)
        else:
            for p in self.pairs:
                add(("X", p), self.n_x**2)
        for p in self.pairs:
            add(("Y", p), self.n_x * self.n_y)
        for p in self.pairs:
            add(("Z", p), self.n_phi * self.n_y)
        for p in self.pairs:
            add(("tau", p), self.n_phi if self.diagonal else min(self.n_phi, 1))
        for name in ("kappa_v", "kappa_w", "kappa_psi"):
            add((name,), 1)
        self.slots = slots
        self.size = offset

    def index(self, *key):
        return self.slots[key]

    def decode(self, z):
        z = np.asarray(z, dtype=float)
        nx, ny, nphi = self.n_x, self.n_y, self.n_phi
        out = {"P": {}, "X": {}, "Y": {}, "Z": {}, "T": {}}
        for key, sl in self.slots.items():
            name, rest = key[0], key[1:]
            val = z[sl]
            if name == "P":
                out["P"][rest[0]] = _smat(val, nx)
            elif name == "X":
                out["X"][rest[0]] = val.reshape(nx, nx)
            elif name == "Y":
                out["Y"][rest[0]] = val.reshape(nx, ny)
            elif name == "Z":
                out["Z"][rest[0]] = val.reshape(nphi, ny)
            elif name == "tau":
                out["T"][rest[0]] = np.diag(val) if self.diagonal or not nphi else val[0] * np.eye(nphi)
            else:
                out[name] = float(val[0])
        return out


def lmi_block(sys: PolytopicDescriptorSystem, i, j, P_i, P_j, X, Y, Z, T, kappa_v, kappa_w, kappa_psi):
    """The symmetric block for vertex pair ``(i, j)`` in plain numpy."""
    nx, nphi, nv, nw = sys.n_x, sys.n_phi, sys.n_v, sys.n_w
    Vi, Ej = sys.vertices[i], sys.vertices[j].E
    lam, H, C, D = sys.Lambda, sys.H, sys.C, sys.D
    sizes = [nx, nx, nphi, nv, nw, nx]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    M = np.zeros((edges[-1], edges[-1]))

    def put(r, c, block):
        M[edges[r]:edges[r + 1], edges[c]:edges[c + 1]] = block
        if r != c:
            M[edges[c]:edges[c + 1], edges[r]:edges[r + 1]] = block.T

    XE = X @ Ej
    put(0, 0, XE + XE.T - P_j)
    put(1, 0, (X @ Vi.A - Y @ C).T)
    put(1, 1, P_i - np.eye(nx))
    put(2, 0, -(X @ Vi.G).T)
    put(2, 1, lam @ (T @ H - Z @ C))
    put(2, 2, 2.0 * T)
    put(3, 0, -(X @ Vi.F).T)
    put(3, 3, kappa_v * np.eye(nv))
    put(4, 0, (Y @ D).T)
    put(4, 2, (lam @ Z @ D).T)
    put(4, 4, kappa_w * np.eye(nw))
    put(5, 0, X.T)
    put(5, 5, kappa_psi * np.eye(nx))
    return 0.5 * (M + M.T)


def _pair_slack(variant, X, i, j):
    return X[i] if variant == "thm1" else X[(i, j)]


def pair_blocks(sys, variant, values, pairs):
    """All pair blocks evaluated at decoded variables ``values``."""
    return [lmi_block(sys, i, j, values["P"][i], values["P"][j], _pair_slack(variant, values["X"], i, j),
                      values["Y"][(i, j)], values["Z"][(i, j)], values["T"][(i, j)],
                      values["kappa_v"], values["kappa_w"], values["kappa_psi"])
            for i, j in pairs]


@dataclass
class BuiltProblem:
    problem: sdp.SdpProblem
    layout: VariableLayout
    weights: ObjectiveWeights
    epsilon: float
    kappa_max: float


def _check_build_args(sys, variant, epsilon, diagonal):
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not epsilon >= 0:
        raise ModelError("epsilon must be nonnegative")
    if variant == "thm2" and not sys.has_constant_E(1e-12):
        raise NonConstantE("the pair-slack conditions need identical descriptor matrices at all vertices")
    if diagonal and sys.n_phi and np.abs(sys.Lambda - np.diag(np.diag(sys.Lambda))).max() > 0:
        raise ModelError("diagonal multipliers need a diagonal slope bound")


def build(sys: PolytopicDescriptorSystem, variant="thm1", weights=CASE_STUDY_WEIGHTS,
          epsilon=DEFAULT_EPSILON, *, constant_parameter=False, diagonal_multipliers=False,
          kappa_max=KAPPA_MAX) -> BuiltProblem:
    _check_build_args(sys, variant, epsilon, diagonal_multipliers)
    weights = ObjectiveWeights.parse(weights).floored()
    N = sys.N
    pairs = [(i, i) for i in range(N)] if constant_parameter else [(i, j) for i in range(N) for j in range(N)]
    layout = VariableLayout(sys.n_x, sys.n_y, sys.n_phi, N, variant, pairs, diagonal_multipliers)
    n = layout.size

    # Each block is affine in z: probe the constant term and every unit direction.
    base = pair_blocks(sys, variant, layout.decode(np.zeros(n)), pairs)
    coeffs = [np.empty((n,) + B.shape) for B in base]
    unit = np.zeros(n)
    for k in range(n):
        unit[k] = 1.0
        for b, B in enumerate(pair_blocks(sys, variant, layout.decode(unit), pairs)):
            coeffs[b][k] = B - base[b]
        unit[k] = 0.0
    blocks = [sdp.SdpBlock(B0, A, epsilon, name=f"pair{i + 1}{j + 1}")
              for (i, j), B0, A in zip(pairs, base, coeffs)]
    for name in ("kappa_v", "kappa_w", "kappa_psi"):
        A = np.zeros((n, 1, 1))
        A[layout.index(name).start] = -1.0
        blocks.append(sdp.SdpBlock(np.array([[kappa_max]]), A, 0.0, name=f"{name}_max"))

    c = np.zeros(n)
    for name, w in zip(("kappa_v", "kappa_w", "kappa_psi"), weights.as_array()):
        c[layout.index(name).start] = w
    return BuiltProblem(sdp.SdpProblem(c, blocks), layout, weights, float(epsilon), float(kappa_max))


def build_thm1(sys, weights=CASE_STUDY_WEIGHTS, epsilon=DEFAULT_EPSILON, **kw):
    return build(sys, "thm1", weights, epsilon, **kw)


def build_thm2(sys, weights=CASE_STUDY_WEIGHTS, epsilon=DEFAULT_EPSILON, **kw):
    return build(sys, "thm2", weights, epsilon, **kw)


# --- certificates -------------------------------------------------------------

@dataclass
class SynthesisCertificate:
    """Decision variables of a solved synthesis problem.

    ``X`` has shape ``(N, n_x, n_x)`` for thm1 and ``(N, N, n_x, n_x)`` for
    thm2. ``Y, Z, tau`` are indexed ``[i, j]``; ``tau[i, j]`` holds the
    multiplier diagonal (all entries equal unless diagonal multipliers were
    used). In constant-parameter mode only ``(i, i)`` pairs are constrained
    and the off-diagonal pair entries copy row ``i``'s diagonal.
    """

    variant: str
    P: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    tau: np.ndarray
    kappa_v: float
    kappa_w: float
    kappa_psi: float
    epsilon: float = DEFAULT_EPSILON
    constant_parameter: bool = False
    diagonal_multipliers: bool = False
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("P", "X", "Y", "Z", "tau"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}")

    @property
    def N(self):
        return self.P.shape[0]

    @property
    def pairs(self):
        N = self.N
        return [(i, i) for i in range(N)] if self.constant_parameter else [(i, j) for i in range(N) for j in range(N)]

    def T(self, i, j):
        return np.diag(self.tau[i, j])

    def slack(self, i, j):
        return self.X[i] if self.variant == "thm1" else self.X[i, j]

    def values(self):
        """Decoded-variable dictionary as consumed by :func:`pair_blocks`."""
        N = self.N
        pairs = [(i, j) for i in range(N) for j in range(N)]
        X = {i: self.X[i] for i in range(N)} if self.variant == "thm1" else {p: self.X[p] for p in pairs}
        return {"P": {i: self.P[i] for i in range(N)}, "X": X,
                "Y": {p: self.Y[p] for p in pairs}, "Z": {p: self.Z[p] for p in pairs},
                "T": {p: self.T(*p) for p in pairs},
                "kappa_v": self.kappa_v, "kappa_w": self.kappa_w, "kappa_psi": self.kappa_psi}

    def gains_L(self):
        """Vertex gains ``L_ij = X^{-1} Y_ij`` (thm1 only)."""
        if self.variant != "thm1":
            raise ModelError("vertex gains L_ij are defined for the shared-slack variant only")
        N = self.N
        return np.array([[np.linalg.solve(self.X[i], self.Y[i, j]) for j in range(N)] for i in range(N)])

    def with_P_scaled(self, factor, index=None):
        P = self.P.copy()
        if index is None:
            P *= factor
        else:
            P[index] *= factor
        return SynthesisCertificate(**{**self.__dict__, "P": P})

    def to_dict(self):
        doc = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return doc

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ModelError(f"malformed certificate document: {exc}") from exc

    def digest(self):
        """Hash of the decision variables (solver statistics excluded)."""
        doc = {k: v for k, v in self.to_dict().items() if k != "stats"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def embed_shared_slack(cert: SynthesisCertificate) -> SynthesisCertificate:
    """Repack a thm1 certificate as a thm2 one with ``X_ij := X_i``."""
    if cert.variant != "thm1":
        raise ModelError("embedding expects a thm1 certificate")
    N = cert.N
    X = np.repeat(cert.X[:, None], N, axis=1)
    return SynthesisCertificate(**{**cert.__dict__, "variant": "thm2", "X": X})


def _from_solution(layout, values, epsilon, constant_parameter, diagonal, stats):
    N, nx, ny, nphi = layout.N, layout.n_x, layout.n_y, layout.n_phi
    P = np.array([values["P"][i] for i in range(N)])
    Y = np.zeros((N, N, nx, ny))
    Z = np.zeros((N, N, nphi, ny))
    tau = np.zeros((N, N, nphi))
    X = np.zeros((N, nx, nx)) if layout.variant == "thm1" else np.zeros((N, N, nx, nx))
    for i in range(N):
        for j in range(N):
            src = (i, i) if constant_parameter else (i, j)
            Y[i, j], Z[i, j] = values["Y"][src], values["Z"][src]
            tau[i, j] = np.diag(values["T"][src])
            if layout.variant == "thm2":
                X[i, j] = values["X"][src]
        if layout.variant == "thm1":
            X[i] = values["X"][i]
    return SynthesisCertificate(layout.variant, P, X, Y, Z, tau, values["kappa_v"], values["kappa_w"],
                                values["kappa_psi"], epsilon, constant_parameter, diagonal, stats)


@dataclass
class CertificateCheck:
    block_min_eigs: np.ndarray
    P_min_eig: float
    X_min_singular: float
    tau_min: float
    kappa_psi_sigma2: float
    epsilon: float
    problems: list

    @property
    def ok(self):
        return not self.problems


def check_certificate(sys: PolytopicDescriptorSystem, cert: SynthesisCertificate, sigma_lower=None,
                      tol=BLOCK_TOL) -> CertificateCheck:
    """Re-substitute a certificate into its blocks and test the invariants."""
    if cert.N != sys.N:
        raise ModelError(f"certificate has {cert.N} vertices, model has {sys.N}")
    if cert.variant == "thm2" and not sys.has_constant_E(1e-12):
        raise NonConstantE("pair-slack certificate for a model with varying descriptor matrix")
    eps = cert.epsilon
    blocks = pair_blocks(sys, cert.variant, cert.values(), cert.pairs)
    eigs = np.array([np.linalg.eigvalsh(B)[0] for B in blocks])
    p_min = float(min(np.linalg.eigvalsh(P)[0] for P in cert.P))
    Xs = cert.X.reshape(-1, sys.n_x, sys.n_x)
    x_min = float(min(np.linalg.svd(X, compute_uv=False)[-1] for X in Xs))
    tau_min = float(cert.tau.min()) if cert.tau.size else np.inf
    if sigma_lower is None:
        sigma_lower = _sigma_lower(sys)
    ks2 = cert.kappa_psi * sigma_lower**2
    problems = []
    if eigs.size and eigs.min() < eps - tol:
        k = int(np.argmin(eigs))
        problems.append(f"block {cert.pairs[k]} has min eigenvalue {eigs[k]:.3e} < eps - tol")
    if p_min < 1.0 + eps / 2:
        problems.append(f"min eig of P_i is {p_min:.9g}, need >= 1 + eps/2")
    if x_min <= 1e-12 * max(1.0, np.abs(Xs).max()):
        problems.append("a slack matrix X is singular")
    if sys.n_phi and not tau_min > 0:
        problems.append(f"multiplier tau has nonpositive entry {tau_min:.3e}")
    if not ks2 > 1:
        problems.append(f"kappa_psi * sigma^2 = {ks2:.6g} <= 1")
    return CertificateCheck(eigs, p_min, x_min, tau_min, ks2, eps, problems)


def _sigma_lower(sys):
    if sys.coordinate_map is not None and sys.coordinate_map.lower is not None:
        return min_singular_value_E(sys)[0]
    return float(min(np.linalg.svd(v.E, compute_uv=False)[-1] for v in sys.vertices))


def synthesize(sys: PolytopicDescriptorSystem, variant="thm1", weights=CASE_STUDY_WEIGHTS,
               epsilon=DEFAULT_EPSILON, opts: sdp.SolverOptions | None = None, *,
               constant_parameter=False, diagonal_multipliers=False, kappa_max=KAPPA_MAX,
               sigma_lower=None) -> SynthesisCertificate:
    """Solve the synthesis SDP and return a re-checked certificate."""
    t0 = time.perf_counter()
    built = build(sys, variant, weights, epsilon, constant_parameter=constant_parameter,
                  diagonal_multipliers=diagonal_multipliers, kappa_max=kappa_max)
    sol = sdp.solve(built.problem, opts)
    elapsed = time.perf_counter() - t0
    logger.info("synthesis %s: %s after %d iterations (%.2fs)", variant, sol.status.value, sol.iterations, elapsed)
    if sol.status is sdp.Status.INFEASIBLE:
        raise Infeasible("the synthesis LMIs are infeasible", sol.status.value)
    if sol.status is not sdp.Status.OPTIMAL:
        raise SynthesisError(f"solver finished with status {sol.status.value}", sol.status.value)
    pair_eigs = sol.min_block_eig[:len(built.layout.pairs)]
    stats = {"status": sol.status.value, "iterations": sol.iterations, "objective": sol.objective_value,
             "primal_residual": float(sol.primal_residual), "dual_residual": float(sol.dual_residual),
             "gap": float(sol.gap), "min_block_margin": float(pair_eigs.min() - epsilon),
             "num_vars": built.layout.size, "num_blocks": len(built.layout.pairs),
             "weights": built.weights.as_array().tolist(), "kappa_max": kappa_max,
             "wall_time_s": elapsed, "model_digest": sys.digest()}
    cert = _from_solution(built.layout, built.layout.decode(sol.z), float(epsilon),
                          constant_parameter, diagonal_multipliers, stats)
    sigma_lower = _sigma_lower(sys) if sigma_lower is None else float(sigma_lower)
    cert.stats["sigma_lower"] = sigma_lower
    check = check_certificate(sys, cert, sigma_lower)
    if not check.ok:
        raise CertificateCheckFailed("; ".join(check.problems), sol.status.value)
    return cert


# --- ISS constants ------------------------------------------------------------

@dataclass(frozen=True)
class IssBounds:
    """Decay rate and gain coefficients of the error bound.

    ``beta(s, k) = beta * sqrt(rho**k) * s`` and ``gamma_*(s) = gamma_* * s``.
    ``a_num`` and ``rho_num`` come from the certificate's own ``P_i``.
    """

    a: float
    rho: float
    beta: float
    gamma_v: float
    gamma_w: float
    gamma_psi: float
    sigma_lower: float
    a_num: float = np.nan
    rho_num: float = np.nan
    kappa_v: float = np.nan
    kappa_w: float = np.nan
    kappa_psi: float = np.nan

    def to_dict(self):
        return dict(self.__dict__)


def iss_constants(kappa_v, kappa_w, kappa_psi, sigma_lower, a_num=np.nan) -> IssBounds:
    if not sigma_lower > 0:
        raise ModelError("sigma_lower must be positive")
    a = kappa_psi * sigma_lower**2
    if not a > 1:
        raise CertificateCheckFailed(f"kappa_psi * sigma^2 = {a:.6g} must exceed 1")
    rho_num = 1.0 - 1.0 / a_num if a_num > 1 else np.nan
    return IssBounds(a=a, rho=1.0 - 1.0 / a, beta=np.sqrt(kappa_psi) * sigma_lower,
                     gamma_v=np.sqrt(kappa_psi * kappa_v) * sigma_lower,
                     gamma_w=np.sqrt(kappa_psi * kappa_w) * sigma_lower,
                     gamma_psi=kappa_psi * sigma_lower, sigma_lower=sigma_lower,
                     a_num=a_num, rho_num=rho_num, kappa_v=kappa_v, kappa_w=kappa_w, kappa_psi=kappa_psi)


def iss_bounds(cert: SynthesisCertificate, sigma_lower) -> IssBounds:
    a_num = float(max(np.linalg.eigvalsh(P)[-1] for P in cert.P))
    return iss_constants(cert.kappa_v, cert.kappa_w, cert.kappa_psi, sigma_lower, a_num)
