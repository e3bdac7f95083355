"""Parameter-scheduled observer: gain evaluation, stepping and simulation.

The observer is::

    E(ph+) xh+ = A(ph) xh - L r + B(ph) u + G(ph) phi(H xh - K r),   r = C xh - y

with ``L = L(ph+, ph)`` and ``K = K(ph+, ph)`` built from a certificate.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import CertificateCheckFailed, ModelError, SimulationError, SingularDescriptorError
from .model import PolytopicDescriptorSystem, VertexBundle, coords, evaluate
from .synthesis import SynthesisCertificate

logger = logging.getLogger(__name__)

PRNG_NAME = "numpy.random.PCG64"
QUANTUM = 1e-12


def weights_at(sys: PolytopicDescriptorSystem, p):
    """Coordinate weights at ``p``; single-vertex models ignore ``p``."""
    if sys.coordinate_map is None:
        if sys.N == 1:
            return np.ones(1)
        raise ModelError("system has no coordinate map")
    return coords(sys.coordinate_map, p)


def weights_series(sys, points):
    """Weights for each row of ``points``; repeated rows are evaluated once."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 0:
        return np.zeros((0, sys.N))
    uniq, inverse = np.unique(points, axis=0, return_inverse=True)
    table = np.array([weights_at(sys, q) for q in uniq])
    return table[inverse.reshape(-1)]


@dataclass(eq=False)
class ObserverGains:
    """Gain tables of a certificate, evaluated on line from weight vectors."""

    cert: SynthesisCertificate
    L_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.cert.tau.size and not self.cert.tau.min() > 0:
            raise CertificateCheckFailed("multiplier tau must be positive at every vertex pair")
        try:
            self.L_table = self.cert.gains_L() if self.cert.variant == "thm1" else None
        except np.linalg.LinAlgError as exc:
            raise CertificateCheckFailed(f"singular slack matrix: {exc}") from exc

    @property
    def N(self):
        return self.cert.N

    def L_from_weights(self, xi, xi_plus):
        if self.cert.variant == "thm1":
            return np.einsum("i,j,ijab->ab", xi, xi_plus, self.L_table)
        out = np.zeros(self.cert.Y.shape[2:])
        for i in np.flatnonzero(xi):
            X = np.tensordot(xi_plus, self.cert.X[i], axes=1)
            Y = np.tensordot(xi_plus, self.cert.Y[i], axes=1)
            try:
                out += xi[i] * scipy.linalg.solve(X, Y, check_finite=False)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
                raise CertificateCheckFailed(f"X_{i + 1}(p+) is singular: {exc}") from exc
        return out

    def K_from_weights(self, xi, xi_plus):
        Z = np.einsum("i,j,ijab->ab", xi, xi_plus, self.cert.Z)
        tau = np.einsum("i,j,ija->a", xi, xi_plus, self.cert.tau)
        if tau.size and not tau.min() > 0:
            raise CertificateCheckFailed(f"scheduled multiplier {tau.tolist()} is not positive")
        return Z / tau[:, None] if tau.size else Z

    def L_series(self, xis, xis_plus):
        if self.cert.variant == "thm1":
            return np.einsum("ki,kj,ijab->kab", xis, xis_plus, self.L_table)
        return np.array([self.L_from_weights(a, b) for a, b in zip(xis, xis_plus)]).reshape(
            (len(xis),) + self.cert.Y.shape[2:])

    def K_series(self, xis, xis_plus):
        Z = np.einsum("ki,kj,ijab->kab", xis, xis_plus, self.cert.Z)
        tau = np.einsum("ki,kj,ija->ka", xis, xis_plus, self.cert.tau)
        if tau.size and not tau.min() > 0:
            raise CertificateCheckFailed("scheduled multiplier is not positive")
        return Z / tau[:, :, None] if tau.size else Z

    def tau_from_weights(self, xi, xi_plus):
        return np.einsum("i,j,ija->a", xi, xi_plus, self.cert.tau)


def gain_L(sys, gains: ObserverGains, p_hat, p_hat_plus):
    return gains.L_from_weights(weights_at(sys, p_hat), weights_at(sys, p_hat_plus))


def gain_K(sys, gains: ObserverGains, p_hat, p_hat_plus):
    return gains.K_from_weights(weights_at(sys, p_hat), weights_at(sys, p_hat_plus))


class FactorCache:
    """LU factors of ``E(p)`` keyed on the parameter rounded to 1e-12."""

    def __init__(self, maxsize=64):
        self.maxsize = maxsize
        self._store = {}

    def solve(self, E, key, rhs):
        lu = self._store.get(key) if key is not None else None
        if lu is None:
            if np.linalg.svd(E, compute_uv=False)[-1] < 1e-12 * max(1.0, np.abs(E).max()):
                raise SingularDescriptorError("descriptor matrix at the next parameter is singular")
            lu = scipy.linalg.lu_factor(E, check_finite=False)
            if key is not None:
                if len(self._store) >= self.maxsize:
                    self._store.pop(next(iter(self._store)))
                self._store[key] = lu
        return scipy.linalg.lu_solve(lu, rhs, check_finite=False)


def _key(p):
    if p is None:
        return None
    return tuple(np.round(np.asarray(p, dtype=float).reshape(-1) / QUANTUM).astype(np.int64).tolist())


def plant_rhs(sys, M: VertexBundle, x, u, v):
    return M.A @ x + M.G @ sys.phi(sys.H @ x) + M.B @ u + M.F @ v


def observer_rhs(sys, M: VertexBundle, x_hat, u, y, L, K):
    r = sys.C @ x_hat - y
    # Same summation order as the plant, so a zero innovation reproduces it bitwise.
    return M.A @ x_hat - L @ r + M.G @ sys.phi(sys.H @ x_hat - K @ r) + M.B @ u


def _vec(a, n, name):
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size != n:
        raise ModelError(f"{name} must have length {n}, got {a.size}")
    return a


def step_system(sys, x, u, v, p, p_plus, cache: FactorCache | None = None):
    """Solve ``E(p+) x+ = A(p) x + G(p) phi(H x) + B(p) u + F(p) v``."""
    x, u, v = _vec(x, sys.n_x, "x"), _vec(u, sys.n_u, "u"), _vec(v, sys.n_v, "v")
    M = evaluate(sys, weights_at(sys, p))
    E_plus = evaluate(sys, weights_at(sys, p_plus)).E
    return (cache or FactorCache(0)).solve(E_plus, _key(p_plus) if cache else None, plant_rhs(sys, M, x, u, v))


def step_observer(sys, gains, x_hat, u, y, p_hat, p_hat_plus, cache: FactorCache | None = None):
    """One observer update with gains scheduled on ``(p_hat, p_hat_plus)``."""
    x_hat, u, y = _vec(x_hat, sys.n_x, "x_hat"), _vec(u, sys.n_u, "u"), _vec(y, sys.n_y, "y")
    xi, xi_plus = weights_at(sys, p_hat), weights_at(sys, p_hat_plus)
    M = evaluate(sys, xi)
    L, K = gains.L_from_weights(xi, xi_plus), gains.K_from_weights(xi, xi_plus)
    E_plus = evaluate(sys, xi_plus).E
    return (cache or FactorCache(0)).solve(E_plus, _key(p_hat_plus) if cache else None,
                                           observer_rhs(sys, M, x_hat, u, y, L, K))


# --- scenarios ------------------------------------------------------------------

SIGNAL_KINDS = ("zero", "constant", "sinusoid", "uniform", "exact")


@dataclass
class SignalSpec:
    """A vector signal over ``k = 0, 1, ...``.

    ``sinusoid``: ``offset + amplitude * sin(omega * k + phase)``.
    ``uniform``: i.i.d. ``U[low, high]`` for ``start <= k <= stop`` and zero elsewhere.
    ``exact`` is only meaningful for the parameter estimate and copies the true parameter.
    """

    kind: str = "zero"
    value: list | None = None
    offset: list | None = None
    amplitude: list | None = None
    omega: list | float | None = None
    phase: list | float = 0.0
    low: list | float | None = None
    high: list | float | None = None
    start: int = 0
    stop: int | None = None

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ModelError(f"unknown signal kind {self.kind!r}; expected one of {SIGNAL_KINDS}")

    def generate(self, ks, dim, rng):
        ks = np.asarray(ks, dtype=float)
        shape = (ks.size, dim)
        if self.kind == "zero":
            return np.zeros(shape)
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.value, dtype=float), shape).copy()
        if self.kind == "sinusoid":
            off = np.broadcast_to(np.asarray(self.offset if self.offset is not None else 0.0, dtype=float), (dim,))
            amp = np.broadcast_to(np.asarray(self.amplitude, dtype=float), (dim,))
            om = np.broadcast_to(np.asarray(self.omega, dtype=float), (dim,))
            ph = np.broadcast_to(np.asarray(self.phase, dtype=float), (dim,))
            return off + amp * np.sin(np.outer(ks, om) + ph)
        if self.kind == "uniform":
            draws = rng.uniform(np.broadcast_to(np.asarray(self.low, dtype=float), (dim,)),
                                np.broadcast_to(np.asarray(self.high, dtype=float), (dim,)), size=shape)
            stop = np.inf if self.stop is None else self.stop
            active = (ks >= self.start) & (ks <= stop)
            return np.where(active[:, None], draws, 0.0)
        raise ModelError("an 'exact' signal has no standalone values")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def _spec(obj):
    if isinstance(obj, SignalSpec):
        return obj
    if obj is None:
        return SignalSpec()
    try:
        return SignalSpec(**obj)
    except TypeError as exc:
        raise ModelError(f"malformed signal spec {obj!r}: {exc}") from exc


@dataclass
class Scenario:
    horizon: int
    x0: list
    xhat0: list
    u: SignalSpec = field(default_factory=SignalSpec)
    v: SignalSpec = field(default_factory=SignalSpec)
    w: SignalSpec = field(default_factory=SignalSpec)
    p: SignalSpec = field(default_factory=SignalSpec)
    p_hat: SignalSpec = field(default_factory=lambda: SignalSpec("exact"))
    seed: int = 0
    name: str = ""
    clamp: bool | None = None

    def __post_init__(self):
        for name in ("u", "v", "w", "p", "p_hat"):
            setattr(self, name, _spec(getattr(self, name)))
        if isinstance(self.horizon, bool) or int(self.horizon) != self.horizon or self.horizon < 0:
            raise ModelError(f"horizon must be a nonnegative integer, got {self.horizon!r}")
        self.horizon = int(self.horizon)
        if self.p.kind == "exact":
            raise ModelError("the true parameter cannot be 'exact'")

    def to_dict(self):
        doc = asdict(self)
        for name in ("u", "v", "w", "p", "p_hat"):
            doc[name] = getattr(self, name).to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ModelError(f"malformed scenario: {exc}") from exc

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


CHANNELS = ("x", "x_hat", "e", "y", "u", "v", "w", "p", "p_hat")
CSV_PREFIX = {"x": "x", "x_hat": "xhat", "e": "e", "y": "y", "u": "u", "v": "v", "w": "w", "p": "p", "p_hat": "phat"}


@dataclass
class Trajectory:
    """Signals at ``k = 0..horizon``; row ``k`` holds the values at time ``k``."""

    k: np.ndarray
    x: np.ndarray
    x_hat: np.ndarray
    e: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    p: np.ndarray
    p_hat: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.k.size

    def header(self):
        cols = ["k"]
        for ch in CHANNELS:
            cols += [f"{CSV_PREFIX[ch]}{i + 1}" for i in range(getattr(self, ch).shape[1])]
        return cols

    def save(self, csv_path):
        """Write the CSV and a ``.meta.json`` sidecar; returns both paths."""
        csv_path = Path(csv_path)
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header())
            data = np.hstack([getattr(self, ch) for ch in CHANNELS])
            for kk, row in zip(self.k, data):
                writer.writerow([str(int(kk))] + [repr(float(val)) for val in row])
        meta_path = sidecar_path(csv_path)
        meta = dict(self.meta)
        meta["dims"] = {ch: int(getattr(self, ch).shape[1]) for ch in CHANNELS}
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return csv_path, meta_path

    @classmethod
    def load(cls, csv_path):
        csv_path = Path(csv_path)
        meta_path = sidecar_path(csv_path)
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        with csv_path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ModelError(f"{csv_path} is empty")
        header, body = rows[0], rows[1:]
        dims = meta.get("dims") or _dims_from_header(header)
        data = np.array([[float(t) for t in r] for r in body]).reshape(len(body), len(header))
        out, col = {"k": data[:, 0].astype(int)}, 1
        for ch in CHANNELS:
            out[ch] = data[:, col:col + dims[ch]]
            col += dims[ch]
        if col != len(header):
            raise ModelError(f"{csv_path}: header does not match the channel dimensions")
        return cls(**out, meta=meta)

    def plot_series(self):
        """Per-channel series for external plotting."""
        series = {"k": self.k.tolist(), "e_norm": np.linalg.norm(self.e, axis=1).tolist()}
        for ch in CHANNELS:
            arr = getattr(self, ch)
            for i in range(arr.shape[1]):
                series[f"{CSV_PREFIX[ch]}{i + 1}"] = arr[:, i].tolist()
        return series


def sidecar_path(csv_path):
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".meta.json")


def _dims_from_header(header):
    dims = {}
    for ch in CHANNELS:
        pre = CSV_PREFIX[ch]
        dims[ch] = sum(1 for h in header[1:] if h.startswith(pre) and h[len(pre):].isdigit()
                       and not (pre == "x" and h.startswith("xhat")))
    return dims


def parameter_schedules(sys, scenario: Scenario, rng):
    """True and estimated parameters for ``k = 0..horizon + 1`` after clamping.

    Returns ``(p, p_hat, clamped_count)``.
    """
    cmap = sys.coordinate_map
    n_p = cmap.n_p if cmap is not None else 1
    ks = np.arange(scenario.horizon + 2)
    p = scenario.p.generate(ks, n_p, rng) if cmap is not None else np.zeros((ks.size, n_p))
    p_hat = p.copy() if scenario.p_hat.kind == "exact" or cmap is None else scenario.p_hat.generate(ks, n_p, rng)
    clamp = cmap.clamp if (cmap is not None and scenario.clamp is None) else bool(scenario.clamp)
    count = 0
    if cmap is not None:
        exact = scenario.p_hat.kind == "exact"
        for name, arr in (("p", p),) if exact else (("p", p), ("p_hat", p_hat)):
            inside = np.array([cmap.contains(q) for q in arr])
            if not inside.all():
                k_bad = int(np.flatnonzero(~inside)[0])
                if not clamp:
                    raise SimulationError(f"{name} = {arr[k_bad].tolist()} lies outside the parameter set", k_bad)
                count += int((~inside).sum())
                arr[:] = cmap.project(arr)
        if count:
            logger.warning("%d scheduled parameter values lie outside the parameter set; clamped", count)
        if exact:
            p_hat = p.copy()
    return p, p_hat, count


def _series(sys, xis):
    """Vertex matrices combined with one weight vector per row of ``xis``."""
    return {name: np.einsum("kn,nab->kab", xis, sys.stacked(name)) for name in ("E", "A", "B", "F", "G")}


def simulate(sys: PolytopicDescriptorSystem, gains: ObserverGains, scenario: Scenario) -> Trajectory:
    """Run plant and observer side by side over ``k = 0..horizon``."""
    K = scenario.horizon
    rng = np.random.Generator(np.random.PCG64(scenario.seed))
    ks = np.arange(K + 1)
    u = scenario.u.generate(ks, sys.n_u, rng)
    v = scenario.v.generate(ks, sys.n_v, rng)
    w = scenario.w.generate(ks, sys.n_w, rng)
    p, p_hat, clamped = parameter_schedules(sys, scenario, rng)

    x = np.zeros((K + 1, sys.n_x))
    x_hat = np.zeros((K + 1, sys.n_x))
    y = np.zeros((K + 1, sys.n_y))
    x[0] = _vec(scenario.x0, sys.n_x, "x0")
    x_hat[0] = _vec(scenario.xhat0, sys.n_x, "xhat0")
    xi_p = weights_series(sys, p)
    xi_h = xi_p if scenario.p_hat.kind == "exact" else weights_series(sys, p_hat)
    Mp, Mh = _series(sys, xi_p), _series(sys, xi_h)
    Ls = gains.L_series(xi_h[:-1], xi_h[1:])
    Ks = gains.K_series(xi_h[:-1], xi_h[1:])
    H, C, D, phi = sys.H, sys.C, sys.D, sys.phi
    plant_cache, obs_cache = FactorCache(), FactorCache()
    for k in range(K + 1):
        y[k] = C @ x[k] + D @ w[k]
        if k == K:
            break
        try:
            rhs = Mp["A"][k] @ x[k] + Mp["G"][k] @ phi(H @ x[k]) + Mp["B"][k] @ u[k] + Mp["F"][k] @ v[k]
            x[k + 1] = plant_cache.solve(Mp["E"][k + 1], _key(p[k + 1]), rhs)
            r = C @ x_hat[k] - y[k]
            rhs = (Mh["A"][k] @ x_hat[k] - Ls[k] @ r + Mh["G"][k] @ phi(H @ x_hat[k] - Ks[k] @ r)
                   + Mh["B"][k] @ u[k])
            x_hat[k + 1] = obs_cache.solve(Mh["E"][k + 1], _key(p_hat[k + 1]), rhs)
        except (ModelError, CertificateCheckFailed, np.linalg.LinAlgError) as exc:
            raise SimulationError(str(exc), k) from exc
        if not (np.all(np.isfinite(x[k + 1])) and np.all(np.isfinite(x_hat[k + 1]))):
            raise SimulationError("state became non-finite", k)

    meta = {"seed": int(scenario.seed), "prng": PRNG_NAME, "numpy_version": np.__version__,
            "horizon": K, "scenario": scenario.to_dict(), "model_hash": sys.digest(),
            "certificate_hash": gains.cert.digest(), "clamped_parameter_values": clamped,
            "p_next": p[K + 1].tolist(), "p_hat_next": p_hat[K + 1].tolist()}
    return Trajectory(ks, x, x_hat, x_hat - x, y, u, v, w, p[:K + 1], p_hat[:K + 1], meta)
