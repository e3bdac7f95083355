"""Polytopic discrete-time descriptor systems and their coordinate functions.

A system is given by vertex matrices ``(E_i, A_i, B_i, F_i, G_i)`` combined with
weights ``xi(p)`` that form a partition of unity over the parameter set, plus
parameter-independent ``H, C, D`` and the slope bound ``Lambda`` of the
nonlinearity::

    E(p+) x+ = A(p) x + G(p) phi(H x) + B(p) u + F(p) v,    y = C x + D w
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nonlinearity
from .errors import ModelError, OutOfSetError, SingularDescriptorError

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-9
SIMPLEX_TOL = 1e-12
SINGULAR_TOL = 1e-12
FIELDS = ("E", "A", "B", "F", "G")


def _matrix(value, name):
    arr = np.array(value, dtype=float)
    if arr.ndim != 2:
        raise ModelError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VertexBundle:
    """One vertex ``[E A B F G]`` of the polytopic representation."""

    E: np.ndarray
    A: np.ndarray
    B: np.ndarray
    F: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        for name in FIELDS:
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        n_x = self.E.shape[0]
        if self.E.shape != (n_x, n_x) or self.A.shape != (n_x, n_x):
            raise ModelError(f"E and A must be square of equal size, got {self.E.shape}, {self.A.shape}")
        for name in ("B", "F", "G"):
            if getattr(self, name).shape[0] != n_x:
                raise ModelError(f"{name} must have {n_x} rows, got {getattr(self, name).shape}")

    @property
    def dims(self):
        return (self.E.shape[0], self.B.shape[1], self.F.shape[1], self.G.shape[1])

    def as_dict(self):
        return {name: getattr(self, name).tolist() for name in FIELDS}


@dataclass(frozen=True, eq=False)
class CoordinateMap:
    """Piecewise-barycentric weights over a simplicial partition of the parameter set.

    ``simplices`` holds index tuples ``(base, k_1, ..., k_np)``; inside that
    simplex the weights of ``k_1..k_np`` are ``T^{-1} (p - nu_base)`` with
    ``T = [nu_k1 - nu_base, ..., nu_knp - nu_base]`` and the base weight closes
    the sum to one. Points shared by several simplices belong to the first one
    listed, which makes the simplices half-open.
    """

    vertex_points: np.ndarray
    simplices: tuple
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    clamp: bool = True
    transforms: tuple = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.vertex_points, dtype=float)
        if pts.ndim != 2:
            raise ModelError("vertex_points must be an (N, n_p) array")
        pts.setflags(write=False)
        object.__setattr__(self, "vertex_points", pts)
        n_p = pts.shape[1]
        simplices = tuple(tuple(int(k) for k in s) for s in self.simplices)
        transforms = []
        for s in simplices:
            if len(s) != n_p + 1:
                raise ModelError(f"simplex {s} needs {n_p + 1} vertices")
            T = (pts[list(s[1:])] - pts[s[0]]).T
            if np.linalg.svd(T, compute_uv=False)[-1] <= SINGULAR_TOL * max(1.0, np.abs(T).max()):
                raise ModelError(f"degenerate simplex {s}")
            T.setflags(write=False)
            transforms.append(T)
        object.__setattr__(self, "simplices", simplices)
        object.__setattr__(self, "transforms", tuple(transforms))
        for name in ("lower", "upper"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value, dtype=float).reshape(n_p)
                value.setflags(write=False)
                object.__setattr__(self, name, value)

    @property
    def n_vertices(self):
        return self.vertex_points.shape[0]

    @property
    def n_p(self):
        return self.vertex_points.shape[1]

    def contains(self, p, tol=MEMBERSHIP_TOL):
        if self.lower is None:
            return True
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    def project(self, p):
        """Componentwise clamp onto the parameter box."""
        p = np.asarray(p, dtype=float)
        if self.lower is None:
            return p
        return np.minimum(np.maximum(p, self.lower), self.upper)

    def sample(self, count, rng):
        if self.lower is None:
            raise ModelError("sampling requires a parameter box")
        return rng.uniform(self.lower, self.upper, size=(count, self.n_p))


def coords(cmap: CoordinateMap, p, clamp=None) -> np.ndarray:
    """Weights ``xi(p)``: nonnegative, summing to one, ``xi(nu_i) = e_i``."""
    p = np.asarray(p, dtype=float).reshape(cmap.n_p)
    clamp = cmap.clamp if clamp is None else clamp
    if not cmap.contains(p):
        if not clamp:
            raise OutOfSetError(f"parameter {p.tolist()} lies outside the parameter set")
        logger.warning("parameter %s outside the parameter set; clamped", p.tolist())
        p = cmap.project(p)

    N = cmap.n_vertices
    hit = np.flatnonzero(np.all(cmap.vertex_points == p, axis=1))
    if hit.size:
        xi = np.zeros(N)
        xi[hit[0]] = 1.0
        return xi

    best = None
    for s, T in zip(cmap.simplices, cmap.transforms):
        b = np.linalg.solve(T, p - cmap.vertex_points[s[0]])
        lam_min = min(1.0 - b.sum(), b.min())
        if lam_min >= -SIMPLEX_TOL:
            best = (s, b)
            break
        if best is None or lam_min > best[2]:
            best = (s, b, lam_min)
    else:
        if best[2] < -MEMBERSHIP_TOL:
            raise OutOfSetError(f"parameter {p.tolist()} is not covered by any simplex")
    s, b = best[0], best[1]
    xi = np.zeros(N)
    xi[list(s[1:])] = b
    xi[s[0]] = 1.0 - b.sum()
    return xi


def partition_box(lower, upper, clamp=True) -> CoordinateMap:
    """Simplicial partition of the box ``[lower, upper]``.

    In two dimensions the vertices are ``nu_1 = lower``, ``nu_2 = upper``, ``nu_3 = (upper_1, lower_2)``,
    ``nu_4 = (lower_1, upper_2)`` with the two triangles ``Co{nu_i, nu_3, nu_4}``.
    Higher dimensions use the Kuhn triangulation with corners in binary order.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or lower.ndim != 1 or lower.size == 0:
        raise ModelError("lower and upper must be vectors of equal length")
    if not np.all(upper > lower):
        raise ModelError(f"empty or degenerate box: lower={lower.tolist()}, upper={upper.tolist()}")
    n_p = lower.size
    if n_p == 1:
        pts = np.array([lower, upper])
        simplices = ((0, 1),)
    elif n_p == 2:
        pts = np.array([lower, upper, [upper[0], lower[1]], [lower[0], upper[1]]])
        simplices = ((0, 2, 3), (1, 2, 3))
    else:
        corners = [[(c >> j) & 1 for j in range(n_p)] for c in range(2**n_p)]
        pts = np.where(np.array(corners, dtype=bool), upper, lower)
        simplices = []
        for perm in itertools.permutations(range(n_p)):
            path, c = [0], 0
            for j in perm:
                c |= 1 << j
                path.append(c)
            simplices.append(tuple(path))
    return CoordinateMap(pts, tuple(simplices), lower, upper, clamp)


@dataclass(frozen=True, eq=False)
class PolytopicDescriptorSystem:
    vertices: tuple
    H: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Lambda: np.ndarray
    nonlinearity: str = "zero"
    coordinate_map: CoordinateMap | None = None

    def __post_init__(self):
        vertices = tuple(v if isinstance(v, VertexBundle) else VertexBundle(**v) for v in self.vertices)
        if not vertices:
            raise ModelError("at least one vertex is required")
        object.__setattr__(self, "vertices", vertices)
        for name in ("H", "C", "D", "Lambda"):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        dims = {v.dims for v in vertices}
        if len(dims) != 1:
            raise ModelError(f"vertex bundles have inconsistent dimensions: {sorted(dims)}")
        n_x, _, _, n_phi = vertices[0].dims
        if self.H.shape != (n_phi, n_x):
            raise ModelError(f"H must be {n_phi}x{n_x}, got {self.H.shape}")
        if self.C.shape[1] != n_x:
            raise ModelError(f"C must have {n_x} columns, got {self.C.shape}")
        if self.D.shape[0] != self.C.shape[0]:
            raise ModelError(f"D must have {self.C.shape[0]} rows, got {self.D.shape}")
        lam = self.Lambda
        if lam.shape != (n_phi, n_phi) or not np.allclose(lam, lam.T, rtol=0, atol=1e-12):
            raise ModelError("Lambda must be a symmetric n_phi x n_phi matrix")
        if n_phi and np.linalg.eigvalsh(lam).min() <= 0:
            raise ModelError("Lambda must be positive definite")
        nonlinearity.get(self.nonlinearity)
        object.__setattr__(self, "_stacks", {name: np.stack([getattr(v, name) for v in vertices])
                                             for name in FIELDS})
        cmap = self.coordinate_map
        if cmap is not None and cmap.n_vertices != len(vertices):
            raise ModelError(f"coordinate map has {cmap.n_vertices} vertices, system has {len(vertices)}")
        for i, v in enumerate(vertices):
            if np.linalg.svd(v.E, compute_uv=False)[-1] < SINGULAR_TOL:
                raise SingularDescriptorError(f"E is singular at vertex {i + 1}")
        if cmap is not None:
            for s in cmap.simplices:
                xi = np.zeros(len(vertices))
                xi[list(s)] = 1.0 / len(s)
                if np.linalg.svd(evaluate(self, xi).E, compute_uv=False)[-1] < SINGULAR_TOL:
                    raise SingularDescriptorError(f"E is singular at the centroid of simplex {s}")

    n_x = property(lambda self: self.vertices[0].dims[0])
    n_u = property(lambda self: self.vertices[0].dims[1])
    n_v = property(lambda self: self.vertices[0].dims[2])
    n_phi = property(lambda self: self.vertices[0].dims[3])
    n_y = property(lambda self: self.C.shape[0])
    n_w = property(lambda self: self.D.shape[1])
    N = property(lambda self: len(self.vertices))

    @property
    def phi(self):
        return nonlinearity.get(self.nonlinearity)

    def stacked(self, name):
        """Vertex matrices of one field stacked along a leading axis."""
        return self._stacks[name]

    def weights(self, p):
        if self.coordinate_map is None:
            raise ModelError("system has no coordinate map")
        return coords(self.coordinate_map, p)

    def at(self, p):
        return evaluate(self, self.weights(p))

    def has_constant_E(self, tol=1e-12):
        E0 = self.vertices[0].E
        return all(np.abs(v.E - E0).max() <= tol for v in self.vertices)

    def to_dict(self):
        doc = {
            "dims": {"n_x": self.n_x, "n_u": self.n_u, "n_y": self.n_y, "n_v": self.n_v,
                     "n_w": self.n_w, "n_phi": self.n_phi},
            "vertices": [v.as_dict() for v in self.vertices],
            "H": self.H.tolist(), "C": self.C.tolist(), "D": self.D.tolist(),
            "Lambda": self.Lambda.tolist(), "nonlinearity": self.nonlinearity,
        }
        cmap = self.coordinate_map
        if cmap is not None and cmap.lower is not None:
            doc["parameter_box"] = {"lower": cmap.lower.tolist(), "upper": cmap.upper.tolist()}
        return doc

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def evaluate(sys: PolytopicDescriptorSystem, xi) -> VertexBundle:
    """Convex combination of the vertex bundles with weights ``xi``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (sys.N,):
        raise ModelError(f"expected {sys.N} weights, got shape {xi.shape}")
    if xi.min() < -1e-12 or abs(xi.sum() - 1.0) > 1e-9:
        raise ModelError(f"weights {xi.tolist()} are not a convex combination")
    return VertexBundle(**{name: np.tensordot(xi, sys.stacked(name), axes=1) for name in FIELDS})


def box_grid(cmap: CoordinateMap, density: int) -> np.ndarray:
    if cmap.lower is None:
        raise ModelError("grid requires a parameter box")
    axes = [np.linspace(lo, hi, density) for lo, hi in zip(cmap.lower, cmap.upper)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, cmap.n_p)


def min_singular_value_E(sys: PolytopicDescriptorSystem, cmap: CoordinateMap | None = None,
                         grid_density: int = 50):
    """Smallest singular value of ``E(p)`` over a grid of the parameter box.

    Returns ``(sigma, argmin_point)``.
    """
    cmap = cmap or sys.coordinate_map
    if grid_density < 2:
        raise ModelError("grid_density must be at least 2")
    points = box_grid(cmap, grid_density)
    Es = sys.stacked("E")
    xis = np.array([coords(cmap, p) for p in points])
    sig = np.linalg.svd(np.tensordot(xis, Es, axes=1), compute_uv=False)[:, -1]
    k = int(np.argmin(sig))
    if sig[k] < SINGULAR_TOL:
        raise SingularDescriptorError(f"E(p) is singular at p={points[k].tolist()}")
    return float(sig[k]), points[k]


# --- JSON model documents -------------------------------------------------

SHAPES = {"E": ("n_x", "n_x"), "A": ("n_x", "n_x"), "B": ("n_x", "n_u"), "F": ("n_x", "n_v"),
          "G": ("n_x", "n_phi"), "H": ("n_phi", "n_x"), "C": ("n_y", "n_x"), "D": ("n_y", "n_w"),
          "Lambda": ("n_phi", "n_phi")}


def _restore_empty(value, name, dims):
    # JSON flattens a matrix with a zero dimension to [], so take its shape from "dims".
    if dims and np.size(value) == 0:
        rows, cols = SHAPES[name]
        if rows in dims and cols in dims:
            return np.zeros((dims[rows], dims[cols]))
    return value


def parse_model(doc: dict, clamp=True) -> PolytopicDescriptorSystem:
    dims = doc.get("dims")
    try:
        box = doc.get("parameter_box")
        cmap = partition_box(box["lower"], box["upper"], clamp=clamp) if box else None
        m = {k: _restore_empty(doc[k], k, dims) for k in ("H", "C", "D", "Lambda")}
        sys = PolytopicDescriptorSystem(
            vertices=tuple(VertexBundle(**{k: _restore_empty(v[k], k, dims) for k in FIELDS})
                           for v in doc["vertices"]),
            H=m["H"], C=m["C"], D=m["D"], Lambda=m["Lambda"],
            nonlinearity=doc.get("nonlinearity", "zero"), coordinate_map=cmap,
        )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc!r}") from exc
    if dims:
        actual = sys.to_dict()["dims"]
        wrong = {k: (v, actual.get(k)) for k, v in dims.items() if actual.get(k) != v}
        if wrong:
            raise ModelError(f"declared dims disagree with matrices: {wrong}")
    return sys


def load_model(path, clamp=True) -> PolytopicDescriptorSystem:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("continuous"):
        raise ModelError(f"{path} is a continuous-time model; discretize it first")
    return parse_model(doc, clamp=clamp)


def save_model(sys: PolytopicDescriptorSystem, path):
    Path(path).write_text(json.dumps(sys.to_dict(), indent=2) + "\n", encoding="utf-8")
