"""Tustin discretization of continuous-time descriptor vertex models.

For ``E_c(p) dx/dt = A_c(p) x + B_c u + F_c v + G_c phi(H x)`` with sampling
period ``T_s`` and ``theta = T_s / 2`` each vertex maps to::

    E = E_c - theta A_c,   A = E_c + theta A_c,   B, F, G = T_s * (B_c, F_c, G_c)

The input, noise and nonlinearity channels are treated explicitly (forward
Euler at the left end point), which gives a semi-implicit scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelError, SingularDescriptorError
from .model import PolytopicDescriptorSystem, VertexBundle, partition_box

MARGIN_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ContinuousVertexBundle:
    E_c: np.ndarray
    A_c: np.ndarray
    B_c: np.ndarray
    F_c: np.ndarray
    G_c: np.ndarray

    def __post_init__(self):
        # Reuse VertexBundle's shape validation.
        VertexBundle(self.E_c, self.A_c, self.B_c, self.F_c, self.G_c)
        for name in ("E_c", "A_c", "B_c", "F_c", "G_c"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))


def check_generalized_eigs(ct: ContinuousVertexBundle, theta: float):
    """Return ``(ok, margin)`` with ``margin = sigma_min(E_c - theta A_c)``."""
    margin = float(np.linalg.svd(ct.E_c - theta * ct.A_c, compute_uv=False)[-1])
    return margin > MARGIN_TOL, margin


def tustin_vertex(ct: ContinuousVertexBundle, T_s: float) -> VertexBundle:
    if not T_s > 0:
        raise ModelError(f"sampling period must be positive, got {T_s}")
    theta = T_s / 2.0
    ok, margin = check_generalized_eigs(ct, theta)
    if not ok:
        raise SingularDescriptorError(
            f"theta={theta} is (close to) a generalized eigenvalue: sigma_min(E_c - theta A_c)={margin:.3e}")
    return VertexBundle(E=ct.E_c - theta * ct.A_c, A=ct.E_c + theta * ct.A_c,
                        B=T_s * ct.B_c, F=T_s * ct.F_c, G=T_s * ct.G_c)


def tustin(ct_vertices, T_s, *, H, C, D, Lambda, nonlinearity="zero",
           coordinate_map=None) -> PolytopicDescriptorSystem:
    """Discretize every continuous vertex; the coordinate functions are unchanged."""
    vertices = tuple(tustin_vertex(ct, T_s) for ct in ct_vertices)
    return PolytopicDescriptorSystem(vertices=vertices, H=H, C=C, D=D, Lambda=Lambda,
                                     nonlinearity=nonlinearity, coordinate_map=coordinate_map)


def parse_continuous_model(doc: dict):
    """Split a continuous-time model document into vertices and shared data."""
    if not doc.get("continuous"):
        raise ModelError("model document is not flagged continuous")
    try:
        ct = [ContinuousVertexBundle(v["E"], v["A"], v["B"], v["F"], v["G"]) for v in doc["vertices"]]
        box = doc.get("parameter_box")
        shared = dict(H=doc["H"], C=doc["C"], D=doc["D"], Lambda=doc["Lambda"],
                      nonlinearity=doc.get("nonlinearity", "zero"),
                      coordinate_map=partition_box(box["lower"], box["upper"]) if box else None)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed continuous model document: {exc!r}") from exc
    return ct, shared


def discretize_document(doc: dict, T_s: float | None = None):
    """Discretize a continuous model document.

    Returns ``(system, margins)`` where ``margins[i]`` is the generalized
    eigenvalue margin of vertex ``i``.
    """
    T_s = doc.get("T_s") if T_s is None else T_s
    if T_s is None:
        raise ModelError("no sampling period given")
    T_s = float(T_s)
    if not T_s > 0:
        raise ModelError(f"sampling period must be positive, got {T_s}")
    ct, shared = parse_continuous_model(doc)
    margins = [check_generalized_eigs(v, T_s / 2.0)[1] for v in ct]
    return tustin(ct, T_s, **shared), margins
