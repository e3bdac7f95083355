"""The two-state benchmark model used throughout the tests and scripts.

Its matrices are affine in ``p = (p1, p2)``::

    E(p) = [[1 + p2/2, p2/2 - 2 p1], [p2, 1 + p2]]
    A(p) = [[1 - p2/2, 2 p1 - p2/2], [-p2, 1 - p2]]
    G(p) = p2 [1; 2],   B(p) = F(p) = p1 [1; 1]

with ``H = [1 1]``, ``C = [1 0]``, ``D = 1``, ``phi(z) = sin z + z`` and
``Lambda = 2``. It arises from Tustin discretization of a one-parameter
continuous model with sampling period ``p1``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .discretize import ContinuousVertexBundle
from .model import PolytopicDescriptorSystem, VertexBundle, partition_box

LOWER = (9.5e-3, 0.0475)
UPPER = (10.5e-3, 0.0525)
SAMPLING_PERIOD = 0.01
GAMMA_RANGE = (9.5, 10.5)

H = [[1.0, 1.0]]
C = [[1.0, 0.0]]
D = [[1.0]]
LAMBDA = [[2.0]]
NONLINEARITY = "sin_plus_linear"


def matrices_at(p):
    """Direct substitution of ``p`` into the affine formulas."""
    p1, p2 = float(p[0]), float(p[1])
    return VertexBundle(
        E=[[1 + p2 / 2, p2 / 2 - 2 * p1], [p2, 1 + p2]],
        A=[[1 - p2 / 2, 2 * p1 - p2 / 2], [-p2, 1 - p2]],
        B=[[p1], [p1]],
        F=[[p1], [p1]],
        G=[[p2], [2 * p2]],
    )


def example_model(lower=LOWER, upper=UPPER, clamp=True) -> PolytopicDescriptorSystem:
    cmap = partition_box(lower, upper, clamp=clamp)
    vertices = tuple(matrices_at(p) for p in cmap.vertex_points)
    return PolytopicDescriptorSystem(vertices, H=H, C=C, D=D, Lambda=LAMBDA,
                                     nonlinearity=NONLINEARITY, coordinate_map=cmap)


def constant_descriptor_model(lower=LOWER, upper=UPPER) -> PolytopicDescriptorSystem:
    """The benchmark with every vertex descriptor matrix replaced by ``I``."""
    base = example_model(lower, upper)
    vertices = tuple(VertexBundle(np.eye(2), v.A, v.B, v.F, v.G) for v in base.vertices)
    return PolytopicDescriptorSystem(vertices, H=H, C=C, D=D, Lambda=LAMBDA,
                                     nonlinearity=NONLINEARITY, coordinate_map=base.coordinate_map)


def continuous_vertex(gamma):
    g = float(gamma)
    return ContinuousVertexBundle(
        E_c=np.eye(2),
        A_c=[[-g / 2, 4 - g / 2], [-g, -g]],
        B_c=[[1.0], [1.0]],
        F_c=[[1.0], [1.0]],
        G_c=[[g / 2], [g]],
    )


def continuous_document(gamma_range=GAMMA_RANGE, T_s=SAMPLING_PERIOD):
    """Continuous-time source model as a JSON-ready document."""
    verts = [continuous_vertex(g) for g in gamma_range]
    return {
        "continuous": True,
        "T_s": T_s,
        "dims": {"n_x": 2, "n_u": 1, "n_y": 1, "n_v": 1, "n_w": 1, "n_phi": 1},
        "vertices": [{"E": v.E_c.tolist(), "A": v.A_c.tolist(), "B": v.B_c.tolist(),
                      "F": v.F_c.tolist(), "G": v.G_c.tolist()} for v in verts],
        "H": H, "C": C, "D": D, "Lambda": LAMBDA, "nonlinearity": NONLINEARITY,
        "parameter_box": {"lower": [gamma_range[0]], "upper": [gamma_range[1]]},
    }


def scalar_unobservable():
    """``x+ = 2 x`` with ``y = w``: no observer can stabilize the error."""
    v = VertexBundle(E=[[1.0]], A=[[2.0]], B=[[0.0]], F=[[0.0]], G=np.zeros((1, 0)))
    return PolytopicDescriptorSystem((v,), H=np.zeros((0, 1)), C=[[0.0]], D=[[1.0]],
                                     Lambda=np.zeros((0, 0)), nonlinearity="zero")


def deadbeat():
    """``E = I``, ``A = 0``, no nonlinearity: the zero gain already works."""
    v = VertexBundle(E=np.eye(2), A=np.zeros((2, 2)), B=np.zeros((2, 1)), F=np.ones((2, 1)),
                     G=np.zeros((2, 1)))
    return PolytopicDescriptorSystem((v,), H=[[1.0, 0.0]], C=[[1.0, 0.0]], D=[[1.0]],
                                     Lambda=[[1.0]], nonlinearity="zero")


CASE_STUDY_SEED = 20240
CASE_STUDY_HORIZON = 10_000
NOISE_STOP = 200


def case_study_scenario(observer, horizon=CASE_STUDY_HORIZON, seed=CASE_STUDY_SEED):
    """Noisy run with a slowly varying parameter.

    Observer 1 schedules on the fixed vertex ``nu_1``; observer 2 uses the
    true (clamped) parameter.
    """
    from .observer import Scenario, SignalSpec

    if observer not in (1, 2):
        raise ValueError("observer must be 1 or 2")
    p_hat = SignalSpec("constant", value=list(LOWER)) if observer == 1 else SignalSpec("exact")
    return Scenario(
        horizon=horizon, x0=[1.0, 2.0], xhat0=[0.0, 0.0],
        u=SignalSpec("sinusoid", amplitude=[3.0], omega=[0.01 * np.pi]),
        v=SignalSpec("uniform", low=[-1.0], high=[1.0], start=0, stop=NOISE_STOP),
        w=SignalSpec("uniform", low=[-0.1], high=[0.1], start=0, stop=NOISE_STOP),
        p=SignalSpec("sinusoid", offset=[0.01, 0.11], amplitude=[0.0, 0.11], omega=[0.0, 0.001 * np.pi]),
        p_hat=p_hat, seed=seed, name=f"case_study_observer{observer}",
    )


def fixture(name):
    """Path to a bundled JSON fixture such as ``"example1.json"``."""
    from importlib.resources import files

    return Path(str(files("polyobs") / "data" / name))
