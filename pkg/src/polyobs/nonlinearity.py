"""Named catalog of elementwise nonlinearities.

Model files refer to a nonlinearity by name only, so that a model remains pure
data. Each entry maps ``z -> phi(z)`` elementwise on arrays.
"""

import numpy as np

from .errors import ModelError


def _sin_plus_linear(z):
    return np.sin(z) + z


def _zero(z):
    return np.zeros_like(np.asarray(z, dtype=float))


CATALOG = {
    "sin_plus_linear": _sin_plus_linear,
    "zero": _zero,
    "tanh": np.tanh,
}

# Tight elementwise slope bounds [lo, hi]; informational, used by the CLI summary.
SLOPE_BOUNDS = {
    "sin_plus_linear": (0.0, 2.0),
    "zero": (0.0, 0.0),
    "tanh": (0.0, 1.0),
}


def get(name):
    try:
        return CATALOG[name]
    except KeyError:
        raise ModelError(f"unknown nonlinearity {name!r}; known: {sorted(CATALOG)}") from None
