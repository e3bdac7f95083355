"""Robust observers for polytopic nonlinear descriptor systems via LMIs."""

__version__ = "0.1.0"

from .errors import (CertificateCheckFailed, Infeasible, ModelError, NonConstantE, OutOfSetError,  # noqa: E402
                     PolyObsError, SimulationError, SingularDescriptorError, SynthesisError)
from .model import (CoordinateMap, PolytopicDescriptorSystem, VertexBundle, coords, evaluate,  # noqa: E402
                    load_model, min_singular_value_E, partition_box)

__all__ = [
    "__version__", "CertificateCheckFailed", "Infeasible", "ModelError", "NonConstantE", "OutOfSetError",
    "PolyObsError", "SimulationError", "SingularDescriptorError", "SynthesisError", "CoordinateMap",
    "PolytopicDescriptorSystem", "VertexBundle", "coords", "evaluate", "load_model", "min_singular_value_E",
    "partition_box",
]
