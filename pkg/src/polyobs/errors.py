"""Exception types raised across the toolkit."""


class PolyObsError(Exception):
    """Base class for all toolkit errors."""


class ModelError(PolyObsError, ValueError):
    """Invalid or inconsistent model data (dimensions, weights, parameters)."""


class SingularDescriptorError(ModelError):
    """A descriptor matrix E(p) is (numerically) singular."""


class NonConstantE(ModelError):
    """The vertex descriptor matrices differ although a constant E is required."""


class OutOfSetError(ModelError):
    """A parameter point lies outside the parameter set and clamping is disabled."""


class SynthesisError(PolyObsError):
    """The synthesis SDP did not produce a usable certificate."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class Infeasible(SynthesisError):
    """The LMI conditions are infeasible."""


class CertificateCheckFailed(SynthesisError):
    """The solver reported success but the returned variables violate the LMIs."""


class SimulationError(PolyObsError):
    """A simulation step failed; ``step`` holds the offending time index."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
