"""Errors raised across fedcov."""

from typing import Iterable


class FedcovError(Exception):
    """Base class for every error fedcov raises on purpose."""


class ShapeMismatch(FedcovError, ValueError):
    pass


class EmptyCenter(FedcovError, ValueError):
    pass


class EmptyAccumulator(FedcovError, ValueError):
    pass


class SingularSystem(FedcovError, ArithmeticError):
    pass


class NoCenters(FedcovError, ValueError):
    pass


class DivergenceDetected(FedcovError, ArithmeticError):
    """Non-finite ADMM iterates, usually a badly chosen rho."""


class DegenerateData(FedcovError, ValueError):
    pass


class SpecError(FedcovError, ValueError):
    pass


class ConfigError(FedcovError, ValueError):
    pass


class ProtocolError(FedcovError):
    """Wire data that cannot be decoded or is illegal for the receiver."""


class UnexpectedPhase(ProtocolError):
    pass


class DuplicateSender(ProtocolError):
    pass


class PhaseTimeout(FedcovError):
    """A phase could not complete because some centers never reported."""

    def __init__(self, phase: str, missing: Iterable[str]):
        self.phase = phase
        self.missing = sorted(missing)
        super().__init__(
            f"phase '{phase}' timed out waiting for centers: {', '.join(self.missing)}"
        )
