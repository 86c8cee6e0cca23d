"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class NCMFGError(Exception):
    """Base class. ``kind`` is the machine-readable tag used by the CLI."""

    kind = "error"


class ConfigError(NCMFGError, ValueError):
    kind = "config-invalid"


class ConfigNotFoundError(ConfigError):
    kind = "config-not-found"


class ExpressionError(ConfigError):
    kind = "expression-invalid"


class OutOfDomainError(NCMFGError, ValueError):
    kind = "out-of-domain"


class StencilError(NCMFGError, ValueError):
    kind = "stencil"


class ContractError(NCMFGError, ValueError):
    kind = "contract"


class CertificationError(NCMFGError):
    kind = "certification-failed"


class ExcursionError(NCMFGError):
    """A trajectory left the padded computational box."""

    kind = "excursion"

    def __init__(self, message: str, time: float, index: int | None = None):
        super().__init__(message)
        self.time = time
        self.index = index


class NonConvergenceError(NCMFGError):
    """Shooting failed from every start; ``trace`` holds per-start defect histories."""

    kind = "shooting-nonconvergence"

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class SpuriousExtremalError(NonConvergenceError):
    kind = "spurious-extremal"
