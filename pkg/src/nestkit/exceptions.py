"""Custom exceptions for nestkit."""

from typing import Any, Dict, List, Optional


class NestkitException(Exception):
    """Base exception for nestkit."""

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.error_code = error_code
        self.details = details or {}


class InvalidArgumentException(NestkitException):
    """Raised when an operation receives an argument outside its domain."""

    def __init__(self, message: str, argument: Optional[str] = None):
        super().__init__(
            f"Invalid argument: {message}",
            error_code="INVALID_ARGUMENT",
            details={"argument": argument},
        )


class NotFoundException(NestkitException):
    """Raised when a node, problem or file cannot be found."""

    def __init__(self, kind: str, key: Any):
        super().__init__(
            f"{kind} not found: {key}",
            error_code="NOT_FOUND",
            details={"kind": kind, "key": key},
        )


class ContractViolationException(NestkitException):
    """Raised when a sampler hands back a point that breaks the tree ordering."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        super().__init__(
            f"Contract violation: {message}",
            error_code="CONTRACT_VIOLATION",
            details={"node_id": node_id},
        )


class ParseException(NestkitException):
    """Raised when a tree file, log or problem file is malformed."""

    def __init__(self, message: str, line: int = 0, offset: int = 0):
        super().__init__(
            f"Parse error at line {line}, offset {offset}: {message}",
            error_code="PARSE_ERROR",
            details={"line": line, "offset": offset},
        )
        self.line = line
        self.offset = offset


class DataException(NestkitException):
    """Raised when a likelihood value is unusable (NaN)."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        where = f" (node {node_id})" if node_id is not None else ""
        super().__init__(
            f"Data error{where}: {message}",
            error_code="DATA_ERROR",
            details={"node_id": node_id},
        )
        self.node_id = node_id


class DegenerateGeometryException(NestkitException):
    """Raised when live points do not span the parameter space."""

    def __init__(self, message: str, n_points: Optional[int] = None):
        super().__init__(
            f"Degenerate geometry: {message}",
            error_code="DEGENERATE_GEOMETRY",
            details={"n_points": n_points},
        )


class BudgetExhaustedException(NestkitException):
    """Raised when rejection sampling runs out of proposals."""

    def __init__(self, draws: int, evaluations: int, budget: int):
        super().__init__(
            f"Rejection budget of {budget} draws exhausted "
            f"({evaluations} likelihood evaluations, none above threshold)",
            error_code="BUDGET_EXHAUSTED",
            details={"draws": draws, "evaluations": evaluations, "budget": budget},
        )
        self.draws = draws
        self.evaluations = evaluations


class StuckWalkerException(NestkitException):
    """Raised when a step sampler cannot move away from its current point."""

    def __init__(self, message: str, evaluations: int = 0):
        super().__init__(
            f"Walker stuck: {message}",
            error_code="STUCK_WALKER",
            details={"evaluations": evaluations},
        )


class PlateauDetectedException(NestkitException):
    """Raised in error mode when live points share the lowest likelihood."""

    def __init__(self, node_ids: List[int], log_likelihood: float):
        super().__init__(
            f"Likelihood plateau at logL={log_likelihood!r}: "
            f"{len(node_ids)} live points tied ({sorted(node_ids)[:10]})",
            error_code="PLATEAU_DETECTED",
            details={"node_ids": sorted(node_ids), "log_likelihood": log_likelihood},
        )
        self.node_ids = sorted(node_ids)


class InvalidStateException(NestkitException):
    """Raised when an object is queried before it holds enough data."""

    def __init__(self, message: str):
        super().__init__(f"Invalid state: {message}", error_code="INVALID_STATE")


class ConfigurationException(NestkitException):
    """Raised when configuration is invalid."""

    def __init__(self, message: str, config_key: Optional[str] = None):
        super().__init__(
            f"Configuration error: {message}",
            error_code="CONFIGURATION_ERROR",
            details={"config_key": config_key},
        )


class ExternalLikelihoodException(NestkitException):
    """Raised when an external likelihood process misbehaves."""

    def __init__(self, command: str, reason: str):
        super().__init__(
            f"External likelihood '{command}' failed: {reason}",
            error_code="EXTERNAL_LIKELIHOOD_ERROR",
            details={"command": command, "reason": reason},
        )


def handle_linalg_exception(e: Exception, context: str = "") -> NestkitException:
    """Convert numpy linear algebra failures to nestkit exceptions."""
    from numpy.linalg import LinAlgError

    error_msg = str(e)

    if isinstance(e, NestkitException):
        return e

    elif isinstance(e, LinAlgError):
        return DegenerateGeometryException(
            f"{context}: {error_msg}" if context else error_msg
        )

    elif isinstance(e, FloatingPointError):
        return DegenerateGeometryException(
            f"{context}: floating point error {error_msg}"
        )

    else:
        return NestkitException(
            f"Unexpected error in {context}: {error_msg}", "UNKNOWN_ERROR"
        )
