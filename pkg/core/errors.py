# core/errors.py
"""
Exception hierarchy shared by the planner, cost, scheduler and simulator modules
"""

from typing import Optional, Tuple


class ServingToolkitError(Exception):
    """Base class for every error raised by this package"""


class GraphError(ServingToolkitError, ValueError):
    """Invalid model configuration or graph request"""


class PlannerError(ServingToolkitError, ValueError):
    """Invalid usage records or planner configuration"""


class TraceError(ServingToolkitError, ValueError):
    """Malformed alloc/free trace"""


class FormatError(ServingToolkitError, ValueError):
    """Unparsable input file"""

    def __init__(self, path: str, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class MissingCostError(ServingToolkitError, KeyError):
    """No cost is known for a (seq_len, batch) key"""

    def __init__(self, seq_len: int, batch: int, reason: str = "no cost entry"):
        self.key: Tuple[int, int] = (seq_len, batch)
        self.reason = reason
        super().__init__(seq_len, batch)

    def __str__(self) -> str:
        return f"{self.reason} for (seq_len={self.key[0]}, batch={self.key[1]})"


class WarmupError(ServingToolkitError, RuntimeError):
    """Warm-up executor failed; carries the table measured so far"""

    def __init__(self, key: Tuple[int, int], partial_table, cause: Optional[BaseException] = None):
        self.key = key
        self.partial_table = partial_table
        self.cause = cause
        covered = len(partial_table.entries) if partial_table is not None else 0
        super().__init__(
            f"warm-up failed at (seq_len={key[0]}, batch={key[1]}) after {covered} entries: {cause}"
        )
