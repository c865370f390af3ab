"""Exception types raised by flow-monitor."""

from __future__ import annotations

from pathlib import Path
from typing import Optional


class FlowMonitorError(Exception):
    """Base class for all flow-monitor errors."""


class ValidationError(FlowMonitorError, ValueError):
    """Input violates a documented precondition."""


class LogFormatError(ValidationError):
    """An event log file could not be parsed."""

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class ScenarioError(ValidationError):
    """A scenario model is malformed (pairing, cycles, entry/exit)."""


class NotEnabledError(FlowMonitorError):
    """A transition was fired in a marking that does not enable it."""


class PnmlError(ValidationError):
    """A PNML document is outside the supported subset."""

    def __init__(self, message: str, element: str = ""):
        self.element = element
        super().__init__(f"{element}: {message}" if element else message)


class DiscoveryError(FlowMonitorError):
    """Process discovery could not produce a workflow net."""


class AlphaUnrepresentableError(DiscoveryError):
    """The log contains behaviour the alpha miner cannot represent."""

    def __init__(self, reason: str):
        super().__init__(f"{reason}; use the dfg_net algorithm for this log")


class SearchExhaustedError(FlowMonitorError):
    """Alignment search hit its node cap before reaching a goal state."""

    def __init__(self, node_cap: int, subject: str = "", unreachable: bool = False):
        self.node_cap = node_cap
        self.unreachable = unreachable
        suffix = f" for {subject}" if subject else ""
        if unreachable:
            message = f"final marking is unreachable{suffix} (explored fewer than {node_cap} nodes)"
        else:
            message = f"alignment search exhausted {node_cap} nodes{suffix}"
        super().__init__(message)


class ClusteringError(ValidationError):
    """Clustering input or parameters are invalid."""


class ProtocolError(FlowMonitorError):
    """A monitor wire record is malformed or out of protocol."""
