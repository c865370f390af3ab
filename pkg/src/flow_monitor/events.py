"""Trace and event data model, activity bookkeeping and log serialization.

Logs are read and written as JSON Lines (one event per line, the same
record the monitor receives on the wire) or as CSV for convenience.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .errors import LogFormatError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_COMPONENTS: tuple[str, ...] = ("ARBC", "EVC", "HRBC", "RTM")

EVENT_KEYS = ("trace_id", "label", "component", "seq", "ts", "ground_truth")
REQUIRED_KEYS = frozenset({"trace_id", "label", "component", "seq"})
SENTINEL_KEYS = frozenset({"trace_id", "end"})
CSV_COLUMNS = ["trace_id", "label", "component", "seq", "ts", "ground_truth"]

_DIGITS = re.compile(r"(\d+)")


def label_sort_key(label: str) -> tuple:
    """Natural sort key: "P2" sorts before "P10"."""
    return tuple(
        (0, int(part), "") if part.isdigit() else (1, 0, part)
        for part in _DIGITS.split(label)
        if part
    )


def sort_labels(labels: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(labels), key=label_sort_key))


@dataclass(frozen=True)
class Event:
    """One executed procedure, attributed to the component that ran it."""

    trace_id: str
    label: str
    component: str
    seq: int
    timestamp: Optional[int] = None

    def to_record(self, ground_truth: Optional[str] = None) -> dict:
        record: dict = {
            "trace_id": self.trace_id,
            "label": self.label,
            "component": self.component,
            "seq": self.seq,
        }
        if self.timestamp is not None:
            record["ts"] = self.timestamp
        if ground_truth is not None:
            record["ground_truth"] = ground_truth
        return record


@dataclass(frozen=True)
class Trace:
    """An ordered execution trace. ``ground_truth`` is for evaluation only."""

    trace_id: str
    events: tuple[Event, ...]
    ground_truth: Optional[str] = None

    def __post_init__(self) -> None:
        for expected, event in enumerate(self.events):
            if event.seq != expected:
                raise ValidationError(
                    f"trace {self.trace_id!r}: seq {event.seq} at position {expected}"
                )
            if event.trace_id != self.trace_id:
                raise ValidationError(
                    f"trace {self.trace_id!r} holds an event of trace {event.trace_id!r}"
                )

    def __len__(self) -> int:
        return len(self.events)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(e.label for e in self.events)

    @classmethod
    def build(
        cls,
        trace_id: str,
        steps: Sequence[tuple[str, str]],
        ground_truth: Optional[str] = None,
    ) -> "Trace":
        """Create a trace from (label, component) pairs, numbering seq from 0."""
        events = tuple(
            Event(trace_id=trace_id, label=label, component=component, seq=i)
            for i, (label, component) in enumerate(steps)
        )
        return cls(trace_id=trace_id, events=events, ground_truth=ground_truth)


@dataclass(frozen=True)
class EventLog:
    """A set of traces with its activity universe and label→component map."""

    traces: tuple[Trace, ...] = ()
    activity_universe: tuple[str, ...] = ()
    component_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for trace in self.traces:
            if trace.trace_id in seen:
                raise ValidationError(f"duplicate trace id {trace.trace_id!r}")
            seen.add(trace.trace_id)
        labels = sort_labels(e.label for t in self.traces for e in t.events)
        if self.activity_universe and tuple(self.activity_universe) != labels:
            raise ValidationError("activity universe does not match the traced labels")
        object.__setattr__(self, "activity_universe", labels)
        mapping = dict(self.component_map)
        for trace in self.traces:
            for event in trace.events:
                known = mapping.setdefault(event.label, event.component)
                if known != event.component:
                    raise ValidationError(
                        f"label {event.label!r} attributed to both {known!r} "
                        f"and {event.component!r}"
                    )
        object.__setattr__(self, "component_map", MappingProxyType(mapping))

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.traces)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        return self.traces == other.traces

    def __hash__(self) -> int:
        return hash(self.traces)

    @property
    def total_events(self) -> int:
        return sum(len(t) for t in self.traces)

    def variants(self) -> Counter:
        """Distinct label sequences with their trace counts."""
        return Counter(t.labels for t in self.traces)

    @classmethod
    def concat(cls, *logs: "EventLog") -> "EventLog":
        return cls(traces=tuple(t for log in logs for t in log.traces))


def default_component_map(
    procs_per_component: int = 10,
    comp_order: Sequence[str] = DEFAULT_COMPONENTS,
) -> dict[str, str]:
    """Map procedure labels "P<i>" to ``comp_order[i // procs_per_component]``."""
    if procs_per_component < 1:
        raise ValidationError("procs_per_component must be >= 1")
    return {
        f"P{i}": comp_order[i // procs_per_component]
        for i in range(procs_per_component * len(comp_order))
    }


def procedures_of(
    component: str,
    procs_per_component: int = 10,
    comp_order: Sequence[str] = DEFAULT_COMPONENTS,
) -> list[str]:
    """The procedure labels implemented by ``component``, in index order."""
    if component not in comp_order:
        raise ValidationError(f"unknown component {component!r}")
    base = list(comp_order).index(component) * procs_per_component
    return [f"P{base + i}" for i in range(procs_per_component)]


# -- reading -------------------------------------------------------------


class _TraceBuilder:
    def __init__(self, trace_id: str):
        self.trace_id = trace_id
        self.events: dict[int, Event] = {}
        self.ground_truth: Optional[str] = None
        self.ended = False

    def finish(self, path: Path) -> Trace:
        seqs = sorted(self.events)
        for expected, seq in enumerate(seqs):
            if seq != expected:
                raise LogFormatError(
                    f"trace {self.trace_id!r}: seq values not contiguous "
                    f"(missing {expected})",
                    path,
                )
        return Trace(
            trace_id=self.trace_id,
            events=tuple(self.events[s] for s in seqs),
            ground_truth=self.ground_truth,
        )


def _check_int(value: object, key: str, path: Path, line: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise LogFormatError(f"{key!r} must be an integer", path, line)
    return value


def _accept(
    builders: dict[str, _TraceBuilder],
    record: dict,
    path: Path,
    line: int,
    component_map: Optional[Mapping[str, str]],
    components: Optional[Sequence[str]],
) -> None:
    trace_id = record["trace_id"]
    if not isinstance(trace_id, str):
        raise LogFormatError("'trace_id' must be a string", path, line)
    builder = builders.setdefault(trace_id, _TraceBuilder(trace_id))

    if record.get("end") is True and set(record) == SENTINEL_KEYS:
        builder.ended = True
        return
    if builder.ended:
        raise LogFormatError(f"event for trace {trace_id!r} after its end marker", path, line)

    unknown = set(record) - set(EVENT_KEYS)
    if unknown:
        raise LogFormatError(f"unknown keys {sorted(unknown)}", path, line)
    missing = REQUIRED_KEYS - set(record)
    if missing:
        raise LogFormatError(f"missing keys {sorted(missing)}", path, line)

    label, component = record["label"], record["component"]
    if not isinstance(label, str) or not isinstance(component, str):
        raise LogFormatError("'label' and 'component' must be strings", path, line)
    seq = _check_int(record["seq"], "seq", path, line)
    if seq < 0:
        raise LogFormatError("'seq' must be non-negative", path, line)
    ts = record.get("ts")
    if ts is not None:
        ts = _check_int(ts, "ts", path, line)

    if components is not None and component not in components:
        raise LogFormatError(f"unknown component {component!r}", path, line)
    if component_map is not None and component_map.get(label) != component:
        raise LogFormatError(
            f"unknown component {component!r} for label {label!r}", path, line
        )
    if seq in builder.events:
        raise LogFormatError(f"duplicate seq {seq} in trace {trace_id!r}", path, line)

    ground_truth = record.get("ground_truth")
    if ground_truth is not None:
        if builder.events and builder.ground_truth != ground_truth:
            raise LogFormatError(f"inconsistent ground_truth in trace {trace_id!r}", path, line)
        builder.ground_truth = ground_truth
    elif builder.ground_truth is not None:
        raise LogFormatError(f"inconsistent ground_truth in trace {trace_id!r}", path, line)

    builder.events[seq] = Event(
        trace_id=trace_id, label=label, component=component, seq=seq, timestamp=ts
    )


def _jsonl_records(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise LogFormatError(f"invalid JSON: {e.msg}", path, line_no) from e
            if not isinstance(record, dict) or "trace_id" not in record:
                raise LogFormatError("record must be an object with 'trace_id'", path, line_no)
            yield line_no, record


def _csv_records(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return
        unknown = set(reader.fieldnames) - set(CSV_COLUMNS)
        if unknown:
            raise LogFormatError(f"unknown columns {sorted(unknown)}", path, 1)
        for row in reader:
            line_no = reader.line_num
            record: dict = {}
            for key, value in row.items():
                if value is None or value == "":
                    continue
                if key in ("seq", "ts"):
                    try:
                        record[key] = int(value)
                    except ValueError as e:
                        raise LogFormatError(f"{key!r} must be an integer", path, line_no) from e
                else:
                    record[key] = value
            if "trace_id" not in record:
                raise LogFormatError("missing trace_id", path, line_no)
            yield line_no, record


def read_log(
    path: Path,
    format: str = "jsonl",
    component_map: Optional[Mapping[str, str]] = None,
    components: Optional[Sequence[str]] = None,
) -> EventLog:
    """Parse an event log file.

    Args:
        path: Log file.
        format: ``jsonl`` or ``csv``.
        component_map: When given, every event's component must match it.
        components: When given, the allowed component identifiers.

    Raises:
        LogFormatError: parse errors (with line number), duplicate or
            non-contiguous seq values, unknown components.
    """
    path = Path(path)
    if format == "jsonl":
        records = _jsonl_records(path)
    elif format == "csv":
        records = _csv_records(path)
    else:
        raise ValidationError(f"unsupported log format {format!r}")

    builders: dict[str, _TraceBuilder] = {}
    for line_no, record in records:
        _accept(builders, record, path, line_no, component_map, components)

    traces = tuple(b.finish(path) for b in builders.values())
    if not traces:
        logger.warning("Event log %s is empty", path)
    try:
        return EventLog(traces=traces)
    except ValidationError as e:
        raise LogFormatError(str(e), path) from e


def dumps_record(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False)


def iter_records(log: EventLog) -> Iterator[dict]:
    for trace in log.traces:
        if not trace.events:
            yield {"trace_id": trace.trace_id, "end": True}
        for event in trace.events:
            yield event.to_record(trace.ground_truth)


def write_log(log: EventLog, path: Path, format: str = "jsonl") -> None:
    """Serialize ``log`` so that ``read_log`` reproduces it exactly."""
    path = Path(path)
    if format == "jsonl":
        with open(path, "w", encoding="utf-8") as f:
            for record in iter_records(log):
                f.write(dumps_record(record) + "\n")
    elif format == "csv":
        if any(not t.events for t in log.traces):
            raise ValidationError("empty traces cannot be written as CSV")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for record in iter_records(log):
                writer.writerow({k: record.get(k, "") for k in CSV_COLUMNS})
    else:
        raise ValidationError(f"unsupported log format {format!r}")
    logger.debug("Wrote %d traces to %s", len(log), path)


def format_from_path(path: Path) -> str:
    return "csv" if Path(path).suffix.lower() == ".csv" else "jsonl"
