"""Alignment-based conformance checking and diagnosis vectors.

Alignments are optimal under unit costs (log and model moves cost 1, sync and
tau moves cost 0). The search is Dijkstra over the synchronous product of net
and trace, optionally guided by an admissible lower bound: the number of
remaining events whose label no transition carries.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import LogFormatError, SearchExhaustedError, ValidationError
from .events import Event, EventLog, Trace, sort_labels
from .petri import Marking, WorkflowNet

if TYPE_CHECKING:
    from .config import Config

logger = logging.getLogger(__name__)

DEFAULT_NODE_CAP = 1_000_000
DEFAULT_CACHE_SIZE = 4096

Labels = Union[Trace, Sequence[Event], Sequence[str]]
_State = tuple[tuple[int, ...], int]


class MoveKind(str, Enum):
    SYNC = "sync"
    LOG = "log_move"
    MODEL = "model_move"
    TAU = "tau_move"


@dataclass(frozen=True)
class Move:
    """One alignment step.

    ``label`` is the event label for sync and log moves and the transition
    label for model moves; tau moves carry only the transition id.
    """

    kind: MoveKind
    label: Optional[str] = None
    transition_id: Optional[str] = None

    @property
    def cost(self) -> int:
        return 1 if self.kind in (MoveKind.LOG, MoveKind.MODEL) else 0

    def __str__(self) -> str:
        if self.kind is MoveKind.TAU:
            return f"tau({self.transition_id})"
        return f"{self.kind.value}({self.label})"


@dataclass(frozen=True)
class Alignment:
    moves: tuple[Move, ...]
    cost: int
    end_marking: Marking
    complete: bool

    def log_projection(self) -> tuple[str, ...]:
        return tuple(
            m.label for m in self.moves if m.kind in (MoveKind.SYNC, MoveKind.LOG) and m.label
        )

    def deviations(self) -> Counter:
        """Deviation counts per label (log moves plus labeled model moves)."""
        return Counter(m.label for m in self.moves if m.cost)

    @property
    def fitting(self) -> bool:
        return self.cost == 0


@dataclass(frozen=True)
class DiagnosisVector:
    """Per-activity deviation counts d_σ over an ordered column universe."""

    columns: tuple[str, ...]
    counts: tuple[int, ...]
    subject: str
    window: Optional[int] = None
    ground_truth: Optional[str] = None

    def __post_init__(self) -> None:
        if len(self.columns) != len(self.counts):
            raise ValidationError("diagnosis counts do not match the column universe")
        if any(c < 0 for c in self.counts):
            raise ValidationError("diagnosis counts must be non-negative")

    @classmethod
    def from_counter(
        cls,
        columns: Sequence[str],
        deviations: Counter,
        subject: str,
        window: Optional[int] = None,
        ground_truth: Optional[str] = None,
        binary: bool = False,
    ) -> "DiagnosisVector":
        unknown = set(deviations) - set(columns)
        if unknown:
            raise ValidationError(f"deviating labels outside the column universe: {sorted(unknown)}")
        counts = tuple(
            min(deviations.get(c, 0), 1) if binary else deviations.get(c, 0) for c in columns
        )
        return cls(tuple(columns), counts, subject, window, ground_truth)

    def __getitem__(self, label: str) -> int:
        return self.counts[self.columns.index(label)]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def nonzero(self) -> dict[str, int]:
        return {c: n for c, n in zip(self.columns, self.counts) if n}

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float)

    def reindex(self, columns: Sequence[str]) -> "DiagnosisVector":
        return DiagnosisVector.from_counter(
            columns, Counter(self.nonzero()), self.subject, self.window, self.ground_truth
        )


@dataclass(frozen=True)
class DiagnosisMatrix:
    """D ∈ R^{k×m}: one diagnosis vector per trace over shared columns."""

    columns: tuple[str, ...]
    rows: tuple[DiagnosisVector, ...] = ()

    def __post_init__(self) -> None:
        for row in self.rows:
            if row.columns != self.columns:
                raise ValidationError(f"row {row.subject!r} uses a different column map")

    @property
    def k(self) -> int:
        return len(self.rows)

    @property
    def m(self) -> int:
        return len(self.columns)

    @property
    def index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.columns)}

    @property
    def trace_ids(self) -> list[str]:
        return [r.subject for r in self.rows]

    @property
    def ground_truth(self) -> list[Optional[str]]:
        return [r.ground_truth for r in self.rows]

    def to_array(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.m))
        return np.vstack([r.as_array() for r in self.rows])

    def select(self, indices: Iterable[int]) -> "DiagnosisMatrix":
        return DiagnosisMatrix(self.columns, tuple(self.rows[i] for i in indices))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            [list(r.counts) for r in self.rows], columns=list(self.columns), dtype=int
        )
        if any(g is not None for g in self.ground_truth):
            frame.insert(0, "ground_truth", [g or "" for g in self.ground_truth])
        frame.insert(0, "trace_id", self.trace_ids)
        return frame

    def write_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path: Path) -> "DiagnosisMatrix":
        try:
            frame = pd.read_csv(path, dtype={"trace_id": str, "ground_truth": str}, keep_default_na=False)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise LogFormatError(f"cannot read diagnosis matrix: {e}", path=Path(path)) from e
        if "trace_id" not in frame.columns:
            raise LogFormatError("diagnosis matrix has no trace_id column", path=Path(path))
        has_truth = "ground_truth" in frame.columns
        columns = tuple(c for c in frame.columns if c not in ("trace_id", "ground_truth"))
        rows = []
        for line, record in enumerate(frame.to_dict(orient="records"), start=2):
            try:
                counts = tuple(int(record[c]) for c in columns)
            except (TypeError, ValueError) as e:
                raise LogFormatError(f"non-integer count: {e}", path=Path(path), line=line) from e
            truth = record["ground_truth"] if has_truth and record["ground_truth"] else None
            rows.append(DiagnosisVector(columns, counts, str(record["trace_id"]), ground_truth=truth))
        return cls(columns, tuple(rows))


# -- search --------------------------------------------------------------


def _labels_of(items: Labels) -> tuple[str, ...]:
    if isinstance(items, Trace):
        return items.labels
    return tuple(e.label if isinstance(e, Event) else e for e in items)


@dataclass
class Aligner:
    """Optimal aligner bound to one net; keeps the most recent ``cache_size`` results."""

    net: WorkflowNet
    node_cap: int = DEFAULT_NODE_CAP
    heuristic: bool = True
    cache_size: int = DEFAULT_CACHE_SIZE
    _cache: OrderedDict = field(default_factory=OrderedDict, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.node_cap < 1:
            raise ValidationError("node_cap must be >= 1")
        if self.cache_size < 0:
            raise ValidationError("cache_size must be >= 0")

    @classmethod
    def from_config(cls, net: WorkflowNet, config: "Config") -> "Aligner":
        return cls(net, node_cap=config.node_cap, heuristic=config.use_heuristic)

    def complete(self, trace: Labels, subject: str = "") -> Alignment:
        c = self.net.compiled
        return self._align(_labels_of(trace), c.initial, True, subject)

    def window(
        self, window: Labels, start: Optional[Marking] = None, final: bool = False, subject: str = ""
    ) -> Alignment:
        """Align ``window`` from ``start``; with ``final`` the final marking must be reached."""
        c = self.net.compiled
        vec = c.initial if start is None else c.to_vector(start)
        return self._align(_labels_of(window), vec, final, subject)

    def windowed(self, trace: Labels, window_length: int, subject: str = "") -> list[Alignment]:
        """Chained window alignments; the last window also completes to the final marking."""
        if window_length < 1:
            raise ValidationError("window length must be >= 1")
        labels = _labels_of(trace)
        chunks = [labels[i : i + window_length] for i in range(0, len(labels), window_length)] or [()]
        marking: Optional[Marking] = None
        result = []
        for index, chunk in enumerate(chunks):
            last = index == len(chunks) - 1
            alignment = self.window(chunk, marking, final=last, subject=f"{subject}#w{index}")
            result.append(alignment)
            marking = alignment.end_marking
        return result

    def _align(self, labels: tuple[str, ...], start: tuple[int, ...], final: bool, subject: str) -> Alignment:
        key = (labels, start, final)
        cached = self._cache.get(key)
        if cached is not None:
            self._cache.move_to_end(key)
            return cached
        moves, cost, end = self._search(labels, start, final, subject)
        c = self.net.compiled
        cached = Alignment(moves, cost, c.to_marking(end), end == c.final)
        self._cache[key] = cached
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return cached

    def _search(
        self, labels: tuple[str, ...], start: tuple[int, ...], final: bool, subject: str
    ) -> tuple[tuple[Move, ...], int, tuple[int, ...]]:
        c = self.net.compiled
        n = len(labels)
        bound = [0] * (n + 1)
        if self.heuristic:
            for i in range(n - 1, -1, -1):
                bound[i] = bound[i + 1] + (labels[i] not in self.net.labels)

        origin: _State = (start, 0)
        best: dict[_State, int] = {origin: 0}
        parent: dict[_State, tuple[_State, Move]] = {}
        closed: set[_State] = set()
        heap: list[tuple[int, int, _State]] = [(bound[0], 0, origin)]
        counter = 1

        while heap:
            _, _, state = heapq.heappop(heap)
            if state in closed:
                continue
            closed.add(state)
            vec, i = state
            g = best[state]
            if i == n and (not final or vec == c.final):
                return self._path(parent, state), g, vec
            if len(closed) >= self.node_cap:
                raise SearchExhaustedError(self.node_cap, subject)
            for succ, move in self._successors(vec, i, labels):
                cost = g + move.cost
                if cost < best.get(succ, math.inf):
                    best[succ] = cost
                    parent[succ] = (state, move)
                    heapq.heappush(heap, (cost + bound[succ[1]], counter, succ))
                    counter += 1
        raise SearchExhaustedError(self.node_cap, subject, unreachable=True)

    def _successors(self, vec: tuple[int, ...], i: int, labels: tuple[str, ...]):
        """Successor states ordered sync, tau, model, log; transitions by id."""
        c = self.net.compiled
        current = labels[i] if i < len(labels) else None
        syncs, taus, models = [], [], []
        for t in c.enabled(vec):
            tr = c.transitions[t]
            nxt = c.fire(vec, t)
            if tr.label is None:
                taus.append(((nxt, i), Move(MoveKind.TAU, None, tr.id)))
                continue
            if tr.label == current:
                syncs.append(((nxt, i + 1), Move(MoveKind.SYNC, tr.label, tr.id)))
            models.append(((nxt, i), Move(MoveKind.MODEL, tr.label, tr.id)))
        yield from syncs
        yield from taus
        yield from models
        if current is not None:
            yield (vec, i + 1), Move(MoveKind.LOG, current)

    @staticmethod
    def _path(parent: dict[_State, tuple[_State, Move]], state: _State) -> tuple[Move, ...]:
        moves = []
        while state in parent:
            state, move = parent[state]
            moves.append(move)
        return tuple(reversed(moves))


def align_complete(
    net: WorkflowNet, trace: Labels, node_cap: int = DEFAULT_NODE_CAP, heuristic: bool = True
) -> Alignment:
    return Aligner(net, node_cap, heuristic).complete(trace)


def align_window(
    net: WorkflowNet,
    window: Labels,
    start: Optional[Marking] = None,
    node_cap: int = DEFAULT_NODE_CAP,
    heuristic: bool = True,
) -> Alignment:
    """Align a window from ``start``; reaching the final marking is not required."""
    return Aligner(net, node_cap, heuristic).window(window, start)


def windowed_diagnose(
    net: WorkflowNet,
    trace: Trace,
    window_length: int,
    columns: Optional[Sequence[str]] = None,
    binary: bool = False,
    aligner: Optional[Aligner] = None,
) -> DiagnosisVector:
    """One diagnosis vector per trace, summed over its chained windows."""
    aligner = aligner or Aligner(net)
    deviations: Counter = Counter()
    for alignment in aligner.windowed(trace, window_length, subject=trace.trace_id):
        deviations.update(alignment.deviations())
    if columns is None:
        columns = sort_labels(set(net.labels) | set(trace.labels))
    return DiagnosisVector.from_counter(
        columns, deviations, trace.trace_id, ground_truth=trace.ground_truth, binary=binary
    )


def diagnose_log(
    net: WorkflowNet,
    log: EventLog,
    window_length: int,
    binary: bool = False,
    aligner: Optional[Aligner] = None,
) -> DiagnosisMatrix:
    """Diagnosis matrix with columns sorted over A_M ∪ A_Σ."""
    aligner = aligner or Aligner(net)
    columns = sort_labels(set(net.labels) | set(log.activity_universe))
    rows = tuple(
        windowed_diagnose(net, trace, window_length, columns, binary, aligner) for trace in log
    )
    nonzero = sum(1 for r in rows if r.total)
    logger.info(
        "Diagnosed %d traces (w=%d): %d with deviations, %d columns",
        len(rows),
        window_length,
        nonzero,
        len(columns),
    )
    return DiagnosisMatrix(columns, rows)
