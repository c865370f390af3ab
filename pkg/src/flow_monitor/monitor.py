"""Online conformance monitor.

``TraceMonitor`` holds the per-trace sessions and turns events into verdicts;
it is synchronous and deterministic. ``MonitorServer`` feeds it from TCP
clients (or stdin) speaking newline-delimited JSON, and ``emit`` plays an
event log into a running server.
"""

from __future__ import annotations

import asyncio
import json
import logging
import random
import sys
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, TYPE_CHECKING, Callable, Mapping, Optional

from .analysis import NO_LABEL, ClusterModel, localize
from .conformance import Aligner, DiagnosisVector
from .errors import FlowMonitorError, ProtocolError, SearchExhaustedError, ValidationError
from .events import (
    EVENT_KEYS,
    REQUIRED_KEYS,
    SENTINEL_KEYS,
    Event,
    EventLog,
    default_component_map,
    dumps_record,
    iter_records,
)
from .petri import Marking, WorkflowNet
from .pnml import read_pnml

if TYPE_CHECKING:
    from .config import Config

logger = logging.getLogger(__name__)

EMIT_RETRIES = 3
FINISHED_TTL = 3600.0
MAX_FINISHED = 100_000


@dataclass(frozen=True)
class MonitorConfig:
    window_length: int = 15
    net_path: Path = Path("model.pnml")
    cluster_model_path: Optional[Path] = Path("clusters.json")
    host: str = "127.0.0.1"
    port: int = 7878
    use_stdin: bool = False
    verdict_sink: str = "-"
    idle_timeout: float = 30.0
    node_cap: int = 1_000_000
    heuristic: bool = True
    component_map: Mapping[str, str] = field(default_factory=default_component_map)

    def __post_init__(self) -> None:
        if self.window_length < 1:
            raise ValidationError("window length must be >= 1")
        if self.idle_timeout <= 0:
            raise ValidationError("idle timeout must be positive")

    @classmethod
    def from_config(cls, config: "Config", **overrides) -> "MonitorConfig":
        values = dict(
            window_length=config.window_length,
            net_path=config.monitor_net,
            cluster_model_path=config.monitor_cluster_model,
            host=config.monitor_host,
            port=config.monitor_port,
            verdict_sink=config.verdict_sink,
            idle_timeout=config.idle_timeout,
            node_cap=config.node_cap,
            heuristic=config.use_heuristic,
            component_map=default_component_map(config.procs_per_component, config.components),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TraceSession:
    trace_id: str
    buffer: list[str] = field(default_factory=list)
    marking: Optional[Marking] = None
    diagnosis: Counter = field(default_factory=Counter)
    windows_emitted: int = 0
    next_seq: int = 0
    last_seen: float = 0.0


@dataclass(frozen=True)
class Verdict:
    trace_id: str
    window: Optional[int]
    cost: int
    diagnosis: Mapping[str, int]
    final: bool = False
    label: Optional[str] = None
    cluster: Optional[int] = None
    distance: Optional[float] = None
    timeout: bool = False
    error: Optional[str] = None

    def to_record(self) -> dict:
        record: dict = {"trace_id": self.trace_id}
        if self.final:
            record["final"] = True
        else:
            record["window"] = self.window
        record["cost"] = self.cost
        record["diagnosis"] = dict(sorted(self.diagnosis.items()))
        if self.final:
            record["label"] = self.label
            if self.cluster is not None:
                record["cluster"] = self.cluster
                record["distance"] = round(self.distance or 0.0, 6)
            if self.timeout:
                record["timeout"] = True
        if self.error:
            record["error"] = self.error
        return record


def _event_from(record: dict) -> Event:
    unknown = set(record) - set(EVENT_KEYS)
    missing = REQUIRED_KEYS - set(record)
    if unknown or missing:
        raise ProtocolError(f"bad event keys (unknown {sorted(unknown)}, missing {sorted(missing)})")
    label, component, seq = record["label"], record["component"], record["seq"]
    if not isinstance(label, str) or not isinstance(component, str):
        raise ProtocolError("'label' and 'component' must be strings")
    if isinstance(seq, bool) or not isinstance(seq, int):
        raise ProtocolError("'seq' must be an integer")
    return Event(record["trace_id"], label, component, seq, record.get("ts"))


class TraceMonitor:
    """Per-trace window buffers, chained markings and verdicts."""

    def __init__(
        self,
        net: WorkflowNet,
        window_length: int,
        model: Optional[ClusterModel] = None,
        component_map: Optional[Mapping[str, str]] = None,
        idle_timeout: float = 30.0,
        aligner: Optional[Aligner] = None,
        finished_ttl: float = FINISHED_TTL,
        max_finished: int = MAX_FINISHED,
    ):
        if window_length < 1:
            raise ValidationError("window length must be >= 1")
        self.net = net
        self.window_length = window_length
        self.model = model
        self.component_map = component_map or default_component_map()
        self.idle_timeout = idle_timeout
        self.aligner = aligner or Aligner(net)
        self.sessions: dict[str, TraceSession] = {}
        # trace id -> time it was finished, oldest first
        self.finished: OrderedDict[str, float] = OrderedDict()
        self.finished_ttl = finished_ttl
        self.max_finished = max_finished
        if model is not None and not model.labels:
            logger.warning("Cluster model has no cluster labels; localizations will read %r", NO_LABEL)

    # -- input -----------------------------------------------------------

    def handle_line(self, line: str, now: float = 0.0) -> list[Verdict]:
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ProtocolError(f"invalid JSON: {e.msg}") from e
        if not isinstance(record, dict) or not isinstance(record.get("trace_id"), str):
            raise ProtocolError("record must be an object with a string 'trace_id'")
        return self.handle_record(record, now)

    def handle_record(self, record: dict, now: float = 0.0) -> list[Verdict]:
        trace_id = record["trace_id"]
        if trace_id in self.finished:
            raise ProtocolError(f"trace {trace_id!r} already finished")
        if set(record) == SENTINEL_KEYS and record["end"] is True:
            session = self.sessions.get(trace_id) or TraceSession(trace_id)
            return self.finalize(session, now=now)
        return self.handle_event(_event_from(record), now)

    def handle_event(self, event: Event, now: float = 0.0) -> list[Verdict]:
        session = self.sessions.get(event.trace_id)
        if session is None:
            session = self.sessions[event.trace_id] = TraceSession(event.trace_id)
        if event.seq != session.next_seq:
            raise ProtocolError(
                f"trace {event.trace_id!r}: expected seq {session.next_seq}, got {event.seq}"
            )
        session.next_seq += 1
        session.last_seen = now
        verdicts = []
        if len(session.buffer) == self.window_length:
            verdict = self._guard(session, self._flush)
            if verdict.error:
                return [verdict]
            verdicts.append(verdict)
        session.buffer.append(event.label)
        return verdicts

    def expire(self, now: float) -> list[Verdict]:
        """Finalize sessions idle for at least the timeout and forget old finished ids."""
        stale = [s for s in self.sessions.values() if now - s.last_seen >= self.idle_timeout]
        verdicts = []
        for session in stale:
            logger.info("Trace %s idle for %.1fs; finalizing", session.trace_id, now - session.last_seen)
            verdicts += self.finalize(session, timeout=True, now=now)
        while self.finished and now - next(iter(self.finished.values())) >= self.finished_ttl:
            self.finished.popitem(last=False)
        return verdicts

    def _retire(self, trace_id: str, now: float) -> None:
        self.sessions.pop(trace_id, None)
        self.finished[trace_id] = now
        self.finished.move_to_end(trace_id)
        while len(self.finished) > self.max_finished:
            self.finished.popitem(last=False)

    # -- windows ---------------------------------------------------------

    def _flush(self, session: TraceSession) -> Verdict:
        alignment = self.aligner.window(
            session.buffer, session.marking, subject=f"{session.trace_id}#w{session.windows_emitted}"
        )
        session.diagnosis.update(alignment.deviations())
        session.marking = alignment.end_marking
        session.buffer = []
        verdict = Verdict(
            session.trace_id, session.windows_emitted, alignment.cost, dict(session.diagnosis)
        )
        session.windows_emitted += 1
        return verdict

    def _guard(self, session: TraceSession, step: Callable[[TraceSession], Verdict]) -> Verdict:
        try:
            return step(session)
        except SearchExhaustedError as e:
            logger.error("Dropping trace %s: %s", session.trace_id, e)
            self._retire(session.trace_id, session.last_seen)
            return Verdict(session.trace_id, None, 0, dict(session.diagnosis), final=True, error=str(e))

    def finalize(self, session: TraceSession, timeout: bool = False, now: float = 0.0) -> list[Verdict]:
        """Align the remaining buffer together with the completion pass."""
        self._retire(session.trace_id, now)
        try:
            alignment = self.aligner.window(
                session.buffer,
                session.marking,
                final=True,
                subject=f"{session.trace_id}#w{session.windows_emitted}",
            )
        except SearchExhaustedError as e:
            logger.error("Dropping trace %s: %s", session.trace_id, e)
            return [Verdict(session.trace_id, None, 0, dict(session.diagnosis), final=True, error=str(e))]
        session.diagnosis.update(alignment.deviations())
        diagnosis = dict(session.diagnosis)
        window = Verdict(session.trace_id, session.windows_emitted, alignment.cost, diagnosis)
        session.windows_emitted += 1
        return [window, self._final(session.trace_id, sum(diagnosis.values()), diagnosis, timeout)]

    def _final(self, trace_id: str, cost: int, diagnosis: dict[str, int], timeout: bool) -> Verdict:
        if not diagnosis or self.model is None:
            label = NO_LABEL if not diagnosis else None
            return Verdict(trace_id, None, cost, diagnosis, final=True, label=label, timeout=timeout)
        known = {k: v for k, v in diagnosis.items() if k in self.model.columns}
        if len(known) != len(diagnosis):
            logger.debug("Trace %s: labels outside the cluster model ignored for localization", trace_id)
        vector = DiagnosisVector.from_counter(self.model.columns, Counter(known), trace_id)
        where = localize(self.model, self.model.labels, vector, self.component_map)
        return Verdict(
            trace_id,
            None,
            cost,
            diagnosis,
            final=True,
            label=where.label,
            cluster=where.cluster,
            distance=where.distance,
            timeout=timeout,
        )


# -- verdict sinks -------------------------------------------------------


class VerdictWriter:
    """Writes verdicts as JSON lines; ``"-"`` means stdout."""

    def __init__(self, target: str = "-"):
        self.target = target
        self._stream: IO[str] = sys.stdout if target == "-" else open(target, "a", encoding="utf-8")

    def __call__(self, verdict: Verdict) -> None:
        self._stream.write(json.dumps(verdict.to_record()) + "\n")
        self._stream.flush()

    def close(self) -> None:
        if self._stream is not sys.stdout:
            self._stream.close()


# -- server --------------------------------------------------------------


class MonitorServer:
    def __init__(
        self,
        monitor: TraceMonitor,
        on_verdict: Callable[[Verdict], None],
        reap_interval: Optional[float] = None,
    ):
        self.monitor = monitor
        self.on_verdict = on_verdict
        self.reap_interval = reap_interval or min(1.0, monitor.idle_timeout / 2)
        self._lock = asyncio.Lock()
        self._server: Optional[asyncio.Server] = None
        self._reaper: Optional[asyncio.Task] = None
        # single worker: TraceMonitor is not thread-safe
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="flow-monitor-align")

    async def _call(self, func: Callable[..., list[Verdict]], *args) -> list[Verdict]:
        return await asyncio.get_running_loop().run_in_executor(self._executor, func, *args)

    async def _publish(self, verdicts: list[Verdict]) -> None:
        async with self._lock:
            for verdict in verdicts:
                self.on_verdict(verdict)

    async def feed(self, line: str) -> None:
        """Process one wire line; protocol errors are logged and skipped."""
        if not line.strip():
            return
        now = asyncio.get_running_loop().time()
        try:
            verdicts = await self._call(self.monitor.handle_line, line, now)
        except ProtocolError as e:
            logger.warning("Dropped line: %s", e)
            return
        except FlowMonitorError as e:
            logger.error("Failed to process line: %s", e)
            return
        await self._publish(verdicts)

    async def _handle_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        logger.debug("Client connected: %s", peer)
        try:
            while line := await reader.readline():
                await self.feed(line.decode("utf-8", errors="replace"))
        except ConnectionError as e:
            logger.warning("Client %s disconnected: %s", peer, e)
        finally:
            writer.close()
            logger.debug("Client closed: %s", peer)

    async def _reap(self) -> None:
        while True:
            await asyncio.sleep(self.reap_interval)
            try:
                verdicts = await self._call(self.monitor.expire, asyncio.get_running_loop().time())
                if verdicts:
                    await self._publish(verdicts)
            except Exception:
                logger.exception("Idle-session sweep failed; retrying in %.1fs", self.reap_interval)

    async def start(self, host: str, port: int) -> tuple[str, int]:
        """Bind and start accepting; returns the bound address."""
        self._server = await asyncio.start_server(self._handle_client, host, port)
        self._reaper = asyncio.create_task(self._reap())
        address = self._server.sockets[0].getsockname()
        logger.info("Monitor listening on %s:%d (w=%d)", address[0], address[1], self.monitor.window_length)
        return address[0], address[1]

    async def serve_stdin(self) -> None:
        loop = asyncio.get_running_loop()
        reader = asyncio.StreamReader()
        await loop.connect_read_pipe(lambda: asyncio.StreamReaderProtocol(reader), sys.stdin)
        self._reaper = asyncio.create_task(self._reap())
        while line := await reader.readline():
            await self.feed(line.decode("utf-8", errors="replace"))
        await self.drain()

    async def drain(self) -> None:
        """Finalize every open session (used at shutdown)."""
        now = asyncio.get_running_loop().time()
        for session in list(self.monitor.sessions.values()):
            await self._publish(await self._call(self.monitor.finalize, session, True, now))

    async def close(self) -> None:
        if self._reaper is not None:
            self._reaper.cancel()
            try:
                await self._reaper
            except asyncio.CancelledError:
                pass
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self._executor.shutdown(wait=True)


def load_monitor(cfg: MonitorConfig) -> TraceMonitor:
    """Load the net and cluster model; failures here are fatal at startup."""
    net = read_pnml(cfg.net_path)
    model = None
    if cfg.cluster_model_path is not None and Path(cfg.cluster_model_path).exists():
        model = ClusterModel.load(cfg.cluster_model_path)
    elif cfg.cluster_model_path is not None:
        raise ValidationError(f"cluster model {cfg.cluster_model_path} not found")
    return TraceMonitor(
        net,
        cfg.window_length,
        model=model,
        component_map=cfg.component_map,
        idle_timeout=cfg.idle_timeout,
        aligner=Aligner(net, cfg.node_cap, cfg.heuristic),
    )


async def serve(cfg: MonitorConfig, stop: Optional[asyncio.Event] = None) -> None:
    """Run the monitor until ``stop`` is set (or the task is cancelled)."""
    monitor = load_monitor(cfg)
    writer = VerdictWriter(cfg.verdict_sink)
    server = MonitorServer(monitor, writer)
    try:
        if cfg.use_stdin:
            await server.serve_stdin()
            return
        await server.start(cfg.host, cfg.port)
        await (stop or asyncio.Event()).wait()
        await server.drain()
    finally:
        await server.close()
        writer.close()


# -- emitter -------------------------------------------------------------


def encode_stream(log: EventLog, interleave_seed: int = 0) -> list[str]:
    """Wire lines for ``log``: per-trace order kept, traces interleaved pseudo-randomly."""
    queues: dict[str, list[str]] = {}
    for record in iter_records(log):
        queues.setdefault(record["trace_id"], []).append(dumps_record(record))
    for trace in log:
        lines = queues.setdefault(trace.trace_id, [])
        if trace.events:
            lines.append(dumps_record({"trace_id": trace.trace_id, "end": True}))

    rng = random.Random(interleave_seed)
    pending = [tid for tid in queues if queues[tid]]
    positions = dict.fromkeys(pending, 0)
    out = []
    while pending:
        weights = [len(queues[t]) - positions[t] for t in pending]
        tid = rng.choices(pending, weights=weights)[0]
        out.append(queues[tid][positions[tid]])
        positions[tid] += 1
        if positions[tid] == len(queues[tid]):
            pending.remove(tid)
    return out


async def emit(
    log: EventLog,
    host: str,
    port: int,
    interleave_seed: int = 0,
    retries: int = EMIT_RETRIES,
    backoff: float = 0.2,
) -> int:
    """Stream ``log`` to a monitor; returns the number of lines sent."""
    lines = encode_stream(log, interleave_seed)
    sent = 0
    failures = 0
    while sent < len(lines):
        try:
            _, writer = await asyncio.open_connection(host, port)
        except OSError as e:
            failures += 1
            if failures > retries:
                raise ConnectionError(f"cannot reach monitor at {host}:{port}: {e}") from e
            logger.warning("Connect failed (%s); retry %d/%d", e, failures, retries)
            await asyncio.sleep(backoff * failures)
            continue
        try:
            for line in lines[sent:]:
                writer.write((line + "\n").encode("utf-8"))
                await writer.drain()
                sent += 1
        except ConnectionError as e:
            failures += 1
            if failures > retries:
                raise
            logger.warning("Disconnected after %d lines (%s); retry %d/%d", sent, e, failures, retries)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass
    logger.info("Emitted %d lines for %d traces", sent, len(log))
    return sent
