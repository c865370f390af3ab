"""Process discovery: learn a workflow net from an event log.

Two miners are available. ``dfg_net`` builds a state-machine net over the
directly-follows graph and accepts every path through the (filtered) graph.
``alpha`` is the classic footprint-based miner; it cannot represent short
loops and refuses logs that contain them.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Optional

from .errors import AlphaUnrepresentableError, DiscoveryError, NotEnabledError, ValidationError
from .events import EventLog, sort_labels
from .petri import Arc, Marking, Transition, WorkflowNet, fire

if TYPE_CHECKING:
    from .config import Config

logger = logging.getLogger(__name__)

ALGORITHMS = ("dfg_net", "alpha")


@dataclass(frozen=True)
class DfgSummary:
    """Directly-follows graph with activity, edge, start and end counts."""

    activities: Mapping[str, int] = field(default_factory=dict)
    edges: Mapping[tuple[str, str], int] = field(default_factory=dict)
    starts: Mapping[str, int] = field(default_factory=dict)
    ends: Mapping[str, int] = field(default_factory=dict)

    def follows(self, a: str, b: str) -> bool:
        return self.edges.get((a, b), 0) > 0

    @property
    def labels(self) -> tuple[str, ...]:
        return sort_labels(self.activities)


@dataclass(frozen=True)
class DiscoveryConfig:
    algorithm: str = "dfg_net"
    variant_coverage: float = 0.75
    min_edge_frequency: float = 0.0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(
                f"unknown discovery algorithm {self.algorithm!r}; choose one of {ALGORITHMS}"
            )
        if not 0.0 < self.variant_coverage <= 1.0:
            raise ValidationError("variant_coverage must be in (0, 1]")
        if not 0.0 <= self.min_edge_frequency <= 1.0:
            raise ValidationError("min_edge_frequency must be in [0, 1]")

    @classmethod
    def from_config(cls, config: "Config") -> "DiscoveryConfig":
        return cls(
            algorithm=config.discovery_algorithm,
            variant_coverage=config.variant_coverage,
            min_edge_frequency=config.min_edge_frequency,
        )


def build_dfg(log: EventLog) -> DfgSummary:
    if not log.traces:
        raise ValidationError("cannot build a directly-follows graph from an empty log")
    activities: Counter = Counter()
    edges: Counter = Counter()
    starts: Counter = Counter()
    ends: Counter = Counter()
    for trace in log:
        labels = trace.labels
        if not labels:
            continue
        activities.update(labels)
        edges.update(zip(labels, labels[1:]))
        starts[labels[0]] += 1
        ends[labels[-1]] += 1
    return DfgSummary(dict(activities), dict(edges), dict(starts), dict(ends))


def filter_variants(log: EventLog, coverage: float) -> EventLog:
    """Keep the most frequent variants until they cover ``coverage`` of the traces."""
    if not 0.0 < coverage <= 1.0:
        raise ValidationError("coverage must be in (0, 1]")
    total = len(log)
    if total == 0 or coverage == 1.0:
        return log
    ranked = sorted(log.variants().items(), key=lambda item: (-item[1], item[0]))
    kept: set[tuple[str, ...]] = set()
    covered = 0
    for variant, count in ranked:
        kept.add(variant)
        covered += count
        if covered >= coverage * total - 1e-9:
            break
    logger.debug("Variant filter kept %d of %d variants", len(kept), len(ranked))
    return EventLog(traces=tuple(t for t in log if t.labels in kept))


def discover(log: EventLog, cfg: Optional[DiscoveryConfig] = None) -> WorkflowNet:
    """γ(Σ) = M: filter variants, then mine with the configured algorithm."""
    cfg = cfg or DiscoveryConfig()
    filtered = filter_variants(log, cfg.variant_coverage)
    if not any(len(t) for t in filtered):
        raise DiscoveryError("no events left to discover from after variant filtering")
    dfg = build_dfg(filtered)
    if cfg.algorithm == "alpha":
        net = _alpha(filtered, dfg)
    else:
        net = _dfg_net(dfg, cfg.min_edge_frequency)
    logger.info(
        "Discovered %s net from %d traces: %d places, %d transitions, %d arcs",
        cfg.algorithm,
        len(filtered),
        len(net.places),
        len(net.transitions),
        len(net.arcs),
    )
    return net


# -- dfg_net -------------------------------------------------------------


def _dfg_net(dfg: DfgSummary, min_edge_frequency: float) -> WorkflowNet:
    edges = dict(dfg.edges)
    if min_edge_frequency > 0 and edges:
        threshold = min_edge_frequency * max(edges.values())
        edges = {e: c for e, c in edges.items() if c >= threshold}

    succ: dict[str, list[str]] = {}
    pred: dict[str, list[str]] = {}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
        pred.setdefault(b, []).append(a)
    alive = _closure(dfg.starts, succ) & _closure(dfg.ends, pred)
    if not alive:
        raise DiscoveryError("edge filtering left no path from a start to an end activity")
    dropped = set(dfg.activities) - alive
    if dropped:
        logger.info("Pruned activities off every start-to-end path: %s", sort_labels(dropped))

    places = ["source"]
    transitions: list[Transition] = []
    arcs: list[tuple[str, str]] = []
    for a in sort_labels(alive):
        places += [f"in_{a}", f"out_{a}"]
        transitions.append(Transition(f"t_{a}", a))
        arcs += [(f"in_{a}", f"t_{a}"), (f"t_{a}", f"out_{a}")]
        if a in dfg.starts:
            transitions.append(Transition(f"start_{a}"))
            arcs += [("source", f"start_{a}"), (f"start_{a}", f"in_{a}")]
        if a in dfg.ends:
            transitions.append(Transition(f"end_{a}"))
            arcs += [(f"out_{a}", f"end_{a}"), (f"end_{a}", "sink")]
    for a, b in sorted(edges, key=lambda e: (sort_labels(e), e)):
        if a in alive and b in alive:
            tid = f"e_{a}_{b}"
            transitions.append(Transition(tid))
            arcs += [(f"out_{a}", tid), (tid, f"in_{b}")]
    places.append("sink")
    return WorkflowNet(
        places=tuple(places),
        transitions=tuple(transitions),
        arcs=tuple(Arc(s, t) for s, t in arcs),
        name="dfg_net",
    )


def _closure(seeds: Mapping[str, int], adjacency: Mapping[str, list[str]]) -> set[str]:
    seen = set(seeds)
    queue = deque(seeds)
    while queue:
        node = queue.popleft()
        for nxt in adjacency.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


# -- alpha ---------------------------------------------------------------


@dataclass(frozen=True)
class Footprint:
    labels: tuple[str, ...]
    causal: frozenset[tuple[str, str]]
    parallel: frozenset[tuple[str, str]]

    def choice(self, a: str, b: str) -> bool:
        return (a, b) not in self.causal and (b, a) not in self.causal and (a, b) not in self.parallel

    def relation(self, a: str, b: str) -> str:
        if (a, b) in self.causal:
            return "->"
        if (b, a) in self.causal:
            return "<-"
        if (a, b) in self.parallel:
            return "||"
        return "#"


def footprint(dfg: DfgSummary) -> Footprint:
    causal = set()
    parallel = set()
    for a, b in dfg.edges:
        if dfg.follows(b, a):
            parallel.add((a, b))
        else:
            causal.add((a, b))
    return Footprint(dfg.labels, frozenset(causal), frozenset(parallel))


def _short_loops(log: EventLog, dfg: DfgSummary) -> Optional[str]:
    for a in dfg.labels:
        if dfg.follows(a, a):
            return f"length-1 loop on {a!r}"
    for trace in log:
        labels = trace.labels
        for i in range(len(labels) - 2):
            if labels[i] == labels[i + 2] and labels[i] != labels[i + 1]:
                return f"length-2 loop {labels[i]!r}-{labels[i + 1]!r} in trace {trace.trace_id!r}"
    return None


def _place_pairs(fp: Footprint) -> list[tuple[frozenset[str], frozenset[str]]]:
    """Maximal (A, B) with A -> B pairwise and A, B internally unrelated."""

    def independent(group: frozenset[str], extra: str) -> bool:
        return fp.choice(extra, extra) and all(fp.choice(extra, g) for g in group)

    start = {(frozenset([a]), frozenset([b])) for a, b in fp.causal}
    seen = set(start)
    queue = deque(start)
    while queue:
        a_set, b_set = queue.popleft()
        for x in fp.labels:
            if x not in a_set and independent(a_set, x) and all((x, b) in fp.causal for b in b_set):
                grown = (a_set | {x}, b_set)
                if grown not in seen:
                    seen.add(grown)
                    queue.append(grown)
            if x not in b_set and independent(b_set, x) and all((a, x) in fp.causal for a in a_set):
                grown = (a_set, b_set | {x})
                if grown not in seen:
                    seen.add(grown)
                    queue.append(grown)
    maximal = [
        (a, b)
        for a, b in seen
        if not any((a, b) != (a2, b2) and a <= a2 and b <= b2 for a2, b2 in seen)
    ]
    return sorted(maximal, key=lambda p: (sort_labels(p[0]), sort_labels(p[1])))


def _alpha(log: EventLog, dfg: DfgSummary) -> WorkflowNet:
    reason = _short_loops(log, dfg)
    if reason:
        raise AlphaUnrepresentableError(reason)
    fp = footprint(dfg)
    pairs = _place_pairs(fp)

    places = ["source"]
    transitions = [Transition(f"t_{a}", a) for a in fp.labels]
    arcs = [("source", f"t_{a}") for a in sort_labels(dfg.starts)]
    for i, (a_set, b_set) in enumerate(pairs):
        pid = f"p{i}"
        places.append(pid)
        arcs += [(f"t_{a}", pid) for a in sort_labels(a_set)]
        arcs += [(pid, f"t_{b}") for b in sort_labels(b_set)]
    arcs += [(f"t_{a}", "sink") for a in sort_labels(dfg.ends)]
    places.append("sink")
    try:
        net = WorkflowNet(
            places=tuple(places),
            transitions=tuple(transitions),
            arcs=tuple(Arc(s, t) for s, t in arcs),
            name="alpha",
        )
    except ValidationError as e:
        raise AlphaUnrepresentableError(str(e)) from e

    for variant in log.variants():
        if not _replays(net, variant):
            raise AlphaUnrepresentableError(f"the mined net cannot replay {list(variant)}")
    return net


def _replays(net: WorkflowNet, labels: tuple[str, ...]) -> bool:
    """Token replay for nets with one visible transition per label and no silent ones."""
    by_label = {t.label: t for t in net.transitions}
    marking: Marking = net.initial_marking
    for label in labels:
        try:
            marking = fire(net, marking, by_label[label])
        except (KeyError, NotEnabledError):
            return False
    return marking == net.final_marking


def footprint_table(dfg: DfgSummary) -> list[list[str]]:
    """Footprint matrix rows (header first) for display."""
    fp = footprint(dfg)
    rows = [[""] + list(fp.labels)]
    for a in fp.labels:
        rows.append([a] + [fp.relation(a, b) for b in fp.labels])
    return rows


__all__ = [
    "ALGORITHMS",
    "DfgSummary",
    "DiscoveryConfig",
    "Footprint",
    "build_dfg",
    "discover",
    "filter_variants",
    "footprint",
    "footprint_table",
]
