"""RBC/RBC handover scenario, procedure sampling and fault injection.

A scenario is a block-structured workflow (sequences, XOR and AND blocks)
whose activities belong to train-control components. Simulated traces replace
every activity by a procedure of its component, drawn with the procedure
execution probability scheme: the activity's normal procedure with
probability rho, any other procedure of the component uniformly otherwise.
"""

from __future__ import annotations

import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import ScenarioError, ValidationError
from .events import DEFAULT_COMPONENTS, EventLog, Trace, procedures_of

logger = logging.getLogger(__name__)

SCENARIO_VERSION = "1"

GATEWAY_KINDS = ("xor_split", "xor_join", "and_split", "and_join")
ANOMALY_TYPES = ("wrong_order", "skip", "wrong_procedure")

_JOIN_FOR = {"xor_split": "xor_join", "and_split": "and_join"}


@dataclass(frozen=True)
class Activity:
    id: str
    component: str


@dataclass(frozen=True)
class Gateway:
    id: str
    kind: str

    def __post_init__(self) -> None:
        kind = self.kind.lower().replace("-", "_")
        if kind not in GATEWAY_KINDS:
            raise ScenarioError(f"gateway {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)


# -- block tree ------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    activity: str


@dataclass(frozen=True)
class Serial:
    children: tuple["Block", ...]


@dataclass(frozen=True)
class Choice:
    branches: tuple["Block", ...]


@dataclass(frozen=True)
class Parallel:
    branches: tuple["Block", ...]


Block = Union[Step, Serial, Choice, Parallel]


@dataclass(frozen=True)
class ScenarioModel:
    """Workflow over activities and paired XOR/AND gateways.

    The control graph must have one entry and one exit, be acyclic, and every
    split gateway must close in a join of the same kind.
    """

    activities: tuple[Activity, ...]
    gateways: tuple[Gateway, ...]
    edges: tuple[tuple[str, str], ...]
    version: str = "custom"
    tree: Block = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tree", _parse(self))

    @property
    def nodes(self) -> list[str]:
        return [a.id for a in self.activities] + [g.id for g in self.gateways]

    @property
    def entry(self) -> str:
        return _endpoints(self)[0]

    @property
    def exit(self) -> str:
        return _endpoints(self)[1]

    @property
    def components(self) -> list[str]:
        return sorted({a.component for a in self.activities})

    def component_of(self, activity_id: str) -> str:
        for a in self.activities:
            if a.id == activity_id:
                return a.component
        raise KeyError(activity_id)

    def topological_order(self) -> list[str]:
        sorter: TopologicalSorter[str] = TopologicalSorter()
        for node in self.nodes:
            sorter.add(node)
        for src, dst in self.edges:
            sorter.add(dst, src)
        return list(sorter.static_order())

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "activities": [{"id": a.id, "component": a.component} for a in self.activities],
                "gateways": [{"id": g.id, "kind": g.kind} for g in self.gateways],
                "edges": [list(e) for e in self.edges],
            },
            indent=2,
        )


def _endpoints(scn: ScenarioModel) -> tuple[str, str]:
    targets = {dst for _, dst in scn.edges}
    sources = {src for src, _ in scn.edges}
    entries = [n for n in scn.nodes if n not in targets]
    exits = [n for n in scn.nodes if n not in sources]
    if len(entries) != 1 or len(exits) != 1:
        raise ScenarioError(
            f"scenario needs exactly one entry and one exit, found {entries} and {exits}"
        )
    return entries[0], exits[0]


def _parse(scn: ScenarioModel) -> Block:
    ids = scn.nodes
    if len(set(ids)) != len(ids):
        raise ScenarioError("node ids must be unique")
    known = set(ids)
    successors: dict[str, list[str]] = defaultdict(list)
    predecessors: dict[str, list[str]] = defaultdict(list)
    for src, dst in scn.edges:
        if src not in known or dst not in known:
            raise ScenarioError(f"edge ({src}, {dst}) references an unknown node")
        successors[src].append(dst)
        predecessors[dst].append(src)
    try:
        scn.topological_order()
    except CycleError as e:
        raise ScenarioError(f"scenario graph has a cycle: {e.args[1]}") from e

    kinds = {g.id: g.kind for g in scn.gateways}
    for a in scn.activities:
        if len(successors[a.id]) > 1 or len(predecessors[a.id]) > 1:
            raise ScenarioError(f"activity {a.id!r} branches; route it through a gateway")
    entry, exit_ = _endpoints(scn)
    visited: set[str] = set()

    def parse_sequence(node: Optional[str]) -> tuple[Serial, Optional[str]]:
        children: list[Block] = []
        while node is not None:
            kind = kinds.get(node)
            if kind in ("xor_join", "and_join"):
                return Serial(tuple(children)), node
            visited.add(node)
            if kind is None:
                children.append(Step(node))
                nxt = successors[node]
                node = nxt[0] if nxt else None
                continue
            if kind not in _JOIN_FOR:
                raise ScenarioError(f"unexpected gateway {node!r}")
            branches: list[Block] = []
            joins: set[Optional[str]] = set()
            for succ in successors[node]:
                if kinds.get(succ) == _JOIN_FOR[kind]:
                    branches.append(Serial(()))
                    joins.add(succ)
                    continue
                branch, join = parse_sequence(succ)
                branches.append(branch)
                joins.add(join)
            if len(branches) < 2:
                raise ScenarioError(f"split {node!r} needs at least two branches")
            if len(joins) != 1 or None in joins:
                raise ScenarioError(f"split {node!r} is not closed by a single join")
            join = joins.pop()
            assert join is not None
            if kinds[join] != _JOIN_FOR[kind]:
                raise ScenarioError(f"split {node!r} closed by {kinds[join]} {join!r}")
            if len(predecessors[join]) != len(branches):
                raise ScenarioError(f"join {join!r} has inputs from outside its block")
            visited.add(join)
            block_type = Choice if kind == "xor_split" else Parallel
            children.append(block_type(tuple(branches)))
            nxt = successors[join]
            if len(nxt) > 1:
                raise ScenarioError(f"join {join!r} has several outputs")
            node = nxt[0] if nxt else None
        return Serial(tuple(children)), None

    tree, dangling = parse_sequence(entry)
    if dangling is not None:
        raise ScenarioError(f"join {dangling!r} without a matching split")
    if exit_ not in visited or visited != known:
        raise ScenarioError(f"nodes off the entry-exit path: {sorted(known - visited)}")
    return tree


def load_scenario(path: Path) -> ScenarioModel:
    """Read a scenario file ``{activities, edges, gateways}``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return ScenarioModel(
            activities=tuple(Activity(a["id"], a["component"]) for a in data["activities"]),
            gateways=tuple(Gateway(g["id"], g["kind"]) for g in data.get("gateways", [])),
            edges=tuple((str(src), str(dst)) for src, dst in data["edges"]),
            version=str(data.get("version", "custom")),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ScenarioError):
            raise
        raise ScenarioError(f"{path}: malformed scenario file ({e})") from e


def _chain(*nodes: str) -> list[tuple[str, str]]:
    return list(zip(nodes, nodes[1:]))


def default_handover_scenario() -> ScenarioModel:
    """The built-in RBC/RBC handover workflow (version ``SCENARIO_VERSION``).

    Phases: pre-announcement, registration to the accepting RBC (XOR: a second
    on-board mobile vs. switching the single one), movement authority
    generation (AND: route information from the accepting RBC in parallel with
    the train's position report), transition announcement, supervision
    transfer and session termination.
    """
    activities = (
        # pre-announcement
        Activity("hrbc_detect_border_approach", "HRBC"),
        Activity("hrbc_send_pre_announcement", "HRBC"),
        Activity("rtm_deliver_transition_order", "RTM"),
        Activity("evc_store_accepting_rbc_id", "EVC"),
        # registration
        Activity("rtm_open_second_connection", "RTM"),
        Activity("arbc_accept_new_session", "ARBC"),
        Activity("rtm_switch_mobile_network", "RTM"),
        Activity("arbc_register_train", "ARBC"),
        Activity("rtm_confirm_connection", "RTM"),
        # movement authority generation
        Activity("hrbc_request_route_info", "HRBC"),
        Activity("arbc_send_route_info", "ARBC"),
        Activity("evc_send_position_report", "EVC"),
        Activity("rtm_relay_position_report", "RTM"),
        Activity("hrbc_generate_movement_authority", "HRBC"),
        # transition announcement
        Activity("hrbc_announce_transition", "HRBC"),
        Activity("evc_acknowledge_transition", "EVC"),
        # supervision transfer
        Activity("evc_report_border_passed", "EVC"),
        Activity("arbc_take_over_supervision", "ARBC"),
        Activity("arbc_issue_movement_authority", "ARBC"),
        # session termination
        Activity("hrbc_terminate_session", "HRBC"),
        Activity("rtm_close_handing_over_connection", "RTM"),
        Activity("evc_confirm_session_end", "EVC"),
    )
    gateways = (
        Gateway("registration_split", "xor_split"),
        Gateway("registration_join", "xor_join"),
        Gateway("ma_split", "and_split"),
        Gateway("ma_join", "and_join"),
    )
    edges = (
        _chain(
            "hrbc_detect_border_approach",
            "hrbc_send_pre_announcement",
            "rtm_deliver_transition_order",
            "evc_store_accepting_rbc_id",
            "registration_split",
        )
        + _chain(
            "registration_split",
            "rtm_open_second_connection",
            "arbc_accept_new_session",
            "registration_join",
        )
        + _chain(
            "registration_split",
            "rtm_switch_mobile_network",
            "arbc_register_train",
            "registration_join",
        )
        + _chain("registration_join", "rtm_confirm_connection", "ma_split")
        + _chain("ma_split", "hrbc_request_route_info", "arbc_send_route_info", "ma_join")
        + _chain("ma_split", "evc_send_position_report", "rtm_relay_position_report", "ma_join")
        + _chain(
            "ma_join",
            "hrbc_generate_movement_authority",
            "hrbc_announce_transition",
            "evc_acknowledge_transition",
            "evc_report_border_passed",
            "arbc_take_over_supervision",
            "arbc_issue_movement_authority",
            "hrbc_terminate_session",
            "rtm_close_handing_over_connection",
            "evc_confirm_session_end",
        )
    )
    return ScenarioModel(
        activities=activities,
        gateways=gateways,
        edges=tuple(edges),
        version=SCENARIO_VERSION,
    )


# -- procedure execution probabilities -----------------------------------


@dataclass(frozen=True)
class PepConfig:
    rho: float = 0.99
    procs_per_component: int = 10
    comp_order: tuple[str, ...] = DEFAULT_COMPONENTS
    permutation_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError(f"rho must lie in [0, 1), got {self.rho}")
        if self.procs_per_component < 1:
            raise ValidationError("procs_per_component must be >= 1")
        object.__setattr__(self, "comp_order", tuple(self.comp_order))


@dataclass(frozen=True)
class ActivityProcedures:
    """The procedures an activity may invoke; ``normal_index`` marks p_0."""

    activity: str
    component: str
    procedures: tuple[str, ...]
    normal_index: int

    @property
    def normal(self) -> str:
        return self.procedures[self.normal_index]


def procedure_table(scn: ScenarioModel, cfg: PepConfig) -> dict[str, ActivityProcedures]:
    """Assign every activity a random procedure order.

    Each component's procedures are shuffled once with ``permutation_seed``;
    its j-th activity takes that order rotated by j, so activities of one
    component have distinct normal procedures while there are enough of them.
    """
    rng = random.Random(cfg.permutation_seed)
    orders: dict[str, list[int]] = {}
    for component in cfg.comp_order:
        order = list(range(cfg.procs_per_component))
        rng.shuffle(order)
        orders[component] = order

    table: dict[str, ActivityProcedures] = {}
    rank: dict[str, int] = defaultdict(int)
    for activity in scn.activities:
        if activity.component not in orders:
            raise ScenarioError(
                f"activity {activity.id!r} belongs to unknown component {activity.component!r}"
            )
        j = rank[activity.component]
        rank[activity.component] += 1
        order = orders[activity.component]
        table[activity.id] = ActivityProcedures(
            activity=activity.id,
            component=activity.component,
            procedures=tuple(
                procedures_of(activity.component, cfg.procs_per_component, cfg.comp_order)
            ),
            normal_index=order[j % len(order)],
        )
    crowded = [c for c, n in rank.items() if n > cfg.procs_per_component]
    if crowded:
        logger.warning("Components %s have more activities than procedures", crowded)
    return table


def pep(activity: ActivityProcedures, procedure_index: int, cfg: PepConfig) -> float:
    """Probability that ``activity`` executes procedure ``procedure_index``."""
    n = len(activity.procedures)
    if not 0 <= procedure_index < n:
        raise ValidationError(f"procedure index {procedure_index} outside 0..{n - 1}")
    if n == 1:
        return 1.0
    if procedure_index == activity.normal_index:
        return cfg.rho
    return (1.0 - cfg.rho) / (n - 1)


def sample_procedure(activity: ActivityProcedures, rho: float, rng: random.Random) -> str:
    n = len(activity.procedures)
    if n == 1 or rng.random() < rho:
        return activity.normal
    k = rng.randrange(n - 1)
    return activity.procedures[k if k < activity.normal_index else k + 1]


def _walk(block: Block, rng: random.Random) -> list[str]:
    if isinstance(block, Step):
        return [block.activity]
    if isinstance(block, Serial):
        return [a for child in block.children for a in _walk(child, rng)]
    if isinstance(block, Choice):
        return _walk(block.branches[rng.randrange(len(block.branches))], rng)
    # Drawing the next branch proportionally to its remaining length yields
    # every order-respecting interleaving with equal probability.
    runs = [_walk(b, rng) for b in block.branches]
    positions = [0] * len(runs)
    merged: list[str] = []
    remaining = sum(len(r) for r in runs)
    while remaining:
        pick = rng.randrange(remaining)
        for i, run in enumerate(runs):
            left = len(run) - positions[i]
            if pick < left:
                merged.append(run[positions[i]])
                positions[i] += 1
                break
            pick -= left
        remaining -= 1
    return merged


def random_walk(scn: ScenarioModel, rng: random.Random) -> list[str]:
    """One activity sequence from entry to exit."""
    return _walk(scn.tree, rng)


def simulate(
    scn: ScenarioModel,
    cfg: PepConfig,
    n_traces: int,
    seed: int,
    trace_prefix: str = "t",
) -> EventLog:
    """Generate ``n_traces`` procedure-level traces; a pure function of the seeds."""
    if n_traces < 1:
        raise ValidationError("n_traces must be >= 1")
    table = procedure_table(scn, cfg)
    rng = random.Random(seed)
    traces = []
    for i in range(n_traces):
        path = random_walk(scn, rng)
        steps = []
        for activity_id in path:
            proc = table[activity_id]
            steps.append((sample_procedure(proc, cfg.rho, rng), proc.component))
        traces.append(Trace.build(f"{trace_prefix}{i:04d}", steps))
    logger.debug("Simulated %d traces (seed=%s, rho=%s)", n_traces, seed, cfg.rho)
    return EventLog(traces=tuple(traces))


# -- fault injection -------------------------------------------------------


@dataclass(frozen=True)
class FaultSpec:
    target_component: str
    anomaly_types: tuple[str, ...] = ANOMALY_TYPES
    injection_probability: float = 1.0
    seed: int = 0
    procs_per_component: int = 10
    comp_order: tuple[str, ...] = DEFAULT_COMPONENTS

    def __post_init__(self) -> None:
        object.__setattr__(self, "anomaly_types", tuple(self.anomaly_types))
        object.__setattr__(self, "comp_order", tuple(self.comp_order))
        if not self.anomaly_types:
            raise ValidationError("anomaly_types must not be empty")
        unknown = set(self.anomaly_types) - set(ANOMALY_TYPES)
        if unknown:
            raise ValidationError(f"unknown anomaly types {sorted(unknown)}")
        if self.target_component not in self.comp_order:
            raise ValidationError(f"unknown component {self.target_component!r}")
        if not 0.0 <= self.injection_probability <= 1.0:
            raise ValidationError("injection_probability must lie in [0, 1]")


def _effective(kind: str, steps: list[tuple[str, str]], i: int, alternatives: int) -> bool:
    if kind == "wrong_order":
        return i + 1 < len(steps) and steps[i] != steps[i + 1]
    if kind == "wrong_procedure":
        return alternatives > 0
    return True


def _apply(
    kind: str,
    steps: list[tuple[str, str]],
    i: int,
    procedures: list[str],
    rng: random.Random,
) -> int:
    """Inject ``kind`` at position ``i``; returns where the scan resumes."""
    if kind == "skip":
        del steps[i]
        return i
    if kind == "wrong_order":
        steps[i], steps[i + 1] = steps[i + 1], steps[i]
        return i + 2
    label, component = steps[i]
    steps[i] = (rng.choice([p for p in procedures if p != label]), component)
    return i + 1


def inject(log: EventLog, spec: FaultSpec) -> EventLog:
    """Inject control-flow anomalies into events of ``spec.target_component``.

    Every returned trace that has target events carries at least one applied
    anomaly and ``ground_truth = target_component``.
    """
    if not log.traces:
        raise ValidationError("cannot inject into an empty log")
    rng = random.Random(spec.seed)
    procedures = procedures_of(spec.target_component, spec.procs_per_component, spec.comp_order)
    target = spec.target_component
    traces = []
    for trace in log.traces:
        steps = [(e.label, e.component) for e in trace.events]
        if not any(c == target for _, c in steps):
            logger.warning("Trace %s has no %s events; left unchanged", trace.trace_id, target)
            traces.append(trace)
            continue

        applied = 0
        i = 0
        while i < len(steps):
            label, component = steps[i]
            if component != target or rng.random() >= spec.injection_probability:
                i += 1
                continue
            kind = rng.choice(spec.anomaly_types)
            alternatives = sum(1 for p in procedures if p != label)
            if not _effective(kind, steps, i, alternatives):
                i += 1
                continue
            i = _apply(kind, steps, i, procedures, rng)
            applied += 1

        if applied == 0:
            candidates = [
                (j, kind)
                for j, (label, component) in enumerate(steps)
                if component == target
                for kind in spec.anomaly_types
                if _effective(kind, steps, j, sum(1 for p in procedures if p != label))
            ]
            if candidates:
                j, kind = rng.choice(candidates)
                _apply(kind, steps, j, procedures, rng)
            else:
                logger.warning("No applicable anomaly for trace %s", trace.trace_id)

        traces.append(Trace.build(trace.trace_id, steps, ground_truth=target))
    return EventLog(traces=tuple(traces))


def anomaly_types_from(names: Union[str, Sequence[str]]) -> tuple[str, ...]:
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    return tuple(names)
