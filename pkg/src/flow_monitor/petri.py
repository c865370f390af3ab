"""Workflow Petri nets: structure, firing semantics and bounded soundness checks.

Arcs have weight 1. Safeness is not enforced, so markings may put several
tokens on a place. A transition without input places is never enabled.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Optional

from .errors import NotEnabledError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    """A transition; ``label`` is None for a silent (tau) transition."""

    id: str
    label: Optional[str] = None

    @property
    def silent(self) -> bool:
        return self.label is None


@dataclass(frozen=True)
class Arc:
    source: str
    target: str


@dataclass(frozen=True)
class Marking:
    """Multiset of tokens over places; zero counts are not stored."""

    tokens: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        for place, count in self.tokens:
            if count < 0:
                raise ValidationError(f"negative token count on {place!r}")
        cleaned = tuple(sorted((p, c) for p, c in self.tokens if c > 0))
        object.__setattr__(self, "tokens", cleaned)

    @classmethod
    def of(cls, counts: Mapping[str, int]) -> "Marking":
        return cls(tuple(counts.items()))

    def __getitem__(self, place: str) -> int:
        for p, c in self.tokens:
            if p == place:
                return c
        return 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.tokens)

    @property
    def total(self) -> int:
        return sum(c for _, c in self.tokens)

    def __str__(self) -> str:
        inner = ", ".join(p if c == 1 else f"{p}:{c}" for p, c in self.tokens)
        return f"[{inner}]"


@dataclass(frozen=True)
class CompiledNet:
    """Index-based view used by search code; markings are count tuples."""

    places: tuple[str, ...]
    place_index: dict[str, int]
    transitions: tuple[Transition, ...]
    pre: tuple[tuple[int, ...], ...]
    post: tuple[tuple[int, ...], ...]
    initial: tuple[int, ...]
    final: tuple[int, ...]

    def to_vector(self, marking: Marking) -> tuple[int, ...]:
        vec = [0] * len(self.places)
        for place, count in marking.tokens:
            if place not in self.place_index:
                raise ValidationError(f"marking refers to unknown place {place!r}")
            vec[self.place_index[place]] = count
        return tuple(vec)

    def to_marking(self, vec: tuple[int, ...]) -> Marking:
        return Marking(tuple((self.places[i], c) for i, c in enumerate(vec) if c))

    def is_enabled(self, vec: tuple[int, ...], t: int) -> bool:
        pre = self.pre[t]
        return bool(pre) and all(vec[p] >= 1 for p in pre)

    def fire(self, vec: tuple[int, ...], t: int) -> tuple[int, ...]:
        out = list(vec)
        for p in self.pre[t]:
            out[p] -= 1
        for p in self.post[t]:
            out[p] += 1
        return tuple(out)

    def enabled(self, vec: tuple[int, ...]) -> list[int]:
        return [t for t in range(len(self.transitions)) if self.is_enabled(vec, t)]


@dataclass(frozen=True)
class WorkflowNet:
    """Place/transition net with a unique source place and a unique sink place."""

    places: tuple[str, ...]
    transitions: tuple[Transition, ...]
    arcs: tuple[Arc, ...]
    name: str = "net"

    def __post_init__(self) -> None:
        object.__setattr__(self, "places", tuple(self.places))
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "arcs", tuple(self.arcs))
        place_ids = set(self.places)
        trans_ids = {t.id for t in self.transitions}
        if len(place_ids) != len(self.places) or len(trans_ids) != len(self.transitions):
            raise ValidationError("duplicate place or transition id")
        if place_ids & trans_ids:
            raise ValidationError(f"ids used for both places and transitions: {place_ids & trans_ids}")
        if len(set(self.arcs)) != len(self.arcs):
            raise ValidationError("duplicate arc (arc weights other than 1 are unsupported)")
        for arc in self.arcs:
            forward = arc.source in place_ids and arc.target in trans_ids
            backward = arc.source in trans_ids and arc.target in place_ids
            if not (forward or backward):
                raise ValidationError(f"arc {arc.source}->{arc.target} is not place/transition")
        sources = [p for p in self.places if not self.place_preset[p]]
        sinks = [p for p in self.places if not self.place_postset[p]]
        if len(sources) != 1 or len(sinks) != 1:
            raise ValidationError(
                f"a workflow net needs one source and one sink place, found {sources} and {sinks}"
            )

    # -- structure ---------------------------------------------------------

    @cached_property
    def preset(self) -> dict[str, tuple[str, ...]]:
        pre: dict[str, list[str]] = {t.id: [] for t in self.transitions}
        for arc in self.arcs:
            if arc.target in pre:
                pre[arc.target].append(arc.source)
        return {t: tuple(sorted(ps)) for t, ps in pre.items()}

    @cached_property
    def postset(self) -> dict[str, tuple[str, ...]]:
        post: dict[str, list[str]] = {t.id: [] for t in self.transitions}
        for arc in self.arcs:
            if arc.source in post:
                post[arc.source].append(arc.target)
        return {t: tuple(sorted(ps)) for t, ps in post.items()}

    @cached_property
    def place_preset(self) -> dict[str, tuple[str, ...]]:
        pre: dict[str, list[str]] = {p: [] for p in self.places}
        for arc in self.arcs:
            if arc.target in pre:
                pre[arc.target].append(arc.source)
        return {p: tuple(sorted(ts)) for p, ts in pre.items()}

    @cached_property
    def place_postset(self) -> dict[str, tuple[str, ...]]:
        post: dict[str, list[str]] = {p: [] for p in self.places}
        for arc in self.arcs:
            if arc.source in post:
                post[arc.source].append(arc.target)
        return {p: tuple(sorted(ts)) for p, ts in post.items()}

    @property
    def source(self) -> str:
        return next(p for p in self.places if not self.place_preset[p])

    @property
    def sink(self) -> str:
        return next(p for p in self.places if not self.place_postset[p])

    @property
    def initial_marking(self) -> Marking:
        return Marking(((self.source, 1),))

    @property
    def final_marking(self) -> Marking:
        return Marking(((self.sink, 1),))

    @cached_property
    def labels(self) -> frozenset[str]:
        """A_M: labels of the visible transitions."""
        return frozenset(t.label for t in self.transitions if t.label is not None)

    def transition(self, transition_id: str) -> Transition:
        for t in self.transitions:
            if t.id == transition_id:
                return t
        raise KeyError(transition_id)

    @cached_property
    def compiled(self) -> CompiledNet:
        order = tuple(sorted(self.transitions, key=lambda t: t.id))
        place_index = {p: i for i, p in enumerate(self.places)}
        compiled = CompiledNet(
            places=self.places,
            place_index=place_index,
            transitions=order,
            pre=tuple(tuple(place_index[p] for p in self.preset[t.id]) for t in order),
            post=tuple(tuple(place_index[p] for p in self.postset[t.id]) for t in order),
            initial=(),
            final=(),
        )
        object.__setattr__(compiled, "initial", compiled.to_vector(self.initial_marking))
        object.__setattr__(compiled, "final", compiled.to_vector(self.final_marking))
        return compiled

    def structure_check(self) -> bool:
        """True when every node lies on a path from the source to the sink."""
        succ: dict[str, list[str]] = {}
        pred: dict[str, list[str]] = {}
        for arc in self.arcs:
            succ.setdefault(arc.source, []).append(arc.target)
            pred.setdefault(arc.target, []).append(arc.source)
        forward = _reach(self.source, succ)
        backward = _reach(self.sink, pred)
        nodes = set(self.places) | {t.id for t in self.transitions}
        return nodes <= forward and nodes <= backward

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "places": list(self.places),
            "transitions": [{"id": t.id, "label": t.label} for t in self.transitions],
            "arcs": [[a.source, a.target] for a in self.arcs],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "WorkflowNet":
        return cls(
            places=tuple(data["places"]),
            transitions=tuple(Transition(t["id"], t.get("label")) for t in data["transitions"]),
            arcs=tuple(Arc(s, t) for s, t in data["arcs"]),
            name=data.get("name", "net"),
        )

    @classmethod
    def build(
        cls,
        places: Iterable[str],
        transitions: Mapping[str, Optional[str]],
        arcs: Iterable[tuple[str, str]],
        name: str = "net",
    ) -> "WorkflowNet":
        """Convenience constructor from plain ids: ``transitions`` maps id to label."""
        return cls(
            places=tuple(places),
            transitions=tuple(Transition(tid, label) for tid, label in transitions.items()),
            arcs=tuple(Arc(s, t) for s, t in arcs),
            name=name,
        )


def _reach(start: str, adjacency: Mapping[str, list[str]]) -> set[str]:
    seen = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        for nxt in adjacency.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def enabled(net: WorkflowNet, m: Marking) -> list[Transition]:
    """Transitions enabled in ``m``, ordered by id."""
    c = net.compiled
    vec = c.to_vector(m)
    return [c.transitions[t] for t in c.enabled(vec)]


def fire(net: WorkflowNet, m: Marking, t: Transition | str) -> Marking:
    """Fire ``t`` in ``m``: m' = m - preset(t) + postset(t)."""
    tid = t if isinstance(t, str) else t.id
    c = net.compiled
    index = next((i for i, tr in enumerate(c.transitions) if tr.id == tid), None)
    if index is None:
        raise ValidationError(f"unknown transition {tid!r}")
    vec = c.to_vector(m)
    if not c.is_enabled(vec, index):
        raise NotEnabledError(f"transition {tid!r} is not enabled in {m}")
    return c.to_marking(c.fire(vec, index))


@dataclass(frozen=True)
class SoundnessReport:
    is_workflow_net: bool
    dead_transitions: tuple[str, ...]
    final_reachable_from_all_explored: bool
    truncated: bool
    explored: int = 0
    stuck_markings: tuple[Marking, ...] = field(default=(), repr=False)

    @property
    def sound(self) -> bool:
        return (
            self.is_workflow_net
            and not self.dead_transitions
            and self.final_reachable_from_all_explored
            and not self.truncated
        )

    def to_dict(self) -> dict:
        return {
            "is_workflow_net": self.is_workflow_net,
            "dead_transitions": list(self.dead_transitions),
            "final_reachable_from_all_explored": self.final_reachable_from_all_explored,
            "truncated": self.truncated,
            "explored": self.explored,
            "stuck_markings": [str(m) for m in self.stuck_markings],
        }


def soundness_report(net: WorkflowNet, state_cap: int = 100_000) -> SoundnessReport:
    """Bounded soundness check over the reachability graph.

    Explores at most ``state_cap`` markings breadth-first. Dead transitions are
    the ones never enabled in the explored space; the final marking must be
    reachable (within the explored graph) from every explored marking.
    """
    c = net.compiled
    index = {c.initial: 0}
    order = [c.initial]
    reverse: list[list[int]] = [[]]
    fired: set[int] = set()
    queue = deque([0])
    truncated = False

    while queue:
        current = queue.popleft()
        vec = order[current]
        for t in c.enabled(vec):
            fired.add(t)
            nxt = c.fire(vec, t)
            target = index.get(nxt)
            if target is None:
                if len(order) >= state_cap:
                    truncated = True
                    continue
                target = len(order)
                index[nxt] = target
                order.append(nxt)
                reverse.append([])
                queue.append(target)
            reverse[target].append(current)

    can_finish: set[int] = set()
    final_id = index.get(c.final)
    if final_id is not None:
        can_finish.add(final_id)
        back = deque([final_id])
        while back:
            node = back.popleft()
            for prev in reverse[node]:
                if prev not in can_finish:
                    can_finish.add(prev)
                    back.append(prev)

    stuck = tuple(c.to_marking(order[i]) for i in range(len(order)) if i not in can_finish)
    dead = tuple(sorted(c.transitions[t].id for t in range(len(c.transitions)) if t not in fired))
    if truncated:
        logger.warning("Reachability exploration truncated at %d markings", state_cap)
    return SoundnessReport(
        is_workflow_net=net.structure_check(),
        dead_transitions=dead,
        final_reachable_from_all_explored=not stuck,
        truncated=truncated,
        explored=len(order),
        stuck_markings=stuck,
    )
