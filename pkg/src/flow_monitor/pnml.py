"""PNML import/export for workflow nets.

Supports the place/transition subset: ``net``, ``page``, ``place``,
``transition``, ``arc``, ``initialMarking`` and arc ``inscription`` (weight 1
only). Silent transitions carry the ProM ``$invisible$`` marker. The final
marking goes in a ``finalmarkings`` block; when absent the unique sink place is
used.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Optional

from .errors import PnmlError, ValidationError
from .petri import Arc, Marking, Transition, WorkflowNet

logger = logging.getLogger(__name__)

PNML_NS = "http://www.pnml.org/version-2009/grammar/pnml"
PTNET_TYPE = "http://www.pnml.org/version-2009/grammar/ptnet"
INVISIBLE = "$invisible$"
TOOL = "flow-monitor"


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _children(elem: ET.Element, name: str) -> list[ET.Element]:
    return [c for c in elem if _local(c.tag) == name]


def _text(elem: ET.Element) -> Optional[str]:
    """Content of a ``<x><text>...</text></x>`` wrapper."""
    for child in elem:
        if _local(child.tag) == "text":
            return (child.text or "").strip()
    return None


def _path(kind: str, elem: ET.Element) -> str:
    ident = elem.get("id")
    return f"{kind}[{ident}]" if ident else kind


def _sub(parent: ET.Element, tag: str, text: Optional[str] = None, **attrs: str) -> ET.Element:
    node = ET.SubElement(parent, tag, attrs)
    if text is not None:
        ET.SubElement(node, "text").text = text
    return node


def write_pnml(net: WorkflowNet, path: Path | str) -> None:
    root = ET.Element("pnml", {"xmlns": PNML_NS})
    net_el = ET.SubElement(root, "net", {"id": net.name, "type": PTNET_TYPE})
    _sub(net_el, "name", net.name)
    page = ET.SubElement(net_el, "page", {"id": "page0"})

    initial = net.initial_marking
    for place in net.places:
        place_el = ET.SubElement(page, "place", {"id": place})
        _sub(place_el, "name", place)
        if initial[place]:
            _sub(place_el, "initialMarking", str(initial[place]))

    for t in net.transitions:
        t_el = ET.SubElement(page, "transition", {"id": t.id})
        _sub(t_el, "name", t.label if t.label is not None else t.id)
        if t.silent:
            ET.SubElement(
                t_el, "toolspecific", {"tool": "ProM", "version": "6.4", "activity": INVISIBLE}
            )

    for i, arc in enumerate(net.arcs):
        ET.SubElement(page, "arc", {"id": f"a{i}", "source": arc.source, "target": arc.target})

    tool = ET.SubElement(net_el, "toolspecific", {"tool": TOOL, "version": "1"})
    finals = ET.SubElement(tool, "finalmarkings")
    marking_el = ET.SubElement(finals, "marking")
    for place, count in net.final_marking.tokens:
        _sub(marking_el, "place", str(count), idref=place)

    tree = ET.ElementTree(root)
    ET.indent(tree)
    tree.write(Path(path), encoding="utf-8", xml_declaration=True)
    logger.debug("Wrote PNML net %s to %s", net.name, path)


def read_pnml(path: Path | str) -> WorkflowNet:
    """Load a workflow net; schema violations raise PnmlError with an element path."""
    try:
        root = ET.parse(Path(path)).getroot()
    except ET.ParseError as e:
        raise PnmlError(f"{path}: malformed XML: {e}", element="pnml") from e

    if _local(root.tag) != "pnml":
        raise PnmlError(f"{path}: root element is <{_local(root.tag)}>", element=_local(root.tag))
    nets = _children(root, "net")
    if len(nets) != 1:
        raise PnmlError(f"{path}: expected exactly one <net>, found {len(nets)}", element="pnml")
    net_el = nets[0]
    base = f"pnml/{_path('net', net_el)}"
    name = net_el.get("id") or Path(path).stem

    places: list[str] = []
    initial: dict[str, int] = {}
    transitions: list[Transition] = []
    arcs: list[Arc] = []
    final: Optional[dict[str, int]] = None

    # tool-specific blocks may reuse element names such as <place>
    tool_owned = {
        id(inner)
        for ts in net_el.iter()
        if _local(ts.tag) == "toolspecific"
        for inner in ts.iter()
        if inner is not ts
    }
    for elem in net_el.iter():
        kind = _local(elem.tag)
        where = f"{base}/{_path(kind, elem)}"
        if id(elem) in tool_owned and kind != "finalmarkings":
            continue
        if kind == "place":
            pid = elem.get("id")
            if not pid:
                raise PnmlError("place without id", element=where)
            places.append(pid)
            for init in _children(elem, "initialMarking"):
                initial[pid] = _count(init, where + "/initialMarking")
        elif kind == "transition":
            tid = elem.get("id")
            if not tid:
                raise PnmlError("transition without id", element=where)
            invisible = any(
                ts.get("activity") == INVISIBLE for ts in _children(elem, "toolspecific")
            )
            label_el = _children(elem, "name")
            label = _text(label_el[0]) if label_el else None
            transitions.append(Transition(tid, None if invisible else (label or tid)))
        elif kind == "arc":
            source, target = elem.get("source"), elem.get("target")
            if not source or not target:
                raise PnmlError("arc without source or target", element=where)
            for insc in _children(elem, "inscription"):
                weight = _count(insc, where + "/inscription")
                if weight != 1:
                    raise PnmlError(f"arc weight {weight} is not supported", element=where)
            arcs.append(Arc(source, target))
        elif kind == "finalmarkings" and final is None:
            markings = _children(elem, "marking")
            if markings:
                final = {}
                for p in _children(markings[0], "place"):
                    idref = p.get("idref")
                    if not idref:
                        raise PnmlError("final marking place without idref", element=where)
                    final[idref] = _count(p, f"{where}/marking/place[{idref}]")

    try:
        net = WorkflowNet(tuple(places), tuple(transitions), tuple(arcs), name=name)
    except ValidationError as e:
        raise PnmlError(f"{path}: {e}", element=base) from e

    if initial and Marking.of(initial) != net.initial_marking:
        raise PnmlError(
            f"initial marking {Marking.of(initial)} is not {net.initial_marking}", element=base
        )
    if final is not None and Marking.of(final) != net.final_marking:
        raise PnmlError(
            f"final marking {Marking.of(final)} is not {net.final_marking}", element=base
        )
    logger.info(
        "Loaded %s: %d places, %d transitions, %d arcs",
        name,
        len(net.places),
        len(net.transitions),
        len(net.arcs),
    )
    return net


def _count(elem: ET.Element, where: str) -> int:
    raw = _text(elem)
    if raw is None:
        raw = (elem.text or "").strip()
    try:
        value = int(raw)
    except ValueError as e:
        raise PnmlError(f"expected an integer, got {raw!r}", element=where) from e
    if value < 0:
        raise PnmlError(f"negative count {value}", element=where)
    return value
