"""Pytest configuration for flow-monitor tests."""

import pytest

from flow_monitor.config import reset_config
from flow_monitor.discovery import DiscoveryConfig, discover
from flow_monitor.events import EventLog, Trace
from flow_monitor.petri import WorkflowNet
from flow_monitor.scenario import PepConfig, default_handover_scenario, simulate


@pytest.fixture(autouse=True)
def fresh_config(monkeypatch, tmp_path):
    """Each test sees built-in defaults unless it writes its own config."""
    monkeypatch.setenv("FLOW_MONITOR_CONFIG", str(tmp_path / "absent.yaml"))
    monkeypatch.delenv("FLOW_MONITOR_LOG_LEVEL", raising=False)
    reset_config()
    yield
    reset_config()


def make_log(*variants, prefix="t", component="ARBC"):
    """EventLog from label sequences; every label attributed to ``component``."""
    traces = []
    for i, labels in enumerate(variants):
        traces.append(Trace.build(f"{prefix}{i}", [(label, component) for label in labels]))
    return EventLog(traces=tuple(traces))


@pytest.fixture
def seq_net():
    """source -> a -> b -> c -> sink."""
    return WorkflowNet.build(
        places=["source", "p1", "p2", "sink"],
        transitions={"ta": "a", "tb": "b", "tc": "c"},
        arcs=[
            ("source", "ta"),
            ("ta", "p1"),
            ("p1", "tb"),
            ("tb", "p2"),
            ("p2", "tc"),
            ("tc", "sink"),
        ],
        name="seq",
    )


@pytest.fixture
def and_net():
    """a, then b || c, then d."""
    return WorkflowNet.build(
        places=["source", "p1", "p2", "p3", "p4", "sink"],
        transitions={"ta": "a", "tb": "b", "tc": "c", "td": "d"},
        arcs=[
            ("source", "ta"),
            ("ta", "p1"),
            ("ta", "p2"),
            ("p1", "tb"),
            ("p2", "tc"),
            ("tb", "p3"),
            ("tc", "p4"),
            ("p3", "td"),
            ("p4", "td"),
            ("td", "sink"),
        ],
        name="and",
    )


@pytest.fixture
def choice_net():
    """a, then b or c (via a silent skip of neither), then d."""
    return WorkflowNet.build(
        places=["source", "p1", "p2", "sink"],
        transitions={"ta": "a", "tb": "b", "tc": "c", "tau": None, "td": "d"},
        arcs=[
            ("source", "ta"),
            ("ta", "p1"),
            ("p1", "tb"),
            ("p1", "tc"),
            ("p1", "tau"),
            ("tb", "p2"),
            ("tc", "p2"),
            ("tau", "p2"),
            ("p2", "td"),
            ("td", "sink"),
        ],
        name="choice",
    )


@pytest.fixture(scope="session")
def handover_scenario():
    return default_handover_scenario()


@pytest.fixture(scope="session")
def clean_log(handover_scenario):
    """100 clean traces, rho=0.99, seed 0."""
    return simulate(handover_scenario, PepConfig(rho=0.99), n_traces=100, seed=0, trace_prefix="n")


@pytest.fixture(scope="session")
def handover_net(clean_log):
    return discover(clean_log, DiscoveryConfig("dfg_net", variant_coverage=0.75))
