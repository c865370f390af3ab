"""Tests for directly-follows graphs, variant filtering and the two miners."""

import pytest
from conftest import make_log

from flow_monitor.conformance import align_complete
from flow_monitor.discovery import (
    DiscoveryConfig,
    build_dfg,
    discover,
    filter_variants,
    footprint,
    footprint_table,
)
from flow_monitor.errors import AlphaUnrepresentableError, DiscoveryError, ValidationError
from flow_monitor.events import EventLog
from flow_monitor.petri import soundness_report


class TestBuildDfg:
    """Tests for build_dfg."""

    def test_counts(self):
        dfg = build_dfg(make_log("abc", "abc"))
        assert dfg.edges == {("a", "b"): 2, ("b", "c"): 2}
        assert dfg.starts == {"a": 2}
        assert dfg.ends == {"c": 2}
        assert dfg.activities == {"a": 2, "b": 2, "c": 2}

    def test_single_event_trace(self):
        """Test that a one-event trace is both start and end."""
        dfg = build_dfg(make_log("a"))
        assert dfg.edges == {}
        assert dfg.starts == dfg.ends == {"a": 1}

    def test_both_directions(self):
        dfg = build_dfg(make_log("ab", "ba"))
        assert dfg.edges == {("a", "b"): 1, ("b", "a"): 1}

    def test_empty_log_rejected(self):
        with pytest.raises(ValidationError):
            build_dfg(EventLog())


class TestFilterVariants:
    """Tests for cumulative variant coverage."""

    def test_dominant_variant_alone(self):
        """Test that 90 x A covers 0.75 on its own."""
        log = make_log(*(["ab"] * 90 + ["ba"] * 10))
        kept = filter_variants(log, 0.75)
        assert set(kept.variants()) == {("a", "b")}
        assert len(kept) == 90

    def test_two_variants_needed(self):
        """Test 50/30/20 at 0.75 keeps the two most frequent."""
        log = make_log(*(["abc"] * 50 + ["acb"] * 30 + ["bac"] * 20))
        kept = filter_variants(log, 0.75)
        assert set(kept.variants()) == {("a", "b", "c"), ("a", "c", "b")}

    def test_full_coverage_is_identity(self):
        log = make_log("ab", "ba", "ab")
        assert filter_variants(log, 1.0) == log

    def test_ties_break_lexicographically(self):
        """Test that equal counts keep the smaller variant first."""
        log = make_log("ba", "ab")
        assert set(filter_variants(log, 0.5).variants()) == {("a", "b")}

    def test_monotone(self):
        log = make_log(*(["abc"] * 5 + ["acb"] * 3 + ["bac"] * 2 + ["cab"]))
        previous = set()
        for coverage in (0.2, 0.5, 0.8, 1.0):
            kept = set(filter_variants(log, coverage).variants())
            assert previous <= kept
            previous = kept

    def test_invalid_coverage(self):
        with pytest.raises(ValidationError):
            filter_variants(make_log("a"), 0.0)


class TestDfgNet:
    """Tests for the state-machine miner."""

    def test_single_variant(self):
        """Test that a single variant gives three labeled transitions and replays exactly."""
        log = make_log(*(["abc"] * 100))
        net = discover(log, DiscoveryConfig("dfg_net"))
        assert net.labels == {"a", "b", "c"}
        assert len([t for t in net.transitions if not t.silent]) == 3
        assert align_complete(net, "abc").cost == 0
        assert soundness_report(net).sound

    def test_rediscovery_of_interleavings(self):
        """Test that every generating variant replays with zero cost."""
        variants = ["abcd", "acbd", "aed"]
        net = discover(make_log(*variants), DiscoveryConfig("dfg_net", variant_coverage=1.0))
        for variant in variants:
            assert align_complete(net, variant).cost == 0

    def test_min_edge_frequency_prunes(self):
        """Test that rare edges disappear and unreachable activities are pruned."""
        log = make_log(*(["abc"] * 20 + ["axc"]))
        net = discover(log, DiscoveryConfig("dfg_net", variant_coverage=1.0, min_edge_frequency=0.5))
        assert "x" not in net.labels
        assert net.labels == {"a", "b", "c"}

    def test_deterministic(self):
        log = make_log("abc", "acb", "abc")
        assert discover(log) == discover(log)

    def test_only_empty_traces(self):
        log = make_log("", "")
        with pytest.raises(DiscoveryError):
            discover(log)

    def test_handover_net_is_sound(self, handover_net):
        """Test that the default handover net has no dead transitions and can always finish."""
        report = soundness_report(handover_net)
        assert report.dead_transitions == ()
        assert report.final_reachable_from_all_explored
        assert report.sound


class TestAlpha:
    """Tests for the footprint miner."""

    def test_parallel_footprint(self):
        """Test that b and c come out concurrent."""
        log = make_log("abcd", "acbd")
        fp = footprint(build_dfg(log))
        assert fp.relation("b", "c") == "||"
        assert fp.relation("a", "b") == "->"
        assert fp.relation("d", "c") == "<-"
        assert fp.relation("a", "d") == "#"

        net = discover(log, DiscoveryConfig("alpha", variant_coverage=1.0))
        assert align_complete(net, "abcd").cost == 0
        assert align_complete(net, "acbd").cost == 0
        b_out = set(net.postset["t_b"])
        c_out = set(net.postset["t_c"])
        assert b_out.isdisjoint(c_out)
        assert soundness_report(net).sound

    def test_choice(self):
        """Test that exclusive branches share one place."""
        log = make_log("abd", "acd")
        net = discover(log, DiscoveryConfig("alpha", variant_coverage=1.0))
        assert net.postset["t_a"] == net.preset["t_b"] == net.preset["t_c"]
        assert align_complete(net, "acd").cost == 0

    def test_short_loop_rejected(self):
        """Test that a length-1 loop recommends the other miner."""
        with pytest.raises(AlphaUnrepresentableError) as excinfo:
            discover(make_log("abbc"), DiscoveryConfig("alpha"))
        assert "dfg_net" in str(excinfo.value)

    def test_length_two_loop_rejected(self):
        with pytest.raises(AlphaUnrepresentableError):
            discover(make_log("abab"), DiscoveryConfig("alpha"))

    def test_footprint_table(self):
        rows = footprint_table(build_dfg(make_log("ab")))
        assert rows == [["", "a", "b"], ["a", "#", "->"], ["b", "<-", "#"]]


class TestDiscoveryConfig:
    def test_unknown_algorithm(self):
        with pytest.raises(ValidationError):
            DiscoveryConfig("ilp")
